#pragma once

#include <array>
#include <cstddef>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace kbqa {

enum class Relation : std::uint8_t {
  kCategory,
  kComparative,
  kHasA,
  kIsA,
  kHasProperty,
  kCapableOf,
  kDesires,
  kRelatedTo,
  kAtLocation,
  kPartOf,
  kReceivesAction,
  kUsedFor,
  kCreatedBy,
};

inline constexpr std::size_t kNumRelations = 13;

std::string_view to_string(Relation r);
// Accepts the 13 canonical names, "Comparative-<suffix>", and an optional
// "/r/" prefix. Returns nullopt for anything else.
std::optional<Relation> parse_relation(std::string_view token);
const std::array<Relation, kNumRelations>& all_relations();

struct Fact {
  std::string id;
  std::string subject;
  Relation relation = Relation::kCategory;
  std::string object;
  // Suffix of a "Comparative-<suffix>" token, empty otherwise.
  std::string relation_suffix;
  // Lowercased, punctuation-stripped forms used for matching and embedding.
  std::string subject_normalized;
  std::string object_normalized;

  std::string relation_token() const;
};

inline Relation rel(const Fact& f) { return f.relation; }

struct KbStats {
  std::array<std::size_t, kNumRelations> per_relation{};
  std::size_t total_facts = 0;
  std::size_t vocabulary_size = 0;
};

// Immutable fact store with an id index and a relation index. Iteration order
// is load order.
class KnowledgeBase {
 public:
  KnowledgeBase() = default;
  explicit KnowledgeBase(std::vector<Fact> facts);

  std::size_t size() const { return facts_.size(); }
  bool empty() const { return facts_.empty(); }
  const std::vector<Fact>& facts() const { return facts_; }
  const Fact& fact(std::size_t index) const { return facts_.at(index); }

  std::optional<std::size_t> index_of(std::string_view id) const;
  const Fact* find(std::string_view id) const;
  const Fact& at(std::string_view id) const;

  // Fact indices with relation r in load order.
  const std::vector<std::size_t>& bucket(Relation r) const { return buckets_[static_cast<std::size_t>(r)]; }

 private:
  std::vector<Fact> facts_;
  std::unordered_map<std::string, std::size_t> by_id_;
  std::array<std::vector<std::size_t>, kNumRelations> buckets_;
};

Fact make_fact(std::string id, std::string subject, std::string_view relation_token, std::string object);

KnowledgeBase parse_kb(const std::string& path);
KnowledgeBase parse_kb(std::istream& in, const std::string& source = "<stream>");
void serialize_kb(const KnowledgeBase& kb, std::ostream& out);

std::vector<Fact> facts_with_relation(const KnowledgeBase& kb, Relation r);
KbStats kb_stats(const KnowledgeBase& kb);

}  // namespace kbqa
