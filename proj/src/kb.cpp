#include "kbqa/kb.hpp"

#include <fstream>
#include <istream>
#include <ostream>
#include <set>

#include "kbqa/errors.hpp"
#include "kbqa/wordvec.hpp"

namespace kbqa {

namespace {

constexpr std::array<std::string_view, kNumRelations> kRelationNames = {
    "Category", "Comparative", "HasA",      "IsA",           "HasProperty", "CapableOf", "Desires",
    "RelatedTo", "AtLocation", "PartOf", "ReceivesAction", "UsedFor",     "CreatedBy",
};

std::vector<std::string_view> split_tabs(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find('\t', start);
    out.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

std::string normalize(std::string_view phrase) {
  std::string out;
  for (const std::string& tok : tokenize(phrase)) {
    if (!out.empty()) out += ' ';
    out += tok;
  }
  return out;
}

}  // namespace

std::string_view to_string(Relation r) { return kRelationNames.at(static_cast<std::size_t>(r)); }

const std::array<Relation, kNumRelations>& all_relations() {
  static const std::array<Relation, kNumRelations> rels = [] {
    std::array<Relation, kNumRelations> a{};
    for (std::size_t i = 0; i < kNumRelations; ++i) a[i] = static_cast<Relation>(i);
    return a;
  }();
  return rels;
}

std::optional<Relation> parse_relation(std::string_view token) {
  if (token.starts_with("/r/")) token.remove_prefix(3);
  if (token.starts_with("Comparative-") && token.size() > 12) return Relation::kComparative;
  for (std::size_t i = 0; i < kNumRelations; ++i) {
    if (token == kRelationNames[i]) return static_cast<Relation>(i);
  }
  return std::nullopt;
}

std::string Fact::relation_token() const {
  std::string tok(to_string(relation));
  if (!relation_suffix.empty()) tok += "-" + relation_suffix;
  return tok;
}

Fact make_fact(std::string id, std::string subject, std::string_view relation_token, std::string object) {
  const auto r = parse_relation(relation_token);
  if (!r) throw DataError("unknown relation '" + std::string(relation_token) + "'");
  Fact f;
  f.id = std::move(id);
  f.subject = std::move(subject);
  f.relation = *r;
  f.object = std::move(object);
  if (relation_token.starts_with("/r/")) relation_token.remove_prefix(3);
  if (*r == Relation::kComparative && relation_token.size() > 12) {
    f.relation_suffix = std::string(relation_token.substr(12));
  }
  f.subject_normalized = normalize(f.subject);
  f.object_normalized = normalize(f.object);
  if (f.id.empty()) throw DataError("empty fact id");
  if (f.subject_normalized.empty()) throw DataError("fact " + f.id + ": subject has no tokens");
  if (f.object_normalized.empty()) throw DataError("fact " + f.id + ": object has no tokens");
  return f;
}

KnowledgeBase::KnowledgeBase(std::vector<Fact> facts) : facts_(std::move(facts)) {
  by_id_.reserve(facts_.size());
  for (std::size_t i = 0; i < facts_.size(); ++i) {
    if (!by_id_.emplace(facts_[i].id, i).second) throw DataError("duplicate fact id '" + facts_[i].id + "'");
    buckets_[static_cast<std::size_t>(facts_[i].relation)].push_back(i);
  }
}

std::optional<std::size_t> KnowledgeBase::index_of(std::string_view id) const {
  const auto it = by_id_.find(std::string(id));
  if (it == by_id_.end()) return std::nullopt;
  return it->second;
}

const Fact* KnowledgeBase::find(std::string_view id) const {
  const auto idx = index_of(id);
  return idx ? &facts_[*idx] : nullptr;
}

const Fact& KnowledgeBase::at(std::string_view id) const {
  const Fact* f = find(id);
  if (!f) throw DataError("unknown fact id '" + std::string(id) + "'");
  return *f;
}

KnowledgeBase parse_kb(std::istream& in, const std::string& source) {
  std::vector<Fact> facts;
  std::unordered_map<std::string, std::size_t> first_line;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line.front() == '#') continue;
    const auto fields = split_tabs(line);
    if (fields.size() != 4) {
      throw LoadError(source, lineno, "expected 4 tab-separated fields, found " + std::to_string(fields.size()));
    }
    if (!parse_relation(fields[2])) {
      throw LoadError(source, lineno, "unknown relation '" + std::string(fields[2]) + "'");
    }
    const std::string id(fields[0]);
    if (const auto [it, inserted] = first_line.emplace(id, lineno); !inserted) {
      throw LoadError(source, lineno, "duplicate fact id '" + id + "' (first seen on line " + std::to_string(it->second) + ")");
    }
    try {
      facts.push_back(make_fact(id, std::string(fields[1]), fields[2], std::string(fields[3])));
    } catch (const DataError& e) {
      throw LoadError(source, lineno, e.what());
    }
  }
  return KnowledgeBase(std::move(facts));
}

KnowledgeBase parse_kb(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open knowledge base file '" + path + "'");
  return parse_kb(in, path);
}

void serialize_kb(const KnowledgeBase& kb, std::ostream& out) {
  for (const Fact& f : kb.facts()) {
    out << f.id << '\t' << f.subject << '\t' << f.relation_token() << '\t' << f.object << '\n';
  }
}

std::vector<Fact> facts_with_relation(const KnowledgeBase& kb, Relation r) {
  std::vector<Fact> out;
  out.reserve(kb.bucket(r).size());
  for (std::size_t i : kb.bucket(r)) out.push_back(kb.fact(i));
  return out;
}

KbStats kb_stats(const KnowledgeBase& kb) {
  KbStats s;
  std::set<std::string> vocab;
  for (const Fact& f : kb.facts()) {
    ++s.per_relation[static_cast<std::size_t>(f.relation)];
    for (auto& t : tokenize(f.subject)) vocab.insert(std::move(t));
    for (auto& t : tokenize(f.object)) vocab.insert(std::move(t));
  }
  s.total_facts = kb.size();
  s.vocabulary_size = vocab.size();
  return s;
}

}  // namespace kbqa
