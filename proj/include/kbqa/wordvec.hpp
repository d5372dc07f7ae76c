#pragma once

#include <atomic>
#include <cstddef>
#include <iosfwd>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace kbqa {

struct Fact;
class KnowledgeBase;

// Lowercase ASCII, split on whitespace and punctuation, drop empties. A '.' or
// ',' between two digits stays inside the token so numbers survive intact.
std::vector<std::string> tokenize(std::string_view phrase);

class WordVectorTable {
 public:
  explicit WordVectorTable(std::size_t dim);

  std::size_t dim() const { return dim_; }
  std::size_t size() const { return index_.size(); }
  bool empty() const { return index_.empty(); }
  bool contains(std::string_view token) const;
  // Null if the token is out of vocabulary.
  const double* find(std::string_view token) const;

  // Inserts or overwrites; returns false when the token already existed.
  bool set(const std::string& token, std::span<const double> vec);

  // Count of phrases that embedded to zero because every token was OOV.
  std::size_t all_oov_warnings() const { return all_oov_->load(); }
  void note_all_oov() const { all_oov_->fetch_add(1); }
  // Duplicate rows seen by load_vectors (last write wins).
  std::size_t duplicate_rows() const { return duplicates_; }
  void note_duplicate() { ++duplicates_; }

  double max_norm() const;

 private:
  std::size_t dim_;
  std::unordered_map<std::string, std::size_t> index_;
  std::vector<double> data_;
  std::shared_ptr<std::atomic<std::size_t>> all_oov_ = std::make_shared<std::atomic<std::size_t>>(0);
  std::size_t duplicates_ = 0;
};

WordVectorTable load_vectors(const std::string& path, std::size_t dim);
WordVectorTable load_vectors(std::istream& in, std::size_t dim, const std::string& source = "<stream>");

// Mean of the in-vocabulary token vectors. All-OOV phrases give a zero vector
// and bump the table's warning counter. Throws DegenerateInputError when the
// phrase has no tokens at all.
std::vector<double> phrase_embedding(std::string_view phrase, const WordVectorTable& table);

// Subject half followed by object half, 2*dim long. The relation does not
// enter except through a Comparative suffix, which is embedded with the object.
std::vector<double> fact_embedding(const Fact& fact, const WordVectorTable& table);

// Embeddings of every KB fact, one row per fact in load order, with row norms.
class FactMatrix {
 public:
  FactMatrix() = default;
  FactMatrix(const KnowledgeBase& kb, const WordVectorTable& table);

  std::size_t rows() const { return norms_.size(); }
  std::size_t dim() const { return dim_; }
  std::span<const double> row(std::size_t i) const { return {data_.data() + i * dim_, dim_}; }
  double row_norm(std::size_t i) const { return norms_[i]; }
  bool is_zero(std::size_t i) const { return norms_[i] == 0.0; }
  std::span<const double> data() const { return data_; }

 private:
  std::size_t dim_ = 0;
  std::vector<double> data_;
  std::vector<double> norms_;
};

}  // namespace kbqa
