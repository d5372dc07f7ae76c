#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "kbqa/encoders.hpp"
#include "kbqa/scorer.hpp"
#include "kbqa/tensor.hpp"

namespace kbqa {

// Versioned binary container of named float64 tensors.
//
// Layout (all integers little-endian):
//   magic "KBQACKPT" | u32 version
//   str kind | u32 n, n x (str key, i64 value)     -- dims
//   u32 n, n x (str key, str value)                -- metadata
//   u64 vocabulary hash | u32 n, n x str           -- vocabulary
//   u32 n, n x (str name, u32 rank, rank x u64 dim, prod(dims) x f64)
// where str = u32 byte length followed by the bytes.
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  struct Record {
    std::string name;
    Shape shape;
    std::vector<double> values;
  };

  std::string kind;
  std::map<std::string, std::int64_t> dims;
  std::map<std::string, std::string> metadata;
  std::vector<std::string> vocabulary;
  std::uint64_t vocabulary_hash = 0;
  std::vector<Record> records;

  const Record& record(const std::string& name) const;
  std::int64_t dim(const std::string& key) const;
  double real(const std::string& key) const;
};

std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::string& bytes, const std::string& source = "<bytes>");

// Writes to a sibling temporary file and renames it into place.
void write_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint read_checkpoint(const std::string& path);

Checkpoint to_checkpoint(RelationClassifier& model, const std::map<std::string, std::string>& metadata = {});
Checkpoint to_checkpoint(SourceClassifier& model, const std::map<std::string, std::string>& metadata = {});
Checkpoint to_checkpoint(Scorer& model, const std::map<std::string, std::string>& metadata = {});

RelationClassifier relation_classifier_from(const Checkpoint& ckpt);
SourceClassifier source_classifier_from(const Checkpoint& ckpt);
Scorer scorer_from(const Checkpoint& ckpt);

// Atomic text write (temp file + rename).
void write_file_atomic(const std::string& path, const std::string& contents);
std::string format_double(double v);

}  // namespace kbqa
