#include "kbqa/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "kbqa/errors.hpp"

namespace kbqa {

namespace {

constexpr char kMagic[8] = {'K', 'B', 'Q', 'A', 'C', 'K', 'P', 'T'};

class Writer {
 public:
  void u32(std::uint32_t v) { le(v, 4); }
  void u64(std::uint64_t v) { le(v, 8); }
  void i64(std::int64_t v) { le(static_cast<std::uint64_t>(v), 8); }
  void f64(double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    le(bits, 8);
  }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    out_ += s;
  }
  void raw(const char* p, std::size_t n) { out_.append(p, n); }
  std::string take() { return std::move(out_); }

 private:
  void le(std::uint64_t v, int bytes) {
    for (int i = 0; i < bytes; ++i) out_ += static_cast<char>((v >> (8 * i)) & 0xFF);
  }
  std::string out_;
};

class Reader {
 public:
  Reader(const std::string& bytes, std::string source) : bytes_(bytes), source_(std::move(source)) {}

  std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
  std::uint64_t u64() { return le(8); }
  std::int64_t i64() { return static_cast<std::int64_t>(le(8)); }
  double f64() {
    const std::uint64_t bits = le(8);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  void expect_magic() {
    need(8);
    if (std::memcmp(bytes_.data() + pos_, kMagic, 8) != 0) fail("not a kbqa checkpoint");
    pos_ += 8;
  }
  bool done() const { return pos_ == bytes_.size(); }
  [[noreturn]] void fail(const std::string& what) const { throw LoadError(source_ + ": " + what); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) fail("truncated checkpoint");
  }
  std::uint64_t le(int bytes) {
    need(static_cast<std::size_t>(bytes));
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(bytes);
    return v;
  }

  const std::string& bytes_;
  std::string source_;
  std::size_t pos_ = 0;
};

void put_params(Checkpoint& c, const std::vector<ParamRef>& params) {
  for (const ParamRef& p : params) {
    const auto v = p.tensor->values();
    c.records.push_back({p.name, p.tensor->shape(), {v.begin(), v.end()}});
  }
}

void get_params(const Checkpoint& c, const std::vector<ParamRef>& params) {
  for (const ParamRef& p : params) {
    const auto& r = c.record(p.name);
    if (r.shape != p.tensor->shape()) {
      throw LoadError("checkpoint record '" + p.name + "' has shape " + shape_str(r.shape) + ", model expects " +
                      shape_str(p.tensor->shape()));
    }
    std::copy(r.values.begin(), r.values.end(), p.tensor->values().begin());
  }
}

void put_vocab(Checkpoint& c, const Vocabulary& v) {
  c.vocabulary = v.tokens();
  c.vocabulary_hash = v.hash();
}

Vocabulary get_vocab(const Checkpoint& c) {
  Vocabulary v = Vocabulary::from_tokens(c.vocabulary);
  if (v.hash() != c.vocabulary_hash) throw LoadError("checkpoint vocabulary hash mismatch");
  return v;
}

void expect_kind(const Checkpoint& c, const std::string& kind) {
  if (c.kind != kind) throw LoadError("checkpoint holds a '" + c.kind + "' model, expected '" + kind + "'");
}

Checkpoint classifier_checkpoint(const std::string& kind, QuestionClassifier& net,
                                 const std::map<std::string, std::string>& metadata) {
  Checkpoint c;
  c.kind = kind;
  c.dims = {{"embed_dim", static_cast<std::int64_t>(net.lstm().input_dim)},
            {"hidden_dim", static_cast<std::int64_t>(net.lstm().hidden_dim)},
            {"classes", static_cast<std::int64_t>(net.classes())}};
  c.metadata = metadata;
  c.metadata["dropout.embedding"] = format_double(net.dropout().embedding_rate);
  c.metadata["dropout.hidden"] = format_double(net.dropout().hidden_rate);
  put_vocab(c, net.vocab());
  put_params(c, net.params());
  return c;
}

QuestionClassifier classifier_from(const Checkpoint& c) {
  QuestionClassifier net(get_vocab(c), static_cast<std::size_t>(c.dim("embed_dim")),
                         static_cast<std::size_t>(c.dim("hidden_dim")), static_cast<std::size_t>(c.dim("classes")),
                         LstmDropout{c.real("dropout.embedding"), c.real("dropout.hidden")});
  get_params(c, net.params());
  return net;
}

}  // namespace

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

const Checkpoint::Record& Checkpoint::record(const std::string& name) const {
  for (const auto& r : records) {
    if (r.name == name) return r;
  }
  throw LoadError("checkpoint has no record '" + name + "'");
}

std::int64_t Checkpoint::dim(const std::string& key) const {
  const auto it = dims.find(key);
  if (it == dims.end()) throw LoadError("checkpoint header lacks dim '" + key + "'");
  return it->second;
}

double Checkpoint::real(const std::string& key) const {
  const auto it = metadata.find(key);
  if (it == metadata.end()) throw LoadError("checkpoint metadata lacks '" + key + "'");
  return std::strtod(it->second.c_str(), nullptr);
}

std::string encode_checkpoint(const Checkpoint& c) {
  Writer w;
  w.raw(kMagic, 8);
  w.u32(Checkpoint::kVersion);
  w.str(c.kind);
  w.u32(static_cast<std::uint32_t>(c.dims.size()));
  for (const auto& [k, v] : c.dims) {
    w.str(k);
    w.i64(v);
  }
  w.u32(static_cast<std::uint32_t>(c.metadata.size()));
  for (const auto& [k, v] : c.metadata) {
    w.str(k);
    w.str(v);
  }
  w.u64(c.vocabulary_hash);
  w.u32(static_cast<std::uint32_t>(c.vocabulary.size()));
  for (const auto& t : c.vocabulary) w.str(t);
  w.u32(static_cast<std::uint32_t>(c.records.size()));
  for (const auto& r : c.records) {
    if (r.values.size() != shape_size(r.shape)) throw UsageError("checkpoint record '" + r.name + "' size mismatch");
    w.str(r.name);
    w.u32(static_cast<std::uint32_t>(r.shape.size()));
    for (std::size_t d : r.shape) w.u64(d);
    for (double v : r.values) w.f64(v);
  }
  return w.take();
}

Checkpoint decode_checkpoint(const std::string& bytes, const std::string& source) {
  Reader r(bytes, source);
  r.expect_magic();
  const std::uint32_t version = r.u32();
  if (version != Checkpoint::kVersion) r.fail("unsupported checkpoint version " + std::to_string(version));
  Checkpoint c;
  c.kind = r.str();
  for (std::uint32_t n = r.u32(); n > 0; --n) {
    auto k = r.str();
    c.dims[k] = r.i64();
  }
  for (std::uint32_t n = r.u32(); n > 0; --n) {
    auto k = r.str();
    c.metadata[k] = r.str();
  }
  c.vocabulary_hash = r.u64();
  for (std::uint32_t n = r.u32(); n > 0; --n) c.vocabulary.push_back(r.str());
  for (std::uint32_t n = r.u32(); n > 0; --n) {
    Checkpoint::Record rec;
    rec.name = r.str();
    const std::uint32_t rank = r.u32();
    if (rank > 4) r.fail("record '" + rec.name + "' has implausible rank");
    for (std::uint32_t i = 0; i < rank; ++i) rec.shape.push_back(static_cast<std::size_t>(r.u64()));
    const std::size_t count = shape_size(rec.shape);
    if (count > bytes.size() / 8) r.fail("record '" + rec.name + "' larger than file");
    rec.values.resize(count);
    for (double& v : rec.values) v = r.f64();
    c.records.push_back(std::move(rec));
  }
  if (!r.done()) r.fail("trailing bytes after last record");
  return c;
}

void write_file_atomic(const std::string& path, const std::string& contents) {
  namespace fs = std::filesystem;
  const fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  const fs::path tmp = target.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write '" + tmp.string() + "'");
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw std::runtime_error("short write to '" + tmp.string() + "'");
  }
  fs::rename(tmp, target);
}

void write_checkpoint(const Checkpoint& ckpt, const std::string& path) { write_file_atomic(path, encode_checkpoint(ckpt)); }

Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open checkpoint '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_checkpoint(ss.str(), path);
}

Checkpoint to_checkpoint(RelationClassifier& model, const std::map<std::string, std::string>& metadata) {
  return classifier_checkpoint("relation", model.net(), metadata);
}

Checkpoint to_checkpoint(SourceClassifier& model, const std::map<std::string, std::string>& metadata) {
  return classifier_checkpoint("source", model.net(), metadata);
}

Checkpoint to_checkpoint(Scorer& model, const std::map<std::string, std::string>& metadata) {
  Checkpoint c;
  c.kind = "scorer";
  const ScorerDims& d = model.dims();
  c.dims = {{"image_dim", static_cast<std::int64_t>(d.image_dim)},
            {"image_proj", static_cast<std::int64_t>(d.image_proj)},
            {"embed_dim", static_cast<std::int64_t>(d.embed_dim)},
            {"hidden_dim", static_cast<std::int64_t>(d.hidden_dim)},
            {"mlp1", static_cast<std::int64_t>(d.mlp1)},
            {"mlp2", static_cast<std::int64_t>(d.mlp2)},
            {"concept_dim", static_cast<std::int64_t>(d.concept_dim)},
            {"concept_proj", static_cast<std::int64_t>(d.concept_proj)},
            {"output_dim", static_cast<std::int64_t>(d.output_dim)},
            {"variant", static_cast<std::int64_t>(model.variant())}};
  c.metadata = metadata;
  c.metadata["dropout"] = format_double(model.dropout_rate());
  put_vocab(c, model.vocab());
  put_params(c, model.params());
  return c;
}

RelationClassifier relation_classifier_from(const Checkpoint& ckpt) {
  expect_kind(ckpt, "relation");
  return RelationClassifier(classifier_from(ckpt));
}

SourceClassifier source_classifier_from(const Checkpoint& ckpt) {
  expect_kind(ckpt, "source");
  return SourceClassifier(classifier_from(ckpt));
}

Scorer scorer_from(const Checkpoint& ckpt) {
  expect_kind(ckpt, "scorer");
  ScorerDims d;
  d.image_dim = static_cast<std::size_t>(ckpt.dim("image_dim"));
  d.image_proj = static_cast<std::size_t>(ckpt.dim("image_proj"));
  d.embed_dim = static_cast<std::size_t>(ckpt.dim("embed_dim"));
  d.hidden_dim = static_cast<std::size_t>(ckpt.dim("hidden_dim"));
  d.mlp1 = static_cast<std::size_t>(ckpt.dim("mlp1"));
  d.mlp2 = static_cast<std::size_t>(ckpt.dim("mlp2"));
  d.concept_dim = static_cast<std::size_t>(ckpt.dim("concept_dim"));
  d.concept_proj = static_cast<std::size_t>(ckpt.dim("concept_proj"));
  d.output_dim = static_cast<std::size_t>(ckpt.dim("output_dim"));
  const auto variant = ckpt.dim("variant");
  if (variant < 0 || variant > 2) throw LoadError("checkpoint has unknown scorer variant");
  Scorer s(d, get_vocab(ckpt), static_cast<Variant>(variant), ckpt.real("dropout"));
  get_params(ckpt, s.params());
  return s;
}

}  // namespace kbqa
