#include "kbqa/dataio.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "kbqa/checkpoint.hpp"
#include "kbqa/errors.hpp"
#include "kbqa/pipeline.hpp"

namespace kbqa {

namespace {

using nlohmann::json;

std::string read_all(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string field_string(const json& j, const char* key, const std::string& source, std::size_t line) {
  const auto it = j.find(key);
  if (it == j.end()) throw LoadError(source, line, std::string("missing field '") + key + "'");
  if (it->is_string()) return it->get<std::string>();
  if (it->is_number_integer()) return std::to_string(it->get<long long>());
  throw LoadError(source, line, std::string("field '") + key + "' must be a string");
}

// Splits on runs of spaces/tabs.
std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t')) ++i;
    const std::size_t start = i;
    while (i < line.size() && line[i] != ' ' && line[i] != '\t') ++i;
    if (i > start) out.push_back(line.substr(start, i - start));
  }
  return out;
}

template <typename T>
bool parse_number(std::string_view s, T& out) {
  const auto res = std::from_chars(s.data(), s.data() + s.size(), out);
  return res.ec == std::errc() && res.ptr == s.data() + s.size();
}

constexpr char kCacheMagic[8] = {'K', 'B', 'Q', 'A', 'F', 'E', 'A', 'T'};

void write_cache(const FeatureStore& store, std::uint64_t checksum, const std::string& path) {
  std::string out(kCacheMagic, 8);
  auto put = [&out](const void* p, std::size_t n) { out.append(static_cast<const char*>(p), n); };
  const std::uint64_t header[] = {checksum, store.image_dim(), store.concept_dim(), store.size()};
  put(header, sizeof header);
  for (const auto& id : store.image_ids()) {
    const std::uint64_t len = id.size();
    put(&len, 8);
    put(id.data(), id.size());
    const auto f = store.features(id);
    put(f.data(), f.size() * sizeof(double));
    const auto hot = store.hot_concepts(id);
    const std::uint64_t n = hot.size();
    put(&n, 8);
    put(hot.data(), hot.size() * sizeof(std::uint32_t));
  }
  write_file_atomic(path, out);
}

bool read_cache(FeatureStore& store, std::uint64_t checksum, const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return false;
  char magic[8];
  std::uint64_t header[4];
  if (!in.read(magic, 8) || std::string_view(magic, 8) != std::string_view(kCacheMagic, 8)) return false;
  if (!in.read(reinterpret_cast<char*>(header), sizeof header)) return false;
  if (header[0] != checksum || header[2] != store.concept_dim()) return false;
  FeatureStore loaded(header[1], header[2]);
  for (std::uint64_t i = 0; i < header[3]; ++i) {
    std::uint64_t len = 0;
    if (!in.read(reinterpret_cast<char*>(&len), 8) || len > (1u << 20)) return false;
    std::string id(len, '\0');
    std::vector<double> f(header[1]);
    std::uint64_t n = 0;
    if (!in.read(id.data(), static_cast<std::streamsize>(len)) ||
        !in.read(reinterpret_cast<char*>(f.data()), static_cast<std::streamsize>(f.size() * sizeof(double))) ||
        !in.read(reinterpret_cast<char*>(&n), 8) || n > header[2]) {
      return false;
    }
    std::vector<std::uint32_t> hot(n);
    if (!in.read(reinterpret_cast<char*>(hot.data()), static_cast<std::streamsize>(n * sizeof(std::uint32_t)))) return false;
    loaded.set_features(id, std::move(f));
    loaded.set_concepts(id, hot);
  }
  store = std::move(loaded);
  return true;
}

}  // namespace

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

// ---- FeatureStore -------------------------------------------------------------

void FeatureStore::set_features(const std::string& image_id, std::vector<double> values) {
  if (image_dim_ == 0) image_dim_ = values.size();
  if (values.size() != image_dim_) {
    throw DataError("image '" + image_id + "' has " + std::to_string(values.size()) + " features, expected " +
                    std::to_string(image_dim_));
  }
  features_[image_id] = std::move(values);
}

void FeatureStore::set_concepts(const std::string& image_id, std::span<const std::uint32_t> hot) {
  std::vector<double> v(concept_dim_, 0.0);
  for (std::uint32_t i : hot) {
    if (i >= concept_dim_) {
      throw DataError("image '" + image_id + "' concept index " + std::to_string(i) + " outside [0," +
                      std::to_string(concept_dim_) + ")");
    }
    v[i] = 1.0;
  }
  concepts_[image_id] = std::move(v);
}

std::span<const double> FeatureStore::features(const std::string& image_id) const {
  const auto it = features_.find(image_id);
  if (it == features_.end()) throw DataError("no image features for '" + image_id + "'");
  return it->second;
}

std::span<const double> FeatureStore::concepts(const std::string& image_id) const {
  const auto it = concepts_.find(image_id);
  if (it == concepts_.end()) throw DataError("no visual concepts for '" + image_id + "'");
  return it->second;
}

std::vector<std::uint32_t> FeatureStore::hot_concepts(const std::string& image_id) const {
  std::vector<std::uint32_t> hot;
  const auto c = concepts(image_id);
  for (std::size_t i = 0; i < c.size(); ++i) {
    if (c[i] != 0.0) hot.push_back(static_cast<std::uint32_t>(i));
  }
  return hot;
}

std::vector<std::string> FeatureStore::image_ids() const {
  std::set<std::string> ids;
  for (const auto& [k, v] : features_) ids.insert(k);
  for (const auto& [k, v] : concepts_) ids.insert(k);
  return {ids.begin(), ids.end()};
}

// ---- QA records ---------------------------------------------------------------

std::vector<QAInstance> parse_qa(std::istream& in, const std::string& source) {
  std::vector<QAInstance> out;
  std::set<std::string> ids;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw LoadError(source, lineno, std::string("malformed record: ") + e.what());
    }
    if (!j.is_object()) throw LoadError(source, lineno, "record must be a JSON object");
    QAInstance q;
    q.question_id = field_string(j, "question_id", source, lineno);
    q.image_id = field_string(j, "image_id", source, lineno);
    q.question = field_string(j, "question", source, lineno);
    q.answer = field_string(j, "answer", source, lineno);
    q.fact_id = field_string(j, "fact_id", source, lineno);
    const auto rel = parse_relation(field_string(j, "relation", source, lineno));
    if (!rel) throw LoadError(source, lineno, "unknown relation '" + field_string(j, "relation", source, lineno) + "'");
    q.relation = *rel;
    const auto src = parse_source(field_string(j, "answer_source", source, lineno));
    if (!src) throw LoadError(source, lineno, "unknown answer_source");
    q.source = *src;
    const auto fold_it = j.find("fold");
    if (fold_it == j.end() || !fold_it->is_number_integer()) throw LoadError(source, lineno, "fold must be an integer");
    q.fold = fold_it->get<int>();
    if (!ids.insert(q.question_id).second) throw LoadError(source, lineno, "duplicate question_id '" + q.question_id + "'");
    out.push_back(std::move(q));
  }
  return out;
}

std::vector<QAInstance> load_qa(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open QA file '" + path + "'");
  return parse_qa(in, path);
}

std::string qa_to_json_line(const QAInstance& q) {
  json j;
  j["question_id"] = q.question_id;
  j["image_id"] = q.image_id;
  j["question"] = q.question;
  j["answer"] = q.answer;
  j["fact_id"] = q.fact_id;
  j["relation"] = std::string(to_string(q.relation));
  j["answer_source"] = std::string(to_string(q.source));
  j["fold"] = q.fold;
  return j.dump();
}

void write_qa(std::ostream& out, std::span<const QAInstance> instances) {
  for (const auto& q : instances) out << qa_to_json_line(q) << '\n';
}

// ---- features -----------------------------------------------------------------

std::vector<std::string> load_concept_labels(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open concept-label file '" + path + "'");
  std::vector<std::string> labels;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    labels.push_back(line);
  }
  while (!labels.empty() && labels.back().empty()) labels.pop_back();
  return labels;
}

void load_image_features(FeatureStore& store, std::istream& in, const std::string& source) {
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto fields = split_ws(line);
    if (fields.empty()) continue;
    std::size_t dim = 0;
    if (fields.size() < 2 || !parse_number(fields[1], dim)) {
      throw LoadError(source, lineno, "expected 'image_id dim v1 ... v_dim'");
    }
    if (fields.size() != dim + 2) {
      throw LoadError(source, lineno, "declared " + std::to_string(dim) + " values, found " + std::to_string(fields.size() - 2));
    }
    std::vector<double> values(dim);
    for (std::size_t i = 0; i < dim; ++i) {
      if (!parse_number(fields[i + 2], values[i]) || !std::isfinite(values[i])) {
        throw LoadError(source, lineno, "bad number '" + std::string(fields[i + 2]) + "'");
      }
    }
    const std::string id(fields[0]);
    if (store.has_features(id)) throw LoadError(source, lineno, "duplicate image id '" + id + "'");
    try {
      store.set_features(id, std::move(values));
    } catch (const DataError& e) {
      throw LoadError(source, lineno, e.what());
    }
  }
}

void load_image_concepts(FeatureStore& store, std::istream& in, const std::string& source) {
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto fields = split_ws(line);
    if (fields.empty()) continue;
    if (fields.size() > 2) throw LoadError(source, lineno, "expected 'image_id i1,i2,...'");
    std::vector<std::uint32_t> hot;
    if (fields.size() == 2) {
      std::string_view rest = fields[1];
      while (!rest.empty()) {
        const std::size_t comma = std::min(rest.find(','), rest.size());
        std::uint32_t idx = 0;
        if (!parse_number(rest.substr(0, comma), idx)) {
          throw LoadError(source, lineno, "bad concept index '" + std::string(rest.substr(0, comma)) + "'");
        }
        hot.push_back(idx);
        rest.remove_prefix(std::min(comma + 1, rest.size()));
      }
    }
    const std::string id(fields[0]);
    if (store.has_concepts(id)) throw LoadError(source, lineno, "duplicate image id '" + id + "'");
    try {
      store.set_concepts(id, hot);
    } catch (const DataError& e) {
      throw LoadError(source, lineno, e.what());
    }
  }
}

FeatureStore load_feature_store(const std::string& features_path, const std::string& concepts_path,
                                std::size_t concept_dim, const std::string& cache_path) {
  const std::string feature_text = read_all(features_path);
  const std::string concept_text = read_all(concepts_path);
  FeatureStore store(0, concept_dim);
  std::uint64_t checksum = 0;
  if (!cache_path.empty()) {
    checksum = fnv1a(concept_text, fnv1a(feature_text));
    if (read_cache(store, checksum, cache_path)) return store;
  }
  std::istringstream fin(feature_text);
  load_image_features(store, fin, features_path);
  std::istringstream cin(concept_text);
  load_image_concepts(store, cin, concepts_path);
  if (!cache_path.empty()) write_cache(store, checksum, cache_path);
  return store;
}

// ---- dataset ------------------------------------------------------------------

void validate_dataset(Dataset& data) {
  data.answer_mismatches = 0;
  for (const auto& q : data.instances) {
    const Fact* f = data.kb.find(q.fact_id);
    if (!f) throw DataError("question " + q.question_id + " references unknown fact id '" + q.fact_id + "'");
    if (f->relation != q.relation) {
      throw DataError("question " + q.question_id + " has relation " + std::string(to_string(q.relation)) +
                      " but fact " + q.fact_id + " has " + std::string(to_string(f->relation)));
    }
    if (q.fold < 1 || q.fold > kNumFolds) {
      throw DataError("question " + q.question_id + " has fold " + std::to_string(q.fold) + " outside 1..5");
    }
    if (!data.features.has_features(q.image_id)) {
      throw DataError("question " + q.question_id + ": no image features for '" + q.image_id + "'");
    }
    if (!data.features.has_concepts(q.image_id)) {
      throw DataError("question " + q.question_id + ": no visual concepts for '" + q.image_id + "'");
    }
    if (!answers_match(extract_answer(*f, q.source), q.answer)) ++data.answer_mismatches;
  }
}

Dataset load_dataset(const DatasetPaths& paths) {
  Dataset d;
  d.kb = parse_kb(paths.kb);
  d.instances = load_qa(paths.qa);
  std::size_t concept_dim = kConceptDim;
  if (!paths.concept_labels.empty()) {
    d.concept_labels = load_concept_labels(paths.concept_labels);
    concept_dim = d.concept_labels.size();
    if (concept_dim == 0) throw DataError("concept-label file '" + paths.concept_labels + "' is empty");
  }
  d.features = load_feature_store(paths.features, paths.concepts, concept_dim, paths.feature_cache);
  validate_dataset(d);
  return d;
}

std::pair<std::vector<QAInstance>, std::vector<QAInstance>> split_fold(std::span<const QAInstance> data, int fold) {
  if (fold < 1 || fold > kNumFolds) throw UsageError("split_fold: fold must be in 1..5, got " + std::to_string(fold));
  std::pair<std::vector<QAInstance>, std::vector<QAInstance>> out;
  for (const auto& q : data) (q.fold == fold ? out.second : out.first).push_back(q);
  return out;
}

}  // namespace kbqa
