#include "kbqa/runner.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>
#include <type_traits>
#include <variant>

#include <json.hpp>

#include "kbqa/checkpoint.hpp"
#include "kbqa/errors.hpp"

namespace kbqa {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

static_assert(std::is_same_v<std::uint64_t, std::size_t>, "config binding assumes 64-bit size_t");

using FieldPtr = std::variant<std::string*, std::size_t*, double*, bool*, Variant*>;

struct Field {
  const char* section;  // empty for top level
  const char* key;
  FieldPtr ptr;
};

std::vector<Field> config_fields(RunConfig& c) {
  std::vector<Field> f = {
      {"paths", "kb", &c.paths.kb},
      {"paths", "qa", &c.paths.qa},
      {"paths", "features", &c.paths.features},
      {"paths", "concepts", &c.paths.concepts},
      {"paths", "concept_labels", &c.paths.concept_labels},
      {"paths", "vectors", &c.paths.vectors},
      {"paths", "feature_cache", &c.paths.feature_cache},
      {"paths", "checkpoints", &c.paths.checkpoints},
      {"paths", "out", &c.paths.out},
      {"", "seed", &c.seed},
      {"", "fold", &c.fold},
      {"", "variant", &c.variant},
      {"", "threads", &c.threads},
      {"", "word_dim", &c.word_dim},
      {"scorer", "image_dim", &c.dims.image_dim},
      {"scorer", "image_proj", &c.dims.image_proj},
      {"scorer", "embed_dim", &c.dims.embed_dim},
      {"scorer", "hidden_dim", &c.dims.hidden_dim},
      {"scorer", "mlp1", &c.dims.mlp1},
      {"scorer", "mlp2", &c.dims.mlp2},
      {"scorer", "concept_dim", &c.dims.concept_dim},
      {"scorer", "concept_proj", &c.dims.concept_proj},
      {"scorer", "dropout", &c.scorer_dropout},
      {"margin", "task_loss", &c.margin.task_loss},
      {"margin", "regularizer", &c.margin.regularizer},
      {"margin", "negatives", &c.margin.negatives},
      {"margin", "iterations", &c.margin.iterations},
      {"margin", "epochs", &c.margin.epochs},
      {"margin", "mining_period", &c.margin.mining_period},
      {"margin", "mining_slack", &c.margin.mining_slack},
      {"margin", "batch_size", &c.margin.batch_size},
      {"margin", "learning_rate", &c.margin.learning_rate},
      {"margin", "clip_norm", &c.margin.clip_norm},
      {"margin", "init_scale", &c.margin.init_scale},
      {"margin", "reinitialize", &c.margin.reinitialize},
      {"eval", "k", &c.eval.k},
      {"eval", "relation_top_m", &c.eval.relation_top_m},
      {"eval", "fallback_next_relation", &c.eval.fallback_next_relation},
      {"eval", "gt_relation", &c.eval.gt_relation},
      {"eval", "gt_source", &c.eval.gt_source},
      {"eval", "raw_match", &c.eval.raw_match},
      {"eval", "random_tie_break", &c.eval.random_tie_break},
      {"synth", "seed", &c.synth.seed},
      {"synth", "num_facts", &c.synth.num_facts},
      {"synth", "num_questions", &c.synth.num_questions},
      {"synth", "subject_adjectives", &c.synth.subject_adjectives},
      {"synth", "subject_nouns", &c.synth.subject_nouns},
      {"synth", "object_tokens_per_relation", &c.synth.object_tokens_per_relation},
      {"synth", "filler_tokens", &c.synth.filler_tokens},
      {"synth", "concept_signal", &c.synth.concept_signal},
      {"synth", "concept_distractors", &c.synth.concept_distractors},
      {"synth", "concept_noise_bits", &c.synth.concept_noise_bits},
      {"synth", "image_source_fraction", &c.synth.image_source_fraction},
  };
  for (auto [section, cfg] : {std::pair{"relation_classifier", &c.relation}, std::pair{"source_classifier", &c.source}}) {
    f.insert(f.end(), {
        {section, "embed_dim", &cfg->embed_dim},
        {section, "hidden_dim", &cfg->hidden_dim},
        {section, "embedding_dropout", &cfg->dropout.embedding_rate},
        {section, "hidden_dropout", &cfg->dropout.hidden_rate},
        {section, "epochs", &cfg->epochs},
        {section, "batch_size", &cfg->batch_size},
        {section, "learning_rate", &cfg->learning_rate},
        {section, "weight_decay", &cfg->weight_decay},
        {section, "clip_norm", &cfg->clip_norm},
        {section, "init_scale", &cfg->init_scale},
    });
  }
  return f;
}

void assign(const Field& field, const json& v, const std::string& source) {
  const std::string name = std::string(field.section) + (*field.section ? "." : "") + field.key;
  auto bad = [&](const char* expected) {
    return UsageError(source + ": config key '" + name + "' must be " + expected + ", got " + v.dump());
  };
  std::visit([&](auto* p) {
    using T = std::remove_pointer_t<decltype(p)>;
    if constexpr (std::is_same_v<T, std::string>) {
      if (v.is_string()) *p = v.get<std::string>();
      else if (v.is_number_integer()) *p = std::to_string(v.get<long long>());
      else throw bad("a string");
    } else if constexpr (std::is_same_v<T, std::size_t>) {
      if (!v.is_number_unsigned()) throw bad("a non-negative integer");
      *p = v.get<std::size_t>();
    } else if constexpr (std::is_same_v<T, double>) {
      if (!v.is_number()) throw bad("a number");
      *p = v.get<double>();
    } else if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw bad("true or false");
      *p = v.get<bool>();
    } else {
      const auto parsed = v.is_string() ? parse_variant(v.get<std::string>()) : std::nullopt;
      if (!parsed) throw bad("one of Q+I, Q+VC, Q+I+VC");
      *p = *parsed;
    }
  }, field.ptr);
}

ordered_json field_value(const Field& field) {
  return std::visit([](auto* p) -> ordered_json {
    using T = std::remove_pointer_t<decltype(p)>;
    if constexpr (std::is_same_v<T, Variant>) return std::string(to_string(*p));
    else return *p;
  }, field.ptr);
}

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::map<std::string, std::string> run_metadata(const RunConfig& config, int fold, ModelKind kind) {
  return {
      {"config_hash", config.hash()},
      {"seed", std::to_string(config.seed)},
      {"fold", std::to_string(fold)},
      {"kind", std::string(to_string(kind))},
      {"version", kVersion},
  };
}

ordered_json meta_record(const RunConfig& config, int fold, std::string_view what) {
  ordered_json j;
  j["record"] = "meta";
  j["what"] = what;
  j["fold"] = fold;
  j["seed"] = config.seed;
  j["config_hash"] = config.hash();
  j["version"] = kVersion;
  return j;
}

ordered_json metrics_json(const Metrics& m) {
  ordered_json j;
  j["answer_at_1"] = m.answer_at_1;
  j["answer_at_3"] = m.answer_at_3;
  j["fact_at_1"] = m.fact_at_1;
  j["fact_at_3"] = m.fact_at_3;
  j["relation_at_1"] = m.relation_at_1;
  j["relation_at_3"] = m.relation_at_3;
  j["source_accuracy"] = m.source_accuracy;
  j["questions"] = m.questions;
  j["no_fact"] = m.no_fact;
  return j;
}

template <typename Model>
std::optional<Model> load_optional(const std::string& path, bool optional, Model (*from)(const Checkpoint&)) {
  if (optional && !fs::exists(path)) return std::nullopt;
  return from(read_checkpoint(path));
}

std::vector<std::pair<std::string, Metrics>> with_average(std::vector<std::pair<std::string, Metrics>> rows) {
  if (rows.size() > 1) {
    std::vector<Metrics> ms;
    for (const auto& [label, m] : rows) ms.push_back(m);
    rows.emplace_back("average", average(ms));
  }
  return rows;
}

std::string surface_from_uri(std::string s) {
  // "/c/en/hot_dog/n" -> "hot dog"
  if (s.rfind("/c/", 0) == 0) {
    std::vector<std::string> parts;
    std::stringstream ss(s);
    std::string part;
    while (std::getline(ss, part, '/')) parts.push_back(part);
    s = parts.size() > 3 ? parts[3] : s;
  }
  std::replace(s.begin(), s.end(), '_', ' ');
  return s;
}

std::string json_text_field(const json& j, std::initializer_list<const char*> keys) {
  for (const char* k : keys) {
    const auto it = j.find(k);
    if (it != j.end() && it->is_string() && !it->get<std::string>().empty()) return it->get<std::string>();
  }
  return {};
}

std::string stem(const std::string& file) { return fs::path(file).stem().string(); }

}  // namespace

// ---- RunConfig -------------------------------------------------------------------

RunConfig RunConfig::from_json_text(const std::string& text, const std::string& source) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    throw UsageError(source + ": malformed config: " + e.what());
  }
  if (!root.is_object()) throw UsageError(source + ": config must be a JSON object");
  RunConfig c;
  const auto fields = config_fields(c);
  auto find = [&](const std::string& section, const std::string& key) -> const Field* {
    for (const auto& f : fields) {
      if (section == f.section && key == f.key) return &f;
    }
    return nullptr;
  };
  for (const auto& [key, value] : root.items()) {
    if (const Field* f = find("", key)) {
      assign(*f, value, source);
      continue;
    }
    const bool is_section = std::any_of(fields.begin(), fields.end(), [&](const Field& f) { return key == f.section; });
    if (!is_section) throw UsageError(source + ": unknown config key '" + key + "'");
    if (!value.is_object()) throw UsageError(source + ": config section '" + key + "' must be an object");
    for (const auto& [sub, v] : value.items()) {
      const Field* f = find(key, sub);
      if (!f) throw UsageError(source + ": unknown config key '" + key + "." + sub + "'");
      assign(*f, v, source);
    }
  }
  return c;
}

RunConfig RunConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("--config: cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return from_json_text(ss.str(), path);
}

std::string RunConfig::to_json_text() const {
  RunConfig copy = *this;
  ordered_json root;
  for (const auto& f : config_fields(copy)) {
    if (*f.section) root[f.section][f.key] = field_value(f);
    else root[f.key] = field_value(f);
  }
  return root.dump(2);
}

std::string RunConfig::hash() const {
  RunConfig copy = *this;
  copy.paths.out.clear();
  copy.paths.checkpoints.clear();
  copy.paths.feature_cache.clear();
  copy.threads = 1;
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(copy.to_json_text())));
  return buf;
}

std::vector<int> RunConfig::folds() const {
  if (fold == "all") return {1, 2, 3, 4, 5};
  int f = 0;
  const auto res = std::from_chars(fold.data(), fold.data() + fold.size(), f);
  if (res.ec != std::errc() || res.ptr != fold.data() + fold.size() || f < 1 || f > kNumFolds) {
    throw UsageError("--fold: expected 1..5 or 'all', got '" + fold + "'");
  }
  return {f};
}

void RunConfig::finalize() {
  (void)folds();
  if (threads == 0) throw UsageError("--threads: must be at least 1");
  if (word_dim == 0) throw UsageError("word_dim must be positive");
  dims.output_dim = 2 * word_dim;
  margin.seed = seed;
  margin.threads = threads;
  relation.seed = seed + 1;
  source.seed = seed + 2;
  if (paths.checkpoints.empty()) paths.checkpoints = paths.out;
  margin.validate();
  dims.validate();
  if (eval.k == 0) throw UsageError("eval.k must be positive");
}

std::string_view to_string(ModelKind k) {
  switch (k) {
    case ModelKind::kRelation: return "relation";
    case ModelKind::kSource: return "source";
    case ModelKind::kScorer: return "scorer";
  }
  return "?";
}

std::optional<ModelKind> parse_model_kind(std::string_view s) {
  if (s == "relation") return ModelKind::kRelation;
  if (s == "source") return ModelKind::kSource;
  if (s == "scorer") return ModelKind::kScorer;
  return std::nullopt;
}

std::string fold_dir(const std::string& dir, int fold) { return (fs::path(dir) / ("fold" + std::to_string(fold))).string(); }

std::string checkpoint_path(const std::string& dir, int fold, ModelKind kind) {
  return (fs::path(fold_dir(dir, fold)) / (std::string(to_string(kind)) + ".ckpt")).string();
}

void require_dataset_paths(const RunConfig& config, bool need_vectors) {
  const std::pair<const char*, const std::string*> required[] = {
      {"--kb", &config.paths.kb},           {"--qa", &config.paths.qa},
      {"--features", &config.paths.features}, {"--concepts", &config.paths.concepts},
  };
  for (const auto& [flag, path] : required) {
    if (path->empty()) throw UsageError(std::string(flag) + " is required");
    if (!fs::exists(*path)) throw UsageError(std::string(flag) + ": no such file '" + *path + "'");
  }
  if (!config.paths.concept_labels.empty() && !fs::exists(config.paths.concept_labels)) {
    throw UsageError("--concept-labels: no such file '" + config.paths.concept_labels + "'");
  }
  if (need_vectors) {
    if (config.paths.vectors.empty()) throw UsageError("--vectors is required");
    if (!fs::exists(config.paths.vectors)) throw UsageError("--vectors: no such file '" + config.paths.vectors + "'");
  }
}

LoadedData load_run_data(const RunConfig& config, bool need_vectors) {
  require_dataset_paths(config, need_vectors);
  LoadedData d;
  DatasetPaths p;
  p.kb = config.paths.kb;
  p.qa = config.paths.qa;
  p.features = config.paths.features;
  p.concepts = config.paths.concepts;
  p.concept_labels = config.paths.concept_labels;
  p.feature_cache = config.paths.feature_cache;
  d.dataset = load_dataset(p);
  if (need_vectors) {
    d.vectors = load_vectors(config.paths.vectors, config.word_dim);
    d.facts = FactMatrix(d.dataset.kb, d.vectors);
  }
  return d;
}

// ---- train -------------------------------------------------------------------------

TrainReport run_train(const RunConfig& config, ModelKind kind, std::ostream& log) {
  return run_train(config, kind, load_run_data(config, kind == ModelKind::kScorer), log);
}

TrainReport run_train(const RunConfig& config, ModelKind kind, const LoadedData& data, std::ostream& log) {
  TrainReport report;
  for (int fold : config.folds()) {
    const auto [train, test] = split_fold(data.dataset.instances, fold);
    if (train.empty()) throw DataError("fold " + std::to_string(fold) + " leaves no training data");
    std::string lines = meta_record(config, fold, to_string(kind)).dump() + "\n";
    Checkpoint ckpt;
    double heldout = 0.0;
    if (kind == ModelKind::kRelation || kind == ModelKind::kSource) {
      const bool is_relation = kind == ModelKind::kRelation;
      TrainingTrace trace;
      std::size_t correct = 0;
      if (is_relation) {
        std::vector<std::pair<std::string, Relation>> pairs;
        for (const auto& q : train) pairs.emplace_back(q.question, q.relation);
        auto trained = train_relation_classifier(pairs, config.relation);
        for (const auto& q : test) correct += trained.model.predict(q.question).front().first == q.relation;
        trace = std::move(trained.trace);
        ckpt = to_checkpoint(trained.model, run_metadata(config, fold, kind));
      } else {
        std::vector<std::pair<std::string, AnswerSource>> pairs;
        for (const auto& q : train) pairs.emplace_back(q.question, q.source);
        auto trained = train_source_classifier(pairs, config.source);
        for (const auto& q : test) correct += trained.model.predict(q.question).first == q.source;
        trace = std::move(trained.trace);
        ckpt = to_checkpoint(trained.model, run_metadata(config, fold, kind));
      }
      heldout = test.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(test.size());
      for (std::size_t e = 0; e < trace.epoch_loss.size(); ++e) {
        ordered_json j;
        j["record"] = "epoch";
        j["epoch"] = e + 1;
        j["mean_loss"] = trace.epoch_loss[e];
        j["train_accuracy"] = trace.epoch_accuracy[e];
        lines += j.dump() + "\n";
      }
      ordered_json j;
      j["record"] = "final";
      j["heldout_accuracy"] = heldout;
      j["heldout_questions"] = test.size();
      j["truncated_questions"] = trace.truncated_questions;
      lines += j.dump() + "\n";
    } else {
      if (data.facts.rows() != data.dataset.kb.size()) throw UsageError("scorer training needs word vectors");
      ScorerDims dims = config.dims;
      const ScorerData sd{data.dataset.kb, data.facts, data.dataset.features};
      auto result = train_scorer(train, test, sd, dims, config.variant, config.scorer_dropout, config.margin,
                                 [&](const EpochRecord& r) {
                                   char buf[160];
                                   std::snprintf(buf, sizeof buf,
                                                 "fold %d iter %zu epoch %3zu loss %.5f p@1 %.4f p@3 %.4f pool %zu\n",
                                                 fold, r.iteration, r.epoch, r.mean_loss, r.precision_at_1,
                                                 r.precision_at_3, r.pool_size);
                                   log << buf << std::flush;
                                 });
      for (const auto& r : result.epochs) {
        ordered_json j;
        j["record"] = "epoch";
        j["iteration"] = r.iteration;
        j["epoch"] = r.epoch;
        j["mean_loss"] = r.mean_loss;
        j["precision_at_1"] = r.precision_at_1;
        j["precision_at_3"] = r.precision_at_3;
        j["pool_size"] = r.pool_size;
        lines += j.dump() + "\n";
      }
      for (const auto& r : result.iterations) {
        ordered_json j;
        j["record"] = "iteration";
        j["iteration"] = r.iteration;
        j["candidate_sets"] = r.candidate_sets;
        j["hard_negatives"] = r.hard_negatives;
        j["pool_size"] = r.pool_size;
        j["final_loss"] = r.final_loss;
        j["precision_at_1"] = r.precision_at_1;
        j["precision_at_3"] = r.precision_at_3;
        lines += j.dump() + "\n";
      }
      heldout = result.iterations.back().precision_at_1;
      auto meta = run_metadata(config, fold, kind);
      meta["word_dim"] = std::to_string(config.word_dim);
      ckpt = to_checkpoint(result.scorer, meta);
    }
    const std::string ckpt_path = checkpoint_path(config.paths.out, fold, kind);
    const std::string metrics_path =
        (fs::path(fold_dir(config.paths.out, fold)) / (std::string(to_string(kind)) + "_metrics.jsonl")).string();
    write_checkpoint(ckpt, ckpt_path);
    write_file_atomic(metrics_path, lines);
    char buf[160];
    std::snprintf(buf, sizeof buf, "fold %d %s held-out %.4f -> %s\n", fold, std::string(to_string(kind)).c_str(), heldout,
                  ckpt_path.c_str());
    log << buf << std::flush;
    report.checkpoints.push_back(ckpt_path);
    report.metrics_files.push_back(metrics_path);
    report.heldout.push_back(heldout);
  }
  return report;
}

// ---- evaluate ----------------------------------------------------------------------

std::string metrics_report_json(const RunConfig& config, std::span<const std::pair<std::string, Metrics>> rows) {
  ordered_json root;
  root["config_hash"] = config.hash();
  root["seed"] = config.seed;
  root["version"] = kVersion;
  root["variant"] = std::string(to_string(config.variant));
  root["gt_relation"] = config.eval.gt_relation;
  root["gt_source"] = config.eval.gt_source;
  auto arr = ordered_json::array();
  for (const auto& [label, m] : rows) {
    ordered_json r;
    r["split"] = label;
    r["metrics"] = metrics_json(m);
    arr.push_back(r);
  }
  root["rows"] = arr;
  return root.dump(2) + "\n";
}

std::vector<std::pair<std::string, Metrics>> parse_metrics_report(const std::string& text) {
  const json root = json::parse(text);
  std::vector<std::pair<std::string, Metrics>> rows;
  for (const auto& r : root.at("rows")) {
    const auto& j = r.at("metrics");
    Metrics m;
    m.answer_at_1 = j.at("answer_at_1").get<double>();
    m.answer_at_3 = j.at("answer_at_3").get<double>();
    m.fact_at_1 = j.at("fact_at_1").get<double>();
    m.fact_at_3 = j.at("fact_at_3").get<double>();
    m.relation_at_1 = j.at("relation_at_1").get<double>();
    m.relation_at_3 = j.at("relation_at_3").get<double>();
    m.source_accuracy = j.at("source_accuracy").get<double>();
    m.questions = j.at("questions").get<std::size_t>();
    m.no_fact = j.at("no_fact").get<std::size_t>();
    rows.emplace_back(r.at("split").get<std::string>(), m);
  }
  return rows;
}

EvaluateReport run_evaluate(const RunConfig& config, std::ostream& log) {
  return run_evaluate(config, load_run_data(config, true), log);
}

EvaluateReport run_evaluate(const RunConfig& config, const LoadedData& data, std::ostream& log) {
  EvaluateReport report;
  std::vector<std::pair<std::string, Metrics>> rows;
  const KbView view{data.dataset.kb, data.facts};
  for (int fold : config.folds()) {
    const auto [train, test] = split_fold(data.dataset.instances, fold);
    const std::string dir = config.paths.checkpoints;
    const auto relation = load_optional(checkpoint_path(dir, fold, ModelKind::kRelation), config.eval.gt_relation,
                                        &relation_classifier_from);
    const auto source = load_optional(checkpoint_path(dir, fold, ModelKind::kSource), config.eval.gt_source,
                                      &source_classifier_from);
    const Scorer scorer = scorer_from(read_checkpoint(checkpoint_path(dir, fold, ModelKind::kScorer)));
    if (scorer.dims().output_dim != data.facts.dim()) {
      throw UsageError("scorer checkpoint output " + std::to_string(scorer.dims().output_dim) +
                       " does not match word_dim " + std::to_string(config.word_dim));
    }
    Models models{relation ? &*relation : nullptr, source ? &*source : nullptr, &scorer};
    EvalOptions opts;
    opts.answer.k = std::max<std::size_t>(3, config.eval.k);
    opts.answer.relation_top_m = config.eval.relation_top_m;
    opts.answer.fallback_next_relation = config.eval.fallback_next_relation;
    opts.answer.tie_break = config.eval.random_tie_break ? TieBreakMode::kRandom : TieBreakMode::kFactId;
    opts.answer.tie_seed = config.seed;
    opts.gt_relation = config.eval.gt_relation;
    opts.gt_source = config.eval.gt_source;
    opts.raw_match = config.eval.raw_match;
    opts.threads = config.threads;
    std::ostringstream predictions;
    opts.predictions = &predictions;
    const Metrics m = evaluate(models, view, data.dataset.features, test, opts);
    write_file_atomic((fs::path(fold_dir(config.paths.out, fold)) / "predictions.jsonl").string(), predictions.str());
    rows.emplace_back("fold" + std::to_string(fold), m);
    log << "evaluated fold " << fold << " (" << test.size() << " questions)\n" << std::flush;
  }
  report.rows = with_average(std::move(rows));
  report.table = metrics_table(report.rows);
  report.metrics_file = (fs::path(config.paths.out) / "metrics.json").string();
  write_file_atomic(report.metrics_file, metrics_report_json(config, report.rows));
  write_file_atomic((fs::path(config.paths.out) / "metrics.txt").string(), report.table);
  return report;
}

// ---- answer ------------------------------------------------------------------------

AnswerReport run_answer(const RunConfig& config, const std::string& image_id, const std::string& question) {
  for (const auto& [flag, path] : {std::pair{"--kb", &config.paths.kb}, std::pair{"--features", &config.paths.features},
                                   std::pair{"--concepts", &config.paths.concepts},
                                   std::pair{"--vectors", &config.paths.vectors}}) {
    if (path->empty()) throw UsageError(std::string(flag) + " is required");
    if (!fs::exists(*path)) throw UsageError(std::string(flag) + ": no such file '" + *path + "'");
  }
  const int fold = config.folds().front();
  const KnowledgeBase kb = parse_kb(config.paths.kb);
  std::size_t concept_dim = kConceptDim;
  if (!config.paths.concept_labels.empty()) concept_dim = load_concept_labels(config.paths.concept_labels).size();
  const FeatureStore store =
      load_feature_store(config.paths.features, config.paths.concepts, concept_dim, config.paths.feature_cache);
  if (!store.has_features(image_id) || !store.has_concepts(image_id)) {
    throw DataError("unknown image id '" + image_id + "'");
  }
  const WordVectorTable vectors = load_vectors(config.paths.vectors, config.word_dim);
  const FactMatrix facts(kb, vectors);
  const std::string dir = config.paths.checkpoints;
  const auto relation = relation_classifier_from(read_checkpoint(checkpoint_path(dir, fold, ModelKind::kRelation)));
  const auto source = source_classifier_from(read_checkpoint(checkpoint_path(dir, fold, ModelKind::kSource)));
  const Scorer scorer = scorer_from(read_checkpoint(checkpoint_path(dir, fold, ModelKind::kScorer)));
  AnswerOptions opts;
  opts.k = config.eval.k;
  opts.relation_top_m = config.eval.relation_top_m;
  opts.fallback_next_relation = config.eval.fallback_next_relation;
  opts.tie_break = config.eval.random_tie_break ? TieBreakMode::kRandom : TieBreakMode::kFactId;
  opts.tie_seed = config.seed;
  AnswerReport report;
  report.prediction = answer_question({&relation, &source, &scorer}, {kb, facts},
                                      {store.features(image_id), store.concepts(image_id), question}, opts, image_id);
  const Prediction& p = report.prediction;
  std::ostringstream out;
  char buf[256];
  std::snprintf(buf, sizeof buf, "relation: %s", std::string(to_string(p.relation)).c_str());
  out << buf;
  if (!p.relation_ranking.empty()) {
    std::snprintf(buf, sizeof buf, " (p=%.4f)", p.relation_ranking.front().second);
    out << buf;
  }
  std::snprintf(buf, sizeof buf, "\nsource: %s (p_image=%.4f)\n", std::string(to_string(p.source)).c_str(),
                p.image_probability);
  out << buf;
  if (p.no_fact) {
    out << "status: no_fact\nno supporting fact for relation " << to_string(p.relation) << "\n";
  } else {
    out << "status: ok\n";
    for (std::size_t i = 0; i < p.facts.size(); ++i) {
      const Fact& f = kb.fact(p.facts[i].index);
      std::snprintf(buf, sizeof buf, "%zu. %.6f %s (%s, %s, %s)\n", i + 1, p.facts[i].score, f.id.c_str(),
                    f.subject.c_str(), f.relation_token().c_str(), f.object.c_str());
      out << buf;
    }
    out << "answer: " << p.answer << "\n";
  }
  report.text = out.str();
  return report;
}

// ---- kb-stats ----------------------------------------------------------------------

std::string kb_stats_table(const KbStats& stats) {
  std::string out;
  char buf[128];
  std::snprintf(buf, sizeof buf, "%-16s %8s\n", "relation", "facts");
  out += buf;
  for (Relation r : all_relations()) {
    std::snprintf(buf, sizeof buf, "%-16s %8zu\n", std::string(to_string(r)).c_str(),
                  stats.per_relation[static_cast<std::size_t>(r)]);
    out += buf;
  }
  std::snprintf(buf, sizeof buf, "%-16s %8zu\n%-16s %8zu\n", "total", stats.total_facts, "vocabulary",
                stats.vocabulary_size);
  out += buf;
  return out;
}

// ---- convert-fvqa ------------------------------------------------------------------

ConvertReport convert_fvqa(const std::string& questions_json, const std::string& facts_json,
                           const std::string& fold_list_dir, const std::string& out_dir) {
  json questions;
  json facts_in;
  try {
    questions = json::parse(read_text(questions_json));
    facts_in = json::parse(read_text(facts_json));
  } catch (const json::parse_error& e) {
    throw DataError(std::string("convert-fvqa: malformed JSON: ") + e.what());
  }
  if (!questions.is_object() || !facts_in.is_object()) throw DataError("convert-fvqa: expected JSON objects keyed by id");

  ConvertReport report;
  std::vector<Fact> facts;
  std::set<std::string> fact_ids;
  for (const auto& [id, f] : facts_in.items()) {
    std::string subject = json_text_field(f, {"e1_label"});
    std::string object = json_text_field(f, {"e2_label"});
    if (subject.empty()) subject = surface_from_uri(json_text_field(f, {"e1"}));
    if (object.empty()) object = surface_from_uri(json_text_field(f, {"e2"}));
    const std::string relation = json_text_field(f, {"r", "relation"});
    if (!parse_relation(relation) || tokenize(subject).empty() || tokenize(object).empty()) {
      ++report.skipped;
      continue;
    }
    std::string rel_token = relation.rfind("/r/", 0) == 0 ? relation.substr(3) : relation;
    facts.push_back(make_fact(id, subject, rel_token, object));
    fact_ids.insert(id);
  }
  const KnowledgeBase kb(std::move(facts));

  // image stem -> fold
  std::map<std::string, int> fold_of;
  if (!fold_list_dir.empty()) {
    for (int k = 0; k < kNumFolds; ++k) {
      const fs::path list = fs::path(fold_list_dir) / ("test_list_" + std::to_string(k) + ".txt");
      std::ifstream in(list);
      if (!in) throw DataError("convert-fvqa: missing fold list '" + list.string() + "'");
      std::string line;
      while (std::getline(in, line)) {
        while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
        if (!line.empty()) fold_of[stem(line)] = k + 1;
      }
    }
  }
  std::vector<QAInstance> out;
  std::set<std::string> images;
  for (const auto& [qid, q] : questions.items()) {
    std::string fact_id;
    const auto fit = q.find("fact");
    if (fit != q.end() && fit->is_array() && !fit->empty() && fit->front().is_string()) fact_id = fit->front();
    if (fact_id.empty()) fact_id = json_text_field(q, {"fact_id"});
    const Fact* fact = kb.find(fact_id);
    const auto source = parse_source(json_text_field(q, {"ans_source", "answer_source"}));
    const std::string image = stem(json_text_field(q, {"img_file", "image_id"}));
    if (!fact || !source || image.empty()) {
      ++report.skipped;
      continue;
    }
    QAInstance qa;
    qa.question_id = qid;
    qa.image_id = image;
    qa.question = json_text_field(q, {"question"});
    qa.answer = json_text_field(q, {"answer"});
    qa.fact_id = fact_id;
    qa.relation = fact->relation;
    qa.source = *source;
    qa.fold = 0;
    if (!fold_list_dir.empty()) {
      const auto it = fold_of.find(image);
      if (it == fold_of.end()) {
        ++report.skipped;
        continue;
      }
      qa.fold = it->second;
    }
    images.insert(image);
    out.push_back(std::move(qa));
  }
  if (fold_list_dir.empty()) {
    // Round-robin over sorted images keeps each image in one fold.
    std::map<std::string, int> assigned;
    int next = 0;
    for (const auto& img : images) assigned[img] = (next++ % kNumFolds) + 1;
    for (auto& qa : out) qa.fold = assigned[qa.image_id];
  }
  std::ostringstream kb_text;
  serialize_kb(kb, kb_text);
  std::ostringstream qa_text;
  write_qa(qa_text, out);
  write_file_atomic((fs::path(out_dir) / "kb.tsv").string(), kb_text.str());
  write_file_atomic((fs::path(out_dir) / "qa.jsonl").string(), qa_text.str());
  report.facts = kb.size();
  report.questions = out.size();
  return report;
}

}  // namespace kbqa
