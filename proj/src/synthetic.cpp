#include "kbqa/synthetic.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <numeric>
#include <set>
#include <sstream>

#include "kbqa/checkpoint.hpp"
#include "kbqa/errors.hpp"
#include "kbqa/random.hpp"

namespace kbqa {

namespace {

constexpr std::size_t kValueScale = 10000;

// Six-letter consonant-vowel words; the category keeps pools disjoint.
std::string make_word(std::size_t category, std::size_t i) {
  static constexpr char kConsonants[] = "bdfgklmnprstvz";
  static constexpr char kVowels[] = "aeiou";
  constexpr std::size_t syllables = 14 * 5;
  constexpr std::size_t space = syllables * syllables * syllables;
  // Multiplying by a unit mod `space` permutes codes, so words stay distinct.
  std::size_t code = ((category * syllables * syllables + i) * 2654435761ULL) % space;
  std::string w;
  for (int s = 0; s < 3; ++s) {
    const std::size_t syl = code % syllables;
    code /= syllables;
    w += kConsonants[syl / 5];
    w += kVowels[syl % 5];
  }
  return w;
}

std::vector<std::string> word_pool(std::size_t category, std::size_t n) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(make_word(category, i));
  return out;
}

std::string join(const std::vector<std::string>& words) {
  std::string out;
  for (const auto& w : words) {
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

std::string padded(const char* prefix, std::size_t value, std::size_t width) {
  std::string digits = std::to_string(value);
  if (digits.size() < width) digits.insert(0, width - digits.size(), '0');
  return prefix + digits;
}

std::size_t width_for(std::size_t n) { return std::max<std::size_t>(4, std::to_string(n).size()); }

// Exactly representable in decimal with four places, so text round-trips.
double quantized(Rng& rng, double offset) {
  return (static_cast<double>(rng.index(kValueScale)) - offset) / static_cast<double>(kValueScale);
}

void append_value(std::string& out, double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, " %.4f", v);
  out += buf;
}

}  // namespace

void SyntheticConfig::validate() const {
  if (num_facts == 0 || num_questions == 0) throw UsageError("synth: facts and questions must be positive");
  if (subject_adjectives == 0 || subject_nouns == 0) throw UsageError("synth: subject pools must be non-empty");
  if (object_tokens_per_relation == 0) throw UsageError("synth: object_tokens_per_relation must be positive");
  const std::size_t per_relation = (num_facts + kNumRelations - 1) / kNumRelations;
  if (per_relation > subject_adjectives * subject_nouns) {
    throw UsageError("synth: more facts per relation than distinct subjects");
  }
  if (!(concept_signal >= 0.0 && concept_signal <= 1.0)) throw UsageError("synth: concept_signal must be in [0, 1]");
  if (!(image_source_fraction >= 0.0 && image_source_fraction <= 1.0)) {
    throw UsageError("synth: image_source_fraction must be in [0, 1]");
  }
  if (concept_dim < subject_adjectives * subject_nouns) throw UsageError("synth: concept_dim smaller than subject count");
  if (image_dim == 0 || word_dim == 0) throw UsageError("synth: dimensions must be positive");
}

const std::string& relation_keyword(Relation r) {
  static const std::array<std::string, kNumRelations> kKeywords = {
      "kind",  "versus",  "having", "being", "property",  "able",    "wanting",
      "related", "located", "part",  "receiving", "used", "created",
  };
  return kKeywords[static_cast<std::size_t>(r)];
}

WordVectorTable SyntheticData::vector_table() const {
  const std::size_t dim = word_vectors.empty() ? 1 : word_vectors.front().second.size();
  WordVectorTable table(dim);
  for (const auto& [token, vec] : word_vectors) table.set(token, vec);
  return table;
}

SyntheticFiles SyntheticFiles::in(const std::string& dir) {
  const std::filesystem::path d(dir);
  SyntheticFiles f;
  for (std::string* p : {&f.kb, &f.qa, &f.features, &f.concepts, &f.concept_labels, &f.vectors}) {
    *p = (d / *p).string();
  }
  return f;
}

DatasetPaths SyntheticFiles::dataset_paths() const {
  DatasetPaths p;
  p.kb = kb;
  p.qa = qa;
  p.features = features;
  p.concepts = concepts;
  p.concept_labels = concept_labels;
  return p;
}

SyntheticData generate_synthetic(const SyntheticConfig& config) {
  config.validate();
  Rng root(config.seed);
  Rng kb_rng = root.fork();
  Rng qa_rng = root.fork();
  Rng feature_rng = root.fork();
  Rng vector_rng = root.fork();

  const auto adjectives = word_pool(0, config.subject_adjectives);
  const auto nouns = word_pool(1, config.subject_nouns);
  const auto fillers = word_pool(2, config.filler_tokens);
  const auto object_words = word_pool(3, config.object_tokens_per_relation * kNumRelations);
  const std::size_t num_subjects = adjectives.size() * nouns.size();
  auto subject_words = [&](std::size_t s) { return std::vector<std::string>{adjectives[s / nouns.size()], nouns[s % nouns.size()]}; };

  // Each object is one token from its relation's pool.
  const std::size_t num_options = config.object_tokens_per_relation;
  auto object_tokens = [&](std::size_t r, std::size_t option) {
    return std::vector<std::string>{object_words[r * num_options + option]};
  };

  // Facts go round-robin over relations; within a relation every subject is
  // distinct.
  struct Planted {
    std::size_t subject;
    std::size_t option;
  };
  std::vector<std::vector<std::size_t>> subject_order(kNumRelations);
  for (auto& order : subject_order) {
    order.resize(num_subjects);
    std::iota(order.begin(), order.end(), 0);
    kb_rng.shuffle(order);
  }
  // fact_of[r][subject] = fact index or npos.
  constexpr std::size_t npos = static_cast<std::size_t>(-1);
  std::vector<std::vector<std::size_t>> fact_of(kNumRelations, std::vector<std::size_t>(num_subjects, npos));
  std::vector<Planted> planted;
  std::vector<Fact> facts;
  const std::size_t id_width = width_for(config.num_facts);
  for (std::size_t i = 0; i < config.num_facts; ++i) {
    const std::size_t r = i % kNumRelations;
    const std::size_t j = i / kNumRelations;
    const std::size_t s = subject_order[r][j];
    const std::size_t option = j % num_options;
    fact_of[r][s] = i;
    planted.push_back({s, option});
    const Relation rel = all_relations()[r];
    facts.push_back(make_fact(padded("f", i + 1, id_width), join(subject_words(s)), to_string(rel),
                              join(object_tokens(r, option))));
  }

  SyntheticData out;
  out.dataset.kb = KnowledgeBase(std::move(facts));
  const KnowledgeBase& kb = out.dataset.kb;
  out.dataset.features = FeatureStore(config.image_dim, config.concept_dim);
  for (std::size_t c = 0; c < config.concept_dim; ++c) {
    out.dataset.concept_labels.push_back(c < num_subjects ? join(subject_words(c)) : padded("concept", c, 4));
  }

  const std::size_t q_width = width_for(config.num_questions);
  std::set<std::string> question_vocab;
  for (std::size_t q = 0; q < config.num_questions; ++q) {
    const std::size_t fi = qa_rng.index(config.num_facts);
    const Fact& fact = kb.fact(fi);
    const std::size_t r = static_cast<std::size_t>(fact.relation);
    const bool image_source = qa_rng.bernoulli(config.image_source_fraction);

    std::vector<std::string> words{image_source ? "which" : "what"};
    if (qa_rng.bernoulli(0.5)) words.push_back(fillers[qa_rng.index(fillers.size())]);
    words.push_back(relation_keyword(fact.relation));
    if (qa_rng.bernoulli(0.5)) words.push_back(fillers[qa_rng.index(fillers.size())]);
    const auto entity = image_source ? object_tokens(r, planted[fi].option) : subject_words(planted[fi].subject);
    words.insert(words.end(), entity.begin(), entity.end());
    question_vocab.insert(words.begin(), words.end());

    QAInstance qa;
    qa.question_id = padded("q", q + 1, q_width);
    qa.image_id = padded("img", q + 1, q_width);
    qa.question = join(words);
    qa.answer = image_source ? fact.subject : fact.object;
    qa.fact_id = fact.id;
    qa.relation = fact.relation;
    qa.source = image_source ? AnswerSource::kImage : AnswerSource::kKnowledgeBase;
    qa.fold = static_cast<int>(q % kNumFolds) + 1;

    // Concept bits: planted subject, distractor subjects that cannot be
    // confused with the planted (relation, object), and irrelevant noise.
    std::set<std::uint32_t> hot;
    if (qa_rng.bernoulli(config.concept_signal)) hot.insert(static_cast<std::uint32_t>(planted[fi].subject));
    std::vector<std::uint32_t> eligible;
    for (std::size_t s = 0; s < num_subjects; ++s) {
      if (s == planted[fi].subject) continue;
      const std::size_t other = fact_of[r][s];
      if (other != npos && planted[other].option == planted[fi].option) continue;
      eligible.push_back(static_cast<std::uint32_t>(s));
    }
    qa_rng.shuffle(eligible);
    for (std::size_t k = 0; k < std::min(config.concept_distractors, eligible.size()); ++k) hot.insert(eligible[k]);
    if (config.concept_dim > num_subjects) {
      for (std::size_t k = 0; k < config.concept_noise_bits; ++k) {
        hot.insert(static_cast<std::uint32_t>(num_subjects + qa_rng.index(config.concept_dim - num_subjects)));
      }
    }
    const std::vector<std::uint32_t> hot_list(hot.begin(), hot.end());
    out.dataset.features.set_concepts(qa.image_id, hot_list);

    std::vector<double> image(config.image_dim);
    for (double& v : image) v = quantized(feature_rng, 0.0);
    out.dataset.features.set_features(qa.image_id, std::move(image));
    out.dataset.instances.push_back(std::move(qa));
  }
  out.question_vocabulary.assign(question_vocab.begin(), question_vocab.end());

  std::set<std::string> tokens(question_vocab.begin(), question_vocab.end());
  for (const Fact& f : kb.facts()) {
    for (auto& t : tokenize(f.subject)) tokens.insert(t);
    for (auto& t : tokenize(f.object)) tokens.insert(t);
  }
  for (const auto& token : tokens) {
    std::vector<double> v(config.word_dim);
    for (double& x : v) x = quantized(vector_rng, kValueScale / 2.0);
    out.word_vectors.emplace_back(token, std::move(v));
  }

  validate_dataset(out.dataset);
  return out;
}

SyntheticFiles write_synthetic(const SyntheticData& data, const std::string& dir) {
  const auto files = SyntheticFiles::in(dir);
  const Dataset& d = data.dataset;

  std::ostringstream kb;
  serialize_kb(d.kb, kb);
  write_file_atomic(files.kb, kb.str());

  std::ostringstream qa;
  write_qa(qa, d.instances);
  write_file_atomic(files.qa, qa.str());

  std::string features;
  std::string concepts;
  for (const auto& id : d.features.image_ids()) {
    features += id + ' ' + std::to_string(d.features.image_dim());
    for (double v : d.features.features(id)) append_value(features, v);
    features += '\n';
    concepts += id + ' ';
    const auto hot = d.features.hot_concepts(id);
    for (std::size_t i = 0; i < hot.size(); ++i) concepts += (i ? "," : "") + std::to_string(hot[i]);
    concepts += '\n';
  }
  write_file_atomic(files.features, features);
  write_file_atomic(files.concepts, concepts);

  std::string labels;
  for (const auto& l : d.concept_labels) labels += l + '\n';
  write_file_atomic(files.concept_labels, labels);

  std::string vectors;
  for (const auto& [token, vec] : data.word_vectors) {
    vectors += token;
    for (double v : vec) append_value(vectors, v);
    vectors += '\n';
  }
  write_file_atomic(files.vectors, vectors);
  return files;
}

}  // namespace kbqa
