#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "kbqa/errors.hpp"
#include "kbqa/runner.hpp"
#include "kbqa/scorer.hpp"
#include "kbqa/synthetic.hpp"
#include "kbqa/trainer.hpp"

namespace py = pybind11;
using namespace kbqa;

namespace {

void use_data_dir(RunConfig& c, const std::string& dir) {
  const auto f = SyntheticFiles::in(dir);
  c.paths.kb = f.kb;
  c.paths.qa = f.qa;
  c.paths.features = f.features;
  c.paths.concepts = f.concepts;
  c.paths.concept_labels = f.concept_labels;
  c.paths.vectors = f.vectors;
}

py::dict metrics_dict(const Metrics& m) {
  py::dict d;
  d["answer_at_1"] = m.answer_at_1;
  d["answer_at_3"] = m.answer_at_3;
  d["fact_at_1"] = m.fact_at_1;
  d["fact_at_3"] = m.fact_at_3;
  d["relation_at_1"] = m.relation_at_1;
  d["relation_at_3"] = m.relation_at_3;
  d["source_accuracy"] = m.source_accuracy;
  d["questions"] = m.questions;
  d["no_fact"] = m.no_fact;
  return d;
}

RunConfig finalized(RunConfig c) {
  c.finalize();
  return c;
}

}  // namespace

PYBIND11_MODULE(_kbqa, m) {
  m.doc() = "Fact-based visual question answering core";
  m.attr("__version__") = kVersion;

  py::register_exception<DataError>(m, "DataError", PyExc_RuntimeError);
  py::register_exception<LoadError>(m, "LoadError", PyExc_RuntimeError);

  py::class_<RunConfig>(m, "Config")
      .def(py::init<>())
      .def_static("load", &RunConfig::load, py::arg("path"))
      .def_static("from_json", [](const std::string& text) { return RunConfig::from_json_text(text); }, py::arg("text"))
      .def("to_json", &RunConfig::to_json_text)
      .def("hash", &RunConfig::hash)
      .def("folds", &RunConfig::folds)
      .def("use_data_dir", &use_data_dir, py::arg("dir"), "Point every dataset path at a synth output directory")
      .def_readwrite("seed", &RunConfig::seed)
      .def_readwrite("fold", &RunConfig::fold)
      .def_readwrite("threads", &RunConfig::threads)
      .def_property(
          "variant", [](const RunConfig& c) { return std::string(to_string(c.variant)); },
          [](RunConfig& c, const std::string& s) {
            const auto v = parse_variant(s);
            if (!v) throw UsageError("variant: expected Q+I, Q+VC or Q+I+VC, got '" + s + "'");
            c.variant = *v;
          })
      .def_property(
          "iterations", [](const RunConfig& c) { return c.margin.iterations; },
          [](RunConfig& c, std::size_t t) { c.margin.iterations = t; })
      .def_property(
          "epochs", [](const RunConfig& c) { return c.margin.epochs; },
          [](RunConfig& c, std::size_t e) { c.margin.epochs = e; })
      .def_property(
          "out", [](const RunConfig& c) { return c.paths.out; }, [](RunConfig& c, std::string s) { c.paths.out = s; })
      .def_property(
          "checkpoints", [](const RunConfig& c) { return c.paths.checkpoints; },
          [](RunConfig& c, std::string s) { c.paths.checkpoints = s; })
      .def_property(
          "kb", [](const RunConfig& c) { return c.paths.kb; }, [](RunConfig& c, std::string s) { c.paths.kb = s; });

  m.def(
      "synth",
      [](const RunConfig& c, const std::string& out_dir) {
        SyntheticConfig cfg = c.synth;
        cfg.word_dim = c.word_dim;
        cfg.image_dim = c.dims.image_dim;
        cfg.concept_dim = c.dims.concept_dim;
        const auto files = write_synthetic(generate_synthetic(cfg), out_dir);
        return py::dict(py::arg("kb") = files.kb, py::arg("qa") = files.qa, py::arg("features") = files.features,
                        py::arg("concepts") = files.concepts, py::arg("concept_labels") = files.concept_labels,
                        py::arg("vectors") = files.vectors);
      },
      py::arg("config"), py::arg("out_dir"), "Write the synthetic dataset files; returns their paths");

  m.def(
      "train",
      [](const RunConfig& c, const std::string& kind) {
        const auto k = parse_model_kind(kind);
        if (!k) throw UsageError("kind: expected relation, source or scorer, got '" + kind + "'");
        std::ostringstream log;
        TrainReport r;
        {
          py::gil_scoped_release release;
          r = run_train(finalized(c), *k, log);
        }
        return py::dict(py::arg("checkpoints") = r.checkpoints, py::arg("metrics_files") = r.metrics_files,
                        py::arg("heldout") = r.heldout, py::arg("log") = log.str());
      },
      py::arg("config"), py::arg("kind"));

  m.def(
      "evaluate",
      [](const RunConfig& c) {
        std::ostringstream log;
        EvaluateReport r;
        {
          py::gil_scoped_release release;
          r = run_evaluate(finalized(c), log);
        }
        py::dict rows;
        for (const auto& [name, metrics] : r.rows) rows[py::str(name)] = metrics_dict(metrics);
        return rows;
      },
      py::arg("config"), "Per-fold and averaged metrics keyed by fold name");

  m.def(
      "answer",
      [](const RunConfig& c, const std::string& image_id, const std::string& question) {
        const auto r = run_answer(finalized(c), image_id, question);
        const Prediction& p = r.prediction;
        py::list facts;
        for (const auto& f : p.facts) facts.append(py::make_tuple(f.index, f.score));
        return py::dict(py::arg("answer") = p.answer, py::arg("relation") = std::string(to_string(p.relation)),
                        py::arg("source") = std::string(to_string(p.source)),
                        py::arg("image_probability") = p.image_probability, py::arg("facts") = facts,
                        py::arg("no_fact") = p.no_fact, py::arg("text") = r.text);
      },
      py::arg("config"), py::arg("image_id"), py::arg("question"));

  m.def(
      "kb_stats",
      [](const std::string& path) {
        const auto s = kb_stats(parse_kb(path));
        py::dict per;
        for (Relation r : all_relations()) per[py::str(std::string(to_string(r)))] = s.per_relation[static_cast<std::size_t>(r)];
        return py::dict(py::arg("per_relation") = per, py::arg("total_facts") = s.total_facts,
                        py::arg("vocabulary_size") = s.vocabulary_size);
      },
      py::arg("path"));

  m.def(
      "convert_fvqa",
      [](const std::string& questions, const std::string& facts, const std::string& fold_dir, const std::string& out) {
        const auto r = convert_fvqa(questions, facts, fold_dir, out);
        return py::dict(py::arg("facts") = r.facts, py::arg("questions") = r.questions, py::arg("skipped") = r.skipped);
      },
      py::arg("questions_json"), py::arg("facts_json"), py::arg("fold_dir") = "", py::arg("out_dir"));

  m.def("score", [](const std::vector<double>& fact, const std::vector<double>& iq) { return score(fact, iq); },
        py::arg("fact_emb"), py::arg("iq_emb"), "Cosine score; -inf when either side has zero norm");
  m.def(
      "hinge_loss",
      [](const std::vector<double>& scores, std::size_t gt, double task_loss) { return hinge_loss(scores, gt, task_loss); },
      py::arg("scores"), py::arg("gt_index"), py::arg("task_loss") = 1.0);
}
