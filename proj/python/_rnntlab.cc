#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "rnntlab/experiment.h"
#include "rnntlab/transducer_loss.h"

namespace py = pybind11;
using namespace rnntlab;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

LogitLattice to_lattice(const Array& a) {
  if (a.ndim() != 3) throw Error("logits must have shape (T, U + 1, V + 1)");
  if (a.shape(1) < 1) throw Error("logits: label axis must have U + 1 >= 1 entries");
  LogitLattice lat(a.shape(0), a.shape(1) - 1, a.shape(2));
  std::copy(a.data(), a.data() + a.size(), lat.logits.begin());
  return lat;
}

FrameMatrix to_frames(const Array& a) {
  if (a.ndim() != 2) throw Error("features must have shape (T, D)");
  FrameMatrix f(a.shape(0), a.shape(1));
  std::copy(a.data(), a.data() + a.size(), f.values.begin());
  return f;
}

py::array_t<double> shaped(const std::vector<double>& v, std::vector<py::ssize_t> shape) {
  py::array_t<double> out(shape);
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

}  // namespace

PYBIND11_MODULE(_rnntlab, m) {
  m.doc() = "Transducer speech recognition toolkit";

  py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", m.attr("Error").ptr());
  py::register_exception<StageError>(m, "StageError", m.attr("Error").ptr());

  py::class_<Vocabulary>(m, "Vocabulary")
      .def(py::init<std::vector<std::string>>())
      .def_static("load", &Vocabulary::load)
      .def("save", &Vocabulary::save)
      .def("__len__", &Vocabulary::size)
      .def_property_readonly("pieces", &Vocabulary::pieces)
      .def("id", &Vocabulary::id)
      .def("encode", [](const Vocabulary& v, const std::string& text) { return encode(text, v); })
      .def("decode", [](const Vocabulary& v, const TokenSeq& seq) { return decode(seq, v); });

  m.def("build_vocab", [](const std::vector<std::string>& corpus, std::size_t size) {
    return build_vocab(corpus, size);
  });
  m.def("scheme_token_counts", [](const std::string& text, const Vocabulary& vocab) {
    const SchemeCounts c = scheme_token_counts(text, vocab);
    return py::make_tuple(c.marker_count, c.delimiter_count);
  }, py::arg("text"), py::arg("vocab"), "(marker, delimiter) token counts");

  m.def("rnnt_loss", [](const Array& logits, const TokenSeq& labels) {
    const LogitLattice lat = to_lattice(logits);
    const LossResult r = rnnt_loss_grad(lat, labels);
    return py::make_tuple(r.loss, shaped(r.grad, {logits.shape(0), logits.shape(1), logits.shape(2)}));
  }, py::arg("logits"), py::arg("labels"), "Loss and gradient for a (T, U + 1, V + 1) logit lattice");
  m.def("rnnt_loss_bruteforce", [](const Array& logits, const TokenSeq& labels) {
    return rnnt_loss_bruteforce(to_lattice(logits), labels).loss;
  });
  m.def("ctc_loss", [](const Array& logits, const TokenSeq& labels) {
    if (logits.ndim() != 2) throw Error("logits must have shape (T, V + 1)");
    const LossResult r =
        ctc_loss_grad({{logits.data(), static_cast<std::size_t>(logits.size())},
                       static_cast<std::size_t>(logits.shape(0)), static_cast<std::size_t>(logits.shape(1))},
                      labels);
    return py::make_tuple(r.loss, shaped(r.grad, {logits.shape(0), logits.shape(1)}));
  });
  m.def("lattice_memory_bytes", &lattice_memory_bytes, py::arg("frames"), py::arg("labels"), py::arg("vocab"),
        py::arg("bytes_per") = 4);

  py::class_<WerBreakdown>(m, "WerBreakdown")
      .def_readonly("substitutions", &WerBreakdown::substitutions)
      .def_readonly("deletions", &WerBreakdown::deletions)
      .def_readonly("insertions", &WerBreakdown::insertions)
      .def_readonly("ref_words", &WerBreakdown::ref_words)
      .def_readonly("wer", &WerBreakdown::wer);
  m.def("wer", &wer, py::arg("refs"), py::arg("hyps"));
  m.def("latency_ms", &latency_ms, py::arg("mean_gap"), py::arg("lookahead_frames"), py::arg("frame_ms"));
  m.def("total_lookahead_ms", [](const std::string& arch) { return total_lookahead(parse_arch_spec(arch)).ms; });

  py::class_<Hypothesis>(m, "Hypothesis")
      .def_readonly("tokens", &Hypothesis::tokens)
      .def_readonly("score", &Hypothesis::score)
      .def_readonly("emit_frames", &Hypothesis::emit_frames);

  py::class_<ModelParams>(m, "Model")
      .def_static("init", [](const std::string& arch, std::size_t vocab_size, std::uint64_t seed) {
        ArchSpec a = parse_arch_spec(arch);
        a.vocab_size = vocab_size;
        return ModelParams::init(a, seed);
      }, py::arg("arch"), py::arg("vocab_size"), py::arg("seed") = 1)
      .def_static("load", &ModelParams::load)
      .def("save", &ModelParams::save)
      .def_property_readonly("arch", [](const ModelParams& p) { return arch_name(p.arch); })
      .def_property_readonly("stack_factor", [](const ModelParams& p) { return p.arch.stack_factor; })
      .def("greedy", [](const ModelParams& p, const Array& stacked) { return greedy_decode(p, to_frames(stacked)); })
      .def("beam", [](const ModelParams& p, const Array& stacked, std::size_t beam) {
        return beam_decode(p, to_frames(stacked), beam);
      }, py::arg("stacked"), py::arg("beam") = kDefaultBeam)
      .def("log_prob", [](const ModelParams& p, const Array& stacked, const TokenSeq& labels) {
        return sequence_log_prob(p, to_frames(stacked), labels);
      });

  m.def("stack_frames", [](const Array& feat, std::size_t factor) {
    const FrameMatrix s = stack_frames(to_frames(feat), factor);
    return shaped(s.values, {static_cast<py::ssize_t>(s.frames), static_cast<py::ssize_t>(s.dim)});
  });

  py::class_<LmParams>(m, "LanguageModel")
      .def_static("load", &LmParams::load)
      .def("score", &lm_score);
  m.def("rescore", &rescore, py::arg("nbest"), py::arg("lm"), py::arg("lam"));

  m.def("run_experiment", [](const std::string& config_text, const std::filesystem::path& out,
                             std::optional<std::uint64_t> seed) {
    ExperimentConfig cfg = parse_experiment_config(config_text);
    if (seed) cfg.set_seed(*seed);
    cfg.out = out;
    std::ostringstream log;
    {
      py::gil_scoped_release release;
      run_experiment(cfg, log);
    }
    return log.str();
  }, py::arg("config"), py::arg("out"), py::arg("seed") = py::none(), "Runs the staged pipeline; returns the log");
  m.def("config_hash", [](const std::string& text) { return parse_experiment_config(text).hash(); });
}
