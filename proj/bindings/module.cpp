// Python bindings for the main pipeline operations: geometry, synthetic
// scenes, training, detection, selection, metrics, and file round-trips.

#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "semline/error.hpp"
#include "semline/io.hpp"
#include "semline/train.hpp"

namespace py = pybind11;
using namespace semline;

namespace {

PairwiseMatrix matrix_from_rows(const std::vector<std::vector<double>>& rows) {
  const int n = static_cast<int>(rows.size());
  PairwiseMatrix m = PairwiseMatrix::make(n);
  for (int i = 0; i < n; ++i) {
    if (static_cast<int>(rows[static_cast<std::size_t>(i)].size()) != n) {
      throw DimensionError("pairwise matrix rows must form a square");
    }
    for (int j = 0; j < n; ++j) m.at(i, j) = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
  }
  return m;
}

}  // namespace

PYBIND11_MODULE(semline, m) {
  m.doc() = "semantic line detection: candidates, mirror attention, pairwise selection";

  py::register_exception<Error>(m, "PipelineError");

  py::class_<ImageSize>(m, "ImageSize")
      .def(py::init<int, int>(), py::arg("width"), py::arg("height"))
      .def_readwrite("width", &ImageSize::width)
      .def_readwrite("height", &ImageSize::height)
      .def("__repr__", [](const ImageSize& s) {
        return "ImageSize(" + std::to_string(s.width) + ", " + std::to_string(s.height) + ")";
      });

  py::class_<Line>(m, "Line")
      .def(py::init<double, double, double, double>(), py::arg("x_s"), py::arg("y_s"),
           py::arg("x_e"), py::arg("y_e"))
      .def_readwrite("x_s", &Line::x_s)
      .def_readwrite("y_s", &Line::y_s)
      .def_readwrite("x_e", &Line::x_e)
      .def_readwrite("y_e", &Line::y_e)
      .def("__repr__", [](const Line& l) {
        return "Line(" + std::to_string(l.x_s) + ", " + std::to_string(l.y_s) + ", " +
               std::to_string(l.x_e) + ", " + std::to_string(l.y_e) + ")";
      });

  py::class_<FeatureGrid>(m, "FeatureGrid")
      .def_static("zeros", &FeatureGrid::zeros, py::arg("height"), py::arg("width"),
                  py::arg("channels"))
      .def_readonly("height", &FeatureGrid::h)
      .def_readonly("width", &FeatureGrid::w)
      .def_readonly("channels", &FeatureGrid::c)
      .def_readwrite("data", &FeatureGrid::v)
      .def("at", [](const FeatureGrid& g, int y, int x, int c) { return g.at(y, x, c); },
           py::arg("y"), py::arg("x"), py::arg("c"));

  py::class_<GtLine>(m, "GtLine")
      .def(py::init([](const Line& line, bool primary) {
             return GtLine{line, primary};
           }),
           py::arg("line"), py::arg("primary") = false)
      .def_readwrite("line", &GtLine::line)
      .def_readwrite("primary", &GtLine::primary);

  py::class_<Detection>(m, "Detection")
      .def(py::init([](const Line& line, double score, bool primary) {
             return Detection{line, score, primary};
           }),
           py::arg("line"), py::arg("score") = 0.0, py::arg("primary") = false)
      .def_readwrite("line", &Detection::line)
      .def_readwrite("score", &Detection::score)
      .def_readwrite("primary", &Detection::primary);

  py::enum_<SceneMode>(m, "SceneMode")
      .value("heterogeneous", SceneMode::heterogeneous)
      .value("symmetric", SceneMode::symmetric);

  py::enum_<AttentionMode>(m, "AttentionMode")
      .value("mirror", AttentionMode::mirror)
      .value("noflip", AttentionMode::noflip)
      .value("none", AttentionMode::none);

  py::enum_<SelectMode>(m, "SelectMode")
      .value("rm", SelectMode::rm)
      .value("nms", SelectMode::nms)
      .value("none", SelectMode::none);

  py::class_<SceneConfig>(m, "SceneConfig")
      .def(py::init<>())
      .def_readwrite("size", &SceneConfig::size)
      .def_readwrite("mode", &SceneConfig::mode)
      .def_readwrite("contrast", &SceneConfig::contrast)
      .def_readwrite("noise", &SceneConfig::noise)
      .def_readwrite("min_lines", &SceneConfig::min_lines)
      .def_readwrite("max_lines", &SceneConfig::max_lines)
      .def_readwrite("min_region_frac", &SceneConfig::min_region_frac)
      .def_readwrite("primary_boost", &SceneConfig::primary_boost)
      .def_readwrite("max_gt_overlap", &SceneConfig::max_gt_overlap);

  py::class_<Topology>(m, "Topology")
      .def(py::init<>())
      .def_readwrite("in_channels", &Topology::in_channels)
      .def_readwrite("stage_channels", &Topology::stage_channels)
      .def_readwrite("attention_n", &Topology::attention_n)
      .def_readwrite("sigma", &Topology::sigma)
      .def_readwrite("pool_threshold", &Topology::pool_threshold)
      .def_readwrite("fc_width", &Topology::fc_width)
      .def_readwrite("attention", &Topology::attention);

  py::class_<SyntheticScene>(m, "SyntheticScene")
      .def_readwrite("image", &SyntheticScene::image)
      .def_readwrite("gts", &SyntheticScene::gts)
      .def_readwrite("mode", &SyntheticScene::mode);

  py::class_<TrainConfig>(m, "TrainConfig")
      .def(py::init<>())
      .def_readwrite("scene", &TrainConfig::scene)
      .def_readwrite("train_count", &TrainConfig::train_count)
      .def_readwrite("test_count", &TrainConfig::test_count)
      .def_readwrite("topo", &TrainConfig::topo)
      .def_readwrite("siamese_hidden", &TrainConfig::siamese_hidden)
      .def_readwrite("candidate_step", &TrainConfig::candidate_step)
      .def_readwrite("positive_threshold", &TrainConfig::positive_threshold)
      .def_readwrite("epochs", &TrainConfig::epochs)
      .def_readwrite("learning_rate", &TrainConfig::learning_rate)
      .def_readwrite("batch_pos", &TrainConfig::batch_pos)
      .def_readwrite("batch_neg", &TrainConfig::batch_neg)
      .def_readwrite("lambda_", &TrainConfig::lambda)
      .def_readwrite("stage2_epochs", &TrainConfig::stage2_epochs)
      .def_readwrite("stage2_learning_rate", &TrainConfig::stage2_learning_rate)
      .def_readwrite("stage2_pair_batch", &TrainConfig::stage2_pair_batch)
      .def_readwrite("max_detections", &TrainConfig::max_detections)
      .def_readwrite("select_mode", &TrainConfig::select_mode)
      .def_readwrite("nms_threshold", &TrainConfig::nms_threshold)
      .def_readwrite("tau_lo", &TrainConfig::tau_lo)
      .def_readwrite("tau_hi", &TrainConfig::tau_hi)
      .def_readwrite("tau_step", &TrainConfig::tau_step)
      .def_readwrite("seed", &TrainConfig::seed);

  py::class_<Checkpoint>(m, "Checkpoint");

  py::class_<TrainedModel>(m, "TrainedModel")
      .def_readwrite("params", &TrainedModel::params)
      .def("log_text", [](const TrainedModel& t) { return t.log.text(); });

  py::class_<CandidateSet>(m, "CandidateSet")
      .def_readonly("lines", &CandidateSet::lines);

  py::class_<SelectionStep>(m, "SelectionStep")
      .def_readonly("selected", &SelectionStep::selected)
      .def_readonly("removed", &SelectionStep::removed);

  py::class_<SelectionResult>(m, "SelectionResult")
      .def_readonly("selected", &SelectionResult::selected)
      .def_readonly("steps", &SelectionResult::steps);

  py::class_<AnnotationRecord>(m, "AnnotationRecord")
      .def(py::init([](const std::string& id, const ImageSize& size,
                       const std::vector<GtLine>& lines) {
             return AnnotationRecord{id, size, lines};
           }),
           py::arg("id"), py::arg("size"), py::arg("lines"))
      .def_readwrite("id", &AnnotationRecord::id)
      .def_readwrite("size", &AnnotationRecord::size)
      .def_readwrite("lines", &AnnotationRecord::lines);

  py::class_<DetectionRecord>(m, "DetectionRecord")
      .def(py::init([](const std::string& id, const ImageSize& size,
                       const std::vector<Detection>& detections) {
             return DetectionRecord{id, size, detections};
           }),
           py::arg("id"), py::arg("size"), py::arg("detections"))
      .def_readwrite("id", &DetectionRecord::id)
      .def_readwrite("size", &DetectionRecord::size)
      .def_readwrite("detections", &DetectionRecord::detections);

  py::class_<EvalCurve>(m, "EvalCurve")
      .def_readonly("taus", &EvalCurve::taus)
      .def_readonly("values", &EvalCurve::values)
      .def_readonly("auc", &EvalCurve::auc);

  py::class_<EvalSummary>(m, "EvalSummary")
      .def_readonly("accuracy", &EvalSummary::accuracy)
      .def_readonly("precision", &EvalSummary::precision)
      .def_readonly("recall", &EvalSummary::recall)
      .def_readonly("accuracy_at_085", &EvalSummary::accuracy_at_085)
      .def("text", &EvalSummary::text, py::arg("images"));

  // geometry
  m.def("canonical_line", &canonical_line, py::arg("line"), py::arg("size"));
  m.def("miou", &miou, py::arg("a"), py::arg("b"), py::arg("size"));
  m.def("pairwise_miou", &pairwise_miou, py::arg("lines"), py::arg("size"));
  m.def("generate_candidates", &generate_candidates, py::arg("size"), py::arg("step"));

  // synthetic scenes
  m.def("gen_synthetic", &gen_synthetic, py::arg("count"), py::arg("config"), py::arg("seed"));

  // training & detection
  m.def("config_from_dict",
        [](const std::map<std::string, std::string>& kv) { return config_from_map(kv); },
        py::arg("kv"));
  m.def("train_toy", &train_toy, py::arg("scenes"), py::arg("config"));
  m.def("build_candidate_set", &build_candidate_set, py::arg("size"), py::arg("topology"),
        py::arg("step"));
  m.def("detect", &detect, py::arg("image"), py::arg("model"), py::arg("candidates"),
        py::arg("config"));
  m.def("detector_grad_check",
        [](std::uint64_t seed, std::size_t max_coords) {
          const GradCheckReport r = detector_grad_check(seed, max_coords);
          return py::make_tuple(r.max_rel_err, r.coords_checked);
        },
        py::arg("seed"), py::arg("max_coords") = 200);

  // selection
  m.def("select_iterate",
        [](const std::vector<std::vector<double>>& pr, const std::vector<std::vector<double>>& pm) {
          return select_iterate(matrix_from_rows(pr), matrix_from_rows(pm));
        },
        py::arg("pr"), py::arg("pm"));
  m.def("nms", &nms, py::arg("lines"), py::arg("scores"), py::arg("size"),
        py::arg("overlap_threshold"));

  // metrics
  m.def("primary_accuracy", &primary_accuracy, py::arg("preds"), py::arg("gts"),
        py::arg("sizes"), py::arg("tau"));
  m.def("precision_recall", &precision_recall, py::arg("preds"), py::arg("gts"),
        py::arg("sizes"), py::arg("tau"));
  m.def("evaluate_detections", &evaluate_detections, py::arg("detections"),
        py::arg("annotations"), py::arg("tau_lo") = 0.5, py::arg("tau_hi") = 1.0,
        py::arg("tau_step") = 0.005);

  // feature extraction & pairwise comparison
  m.def("line_feature",
        [](const Checkpoint& model, const FeatureGrid& image, const Line& line) {
          return line_feature(model.detector, image, line);
        },
        py::arg("model"), py::arg("image"), py::arg("line"));
  m.def("pairwise_scores",
        [](const std::vector<std::vector<double>>& features, const Checkpoint& model) {
          const auto [pr, pm] = pairwise_scores(features, model.rank, model.match);
          const int n = pr.n;
          std::vector<std::vector<double>> pr_rows(static_cast<std::size_t>(n)),
              pm_rows(static_cast<std::size_t>(n));
          for (int i = 0; i < n; ++i) {
            for (int j = 0; j < n; ++j) {
              pr_rows[static_cast<std::size_t>(i)].push_back(pr.at(i, j));
              pm_rows[static_cast<std::size_t>(i)].push_back(pm.at(i, j));
            }
          }
          return py::make_tuple(pr_rows, pm_rows);
        },
        py::arg("features"), py::arg("model"));

  // file round-trips
  m.def("save_annotations", &save_annotations, py::arg("path"), py::arg("records"));
  m.def("load_annotations", &load_annotations, py::arg("path"));
  m.def("save_detections", &save_detections, py::arg("path"), py::arg("records"));
  m.def("load_detections", &load_detections, py::arg("path"));
  m.def("write_pfm", &write_pfm, py::arg("path"), py::arg("image"));
  m.def("read_pfm", &read_pfm, py::arg("path"));
  m.def("save_checkpoint", &save_checkpoint, py::arg("path"), py::arg("checkpoint"));
  m.def("load_checkpoint", &load_checkpoint, py::arg("path"));
}
