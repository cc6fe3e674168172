// Command-line driver for the semantic line pipeline: dataset generation,
// training, detection, selection replay, evaluation, gradient verification,
// and benchmarks. Every run is fully determined by --seed and --config.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "semline/error.hpp"
#include "semline/io.hpp"
#include "semline/rng.hpp"
#include "semline/train.hpp"

namespace fs = std::filesystem;
using namespace semline;

namespace {

struct CommonOpts {
  std::string config_path;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, CommonOpts& o, bool out_required = true) {
  cmd->add_option("--config", o.config_path, "key=value configuration file");
  auto* out = cmd->add_option("--out", o.out_dir, "output directory");
  if (out_required) out->required();
  cmd->add_option("--seed", o.seed, "seed override (takes precedence over the config file)");
}

TrainConfig load_config(const CommonOpts& o) {
  TrainConfig c = o.config_path.empty() ? TrainConfig{}
                                        : config_from_map(load_config_map(o.config_path));
  if (o.seed) c.seed = *o.seed;
  return c;
}

fs::path ensure_out(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory '" + dir + "': " + ec.message());
  return fs::path(dir);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
  os << text;
  if (!os) throw IoError("failed while writing '" + path.string() + "'");
}

std::string image_id(int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "img_%04d", index);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

/// Loads a generated dataset directory: annotations plus one image file per id.
std::vector<SyntheticScene> load_dataset(const std::string& dir, const SceneMode mode,
                                         std::vector<AnnotationRecord>* anns_out) {
  const auto anns = load_annotations((fs::path(dir) / "annotations.txt").string());
  std::vector<SyntheticScene> scenes;
  scenes.reserve(anns.size());
  for (const AnnotationRecord& ann : anns) {
    FeatureGrid image = read_pfm((fs::path(dir) / (ann.id + ".pfm")).string());
    if (image.w != ann.size.width || image.h != ann.size.height) {
      throw ValidationError("image '" + ann.id + "' does not match its annotated size");
    }
    scenes.push_back({std::move(image), ann.lines, mode});
  }
  if (anns_out) *anns_out = anns;
  return scenes;
}

// ---- subcommand bodies -----------------------------------------------------

int cmd_gen_data(const CommonOpts& o, const std::string& split, std::optional<int> count_opt) {
  const TrainConfig c = load_config(o);
  const bool test = split == "test";
  const int count = count_opt.value_or(test ? c.test_count : c.train_count);
  // Distinct seed streams keep the two splits disjoint under one base seed.
  const std::uint64_t stream = mix_seed(c.seed, test ? 0x67747374ULL : 0x6774726eULL);
  const auto scenes = gen_synthetic(count, c.scene, stream);

  const fs::path dir = ensure_out(o.out_dir);
  std::vector<AnnotationRecord> anns;
  anns.reserve(scenes.size());
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const std::string id = image_id(static_cast<int>(i));
    write_pfm((dir / (id + ".pfm")).string(), scenes[i].image);
    anns.push_back({id, c.scene.size, scenes[i].gts});
  }
  save_annotations((dir / "annotations.txt").string(), anns);
  std::cout << "wrote " << scenes.size() << " " << split << " scene(s) ("
            << to_string(c.scene.mode) << ", " << c.scene.size.width << "x"
            << c.scene.size.height << ") to " << dir.string() << "\n";
  return 0;
}

int cmd_train(const CommonOpts& o, const std::string& data_dir) {
  const TrainConfig c = load_config(o);
  const auto scenes = load_dataset(data_dir, c.scene.mode, nullptr);
  const auto t0 = std::chrono::steady_clock::now();
  const TrainedModel model = train_toy(scenes, c);
  const fs::path dir = ensure_out(o.out_dir);
  save_checkpoint((dir / "checkpoint.bin").string(), model.params);
  write_text(dir / "train_log.txt", model.log.text());
  std::ostringstream os;
  os << "trained on " << scenes.size() << " scene(s) in " << std::fixed
     << std::setprecision(1) << seconds_since(t0) << " s\n";
  if (!model.log.stage1.empty()) {
    os << std::setprecision(6) << "stage1 cls loss " << model.log.stage1.front().cls
       << " -> " << model.log.stage1.back().cls << "\n";
  }
  if (!model.log.rank_ce.empty()) {
    os << "stage2 rank ce " << model.log.rank_ce.back() << ", match ce "
       << model.log.match_ce.back() << " (final epoch)\n";
  }
  std::cout << os.str();
  return 0;
}

int cmd_detect(const CommonOpts& o, const std::string& model_path, const std::string& data_dir,
               const std::string& mode_override) {
  TrainConfig c = load_config(o);
  if (!mode_override.empty()) c.select_mode = select_mode_from_string(mode_override);
  const Checkpoint model = load_checkpoint(model_path);

  std::vector<AnnotationRecord> anns;
  const auto scenes = load_dataset(data_dir, c.scene.mode, &anns);

  // Candidate geometry depends only on image size; cache per distinct size.
  std::map<std::pair<int, int>, CandidateSet> cand_cache;
  std::vector<DetectionRecord> selected, raw_records;
  std::vector<PairwiseRecord> pairwise;
  std::vector<std::string> ids;
  std::vector<SelectionResult> traces;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const ImageSize size{scenes[i].image.w, scenes[i].image.h};
    const auto key = std::make_pair(size.width, size.height);
    auto it = cand_cache.find(key);
    if (it == cand_cache.end()) {
      it = cand_cache
               .emplace(key, build_candidate_set(size, model.detector.topo, c.candidate_step))
               .first;
    }
    const RawDetections raw = detect_raw(scenes[i].image, model, it->second, c, true);
    auto [dets, trace] = apply_selection(raw.lines, raw.scores, raw.pr, raw.pm, c.select_mode,
                                         c.nms_threshold, size);
    selected.push_back({anns[i].id, size, std::move(dets)});

    std::vector<Detection> raw_dets;
    for (std::size_t k = 0; k < raw.lines.size(); ++k) {
      raw_dets.push_back({raw.lines[k], raw.scores[k], k == 0});
    }
    raw_records.push_back({anns[i].id, size, std::move(raw_dets)});
    pairwise.push_back({anns[i].id, raw.pr, raw.pm});
    ids.push_back(anns[i].id);
    traces.push_back(std::move(trace));
  }

  const fs::path dir = ensure_out(o.out_dir);
  save_detections((dir / "detections.txt").string(), selected);
  save_detections((dir / "raw_detections.txt").string(), raw_records);
  save_pairwise((dir / "pairwise.txt").string(), pairwise);
  if (c.select_mode == SelectMode::rm) {
    save_selection_traces((dir / "selection_trace.txt").string(), ids, traces);
  }
  std::size_t total = 0;
  for (const auto& r : selected) total += r.detections.size();
  std::cout << "detected " << total << " line(s) across " << selected.size()
            << " image(s) [selection: " << to_string(c.select_mode) << "] -> "
            << dir.string() << "\n";
  return 0;
}

int cmd_select(const CommonOpts& o, const std::string& det_path, const std::string& pair_path,
               const std::string& mode_override) {
  TrainConfig c = load_config(o);
  if (!mode_override.empty()) c.select_mode = select_mode_from_string(mode_override);
  const auto raw_records = load_detections(det_path);

  std::vector<PairwiseRecord> loaded;
  std::map<std::string, const PairwiseRecord*> pair_by_id;
  if (!pair_path.empty()) {
    loaded = load_pairwise(pair_path);
    for (const PairwiseRecord& p : loaded) pair_by_id[p.id] = &p;
  } else if (c.select_mode == SelectMode::rm) {
    throw ConfigError("selection mode 'rm' requires --pairwise matrices");
  }

  std::vector<DetectionRecord> selected;
  std::vector<std::string> ids;
  std::vector<SelectionResult> traces;
  for (const DetectionRecord& rec : raw_records) {
    std::vector<Line> lines;
    std::vector<double> scores;
    for (const Detection& d : rec.detections) {
      lines.push_back(d.line);
      scores.push_back(d.score);
    }
    PairwiseMatrix pr, pm;
    if (const auto it = pair_by_id.find(rec.id); it != pair_by_id.end()) {
      pr = it->second->pr;
      pm = it->second->pm;
    } else if (c.select_mode == SelectMode::rm) {
      throw ValidationError("no pairwise matrices for image '" + rec.id + "'");
    }
    auto [dets, trace] =
        apply_selection(lines, scores, pr, pm, c.select_mode, c.nms_threshold, rec.size);
    selected.push_back({rec.id, rec.size, std::move(dets)});
    ids.push_back(rec.id);
    traces.push_back(std::move(trace));
  }

  const fs::path dir = ensure_out(o.out_dir);
  save_detections((dir / "detections.txt").string(), selected);
  if (c.select_mode == SelectMode::rm) {
    save_selection_traces((dir / "selection_trace.txt").string(), ids, traces);
  }
  std::cout << "re-selected " << selected.size() << " image(s) [selection: "
            << to_string(c.select_mode) << "] -> " << dir.string() << "\n";
  return 0;
}

int cmd_eval(const CommonOpts& o, const std::string& det_path, const std::string& ann_path) {
  const TrainConfig c = load_config(o);
  const auto dets = load_detections(det_path);
  const auto anns = load_annotations(ann_path);
  const EvalSummary summary = evaluate_detections(dets, anns, c.tau_lo, c.tau_hi, c.tau_step);

  const fs::path dir = ensure_out(o.out_dir);
  {
    std::ofstream os(dir / "accuracy_curve.csv", std::ios::binary);
    if (!os) throw IoError("cannot open accuracy_curve.csv for writing");
    write_accuracy_csv(os, summary.accuracy);
  }
  {
    std::ofstream os(dir / "pr_curve.csv", std::ios::binary);
    if (!os) throw IoError("cannot open pr_curve.csv for writing");
    write_pr_csv(os, summary.precision, summary.recall);
  }
  const std::string text = summary.text(anns.size());
  write_text(dir / "summary.txt", text);
  std::cout << text;
  return 0;
}

int cmd_gradcheck(const CommonOpts& o, int seeds, int coords) {
  const TrainConfig c = load_config(o);
  constexpr double kTol = 1e-4;
  double worst = 0.0;
  std::ostringstream os;
  os << std::scientific << std::setprecision(3);
  const auto t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < seeds; ++i) {
    const GradCheckReport rep =
        detector_grad_check(c.seed + static_cast<std::uint64_t>(i),
                            static_cast<std::size_t>(coords));
    worst = std::max(worst, rep.max_rel_err);
    os << "seed " << c.seed + static_cast<std::uint64_t>(i) << " max_rel_err "
       << rep.max_rel_err << " coords " << rep.coords_checked << "\n";
  }
  os << "worst " << worst << " tolerance " << kTol << " seconds " << std::fixed
     << std::setprecision(1) << seconds_since(t0) << "\n";
  os << (worst < kTol ? "PASS" : "FAIL") << "\n";
  if (!o.out_dir.empty()) write_text(ensure_out(o.out_dir) / "gradcheck.txt", os.str());
  std::cout << os.str();
  if (!(worst < kTol)) {
    throw ValidationError("gradient check exceeded tolerance");
  }
  return 0;
}

int cmd_bench(const CommonOpts& o, int n_lines, int n_dets) {
  const TrainConfig c = load_config(o);
  const ImageSize size{100, 100};
  std::vector<Line> lines = generate_candidates(size, 4.0);
  if (static_cast<int>(lines.size()) > n_lines) {
    lines.resize(static_cast<std::size_t>(n_lines));
  }
  auto t0 = std::chrono::steady_clock::now();
  const auto matrix = pairwise_miou(lines, size);
  const double miou_s = seconds_since(t0);
  double checksum = 0.0;
  for (const auto& row : matrix) {
    for (double v : row) checksum += v;
  }

  Rng rng(c.seed);
  std::vector<std::vector<double>> features(static_cast<std::size_t>(n_dets));
  for (auto& f : features) {
    f.resize(static_cast<std::size_t>(c.topo.fc_width));
    for (double& v : f) v = rng.uniform(-1.0, 1.0);
  }
  const auto rank = make_siamese(c.topo.fc_width, c.siamese_hidden, mix_seed(c.seed, 1));
  const auto match = make_siamese(c.topo.fc_width, c.siamese_hidden, mix_seed(c.seed, 2));
  t0 = std::chrono::steady_clock::now();
  const auto [pr, pm] = pairwise_scores(features, rank, match);
  const double score_s = seconds_since(t0);
  checksum += pr.v.empty() ? 0.0 : pr.v.front() + pm.v.back();

  std::ostringstream os;
  os << "pairwise_miou_lines=" << lines.size() << "\n";
  os << std::fixed << std::setprecision(6);
  os << "pairwise_miou_seconds=" << miou_s << "\n";
  os << "pairwise_scores_n=" << n_dets << "\n";
  os << "pairwise_scores_seconds=" << score_s << "\n";
  os << "checksum=" << checksum << "\n";
  if (!o.out_dir.empty()) write_text(ensure_out(o.out_dir) / "bench.txt", os.str());
  std::cout << os.str();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"semantic line detection pipeline"};
  app.require_subcommand(1);

  CommonOpts gen_o;
  std::string gen_split = "train";
  std::optional<int> gen_count;
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic scene dataset");
  add_common(gen, gen_o);
  gen->add_option("--split", gen_split, "dataset split: train or test (default train)")
      ->check(CLI::IsMember({"train", "test"}));
  gen->add_option("--count", gen_count, "scene count override");

  CommonOpts train_o;
  std::string train_data;
  auto* train = app.add_subcommand("train", "train the detector and comparison heads");
  add_common(train, train_o);
  train->add_option("--data", train_data, "dataset directory from gen-data")->required();

  CommonOpts det_o;
  std::string det_model, det_data, det_mode;
  auto* det = app.add_subcommand("detect", "run detection and selection over a dataset");
  add_common(det, det_o);
  det->add_option("--model", det_model, "checkpoint file from train")->required();
  det->add_option("--data", det_data, "dataset directory from gen-data")->required();
  det->add_option("--mode", det_mode, "selection mode override: rm, nms, or none")
      ->check(CLI::IsMember({"rm", "nms", "none"}));

  CommonOpts sel_o;
  std::string sel_dets, sel_pairs, sel_mode;
  auto* sel = app.add_subcommand("select", "re-run selection on saved detections");
  add_common(sel, sel_o);
  sel->add_option("--detections", sel_dets, "raw detection file from detect")->required();
  sel->add_option("--pairwise", sel_pairs, "pairwise matrix file from detect");
  sel->add_option("--mode", sel_mode, "selection mode override: rm, nms, or none")
      ->check(CLI::IsMember({"rm", "nms", "none"}));

  CommonOpts eval_o;
  std::string eval_dets, eval_anns;
  auto* ev = app.add_subcommand("eval", "score detections against annotations");
  add_common(ev, eval_o);
  ev->add_option("--detections", eval_dets, "detection file")->required();
  ev->add_option("--annotations", eval_anns, "annotation file")->required();

  CommonOpts gc_o;
  int gc_seeds = 20, gc_coords = 200;
  auto* gc = app.add_subcommand("gradcheck", "verify analytic gradients numerically");
  add_common(gc, gc_o, /*out_required=*/false);
  gc->add_option("--seeds", gc_seeds, "number of seeds (default 20)")
      ->check(CLI::PositiveNumber);
  gc->add_option("--coords", gc_coords, "coordinates sampled per seed (default 200, 0 = all)");

  CommonOpts bench_o;
  int bench_lines = 1000, bench_dets = 64;
  auto* bench = app.add_subcommand("bench", "time pairwise overlap and scoring");
  add_common(bench, bench_o, /*out_required=*/false);
  bench->add_option("--lines", bench_lines, "candidate line count (default 1000)")
      ->check(CLI::PositiveNumber);
  bench->add_option("--dets", bench_dets, "detection count for scoring (default 64)")
      ->check(CLI::PositiveNumber);

  CLI11_PARSE(app, argc, argv);
  try {
    if (gen->parsed()) return cmd_gen_data(gen_o, gen_split, gen_count);
    if (train->parsed()) return cmd_train(train_o, train_data);
    if (det->parsed()) return cmd_detect(det_o, det_model, det_data, det_mode);
    if (sel->parsed()) return cmd_select(sel_o, sel_dets, sel_pairs, sel_mode);
    if (ev->parsed()) return cmd_eval(eval_o, eval_dets, eval_anns);
    if (gc->parsed()) return cmd_gradcheck(gc_o, gc_seeds, gc_coords);
    if (bench->parsed()) return cmd_bench(bench_o, bench_lines, bench_dets);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(e.category());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
