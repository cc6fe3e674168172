#include <doctest.h>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "semline/error.hpp"
#include "semline/io.hpp"
#include "semline/model.hpp"
#include "semline/rng.hpp"

using namespace semline;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir() {
  static const fs::path dir = [] {
    fs::path p = fs::temp_directory_path() / "semline_io_tests";
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return dir;
}

std::string file_in_scratch(const std::string& name) {
  return (scratch_dir() / name).string();
}

void write_raw(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
}

}  // namespace

TEST_CASE("annotations round-trip exactly through text") {
  std::vector<AnnotationRecord> records;
  records.push_back({"img_0000",
                     {100, 100},
                     {{{0.0, 31.25, 100.0, 68.22221119}, true},
                      {{12.5, 0.0, 87.5, 100.0}, false}}});
  records.push_back({"img_0001", {64, 48}, {{{0.0, 10.0, 64.0, 20.0}, true}}});
  const std::string path = file_in_scratch("ann.txt");
  save_annotations(path, records);
  const auto loaded = load_annotations(path);
  REQUIRE(loaded.size() == records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    CHECK(loaded[i].id == records[i].id);
    CHECK(loaded[i].size == records[i].size);
    REQUIRE(loaded[i].lines.size() == records[i].lines.size());
    for (std::size_t j = 0; j < records[i].lines.size(); ++j) {
      CHECK(loaded[i].lines[j].line == records[i].lines[j].line);  // %.17g is lossless
      CHECK(loaded[i].lines[j].primary == records[i].lines[j].primary);
    }
  }
}

TEST_CASE("annotation endpoints near the boundary are re-projected, far ones rejected") {
  const std::string path = file_in_scratch("ann_offset.txt");
  // Start point (0.3, 30): 0.3 px inside the left edge -> snapped to x=0.
  write_raw(path, "img_0000 100 100 1 0.3 30 100 70 1\n");
  const auto ok = load_annotations(path);
  REQUIRE(ok.size() == 1);
  CHECK(ok[0].lines[0].line.x_s == doctest::Approx(0.0));
  CHECK(ok[0].lines[0].line.y_s == doctest::Approx(30.0));

  // 0.7 px off: too far, and the error names the offending file line.
  write_raw(path, "img_0000 100 100 1 0 30 100 70 1\nimg_0001 100 100 1 0.7 30 100 70 1\n");
  try {
    load_annotations(path);
    FAIL("expected a validation error");
  } catch (const ValidationError& e) {
    const std::string what = e.what();
    CHECK(what.find(":2") != std::string::npos);
    CHECK(what.find("boundary") != std::string::npos);
  }
}

TEST_CASE("annotation records demand exactly one primary line") {
  const std::string path = file_in_scratch("ann_primary.txt");
  write_raw(path, "img_0000 100 100 2 0 30 100 70 1 0 60 100 40 1\n");
  CHECK_THROWS_AS(load_annotations(path), ValidationError);
  write_raw(path, "img_0000 100 100 2 0 30 100 70 0 0 60 100 40 0\n");
  CHECK_THROWS_AS(load_annotations(path), ValidationError);
  // Parse garbage is an io error, not a validation error.
  write_raw(path, "img_0000 100 100 one 0 30 100 70 1\n");
  CHECK_THROWS_AS(load_annotations(path), IoError);
  CHECK_THROWS_AS(load_annotations(file_in_scratch("missing.txt")), IoError);
}

TEST_CASE("detections round-trip including empty records") {
  std::vector<DetectionRecord> records;
  records.push_back({"img_0000",
                     {100, 100},
                     {{{0.0, 31.5, 100.0, 68.5}, 0.9251, true},
                      {{25.0, 0.0, 75.0, 100.0}, 0.5001, false}}});
  records.push_back({"img_0001", {100, 100}, {}});  // no detections
  const std::string path = file_in_scratch("det.txt");
  save_detections(path, records);
  const auto loaded = load_detections(path);
  REQUIRE(loaded.size() == 2);
  CHECK(loaded[0].detections.size() == 2);
  CHECK(loaded[0].detections[0].line == records[0].detections[0].line);
  CHECK(loaded[0].detections[0].score == records[0].detections[0].score);
  CHECK(loaded[0].detections[0].primary);
  CHECK(!loaded[0].detections[1].primary);
  CHECK(loaded[1].detections.empty());

  // A nonempty record without a primary flag is invalid.
  write_raw(path, "img_0000 100 100 1 0 30 100 70 0.5 0\n");
  CHECK_THROWS_AS(load_detections(path), ValidationError);
  // Scores outside [0,1] are invalid.
  write_raw(path, "img_0000 100 100 1 0 30 100 70 1.5 1\n");
  CHECK_THROWS_AS(load_detections(path), ValidationError);
}

TEST_CASE("pfm images round-trip at float32 precision") {
  Rng rng(808);
  FeatureGrid img = FeatureGrid::zeros(5, 7, 3);
  for (double& v : img.v) v = rng.uniform();
  const std::string path = file_in_scratch("img.pfm");
  write_pfm(path, img);
  const FeatureGrid back = read_pfm(path);
  REQUIRE(back.h == 5);
  REQUIRE(back.w == 7);
  REQUIRE(back.c == 3);
  for (std::size_t i = 0; i < img.v.size(); ++i) {
    CHECK(back.v[i] == static_cast<double>(static_cast<float>(img.v[i])));
  }

  FeatureGrid gray = FeatureGrid::zeros(3, 4, 1);
  for (double& v : gray.v) v = rng.uniform(-2.0, 2.0);
  write_pfm(path, gray);
  const FeatureGrid gback = read_pfm(path);
  REQUIRE(gback.c == 1);
  CHECK(gback.v[5] == static_cast<double>(static_cast<float>(gray.v[5])));

  // Unsupported channel counts and malformed headers are rejected.
  CHECK_THROWS_AS(write_pfm(path, FeatureGrid::zeros(3, 3, 2)), ValidationError);
  write_raw(path, "P6\n3 3\n-1.0\n");
  CHECK_THROWS_AS(read_pfm(path), IoError);
  write_raw(path, "PF\n2 2\n1.0\n");  // positive scale: big-endian, unsupported
  CHECK_THROWS_AS(read_pfm(path), IoError);
}

TEST_CASE("pairwise score files round-trip") {
  Rng rng(909);
  std::vector<PairwiseRecord> records(2);
  records[0].id = "img_0000";
  records[0].pr = PairwiseMatrix::make(3);
  records[0].pm = PairwiseMatrix::make(3);
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      records[0].pr.at(i, j) = rng.uniform();
      records[0].pm.at(i, j) = rng.uniform();
    }
  }
  records[1].id = "img_0001";
  records[1].pr = PairwiseMatrix::make(0);
  records[1].pm = PairwiseMatrix::make(0);

  const std::string path = file_in_scratch("pairwise.txt");
  save_pairwise(path, records);
  const auto loaded = load_pairwise(path);
  REQUIRE(loaded.size() == 2);
  CHECK(loaded[0].id == "img_0000");
  REQUIRE(loaded[0].pr.n == 3);
  CHECK(loaded[0].pr.v == records[0].pr.v);
  CHECK(loaded[0].pm.v == records[0].pm.v);
  CHECK(loaded[1].pr.n == 0);

  // Mismatched matrix sizes cannot be saved.
  PairwiseRecord bad;
  bad.id = "img_0002";
  bad.pr = PairwiseMatrix::make(2);
  bad.pm = PairwiseMatrix::make(3);
  CHECK_THROWS_AS(save_pairwise(path, {bad}), DimensionError);
}

TEST_CASE("checkpoints restore every tensor bit for bit") {
  Rng rng(1111);
  Topology topo;
  Checkpoint ckpt;
  ckpt.detector = make_detector(topo, 3);
  for (auto& span : param_spans(ckpt.detector)) {
    for (double& v : span) v = rng.uniform(-1.0, 1.0);
  }
  ckpt.rank = make_siamese(topo.fc_width, 32, 5);
  ckpt.match = make_siamese(topo.fc_width, 32, 6);
  init_uniform(ckpt.rank.fc_out.w, ckpt.rank.fc_out.in, rng);
  init_uniform(ckpt.match.fc_out.w, ckpt.match.fc_out.in, rng);

  const std::string path = file_in_scratch("model.bin");
  save_checkpoint(path, ckpt);
  const Checkpoint back = load_checkpoint(path);

  const auto a = param_views(ckpt.detector);
  const auto b = param_views(back.detector);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    REQUIRE(a[i].size() == b[i].size());
    for (std::size_t j = 0; j < a[i].size(); ++j) CHECK(a[i][j] == b[i][j]);
  }
  CHECK(back.rank.fc_out.w == ckpt.rank.fc_out.w);
  CHECK(back.match.fc_out.w == ckpt.match.fc_out.w);
  CHECK(back.detector.topo.attention == ckpt.detector.topo.attention);

  // A corrupted magic tag is rejected.
  write_raw(path, "XXXX garbage");
  CHECK_THROWS_AS(load_checkpoint(path), IoError);
}

TEST_CASE("selection traces list every image block") {
  SelectionResult r;
  r.selected = {1, 0};
  r.steps.resize(2);
  r.steps[0].selected = 1;
  r.steps[0].removed = {2};
  r.steps[1].selected = 0;
  const std::string path = file_in_scratch("trace.txt");
  save_selection_traces(path, {"img_0000", "img_0001"}, {r, SelectionResult{}});
  std::ifstream in(path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  CHECK(text.find("img_0000") != std::string::npos);
  CHECK(text.find("img_0001") != std::string::npos);
}

TEST_CASE("config maps parse comments and reject duplicates") {
  const std::string path = file_in_scratch("config.txt");
  write_raw(path, "# a comment\n\nepochs=12\nlearning_rate = 0.1\n  # indented comment\n");
  const auto kv = load_config_map(path);
  REQUIRE(kv.size() == 2);
  CHECK(kv.at("epochs") == "12");
  CHECK(kv.at("learning_rate") == "0.1");

  write_raw(path, "epochs=12\nepochs=13\n");
  CHECK_THROWS_AS(load_config_map(path), ConfigError);
  write_raw(path, "no_equals_here\n");
  CHECK_THROWS_AS(load_config_map(path), ConfigError);
  CHECK_THROWS_AS(load_config_map(file_in_scratch("nope.cfg")), IoError);
}
