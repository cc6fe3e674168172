#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

using namespace std::string_literals;
namespace fs = std::filesystem;

namespace {

const std::string kCli = SEMLINE_CLI_PATH;

fs::path scratch_dir() {
  static const fs::path dir = [] {
    fs::path p = fs::temp_directory_path() / "semline_cli_tests";
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return dir;
}

int run(const std::string& args) {
  const std::string cmd = kCli + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  REQUIRE(status != -1);
  REQUIRE(WIFEXITED(status));
  return WEXITSTATUS(status);
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
}

/// A deliberately tiny scene/training scale so the full pipeline runs in
/// seconds; everything else stays at the defaults.
fs::path tiny_config() {
  static const fs::path path = [] {
    const fs::path p = scratch_dir() / "tiny.cfg";
    write_text(p,
               "width=32\nheight=32\ntrain_count=16\ntest_count=6\n"
               "epochs=3\nstage2_epochs=2\nstage2_pair_batch=24\n"
               "max_lines=2\n");
    return p;
  }();
  return path;
}

}  // namespace

TEST_CASE("help is available and bad invocations fail") {
  CHECK(run("--help") == 0);
  CHECK(run("gen-data --help") == 0);
  CHECK(run("") != 0);                 // a subcommand is required
  CHECK(run("no-such-command") != 0);
}

TEST_CASE("error categories map onto process exit codes") {
  const fs::path dir = scratch_dir() / "codes";
  fs::create_directories(dir);

  // Unknown config key: configuration error -> 2.
  const fs::path bad_key = dir / "bad_key.cfg";
  write_text(bad_key, "no_such_key=1\n");
  CHECK(run("gen-data --config " + bad_key.string() + " --out " + (dir / "o1").string()) == 2);

  // Invalid config value: 2 as well.
  const fs::path bad_value = dir / "bad_value.cfg";
  write_text(bad_value, "epochs=-4\n");
  CHECK(run("train --config " + bad_value.string() + " --data " + dir.string() +
            " --out " + (dir / "o2").string()) == 2);

  // Missing input file: io error -> 5.
  CHECK(run("eval --detections " + (dir / "absent.txt").string() + " --annotations " +
            (dir / "absent2.txt").string() + " --out " + (dir / "o3").string()) == 5);

  // Detections naming an unknown image: validation error -> 3.
  const fs::path ann = dir / "ann.txt";
  const fs::path det = dir / "det.txt";
  write_text(ann, "img_0000 100 100 1 0 30 100 70 1\n");
  write_text(det, "img_9999 100 100 1 0 30 100 70 0.9 1\n");
  CHECK(run("eval --detections " + det.string() + " --annotations " + ann.string() +
            " --out " + (dir / "o4").string()) == 3);
}

TEST_CASE("the full pipeline is reproducible byte for byte") {
  const fs::path cfg = tiny_config();

  auto pipeline = [&](const fs::path& root) {
    fs::create_directories(root);
    REQUIRE(run("gen-data --config " + cfg.string() + " --out " + (root / "train").string() +
                " --split train") == 0);
    REQUIRE(run("gen-data --config " + cfg.string() + " --out " + (root / "test").string() +
                " --split test") == 0);
    REQUIRE(run("train --config " + cfg.string() + " --data " + (root / "train").string() +
                " --out " + (root / "model").string()) == 0);
    REQUIRE(run("detect --config " + cfg.string() + " --model " +
                (root / "model" / "checkpoint.bin").string() + " --data " +
                (root / "test").string() + " --out " + (root / "det").string() +
                " --mode rm") == 0);
    REQUIRE(run("eval --config " + cfg.string() + " --detections " +
                (root / "det" / "detections.txt").string() + " --annotations " +
                (root / "test" / "annotations.txt").string() + " --out " +
                (root / "eval").string()) == 0);
  };

  const fs::path run1 = scratch_dir() / "run1";
  const fs::path run2 = scratch_dir() / "run2";
  pipeline(run1);
  pipeline(run2);

  for (const std::string rel : {"test/annotations.txt"s, "det/detections.txt"s,
                                "det/raw_detections.txt"s, "det/pairwise.txt"s,
                                "eval/accuracy_curve.csv"s, "eval/pr_curve.csv"s,
                                "eval/summary.txt"s}) {
    CHECK(slurp(run1 / rel) == slurp(run2 / rel));
  }

  // The generated image data itself is reproducible too.
  CHECK(slurp(run1 / "test" / "img_0000.pfm") == slurp(run2 / "test" / "img_0000.pfm"));

  // Outputs carry the expected headers and keys.
  CHECK(slurp(run1 / "eval" / "accuracy_curve.csv").rfind("tau,accuracy\n", 0) == 0);
  CHECK(slurp(run1 / "eval" / "pr_curve.csv").rfind("tau,precision,recall\n", 0) == 0);
  const std::string summary = slurp(run1 / "eval" / "summary.txt");
  for (const std::string key : {"images="s, "auc_accuracy="s, "auc_precision="s,
                                "auc_recall="s, "accuracy_tau085="s}) {
    CHECK(summary.find(key) != std::string::npos);
  }
}

TEST_CASE("selection replays offline from saved detections and pair scores") {
  const fs::path cfg = tiny_config();
  const fs::path root = scratch_dir() / "run1";  // artifacts from the pipeline test
  REQUIRE(fs::exists(root / "det" / "raw_detections.txt"));

  const fs::path replay = scratch_dir() / "replay";
  REQUIRE(run("select --config " + cfg.string() + " --detections " +
              (root / "det" / "raw_detections.txt").string() + " --pairwise " +
              (root / "det" / "pairwise.txt").string() + " --out " + replay.string() +
              " --mode rm") == 0);
  CHECK(slurp(replay / "detections.txt") == slurp(root / "det" / "detections.txt"));

  // The nms baseline needs no pairwise scores.
  const fs::path nms_out = scratch_dir() / "replay_nms";
  REQUIRE(run("select --config " + cfg.string() + " --detections " +
              (root / "det" / "raw_detections.txt").string() + " --out " +
              nms_out.string() + " --mode nms") == 0);
  CHECK(fs::exists(nms_out / "detections.txt"));

  // rm mode without pairwise scores is a usage error.
  CHECK(run("select --config " + cfg.string() + " --detections " +
            (root / "det" / "raw_detections.txt").string() + " --out " +
            (scratch_dir() / "replay_bad").string() + " --mode rm") != 0);
}

TEST_CASE("ablation modes produce the full metric suite") {
  const fs::path cfg = tiny_config();
  const fs::path root = scratch_dir() / "run1";
  for (const std::string mode : {"nms"s, "none"s}) {
    const fs::path det = scratch_dir() / ("det_" + mode);
    REQUIRE(run("detect --config " + cfg.string() + " --model " +
                (root / "model" / "checkpoint.bin").string() + " --data " +
                (root / "test").string() + " --out " + det.string() + " --mode " + mode) == 0);
    const fs::path ev = scratch_dir() / ("eval_" + mode);
    REQUIRE(run("eval --config " + cfg.string() + " --detections " +
                (det / "detections.txt").string() + " --annotations " +
                (root / "test" / "annotations.txt").string() + " --out " + ev.string()) == 0);
    CHECK(slurp(ev / "summary.txt").find("auc_accuracy=") != std::string::npos);
  }
}

TEST_CASE("gradient check and benchmark subcommands run standalone") {
  const fs::path gc = scratch_dir() / "gradcheck";
  REQUIRE(run("gradcheck --seeds 2 --coords 30 --out " + gc.string()) == 0);
  const std::string report = slurp(gc / "gradcheck.txt");
  CHECK(report.find("max_rel_err") != std::string::npos);

  const fs::path bench = scratch_dir() / "bench";
  REQUIRE(run("bench --lines 60 --dets 8 --out " + bench.string()) == 0);
  const std::string out = slurp(bench / "bench.txt");
  CHECK(out.find("pairwise_miou_seconds=") != std::string::npos);
  CHECK(out.find("pairwise_scores_seconds=") != std::string::npos);
}
