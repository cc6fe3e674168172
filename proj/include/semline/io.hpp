#pragma once

#include <map>
#include <string>
#include <vector>

#include "semline/evalm.hpp"
#include "semline/geometry.hpp"
#include "semline/grid.hpp"
#include "semline/model.hpp"
#include "semline/select.hpp"
#include "semline/synthetic.hpp"

namespace semline {

/// Ground-truth lines of one image. Text form is one image per file line:
///   id W H k  x_s y_s x_e y_e p  [... k tuples]
/// with p in {0,1} flagging the primary line (exactly one per image).
struct AnnotationRecord {
  std::string id;
  ImageSize size;
  std::vector<GtLine> lines;
};

/// Detections of one image. Text form mirrors AnnotationRecord with a score
/// column before the primary flag:
///   id W H k  x_s y_s x_e y_e score p  [... k tuples]
/// k may be zero; nonempty sets carry exactly one primary.
struct DetectionRecord {
  std::string id;
  ImageSize size;
  std::vector<Detection> detections;
};

void save_annotations(const std::string& path, const std::vector<AnnotationRecord>& records);

/// Loads annotations; endpoints within 0.5 px of the boundary are re-projected
/// onto it, farther ones raise a validation error naming the file line.
std::vector<AnnotationRecord> load_annotations(const std::string& path);

void save_detections(const std::string& path, const std::vector<DetectionRecord>& records);
std::vector<DetectionRecord> load_detections(const std::string& path);

/// Writes a 1- or 3-channel grid as a PFM image (float32, little-endian,
/// rows bottom-up, scale -1.0).
void write_pfm(const std::string& path, const FeatureGrid& image);
FeatureGrid read_pfm(const std::string& path);

/// Both pairwise head outputs for one image's detections, for re-running
/// selection offline. Text form: a line `id n`, then n ranking rows and n
/// matching rows of n values each.
struct PairwiseRecord {
  std::string id;
  PairwiseMatrix pr;
  PairwiseMatrix pm;
};

void save_pairwise(const std::string& path, const std::vector<PairwiseRecord>& records);
std::vector<PairwiseRecord> load_pairwise(const std::string& path);

/// Human-readable audit log of the selection loop, one block per image.
void save_selection_traces(const std::string& path, const std::vector<std::string>& ids,
                           const std::vector<SelectionResult>& traces);

/// Trained model bundle: detector plus the two comparison heads.
struct Checkpoint {
  DetectorParams detector;
  SiameseHeadParams rank;
  SiameseHeadParams match;
};

/// Binary checkpoint: magic "SLNC", version, a JSON topology header, then
/// named float64 tensors (little-endian).
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

/// Parses a `key=value` file ('#' starts a comment, blank lines ignored).
/// Duplicate keys raise a config error; key validity is the caller's job.
std::map<std::string, std::string> load_config_map(const std::string& path);

}  // namespace semline
