#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "semline/geometry.hpp"
#include "semline/grid.hpp"
#include "semline/nn.hpp"

namespace semline {

/// Attention variants selectable by config (ablation hooks):
///  mirror — full block: Gaussian weighting, flip, mask from [Y, flipped Y];
///  noflip — mask computed from Y alone (flip branch removed);
///  none   — attention block skipped entirely; pooling reads raw stage features.
enum class AttentionMode { mirror, noflip, none };

std::string to_string(AttentionMode mode);
AttentionMode attention_mode_from_string(const std::string& s);

/// Line-conditioned attention block parameters. f0 collapses the (possibly
/// concatenated) feature stack to one channel with an n×n filter; f1 and f2
/// refine it with single-channel (2n+1)×(2n+1) filters before the sigmoid.
struct AttentionParams {
  ConvParams f0;
  ConvParams f1;
  ConvParams f2;
};

/// Network topology; serialized into checkpoints so they are self-describing.
struct Topology {
  int in_channels = 3;
  std::array<int, 4> stage_channels{8, 16, 32, 32};
  int attention_n = 3;        // f0 kernel size; f1/f2 use 2n+1
  double sigma = 4.0;         // Gaussian width, in grid cells of each stage
  double pool_threshold = 3.0;  // strip half-width, in grid cells of each stage
  int fc_width = 128;
  AttentionMode attention = AttentionMode::mirror;
};

bool operator==(const Topology& a, const Topology& b);

/// Full detector: four-stage convolutional trunk (2x downsampling after the
/// first two stages), attention blocks on stages 3 and 4, and the shared
/// fully connected layer feeding the classification and regression heads.
struct DetectorParams {
  Topology topo;
  std::array<ConvParams, 4> backbone;
  AttentionParams att3, att4;  // unused (empty) when topo.attention == none
  DenseParams fc1;
  DenseParams cls;  // 2 logits
  DenseParams reg;  // 4 offsets

  bool has_attention() const { return topo.attention != AttentionMode::none; }
};

/// Random trunk (uniform +-sqrt(1/fan_in)), zero heads, zero biases.
/// Zero heads make an untrained detector output p = 0.5 for every line.
DetectorParams make_detector(const Topology& topo, std::uint64_t seed);

/// Same shapes as `like`, all values zero (gradient accumulator).
DetectorParams zeros_like(const DetectorParams& like);

/// All parameter tensors in a fixed documented order (backbone 1-4, att3
/// f0/f1/f2, att4 f0/f1/f2, fc1, cls, reg; weights before bias).
std::vector<std::span<double>> param_spans(DetectorParams& p);
std::vector<std::span<const double>> param_views(const DetectorParams& p);

/// dst += alpha * grad over every tensor.
void axpy_params(DetectorParams& dst, const DetectorParams& grad, double alpha);

std::size_t param_count(const DetectorParams& p);

/// Endpoint offsets produced by the regression head, in image pixels,
/// relative to the canonical endpoint order.
struct LineOffset {
  double dx_s = 0.0;
  double dy_s = 0.0;
  double dx_e = 0.0;
  double dy_e = 0.0;
};

/// Shared per-image trunk activations, reused by every candidate line.
struct BackboneTrace {
  FeatureGrid input;
  std::array<FeatureGrid, 4> act;     // tanh output of each stage
  std::array<FeatureGrid, 2> pooled;  // after the two 2x pools
  const FeatureGrid& stage3() const { return act[2]; }
  const FeatureGrid& stage4() const { return act[3]; }
};

BackboneTrace backbone_forward(const DetectorParams& params, const FeatureGrid& image);

/// Accumulates trunk gradients given upstream gradients at the two attended
/// stages. d_input is optional (used by gradient checks).
void backbone_backward(const DetectorParams& params, const BackboneTrace& trace,
                       const FeatureGrid& d_stage3, const FeatureGrid& d_stage4,
                       DetectorParams& grads, FeatureGrid* d_input);

/// Line-dependent, image-independent geometry at one attended stage:
/// the rescaled line, Gaussian weights, flip plan, and pooling strips.
/// Built once per candidate and reused across images and epochs.
struct LineStageGeom {
  Line grid_line;
  ImageSize grid{0, 0};
  std::vector<double> gauss;
  FlipPlan plan;            // populated only in mirror mode
  std::vector<int> pool_u;  // pixel indices with side-ordered distance in (0, thr]
  std::vector<int> pool_v;
};

/// Throws DegenerateLineError if the line cannot be rescaled onto the grid.
LineStageGeom make_line_stage_geom(const Line& image_line, const ImageSize& image,
                                   const ImageSize& grid, double sigma,
                                   double pool_threshold, bool need_flip);

inline bool pools_nonempty(const LineStageGeom& g) {
  return !g.pool_u.empty() && !g.pool_v.empty();
}

/// Intermediate values of one attention block application.
struct AttentionTrace {
  FeatureGrid y;       // Gaussian-weighted input
  FeatureGrid cat;     // f0 input ([Y, flipped Y] in mirror mode, Y otherwise)
  FeatureGrid a0;      // f0 output
  FeatureGrid h1;      // f1 output
  FeatureGrid mask;    // sigmoid(f2(h1)), single channel
  FeatureGrid yatt;    // (1 + mask) * Y
};

/// Applies the attention block (Gaussian weighting, optional flip branch,
/// residual mask). In mode none, returns x unchanged.
FeatureGrid mirror_attention(const FeatureGrid& x, const Line& grid_line,
                             const AttentionParams& params, double sigma,
                             AttentionMode mode);

/// Cached-geometry variant used by the pipeline; fills `trace` for backward.
FeatureGrid mirror_attention_cached(const FeatureGrid& x, const LineStageGeom& geom,
                                    const AttentionParams& params, AttentionMode mode,
                                    AttentionTrace* trace);

/// Accumulates dx and attention-parameter gradients from d(yatt).
void mirror_attention_backward(const FeatureGrid& x, const LineStageGeom& geom,
                               const AttentionParams& params, AttentionMode mode,
                               const AttentionTrace& trace, const FeatureGrid& dyatt,
                               FeatureGrid& dx, AttentionParams& grads);

/// Mean-pools the two strips flanking the line (signed distance in
/// (0, threshold] on each side, side order following the deterministic
/// region ordering) and concatenates the two per-channel mean vectors.
/// Throws DegenerateRegionError if either strip is empty.
std::vector<double> region_pool(const FeatureGrid& y_att, const Line& grid_line,
                                double threshold);

/// Cached-geometry variant.
std::vector<double> region_pool_cached(const FeatureGrid& y_att, const LineStageGeom& geom);

void region_pool_backward(const LineStageGeom& geom, int channels,
                          std::span<const double> dout, FeatureGrid& dyatt);

/// Everything remembered from one candidate's forward pass.
struct LineTrace {
  Line canon;  // canonical endpoint order, image coordinates
  AttentionTrace at3, at4;
  std::vector<double> z;  // concatenated pooled features
  std::vector<double> h;  // tanh(fc1 z) — the line feature
  std::array<double, 2> logits{};
  ProbPair prob;
  LineOffset offset;
};

/// Forward pass of one candidate against cached trunk features and geometry.
LineTrace line_forward_cached(const DetectorParams& params, const BackboneTrace& trunk,
                              const Line& canon_line, const LineStageGeom& g3,
                              const LineStageGeom& g4);

/// Accumulates gradients for one candidate: head/attention parameter grads
/// plus the upstream gradients at the two attended stages (d_stage3/4).
void line_backward_cached(const DetectorParams& params, const BackboneTrace& trunk,
                          const LineStageGeom& g3, const LineStageGeom& g4,
                          const LineTrace& trace, const ProbPair& dprob,
                          const LineOffset& doffset, FeatureGrid& d_stage3,
                          FeatureGrid& d_stage4, DetectorParams& grads);

/// Classification probability and endpoint offsets for one line.
/// Convenience wrapper that runs the trunk and one candidate end to end.
std::pair<ProbPair, LineOffset> detector_forward(const DetectorParams& params,
                                                 const FeatureGrid& image,
                                                 const Line& line);

/// The shared feature vector of a line (output of the fully connected trunk
/// layer, heads excluded); input to the pairwise comparison heads.
std::vector<double> line_feature(const DetectorParams& params, const FeatureGrid& image,
                                 const Line& line);

/// Classification cross-entropy plus lambda-weighted smooth-L1 regression;
/// the regression term applies only when the label is positive.
double detector_loss(const ProbPair& prob, const LineOffset& offset,
                     const ProbPair& label, const LineOffset& target, double lambda);

/// Gradients of detector_loss w.r.t. prob (as dp, dq) and offset.
void detector_loss_backward(const ProbPair& prob, const LineOffset& offset,
                            const ProbPair& label, const LineOffset& target,
                            double lambda, ProbPair& dprob, LineOffset& doffset);

/// Moves the endpoints by the offset (in canonical order), re-projects each
/// onto the image boundary, and validates the result.
Line regress_line(const Line& line, const LineOffset& offset, const ImageSize& size);

/// Two-layer comparison head over a concatenated feature pair.
struct SiameseHeadParams {
  DenseParams fc_in;   // 2F -> hidden, tanh
  DenseParams fc_out;  // hidden -> 2 logits
};

/// Random first layer, zero output layer (untrained head answers (0.5, 0.5)).
SiameseHeadParams make_siamese(int feature_dim, int hidden, std::uint64_t seed);

SiameseHeadParams siamese_zeros_like(const SiameseHeadParams& like);
std::vector<std::span<double>> siamese_spans(SiameseHeadParams& p);
std::vector<std::span<const double>> siamese_views(const SiameseHeadParams& p);
void siamese_axpy(SiameseHeadParams& dst, const SiameseHeadParams& grad, double alpha);

struct SiameseTrace {
  std::vector<double> input;   // [f_i; f_j]
  std::vector<double> hidden;  // tanh output
  std::array<double, 2> logits{};
  ProbPair prob;
};

/// p = softmax over two logits from the head applied to [f_i; f_j].
ProbPair siamese_forward(const SiameseHeadParams& params, std::span<const double> f_i,
                         std::span<const double> f_j, SiameseTrace* trace);

void siamese_backward(const SiameseHeadParams& params, const SiameseTrace& trace,
                      const ProbPair& dprob, SiameseHeadParams& grads);

}  // namespace semline
