#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "semline/grid.hpp"
#include "semline/rng.hpp"

namespace semline {

/// 2-D convolution filter bank. Weight layout:
/// w[((co * cin + ci) * kh + ky) * kw + kx], bias b[co].
struct ConvParams {
  int kh = 0;
  int kw = 0;
  int cin = 0;
  int cout = 0;
  std::vector<double> w;
  std::vector<double> b;
};

/// Zero-filled bank; kernel dims must be odd so same-padding is centered.
ConvParams make_conv(int kh, int kw, int cin, int cout);

/// Affine layer: w[o * in + i], bias b[o].
struct DenseParams {
  int in = 0;
  int out = 0;
  std::vector<double> w;
  std::vector<double> b;
};

DenseParams make_dense(int in, int out);

/// Fills values uniformly in [-sqrt(1/fan_in), +sqrt(1/fan_in)).
void init_uniform(std::span<double> values, int fan_in, Rng& rng);

/// Two-way probability vector (p, q) with p + q = 1.
struct ProbPair {
  double p = 0.5;
  double q = 0.5;
};

/// One-hot target: (1,0) for a positive (semantic) label, (0,1) otherwise.
inline ProbPair one_hot(bool positive) {
  return positive ? ProbPair{1.0, 0.0} : ProbPair{0.0, 1.0};
}

/// Same-size output, zero padding, stride 1, cross-correlation convention.
FeatureGrid conv2d(const ConvParams& params, const FeatureGrid& x);

/// Accumulates input and/or parameter gradients; pass nullptr to skip either.
void conv2d_backward(const ConvParams& params, const FeatureGrid& x,
                     const FeatureGrid& dout, FeatureGrid* dx, ConvParams* dparams);

std::vector<double> dense(const DenseParams& params, std::span<const double> x);

void dense_backward(const DenseParams& params, std::span<const double> x,
                    std::span<const double> dout, std::vector<double>* dx,
                    DenseParams* dparams);

double sigmoid(double x);

/// Elementwise tanh over a grid; backward consumes the activated output.
FeatureGrid tanh_grid(const FeatureGrid& x);
void tanh_grid_backward(const FeatureGrid& y, const FeatureGrid& dout, FeatureGrid& dx);

std::vector<double> tanh_vec(std::span<const double> x);
void tanh_vec_backward(std::span<const double> y, std::span<const double> dout,
                       std::span<double> dx);

/// 2x2 average pooling with stride 2; odd trailing rows/columns average over
/// the cells that exist.
FeatureGrid avg_pool2(const FeatureGrid& x);
void avg_pool2_backward(int in_h, int in_w, const FeatureGrid& dout, FeatureGrid& dx);

/// Numerically stabilized two-way softmax.
ProbPair softmax2(double l0, double l1);

/// Given gradients w.r.t. (p, q), returns gradients w.r.t. the two logits.
void softmax2_backward(const ProbPair& y, double dp, double dq, double& dl0, double& dl1);

inline constexpr double kLogEps = 1e-12;

/// -sum(label * log(pred + eps)) with eps = 1e-12.
double cross_entropy(const ProbPair& pred, const ProbPair& label);

/// Gradients of cross_entropy w.r.t. pred.p and pred.q.
void cross_entropy_backward(const ProbPair& pred, const ProbPair& label,
                            double& dp, double& dq);

/// sum_i eta(delta_i - target_i), eta(x) = 0.5 x^2 for |x| < 1, |x| - 0.5 otherwise.
double smooth_l1(std::span<const double> delta, std::span<const double> target);

void smooth_l1_backward(std::span<const double> delta, std::span<const double> target,
                        double dout, std::span<double> ddelta);

/// Finite-difference verification of an analytic gradient. `value` evaluates
/// the scalar objective at the current contents of `params` (a list of live
/// views into the parameter storage); `analytic` is the claimed gradient,
/// concatenated in block order. Central differences with the given eps
/// (must lie in [1e-6, 1e-3]). When max_coords > 0, a seeded subsample of
/// coordinates is checked instead of all of them.
/// Returns the max over checked coordinates of
/// |g_a - g_n| / max(1e-6, |g_a| + |g_n|); the absolute floor keeps noise on
/// negligible coordinates from registering as relative error. Throws on
/// non-finite values.
struct GradCheckReport {
  double max_rel_err = 0.0;
  std::size_t coords_checked = 0;
};

GradCheckReport grad_check(const std::function<double()>& value,
                           std::vector<std::span<double>> params,
                           std::span<const double> analytic, double eps,
                           std::size_t max_coords = 0, std::uint64_t seed = 0);

/// Concatenates parameter blocks into one flat vector (for checksums and
/// gradient comparisons).
std::vector<double> flatten(const std::vector<std::span<const double>>& blocks);

}  // namespace semline
