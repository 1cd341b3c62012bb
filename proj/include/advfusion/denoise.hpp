#pragma once

#include <random>

#include "advfusion/autodiff.hpp"

namespace advf {

// Embedded-Gaussian non-local means block: all-pairs spatial attention with a
// zero-initialized 1x1 output projection and a residual connection, so the
// block is an exact identity at initialization.
struct NonLocalParams {
  Value w_theta, b_theta;  // C -> Ce
  Value w_phi, b_phi;      // C -> Ce
  Value w_g, b_g;          // C -> Ce
  Value w_out, b_out;      // Ce -> C, zero-initialized
};

inline NonLocalParams make_nonlocal_params(int64_t channels, int64_t embed, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(channels)));
  auto init = [&](std::vector<int64_t> shape, bool zero) {
    Tensor t(std::move(shape));
    if (!zero)
      for (auto& v : t.data) v = dist(rng);
    return make_leaf(std::move(t));
  };
  NonLocalParams p;
  p.w_theta = init({embed, channels, 1, 1}, false);
  p.b_theta = init({embed}, true);
  p.w_phi = init({embed, channels, 1, 1}, false);
  p.b_phi = init({embed}, true);
  p.w_g = init({embed, channels, 1, 1}, false);
  p.b_g = init({embed}, true);
  p.w_out = init({channels, embed, 1, 1}, true);
  p.b_out = init({channels}, true);
  return p;
}

inline Value nonlocal_block(const Value& x, const NonLocalParams& p) {
  if (x->t.ndim() != 3)
    throw std::invalid_argument("nonlocal_block: expected CxHxW input, got " + x->t.shape_str());
  const int64_t h = x->t.shape[1], w = x->t.shape[2];
  const int64_t ce = p.w_theta->t.shape[0];
  const int64_t n = h * w;
  Value theta = reshape(conv2d(x, p.w_theta, p.b_theta, 1, 0), {ce, n});
  Value phi = reshape(conv2d(x, p.w_phi, p.b_phi, 1, 0), {ce, n});
  Value g = reshape(conv2d(x, p.w_g, p.b_g, 1, 0), {ce, n});
  Value logits = matmul(transpose2d(theta), phi);      // N x N
  Value attn = softmax(logits);                        // rows sum to 1
  Value y = transpose2d(matmul(attn, transpose2d(g))); // Ce x N
  Value proj = conv2d(reshape(y, {ce, h, w}), p.w_out, p.b_out, 1, 0);
  return add(x, proj);
}

}  // namespace advf
