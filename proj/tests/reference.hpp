#pragma once

// Straight-line forward pass written from the layer equations with plain
// loops. It shares nothing with the tape or the tangent engine, so the tests
// use it as an independent oracle for both.

#include <algorithm>
#include <cmath>
#include <vector>

#include "npath/dataset.hpp"
#include "npath/vit.hpp"

namespace ref {

using Mat = std::vector<std::vector<double>>;

inline Mat linear(const Mat& x, const npath::Tensor& w, const npath::Tensor& b) {
  const std::size_t in = w.rows(), out = w.cols();
  Mat y(x.size(), std::vector<double>(out));
  for (std::size_t r = 0; r < x.size(); ++r)
    for (std::size_t j = 0; j < out; ++j) {
      double s = 0.0;
      for (std::size_t i = 0; i < in; ++i) s += x[r][i] * w.at(i, j);
      y[r][j] = s + b[j];
    }
  return y;
}

inline Mat layer_norm(const Mat& x, const npath::Tensor& g, const npath::Tensor& b, double eps) {
  Mat y = x;
  for (auto& row : y) {
    double mean = 0.0, var = 0.0;
    for (double v : row) mean += v;
    mean /= static_cast<double>(row.size());
    for (double v : row) var += (v - mean) * (v - mean);
    var /= static_cast<double>(row.size());
    for (std::size_t j = 0; j < row.size(); ++j) row[j] = (row[j] - mean) / std::sqrt(var + eps) * g[j] + b[j];
  }
  return y;
}

struct Result {
  std::vector<double> logits, probs;
  std::vector<Mat> hidden;  // post-GELU FFN intermediates, T x n per layer
};

// `clamp(layer, hidden)` may edit the intermediate before it is used.
template <class Clamp>
Result run(const npath::VitModel& m, const npath::Tensor& image, Clamp clamp) {
  const auto& c = m.config;
  const npath::Tensor patches = npath::extract_patches(image, c);
  Mat p(patches.rows(), std::vector<double>(patches.cols()));
  for (std::size_t r = 0; r < patches.rows(); ++r)
    for (std::size_t j = 0; j < patches.cols(); ++j) p[r][j] = patches.at(r, j);
  Mat emb = linear(p, m.patch_weight, m.patch_bias);
  Mat x;
  x.push_back(std::vector<double>(m.cls_token.values()));
  for (auto& row : emb) x.push_back(row);
  for (std::size_t t = 0; t < x.size(); ++t)
    for (std::size_t j = 0; j < c.hidden; ++j) x[t][j] += m.pos_embed.at(t, j);

  Result out;
  const std::size_t T = x.size(), d = c.hidden, dh = c.head_dim();
  for (std::size_t l = 0; l < c.layers; ++l) {
    const auto& L = m.layers[l];
    const Mat qkv = linear(layer_norm(x, L.ln1_gamma, L.ln1_beta, m.layer_norm_eps), L.qkv_weight, L.qkv_bias);
    Mat cat(T, std::vector<double>(d, 0.0));
    for (std::size_t h = 0; h < c.heads; ++h) {
      for (std::size_t i = 0; i < T; ++i) {
        std::vector<double> s(T);
        double mx = -1e300;
        for (std::size_t j = 0; j < T; ++j) {
          double dot = 0.0;
          for (std::size_t k = 0; k < dh; ++k) dot += qkv[i][h * dh + k] * qkv[j][d + h * dh + k];
          s[j] = dot / std::sqrt(static_cast<double>(dh));
          mx = std::max(mx, s[j]);
        }
        double z = 0.0;
        for (auto& v : s) z += (v = std::exp(v - mx));
        for (std::size_t j = 0; j < T; ++j)
          for (std::size_t k = 0; k < dh; ++k) cat[i][h * dh + k] += s[j] / z * qkv[j][2 * d + h * dh + k];
      }
    }
    const Mat attn = linear(cat, L.proj_weight, L.proj_bias);
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t j = 0; j < d; ++j) x[t][j] += attn[t][j];
    Mat hid = linear(layer_norm(x, L.ln2_gamma, L.ln2_beta, m.layer_norm_eps), L.fc1_weight, L.fc1_bias);
    for (auto& row : hid)
      for (auto& v : row) v = 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0)));
    clamp(l + 1, hid);
    out.hidden.push_back(hid);
    const Mat f = linear(hid, L.fc2_weight, L.fc2_bias);
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t j = 0; j < d; ++j) x[t][j] += f[t][j];
  }
  const Mat cls = layer_norm(Mat{x[0]}, m.norm_gamma, m.norm_beta, m.layer_norm_eps);
  out.logits = linear(cls, m.head_weight, m.head_bias)[0];
  double mx = -1e300, z = 0.0;
  for (double v : out.logits) mx = std::max(mx, v);
  for (double v : out.logits) z += std::exp(v - mx);
  for (double v : out.logits) out.probs.push_back(std::exp(v - mx) / z);
  return out;
}

inline Result run(const npath::VitModel& m, const npath::Tensor& image) {
  return run(m, image, [](std::size_t, Mat&) {});
}

// F(alpha): the listed neurons clamped to alpha times their clean value.
inline double clamped_output(const npath::VitModel& m, const npath::Sample& s,
                             const std::vector<npath::NeuronId>& path, double alpha, npath::TokenScope scope,
                             npath::OutputMode mode = npath::OutputMode::probability) {
  const Result clean = run(m, s.x);
  const auto rows = npath::scope_rows(scope, m.config.seq_len());
  const Result r = run(m, s.x, [&](std::size_t layer, Mat& h) {
    for (const auto& id : path) {
      if (id.layer != layer) continue;
      for (std::size_t t : rows) h[t][id.channel] = alpha * clean.hidden[layer - 1][t][id.channel];
    }
  });
  return mode == npath::OutputMode::logit ? r.logits[s.y] : r.probs[s.y];
}

}  // namespace ref
