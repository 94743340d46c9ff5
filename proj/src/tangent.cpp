#include "npath/tangent.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>

#include "npath/error.hpp"

namespace npath {
namespace {

// out[rows x ncols] = x[rows x k] * w[:, col0 : col0 + ncols] (+ bias)
void linear_cols(const double* x, std::size_t rows, std::size_t k, const Tensor& w, const Tensor* bias,
                 std::size_t col0, std::size_t ncols, double* out) {
  const std::size_t stride = w.cols();
  const double* wd = w.data().data();
  for (std::size_t i = 0; i < rows; ++i) {
    double* o = out + i * ncols;
    if (bias) {
      for (std::size_t j = 0; j < ncols; ++j) o[j] = (*bias)[col0 + j];
    } else {
      std::fill(o, o + ncols, 0.0);
    }
    const double* xi = x + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double a = xi[p];
      const double* wr = wd + p * stride + col0;
      for (std::size_t j = 0; j < ncols; ++j) o[j] += a * wr[j];
    }
  }
}

// Value and tangent rows through the same weights; the tangent gets no bias.
void linear_dual(const double* __restrict x, const double* __restrict xt, std::size_t rows, std::size_t k,
                 const Tensor& w, const Tensor& bias, std::size_t col0, std::size_t ncols, double* __restrict out,
                 double* __restrict out_t) {
  const std::size_t stride = w.cols();
  const double* wd = w.data().data();
  for (std::size_t i = 0; i < rows; ++i) {
    double* __restrict o = out + i * ncols;
    double* __restrict ot = out_t + i * ncols;
    for (std::size_t j = 0; j < ncols; ++j) o[j] = bias[col0 + j];
    std::fill(ot, ot + ncols, 0.0);
    const double* xi = x + i * k;
    const double* ti = xt + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double a = xi[p], b = ti[p];
      const double* __restrict wr = wd + p * stride + col0;
      for (std::size_t j = 0; j < ncols; ++j) {
        o[j] += a * wr[j];
        ot[j] += b * wr[j];
      }
    }
  }
}

// Row-wise layer norm and its directional derivative.
void layer_norm_jvp(const double* x, const double* xt, std::size_t rows, std::size_t width, const Tensor& gamma,
                    const Tensor& beta, double eps, double* y, double* yt) {
  const double inv_w = 1.0 / static_cast<double>(width);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x + r * width;
    const double* tr = xt + r * width;
    double mean = 0.0;
    for (std::size_t j = 0; j < width; ++j) mean += xr[j];
    mean *= inv_w;
    double var = 0.0;
    for (std::size_t j = 0; j < width; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var *= inv_w;
    const double rs = 1.0 / std::sqrt(var + eps);
    double tmean = 0.0, proj = 0.0;
    for (std::size_t j = 0; j < width; ++j) tmean += tr[j];
    tmean *= inv_w;
    for (std::size_t j = 0; j < width; ++j) proj += (xr[j] - mean) * rs * tr[j];
    proj *= inv_w;
    for (std::size_t j = 0; j < width; ++j) {
      const double h = (xr[j] - mean) * rs;
      y[r * width + j] = h * gamma[j] + beta[j];
      yt[r * width + j] = rs * (tr[j] - tmean - h * proj) * gamma[j];
    }
  }
}

// gelu(z) and gelu'(z) sharing one erf.
inline void gelu_pair(double z, double& value, double& slope) {
  const double e = std::erf(z * std::numbers::sqrt2 / 2.0);
  value = 0.5 * z * (1.0 + e);
  slope = 0.5 * (1.0 + e) + z * std::exp(-0.5 * z * z) * std::numbers::inv_sqrtpi / std::numbers::sqrt2;
}

}  // namespace

TangentEngine::TangentEngine(const VitModel& model, TokenScope scope, OutputMode mode)
    : model_(model), scope_(scope), mode_(mode), rows_(scope_rows(scope, model.config.seq_len())) {}

void TangentEngine::embed(const Tensor& image, double input_scale, Dual& s) {
  const VitConfig& c = model_.config;
  Tensor patches = extract_patches(image, c);
  if (input_scale != 1.0) {
    for (auto& v : patches.mutable_data()) v *= input_scale;
  }
  const std::size_t T = c.seq_len(), d = c.hidden;
  s.x.shape(T, d);
  s.t.shape(T, d);
  std::fill(s.t.v.begin(), s.t.v.end(), 0.0);
  linear_cols(patches.data().data(), c.num_patches(), c.patch_dim(), model_.patch_weight, &model_.patch_bias, 0, d,
              s.x.row(1));
  for (std::size_t j = 0; j < d; ++j) s.x.row(0)[j] = model_.cls_token[j];
  for (std::size_t i = 0; i < T * d; ++i) s.x.v[i] += model_.pos_embed[i];
}

void TangentEngine::attention_block(std::size_t layer, Dual& s, bool cls_only) {
  const EncoderLayer& w = model_.layers[layer - 1];
  const VitConfig& c = model_.config;
  const std::size_t T = s.x.rows, d = c.hidden, dh = c.head_dim();
  const std::size_t tq = cls_only ? 1 : T;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  ln_.x.shape(T, d);
  ln_.t.shape(T, d);
  layer_norm_jvp(s.x.v.data(), s.t.v.data(), T, d, w.ln1_gamma, w.ln1_beta, model_.layer_norm_eps, ln_.x.v.data(),
                 ln_.t.v.data());
  // queries for the first tq rows, keys and values for all rows
  pre_.x.shape(tq, d);
  pre_.t.shape(tq, d);
  linear_dual(ln_.x.v.data(), ln_.t.v.data(), tq, d, w.qkv_weight, w.qkv_bias, 0, d, pre_.x.v.data(), pre_.t.v.data());
  qkv_.x.shape(T, 2 * d);
  qkv_.t.shape(T, 2 * d);
  linear_dual(ln_.x.v.data(), ln_.t.v.data(), T, d, w.qkv_weight, w.qkv_bias, d, 2 * d, qkv_.x.v.data(),
              qkv_.t.v.data());

  // keys transposed so the score loops run over contiguous tokens
  keys_.shape(d, T);
  keys_t_.shape(d, T);
  for (std::size_t j = 0; j < T; ++j) {
    for (std::size_t e = 0; e < d; ++e) {
      keys_.row(e)[j] = qkv_.x.row(j)[e];
      keys_t_.row(e)[j] = qkv_.t.row(j)[e];
    }
  }
  heads_.x.shape(tq, d);
  heads_.t.shape(tq, d);
  scores_.shape(tq, T);
  scores_t_.shape(tq, T);
  for (std::size_t h = 0; h < c.heads; ++h) {
    const std::size_t off = h * dh;
    for (std::size_t i = 0; i < tq; ++i) {
      const double* q = pre_.x.row(i) + off;
      const double* qt = pre_.t.row(i) + off;
      double* sr = scores_.row(i);
      double* st = scores_t_.row(i);
      std::fill(sr, sr + T, 0.0);
      std::fill(st, st + T, 0.0);
      for (std::size_t e = 0; e < dh; ++e) {
        const double qe = q[e], qte = qt[e];
        const double* __restrict k = keys_.row(off + e);
        const double* __restrict kt = keys_t_.row(off + e);
        for (std::size_t j = 0; j < T; ++j) {
          sr[j] += qe * k[j];
          st[j] += qte * k[j] + qe * kt[j];
        }
      }
      for (std::size_t j = 0; j < T; ++j) {
        sr[j] *= scale;
        st[j] *= scale;
      }
      double mx = sr[0];
      for (std::size_t j = 1; j < T; ++j) mx = std::max(mx, sr[j]);
      double z = 0.0;
      for (std::size_t j = 0; j < T; ++j) {
        sr[j] = std::exp(sr[j] - mx);
        z += sr[j];
      }
      double dot = 0.0;
      for (std::size_t j = 0; j < T; ++j) {
        sr[j] /= z;
        dot += sr[j] * st[j];
      }
      for (std::size_t j = 0; j < T; ++j) st[j] = sr[j] * (st[j] - dot);

      double* o = heads_.x.row(i) + off;
      double* ot = heads_.t.row(i) + off;
      std::fill(o, o + dh, 0.0);
      std::fill(ot, ot + dh, 0.0);
      for (std::size_t j = 0; j < T; ++j) {
        const double* v = qkv_.x.row(j) + d + off;
        const double* vt = qkv_.t.row(j) + d + off;
        const double p = sr[j], pt = st[j];
        for (std::size_t e = 0; e < dh; ++e) {
          o[e] += p * v[e];
          ot[e] += pt * v[e] + p * vt[e];
        }
      }
    }
  }
  proj_.x.shape(tq, d);
  proj_.t.shape(tq, d);
  linear_dual(heads_.x.v.data(), heads_.t.v.data(), tq, d, w.proj_weight, w.proj_bias, 0, d, proj_.x.v.data(),
              proj_.t.v.data());
  if (cls_only) {
    s.x.shape(1, d);
    s.t.shape(1, d);
  }
  for (std::size_t i = 0; i < tq * d; ++i) {
    s.x.v[i] += proj_.x.v[i];
    s.t.v[i] += proj_.t.v[i];
  }
}

void TangentEngine::ffn_hidden(std::size_t layer, const Dual& s, Dual& h) {
  const EncoderLayer& w = model_.layers[layer - 1];
  const std::size_t rows = s.x.rows, d = model_.config.hidden, n = model_.config.ffn;
  ln_.x.shape(rows, d);
  ln_.t.shape(rows, d);
  layer_norm_jvp(s.x.v.data(), s.t.v.data(), rows, d, w.ln2_gamma, w.ln2_beta, model_.layer_norm_eps, ln_.x.v.data(),
                 ln_.t.v.data());
  h.x.shape(rows, n);
  h.t.shape(rows, n);
  linear_dual(ln_.x.v.data(), ln_.t.v.data(), rows, d, w.fc1_weight, w.fc1_bias, 0, n, h.x.v.data(), h.t.v.data());
  for (std::size_t i = 0; i < rows * n; ++i) {
    double slope = 0.0;
    gelu_pair(h.x.v[i], h.x.v[i], slope);
    h.t.v[i] *= slope;
  }
}

void TangentEngine::ffn_output(std::size_t layer, const Dual& h, Dual& s) {
  const EncoderLayer& w = model_.layers[layer - 1];
  const std::size_t rows = h.x.rows, d = model_.config.hidden, n = model_.config.ffn;
  y_.x.shape(rows, d);
  y_.t.shape(rows, d);
  linear_dual(h.x.v.data(), h.t.v.data(), rows, n, w.fc2_weight, w.fc2_bias, 0, d, y_.x.v.data(), y_.t.v.data());
  for (std::size_t i = 0; i < rows * d; ++i) {
    s.x.v[i] += y_.x.v[i];
    s.t.v[i] += y_.t.v[i];
  }
}

void TangentEngine::clamp(Dual& h, const NeuronId& id, const NeuronActivations& clean, double alpha) {
  const Tensor& orig = clean.per_token[id.layer - 1];
  for (std::size_t r : rows_) {
    if (r >= h.x.rows) continue;
    const double wbar = orig.at(r, id.channel);
    h.x.row(r)[id.channel] = alpha * wbar;
    h.t.row(r)[id.channel] = wbar;
  }
}

TangentEngine::LinePoint TangentEngine::head(const Dual& s, std::size_t label) {
  const VitConfig& c = model_.config;
  const std::size_t d = c.hidden, k = c.classes;
  std::vector<double> z(d), zt(d), logits(k), logits_t(k);
  layer_norm_jvp(s.x.row(0), s.t.row(0), 1, d, model_.norm_gamma, model_.norm_beta, model_.layer_norm_eps, z.data(),
                 zt.data());
  linear_cols(z.data(), 1, d, model_.head_weight, &model_.head_bias, 0, k, logits.data());
  linear_cols(zt.data(), 1, d, model_.head_weight, nullptr, 0, k, logits_t.data());
  if (mode_ == OutputMode::logit) return {logits[label], logits_t[label]};
  double mx = logits[0];
  for (double v : logits) mx = std::max(mx, v);
  double sum = 0.0;
  for (auto& v : logits) {
    v = std::exp(v - mx);
    sum += v;
  }
  double mean_t = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    logits[i] /= sum;
    mean_t += logits[i] * logits_t[i];
  }
  return {logits[label], logits[label] * (logits_t[label] - mean_t)};
}

TangentEngine::LinePoint TangentEngine::line_point(const Tensor& image, std::size_t label,
                                                   const NeuronActivations& clean, std::span<const NeuronId> neurons,
                                                   double alpha) {
  const VitConfig& c = model_.config;
  for (const auto& id : neurons) validate_neuron(id, c);
  Dual s;
  embed(image, 1.0, s);
  for (std::size_t l = 1; l <= c.layers; ++l) {
    attention_block(l, s, l == c.layers);
    ffn_hidden(l, s, hid_);
    for (const auto& id : neurons) {
      if (id.layer == l) clamp(hid_, id, clean, alpha);
    }
    ffn_output(l, hid_, s);
  }
  return head(s, label);
}

double TangentEngine::joint_attribution(const Tensor& image, std::size_t label, const NeuronActivations& clean,
                                        std::span<const NeuronId> neurons, std::size_t steps) {
  if (steps < 1) throw InvalidParameter("step count m must be >= 1");
  double total = 0.0;
  for (std::size_t k = 1; k <= steps; ++k) {
    const double dv = line_point(image, label, clean, neurons, static_cast<double>(k) / static_cast<double>(steps)).derivative;
    if (!std::isfinite(dv)) throw NumericError("non-finite gradient at step k=" + std::to_string(k));
    total += dv;
  }
  return total / static_cast<double>(steps);
}

std::vector<double> TangentEngine::scan_layer(const Tensor& image, std::size_t label, const NeuronActivations& clean,
                                              std::span<const NeuronId> prefix, std::size_t layer,
                                              std::size_t steps) {
  const VitConfig& c = model_.config;
  if (steps < 1) throw InvalidParameter("step count m must be >= 1");
  if (layer < 1 || layer > c.layers) throw IndexError("scan layer " + std::to_string(layer) + " out of range");
  for (const auto& id : prefix) {
    validate_neuron(id, c);
    if (id.layer >= layer) throw UsageError("prefix neuron " + to_string(id) + " is not below layer " + std::to_string(layer));
  }
  const std::size_t n = c.ffn, d = c.hidden;
  const bool last = layer == c.layers;
  const Tensor& orig = clean.per_token[layer - 1];
  const double* w2 = model_.layers[layer - 1].fc2_weight.data().data();
  std::vector<double> totals(n, 0.0);

  Dual s;
  for (std::size_t k = 1; k <= steps; ++k) {
    const double alpha = static_cast<double>(k) / static_cast<double>(steps);
    embed(image, 1.0, s);
    for (std::size_t l = 1; l < layer; ++l) {
      attention_block(l, s, false);
      ffn_hidden(l, s, hid_);
      for (const auto& id : prefix) {
        if (id.layer == l) clamp(hid_, id, clean, alpha);
      }
      ffn_output(l, hid_, s);
    }
    attention_block(layer, s, last);
    ffn_hidden(layer, s, hid_);
    base_ = s;
    ffn_output(layer, hid_, base_);
    const std::size_t rows = base_.x.rows;

    for (std::size_t ch = 0; ch < n; ++ch) {
      cur_ = base_;
      const double* wr = w2 + ch * d;
      for (std::size_t r : rows_) {
        if (r >= rows) continue;
        const double wbar = orig.at(r, ch);
        const double dx = alpha * wbar - hid_.x.row(r)[ch];
        const double dt = wbar - hid_.t.row(r)[ch];
        double* xr = cur_.x.row(r);
        double* tr = cur_.t.row(r);
        for (std::size_t j = 0; j < d; ++j) {
          xr[j] += dx * wr[j];
          tr[j] += dt * wr[j];
        }
      }
      for (std::size_t l = layer + 1; l <= c.layers; ++l) {
        attention_block(l, cur_, l == c.layers);
        ffn_hidden(l, cur_, pre_hidden_);
        ffn_output(l, pre_hidden_, cur_);
      }
      const double dv = head(cur_, label).derivative;
      if (!std::isfinite(dv)) {
        throw NumericError("non-finite gradient at step k=" + std::to_string(k) + " for " + to_string(NeuronId{layer, ch}));
      }
      totals[ch] += dv;
    }
  }
  for (auto& t : totals) t /= static_cast<double>(steps);
  return totals;
}

std::vector<std::vector<double>> TangentEngine::influence_factors(const Tensor& image, const NeuronId& from,
                                                                  std::size_t steps) {
  const VitConfig& c = model_.config;
  validate_neuron(from, c);
  if (steps < 1) throw InvalidParameter("step count m must be >= 1");
  if (from.layer >= c.layers) throw UsageError("influence factor needs a following layer after " + to_string(from));
  const std::size_t n = c.ffn;
  std::vector<std::vector<double>> out(steps, std::vector<double>(n, 0.0));
  Dual s;
  for (std::size_t k = 1; k <= steps; ++k) {
    embed(image, static_cast<double>(k) / static_cast<double>(steps), s);
    for (std::size_t l = 1; l <= from.layer; ++l) {
      attention_block(l, s, false);
      ffn_hidden(l, s, hid_);
      if (l == from.layer) {
        std::fill(hid_.t.v.begin(), hid_.t.v.end(), 0.0);
        for (std::size_t r : rows_) hid_.t.row(r)[from.channel] = 1.0;
      }
      ffn_output(l, hid_, s);
    }
    attention_block(from.layer + 1, s, false);
    ffn_hidden(from.layer + 1, s, hid_);
    auto& f = out[k - 1];
    if (scope_ == TokenScope::cls_only) {
      for (std::size_t w = 0; w < n; ++w) f[w] = hid_.t.row(0)[w];
    } else {
      const double inv = 1.0 / static_cast<double>(hid_.t.rows);
      for (std::size_t w = 0; w < n; ++w) {
        double acc = 0.0;
        for (std::size_t r = 0; r < hid_.t.rows; ++r) acc += hid_.t.row(r)[w];
        f[w] = acc * inv;
      }
    }
    for (double v : f) {
      if (!std::isfinite(v)) throw NumericError("non-finite influence factor at step k=" + std::to_string(k));
    }
  }
  return out;
}

}  // namespace npath
