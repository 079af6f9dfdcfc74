#include "candle/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "candle/errors.hpp"
#include "candle/parallel.hpp"
#include "candle/rng.hpp"

namespace candle {

namespace {

constexpr double kMinNorm = 1e-12;

struct Normalized {
  Matrix unit;
  Vector norms;
};

Normalized normalize_checked(const Matrix& m, const char* what) {
  Normalized n{m, Vector(m.rows())};
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    const double len = m.row(i).norm();
    if (!(len >= kMinNorm)) {
      throw DegenerateError(static_cast<std::size_t>(i), std::string(what) + " has norm below 1e-12");
    }
    n.norms(i) = len;
    n.unit.row(i) /= len;
  }
  return n;
}

// d/da of a/|a| applied to upstream g: (g - u (u.g)) / |a|.
Matrix unnormalize_grad(const Matrix& g, const Normalized& n) {
  Matrix out(g.rows(), g.cols());
  for (Eigen::Index i = 0; i < g.rows(); ++i) {
    const double proj = n.unit.row(i).dot(g.row(i));
    out.row(i) = (g.row(i) - proj * n.unit.row(i)) / n.norms(i);
  }
  return out;
}

// z = (a_hat b_hat^T) / tau. Accumulates da, db.
void cosine_backward(const Matrix& dz, const Matrix& a, const Matrix& b, double tau, Matrix& da,
                     Matrix& db) {
  if (dz.size() == 0) return;
  const auto na = normalize_checked(a, "cosine operand");
  const auto nb = normalize_checked(b, "cosine operand");
  const Matrix da_hat = dz * nb.unit / tau;
  const Matrix db_hat = dz.transpose() * na.unit / tau;
  da += unnormalize_grad(da_hat, na);
  db += unnormalize_grad(db_hat, nb);
}

bool allowed(AttentionMask mask, bool vis_i, bool vis_j) {
  switch (mask) {
    case AttentionMask::none: return true;
    case AttentionMask::within_visual: return !(vis_i && vis_j);
    case AttentionMask::within_text: return vis_i || vis_j;
    case AttentionMask::cross: return vis_i == vis_j;
  }
  return true;
}

Matrix stack(std::initializer_list<const Matrix*> parts, Eigen::Index cols) {
  Eigen::Index rows = 0;
  for (auto* p : parts) rows += p->rows();
  Matrix out(rows, cols);
  Eigen::Index r = 0;
  for (auto* p : parts) {
    if (p->rows() == 0) continue;
    if (p->cols() != cols) throw ValidationError("dim", "operand width mismatch");
    out.middleRows(r, p->rows()) = *p;
    r += p->rows();
  }
  return out;
}

// Multi-head scaled dot-product self-attention with a residual branch.
// Fills q, k, v, attn, context, out of `f` from f.tokens.
void attention_forward(HeadForward& f, const ModelParams& params, AttentionMask mask,
                       std::size_t num_visual_tokens) {
  const auto n = f.tokens.rows();
  const auto d = f.tokens.cols();
  const auto heads = static_cast<Eigen::Index>(params.heads);
  const auto width = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(width));

  f.q = f.tokens * params.query.transpose();
  f.k = f.tokens * params.key.transpose();
  f.v = f.tokens * params.value.transpose();
  f.context = Matrix::Zero(n, d);
  f.attn.assign(static_cast<std::size_t>(heads), Matrix());

  for (Eigen::Index h = 0; h < heads; ++h) {
    Matrix scores = f.q.middleCols(h * width, width) * f.k.middleCols(h * width, width).transpose();
    scores *= scale;
    Matrix& a = f.attn[static_cast<std::size_t>(h)];
    a = Matrix::Zero(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const bool vis_i = static_cast<std::size_t>(i) < num_visual_tokens;
      double m = -std::numeric_limits<double>::infinity();
      for (Eigen::Index j = 0; j < n; ++j) {
        if (allowed(mask, vis_i, static_cast<std::size_t>(j) < num_visual_tokens)) m = std::max(m, scores(i, j));
      }
      if (!std::isfinite(m)) continue;  // fully masked row: zero attention output
      double sum = 0.0;
      for (Eigen::Index j = 0; j < n; ++j) {
        if (allowed(mask, vis_i, static_cast<std::size_t>(j) < num_visual_tokens)) {
          a(i, j) = std::exp(scores(i, j) - m);
          sum += a(i, j);
        }
      }
      a.row(i) /= sum;
    }
    f.context.middleCols(h * width, width) = a * f.v.middleCols(h * width, width);
  }
  f.out = f.tokens + f.context * params.output.transpose();
}

}  // namespace

const char* to_string(AttentionMask mask) {
  switch (mask) {
    case AttentionMask::none: return "none";
    case AttentionMask::within_visual: return "mask_within_visual";
    case AttentionMask::within_text: return "mask_within_text";
    case AttentionMask::cross: return "mask_cross";
  }
  return "none";
}

AttentionMask attention_mask_from_string(const std::string& s) {
  if (s == "none") return AttentionMask::none;
  if (s == "mask_within_visual" || s == "within_visual") return AttentionMask::within_visual;
  if (s == "mask_within_text" || s == "within_text") return AttentionMask::within_text;
  if (s == "mask_cross" || s == "cross") return AttentionMask::cross;
  throw ParameterError("unknown attention mask '" + s + "'");
}

void ModelParams::validate() const {
  const auto d = proj_image.rows();
  if (d == 0) throw ValidationError("dim", "must be positive");
  if (heads == 0 || static_cast<std::size_t>(d) % heads != 0) {
    throw ValidationError("heads", "dim must be divisible by the head count");
  }
  if (!(tau_t > 0.0)) throw ValidationError("tau_t", "must be positive");
  if (!(tau_v > 0.0)) throw ValidationError("tau_v", "must be positive");
  for (const Matrix* m : {&proj_image, &proj_text, &query, &key, &value, &output}) {
    if (m->rows() != d || m->cols() != d) throw ValidationError("weights", "all weights must be D x D");
  }
}

ModelParams init_params(std::size_t dim, std::size_t heads, double tau_t, double tau_v,
                        std::uint64_t seed) {
  const auto d = static_cast<Eigen::Index>(dim);
  ModelParams p;
  p.heads = heads;
  p.tau_t = tau_t;
  p.tau_v = tau_v;
  p.proj_image = Matrix::Identity(d, d);
  p.proj_text = Matrix::Identity(d, d);
  Rng rng(seed);
  for (Matrix* m : {&p.query, &p.key, &p.value}) {
    m->resize(d, d);
    for (Eigen::Index i = 0; i < m->size(); ++i) m->data()[i] = 0.02 * rng.normal();
  }
  p.output = Matrix::Zero(d, d);
  p.validate();
  return p;
}

ParamGrads ParamGrads::zeros_like(const ModelParams& p, const Matrix& virtual_protos) {
  const auto d = static_cast<Eigen::Index>(p.dim());
  ParamGrads g;
  for (Matrix* m : {&g.proj_image, &g.proj_text, &g.query, &g.key, &g.value, &g.output}) {
    *m = Matrix::Zero(d, d);
  }
  g.virtual_protos = Matrix::Zero(virtual_protos.rows(), virtual_protos.cols());
  return g;
}

Matrix cosine_logits(const Matrix& a, const Matrix& b, double tau) {
  if (a.rows() == 0 || b.rows() == 0) return Matrix::Zero(a.rows(), b.rows());
  return normalize_checked(a, "cosine operand").unit *
         normalize_checked(b, "cosine operand").unit.transpose() / tau;
}

HeadForward head_forward(const ModelParams& params, const HeadOptions& options,
                         const Matrix& samples, const Matrix& visual,
                         const Matrix& virtual_protos, const Matrix& textual) {
  params.validate();
  const auto d = static_cast<Eigen::Index>(params.dim());
  if (samples.cols() != d || textual.cols() != d) throw ValidationError("dim", "input width differs from model width");

  HeadForward f;
  f.batch = static_cast<std::size_t>(samples.rows());
  f.samples = samples;
  f.protos = options.use_virtual ? stack({&visual, &virtual_protos}, d) : stack({&visual}, d);
  f.textual = textual;
  f.num_protos = static_cast<std::size_t>(f.protos.rows());
  f.num_text = static_cast<std::size_t>(textual.rows());

  const Matrix px = samples * params.proj_image.transpose();
  const Matrix pp = f.protos * params.proj_image.transpose();
  const Matrix pt = textual * params.proj_text.transpose();
  f.z_proj = cosine_logits(px, pt, params.tau_t);

  f.tokens = stack({&px, &pp, &pt}, d);
  f.attention_applied = options.use_attention;
  if (options.use_attention) {
    attention_forward(f, params, options.mask, f.batch + f.num_protos);
  } else {
    f.out = f.tokens;
  }
  const auto b = static_cast<Eigen::Index>(f.batch);
  const auto p = static_cast<Eigen::Index>(f.num_protos);
  const auto t = static_cast<Eigen::Index>(f.num_text);
  f.z_visual = cosine_logits(f.out.topRows(b), f.out.middleRows(b, p), params.tau_v);
  f.z_text = cosine_logits(f.out.topRows(b), f.out.bottomRows(t), params.tau_t);
  return f;
}

HeadGrads head_backward(const ModelParams& params, const HeadForward& f, const Matrix& dz_proj,
                        const Matrix& dz_visual, const Matrix& dz_text) {
  const auto d = static_cast<Eigen::Index>(params.dim());
  const auto b = static_cast<Eigen::Index>(f.batch);
  const auto p = static_cast<Eigen::Index>(f.num_protos);
  const auto t = static_cast<Eigen::Index>(f.num_text);
  const auto n = b + p + t;

  HeadGrads g;
  g.params = ParamGrads::zeros_like(params, Matrix::Zero(0, d));

  // Post-attention cosines.
  Matrix d_out = Matrix::Zero(n, d);
  {
    Matrix dx = Matrix::Zero(b, d), dp = Matrix::Zero(p, d), dt = Matrix::Zero(t, d);
    cosine_backward(dz_visual, f.out.topRows(b), f.out.middleRows(b, p), params.tau_v, dx, dp);
    cosine_backward(dz_text, f.out.topRows(b), f.out.bottomRows(t), params.tau_t, dx, dt);
    d_out.topRows(b) = dx;
    d_out.middleRows(b, p) = dp;
    d_out.bottomRows(t) = dt;
  }

  Matrix d_tokens = d_out;  // residual / identity path
  if (f.attention_applied) {
    const auto heads = static_cast<Eigen::Index>(params.heads);
    const auto width = d / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(width));

    g.params.output = d_out.transpose() * f.context;
    const Matrix d_context = d_out * params.output;
    Matrix dq = Matrix::Zero(n, d), dk = Matrix::Zero(n, d), dv = Matrix::Zero(n, d);
    for (Eigen::Index h = 0; h < heads; ++h) {
      const Matrix& a = f.attn[static_cast<std::size_t>(h)];
      const auto dc = d_context.middleCols(h * width, width);
      const Matrix da = dc * f.v.middleCols(h * width, width).transpose();
      dv.middleCols(h * width, width) = a.transpose() * dc;
      // softmax backward; masked entries have a == 0 and get no gradient
      const Vector row_dot = (da.array() * a.array()).rowwise().sum();
      const Matrix ds = (a.array() * (da.colwise() - row_dot).array()).matrix() * scale;
      dq.middleCols(h * width, width) = ds * f.k.middleCols(h * width, width);
      dk.middleCols(h * width, width) = ds.transpose() * f.q.middleCols(h * width, width);
    }
    g.params.query = dq.transpose() * f.tokens;
    g.params.key = dk.transpose() * f.tokens;
    g.params.value = dv.transpose() * f.tokens;
    d_tokens += dq * params.query + dk * params.key + dv * params.value;
  }

  Matrix d_px = d_tokens.topRows(b);
  const Matrix d_pp = d_tokens.middleRows(b, p);
  Matrix d_pt = d_tokens.bottomRows(t);
  {
    const Matrix px = f.tokens.topRows(b);
    const Matrix pt = f.tokens.bottomRows(t);
    cosine_backward(dz_proj, px, pt, params.tau_t, d_px, d_pt);
  }

  g.params.proj_image = d_px.transpose() * f.samples + d_pp.transpose() * f.protos;
  g.params.proj_text = d_pt.transpose() * f.textual;
  g.d_samples = d_px * params.proj_image;
  g.d_protos = d_pp * params.proj_image;
  return g;
}

Matrix project_logits(const Matrix& samples, const Matrix& textual, const ModelParams& params) {
  params.validate();
  return cosine_logits(samples * params.proj_image.transpose(), textual * params.proj_text.transpose(),
                       params.tau_t);
}

AttentionOutput cross_modal_attention(const Matrix& samples, const Matrix& visual,
                                      const Matrix& virtual_protos, const Matrix& textual,
                                      const ModelParams& params, AttentionMask mask) {
  HeadOptions opts;
  opts.mask = mask;
  const auto f = head_forward(params, opts, samples, visual, virtual_protos, textual);
  const auto b = static_cast<Eigen::Index>(f.batch);
  const auto p = static_cast<Eigen::Index>(f.num_protos);
  const auto t = static_cast<Eigen::Index>(f.num_text);
  return {f.out.topRows(b), f.out.middleRows(b, p), f.out.bottomRows(t)};
}

Matrix visual_logits(const Matrix& attended_samples, const Matrix& attended_protos,
                     const ModelParams& params) {
  return cosine_logits(attended_samples, attended_protos, params.tau_v);
}

Matrix textual_logits(const Matrix& attended_samples, const Matrix& attended_text,
                      const ModelParams& params) {
  return cosine_logits(attended_samples, attended_text, params.tau_t);
}

Matrix aggregated_logits(const ModelParams& params, const HeadOptions& options,
                         const PrototypeSet& protos, const Matrix& samples) {
  const auto f = head_forward(params, options, samples, protos.visual, protos.virtual_protos,
                              protos.textual);
  Matrix z = f.z_text;
  const auto& split = protos.split;
  for (std::size_t i = 0; i < split.base_ids.size(); ++i) {
    z.col(split.base_ids[i]) += f.z_visual.col(static_cast<Eigen::Index>(i));
  }
  const auto nb = static_cast<Eigen::Index>(split.base_ids.size());
  for (std::size_t j = 0; j < split.new_ids.size(); ++j) {
    const auto c = static_cast<Eigen::Index>(split.new_ids[j]);
    if (options.use_virtual) {
      z.col(c) += f.z_visual.col(nb + static_cast<Eigen::Index>(j));
    } else {
      z.col(c) += f.z_text.col(c) * (params.tau_t / params.tau_v);
    }
  }
  return z;
}

std::vector<std::uint32_t> predict(const Matrix& logits, std::span<const std::uint32_t> label_space) {
  if (label_space.empty()) throw ParameterError("predict: empty label space");
  std::vector<std::uint32_t> ordered(label_space.begin(), label_space.end());
  std::sort(ordered.begin(), ordered.end());
  for (auto c : ordered) {
    if (static_cast<Eigen::Index>(c) >= logits.cols()) throw ParameterError("predict: class id out of range");
  }
  std::vector<std::uint32_t> out(static_cast<std::size_t>(logits.rows()));
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    std::uint32_t best = ordered.front();
    for (auto c : ordered) {
      if (logits(i, c) > logits(i, best)) best = c;
    }
    out[static_cast<std::size_t>(i)] = best;
  }
  return out;
}

std::vector<std::uint32_t> nearest_prototype(const Matrix& samples, const Matrix& prototypes,
                                             std::span<const std::uint32_t> class_ids) {
  if (static_cast<std::size_t>(prototypes.rows()) != class_ids.size()) {
    throw ParameterError("nearest_prototype: one class id per prototype row required");
  }
  const auto num_classes = class_ids.empty() ? 0 : *std::max_element(class_ids.begin(), class_ids.end()) + 1;
  const Matrix cos = cosine_logits(samples, prototypes, 1.0);
  Matrix logits = Matrix::Constant(samples.rows(), num_classes, -std::numeric_limits<double>::infinity());
  for (std::size_t r = 0; r < class_ids.size(); ++r) logits.col(class_ids[r]) = cos.col(static_cast<Eigen::Index>(r));
  return predict(logits, class_ids);
}

std::vector<std::uint32_t> zero_shot_predict(const Matrix& samples, const Matrix& textual) {
  std::vector<std::uint32_t> ids(static_cast<std::size_t>(textual.rows()));
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<std::uint32_t>(i);
  return nearest_prototype(samples, textual, ids);
}

std::vector<std::uint32_t> visual_proto_predict(const Matrix& samples, const Matrix& visual) {
  return zero_shot_predict(samples, visual);
}

}  // namespace candle

namespace candle {

Matrix batched_logits(const ModelParams& params, const HeadOptions& options,
                      const PrototypeSet& protos, const Matrix& samples, std::size_t batch_size,
                      std::uint64_t order_seed) {
  if (batch_size == 0) throw ParameterError("batched_logits: batch_size must be >= 1");
  const auto n = static_cast<std::size_t>(samples.rows());
  Rng rng(order_seed);
  const auto order = shuffled_indices(n, rng);
  const std::size_t num_batches = (n + batch_size - 1) / batch_size;
  Matrix z(samples.rows(), static_cast<Eigen::Index>(protos.num_classes()));
  parallel_for(num_batches, [&](std::size_t b) {
    const std::size_t start = b * batch_size;
    const std::size_t len = std::min(batch_size, n - start);
    Matrix x(static_cast<Eigen::Index>(len), samples.cols());
    for (std::size_t i = 0; i < len; ++i) x.row(static_cast<Eigen::Index>(i)) = samples.row(static_cast<Eigen::Index>(order[start + i]));
    const Matrix zb = aggregated_logits(params, options, protos, x);
    for (std::size_t i = 0; i < len; ++i) z.row(static_cast<Eigen::Index>(order[start + i])) = zb.row(static_cast<Eigen::Index>(i));
  });
  return z;
}

}  // namespace candle
