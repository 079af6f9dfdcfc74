#include "candle/training.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "candle/errors.hpp"
#include "candle/rng.hpp"

namespace candle {

using nlohmann::ordered_json;

const char* to_string(LossKind loss) { return loss == LossKind::cla ? "cla" : "ce"; }

LossKind loss_kind_from_string(const std::string& s) {
  if (s == "cla" || s == "CLA") return LossKind::cla;
  if (s == "ce" || s == "CE") return LossKind::ce;
  throw ParameterError("unknown loss '" + s + "'");
}

void TrainConfig::validate() const {
  if (batch_size < 1) throw ParameterError("batch_size must be >= 1");
  if (!(learning_rate > 0.0)) throw ParameterError("learning_rate must be positive");
  if (!(weight_decay >= 0.0)) throw ParameterError("weight_decay must be >= 0");
  if (!(momentum >= 0.0)) throw ParameterError("momentum must be >= 0");
  if (!(tau_t > 0.0) || !(tau_v > 0.0)) throw ParameterError("temperatures must be positive");
  if (heads < 1) throw ParameterError("heads must be >= 1");
  if (!(virtual_sigma >= 0.0)) throw ParameterError("virtual_sigma must be >= 0");
}

ordered_json TrainConfig::to_json() const {
  ordered_json j;
  j["epochs"] = epochs;
  j["batch_size"] = batch_size;
  j["learning_rate"] = learning_rate;
  j["weight_decay"] = weight_decay;
  j["momentum"] = momentum;
  j["tau_t"] = tau_t;
  j["tau_v"] = tau_v;
  j["heads"] = heads;
  j["loss"] = to_string(loss);
  j["use_attention"] = use_attention;
  j["use_virtual"] = use_virtual;
  j["mask"] = candle::to_string(mask);
  j["virtual_sigma"] = virtual_sigma;
  j["virtual_init"] = virtual_init == VirtualInit::text ? "text" : "random";
  j["seed"] = seed;
  return j;
}

std::uint64_t derive_seed(std::uint64_t seed, SeedStream stream) {
  std::uint64_t state = seed ^ (static_cast<std::uint64_t>(stream) * 0xd1b54a32d192ed03ULL);
  return splitmix64(state);
}

std::vector<double> ClassPriors::log() const {
  std::vector<double> out(p.size());
  std::transform(p.begin(), p.end(), out.begin(), [](double v) { return std::log(v); });
  return out;
}

ClassPriors estimate_priors(std::span<const std::size_t> counts, const ClassSplit& split) {
  const auto k = split.num_classes();
  if (counts.size() != k) throw ParameterError("estimate_priors: one count per class required");
  std::vector<double> effective(k, 0.0);
  for (auto c : split.base_ids) {
    if (counts[c] == 0) throw ParameterError("estimate_priors: base class " + std::to_string(c) + " has no samples");
    effective[c] = static_cast<double>(counts[c]);
  }
  for (auto c : split.new_ids) effective[c] = 1.0;
  double total = 0.0;
  for (double v : effective) total += v;
  ClassPriors priors;
  priors.p.resize(k);
  for (std::size_t i = 0; i < k; ++i) priors.p[i] = effective[i] / total;
  return priors;
}

double cla_loss(const Matrix& z, std::span<const std::uint32_t> labels,
                std::span<const double> log_prior, Matrix* dz) {
  const auto rows = z.rows();
  const auto cols = z.cols();
  if (static_cast<std::size_t>(rows) != labels.size()) throw ParameterError("cla_loss: one label per row required");
  if (static_cast<std::size_t>(cols) != log_prior.size()) throw ParameterError("cla_loss: one prior per column required");
  if (rows == 0) throw ParameterError("cla_loss: empty batch");
  if (!z.allFinite()) throw NumericalError("cla_loss: non-finite logits");
  if (dz) dz->resize(rows, cols);

  double total = 0.0;
  Vector shifted(cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    const auto y = static_cast<Eigen::Index>(labels[static_cast<std::size_t>(i)]);
    if (y >= cols) throw ParameterError("cla_loss: label out of range");
    for (Eigen::Index j = 0; j < cols; ++j) shifted(j) = z(i, j) + log_prior[static_cast<std::size_t>(j)];
    const double m = shifted.maxCoeff();
    double sum = 0.0;
    for (Eigen::Index j = 0; j < cols; ++j) sum += std::exp(shifted(j) - m);
    const double log_sum = m + std::log(sum);
    total += log_sum - shifted(y);
    if (dz) {
      for (Eigen::Index j = 0; j < cols; ++j) (*dz)(i, j) = std::exp(shifted(j) - log_sum);
      (*dz)(i, y) -= 1.0;
    }
  }
  if (dz) *dz /= static_cast<double>(rows);
  const double loss = total / static_cast<double>(rows);
  if (!std::isfinite(loss)) throw NumericalError("cla_loss: non-finite loss");
  return loss;
}

double cross_entropy(const Matrix& z, std::span<const std::uint32_t> labels) {
  double total = 0.0;
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const double m = z.row(i).maxCoeff();
    const double lse = m + std::log((z.row(i).array() - m).exp().sum());
    total += lse - z(i, labels[static_cast<std::size_t>(i)]);
  }
  return total / static_cast<double>(z.rows());
}

Batch augment_with_virtual(const Batch& batch, const PrototypeSet& protos, const TrainConfig& cfg) {
  if (!cfg.use_virtual || protos.virtual_protos.rows() == 0) return batch;
  Batch out;
  const auto b = batch.samples.rows();
  const auto n = protos.virtual_protos.rows();
  out.samples.resize(b + n, protos.virtual_protos.cols());
  if (b) out.samples.topRows(b) = batch.samples;
  out.samples.bottomRows(n) = normalize_rows(protos.virtual_protos);
  out.labels = batch.labels;
  out.labels.insert(out.labels.end(), protos.split.new_ids.begin(), protos.split.new_ids.end());
  return out;
}

namespace {

// Column layout of z_V: [base_ids; new_ids] (new only with virtual prototypes).
struct VisualColumns {
  std::vector<std::uint32_t> class_of_col;
  std::vector<std::ptrdiff_t> col_of_class;
};

VisualColumns visual_columns(const PrototypeSet& protos, bool use_virtual) {
  VisualColumns v;
  v.class_of_col = protos.split.base_ids;
  if (use_virtual) v.class_of_col.insert(v.class_of_col.end(), protos.split.new_ids.begin(), protos.split.new_ids.end());
  v.col_of_class.assign(protos.num_classes(), -1);
  for (std::size_t i = 0; i < v.class_of_col.size(); ++i) v.col_of_class[v.class_of_col[i]] = static_cast<std::ptrdiff_t>(i);
  return v;
}

LossAndGrads evaluate(const Batch& raw, const ModelParams& params, const PrototypeSet& protos,
                      const ClassPriors& priors, const TrainConfig& cfg, bool want_grads) {
  const Batch batch = augment_with_virtual(raw, protos, cfg);
  if (batch.labels.empty()) throw ParameterError("total_loss: empty batch");
  const auto k = protos.num_classes();
  if (priors.p.size() != k) throw ParameterError("total_loss: priors do not cover every class");

  std::vector<double> log_prior = cfg.loss == LossKind::cla ? priors.log() : std::vector<double>(k, 0.0);
  const auto cols = visual_columns(protos, cfg.use_virtual);
  std::vector<double> visual_log_prior(cols.class_of_col.size());
  for (std::size_t i = 0; i < cols.class_of_col.size(); ++i) visual_log_prior[i] = log_prior[cols.class_of_col[i]];
  std::vector<std::uint32_t> visual_labels(batch.labels.size());
  for (std::size_t i = 0; i < batch.labels.size(); ++i) {
    const auto c = batch.labels[i];
    if (c >= k || cols.col_of_class[c] < 0) {
      throw ParameterError("total_loss: sample label " + std::to_string(c) + " has no visual prototype");
    }
    visual_labels[i] = static_cast<std::uint32_t>(cols.col_of_class[c]);
  }

  const auto fwd = head_forward(params, cfg.head_options(), batch.samples, protos.visual,
                                protos.virtual_protos, protos.textual);
  LossAndGrads out;
  Matrix dz_proj, dz_visual, dz_text;
  auto* gp = want_grads ? &dz_proj : nullptr;
  auto* gv = want_grads ? &dz_visual : nullptr;
  auto* gt = want_grads ? &dz_text : nullptr;
  out.loss.proj = cla_loss(fwd.z_proj, batch.labels, log_prior, gp);
  out.loss.visual = cla_loss(fwd.z_visual, visual_labels, visual_log_prior, gv);
  out.loss.text = cla_loss(fwd.z_text, batch.labels, log_prior, gt);
  out.loss.total = out.loss.proj + out.loss.visual + out.loss.text;
  if (!want_grads) return out;

  auto hg = head_backward(params, fwd, dz_proj, dz_visual, dz_text);
  out.grads = std::move(hg.params);
  out.grads.virtual_protos = Matrix::Zero(protos.virtual_protos.rows(), protos.virtual_protos.cols());
  if (cfg.use_virtual && protos.virtual_protos.rows() > 0) {
    const auto nb = protos.visual.rows();
    const auto nv = protos.virtual_protos.rows();
    out.grads.virtual_protos += hg.d_protos.middleRows(nb, nv);
    // virtual prototypes also enter as normalized samples at the batch tail
    const auto b0 = raw.samples.rows();
    for (Eigen::Index j = 0; j < nv; ++j) {
      const double len = protos.virtual_protos.row(j).norm();
      const auto u = protos.virtual_protos.row(j) / len;
      const auto g = hg.d_samples.row(b0 + j);
      out.grads.virtual_protos.row(j) += (g - u.dot(g) * u) / len;
    }
  }
  const std::pair<const char*, const Matrix*> named[] = {
      {"proj_image", &out.grads.proj_image}, {"proj_text", &out.grads.proj_text},
      {"query", &out.grads.query},           {"key", &out.grads.key},
      {"value", &out.grads.value},           {"output", &out.grads.output},
      {"virtual_protos", &out.grads.virtual_protos}};
  for (const auto& [name, m] : named) {
    if (!m->allFinite()) throw NumericalError(std::string("non-finite gradient for ") + name);
  }
  return out;
}

void momentum_update(Matrix& w, const Matrix& g, Matrix& v, const TrainConfig& cfg) {
  v = cfg.momentum * v + g + cfg.weight_decay * w;
  w -= cfg.learning_rate * v;
}

}  // namespace

LossBreakdown total_loss(const Batch& batch, const ModelParams& params, const PrototypeSet& protos,
                         const ClassPriors& priors, const TrainConfig& cfg) {
  return evaluate(batch, params, protos, priors, cfg, false).loss;
}

LossAndGrads backward(const Batch& batch, const ModelParams& params, const PrototypeSet& protos,
                      const ClassPriors& priors, const TrainConfig& cfg) {
  return evaluate(batch, params, protos, priors, cfg, true);
}

void sgd_step(ModelParams& params, Matrix& virtual_protos, const ParamGrads& grads,
              const TrainConfig& cfg, ParamGrads& velocity) {
  momentum_update(params.proj_image, grads.proj_image, velocity.proj_image, cfg);
  momentum_update(params.proj_text, grads.proj_text, velocity.proj_text, cfg);
  if (cfg.use_attention) {
    momentum_update(params.query, grads.query, velocity.query, cfg);
    momentum_update(params.key, grads.key, velocity.key, cfg);
    momentum_update(params.value, grads.value, velocity.value, cfg);
    momentum_update(params.output, grads.output, velocity.output, cfg);
  }
  if (cfg.use_virtual && virtual_protos.rows() > 0) {
    momentum_update(virtual_protos, grads.virtual_protos, velocity.virtual_protos, cfg);
  }
}

HeadModel initial_model(const FeaturePack& train_pack, const FeaturePack& text, const ClassSplit& split,
                        const TrainConfig& cfg) {
  cfg.validate();
  HeadModel m;
  m.params = init_params(train_pack.dim, cfg.heads, cfg.tau_t, cfg.tau_v, derive_seed(cfg.seed, SeedStream::init));
  m.options = cfg.head_options();
  m.prototypes = build_prototypes(train_pack.normalized ? train_pack : l2_normalize(train_pack),
                                  text.normalized ? text : l2_normalize(text), split, cfg.virtual_sigma,
                                  derive_seed(cfg.seed, SeedStream::virtual_protos), cfg.virtual_init);
  m.class_names = text.class_names;
  return m;
}

TrainResult train(const FeaturePack& train_pack, const HeadModel& init, const ClassPriors& priors,
                  const TrainConfig& cfg) {
  cfg.validate();
  TrainResult result{init, {}};
  HeadModel& m = result.model;
  m.params.tau_t = cfg.tau_t;
  m.params.tau_v = cfg.tau_v;
  m.options = cfg.head_options();
  const auto& split = m.prototypes.split;
  for (auto y : train_pack.labels) {
    if (!split.is_base(y)) throw ParameterError("training pack contains a sample of non-base class " + std::to_string(y));
  }
  const Matrix x = train_pack.normalized ? train_pack.matrix() : l2_normalize(train_pack).matrix();
  const std::size_t n = train_pack.count();

  ParamGrads velocity = ParamGrads::zeros_like(m.params, m.prototypes.virtual_protos);
  Rng rng(derive_seed(cfg.seed, SeedStream::shuffle));
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = shuffled_indices(n, rng);
    EpochStats stats;
    stats.epoch = epoch;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t len = std::min(cfg.batch_size, n - start);
      Batch batch;
      batch.samples.resize(static_cast<Eigen::Index>(len), x.cols());
      batch.labels.resize(len);
      for (std::size_t i = 0; i < len; ++i) {
        batch.samples.row(static_cast<Eigen::Index>(i)) = x.row(static_cast<Eigen::Index>(order[start + i]));
        batch.labels[i] = train_pack.labels[order[start + i]];
      }
      LossAndGrads lg;
      try {
        lg = backward(batch, m.params, m.prototypes, priors, cfg);
      } catch (const NumericalError& e) {
        throw NumericalError("epoch " + std::to_string(epoch) + ", batch " + std::to_string(batches) + ": " + e.what());
      }
      sgd_step(m.params, m.prototypes.virtual_protos, lg.grads, cfg, velocity);
      stats.loss.proj += lg.loss.proj;
      stats.loss.visual += lg.loss.visual;
      stats.loss.text += lg.loss.text;
      stats.loss.total += lg.loss.total;
      ++batches;
    }
    if (batches) {
      for (double* v : {&stats.loss.proj, &stats.loss.visual, &stats.loss.text, &stats.loss.total}) {
        *v /= static_cast<double>(batches);
      }
    }
    result.history.push_back(stats);
  }
  return result;
}

TrainResult train_from_packs(const FeaturePack& train_pack, const FeaturePack& text,
                             const ClassSplit& split, const TrainConfig& cfg) {
  const auto init = initial_model(train_pack, text, split, cfg);
  const auto priors = estimate_priors(train_pack.histogram(), split);
  return train(train_pack, init, priors, cfg);
}

TauSearch select_tau_v(const FeaturePack& train_pack, const FeaturePack& text,
                       const ClassSplit& split, const TrainConfig& cfg, std::span<const double> grid) {
  if (grid.empty()) throw ParameterError("select_tau_v: empty grid");
  Rng rng(derive_seed(cfg.seed, SeedStream::holdout));
  std::vector<std::size_t> fit_rows, val_rows;
  for (auto c : split.base_ids) {
    auto idx = train_pack.indices_of(c);
    rng.shuffle(std::span<std::size_t>(idx));
    const std::size_t held = idx.size() >= 2 ? std::max<std::size_t>(1, idx.size() / 5) : 0;
    val_rows.insert(val_rows.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(held));
    fit_rows.insert(fit_rows.end(), idx.begin() + static_cast<std::ptrdiff_t>(held), idx.end());
  }
  if (val_rows.empty()) throw ParameterError("select_tau_v: no class has enough samples for validation");
  const auto fit = train_pack.select(fit_rows);
  const auto val = train_pack.select(val_rows);
  const Matrix val_x = val.normalized ? val.matrix() : l2_normalize(val).matrix();

  std::vector<std::uint32_t> val_classes;
  for (auto c : split.base_ids) {
    if (!val.indices_of(c).empty()) val_classes.push_back(c);
  }

  TauSearch search;
  double best = -1.0;
  std::vector<double> sorted(grid.begin(), grid.end());
  std::sort(sorted.begin(), sorted.end());
  for (double tau : sorted) {
    TrainConfig c = cfg;
    c.tau_v = tau;
    const auto model = train_from_packs(fit, text, split, c).model;
    const Matrix z = batched_logits(model.params, model.options, model.prototypes, val_x, cfg.batch_size,
                                    derive_seed(cfg.seed, SeedStream::eval));
    const auto pred = predict(z, split.base_ids);
    double acc = 0.0;
    for (auto cls : val_classes) {
      std::size_t total = 0, correct = 0;
      for (std::size_t i = 0; i < val.count(); ++i) {
        if (val.labels[i] != cls) continue;
        ++total;
        correct += pred[i] == cls;
      }
      acc += static_cast<double>(correct) / static_cast<double>(total);
    }
    acc /= static_cast<double>(val_classes.size());
    search.scores.emplace_back(tau, acc);
    if (acc > best) {
      best = acc;
      search.selected = tau;
    }
  }
  return search;
}

ordered_json to_json(const EpochStats& s) {
  ordered_json j;
  j["epoch"] = s.epoch;
  j["loss_zP"] = s.loss.proj;
  j["loss_zV"] = s.loss.visual;
  j["loss_zT"] = s.loss.text;
  j["total"] = s.loss.total;
  return j;
}

ordered_json GradCheckReport::to_json() const {
  ordered_json j;
  j["max_rel_error"] = max_rel_error;
  j["worst_tensor"] = worst_tensor;
  ordered_json t = ordered_json::object();
  for (const auto& [name, err] : per_tensor) t[name] = err;
  j["per_tensor"] = std::move(t);
  j["passed"] = passed;
  return j;
}

GradCheckReport grad_check(const GradCheckConfig& gc, std::uint64_t seed) {
  Rng rng(seed);
  const auto d = static_cast<Eigen::Index>(gc.dim);
  auto gaussian = [&](Eigen::Index r, Eigen::Index c, double s) {
    Matrix m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = s * rng.normal();
    return m;
  };
  const std::size_t k = gc.num_base + gc.num_new;

  ModelParams params;
  params.heads = gc.heads;
  params.tau_t = gc.tau_t;
  params.tau_v = gc.tau_v;
  params.proj_image = Matrix::Identity(d, d) + gaussian(d, d, 0.2);
  params.proj_text = Matrix::Identity(d, d) + gaussian(d, d, 0.2);
  params.query = gaussian(d, d, 0.5);
  params.key = gaussian(d, d, 0.5);
  params.value = gaussian(d, d, 0.5);
  params.output = gaussian(d, d, 0.5);
  params.validate();

  PrototypeSet protos;
  for (std::size_t c = 0; c < k; ++c) {
    (c < gc.num_base ? protos.split.base_ids : protos.split.new_ids).push_back(static_cast<std::uint32_t>(c));
  }
  protos.visual = normalize_rows(gaussian(static_cast<Eigen::Index>(gc.num_base), d, 1.0));
  protos.textual = normalize_rows(gaussian(static_cast<Eigen::Index>(k), d, 1.0));
  protos.virtual_protos = gaussian(static_cast<Eigen::Index>(gc.num_new), d, 1.0);

  Batch batch;
  batch.samples = normalize_rows(gaussian(static_cast<Eigen::Index>(gc.batch), d, 1.0));
  for (std::size_t i = 0; i < gc.batch; ++i) batch.labels.push_back(static_cast<std::uint32_t>(rng.below(gc.num_base)));

  std::vector<std::size_t> counts(k, 1);
  for (std::size_t c = 0; c < gc.num_base; ++c) counts[c] = 1 + rng.below(20);
  const auto priors = estimate_priors(counts, protos.split);

  TrainConfig cfg;
  cfg.tau_t = gc.tau_t;
  cfg.tau_v = gc.tau_v;
  cfg.heads = gc.heads;
  cfg.mask = gc.mask;

  auto analytic = backward(batch, params, protos, priors, cfg).grads;
  struct Entry {
    const char* name;
    Matrix* value;
    Matrix* grad;
  };
  Entry entries[] = {{"proj_image", &params.proj_image, &analytic.proj_image},
                     {"proj_text", &params.proj_text, &analytic.proj_text},
                     {"query", &params.query, &analytic.query},
                     {"key", &params.key, &analytic.key},
                     {"value", &params.value, &analytic.value},
                     {"output", &params.output, &analytic.output},
                     {"virtual_protos", &protos.virtual_protos, &analytic.virtual_protos}};

  GradCheckReport report;
  for (auto& e : entries) {
    if (gc.corrupt_tensor && *gc.corrupt_tensor == e.name) *e.grad *= gc.corrupt_scale;
    double max_diff = 0.0, max_ref = 0.0;
    for (Eigen::Index i = 0; i < e.value->size(); ++i) {
      double& w = e.value->data()[i];
      const double saved = w;
      w = saved + gc.eps;
      const double up = total_loss(batch, params, protos, priors, cfg).total;
      w = saved - gc.eps;
      const double down = total_loss(batch, params, protos, priors, cfg).total;
      w = saved;
      const double numeric = (up - down) / (2.0 * gc.eps);
      max_diff = std::max(max_diff, std::abs(numeric - e.grad->data()[i]));
      max_ref = std::max(max_ref, std::abs(numeric));
    }
    const double rel = max_diff / std::max(max_ref, 1e-12);
    report.per_tensor.emplace_back(e.name, rel);
    if (report.worst_tensor.empty() || rel > report.max_rel_error) {
      report.max_rel_error = rel;
      report.worst_tensor = e.name;
    }
  }
  report.passed = report.max_rel_error <= gc.tolerance;
  return report;
}

}  // namespace candle
