#include "candle/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "candle/errors.hpp"
#include "candle/parallel.hpp"
#include "candle/rng.hpp"

namespace candle {

using nlohmann::ordered_json;

const char* to_string(Protocol p) {
  switch (p) {
    case Protocol::base_to_new: return "base_to_new";
    case Protocol::transfer: return "transfer";
    case Protocol::single: return "single";
  }
  return "single";
}

const char* to_string(LabelSpaceMode m) { return m == LabelSpaceMode::separate ? "separate" : "joint"; }

LabelSpaceMode label_space_mode_from_string(const std::string& s) {
  if (s == "separate") return LabelSpaceMode::separate;
  if (s == "joint") return LabelSpaceMode::joint;
  throw ParameterError("unknown label-space mode '" + s + "'");
}

ordered_json EvalReport::to_json() const {
  ordered_json j;
  j["protocol"] = to_string(protocol);
  j["mode"] = to_string(mode);
  j["dataset"] = dataset;
  j["base_acc"] = base_acc;
  j["new_acc"] = new_acc;
  j["harmonic"] = harmonic;
  j["accuracy"] = accuracy;
  j["per_class_accuracy"] = per_class_accuracy;
  j["seed"] = seed;
  j["config"] = config;
  return j;
}

double mean_class_accuracy(std::span<const std::uint32_t> preds, std::span<const std::uint32_t> labels,
                           std::span<const std::uint32_t> label_space) {
  if (preds.size() != labels.size()) throw ParameterError("mean_class_accuracy: preds and labels differ in length");
  if (label_space.empty()) throw ProtocolError("mean_class_accuracy: empty label space");
  double sum = 0.0;
  for (auto c : label_space) {
    std::size_t total = 0, correct = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] != c) continue;
      ++total;
      correct += preds[i] == c;
    }
    if (total == 0) throw ProtocolError("class " + std::to_string(c) + " has no test samples");
    sum += static_cast<double>(correct) / static_cast<double>(total);
  }
  return sum / static_cast<double>(label_space.size());
}

double harmonic_mean(double base_acc, double new_acc) {
  if (base_acc <= 0.0 || new_acc <= 0.0) return 0.0;
  return 2.0 * base_acc * new_acc / (base_acc + new_acc);
}

namespace {

std::vector<double> per_class(std::span<const std::uint32_t> preds, std::span<const std::uint32_t> labels,
                              std::size_t num_classes) {
  std::vector<std::size_t> total(num_classes, 0), correct(num_classes, 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    ++total[labels[i]];
    correct[labels[i]] += preds[i] == labels[i];
  }
  std::vector<double> acc(num_classes, -1.0);
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (total[c]) acc[c] = static_cast<double>(correct[c]) / static_cast<double>(total[c]);
  }
  return acc;
}

std::vector<std::uint32_t> all_ids(std::size_t k) {
  std::vector<std::uint32_t> ids(k);
  for (std::size_t i = 0; i < k; ++i) ids[i] = static_cast<std::uint32_t>(i);
  return ids;
}

// Predictions under the label-space policy: in separate mode each sample is
// ranked within its own half of the split.
std::vector<std::uint32_t> predictions_for(const Matrix& logits, const FeaturePack& test,
                                           const ClassSplit& split, LabelSpaceMode mode) {
  if (mode == LabelSpaceMode::joint) return predict(logits, all_ids(split.num_classes()));
  const auto base_pred = predict(logits, split.base_ids);
  const auto new_pred = split.new_ids.empty() ? base_pred : predict(logits, split.new_ids);
  std::vector<std::uint32_t> out(test.count());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = split.is_base(test.labels[i]) ? base_pred[i] : new_pred[i];
  return out;
}

Matrix unit_rows(const FeaturePack& p) { return p.normalized ? p.matrix() : l2_normalize(p).matrix(); }

// Runs head_forward over seeded batches and returns the requested logits
// with columns indexed by class id.
Matrix batched_head_logits(const HeadModel& model, const Matrix& x, const EvalOptions& opts,
                           const Matrix& visual, const Matrix& virtual_protos, const Matrix& textual,
                           HeadOptions head) {
  const auto n = static_cast<std::size_t>(x.rows());
  Rng rng(opts.seed);
  const auto order = shuffled_indices(n, rng);
  const std::size_t bs = std::max<std::size_t>(1, opts.batch_size);
  const std::size_t batches = (n + bs - 1) / bs;
  Matrix z(x.rows(), textual.rows());
  parallel_for(batches, [&](std::size_t b) {
    const std::size_t start = b * bs;
    const std::size_t len = std::min(bs, n - start);
    Matrix xb(static_cast<Eigen::Index>(len), x.cols());
    for (std::size_t i = 0; i < len; ++i) xb.row(static_cast<Eigen::Index>(i)) = x.row(static_cast<Eigen::Index>(order[start + i]));
    const auto f = head_forward(model.params, head, xb, visual, virtual_protos, textual);
    for (std::size_t i = 0; i < len; ++i) z.row(static_cast<Eigen::Index>(order[start + i])) = f.z_text.row(static_cast<Eigen::Index>(i));
  });
  return z;
}

}  // namespace

EvalReport report_from_predictions(std::span<const std::uint32_t> preds, const FeaturePack& test,
                                   const ClassSplit& split, LabelSpaceMode mode) {
  split.validate(test.num_classes(), false);
  std::vector<std::uint32_t> base_pred, base_lab, new_pred, new_lab;
  for (std::size_t i = 0; i < test.count(); ++i) {
    const bool base = split.is_base(test.labels[i]);
    (base ? base_pred : new_pred).push_back(preds[i]);
    (base ? base_lab : new_lab).push_back(test.labels[i]);
  }
  if (base_lab.empty()) throw ProtocolError("test pack has no base-class samples");
  EvalReport r;
  r.protocol = split.new_ids.empty() ? Protocol::single : Protocol::base_to_new;
  r.mode = mode;
  r.dataset = test.dataset;
  r.base_acc = mean_class_accuracy(base_pred, base_lab, split.base_ids);
  if (!split.new_ids.empty()) {
    if (new_lab.empty()) throw ProtocolError("test pack has no new-class samples");
    r.new_acc = mean_class_accuracy(new_pred, new_lab, split.new_ids);
  }
  r.harmonic = harmonic_mean(r.base_acc, r.new_acc);
  r.per_class_accuracy = per_class(preds, test.labels, test.num_classes());
  double sum = 0.0;
  std::size_t n = 0;
  for (double a : r.per_class_accuracy) {
    if (a >= 0.0) {
      sum += a;
      ++n;
    }
  }
  r.accuracy = n ? sum / static_cast<double>(n) : 0.0;
  return r;
}

EvalReport base_to_new_eval(const HeadModel& model, const FeaturePack& test, const EvalOptions& opts) {
  const auto& protos = model.prototypes;
  if (test.dim != protos.dim()) throw FormatError(0, "test pack width differs from model width");
  if (test.num_classes() != protos.num_classes()) throw ProtocolError("test pack class count differs from model");
  const Matrix x = unit_rows(test);
  Matrix z;
  if (opts.source == LogitSource::aggregated) {
    z = batched_logits(model.params, model.options, protos, x, opts.batch_size, opts.seed);
  } else {
    // textual-only variant: the same sequence transfer_eval builds
    HeadOptions head = model.options;
    head.use_virtual = false;
    const Matrix none(0, x.cols());
    z = batched_head_logits(model, x, opts, none, none, protos.textual, head);
  }
  const auto preds = predictions_for(z, test, protos.split, opts.mode);
  auto r = report_from_predictions(preds, test, protos.split, opts.mode);
  r.seed = opts.seed;
  return r;
}

EvalReport transfer_eval(const HeadModel& model, const FeaturePack& target_text,
                         const FeaturePack& target_images, const EvalOptions& opts) {
  const auto d = model.params.dim();
  if (target_text.dim != d || target_images.dim != d) throw FormatError(0, "target pack width differs from model width");
  if (target_text.kind != PackKind::text) throw ValidationError("kind", "transfer target text must be a text pack");
  if (target_text.num_classes() != target_images.num_classes()) {
    throw ProtocolError("target text and image packs differ in class count");
  }
  const Matrix text = unit_rows(target_text);
  const Matrix x = unit_rows(target_images);
  HeadOptions head = model.options;
  head.use_virtual = false;
  const Matrix none(0, static_cast<Eigen::Index>(d));
  const Matrix z = batched_head_logits(model, x, opts, none, none, text, head);
  const auto ids = all_ids(target_text.num_classes());
  const auto preds = predict(z, ids);

  std::vector<std::uint32_t> present;
  const auto hist = target_images.histogram();
  for (auto c : ids) {
    if (hist[c]) present.push_back(c);
  }
  EvalReport r;
  r.protocol = Protocol::transfer;
  r.mode = LabelSpaceMode::joint;
  r.dataset = target_images.dataset;
  r.accuracy = mean_class_accuracy(preds, target_images.labels, present);
  r.new_acc = r.accuracy;
  r.base_acc = 0.0;
  r.harmonic = 0.0;
  r.per_class_accuracy = per_class(preds, target_images.labels, target_images.num_classes());
  r.seed = opts.seed;
  return r;
}

EvalReport zero_shot_report(const FeaturePack& test, const FeaturePack& text, const ClassSplit& split,
                            LabelSpaceMode mode) {
  const Matrix z = cosine_logits(unit_rows(test), unit_rows(text), 1.0);
  auto r = report_from_predictions(predictions_for(z, test, split, mode), test, split, mode);
  r.config["predictor"] = "zero_shot";
  return r;
}

EvalReport visual_proto_report(const FeaturePack& train, const FeaturePack& test, const FeaturePack& text,
                               const ClassSplit& split, LabelSpaceMode mode) {
  Matrix protos = unit_rows(text);
  const Matrix visual = visual_prototypes(train.normalized ? train : l2_normalize(train), split);
  for (std::size_t b = 0; b < split.base_ids.size(); ++b) {
    protos.row(split.base_ids[b]) = visual.row(static_cast<Eigen::Index>(b));
  }
  const Matrix z = cosine_logits(unit_rows(test), protos, 1.0);
  auto r = report_from_predictions(predictions_for(z, test, split, mode), test, split, mode);
  r.config["predictor"] = "visual_prototype";
  return r;
}

const char* to_string(AblationSuite s) {
  switch (s) {
    case AblationSuite::no_attention: return "no_attention";
    case AblationSuite::no_virtual: return "no_virtual";
    case AblationSuite::ce_loss: return "ce_loss";
    case AblationSuite::mask_within_visual: return "mask_within_visual";
    case AblationSuite::mask_within_text: return "mask_within_text";
    case AblationSuite::mask_cross: return "mask_cross";
  }
  return "no_attention";
}

AblationSuite ablation_suite_from_string(const std::string& s) {
  for (auto suite : {AblationSuite::no_attention, AblationSuite::no_virtual, AblationSuite::ce_loss,
                     AblationSuite::mask_within_visual, AblationSuite::mask_within_text, AblationSuite::mask_cross}) {
    if (s == to_string(suite)) return suite;
  }
  throw ParameterError("unknown ablation suite '" + s + "'");
}

TrainConfig ablate(const TrainConfig& cfg, AblationSuite suite) {
  TrainConfig c = cfg;
  switch (suite) {
    case AblationSuite::no_attention: c.use_attention = false; break;
    case AblationSuite::no_virtual: c.use_virtual = false; break;
    case AblationSuite::ce_loss: c.loss = LossKind::ce; break;
    case AblationSuite::mask_within_visual: c.mask = AttentionMask::within_visual; break;
    case AblationSuite::mask_within_text: c.mask = AttentionMask::within_text; break;
    case AblationSuite::mask_cross: c.mask = AttentionMask::cross; break;
  }
  return c;
}

BenchmarkData make_benchmark(const SynthConfig& synth, double ratio, std::size_t max_per_class,
                             std::uint64_t sample_seed) {
  auto packs = synth_generate(synth);
  BenchmarkData data;
  data.split = split_base_new(synth.num_classes, SplitPolicy::first_half);
  const auto profile = exp_decay_counts(data.split.base_ids.size(), max_per_class, ratio);
  const auto budgets = assign_budgets(profile, data.split, synth.num_classes, HeadOrder::index, sample_seed);
  data.train = subsample(packs.train, budgets, data.split, sample_seed).pack;
  data.text = std::move(packs.text);
  data.test = std::move(packs.test);
  return data;
}

RunOutcome run_base_to_new(const BenchmarkData& data, const TrainConfig& cfg, const EvalOptions& eval,
                           std::span<const double> tau_grid) {
  TrainConfig c = cfg;
  if (!tau_grid.empty()) c.tau_v = select_tau_v(data.train, data.text, data.split, c, tau_grid).selected;
  RunOutcome out;
  out.tau_v = c.tau_v;
  out.model = train_from_packs(data.train, data.text, data.split, c).model;
  out.report = base_to_new_eval(out.model, data.test, eval);
  out.report.config = c.to_json();
  return out;
}

ordered_json AblationResult::to_json() const {
  ordered_json j;
  j["suite"] = to_string(suite);
  j["full"] = full.to_json();
  j["ablated"] = ablated.to_json();
  j["delta_base"] = delta_base;
  j["delta_new"] = delta_new;
  j["delta_harmonic"] = delta_harmonic;
  return j;
}

AblationResult run_ablation(AblationSuite suite, const BenchmarkData& data, const TrainConfig& cfg,
                            const EvalOptions& eval, std::span<const double> tau_grid) {
  AblationResult r;
  r.suite = suite;
  r.full = run_base_to_new(data, cfg, eval, tau_grid).report;
  r.ablated = run_base_to_new(data, ablate(cfg, suite), eval, tau_grid).report;
  r.delta_base = r.ablated.base_acc - r.full.base_acc;
  r.delta_new = r.ablated.new_acc - r.full.new_acc;
  r.delta_harmonic = r.ablated.harmonic - r.full.harmonic;
  return r;
}

std::string csv_header() { return "dataset,seed,protocol,mode,base_acc,new_acc,harmonic,accuracy"; }

std::string csv_row(const EvalReport& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, ",%llu,%s,%s,%.6f,%.6f,%.6f,%.6f", static_cast<unsigned long long>(r.seed),
                to_string(r.protocol), to_string(r.mode), r.base_acc, r.new_acc, r.harmonic, r.accuracy);
  return r.dataset + buf;
}

}  // namespace candle
