#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "candle/checkpoint.hpp"
#include "candle/feature_pack.hpp"
#include "candle/sampling.hpp"
#include "candle/synth.hpp"
#include "candle/training.hpp"
#include "json.hpp"

namespace candle {

enum class Protocol { base_to_new, transfer, single };
/// separate: base samples ranked among base classes, new among new.
/// joint: every sample ranked among all classes.
enum class LabelSpaceMode { separate, joint };

const char* to_string(Protocol p);
const char* to_string(LabelSpaceMode m);
LabelSpaceMode label_space_mode_from_string(const std::string& s);

struct EvalReport {
  Protocol protocol = Protocol::base_to_new;
  LabelSpaceMode mode = LabelSpaceMode::separate;
  std::string dataset = "unnamed";
  double base_acc = 0.0;
  double new_acc = 0.0;
  double harmonic = 0.0;
  /// Mean-class accuracy over every evaluated class.
  double accuracy = 0.0;
  /// Indexed by class id; classes without test samples are reported as -1.
  std::vector<double> per_class_accuracy;
  nlohmann::ordered_json config = nlohmann::ordered_json::object();
  std::uint64_t seed = 0;

  nlohmann::ordered_json to_json() const;
};

/// Mean over `label_space` of per-class recall. Throws ProtocolError if a
/// class has no samples.
double mean_class_accuracy(std::span<const std::uint32_t> preds, std::span<const std::uint32_t> labels,
                           std::span<const std::uint32_t> label_space);

/// 2bn/(b+n), 0 when either argument is 0.
double harmonic_mean(double base_acc, double new_acc);

/// Builds a base-to-new report from predictions (one per test row).
EvalReport report_from_predictions(std::span<const std::uint32_t> preds, const FeaturePack& test,
                                   const ClassSplit& split, LabelSpaceMode mode);

/// aggregated: z_V + z_T. textual: z_T from a sequence of images and text
/// prototypes only, as in transfer_eval.
enum class LogitSource { aggregated, textual };

struct EvalOptions {
  LabelSpaceMode mode = LabelSpaceMode::separate;
  std::size_t batch_size = 128;
  std::uint64_t seed = 0;
  LogitSource source = LogitSource::aggregated;
};

/// Scores the whole test pack with the trained head (z_V + z_T) and reports
/// base, new and harmonic mean-class accuracy.
EvalReport base_to_new_eval(const HeadModel& model, const FeaturePack& test, const EvalOptions& opts);

/// Target classes are matched through z_T only: target text prototypes go
/// through P_T and attention alongside the projected target images, with no
/// visual or virtual prototypes. Accuracy is joint over the target classes.
EvalReport transfer_eval(const HeadModel& model, const FeaturePack& target_text,
                         const FeaturePack& target_images, const EvalOptions& opts);

/// Zero-shot image-text matching baseline.
EvalReport zero_shot_report(const FeaturePack& test, const FeaturePack& text, const ClassSplit& split,
                            LabelSpaceMode mode);
/// Visual prototypes (from `train`) for base classes, text for new classes.
EvalReport visual_proto_report(const FeaturePack& train, const FeaturePack& test, const FeaturePack& text,
                               const ClassSplit& split, LabelSpaceMode mode);

enum class AblationSuite { no_attention, no_virtual, ce_loss, mask_within_visual, mask_within_text, mask_cross };

const char* to_string(AblationSuite s);
AblationSuite ablation_suite_from_string(const std::string& s);
/// The config with the ablated component switched off.
TrainConfig ablate(const TrainConfig& cfg, AblationSuite suite);

/// Inputs of a base-to-new run.
struct BenchmarkData {
  FeaturePack train;  // imbalanced, base classes only
  FeaturePack text;
  FeaturePack test;
  ClassSplit split;
};

/// Synthetic packs, first-half split, exponential-decay subsample of the
/// base classes. Sampling uses `sample_seed`.
BenchmarkData make_benchmark(const SynthConfig& synth, double ratio, std::size_t max_per_class,
                             std::uint64_t sample_seed);

struct RunOutcome {
  HeadModel model;
  EvalReport report;
  double tau_v = 0.0;
};

/// Train on `data` (optionally searching tau_v over `tau_grid`) and evaluate.
RunOutcome run_base_to_new(const BenchmarkData& data, const TrainConfig& cfg, const EvalOptions& eval,
                           std::span<const double> tau_grid = {});

struct AblationResult {
  AblationSuite suite;
  EvalReport full;
  EvalReport ablated;
  double delta_base = 0.0;
  double delta_new = 0.0;
  double delta_harmonic = 0.0;
  nlohmann::ordered_json to_json() const;
};

/// Full model versus ablated model with shared seeds; deltas are
/// ablated minus full.
AblationResult run_ablation(AblationSuite suite, const BenchmarkData& data, const TrainConfig& cfg,
                            const EvalOptions& eval, std::span<const double> tau_grid = {});

std::string csv_header();
std::string csv_row(const EvalReport& r);

}  // namespace candle
