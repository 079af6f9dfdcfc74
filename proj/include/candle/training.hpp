#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "candle/checkpoint.hpp"
#include "candle/feature_pack.hpp"
#include "candle/model.hpp"
#include "candle/prototypes.hpp"
#include "json.hpp"

namespace candle {

enum class LossKind { cla, ce };

const char* to_string(LossKind loss);
LossKind loss_kind_from_string(const std::string& s);

/// The tau_v search grid.
inline const std::vector<double> kTauVGrid = {0.005, 0.01, 0.02, 0.05, 0.1};

struct TrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 128;
  double learning_rate = 3e-4;
  double weight_decay = 5e-4;
  double momentum = 0.9;
  double tau_t = 0.01;
  double tau_v = 0.01;
  std::size_t heads = 4;
  LossKind loss = LossKind::cla;
  bool use_attention = true;
  bool use_virtual = true;
  AttentionMask mask = AttentionMask::none;
  double virtual_sigma = 0.01;
  VirtualInit virtual_init = VirtualInit::text;
  std::uint64_t seed = 0;

  void validate() const;
  HeadOptions head_options() const { return {use_attention, use_virtual, mask}; }
  nlohmann::ordered_json to_json() const;
};

/// Independent sub-seeds derived from a run seed.
enum class SeedStream : std::uint64_t { init = 1, virtual_protos = 2, shuffle = 3, eval = 4, holdout = 5 };
std::uint64_t derive_seed(std::uint64_t seed, SeedStream stream);

/// Class prior p(y); new classes count as one sample each.
struct ClassPriors {
  std::vector<double> p;
  std::vector<double> log() const;
};

/// Base classes use their training counts (`counts[c]`, indexed by class id),
/// every new class counts as 1. Throws ParameterError on a zero base count.
ClassPriors estimate_priors(std::span<const std::size_t> counts, const ClassSplit& split);

/// Mean over rows of -log softmax(z + log_prior)[y]. Writes d(loss)/dz to
/// `dz` when non-null. Throws NumericalError on non-finite logits.
double cla_loss(const Matrix& z, std::span<const std::uint32_t> labels,
                std::span<const double> log_prior, Matrix* dz = nullptr);

/// Plain softmax cross-entropy, mean over rows.
double cross_entropy(const Matrix& z, std::span<const std::uint32_t> labels);

struct Batch {
  Matrix samples;  // unit rows
  std::vector<std::uint32_t> labels;  // class ids
};

struct LossBreakdown {
  double proj = 0.0;
  double visual = 0.0;
  double text = 0.0;
  double total = 0.0;
};

/// Batch with one normalized virtual prototype per new class appended,
/// labeled with that class (only when virtual prototypes are in use).
Batch augment_with_virtual(const Batch& batch, const PrototypeSet& protos, const TrainConfig& cfg);

/// L = L(z_P) + L(z_V) + L(z_T) on the augmented batch. With LossKind::ce
/// the priors are replaced by uniform ones.
LossBreakdown total_loss(const Batch& batch, const ModelParams& params, const PrototypeSet& protos,
                         const ClassPriors& priors, const TrainConfig& cfg);

struct LossAndGrads {
  LossBreakdown loss;
  ParamGrads grads;
};

/// Exact gradients of total_loss for every trainable tensor. Tensors that
/// are inactive under `cfg` get zero gradients.
LossAndGrads backward(const Batch& batch, const ModelParams& params, const PrototypeSet& protos,
                      const ClassPriors& priors, const TrainConfig& cfg);

/// Classical momentum SGD with L2 weight decay folded into the gradient:
/// v = momentum*v + g + wd*w; w -= lr*v. Inactive tensors are untouched.
void sgd_step(ModelParams& params, Matrix& virtual_protos, const ParamGrads& grads,
              const TrainConfig& cfg, ParamGrads& velocity);

struct EpochStats {
  std::size_t epoch = 0;
  LossBreakdown loss;  // mean over batches
};

struct TrainResult {
  HeadModel model;
  std::vector<EpochStats> history;
};

/// Untrained model for `cfg` (identity projections, zero output matrix,
/// virtual prototypes from text).
HeadModel initial_model(const FeaturePack& train, const FeaturePack& text, const ClassSplit& split,
                        const TrainConfig& cfg);

/// Seeded mini-batch training; deterministic in (inputs, cfg).
TrainResult train(const FeaturePack& train_pack, const HeadModel& init, const ClassPriors& priors,
                  const TrainConfig& cfg);

/// Convenience: build prototypes and priors from the packs, then train.
TrainResult train_from_packs(const FeaturePack& train_pack, const FeaturePack& text,
                             const ClassSplit& split, const TrainConfig& cfg);

struct TauSearch {
  double selected = 0.0;
  std::vector<std::pair<double, double>> scores;  // (tau_v, validation mean-class accuracy)
};

/// Holds out ~20% of each base class with at least two samples, trains
/// once per grid value and keeps the best validation mean-class accuracy
/// (ties go to the smaller tau_v).
TauSearch select_tau_v(const FeaturePack& train_pack, const FeaturePack& text,
                       const ClassSplit& split, const TrainConfig& cfg,
                       std::span<const double> grid = kTauVGrid);

nlohmann::ordered_json to_json(const EpochStats& s);

struct GradCheckConfig {
  std::size_t dim = 16;
  std::size_t heads = 2;
  std::size_t batch = 4;
  std::size_t num_base = 3;
  std::size_t num_new = 2;
  double eps = 1e-5;
  double tau_t = 0.01;
  double tau_v = 0.01;
  double tolerance = 1e-4;
  AttentionMask mask = AttentionMask::none;
  /// Test hook: multiply the analytic gradient of this tensor by `corrupt_scale`.
  std::optional<std::string> corrupt_tensor;
  double corrupt_scale = 2.0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_tensor;
  std::vector<std::pair<std::string, double>> per_tensor;
  bool passed = false;
  nlohmann::ordered_json to_json() const;
};

/// Compares `backward` with central differences on a random tiny instance.
/// Per-tensor error is max|analytic - numeric| / max(max|numeric|, 1e-12).
GradCheckReport grad_check(const GradCheckConfig& cfg, std::uint64_t seed);

}  // namespace candle
