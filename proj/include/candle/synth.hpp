#pragma once

#include <cstdint>

#include "candle/feature_pack.hpp"

namespace candle {

/// Parameters of the synthetic CLIP-like feature generator.
struct SynthConfig {
  std::size_t num_classes = 20;
  std::size_t dim = 64;
  std::size_t samples_per_class = 100;
  /// Test samples per class; 0 means "same as samples_per_class".
  std::size_t test_per_class = 0;
  /// Per-coordinate std. dev. added to a class mean to make its text prototype.
  double text_noise = 0.3;
  /// Per-coordinate std. dev. of image samples around their class mean.
  double intra_class_spread = 0.25;
  std::uint64_t seed = 0;

  void validate() const;
};

struct SynthData {
  FeaturePack train;
  FeaturePack test;
  FeaturePack text;
  Matrix class_means;  // K x D, unit rows
};

/// Deterministic in `cfg`. Draw order from Rng(cfg.seed): class means
/// (K*D normals), text perturbations (K*D), train samples (class-major),
/// test samples (class-major). All rows are unit-normalized.
SynthData synth_generate(const SynthConfig& cfg);

}  // namespace candle
