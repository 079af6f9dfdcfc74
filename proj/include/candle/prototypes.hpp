#pragma once

#include <cstdint>

#include "candle/feature_pack.hpp"
#include "candle/sampling.hpp"

namespace candle {

/// Visual prototypes for base classes, textual prototypes for every class
/// and learnable virtual prototypes standing in for the missing visual
/// prototypes of new classes.
struct PrototypeSet {
  Matrix visual;          // base_ids.size() x D, frozen
  Matrix textual;         // K x D, row c is class c, frozen
  Matrix virtual_protos;  // new_ids.size() x D, trainable
  ClassSplit split;

  std::size_t dim() const { return static_cast<std::size_t>(textual.cols()); }
  std::size_t num_classes() const { return static_cast<std::size_t>(textual.rows()); }
};

/// Row b is the normalized mean of the training rows labeled base_ids[b].
/// Throws CoverageError if a base class has no rows.
Matrix visual_prototypes(const FeaturePack& train, const ClassSplit& split);

enum class VirtualInit { text, random };

/// VirtualInit::text: row j = normalize(T[new_ids[j]] + N(0, sigma^2 I)).
/// VirtualInit::random: row j = normalize(N(0, I)); sigma is ignored.
Matrix init_virtual(const Matrix& textual, std::span<const std::uint32_t> new_ids, double sigma,
                    std::uint64_t seed, VirtualInit mode = VirtualInit::text);

PrototypeSet build_prototypes(const FeaturePack& train, const FeaturePack& text,
                              const ClassSplit& split, double sigma, std::uint64_t seed,
                              VirtualInit mode = VirtualInit::text);

}  // namespace candle
