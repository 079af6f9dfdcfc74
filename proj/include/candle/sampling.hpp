#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "candle/feature_pack.hpp"
#include "json.hpp"

namespace candle {

/// Disjoint partition of class ids into base (seen) and new (unseen) classes.
struct ClassSplit {
  std::vector<std::uint32_t> base_ids;
  std::vector<std::uint32_t> new_ids;

  std::size_t num_classes() const { return base_ids.size() + new_ids.size(); }
  bool is_base(std::uint32_t c) const;
  /// Throws ParameterError unless the ids partition {0..K-1}.
  void validate(std::size_t num_classes, bool require_new = true) const;
  bool operator==(const ClassSplit&) const = default;
};

enum class SplitPolicy { first_half, explicit_list };

/// first_half: base = first ceil(K/2) ids. explicit_list: base = `base_ids`
/// (kept in the given order), new = the complement in ascending order.
ClassSplit split_base_new(std::size_t num_classes, SplitPolicy policy,
                          std::span<const std::uint32_t> base_ids = {});

/// Long-tailed per-class sample budget.
struct ImbalanceProfile {
  /// Budget per decay position: counts[0] is the head class.
  std::vector<std::size_t> counts;
  std::size_t max_per_class = 0;
  double ratio = 1.0;
};

/// n_i = max(1, round(n_max * r^(-i/(K_b-1)))), i = 0..K_b-1.
ImbalanceProfile exp_decay_counts(std::size_t num_base, std::size_t n_max, double ratio);

/// Which base class receives which decay position.
enum class HeadOrder { index, random };

/// Expand a profile into per-class budgets (K entries, 0 for new classes).
/// With HeadOrder::index, base_ids[i] gets counts[i].
std::vector<std::size_t> assign_budgets(const ImbalanceProfile& profile, const ClassSplit& split,
                                        std::size_t num_classes, HeadOrder order,
                                        std::uint64_t seed);

struct ClassDraw {
  std::uint32_t class_id;
  std::size_t requested;
  std::size_t available;
  std::size_t actual;
};

struct SampleResult {
  FeaturePack pack;
  std::vector<ClassDraw> draws;  // one per sampled class
};

/// Seeded per-class draw of min(budget, available) rows from every base
/// class; new classes are never emitted. Output is grouped by class in
/// base_ids order.
SampleResult subsample(const FeaturePack& pack, std::span<const std::size_t> budgets,
                       const ClassSplit& split, std::uint64_t seed);

/// min(shots, available) rows per class. When `classes` is given only
/// those classes are kept.
SampleResult few_shot_sample(const FeaturePack& pack, std::size_t shots, std::uint64_t seed,
                             std::optional<std::vector<std::uint32_t>> classes = std::nullopt);

/// Sampling manifest written next to prepared packs.
nlohmann::ordered_json sampling_manifest(const SampleResult& result, const ClassSplit& split,
                                         const std::string& policy, std::uint64_t seed);

/// Reads base/new ids back from a sampling manifest.
ClassSplit split_from_manifest(const nlohmann::json& manifest);

}  // namespace candle
