#include "candle/sampling.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "candle/errors.hpp"
#include "candle/rng.hpp"

namespace candle {

bool ClassSplit::is_base(std::uint32_t c) const {
  return std::find(base_ids.begin(), base_ids.end(), c) != base_ids.end();
}

void ClassSplit::validate(std::size_t num_classes, bool require_new) const {
  std::set<std::uint32_t> seen;
  for (auto ids : {&base_ids, &new_ids}) {
    for (auto c : *ids) {
      if (c >= num_classes) throw ParameterError("split: class id " + std::to_string(c) + " out of range");
      if (!seen.insert(c).second) throw ParameterError("split: class id " + std::to_string(c) + " repeated");
    }
  }
  if (seen.size() != num_classes) throw ParameterError("split: base and new ids must cover every class");
  if (base_ids.empty()) throw ParameterError("split: no base classes");
  if (require_new && new_ids.empty()) throw ParameterError("split: no new classes");
}

ClassSplit split_base_new(std::size_t num_classes, SplitPolicy policy,
                          std::span<const std::uint32_t> base_ids) {
  if (num_classes < 2) throw ParameterError("split: need at least 2 classes");
  ClassSplit split;
  if (policy == SplitPolicy::first_half) {
    const std::size_t num_base = (num_classes + 1) / 2;
    for (std::size_t c = 0; c < num_classes; ++c) {
      (c < num_base ? split.base_ids : split.new_ids).push_back(static_cast<std::uint32_t>(c));
    }
    return split;
  }
  std::set<std::uint32_t> base(base_ids.begin(), base_ids.end());
  if (base.size() != base_ids.size()) throw ParameterError("split: explicit list has duplicates");
  if (base.empty() || base.size() >= num_classes) {
    throw ParameterError("split: explicit list must be a non-empty proper subset");
  }
  if (*base.rbegin() >= num_classes) throw ParameterError("split: explicit id out of range");
  split.base_ids.assign(base_ids.begin(), base_ids.end());
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (!base.count(static_cast<std::uint32_t>(c))) split.new_ids.push_back(static_cast<std::uint32_t>(c));
  }
  return split;
}

ImbalanceProfile exp_decay_counts(std::size_t num_base, std::size_t n_max, double ratio) {
  if (num_base < 1) throw ParameterError("exp_decay_counts: need at least one base class");
  if (n_max < 1) throw ParameterError("exp_decay_counts: n_max must be >= 1");
  if (!(ratio >= 1.0)) throw ParameterError("exp_decay_counts: ratio must be >= 1");
  ImbalanceProfile p;
  p.max_per_class = n_max;
  p.counts.resize(num_base);
  for (std::size_t i = 0; i < num_base; ++i) {
    if (num_base == 1) {
      p.counts[i] = n_max;
      continue;
    }
    const double exponent = -static_cast<double>(i) / static_cast<double>(num_base - 1);
    const double n = std::round(static_cast<double>(n_max) * std::pow(ratio, exponent));
    p.counts[i] = std::max<std::size_t>(1, static_cast<std::size_t>(n));
  }
  p.ratio = static_cast<double>(p.counts.front()) / static_cast<double>(p.counts.back());
  return p;
}

std::vector<std::size_t> assign_budgets(const ImbalanceProfile& profile, const ClassSplit& split,
                                        std::size_t num_classes, HeadOrder order,
                                        std::uint64_t seed) {
  if (profile.counts.size() != split.base_ids.size()) {
    throw ParameterError("assign_budgets: profile length differs from number of base classes");
  }
  std::vector<std::uint32_t> ranked = split.base_ids;
  if (order == HeadOrder::random) {
    Rng rng(seed);
    rng.shuffle(std::span<std::uint32_t>(ranked));
  }
  std::vector<std::size_t> budgets(num_classes, 0);
  for (std::size_t i = 0; i < ranked.size(); ++i) {
    if (ranked[i] >= num_classes) throw ParameterError("assign_budgets: class id out of range");
    budgets[ranked[i]] = profile.counts[i];
  }
  return budgets;
}

namespace {

SampleResult draw_per_class(const FeaturePack& pack, std::span<const std::uint32_t> classes,
                            std::span<const std::size_t> budget_of_class, std::uint64_t seed) {
  Rng rng(seed);
  SampleResult result;
  std::vector<std::size_t> rows;
  for (auto c : classes) {
    auto idx = pack.indices_of(c);
    rng.shuffle(std::span<std::size_t>(idx));
    const std::size_t want = budget_of_class[c];
    const std::size_t take = std::min(want, idx.size());
    rows.insert(rows.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(take));
    result.draws.push_back({c, want, idx.size(), take});
  }
  if (rows.empty()) throw ParameterError("sampling produced an empty pack");
  result.pack = pack.select(rows);
  return result;
}

}  // namespace

SampleResult subsample(const FeaturePack& pack, std::span<const std::size_t> budgets,
                       const ClassSplit& split, std::uint64_t seed) {
  if (budgets.size() != pack.num_classes()) {
    throw ParameterError("subsample: expected one budget per class");
  }
  split.validate(pack.num_classes(), false);
  return draw_per_class(pack, split.base_ids, budgets, seed);
}

SampleResult few_shot_sample(const FeaturePack& pack, std::size_t shots, std::uint64_t seed,
                             std::optional<std::vector<std::uint32_t>> classes) {
  if (shots < 1) throw ParameterError("few_shot_sample: shots must be >= 1");
  std::vector<std::uint32_t> ids;
  if (classes) {
    ids = *classes;
  } else {
    for (std::size_t c = 0; c < pack.num_classes(); ++c) ids.push_back(static_cast<std::uint32_t>(c));
  }
  std::vector<std::size_t> budgets(pack.num_classes(), 0);
  for (auto c : ids) {
    if (c >= pack.num_classes()) throw ParameterError("few_shot_sample: class id out of range");
    budgets[c] = shots;
  }
  return draw_per_class(pack, ids, budgets, seed);
}

nlohmann::ordered_json sampling_manifest(const SampleResult& result, const ClassSplit& split,
                                         const std::string& policy, std::uint64_t seed) {
  nlohmann::ordered_json m;
  m["policy"] = policy;
  m["seed"] = seed;
  m["base_ids"] = split.base_ids;
  m["new_ids"] = split.new_ids;
  auto classes = nlohmann::ordered_json::array();
  for (const auto& d : result.draws) {
    nlohmann::ordered_json row;
    row["id"] = d.class_id;
    row["name"] = result.pack.class_names.at(d.class_id);
    row["requested"] = d.requested;
    row["available"] = d.available;
    row["actual"] = d.actual;
    row["shortfall"] = d.requested - d.actual;
    classes.push_back(std::move(row));
  }
  m["classes"] = std::move(classes);
  return m;
}

ClassSplit split_from_manifest(const nlohmann::json& manifest) {
  ClassSplit split;
  try {
    split.base_ids = manifest.at("base_ids").get<std::vector<std::uint32_t>>();
    split.new_ids = manifest.at("new_ids").get<std::vector<std::uint32_t>>();
  } catch (const nlohmann::json::exception& e) {
    throw ParameterError(std::string("sampling manifest lacks base/new ids: ") + e.what());
  }
  return split;
}

}  // namespace candle
