#include "candle/prototypes.hpp"

#include "candle/errors.hpp"
#include "candle/rng.hpp"

namespace candle {

Matrix visual_prototypes(const FeaturePack& train, const ClassSplit& split) {
  const auto d = static_cast<Eigen::Index>(train.dim);
  Matrix protos = Matrix::Zero(static_cast<Eigen::Index>(split.base_ids.size()), d);
  std::vector<std::size_t> seen(split.base_ids.size(), 0);
  // class id -> prototype row
  std::vector<std::ptrdiff_t> slot(train.num_classes(), -1);
  for (std::size_t b = 0; b < split.base_ids.size(); ++b) {
    if (split.base_ids[b] >= train.num_classes()) throw ParameterError("base id out of range");
    slot[split.base_ids[b]] = static_cast<std::ptrdiff_t>(b);
  }
  for (std::size_t i = 0; i < train.count(); ++i) {
    const auto s = slot[train.labels[i]];
    if (s < 0) continue;
    auto r = train.row(i);
    for (Eigen::Index j = 0; j < d; ++j) protos(s, j) += r[static_cast<std::size_t>(j)];
    ++seen[static_cast<std::size_t>(s)];
  }
  for (std::size_t b = 0; b < seen.size(); ++b) {
    if (seen[b] == 0) {
      throw CoverageError(static_cast<int>(split.base_ids[b]), "base class has no training samples");
    }
    protos.row(static_cast<Eigen::Index>(b)) /= static_cast<double>(seen[b]);
  }
  return normalize_rows(protos);
}

Matrix init_virtual(const Matrix& textual, std::span<const std::uint32_t> new_ids, double sigma,
                    std::uint64_t seed, VirtualInit mode) {
  if (!(sigma >= 0.0)) throw ParameterError("init_virtual: sigma must be >= 0");
  Rng rng(seed);
  Matrix v(static_cast<Eigen::Index>(new_ids.size()), textual.cols());
  for (std::size_t j = 0; j < new_ids.size(); ++j) {
    const auto r = static_cast<Eigen::Index>(j);
    if (mode == VirtualInit::random) {
      for (Eigen::Index c = 0; c < v.cols(); ++c) v(r, c) = rng.normal();
    } else {
      v.row(r) = textual.row(static_cast<Eigen::Index>(new_ids[j]));
      if (sigma > 0.0) {
        for (Eigen::Index c = 0; c < v.cols(); ++c) v(r, c) += sigma * rng.normal();
      }
    }
  }
  if (v.rows() == 0 || (mode == VirtualInit::text && sigma == 0.0)) return v;
  return normalize_rows(v);
}

PrototypeSet build_prototypes(const FeaturePack& train, const FeaturePack& text,
                              const ClassSplit& split, double sigma, std::uint64_t seed,
                              VirtualInit mode) {
  if (train.dim != text.dim) throw ValidationError("dim", "image and text packs differ in width");
  if (train.num_classes() != text.num_classes()) {
    throw ValidationError("num_classes", "image and text packs differ in class count");
  }
  split.validate(text.num_classes(), false);
  PrototypeSet p;
  p.split = split;
  p.textual = normalize_rows(text.matrix());
  p.visual = visual_prototypes(train, split);
  p.virtual_protos = init_virtual(p.textual, split.new_ids, sigma, seed, mode);
  return p;
}

}  // namespace candle
