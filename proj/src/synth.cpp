#include "candle/synth.hpp"

#include <cstdio>

#include "candle/errors.hpp"
#include "candle/rng.hpp"

namespace candle {

void SynthConfig::validate() const {
  if (num_classes < 2) throw ParameterError("synth: num_classes must be >= 2");
  if (dim < 2) throw ParameterError("synth: dim must be >= 2");
  if (samples_per_class < 1) throw ParameterError("synth: samples_per_class must be >= 1");
  if (!(text_noise >= 0.0)) throw ParameterError("synth: text_noise must be >= 0");
  if (!(intra_class_spread > 0.0)) throw ParameterError("synth: intra_class_spread must be > 0");
}

namespace {

std::vector<std::string> default_class_names(std::size_t k) {
  std::vector<std::string> names;
  names.reserve(k);
  char buf[32];
  for (std::size_t i = 0; i < k; ++i) {
    std::snprintf(buf, sizeof buf, "class_%03zu", i);
    names.emplace_back(buf);
  }
  return names;
}

Matrix gaussian(Rng& rng, Eigen::Index rows, Eigen::Index cols, double stddev) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = stddev * rng.normal();
  return m;
}

FeaturePack draw_images(Rng& rng, const Matrix& means, std::size_t per_class, double spread,
                        const std::vector<std::string>& names) {
  const auto k = static_cast<std::size_t>(means.rows());
  Matrix x(static_cast<Eigen::Index>(k * per_class), means.cols());
  std::vector<std::uint32_t> labels;
  labels.reserve(k * per_class);
  for (std::size_t c = 0; c < k; ++c) {
    for (std::size_t s = 0; s < per_class; ++s) {
      const auto r = static_cast<Eigen::Index>(c * per_class + s);
      for (Eigen::Index j = 0; j < means.cols(); ++j) {
        x(r, j) = means(static_cast<Eigen::Index>(c), j) + spread * rng.normal();
      }
      labels.push_back(static_cast<std::uint32_t>(c));
    }
  }
  return make_pack(PackKind::image, normalize_rows(x), std::move(labels), names, true);
}

}  // namespace

SynthData synth_generate(const SynthConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  const auto k = static_cast<Eigen::Index>(cfg.num_classes);
  const auto d = static_cast<Eigen::Index>(cfg.dim);
  const auto names = default_class_names(cfg.num_classes);

  SynthData out;
  out.class_means = normalize_rows(gaussian(rng, k, d, 1.0));

  const Matrix perturbation = gaussian(rng, k, d, cfg.text_noise);
  const Matrix text = cfg.text_noise == 0.0 ? out.class_means
                                            : normalize_rows(out.class_means + perturbation);
  std::vector<std::uint32_t> text_labels(cfg.num_classes);
  for (std::size_t i = 0; i < cfg.num_classes; ++i) text_labels[i] = static_cast<std::uint32_t>(i);
  out.text = make_pack(PackKind::text, text, std::move(text_labels), names, true);

  const std::size_t test_per_class = cfg.test_per_class ? cfg.test_per_class : cfg.samples_per_class;
  out.train = draw_images(rng, out.class_means, cfg.samples_per_class, cfg.intra_class_spread, names);
  out.test = draw_images(rng, out.class_means, test_per_class, cfg.intra_class_spread, names);

  for (auto* p : {&out.train, &out.test, &out.text}) {
    p->dataset = "synthetic";
    p->seed = cfg.seed;
  }
  out.train.split = "train";
  out.test.split = "test";
  out.text.split = "text";
  return out;
}

}  // namespace candle
