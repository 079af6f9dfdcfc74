#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

#include "candle/checkpoint.hpp"
#include "candle/errors.hpp"
#include "candle/model.hpp"
#include "candle/synth.hpp"
#include "doctest.h"
#include "oracles.hpp"
#include "test_helpers.hpp"

using namespace candle;
using candle::testing::random_matrix;
using candle::testing::random_unit_rows;

namespace {

ModelParams random_params(Rng& rng, std::size_t dim, std::size_t heads, double scale = 0.5) {
  ModelParams p = init_params(dim, heads, 0.01, 0.02, rng.next());
  const auto d = static_cast<Eigen::Index>(dim);
  p.proj_image = Matrix::Identity(d, d) + 0.2 * random_matrix(rng, d, d);
  p.proj_text = Matrix::Identity(d, d) + 0.2 * random_matrix(rng, d, d);
  p.query = random_matrix(rng, d, d, scale);
  p.key = random_matrix(rng, d, d, scale);
  p.value = random_matrix(rng, d, d, scale);
  p.output = random_matrix(rng, d, d, scale);
  return p;
}

double max_abs(const Matrix& a, const Matrix& b) {
  REQUIRE(a.rows() == b.rows());
  REQUIRE(a.cols() == b.cols());
  return (a - b).cwiseAbs().maxCoeff();
}

double max_abs(const Matrix& a, const oracle::Mat& b, std::size_t offset = 0) {
  double worst = 0.0;
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.cols(); ++j)
      worst = std::max(worst, std::abs(a(i, j) - b[offset + static_cast<std::size_t>(i)][static_cast<std::size_t>(j)]));
  return worst;
}

Matrix permute_rows(const Matrix& m, const std::vector<std::size_t>& perm) {
  Matrix out(m.rows(), m.cols());
  for (std::size_t i = 0; i < perm.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(perm[i]));
  return out;
}

}  // namespace

TEST_CASE("project_logits self match and orthogonality") {
  const ModelParams p = init_params(4, 1, 0.01, 0.01, 1);
  Matrix t(2, 4);
  t << 1, 0, 0, 0,
       0, 1, 0, 0;
  const Matrix x = t.row(0);
  const Matrix z = project_logits(x, t, p);
  CHECK(z(0, 0) == doctest::Approx(100.0));
  CHECK(std::abs(z(0, 1)) <= 1e-12);
}

TEST_CASE("project_logits matches the scalar oracle") {
  Rng rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    const ModelParams p = random_params(rng, 8, 2);
    const Matrix x = random_unit_rows(rng, 5, 8);
    const Matrix t = random_unit_rows(rng, 6, 8);
    const Matrix z = project_logits(x, t, p);
    const auto wi = oracle::to_mat(p.proj_image), wt = oracle::to_mat(p.proj_text);
    const auto xs = oracle::to_mat(x), ts = oracle::to_mat(t);
    for (std::size_t b = 0; b < xs.size(); ++b)
      for (std::size_t i = 0; i < ts.size(); ++i) {
        const double want = oracle::cosine(oracle::matvec(wi, xs[b]), oracle::matvec(wt, ts[i])) / p.tau_t;
        CHECK(std::abs(z(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(i)) - want) <= 1e-6);
      }
  }
}

TEST_CASE("degenerate projection is reported") {
  ModelParams p = init_params(4, 1, 0.01, 0.01, 1);
  p.proj_image.setZero();
  Rng rng(2);
  CHECK_THROWS_AS(project_logits(random_unit_rows(rng, 2, 4), random_unit_rows(rng, 2, 4), p), DegenerateError);
}

TEST_CASE("zero output matrix makes attention the identity") {
  Rng rng(5);
  ModelParams p = random_params(rng, 16, 4);
  p.output.setZero();
  const Matrix x = random_unit_rows(rng, 6, 16);
  const Matrix v = random_unit_rows(rng, 3, 16);
  const Matrix vh = random_unit_rows(rng, 2, 16);
  const Matrix t = random_unit_rows(rng, 5, 16);
  const auto out = cross_modal_attention(x, v, vh, t, p, AttentionMask::none);
  CHECK(max_abs(out.samples, x * p.proj_image.transpose()) == 0.0);
  CHECK(max_abs(out.textual, t * p.proj_text.transpose()) == 0.0);
  CHECK(max_abs(textual_logits(out.samples, out.textual, p), project_logits(x, t, p)) <= 1e-6);

  Matrix protos(5, 16);
  protos << v, vh;
  CHECK(max_abs(visual_logits(out.samples, out.protos, p),
                cosine_logits(x * p.proj_image.transpose(), protos * p.proj_image.transpose(), p.tau_v)) <= 1e-6);
}

TEST_CASE("attention is permutation equivariant without a mask") {
  Rng rng(21);
  const ModelParams p = random_params(rng, 16, 4);
  const Matrix x = random_unit_rows(rng, 6, 16);
  const Matrix v = random_unit_rows(rng, 3, 16);
  const Matrix vh = random_unit_rows(rng, 2, 16);
  const Matrix t = random_unit_rows(rng, 5, 16);
  const auto base = cross_modal_attention(x, v, vh, t, p, AttentionMask::none);
  Matrix protos(5, 16);
  protos << v, vh;

  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto px = shuffled_indices(6, rng);
    const auto pp = shuffled_indices(5, rng);
    const auto pt = shuffled_indices(5, rng);
    // a permutation of the prototype block may move rows across the V / V^ boundary
    const Matrix perm_protos = permute_rows(protos, pp);
    const auto out = cross_modal_attention(permute_rows(x, px), perm_protos.topRows(3), perm_protos.bottomRows(2),
                                           permute_rows(t, pt), p, AttentionMask::none);
    worst = std::max(worst, max_abs(out.samples, permute_rows(base.samples, px)));
    worst = std::max(worst, max_abs(out.protos, permute_rows(base.protos, pp)));
    worst = std::max(worst, max_abs(out.textual, permute_rows(base.textual, pt)));
  }
  CHECK(worst <= 1e-6);
}

TEST_CASE("three-token attention matches a straight-line oracle") {
  Rng rng(8);
  const ModelParams p = random_params(rng, 4, 1, 0.8);
  const Matrix x = random_unit_rows(rng, 1, 4);
  const Matrix v = random_unit_rows(rng, 1, 4);
  const Matrix t = random_unit_rows(rng, 1, 4);
  const auto out = cross_modal_attention(x, v, Matrix(0, 4), t, p, AttentionMask::none);

  const auto wi = oracle::to_mat(p.proj_image), wt = oracle::to_mat(p.proj_text);
  const oracle::Mat tokens{oracle::matvec(wi, oracle::to_mat(x)[0]), oracle::matvec(wi, oracle::to_mat(v)[0]),
                           oracle::matvec(wt, oracle::to_mat(t)[0])};
  const auto want = oracle::attention(tokens, oracle::to_mat(p.query), oracle::to_mat(p.key), oracle::to_mat(p.value),
                                      oracle::to_mat(p.output), 1, [](std::size_t, std::size_t) { return true; });
  CHECK(max_abs(out.samples, want, 0) <= 1e-6);
  CHECK(max_abs(out.protos, want, 1) <= 1e-6);
  CHECK(max_abs(out.textual, want, 2) <= 1e-6);
}

TEST_CASE("masked attention matches the oracle") {
  Rng rng(31);
  const ModelParams p = random_params(rng, 8, 2);
  const Matrix x = random_unit_rows(rng, 3, 8);
  const Matrix v = random_unit_rows(rng, 2, 8);
  const Matrix vh = random_unit_rows(rng, 1, 8);
  const Matrix t = random_unit_rows(rng, 3, 8);
  oracle::Mat tokens;
  const auto wi = oracle::to_mat(p.proj_image), wt = oracle::to_mat(p.proj_text);
  for (const auto& r : oracle::to_mat(x)) tokens.push_back(oracle::matvec(wi, r));
  for (const auto& r : oracle::to_mat(v)) tokens.push_back(oracle::matvec(wi, r));
  for (const auto& r : oracle::to_mat(vh)) tokens.push_back(oracle::matvec(wi, r));
  for (const auto& r : oracle::to_mat(t)) tokens.push_back(oracle::matvec(wt, r));
  const std::size_t num_visual = 6;

  const std::vector<std::pair<AttentionMask, std::function<bool(bool, bool)>>> cases{
      {AttentionMask::within_visual, [](bool a, bool b) { return !(a && b); }},
      {AttentionMask::within_text, [](bool a, bool b) { return a || b; }},
      {AttentionMask::cross, [](bool a, bool b) { return a == b; }},
  };
  for (const auto& [mask, rule] : cases) {
    CAPTURE(to_string(mask));
    const auto want = oracle::attention(tokens, oracle::to_mat(p.query), oracle::to_mat(p.key), oracle::to_mat(p.value),
                                        oracle::to_mat(p.output), 2, [&](std::size_t i, std::size_t j) {
                                          return rule(i < num_visual, j < num_visual);
                                        });
    const auto out = cross_modal_attention(x, v, vh, t, p, mask);
    CHECK(out.samples.allFinite());
    CHECK(out.textual.allFinite());
    CHECK(max_abs(out.samples, want, 0) <= 1e-6);
    CHECK(max_abs(out.protos, want, 3) <= 1e-6);
    CHECK(max_abs(out.textual, want, 6) <= 1e-6);
  }
}

TEST_CASE("fully masked row passes the token through") {
  Rng rng(3);
  const ModelParams p = random_params(rng, 8, 2);
  const Matrix x = random_unit_rows(rng, 2, 8);
  const Matrix t = random_unit_rows(rng, 1, 8);
  const auto out = cross_modal_attention(x, Matrix(0, 8), Matrix(0, 8), t, p, AttentionMask::within_text);
  CHECK(out.textual.allFinite());
  // text-only sequence: every text row is blocked under within_text
  const auto none_visible = cross_modal_attention(Matrix(0, 8), Matrix(0, 8), Matrix(0, 8), t, p, AttentionMask::within_text);
  CHECK(max_abs(none_visible.textual, t * p.proj_text.transpose()) == 0.0);
}

TEST_CASE("visual_logits") {
  Rng rng(17);
  const ModelParams p = random_params(rng, 8, 2);
  const Matrix x = random_unit_rows(rng, 4, 8);
  const Matrix protos = random_unit_rows(rng, 5, 8);

  SUBCASE("self match gives the maximal logit") {
    const Matrix z = visual_logits(protos.row(0), protos, p);
    CHECK(z(0, 0) == doctest::Approx(1.0 / p.tau_v));
    CHECK(z.row(0).maxCoeff() == z(0, 0));
  }
  SUBCASE("softmax over base and virtual prototypes matches the direct probability") {
    const Matrix z = visual_logits(x, protos, p);
    const auto xs = oracle::to_mat(x), ps = oracle::to_mat(protos);
    for (std::size_t b = 0; b < xs.size(); ++b) {
      double denom = 0.0;
      for (const auto& r : ps) denom += std::exp(oracle::cosine(xs[b], r) / p.tau_v);
      const double zmax = z.row(static_cast<Eigen::Index>(b)).maxCoeff();
      const double zsum = (z.row(static_cast<Eigen::Index>(b)).array() - zmax).exp().sum();
      for (std::size_t i = 0; i < ps.size(); ++i) {
        const double want = std::exp(oracle::cosine(xs[b], ps[i]) / p.tau_v) / denom;
        const double got = std::exp(z(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(i)) - zmax) / zsum;
        CHECK(std::abs(got - want) <= 1e-6);
      }
    }
  }
  SUBCASE("without virtual prototypes the block is the base block") {
    const Matrix full = visual_logits(x, protos, p);
    CHECK(max_abs(visual_logits(x, protos.topRows(3), p), full.leftCols(3)) == 0.0);
  }
}

TEST_CASE("textual_logits") {
  Rng rng(19);
  const ModelParams p = random_params(rng, 8, 2);
  const Matrix t = random_unit_rows(rng, 4, 8);
  SUBCASE("self match") {
    const Matrix z = textual_logits(t.row(2), t, p);
    Eigen::Index arg = 0;
    z.row(0).maxCoeff(&arg);
    CHECK(arg == 2);
  }
  SUBCASE("identical rows give identical logits") {
    const Matrix same = t.row(0).replicate(4, 1);
    const Matrix z = textual_logits(random_unit_rows(rng, 3, 8), same, p);
    for (Eigen::Index b = 0; b < z.rows(); ++b) CHECK(z.row(b).maxCoeff() - z.row(b).minCoeff() == 0.0);
  }
  SUBCASE("scalar oracle") {
    const Matrix x = random_matrix(rng, 3, 8);
    const Matrix z = textual_logits(x, t, p);
    const auto xs = oracle::to_mat(x), ts = oracle::to_mat(t);
    for (std::size_t b = 0; b < xs.size(); ++b)
      for (std::size_t i = 0; i < ts.size(); ++i)
        CHECK(std::abs(z(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(i)) - oracle::cosine(xs[b], ts[i]) / p.tau_t) <= 1e-6);
  }
}

TEST_CASE("predict") {
  const std::vector<std::uint32_t> both{0, 1};
  SUBCASE("ties go to the lowest id") {
    Matrix z(1, 2);
    z << 3.0, 3.0;
    CHECK(predict(z, both) == std::vector<std::uint32_t>{0});
  }
  SUBCASE("the summed logit decides") {
    Matrix zv(1, 2), zt(1, 2);
    zv << 0.0, 10.0;
    zt << 1.0, 0.0;
    CHECK(predict(zv + zt, both) == std::vector<std::uint32_t>{1});
  }
  SUBCASE("label space restricts the argmax") {
    Matrix z(1, 3);
    z << 9.0, 1.0, 2.0;
    const std::vector<std::uint32_t> tail{1, 2};
    CHECK(predict(z, tail) == std::vector<std::uint32_t>{2});
    CHECK_THROWS_AS(predict(z, std::vector<std::uint32_t>{}), ParameterError);
  }
  SUBCASE("brute force") {
    Rng rng(23);
    const Matrix z = random_matrix(rng, 50, 7);
    std::vector<std::uint32_t> all(7);
    std::iota(all.begin(), all.end(), 0u);
    const auto got = predict(z, all);
    for (Eigen::Index b = 0; b < z.rows(); ++b) {
      std::uint32_t best = 0;
      for (std::uint32_t c = 1; c < 7; ++c)
        if (z(b, c) > z(b, best)) best = c;
      CHECK(got[static_cast<std::size_t>(b)] == best);
    }
  }
}

TEST_CASE("aggregated logits are scale invariant and tie-break to the lowest id") {
  Rng rng(41);
  const ModelParams p = random_params(rng, 8, 2, 0.3);
  PrototypeSet protos;
  protos.split = split_base_new(4, SplitPolicy::first_half);
  protos.textual = random_unit_rows(rng, 4, 8);
  protos.visual = random_unit_rows(rng, 2, 8);
  protos.virtual_protos = random_unit_rows(rng, 2, 8);
  const Matrix x = random_unit_rows(rng, 6, 8);
  const std::vector<std::uint32_t> all{0, 1, 2, 3};
  const HeadOptions opts;
  const auto labels = predict(aggregated_logits(p, opts, protos, x), all);
  CHECK(predict(aggregated_logits(p, opts, protos, 3.7 * x), all) == labels);

  // batched evaluation with batches covering the whole set equals one pass
  const Matrix one = aggregated_logits(p, opts, protos, x);
  const Matrix batched = batched_logits(p, opts, protos, x, 64, 5);
  CHECK(max_abs(one, batched) <= 1e-9);
}

TEST_CASE("zero-shot and visual prototype matching") {
  Rng rng(29);
  const Matrix t = random_unit_rows(rng, 5, 8);
  CHECK(zero_shot_predict(t, t) == std::vector<std::uint32_t>{0, 1, 2, 3, 4});
  CHECK(visual_proto_predict(t.row(3), t) == std::vector<std::uint32_t>{3});

  Matrix basis = Matrix::Identity(3, 3);
  Matrix center(1, 3);
  center << 1, 1, 1;
  CHECK(zero_shot_predict(center, basis) == std::vector<std::uint32_t>{0});
}

TEST_CASE("visual prototypes beat noisy text, clean text beats one-shot means") {
  SynthConfig cfg;
  cfg.num_classes = 10;
  cfg.dim = 64;
  cfg.samples_per_class = 50;
  cfg.text_noise = 0.5;
  cfg.intra_class_spread = 0.1;
  cfg.seed = 12;
  auto data = synth_generate(cfg);
  auto accuracy = [](const std::vector<std::uint32_t>& pred, const FeaturePack& pack) {
    std::size_t hit = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == pack.labels[i];
    return static_cast<double>(hit) / static_cast<double>(pred.size());
  };
  ClassSplit every;
  for (std::uint32_t c = 0; c < 10; ++c) every.base_ids.push_back(c);
  {
    const Matrix v = visual_prototypes(data.train, every);
    const double vis = accuracy(visual_proto_predict(data.test.matrix(), v), data.test);
    const double txt = accuracy(zero_shot_predict(data.test.matrix(), data.text.matrix()), data.test);
    CHECK(vis > txt);
  }
  cfg.text_noise = 0.0;
  cfg.intra_class_spread = 0.25;
  data = synth_generate(cfg);
  {
    const auto one_shot = few_shot_sample(data.train, 1, 3);
    const Matrix v = visual_prototypes(one_shot.pack, every);
    const double vis = accuracy(visual_proto_predict(data.test.matrix(), v), data.test);
    const double txt = accuracy(zero_shot_predict(data.test.matrix(), data.text.matrix()), data.test);
    CHECK(txt >= vis);
  }
}

TEST_CASE("checkpoint round trip") {
  Rng rng(51);
  HeadModel m;
  m.params = random_params(rng, 8, 2);
  m.options.mask = AttentionMask::cross;
  m.prototypes.split = split_base_new(4, SplitPolicy::first_half);
  m.prototypes.textual = random_unit_rows(rng, 4, 8);
  m.prototypes.visual = random_unit_rows(rng, 2, 8);
  m.prototypes.virtual_protos = random_unit_rows(rng, 2, 8);
  m.class_names = candle::testing::names(4);

  const auto bytes = encode_checkpoint(m);
  CHECK(std::equal(bytes.begin(), bytes.begin() + 4, kModelMagic));
  const HeadModel back = decode_checkpoint(bytes);
  CHECK(encode_checkpoint(back) == bytes);
  const HeadModel rounded = round_to_f32(m);
  CHECK(back.params.query == rounded.params.query);
  CHECK(back.prototypes.virtual_protos == rounded.prototypes.virtual_protos);
  CHECK(back.options == m.options);
  CHECK(back.prototypes.split == m.prototypes.split);
  CHECK(back.class_names == m.class_names);
  CHECK(back.params.tau_v == m.params.tau_v);

  auto bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(decode_checkpoint(bad), FormatError);
  auto cut = bytes;
  cut.resize(cut.size() - 3);
  CHECK_THROWS_AS(decode_checkpoint(cut), FormatError);

  const auto path = std::filesystem::temp_directory_path() / "candle_test_model.cndm";
  save_checkpoint(m, path);
  CHECK(encode_checkpoint(load_checkpoint(path)) == bytes);
  std::filesystem::remove(path);
}
