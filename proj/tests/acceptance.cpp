// Acceptance suite: one PASS/FAIL line per criterion. Tolerances are fixed here.
// Exit status is nonzero if any criterion fails.

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <string>
#include <vector>

#include "candle/checkpoint.hpp"
#include "candle/errors.hpp"
#include "candle/eval.hpp"
#include "candle/feature_pack.hpp"
#include "candle/rng.hpp"
#include "candle/sampling.hpp"
#include "candle/synth.hpp"
#include "candle/training.hpp"

using namespace candle;
namespace fs = std::filesystem;

namespace {

constexpr double kGradTol = 1e-4;
constexpr double kGradSeconds = 10.0;
constexpr double kClaCeTol = 1e-12;
constexpr int kClaCeDraws = 1000;
constexpr double kAttnTol = 1e-6;
constexpr int kPermutations = 100;
constexpr int kPackRoundTrips = 100;
constexpr double kBenchMargin = 0.03;  // harmonic points over each baseline
constexpr double kBenchSecondsPerSeed = 60.0;
constexpr double kVirtualDrop = 0.01;  // new-class accuracy
const std::vector<std::uint64_t> kSeeds = {1, 2, 3, 4, 5};

int failures = 0;

void report(bool pass, const std::string& name, const std::string& detail) {
  std::printf("%s  %-28s %s\n", pass ? "PASS" : "FAIL", name.c_str(), detail.c_str());
  std::fflush(stdout);
  if (!pass) ++failures;
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Matrix random_matrix(Rng& rng, Eigen::Index r, Eigen::Index c, double scale = 1.0) {
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

Matrix permute_rows(const Matrix& m, const std::vector<std::size_t>& perm) {
  Matrix out(m.rows(), m.cols());
  for (std::size_t i = 0; i < perm.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(perm[i]));
  return out;
}

template <class E>
bool throws(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const E&) {
    return true;
  } catch (...) {
    return false;
  }
  return false;
}

// ---------------------------------------------------------------------------

void gradient_correctness() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto r = grad_check(GradCheckConfig{}, 0);
  const double secs = seconds_since(t0);
  report(r.max_rel_error <= kGradTol && secs < kGradSeconds, "gradient_correctness",
         fmt("max rel error %.3e (%s) <= %.0e, %.2f s < %.0f s", r.max_rel_error, r.worst_tensor.c_str(), kGradTol,
             secs, kGradSeconds));
}

void cla_ce_identity() {
  Rng rng(101);
  double worst = 0.0;
  for (int i = 0; i < kClaCeDraws; ++i) {
    const auto k = static_cast<Eigen::Index>(2 + rng.below(19));
    const auto b = static_cast<Eigen::Index>(1 + rng.below(8));
    const Matrix z = random_matrix(rng, b, k, 1.0 + 20.0 * rng.uniform());
    std::vector<std::uint32_t> y(static_cast<std::size_t>(b));
    for (auto& v : y) v = static_cast<std::uint32_t>(rng.below(static_cast<std::uint64_t>(k)));
    const std::vector<double> lp(static_cast<std::size_t>(k), -std::log(static_cast<double>(k)));
    worst = std::max(worst, std::abs(cla_loss(z, y, lp) - cross_entropy(z, y)));
  }
  report(worst <= kClaCeTol, "cla_ce_identity", fmt("max |cla - ce| %.3e <= %.0e over %d draws", worst, kClaCeTol, kClaCeDraws));
}

void attention_identities() {
  Rng rng(202);
  const Eigen::Index d = 16;
  ModelParams p = init_params(d, 4, 0.01, 0.01, 7);
  p.proj_image = Matrix::Identity(d, d) + 0.2 * random_matrix(rng, d, d);
  p.proj_text = Matrix::Identity(d, d) + 0.2 * random_matrix(rng, d, d);
  p.query = random_matrix(rng, d, d, 0.5);
  p.key = random_matrix(rng, d, d, 0.5);
  p.value = random_matrix(rng, d, d, 0.5);
  p.output = random_matrix(rng, d, d, 0.5);
  const Matrix x = normalize_rows(random_matrix(rng, 8, d));
  const Matrix v = normalize_rows(random_matrix(rng, 4, d));
  const Matrix vh = normalize_rows(random_matrix(rng, 4, d));
  const Matrix t = normalize_rows(random_matrix(rng, 8, d));
  Matrix protos(8, d);
  protos << v, vh;

  const auto base = cross_modal_attention(x, v, vh, t, p, AttentionMask::none);
  double perm_err = 0.0;
  for (int i = 0; i < kPermutations; ++i) {
    const auto px = shuffled_indices(8, rng), pp = shuffled_indices(8, rng), pt = shuffled_indices(8, rng);
    const Matrix pprotos = permute_rows(protos, pp);
    const auto out = cross_modal_attention(permute_rows(x, px), pprotos.topRows(4), pprotos.bottomRows(4),
                                           permute_rows(t, pt), p, AttentionMask::none);
    perm_err = std::max(perm_err, (out.samples - permute_rows(base.samples, px)).cwiseAbs().maxCoeff());
    perm_err = std::max(perm_err, (out.protos - permute_rows(base.protos, pp)).cwiseAbs().maxCoeff());
    perm_err = std::max(perm_err, (out.textual - permute_rows(base.textual, pt)).cwiseAbs().maxCoeff());
  }

  ModelParams zero = p;
  zero.output.setZero();
  const auto z = cross_modal_attention(x, v, vh, t, zero, AttentionMask::none);
  const double text_err = (textual_logits(z.samples, z.textual, zero) - project_logits(x, t, zero)).cwiseAbs().maxCoeff();
  const Matrix vis_ref = cosine_logits(x * zero.proj_image.transpose(), protos * zero.proj_image.transpose(), zero.tau_v);
  const double vis_err = (visual_logits(z.samples, z.protos, zero) - vis_ref).cwiseAbs().maxCoeff();
  const double resid_err = std::max(text_err, vis_err);

  report(perm_err <= kAttnTol && resid_err <= kAttnTol, "attention_identities",
         fmt("permutation max |d| %.3e over %d perms, zero-W_O residual max |d| %.3e (<= %.0e)", perm_err,
             kPermutations, resid_err, kAttnTol));
}

FeaturePack random_pack(Rng& rng) {
  const std::size_t k = 2 + rng.below(12);
  const std::size_t dim = 1 + rng.below(40);
  const std::size_t n = 1 + rng.below(60);
  const bool text = rng.below(4) == 0;
  const bool normalized = rng.below(2) == 0;
  FeaturePack p;
  p.dataset = rng.below(2) ? "synthetic" : "caf\xc3\xa9 \"quoted\"";
  p.split = text ? "text" : "train";
  p.kind = text ? PackKind::text : PackKind::image;
  p.dim = dim;
  for (std::size_t c = 0; c < k; ++c) p.class_names.push_back("class " + std::to_string(c) + (c % 3 ? "" : "\t/x"));
  const std::size_t rows = text ? k : n;
  Matrix m = random_matrix(rng, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(dim));
  if (normalized) m = normalize_rows(m);
  for (Eigen::Index i = 0; i < m.size(); ++i) p.features.push_back(static_cast<float>(m.data()[i]));
  for (std::size_t i = 0; i < rows; ++i) p.labels.push_back(static_cast<std::uint32_t>(text ? i : rng.below(k)));
  p.normalized = normalized;
  if (rng.below(2)) p.seed = rng.next();
  return p;
}

void format_fidelity() {
  Rng rng(303);
  int identical = 0;
  const auto path = fs::temp_directory_path() / "candle_acceptance_pack.cndp";
  for (int i = 0; i < kPackRoundTrips; ++i) {
    const auto pack = random_pack(rng);
    const auto bytes = encode_pack(pack);
    const auto back = decode_pack(bytes);
    write_pack_file(back, path);
    const auto from_file = read_pack_file(path);
    if (back == pack && from_file == pack && encode_pack(from_file) == bytes) ++identical;
  }
  fs::remove(path);

  const auto good = encode_pack(random_pack(rng));
  std::vector<std::string> rejected;
  auto corrupt = [&](const char* name, auto mutate) {
    auto b = good;
    mutate(b);
    if (throws<FormatError>([&] { decode_pack(b); })) rejected.push_back(name);
  };
  corrupt("magic", [](auto& b) { b[1] = 'X'; });
  corrupt("version", [](auto& b) { b[4] = 2; });
  corrupt("header_length", [](auto& b) { b[8] = 0xff; b[9] = 0xff; });
  corrupt("truncated", [](auto& b) { b.resize(b.size() - 1); });
  corrupt("trailing", [](auto& b) { b.push_back(0); });
  corrupt("empty", [](auto& b) { b.clear(); });
  bool magic_offset = false;
  try {
    auto b = good;
    b[0] = 'X';
    decode_pack(b);
  } catch (const FormatError& e) {
    magic_offset = e.offset() == 0;
  }
  const bool pass = identical == kPackRoundTrips && rejected.size() == 6 && magic_offset;
  std::string names;
  for (const auto& r : rejected) names += (names.empty() ? "" : ",") + r;
  report(pass, "format_fidelity",
         fmt("%d/%d byte-identical round trips; FormatError on %s (%zu/6); magic offset 0: %s", identical,
             kPackRoundTrips, names.c_str(), rejected.size(), magic_offset ? "yes" : "no"));
}

void imbalance_construction() {
  const auto prof = exp_decay_counts(10, 100, 100.0);
  const auto& n = prof.counts;
  bool pass = n.size() == 10 && n.front() == 100 && n.back() == 1;
  double worst = 0.0;
  const double q = std::pow(100.0, -1.0 / 9.0);
  for (std::size_t i = 0; pass && i + 1 < n.size(); ++i) {
    pass = pass && n[i + 1] <= n[i];
    worst = std::max(worst, std::abs(static_cast<double>(n[i + 1]) - q * static_cast<double>(n[i])));
  }
  pass = pass && worst <= 1.0;
  std::string counts;
  for (auto c : n) counts += (counts.empty() ? "" : ",") + std::to_string(c);
  report(pass, "imbalance_construction", fmt("counts (%s), max |n[i+1] - q n[i]| %.3f <= 1", counts.c_str(), worst));
}

// ---------------------------------------------------------------------------
// Synthetic benchmark: one full run plus ablations per seed.

struct SeedResult {
  EvalReport candle;
  EvalReport zero_shot;
  EvalReport visual;
  double seconds = 0.0;
  std::vector<std::pair<AblationSuite, EvalReport>> ablated;
};

SynthConfig benchmark_synth(std::uint64_t seed) {
  SynthConfig sc;
  sc.num_classes = 20;
  sc.dim = 64;
  sc.samples_per_class = 100;
  sc.text_noise = 0.3;
  sc.intra_class_spread = 0.25;
  sc.seed = seed;
  return sc;
}

std::vector<SeedResult> run_benchmark() {
  std::vector<SeedResult> out;
  const AblationSuite suites[] = {AblationSuite::no_virtual, AblationSuite::ce_loss, AblationSuite::mask_within_visual,
                                  AblationSuite::mask_within_text, AblationSuite::mask_cross};
  for (auto seed : kSeeds) {
    SeedResult r;
    const auto data = make_benchmark(benchmark_synth(seed), 50.0, 100, seed);
    TrainConfig cfg;
    cfg.seed = seed;
    EvalOptions eval;
    eval.seed = seed;
    const auto t0 = std::chrono::steady_clock::now();
    r.candle = run_base_to_new(data, cfg, eval, kTauVGrid).report;
    r.seconds = seconds_since(t0);
    r.zero_shot = zero_shot_report(data.test, data.text, data.split, eval.mode);
    r.visual = visual_proto_report(data.train, data.test, data.text, data.split, eval.mode);
    for (auto s : suites) r.ablated.emplace_back(s, run_base_to_new(data, ablate(cfg, s), eval, kTauVGrid).report);
    std::printf("  seed %llu: candle b/n/h %.4f/%.4f/%.4f  zero-shot h %.4f  visual-proto h %.4f  (%.1f s)\n",
                static_cast<unsigned long long>(seed), r.candle.base_acc, r.candle.new_acc, r.candle.harmonic,
                r.zero_shot.harmonic, r.visual.harmonic, r.seconds);
    out.push_back(std::move(r));
  }
  return out;
}

double mean_of(const std::vector<SeedResult>& rs, const std::function<double(const SeedResult&)>& f) {
  double s = 0.0;
  for (const auto& r : rs) s += f(r);
  return s / static_cast<double>(rs.size());
}

const EvalReport& ablated(const SeedResult& r, AblationSuite s) {
  for (const auto& [suite, rep] : r.ablated)
    if (suite == s) return rep;
  throw std::logic_error("missing ablation");
}

void benchmark_criteria(const std::vector<SeedResult>& rs) {
  const double h = mean_of(rs, [](const auto& r) { return r.candle.harmonic; });
  const double zs = mean_of(rs, [](const auto& r) { return r.zero_shot.harmonic; });
  const double vp = mean_of(rs, [](const auto& r) { return r.visual.harmonic; });
  double slowest = 0.0;
  for (const auto& r : rs) slowest = std::max(slowest, r.seconds);
  report(h - zs >= kBenchMargin && h - vp >= kBenchMargin && slowest < kBenchSecondsPerSeed, "synthetic_benchmark",
         fmt("harmonic candle %.4f vs zero-shot %.4f (%+.4f) and visual-proto %.4f (%+.4f), need >= +%.2f; "
             "slowest seed %.1f s < %.0f s",
             h, zs, h - zs, vp, h - vp, kBenchMargin, slowest, kBenchSecondsPerSeed));

  const double dnew = mean_of(rs, [](const auto& r) {
    return ablated(r, AblationSuite::no_virtual).new_acc - r.candle.new_acc;
  });
  report(dnew <= -kVirtualDrop, "virtual_prototype_ablation",
         fmt("mean delta new %+.4f, need <= -%.2f", dnew, kVirtualDrop));

  const double dh = mean_of(rs, [](const auto& r) {
    return ablated(r, AblationSuite::ce_loss).harmonic - r.candle.harmonic;
  });
  report(dh < 0.0, "loss_ablation", fmt("mean delta harmonic (ce - cla) %+.4f, need < 0", dh));

  // combined drop: mean of the base and new deltas
  auto combined = [&](AblationSuite s) {
    return mean_of(rs, [s](const auto& r) {
      const auto& a = ablated(r, s);
      return 0.5 * ((a.base_acc - r.candle.base_acc) + (a.new_acc - r.candle.new_acc));
    });
  };
  const double wv = combined(AblationSuite::mask_within_visual);
  const double wt = combined(AblationSuite::mask_within_text);
  const double cr = combined(AblationSuite::mask_cross);
  report(cr < wv && cr < wt, "mask_ablation",
         fmt("mean combined delta within_visual %+.4f, within_text %+.4f, cross %+.4f; need cross lowest", wv, wt, cr));
}

void prototype_vs_text() {
  auto run = [](double noise) {
    double vp = 0.0, zs = 0.0;
    for (auto seed : kSeeds) {
      SynthConfig sc = benchmark_synth(seed);
      sc.text_noise = noise;
      const auto data = synth_generate(sc);
      const auto shots = few_shot_sample(data.train, 16, seed).pack;
      ClassSplit all;
      for (std::uint32_t c = 0; c < sc.num_classes; ++c) all.base_ids.push_back(c);
      vp += visual_proto_report(shots, data.test, data.text, all, LabelSpaceMode::joint).accuracy;
      zs += zero_shot_report(data.test, data.text, all, LabelSpaceMode::joint).accuracy;
    }
    return std::pair{vp / kSeeds.size(), zs / kSeeds.size()};
  };
  const auto [vp_noisy, zs_noisy] = run(0.5);
  const auto [vp_clean, zs_clean] = run(0.0);
  report(vp_noisy > zs_noisy && zs_clean >= vp_clean, "prototype_vs_text",
         fmt("noise 0.5: visual %.4f > text %.4f; noise 0.0: text %.4f >= visual %.4f", vp_noisy, zs_noisy, zs_clean,
             vp_clean));
}

// ---------------------------------------------------------------------------

int sh(const std::string& cmd) {
  const int status = std::system((cmd + " >/dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void cli_determinism() {
  const fs::path root = fs::temp_directory_path() / "candle_acceptance_cli";
  fs::remove_all(root);
  const std::string bin = CANDLE_CLI_PATH;
  bool ok = true;
  for (const char* run : {"a", "b"}) {
    const std::string d = (root / run).string();
    ok = ok && sh(bin + " synth --classes 20 --dim 64 --per-class 100 --seed 11 --out " + d + "/data") == 0;
    ok = ok && sh(bin + " prepare --in " + d + "/data/train.cndp --imbalance 50 --max-per-class 100 --seed 12 --out " +
                  d + "/prep") == 0;
    ok = ok && sh(bin + " train --train " + d + "/prep/train.cndp --text " + d + "/data/text.cndp --split " + d +
                  "/prep/sampling.json --tau-v-grid --seed 13 --out " + d + "/model") == 0;
    ok = ok && sh(bin + " eval --model " + d + "/model/model.cndm --test " + d + "/data/test.cndp --seed 14 --out " +
                  d + "/eval") == 0;
  }
  std::vector<std::string> same, differ;
  for (const char* f : {"data/train.cndp", "prep/train.cndp", "prep/sampling.json", "model/model.cndm",
                        "model/history.jsonl", "eval/report.json"}) {
    const auto a = slurp(root / "a" / f), b = slurp(root / "b" / f);
    (!a.empty() && a == b ? same : differ).push_back(f);
  }
  fs::remove_all(root);
  std::string bad;
  for (const auto& f : differ) bad += " " + f;
  report(ok && differ.empty(), "cli_determinism",
         ok ? fmt("%zu/6 artifacts byte-identical across two runs%s%s", same.size(), differ.empty() ? "" : "; differ:",
                  bad.c_str())
            : std::string("a pipeline step exited nonzero"));
}

}  // namespace

int main() {
  const auto t0 = std::chrono::steady_clock::now();
  gradient_correctness();
  cla_ce_identity();
  attention_identities();
  format_fidelity();
  imbalance_construction();
  const auto rs = run_benchmark();
  benchmark_criteria(rs);
  prototype_vs_text();
  cli_determinism();
  std::printf("%d criteria failed, %.1f s total\n", failures, seconds_since(t0));
  return failures == 0 ? 0 : 1;
}
