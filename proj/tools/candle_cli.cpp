// candle: command-line front end for the long-tail base-to-new toolkit.
//
//   candle synth    -> train/test/text packs
//   candle prepare  -> imbalanced or few-shot training pack + sampling manifest
//   candle train    -> checkpoint + history.jsonl
//   candle eval     -> report.json (base-to-new or transfer)
//   candle ablate   -> paired full/ablated reports
//   candle gradcheck
//
// Exit codes: 0 ok, 2 usage, 3 validation/format/io, 4 numerical.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "candle/checkpoint.hpp"
#include "candle/errors.hpp"
#include "candle/eval.hpp"
#include "candle/feature_pack.hpp"
#include "candle/parallel.hpp"
#include "candle/sampling.hpp"
#include "candle/synth.hpp"
#include "candle/training.hpp"
#include "json.hpp"

#ifndef CANDLE_VERSION
#define CANDLE_VERSION "0.0.0"
#endif

namespace fs = std::filesystem;
using nlohmann::ordered_json;
using namespace candle;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitNumerical = 4;

// Collects what a run did; written once at the end.
struct Manifest {
  ordered_json j;
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();

  Manifest(const std::string& subcommand, int argc, char** argv) {
    j["subcommand"] = subcommand;
    j["version"] = CANDLE_VERSION;
    std::vector<std::string> args(argv, argv + argc);
    j["argv"] = args;
    j["flags"] = ordered_json::object();
    j["seeds"] = ordered_json::object();
    j["inputs"] = ordered_json::object();
    j["outputs"] = ordered_json::object();
  }

  void finish(const std::optional<fs::path>& dir) {
    const auto elapsed = std::chrono::steady_clock::now() - start;
    j["threads"] = thread_limit();
    j["duration_s"] = std::chrono::duration<double>(elapsed).count();
    if (dir) {
      const auto path = *dir / (j["subcommand"].get<std::string>() + ".manifest.json");
      std::ofstream out(path);
      if (!out) throw IoError("cannot write " + path.string());
      out << j.dump(2) << '\n';
    } else {
      std::cerr << j.dump() << '\n';
    }
  }
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("short write to " + path.string());
}

ordered_json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return ordered_json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(0, path.string() + ": " + e.what());
  }
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

std::vector<std::uint32_t> parse_ids(const std::string& s) {
  std::vector<std::uint32_t> ids;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (tok.empty()) continue;
    try {
      std::size_t used = 0;
      const auto v = std::stoul(tok, &used);
      if (used != tok.size()) throw std::invalid_argument(tok);
      ids.push_back(static_cast<std::uint32_t>(v));
    } catch (const std::logic_error&) {
      throw ParameterError("bad class id '" + tok + "'");
    }
  }
  return ids;
}

std::string histogram_string(const std::vector<std::size_t>& h) {
  std::string s;
  for (std::size_t i = 0; i < h.size(); ++i) s += (i ? "," : "") + std::to_string(h[i]);
  return s;
}

// ---- shared training flags ------------------------------------------------

struct TrainFlags {
  TrainConfig cfg;
  std::string loss = "cla";
  std::string mask = "none";
  std::string virtual_init = "text";
  bool no_attention = false;
  bool no_virtual = false;
  bool tau_grid = false;

  void add(CLI::App* app) {
    app->add_option("--epochs", cfg.epochs, "training epochs")->capture_default_str();
    app->add_option("--lr", cfg.learning_rate, "learning rate")->capture_default_str();
    app->add_option("--batch", cfg.batch_size, "mini-batch size")->capture_default_str();
    app->add_option("--wd", cfg.weight_decay, "weight decay")->capture_default_str();
    app->add_option("--momentum", cfg.momentum, "SGD momentum")->capture_default_str();
    app->add_option("--tau-t", cfg.tau_t, "image-text temperature")->capture_default_str();
    auto* tv = app->add_option("--tau-v", cfg.tau_v, "image-image temperature")->capture_default_str();
    app->add_flag("--tau-v-grid", tau_grid, "select tau_v from {0.005,0.01,0.02,0.05,0.1} on held-out base data")
        ->excludes(tv);
    app->add_option("--heads", cfg.heads, "attention heads")->capture_default_str();
    app->add_option("--loss", loss, "cla | ce")->check(CLI::IsMember({"cla", "ce"}))->capture_default_str();
    app->add_flag("--no-attention", no_attention, "drop the cross-modal attention");
    app->add_flag("--no-virtual", no_virtual, "drop virtual prototypes");
    app->add_option("--mask", mask, "none | mask_within_visual | mask_within_text | mask_cross")
        ->check(CLI::IsMember({"none", "mask_within_visual", "mask_within_text", "mask_cross"}))
        ->capture_default_str();
    app->add_option("--virtual-sigma", cfg.virtual_sigma, "virtual prototype init jitter")->capture_default_str();
    app->add_option("--virtual-init", virtual_init, "text | random")
        ->check(CLI::IsMember({"text", "random"}))
        ->capture_default_str();
  }

  TrainConfig resolve(std::uint64_t seed) const {
    TrainConfig c = cfg;
    c.seed = seed;
    c.loss = loss_kind_from_string(loss);
    c.mask = attention_mask_from_string(mask);
    c.virtual_init = virtual_init == "random" ? VirtualInit::random : VirtualInit::text;
    c.use_attention = !no_attention;
    c.use_virtual = !no_virtual;
    c.validate();
    return c;
  }
};

ClassSplit load_split(const std::optional<std::string>& split_path, std::size_t num_classes) {
  if (split_path) {
    auto split = split_from_manifest(read_json(*split_path));
    split.validate(num_classes);
    return split;
  }
  return split_base_new(num_classes, SplitPolicy::first_half);
}

void emit(const ordered_json& j, bool as_json) {
  if (as_json) std::cout << j.dump(2) << '\n';
}

// ---- subcommands -----------------------------------------------------------

struct SynthArgs {
  SynthConfig cfg;
  std::string out;
  bool json = false;
};

int run_synth(const SynthArgs& a, Manifest& m) {
  a.cfg.validate();
  const fs::path dir = a.out;
  ensure_dir(dir);
  const auto data = synth_generate(a.cfg);
  write_pack_file(data.train, dir / "train.cndp");
  write_pack_file(data.test, dir / "test.cndp");
  write_pack_file(data.text, dir / "text.cndp");
  m.j["flags"] = {{"classes", a.cfg.num_classes},   {"dim", a.cfg.dim},
                  {"per_class", a.cfg.samples_per_class}, {"test_per_class", a.cfg.test_per_class},
                  {"text_noise", a.cfg.text_noise},  {"spread", a.cfg.intra_class_spread}};
  m.j["seeds"]["seed"] = a.cfg.seed;
  m.j["outputs"] = {{"train", (dir / "train.cndp").string()},
                    {"test", (dir / "test.cndp").string()},
                    {"text", (dir / "text.cndp").string()}};
  m.finish(dir);
  emit(m.j, a.json);
  return 0;
}

struct PrepareArgs {
  std::string in;
  std::string out;
  double imbalance = 1.0;
  std::size_t max_per_class = 100;
  std::optional<std::size_t> shots;
  std::string split_policy = "first_half";
  std::string base_ids;
  std::string head_order = "index";
  std::uint64_t seed = 0;
  bool json = false;
};

int run_prepare(const PrepareArgs& a, Manifest& m) {
  const auto pack = read_pack_file(a.in);
  const auto k = pack.num_classes();
  ClassSplit split;
  if (a.split_policy == "explicit") {
    if (a.base_ids.empty()) throw ParameterError("--split-policy explicit needs --base-ids");
    split = split_base_new(k, SplitPolicy::explicit_list, parse_ids(a.base_ids));
  } else {
    split = split_base_new(k, SplitPolicy::first_half);
  }

  SampleResult result;
  std::string policy;
  if (a.shots) {
    if (*a.shots == 0) throw ParameterError("--shots must be >= 1");
    result = few_shot_sample(pack, *a.shots, a.seed, split.base_ids);
    policy = "few_shot:" + std::to_string(*a.shots);
  } else {
    const auto profile = exp_decay_counts(split.base_ids.size(), a.max_per_class, a.imbalance);
    const auto order = a.head_order == "random" ? HeadOrder::random : HeadOrder::index;
    const auto budgets = assign_budgets(profile, split, k, order, a.seed);
    result = subsample(pack, budgets, split, a.seed);
    std::ostringstream p;
    p << "exp_decay:ratio=" << a.imbalance << ",max=" << a.max_per_class << ",order=" << a.head_order;
    policy = p.str();
  }

  const fs::path dir = a.out;
  ensure_dir(dir);
  write_pack_file(result.pack, dir / "train.cndp");
  write_text(dir / "sampling.json", sampling_manifest(result, split, policy, a.seed).dump(2) + "\n");

  const auto hist = result.pack.histogram();
  m.j["flags"] = {{"imbalance", a.imbalance}, {"max_per_class", a.max_per_class},
                  {"shots", a.shots ? ordered_json(*a.shots) : ordered_json(nullptr)},
                  {"split_policy", a.split_policy}, {"base_ids", split.base_ids}, {"head_order", a.head_order}};
  m.j["seeds"]["seed"] = a.seed;
  m.j["inputs"]["pack"] = a.in;
  m.j["outputs"] = {{"train", (dir / "train.cndp").string()}, {"sampling", (dir / "sampling.json").string()}};
  m.j["histogram"] = hist;
  m.j["count"] = result.pack.count();
  m.finish(dir);
  if (!a.json) std::cout << "histogram " << histogram_string(hist) << '\n';
  emit(m.j, a.json);
  return 0;
}

struct TrainArgs {
  TrainFlags flags;
  std::string train;
  std::string text;
  std::optional<std::string> split;
  std::string out;
  std::uint64_t seed = 0;
  bool json = false;
};

int run_train(const TrainArgs& a, Manifest& m) {
  TrainConfig cfg = a.flags.resolve(a.seed);
  const auto train_pack = read_pack_file(a.train);
  const auto text = read_pack_file(a.text);
  if (text.kind != PackKind::text) throw ValidationError("kind", a.text + " is not a text pack");
  const auto split = load_split(a.split, text.num_classes());

  ordered_json search = nullptr;
  if (a.flags.tau_grid) {
    const auto s = select_tau_v(train_pack, text, split, cfg);
    cfg.tau_v = s.selected;
    search = ordered_json::object();
    search["grid"] = kTauVGrid;
    search["selected"] = s.selected;
    ordered_json scores = ordered_json::array();
    for (const auto& [tau, acc] : s.scores) scores.push_back({{"tau_v", tau}, {"val_acc", acc}});
    search["scores"] = scores;
  }
  const auto result = train_from_packs(train_pack, text, split, cfg);

  const fs::path dir = a.out;
  ensure_dir(dir);
  save_checkpoint(result.model, dir / "model.cndm");
  std::string history;
  for (const auto& e : result.history) history += to_json(e).dump() + "\n";
  write_text(dir / "history.jsonl", history);

  m.j["flags"] = cfg.to_json();
  m.j["flags"]["tau_v_grid"] = a.flags.tau_grid;
  m.j["seeds"] = {{"seed", cfg.seed},
                  {"init", derive_seed(cfg.seed, SeedStream::init)},
                  {"virtual_protos", derive_seed(cfg.seed, SeedStream::virtual_protos)},
                  {"shuffle", derive_seed(cfg.seed, SeedStream::shuffle)},
                  {"holdout", derive_seed(cfg.seed, SeedStream::holdout)}};
  m.j["inputs"] = {{"train", a.train}, {"text", a.text}, {"split", a.split ? ordered_json(*a.split) : ordered_json(nullptr)}};
  m.j["outputs"] = {{"model", (dir / "model.cndm").string()}, {"history", (dir / "history.jsonl").string()}};
  m.j["tau_v"] = cfg.tau_v;
  m.j["tau_v_search"] = search;
  m.j["final_loss"] = result.history.empty() ? ordered_json(nullptr) : to_json(result.history.back());
  m.finish(dir);
  emit(m.j, a.json);
  return 0;
}

struct EvalArgs {
  std::string model;
  std::string test;
  std::optional<std::string> text;
  std::string protocol = "b2n";
  std::string mode = "separate";
  std::string source = "aggregated";
  std::size_t batch = 128;
  std::uint64_t seed = 0;
  std::optional<std::string> out;
  bool json = false;
  bool csv = false;
};

int run_eval(const EvalArgs& a, Manifest& m) {
  const auto model = load_checkpoint(a.model);
  const auto test = read_pack_file(a.test);
  EvalOptions opts;
  opts.mode = label_space_mode_from_string(a.mode);
  opts.batch_size = a.batch;
  opts.seed = a.seed;
  opts.source = a.source == "textual" ? LogitSource::textual : LogitSource::aggregated;

  EvalReport report;
  if (a.protocol == "transfer") {
    if (!a.text) throw ParameterError("--protocol transfer needs --text (target text pack)");
    report = transfer_eval(model, read_pack_file(*a.text), test, opts);
  } else {
    report = base_to_new_eval(model, test, opts);
  }
  report.config = {{"source", a.source}, {"batch", a.batch}, {"tau_t", model.params.tau_t},
                   {"tau_v", model.params.tau_v}, {"heads", model.params.heads},
                   {"use_attention", model.options.use_attention}, {"use_virtual", model.options.use_virtual},
                   {"mask", to_string(model.options.mask)}};

  const std::string csv = csv_header() + "\n" + csv_row(report) + "\n";
  std::optional<fs::path> dir;
  if (a.out) {
    dir = fs::path(*a.out);
    ensure_dir(*dir);
    write_text(*dir / "report.json", report.to_json().dump(2) + "\n");
    m.j["outputs"]["report"] = (*dir / "report.json").string();
    if (a.csv) {
      write_text(*dir / "report.csv", csv);
      m.j["outputs"]["csv"] = (*dir / "report.csv").string();
    }
  }
  m.j["flags"] = {{"protocol", a.protocol}, {"mode", a.mode}, {"source", a.source}, {"batch", a.batch}};
  m.j["seeds"]["seed"] = a.seed;
  m.j["inputs"] = {{"model", a.model}, {"test", a.test}, {"text", a.text ? ordered_json(*a.text) : ordered_json(nullptr)}};
  m.finish(dir);

  if (a.json) std::cout << report.to_json().dump(2) << '\n';
  if (a.csv) std::cout << csv;
  if (!a.json && !a.csv) {
    std::printf("base %.4f  new %.4f  harmonic %.4f  accuracy %.4f\n", report.base_acc, report.new_acc,
                report.harmonic, report.accuracy);
  }
  return 0;
}

struct AblateArgs {
  TrainFlags flags;
  std::string train;
  std::string text;
  std::string test;
  std::optional<std::string> split;
  std::vector<std::string> suites;
  std::string mode = "separate";
  std::string out;
  std::uint64_t seed = 0;
  bool json = false;
  bool csv = false;
};

int run_ablate(const AblateArgs& a, Manifest& m) {
  const TrainConfig cfg = a.flags.resolve(a.seed);
  BenchmarkData data;
  data.train = read_pack_file(a.train);
  data.text = read_pack_file(a.text);
  data.test = read_pack_file(a.test);
  data.split = load_split(a.split, data.text.num_classes());
  EvalOptions eval;
  eval.mode = label_space_mode_from_string(a.mode);
  eval.seed = a.seed;

  std::vector<AblationSuite> suites;
  for (const auto& s : a.suites) {
    if (s == "all") {
      suites = {AblationSuite::no_attention,       AblationSuite::no_virtual,       AblationSuite::ce_loss,
                AblationSuite::mask_within_visual, AblationSuite::mask_within_text, AblationSuite::mask_cross};
      break;
    }
    suites.push_back(ablation_suite_from_string(s));
  }
  std::span<const double> grid;
  if (a.flags.tau_grid) grid = kTauVGrid;

  ordered_json results = ordered_json::array();
  std::string csv = "suite,variant," + csv_header() + "\n";
  for (auto suite : suites) {
    const auto r = run_ablation(suite, data, cfg, eval, grid);
    results.push_back(r.to_json());
    csv += std::string(to_string(suite)) + ",full," + csv_row(r.full) + "\n";
    csv += std::string(to_string(suite)) + ",ablated," + csv_row(r.ablated) + "\n";
    if (!a.json && !a.csv) {
      std::printf("%-20s dbase %+.4f  dnew %+.4f  dharmonic %+.4f\n", to_string(suite), r.delta_base, r.delta_new,
                  r.delta_harmonic);
    }
  }
  const fs::path dir = a.out;
  ensure_dir(dir);
  write_text(dir / "ablation.json", results.dump(2) + "\n");
  m.j["outputs"]["ablation"] = (dir / "ablation.json").string();
  if (a.csv) {
    write_text(dir / "ablation.csv", csv);
    m.j["outputs"]["csv"] = (dir / "ablation.csv").string();
  }
  m.j["flags"] = cfg.to_json();
  m.j["flags"]["suites"] = a.suites;
  m.j["flags"]["mode"] = a.mode;
  m.j["flags"]["tau_v_grid"] = a.flags.tau_grid;
  m.j["seeds"]["seed"] = a.seed;
  m.j["inputs"] = {{"train", a.train}, {"text", a.text}, {"test", a.test},
                   {"split", a.split ? ordered_json(*a.split) : ordered_json(nullptr)}};
  m.finish(dir);
  if (a.json) std::cout << results.dump(2) << '\n';
  if (a.csv) std::cout << csv;
  return 0;
}

struct GradCheckArgs {
  GradCheckConfig cfg;
  std::string mask = "none";
  std::optional<std::string> corrupt;
  std::uint64_t seed = 0;
  std::optional<std::string> out;
  bool json = false;
};

int run_gradcheck(const GradCheckArgs& a, Manifest& m) {
  GradCheckConfig cfg = a.cfg;
  cfg.mask = attention_mask_from_string(a.mask);
  cfg.corrupt_tensor = a.corrupt;
  const auto report = grad_check(cfg, a.seed);
  std::optional<fs::path> dir;
  if (a.out) {
    dir = fs::path(*a.out);
    ensure_dir(*dir);
    write_text(*dir / "gradcheck.json", report.to_json().dump(2) + "\n");
    m.j["outputs"]["report"] = (*dir / "gradcheck.json").string();
  }
  m.j["flags"] = {{"dim", cfg.dim},   {"heads", cfg.heads}, {"batch", cfg.batch}, {"base", cfg.num_base},
                  {"new", cfg.num_new}, {"eps", cfg.eps},    {"tol", cfg.tolerance}, {"mask", a.mask}};
  m.j["seeds"]["seed"] = a.seed;
  m.j["result"] = report.to_json();
  m.finish(dir);
  if (a.json) {
    std::cout << report.to_json().dump(2) << '\n';
  } else {
    std::printf("max relative error %.3e (%s) tolerance %.1e: %s\n", report.max_rel_error, report.worst_tensor.c_str(),
                cfg.tolerance, report.passed ? "ok" : "FAILED");
  }
  return report.passed ? 0 : kExitNumerical;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"candle: long-tail base-to-new adaptation of frozen image/text features"};
  app.set_version_flag("--version", CANDLE_VERSION);
  app.require_subcommand(1);

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "generate synthetic CLIP-like feature packs");
  s->add_option("--classes", synth.cfg.num_classes, "number of classes (>= 2)")->capture_default_str();
  s->add_option("--dim", synth.cfg.dim, "feature width")->capture_default_str();
  s->add_option("--per-class", synth.cfg.samples_per_class, "train samples per class")->capture_default_str();
  s->add_option("--test-per-class", synth.cfg.test_per_class, "test samples per class (0: same as --per-class)")
      ->capture_default_str();
  s->add_option("--text-noise", synth.cfg.text_noise, "text prototype noise")->capture_default_str();
  s->add_option("--spread", synth.cfg.intra_class_spread, "image spread around class means")->capture_default_str();
  s->add_option("--seed", synth.cfg.seed, "generator seed")->capture_default_str();
  s->add_option("--out", synth.out, "output directory")->required();
  s->add_flag("--json", synth.json, "print the run manifest");

  PrepareArgs prep;
  auto* p = app.add_subcommand("prepare", "draw an imbalanced or few-shot training pack from base classes");
  p->add_option("--in", prep.in, "source image pack")->required();
  p->add_option("--out", prep.out, "output directory")->required();
  auto* imb = p->add_option("--imbalance", prep.imbalance, "head/tail ratio of the exponential decay")->capture_default_str();
  p->add_option("--max-per-class", prep.max_per_class, "head class budget")->capture_default_str();
  p->add_option("--shots", prep.shots, "few-shot: samples per base class")->excludes(imb);
  p->add_option("--split-policy", prep.split_policy, "first_half | explicit")
      ->check(CLI::IsMember({"first_half", "explicit"}))
      ->capture_default_str();
  p->add_option("--base-ids", prep.base_ids, "comma-separated base class ids (explicit policy)");
  p->add_option("--head-order", prep.head_order, "index | random")
      ->check(CLI::IsMember({"index", "random"}))
      ->capture_default_str();
  p->add_option("--seed", prep.seed, "sampling seed")->capture_default_str();
  p->add_flag("--json", prep.json, "print the run manifest");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "train the adaptation head on base classes");
  t->add_option("--train", tr.train, "training image pack")->required();
  t->add_option("--text", tr.text, "text pack (one row per class)")->required();
  t->add_option("--split", tr.split, "sampling.json from prepare (default: first half are base)");
  t->add_option("--out", tr.out, "output directory")->required();
  t->add_option("--seed", tr.seed, "run seed")->capture_default_str();
  t->add_flag("--json", tr.json, "print the run manifest");
  tr.flags.add(t);

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "evaluate a checkpoint");
  e->add_option("--model", ev.model, "checkpoint")->required();
  e->add_option("--test", ev.test, "test image pack")->required();
  e->add_option("--text", ev.text, "target text pack (transfer protocol)");
  e->add_option("--protocol", ev.protocol, "b2n | transfer")->check(CLI::IsMember({"b2n", "transfer"}))->capture_default_str();
  e->add_option("--mode", ev.mode, "separate | joint")->check(CLI::IsMember({"separate", "joint"}))->capture_default_str();
  e->add_option("--source", ev.source, "aggregated | textual")
      ->check(CLI::IsMember({"aggregated", "textual"}))
      ->capture_default_str();
  e->add_option("--batch", ev.batch, "attention sequence size")->capture_default_str();
  e->add_option("--seed", ev.seed, "batching seed")->capture_default_str();
  e->add_option("--out", ev.out, "output directory for report.json");
  e->add_flag("--json", ev.json, "print the report as JSON");
  e->add_flag("--csv", ev.csv, "print the report as CSV");

  AblateArgs ab;
  auto* a = app.add_subcommand("ablate", "train full and ablated heads with shared seeds");
  a->add_option("--train", ab.train, "training image pack")->required();
  a->add_option("--text", ab.text, "text pack")->required();
  a->add_option("--test", ab.test, "test image pack")->required();
  a->add_option("--split", ab.split, "sampling.json from prepare");
  a->add_option("--suite", ab.suites,
                "no_attention | no_virtual | ce_loss | mask_within_visual | mask_within_text | mask_cross | all")
      ->required();
  a->add_option("--mode", ab.mode, "separate | joint")->check(CLI::IsMember({"separate", "joint"}))->capture_default_str();
  a->add_option("--out", ab.out, "output directory")->required();
  a->add_option("--seed", ab.seed, "run seed")->capture_default_str();
  a->add_flag("--json", ab.json, "print results as JSON");
  a->add_flag("--csv", ab.csv, "print results as CSV");
  ab.flags.add(a);

  GradCheckArgs gc;
  auto* g = app.add_subcommand("gradcheck", "compare analytic gradients with central differences");
  g->add_option("--dim", gc.cfg.dim)->capture_default_str();
  g->add_option("--heads", gc.cfg.heads)->capture_default_str();
  g->add_option("--batch", gc.cfg.batch)->capture_default_str();
  g->add_option("--base", gc.cfg.num_base, "base classes")->capture_default_str();
  g->add_option("--new", gc.cfg.num_new, "new classes")->capture_default_str();
  g->add_option("--eps", gc.cfg.eps, "finite-difference step")->capture_default_str();
  g->add_option("--tol", gc.cfg.tolerance, "max relative error")->capture_default_str();
  g->add_option("--tau-t", gc.cfg.tau_t)->capture_default_str();
  g->add_option("--tau-v", gc.cfg.tau_v)->capture_default_str();
  g->add_option("--mask", gc.mask)
      ->check(CLI::IsMember({"none", "mask_within_visual", "mask_within_text", "mask_cross"}))
      ->capture_default_str();
  g->add_option("--corrupt", gc.corrupt, "scale this tensor's analytic gradient by 2 (self-test)");
  g->add_option("--seed", gc.seed)->capture_default_str();
  g->add_option("--out", gc.out, "output directory for gradcheck.json");
  g->add_flag("--json", gc.json, "print the report as JSON");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : kExitUsage;
  }

  const std::string name = app.get_subcommands().front()->get_name();
  Manifest manifest(name, argc, argv);
  try {
    if (*s) return run_synth(synth, manifest);
    if (*p) return run_prepare(prep, manifest);
    if (*t) return run_train(tr, manifest);
    if (*e) return run_eval(ev, manifest);
    if (*a) return run_ablate(ab, manifest);
    if (*g) return run_gradcheck(gc, manifest);
  } catch (const ParameterError& err) {
    std::cerr << "candle " << name << ": " << err.what() << '\n';
    return kExitUsage;
  } catch (const NumericalError& err) {
    std::cerr << "candle " << name << ": numerical failure: " << err.what() << '\n';
    return kExitNumerical;
  } catch (const Error& err) {
    std::cerr << "candle " << name << ": " << err.what() << '\n';
    return kExitData;
  }
  return kExitUsage;
}
