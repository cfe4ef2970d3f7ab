// flowharm: synth -> fit-scm -> harmonize / combat -> eval -> density-report.
//
// Exit codes: 0 success, 1 usage, 2 data or schema error, 3 numeric failure.

#include <unistd.h>

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "flowharm/combat.hpp"
#include "flowharm/data.hpp"
#include "flowharm/eval.hpp"
#include "flowharm/harmonize.hpp"
#include "flowharm/scm.hpp"
#include "flowharm/synth.hpp"
#include "flowharm/tensor.hpp"
#include "json.hpp"

#ifndef FLOWHARM_BUILD_ID
#define FLOWHARM_BUILD_ID "unknown"
#endif

namespace fs = std::filesystem;
using nlohmann::json;
using namespace flowharm;

namespace {

constexpr int kUsage = 1, kData = 2, kNumeric = 3;

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data::DataError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw data::DataError("cannot write " + path);
  out << text;
  if (!out) throw data::DataError("write failed: " + path);
}

// Replaces a trailing ".csv" (or appends) to derive sibling file names.
std::string sibling(const std::string& path, const std::string& suffix) {
  const std::string ext = ".csv";
  if (path.size() > ext.size() && path.compare(path.size() - ext.size(), ext.size(), ext) == 0) {
    return path.substr(0, path.size() - ext.size()) + suffix;
  }
  return path + suffix;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

struct Manifest {
  std::string subcommand;
  json config = json::object();
  std::vector<std::string> argv;
  std::vector<std::string> outputs;
  std::optional<std::uint64_t> seed;

  void write(const std::string& path) const {
    json j;
    j["subcommand"] = subcommand;
    j["build_id"] = FLOWHARM_BUILD_ID;
    j["seed"] = seed ? json(*seed) : json(nullptr);
    j["config"] = config;
    j["argv"] = argv;
    std::error_code ec;
    j["cwd"] = fs::current_path(ec).string();
    j["outputs"] = outputs;
    write_text(path, j.dump(1) + "\n");
  }
};

std::size_t resolve_threads(std::size_t t) {
  return t == 0 ? std::max(1u, std::thread::hardware_concurrency()) : t;
}

// ---- synth --------------------------------------------------------------------------

struct SynthArgs {
  std::string preset, out, noise, labels;
  std::size_t n = 0;
  std::uint64_t seed = 0;
};

int run_synth(const SynthArgs& a, Manifest& m) {
  auto spec = synth::preset(a.preset, a.seed);
  const auto g = synth::generate(spec, a.n);
  const std::string noise = a.noise.empty() ? sibling(a.out, ".noise") : a.noise;
  const std::string labels = a.labels.empty() ? sibling(a.out, ".labels.csv") : a.labels;
  data::write_csv(a.out, g.table);
  synth::write_noise(noise, g);
  data::write_labels(labels, "disease", g.table.ids, g.disease);
  m.config = {{"preset", a.preset}, {"n", a.n}, {"seed", a.seed}, {"out", a.out}, {"noise", noise}, {"labels", labels},
              {"generator", json::parse(synth::spec_to_json(spec))}};
  m.outputs = {a.out, noise, labels};
  std::cout << "wrote " << g.table.rows() << " rows (" << spec.sites << " sites, d=" << spec.dim << ") to " << a.out
            << "\n";
  return 0;
}

// ---- fit-scm ------------------------------------------------------------------------

struct FitArgs {
  std::string data, out, flow = "qspline", log;
  std::uint64_t seed = 0;
  std::size_t epochs = 100, batch = 64, sites = 0, hidden = 0;
  double lr = 3e-4, wd = 1e-4;
};

int run_fit(const FitArgs& a, Manifest& m) {
  const auto table = data::read_csv(a.data);
  scm::ScmSpec spec;
  spec.sites = std::max(a.sites, table.site_count());
  spec.dim = table.dim;
  spec.flow = scm::parse_flow_kind(a.flow);
  spec.hidden = a.hidden;
  scm::TrainConfig cfg;
  cfg.epochs = a.epochs;
  cfg.batch_size = a.batch;
  cfg.learning_rate = a.lr;
  cfg.weight_decay = a.wd;
  cfg.seed = a.seed;
  const auto model = scm::ScmModel::fit(table, spec, cfg);
  model.save(a.out);
  const auto& md = model.metadata();
  m.config = {{"data", a.data},     {"out", a.out},       {"flow", scm::to_string(spec.flow)},
              {"seed", a.seed},     {"epochs", a.epochs}, {"batch_size", a.batch},
              {"learning_rate", a.lr}, {"weight_decay", a.wd}, {"sites", spec.sites},
              {"hidden", spec.hidden_width()}};
  m.outputs = {a.out};
  if (!a.log.empty()) {
    std::string csv = "epoch,train_nll,val_log_likelihood\n";
    for (std::size_t e = 0; e < md.epoch_loss.size(); ++e) {
      csv += std::to_string(e + 1) + ',' + data::format_double(md.epoch_loss[e]) + ',' +
             data::format_double(md.epoch_val_ll[e]) + '\n';
    }
    write_text(a.log, csv);
    m.config["log"] = a.log;
    m.outputs.push_back(a.log);
  }
  std::cout << scm::to_string(spec.flow) << ": best validation log-likelihood "
            << data::format_double(md.best_val_log_likelihood) << " at epoch " << md.best_epoch << " of "
            << md.epochs_run << "\n";
  return 0;
}

// ---- harmonize ----------------------------------------------------------------------

struct HarmArgs {
  std::string model, data, out, report;
  std::size_t ref_site = 0, mc = 32;
};

int run_harmonize(const HarmArgs& a, std::size_t threads, Manifest& m) {
  const auto model = scm::ScmModel::load(a.model);
  const auto table = data::read_csv(a.data);
  const auto res = harmonize::run(model, table, {.reference_site = a.ref_site, .mc_samples = a.mc, .threads = threads});
  const std::string report = a.report.empty() ? sibling(a.out, ".report.json") : a.report;
  data::write_csv(a.out, res.table);
  write_text(report, harmonize::report_json(res.report) + "\n");
  m.config = {{"model", a.model}, {"data", a.data}, {"out", a.out}, {"report", report},
              {"ref_site", a.ref_site}, {"mc_samples", a.mc}};
  m.outputs = {a.out, report};
  for (const auto& s : res.report.skipped) std::cerr << "skipped " << s.error << "\n";
  std::cout << "harmonized " << res.report.rows_out << " of " << res.report.rows_in << " rows to site " << a.ref_site
            << "\n";
  return 0;
}

// ---- combat -------------------------------------------------------------------------

struct CombatArgs {
  std::string data, out, params, params_out, report;
};

int run_combat(const CombatArgs& a, Manifest& m) {
  const auto table = data::read_csv(a.data);
  combat::Params p;
  std::string params_out;
  if (!a.params.empty()) {
    p = combat::from_json(read_text(a.params));
  } else {
    p = combat::fit(table);
    params_out = a.params_out.empty() ? sibling(a.out, ".params.json") : a.params_out;
    write_text(params_out, combat::to_json(p) + "\n");
  }
  const auto applied = combat::apply(p, table);
  const std::string report = a.report.empty() ? sibling(a.out, ".report.json") : a.report;
  data::write_csv(a.out, applied.table);
  json rj;
  rj["rows_in"] = table.rows();
  rj["rows_out"] = applied.table.rows();
  rj["rejected"] = json::array();
  for (std::size_t i = 0; i < applied.rejected_rows.size(); ++i) {
    rj["rejected"].push_back({{"row", applied.rejected_rows[i]}, {"error", applied.errors[i]}});
    std::cerr << "rejected " << applied.errors[i] << "\n";
  }
  write_text(report, rj.dump(1) + "\n");
  m.config = {{"data", a.data}, {"out", a.out}, {"report", report}};
  m.outputs = {a.out, report};
  if (!a.params.empty()) {
    m.config["params"] = a.params;
  } else {
    m.config["params_out"] = params_out;
    m.outputs.push_back(params_out);
  }
  std::cout << "adjusted " << applied.table.rows() << " of " << table.rows() << " rows\n";
  return 0;
}

// ---- eval ---------------------------------------------------------------------------

struct EvalArgs {
  std::string task = "age-regression", data, labels, label_name = "disease", out_csv, out_json, source, target;
  std::vector<std::string> variants;
  std::size_t folds = 5, epochs = 60;
  std::uint64_t seed = 0;
};

std::vector<std::size_t> parse_sites(const std::string& s, const char* flag) {
  std::vector<std::size_t> out;
  for (const auto& p : split_list(s)) {
    std::size_t v = 0;
    const auto r = std::from_chars(p.data(), p.data() + p.size(), v);
    if (r.ec != std::errc() || r.ptr != p.data() + p.size()) {
      throw std::invalid_argument(std::string(flag) + ": not a site id list: '" + s + "'");
    }
    out.push_back(v);
  }
  if (out.empty()) throw std::invalid_argument(std::string(flag) + ": empty site list");
  return out;
}

int run_eval(const EvalArgs& a, std::size_t threads, Manifest& m) {
  const auto task = eval::parse_task(a.task);
  const auto raw = data::read_csv(a.data);
  std::vector<eval::Variant> variants;
  json vj = json::object();
  // Every variant file is read before any model is trained.
  for (const auto& spec : a.variants) {
    const auto eq = spec.find('=');
    if (eq == std::string::npos || eq == 0 || eq + 1 == spec.size()) {
      throw std::invalid_argument("--variant expects name=path, got '" + spec + "'");
    }
    const std::string name = spec.substr(0, eq), path = spec.substr(eq + 1);
    variants.push_back({name, data::read_csv(path)});
    vj[name] = path;
  }
  if (variants.empty()) variants.push_back({"raw", raw});
  std::vector<double> labels(raw.rows());
  if (task == eval::Task::AgeRegression) {
    labels = raw.age;
  } else {
    if (a.labels.empty()) throw std::invalid_argument("--labels is required for binary-classification");
    const auto l = data::read_labels(a.labels, a.label_name, raw.ids);
    for (std::size_t i = 0; i < l.size(); ++i) labels[i] = l[i];
  }
  eval::Plan plan;
  plan.task = task;
  plan.source_sites = parse_sites(a.source, "--source");
  plan.target_sites = parse_sites(a.target, "--target");
  plan.folds = a.folds;
  plan.seed = a.seed;
  plan.threads = threads;
  plan.mlp.epochs = a.epochs;
  const auto rep = eval::run_plan(plan, raw, labels, variants);
  const std::string out_json = a.out_json.empty() ? sibling(a.out_csv, ".json") : a.out_json;
  write_text(a.out_csv, eval::report_csv(rep));
  write_text(out_json, eval::report_json(rep) + "\n");
  m.config = {{"task", eval::to_string(task)}, {"data", a.data},   {"labels", a.labels},
              {"label_name", a.label_name},    {"variants", vj},   {"source", a.source},
              {"target", a.target},            {"folds", a.folds}, {"epochs", a.epochs},
              {"seed", a.seed},                {"out_csv", a.out_csv}, {"out_json", out_json}};
  m.outputs = {a.out_csv, out_json};
  std::printf("%-8s %-10s %-14s %-8s %-9s %s\n", "role", "study", "variant", "mode", rep.metric.c_str(), "std");
  for (const auto& s : rep.summary) {
    std::printf("%-8s %-10s %-14s %-8s %-9.4f %.4f%s\n", s.role.c_str(), s.study.c_str(), s.variant.c_str(),
                s.mode.c_str(), s.mean, s.stddev, s.suspicious ? "  (beats TarOnly by > 2 std)" : "");
  }
  return 0;
}

// ---- density-report -----------------------------------------------------------------

struct DensityArgs {
  std::string models, data, out;
  std::size_t bins = 50;
};

int run_density(const DensityArgs& a, Manifest& m) {
  const auto table = data::read_csv(a.data);
  json j;
  j["data"] = a.data;
  j["rows"] = table.rows();
  j["models"] = json::array();
  for (const auto& path : split_list(a.models)) {
    const auto model = scm::ScmModel::load(path);
    const auto ll = model.log_likelihood(table);
    std::cout << path << " " << scm::to_string(model.spec().flow) << " mean_log_likelihood "
              << data::format_double(ll.mean) << " rows " << ll.used << " flagged " << ll.flagged.size() << "\n";
    j["models"].push_back({{"path", path},
                           {"flow", scm::to_string(model.spec().flow)},
                           {"mean_log_likelihood", ll.mean},
                           {"mean_sex", ll.mean_sex},
                           {"mean_age", ll.mean_age},
                           {"mean_site", ll.mean_site},
                           {"mean_x", ll.mean_x},
                           {"rows_used", ll.used},
                           {"rows_flagged", ll.flagged.size()}});
  }
  if (j["models"].empty()) throw std::invalid_argument("--models lists no model files");
  // Per-site feature histograms over the pooled range of each feature.
  const std::size_t K = table.site_count();
  json hs = json::array();
  for (std::size_t f = 0; f < table.dim; ++f) {
    double lo = INFINITY, hi = -INFINITY;
    for (std::size_t i = 0; i < table.rows(); ++i) {
      lo = std::min(lo, table.features(i)[f]);
      hi = std::max(hi, table.features(i)[f]);
    }
    std::vector<std::vector<std::size_t>> counts(K, std::vector<std::size_t>(a.bins, 0));
    for (std::size_t i = 0; i < table.rows(); ++i) {
      const double u = hi > lo ? (table.features(i)[f] - lo) / (hi - lo) * static_cast<double>(a.bins) : 0.0;
      const std::size_t b = u <= 0.0 ? 0 : std::min(a.bins - 1, static_cast<std::size_t>(u));
      ++counts[table.acquisition_site(i)][b];
    }
    hs.push_back({{"feature", data::feature_name(f)}, {"lo", lo}, {"hi", hi}, {"per_site", counts}});
  }
  j["histograms"] = hs;
  const std::string text = j.dump(1);
  if (a.out.empty()) {
    std::cout << text << "\n";
  } else {
    write_text(a.out, text + "\n");
    m.outputs = {a.out};
  }
  m.config = {{"models", a.models}, {"data", a.data}, {"out", a.out}, {"bins", a.bins}};
  return 0;
}

int classify(const std::exception& e) {
  if (dynamic_cast<const num::DomainError*>(&e) || dynamic_cast<const num::ShapeError*>(&e)) return kNumeric;
  return kData;
}

int dispatch(int argc, char** argv);

// Re-executes the argument vector recorded in a manifest from its working directory.
int run_replay(const std::string& manifest_path) {
  json j;
  try {
    j = json::parse(read_text(manifest_path));
  } catch (const json::exception& e) {
    throw data::DataError(manifest_path + ": " + e.what());
  }
  if (!j.contains("argv") || !j["argv"].is_array() || j["argv"].empty()) {
    throw data::DataError(manifest_path + ": manifest has no argv");
  }
  std::vector<std::string> args = j["argv"].get<std::vector<std::string>>();
  if (args.size() > 1 && args[1] == "replay") throw data::DataError(manifest_path + ": refusing to replay a replay");
  const std::string cwd = j.value("cwd", "");
  if (!cwd.empty()) fs::current_path(cwd);
  std::vector<char*> ptrs;
  for (auto& s : args) ptrs.push_back(s.data());
  ptrs.push_back(nullptr);
  return dispatch(static_cast<int>(args.size()), ptrs.data());
}

int dispatch(int argc, char** argv) {
  CLI::App app{"flowharm: flow-based causal harmonization of multi-site tabular features"};
  app.require_subcommand(1);
  std::size_t threads = 0;

  const auto add_threads = [&](CLI::App* sub) {
    sub->add_option("--threads", threads, "Worker threads (0 = all cores; 1 = bit-stable)")->capture_default_str();
  };

  SynthArgs sa;
  auto* synth_cmd = app.add_subcommand("synth", "Sample a synthetic multi-site table with stored noises");
  synth_cmd->add_option("--preset", sa.preset, "Generator preset")
      ->required()
      ->check(CLI::IsMember(synth::preset_names()));
  synth_cmd->add_option("--n", sa.n, "Rows")->required()->check(CLI::PositiveNumber);
  synth_cmd->add_option("--seed", sa.seed, "Random seed")->required();
  synth_cmd->add_option("--out", sa.out, "Output CSV")->required();
  synth_cmd->add_option("--noise", sa.noise, "Noise sidecar (default: <out>.noise)");
  synth_cmd->add_option("--labels", sa.labels, "Disease label sidecar (default: <out>.labels.csv)");
  add_threads(synth_cmd);

  FitArgs fa;
  auto* fit_cmd = app.add_subcommand("fit-scm", "Fit the structural causal model by maximum likelihood");
  fit_cmd->add_option("--data", fa.data, "Training CSV")->required();
  fit_cmd->add_option("--flow", fa.flow, "Feature flow: affine | lspline | qspline")->capture_default_str();
  fit_cmd->add_option("--out", fa.out, "Model file")->required();
  fit_cmd->add_option("--seed", fa.seed, "Random seed")->required();
  fit_cmd->add_option("--epochs", fa.epochs, "Epochs")->capture_default_str()->check(CLI::PositiveNumber);
  fit_cmd->add_option("--batch-size", fa.batch, "Batch size")->capture_default_str()->check(CLI::PositiveNumber);
  fit_cmd->add_option("--lr", fa.lr, "Initial Adam learning rate")->capture_default_str()->check(CLI::PositiveNumber);
  fit_cmd->add_option("--weight-decay", fa.wd, "Decoupled weight decay")->capture_default_str();
  fit_cmd->add_option("--sites", fa.sites, "Number of sites K (default: from the data)");
  fit_cmd->add_option("--hidden", fa.hidden, "Conditioner width (default: max(2d, 8))");
  fit_cmd->add_option("--log", fa.log, "Per-epoch training log CSV");
  add_threads(fit_cmd);

  HarmArgs ha;
  auto* harm_cmd = app.add_subcommand("harmonize", "Map every row to its counterfactual at a reference site");
  harm_cmd->add_option("--model", ha.model, "Model file")->required();
  harm_cmd->add_option("--data", ha.data, "Input CSV")->required();
  harm_cmd->add_option("--ref-site", ha.ref_site, "Reference site tau")->required();
  harm_cmd->add_option("--out", ha.out, "Output CSV")->required();
  harm_cmd->add_option("--mc-samples", ha.mc, "Monte Carlo samples")->capture_default_str()->check(CLI::PositiveNumber);
  harm_cmd->add_option("--report", ha.report, "Report JSON (default: <out>.report.json)");
  add_threads(harm_cmd);

  CombatArgs ca;
  auto* combat_cmd = app.add_subcommand("combat", "ComBat location/scale adjustment");
  combat_cmd->add_option("--data", ca.data, "Input CSV")->required();
  combat_cmd->add_option("--out", ca.out, "Adjusted CSV")->required();
  combat_cmd->add_option("--params", ca.params, "Apply these fitted parameters instead of fitting");
  combat_cmd->add_option("--params-out", ca.params_out, "Fitted parameters JSON (default: <out>.params.json)");
  combat_cmd->add_option("--report", ca.report, "Report JSON (default: <out>.report.json)");
  add_threads(combat_cmd);

  EvalArgs ea;
  auto* eval_cmd = app.add_subcommand("eval", "Cross-site MLP evaluation over feature variants");
  eval_cmd->add_option("--task", ea.task, "age-regression | binary-classification")->capture_default_str();
  eval_cmd->add_option("--data", ea.data, "Raw CSV defining subjects, sites and ages")->required();
  eval_cmd->add_option("--labels", ea.labels, "Label sidecar for classification");
  eval_cmd->add_option("--label-name", ea.label_name, "Label column name")->capture_default_str();
  eval_cmd->add_option("--variant", ea.variants, "Feature variant as name=path (repeatable)");
  eval_cmd->add_option("--source", ea.source, "Source site ids, comma separated")->required();
  eval_cmd->add_option("--target", ea.target, "Target site ids, comma separated")->required();
  eval_cmd->add_option("--folds", ea.folds, "Folds")->capture_default_str()->check(CLI::Range(2, 100));
  eval_cmd->add_option("--epochs", ea.epochs, "MLP epochs")->capture_default_str()->check(CLI::PositiveNumber);
  eval_cmd->add_option("--seed", ea.seed, "Random seed")->required();
  eval_cmd->add_option("--out", ea.out_csv, "Report CSV")->required();
  eval_cmd->add_option("--out-json", ea.out_json, "Report JSON (default: <out>.json)");
  add_threads(eval_cmd);

  DensityArgs da;
  auto* density_cmd = app.add_subcommand("density-report", "Mean log-likelihood per model and per-site histograms");
  density_cmd->add_option("--models", da.models, "Comma-separated model files")->required();
  density_cmd->add_option("--data", da.data, "Held-out CSV")->required();
  density_cmd->add_option("--out", da.out, "Report JSON (default: print to stdout)");
  density_cmd->add_option("--bins", da.bins, "Histogram bins")->capture_default_str()->check(CLI::PositiveNumber);
  add_threads(density_cmd);

  std::string manifest_path;
  auto* replay_cmd = app.add_subcommand("replay", "Re-run the command recorded in a manifest");
  replay_cmd->add_option("--manifest", manifest_path, "Manifest JSON")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  Manifest m;
  for (int i = 0; i < argc; ++i) m.argv.emplace_back(argv[i]);
  threads = resolve_threads(threads);
  std::string manifest_out;
  int rc = 0;
  if (*synth_cmd) {
    m.subcommand = "synth";
    m.seed = sa.seed;
    rc = run_synth(sa, m);
    manifest_out = sibling(sa.out, ".manifest.json");
  } else if (*fit_cmd) {
    m.subcommand = "fit-scm";
    m.seed = fa.seed;
    rc = run_fit(fa, m);
    manifest_out = fa.out + ".manifest.json";
  } else if (*harm_cmd) {
    m.subcommand = "harmonize";
    rc = run_harmonize(ha, threads, m);
    manifest_out = sibling(ha.out, ".manifest.json");
  } else if (*combat_cmd) {
    m.subcommand = "combat";
    rc = run_combat(ca, m);
    manifest_out = sibling(ca.out, ".manifest.json");
  } else if (*eval_cmd) {
    m.subcommand = "eval";
    m.seed = ea.seed;
    rc = run_eval(ea, threads, m);
    manifest_out = sibling(ea.out_csv, ".manifest.json");
  } else if (*density_cmd) {
    m.subcommand = "density-report";
    rc = run_density(da, m);
    if (!da.out.empty()) manifest_out = da.out + ".manifest.json";
  } else if (*replay_cmd) {
    return run_replay(manifest_path);
  }
  m.config["threads"] = threads;
  if (!manifest_out.empty()) m.write(manifest_out);
  return rc;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return dispatch(argc, argv);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return classify(e);
  }
}
