#include "upcsc/analysis.hpp"
#include "upcsc/harness.hpp"
#include "upcsc/io.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

namespace fs = std::filesystem;
using namespace upcsc;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

struct CommonFlags {
  std::string config_path;
  std::vector<std::string> methods;
  std::optional<std::uint64_t> seed;
  std::optional<double> tau;
  std::optional<std::size_t> labels_per_class;
  std::string out_dir = "out";
};

void add_common(CLI::App* cmd, CommonFlags& f, bool multi_method) {
  cmd->add_option("--config", f.config_path, "Config file of key = value lines");
  if (multi_method)
    cmd->add_option("--method", f.methods, "Method (repeatable); the first is the paired baseline");
  else
    cmd->add_option("--method", f.methods, "Method name")->expected(1);
  cmd->add_option("--seed", f.seed, "Seed (replaces the configured seed list)");
  cmd->add_option("--tau", f.tau, "Confidence threshold");
  cmd->add_option("--labels-per-class", f.labels_per_class, "Labeled samples per class and domain");
  cmd->add_option("--out", f.out_dir, "Output directory");
}

TrainConfig resolve_config(const CommonFlags& f) {
  TrainConfig cfg = f.config_path.empty() ? TrainConfig{} : load_config(f.config_path);
  if (!f.methods.empty()) cfg.method = parse_method(f.methods.front());
  if (f.seed) cfg.seeds = {*f.seed};
  if (f.tau) cfg.tau = *f.tau;
  if (f.labels_per_class) cfg.benchmark.labels_per_class = *f.labels_per_class;
  cfg.validate();
  return cfg;
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  return out;
}

std::string model_file(const RunFragment& run) {
  std::string name = method_name(run.method) + "_t" + std::to_string(run.target) + "_s" + std::to_string(run.seed) + ".upcs";
  for (char& ch : name)
    if (ch == '+') ch = '-';
  return name;
}

int cmd_train(const CommonFlags& f, std::size_t target) {
  const TrainConfig cfg = resolve_config(f);
  if (target >= cfg.benchmark.num_domains) throw ConfigError("--target out of range");
  const fs::path out(f.out_dir);
  fs::create_directories(out);
  const DomainBenchmark bench = generate_benchmark(cfg.benchmark);
  RunResult result;
  result.runs.push_back(train_one(cfg, bench, target, cfg.seeds.front()));
  const RunFragment& run = result.runs.front();
  {
    auto cfg_out = open_out(out / "config.cfg");
    cfg_out << format_config(cfg);
  }
  {
    auto m = open_out(out / "metrics.csv");
    write_metrics_csv(result, m);
  }
  {
    auto r = open_out(out / "results.csv");
    write_results_csv(result, r);
  }
  save_model(run.final_state, (out / model_file(run)).string());
  if (cfg.log_confidences) {
    auto c = open_out(out / "confidences.csv");
    write_confidence_csv(run, c);
    export_benchmark(bench, (out / "data").string());
  }
  for (const auto& e : run.epochs)
    std::cout << "epoch " << e.epoch << "  l_total " << e.mean_loss.l_total << "  target_acc " << e.target_accuracy
              << "  source_unl_acc " << e.source_unlabeled_accuracy << "  uus " << e.uus_rate << '\n';
  std::cout << run.run_id() << " final target accuracy " << run.final_accuracy << '\n';
  return 0;
}

int cmd_protocol(const CommonFlags& f, std::size_t jobs) {
  TrainConfig cfg = resolve_config(f);
  if (jobs > 0) cfg.jobs = jobs;
  std::vector<Method> methods;
  for (const auto& name : f.methods) methods.push_back(parse_method(name));
  if (methods.empty()) methods.push_back(cfg.method);

  const fs::path out(f.out_dir);
  fs::create_directories(out / "models");
  const RunResult result = run_protocol(cfg, methods, [](const RunFragment& run) {
    std::cerr << run.run_id() << " final " << run.final_accuracy << '\n';
  });
  {
    auto m = open_out(out / "metrics.csv");
    write_metrics_csv(result, m);
  }
  {
    auto r = open_out(out / "results.csv");
    write_results_csv(result, r);
  }
  for (const auto& run : result.runs) save_model(run.final_state, (out / "models" / model_file(run)).string());
  if (methods.size() > 1) {
    auto p = open_out(out / "paired.csv");
    bool header = true;
    for (std::size_t k = 1; k < methods.size(); ++k) {
      std::ostringstream block;
      write_paired_csv(paired_deltas(result, methods[0], methods[k]), methods[0], methods[k], block);
      std::string text = block.str();
      if (!header) text = text.substr(text.find('\n') + 1);
      p << text;
      header = false;
    }
  }
  for (const auto& s : result.summaries)
    std::cout << method_name(s.method) << ": " << s.mean << " +- " << s.stddev << " over " << s.runs << " runs\n";
  return 0;
}

int cmd_stats(const std::string& confidences, const std::string& data_dir, double tau, const std::string& out_dir,
              std::optional<std::size_t> epoch) {
  const analysis::ConfidenceLog full = analysis::read_confidence_log(confidences, data_dir);
  if (full.empty()) throw DataError("confidence log is empty");
  const fs::path out(out_dir);
  fs::create_directories(out);
  analysis::write_stats_csv(analysis::summarize(full, tau), (out / "stats.csv").string());
  const analysis::ConfidenceLog scoped = epoch ? analysis::filter(full, *epoch, std::nullopt) : full;
  const auto hist = analysis::confusing_class_histogram(scoped, tau);
  analysis::write_histogram_csv(hist, (out / "histogram.csv").string());
  if (!scoped.empty()) {
    std::cout << "uus_rate " << analysis::uus_rate(scoped, tau);
    if (auto inc = analysis::inclusion_rate(scoped, tau)) std::cout << "  inclusion_rate " << *inc;
    if (auto ch = analysis::chance_inclusion(scoped, tau)) std::cout << "  chance " << *ch;
    std::cout << '\n';
  }
  return 0;
}

int cmd_gradcheck(std::size_t draws, std::uint64_t seed) {
  const GradcheckReport report = run_gradcheck(draws, seed);
  double worst = 0.0;
  for (const auto& t : report.terms) {
    std::cout << t.name << ": max relative error " << t.max_relative_error << " over " << t.draws << " draws ("
              << t.nontrivial_draws << " nonzero)\n";
    worst = std::max(worst, t.max_relative_error);
  }
  std::cout << "max relative error " << worst << (report.passed() ? " < " : " >= ") << report.tolerance << '\n';
  return report.passed() ? 0 : kExitRuntime;
}

int cmd_gen_data(const CommonFlags& f) {
  const TrainConfig cfg = resolve_config(f);
  const DomainBenchmark bench = generate_benchmark(cfg.benchmark);
  export_benchmark(bench, f.out_dir);
  std::cout << "wrote " << bench.num_domains() << " domains to " << f.out_dir << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Semi-supervised domain generalization lab: UPC / SC on a FixMatch baseline"};
  app.require_subcommand(1);

  CommonFlags train_flags, protocol_flags, gen_flags;
  std::size_t target = 0;
  std::size_t jobs = 0;

  auto* train = app.add_subcommand("train", "Train one leave-one-domain-out run");
  add_common(train, train_flags, false);
  train->add_option("--target", target, "Held-out target domain");

  auto* protocol = app.add_subcommand("protocol", "Full sweep: every domain as target, every seed");
  add_common(protocol, protocol_flags, true);
  protocol->add_option("--jobs", jobs, "Parallel runs");

  std::string confidences, data_dir, stats_out = "stats";
  double stats_tau = 0.95;
  std::optional<std::size_t> stats_epoch;
  auto* stats = app.add_subcommand("stats", "Unconfident-sample statistics from a confidence log");
  stats->add_option("--confidences", confidences, "confidences.csv written by train")->required();
  stats->add_option("--data", data_dir, "Benchmark export holding the truth sidecars")->required();
  stats->add_option("--tau", stats_tau, "Confidence threshold");
  stats->add_option("--epoch", stats_epoch, "Restrict the histogram to one epoch");
  stats->add_option("--out", stats_out, "Output directory");

  std::size_t draws = 20;
  std::uint64_t gc_seed = 0;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of every loss gradient");
  gradcheck->add_option("--draws", draws, "Random (state, batch) draws");
  gradcheck->add_option("--seed", gc_seed, "Seed");

  auto* gen = app.add_subcommand("gen-data", "Export the synthetic benchmark as CSV");
  add_common(gen, gen_flags, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (*train) return cmd_train(train_flags, target);
    if (*protocol) return cmd_protocol(protocol_flags, jobs);
    if (*stats) return cmd_stats(confidences, data_dir, stats_tau, stats_out, stats_epoch);
    if (*gradcheck) return cmd_gradcheck(draws, gc_seed);
    if (*gen) return cmd_gen_data(gen_flags);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}
