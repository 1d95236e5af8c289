#include "upcsc/harness.hpp"

#include "upcsc/io.hpp"
#include "upcsc/random.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <mutex>
#include <ostream>
#include <sstream>
#include <thread>

namespace upcsc {

namespace {

constexpr std::uint64_t kInitStream = 1;
constexpr std::uint64_t kBatchStream = 2;
constexpr std::uint64_t kAugmentStream = 3;

std::vector<std::size_t> parse_size_list(const std::string& text) {
  std::vector<std::size_t> out;
  for (const auto& f : io::split(text, ',')) {
    const std::string t = io::trim(f);
    if (t.empty()) continue;
    const long long v = io::parse_int(t);
    if (v < 0) throw ConfigError("negative value in list '" + text + "'");
    out.push_back(static_cast<std::size_t>(v));
  }
  return out;
}

bool parse_bool(const std::string& text) {
  if (text == "true" || text == "1" || text == "yes") return true;
  if (text == "false" || text == "0" || text == "no") return false;
  throw ConfigError("not a boolean: '" + text + "'");
}

template <typename T>
std::string join(const std::vector<T>& values) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) out += (i ? "," : "") + std::to_string(values[i]);
  return out;
}

}  // namespace

ModelDims TrainConfig::model_dims() const {
  ModelDims d;
  d.input_dim = benchmark.latent_dim;
  d.hidden_dims = hidden_dims;
  d.feature_dim = feature_dim;
  d.num_classes = benchmark.num_classes;
  return d;
}

void TrainConfig::validate() const {
  benchmark.validate();
  model_dims().validate();
  const double chance = 1.0 / static_cast<double>(benchmark.num_classes);
  if (!(tau > chance && tau < 1.0)) throw ConfigError("tau must lie in (1/C, 1)");
  if (epochs < 1) throw ConfigError("epochs must be at least 1");
  if (steps_per_epoch < 1) throw ConfigError("steps_per_epoch must be at least 1");
  if (!(rates.backbone > 0.0 && rates.classifier > 0.0 && rates.projector > 0.0))
    throw ConfigError("learning rates must be positive");
  if (batch.labeled == 0) throw ConfigError("labeled_per_domain must be positive");
  if (batch.unlabeled == 0 && method != Method::SupervisedOnly)
    throw ConfigError("unlabeled_per_domain must be positive for semi-supervised methods");
  if (augment.weak_sigma < 0.0 || augment.strong_sigma < 0.0 || augment.strong_dropout < 0.0 || augment.strong_dropout > 1.0)
    throw ConfigError("invalid augmentation parameters");
  if (seeds.empty()) throw ConfigError("at least one seed is required");
  if (jobs == 0) throw ConfigError("jobs must be at least 1");
}

TrainConfig apply_config(TrainConfig cfg, const std::map<std::string, std::string>& kv) {
  auto size = [](const std::string& v) {
    const long long x = io::parse_int(v);
    if (x < 0) throw ConfigError("negative count '" + v + "'");
    return static_cast<std::size_t>(x);
  };
  for (const auto& [key, value] : kv) {
    try {
      BenchmarkConfig& b = cfg.benchmark;
      if (key == "num_domains") b.num_domains = size(value);
      else if (key == "num_classes") b.num_classes = size(value);
      else if (key == "latent_dim") b.latent_dim = size(value);
      else if (key == "samples_per_class_per_domain") b.samples_per_class_per_domain = size(value);
      else if (key == "labels_per_class") b.labels_per_class = size(value);
      else if (key == "class_separation") b.class_separation = io::parse_double(value);
      else if (key == "noise_sigma") b.noise_sigma = io::parse_double(value);
      else if (key == "rotation_strength") b.rotation_strength = io::parse_double(value);
      else if (key == "scale_strength") b.scale_strength = io::parse_double(value);
      else if (key == "shift_sigma") b.shift_sigma = io::parse_double(value);
      else if (key == "test_fraction") b.test_fraction = io::parse_double(value);
      else if (key == "master_seed") b.master_seed = static_cast<std::uint64_t>(io::parse_int(value));
      else if (key == "hidden_dims") cfg.hidden_dims = parse_size_list(value);
      else if (key == "feature_dim") cfg.feature_dim = size(value);
      else if (key == "method") cfg.method = parse_method(value);
      else if (key == "tau") cfg.tau = io::parse_double(value);
      else if (key == "epochs") cfg.epochs = size(value);
      else if (key == "steps_per_epoch") cfg.steps_per_epoch = size(value);
      else if (key == "lr_backbone") cfg.rates.backbone = io::parse_double(value);
      else if (key == "lr_classifier") cfg.rates.classifier = io::parse_double(value);
      else if (key == "lr_projector") cfg.rates.projector = io::parse_double(value);
      else if (key == "labeled_per_domain") cfg.batch.labeled = size(value);
      else if (key == "unlabeled_per_domain") cfg.batch.unlabeled = size(value);
      else if (key == "weak_sigma") cfg.augment.weak_sigma = io::parse_double(value);
      else if (key == "strong_sigma") cfg.augment.strong_sigma = io::parse_double(value);
      else if (key == "strong_dropout") cfg.augment.strong_dropout = io::parse_double(value);
      else if (key == "seeds") {
        cfg.seeds.clear();
        for (std::size_t s : parse_size_list(value)) cfg.seeds.push_back(s);
      } else if (key == "log_confidences") cfg.log_confidences = parse_bool(value);
      else if (key == "jobs") cfg.jobs = size(value);
      else throw ConfigError("unknown config key '" + key + "'");
    } catch (const DataError& e) {
      throw ConfigError("config key '" + key + "': " + e.what());
    }
  }
  return cfg;
}

TrainConfig load_config(const std::string& path) { return apply_config(TrainConfig{}, io::read_key_values(path)); }

std::string format_config(const TrainConfig& cfg) {
  const BenchmarkConfig& b = cfg.benchmark;
  std::ostringstream out;
  out << "num_domains = " << b.num_domains << "\nnum_classes = " << b.num_classes << "\nlatent_dim = " << b.latent_dim
      << "\nsamples_per_class_per_domain = " << b.samples_per_class_per_domain << "\nlabels_per_class = " << b.labels_per_class
      << "\nclass_separation = " << io::format_double(b.class_separation) << "\nnoise_sigma = " << io::format_double(b.noise_sigma)
      << "\nrotation_strength = " << io::format_double(b.rotation_strength)
      << "\nscale_strength = " << io::format_double(b.scale_strength) << "\nshift_sigma = " << io::format_double(b.shift_sigma)
      << "\ntest_fraction = " << io::format_double(b.test_fraction) << "\nmaster_seed = " << b.master_seed
      << "\nhidden_dims = " << join(cfg.hidden_dims) << "\nfeature_dim = " << cfg.feature_dim
      << "\nmethod = " << method_name(cfg.method) << "\ntau = " << io::format_double(cfg.tau) << "\nepochs = " << cfg.epochs
      << "\nsteps_per_epoch = " << cfg.steps_per_epoch << "\nlr_backbone = " << io::format_double(cfg.rates.backbone)
      << "\nlr_classifier = " << io::format_double(cfg.rates.classifier)
      << "\nlr_projector = " << io::format_double(cfg.rates.projector) << "\nlabeled_per_domain = " << cfg.batch.labeled
      << "\nunlabeled_per_domain = " << cfg.batch.unlabeled << "\nweak_sigma = " << io::format_double(cfg.augment.weak_sigma)
      << "\nstrong_sigma = " << io::format_double(cfg.augment.strong_sigma)
      << "\nstrong_dropout = " << io::format_double(cfg.augment.strong_dropout) << "\nseeds = " << join(cfg.seeds)
      << "\nlog_confidences = " << (cfg.log_confidences ? "true" : "false") << "\njobs = " << cfg.jobs << '\n';
  return out.str();
}

// ---------------------------------------------------------------------------

std::string RunFragment::run_id() const {
  return method_name(method) + "/t" + std::to_string(target) + "/s" + std::to_string(seed);
}

ModelState initial_state(const TrainConfig& config, std::size_t target, std::uint64_t seed) {
  return init_model(config.model_dims(), derive_seed({seed, target, kInitStream}));
}

Trainer::Trainer(const TrainConfig& config, SourceView sources, std::size_t target, std::uint64_t seed)
    : config_(config), sources_(std::move(sources)), target_(target), seed_(seed), flags_(MethodFlags::of(config.method)),
      state_(initial_state(config, target, seed)) {
  config_.validate();
}

GroupRates Trainer::current_rates() const {
  const std::size_t total = config_.total_steps();
  return {cosine_lr({config_.rates.backbone, total}, step_), cosine_lr({config_.rates.classifier, total}, step_),
          cosine_lr({config_.rates.projector, total}, step_)};
}

LossBreakdown Trainer::step() {
  Rng batch_rng = make_rng({seed_, target_, step_, kBatchStream});
  Rng aug_rng = make_rng({seed_, target_, step_, kAugmentStream});
  const TrainBatch batch = sample_batch(sources_, config_.batch, batch_rng);
  const AugmentedBatch views = augment_batch(batch, config_.augment, aug_rng);
  const PseudoTargets targets = compute_targets(state_, views.weak, config_.tau);
  const TotalLoss loss = total_loss(state_, views, targets, flags_);
  state_ = sgd_step(std::move(state_), loss.grads, current_rates());
  ++step_;
  return loss.breakdown;
}

double domain_accuracy(const ModelState& state, const DomainData& domain) {
  Matrix x(domain.labeled.x.rows() + domain.unlabeled.x.rows() + domain.test.x.rows(), domain.labeled.x.cols());
  x << domain.labeled.x, domain.unlabeled.x, domain.test.x;
  Labels y = domain.labeled.y;
  const Labels& hidden = analysis::TruthAccess::unlabeled_truth(domain.unlabeled);
  y.insert(y.end(), hidden.begin(), hidden.end());
  y.insert(y.end(), domain.test.y.begin(), domain.test.y.end());
  return analysis::top1_accuracy(class_confidence(state, featurize(state, x)), y);
}

RunFragment train_one(const TrainConfig& config, const DomainBenchmark& bench, std::size_t target, std::uint64_t seed) {
  config.validate();
  if (target >= bench.num_domains()) throw ConfigError("target domain " + std::to_string(target) + " out of range");
  RunFragment run;
  run.method = config.method;
  run.target = target;
  run.seed = seed;

  const SourceView sources = bench.sources_excluding(target);
  Trainer trainer(config, sources, target, seed);
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr_backbone = trainer.current_rates().backbone;
    LossBreakdown& m = rec.mean_loss;
    for (std::size_t s = 0; s < config.steps_per_epoch; ++s) {
      const LossBreakdown lb = trainer.step();
      m.l_sup += lb.l_sup;
      m.l_unsup += lb.l_unsup;
      m.l_upc += lb.l_upc;
      m.l_sc += lb.l_sc;
      m.n_uc += lb.n_uc;
      m.n_uu += lb.n_uu;
      m.degenerate_uniform += lb.degenerate_uniform;
    }
    const double n = static_cast<double>(config.steps_per_epoch);
    m.l_sup /= n;
    m.l_unsup /= n;
    m.l_upc /= n;
    m.l_sc /= n;
    m.l_total = m.l_sup + m.l_unsup + m.l_upc + m.l_sc;
    rec.mean_n_uc = static_cast<double>(m.n_uc) / n;
    rec.mean_n_uu = static_cast<double>(m.n_uu) / n;

    const ModelState& state = trainer.state();
    analysis::ConfidenceLog log;
    std::size_t correct_weighted = 0;
    std::size_t total = 0;
    for (std::size_t k = 0; k < sources.size(); ++k) {
      const DomainData& dom = sources.domain(k);
      const Matrix conf = class_confidence(state, featurize(state, dom.unlabeled.x));
      log.append(conf, dom.unlabeled, epoch, sources.domain_id(k));
      const auto rows = static_cast<std::size_t>(conf.rows());
      correct_weighted += static_cast<std::size_t>(std::llround(
          analysis::top1_accuracy(conf, analysis::TruthAccess::unlabeled_truth(dom.unlabeled)) * static_cast<double>(rows)));
      total += rows;
    }
    rec.source_unlabeled_accuracy = static_cast<double>(correct_weighted) / static_cast<double>(total);
    rec.uus_rate = analysis::uus_rate(log, config.tau);
    rec.inclusion_rate = analysis::inclusion_rate(log, config.tau);
    rec.chance_inclusion = analysis::chance_inclusion(log, config.tau);
    rec.target_accuracy = domain_accuracy(state, bench.domain(target));
    if (config.log_confidences) run.confidences.records.insert(run.confidences.records.end(), log.records.begin(), log.records.end());
    run.confidences.num_classes = log.num_classes;
    run.epochs.push_back(std::move(rec));
  }
  run.final_accuracy = run.epochs.back().target_accuracy;
  run.final_state = trainer.state();
  return run;
}

RunFragment train_one(const TrainConfig& config, std::size_t target, std::uint64_t seed) {
  config.validate();
  const DomainBenchmark bench = generate_benchmark(config.benchmark);
  return train_one(config, bench, target, seed);
}

MethodSummary summarize_method(const std::vector<RunFragment>& runs, Method method) {
  MethodSummary s{method, 0.0, 0.0, 0};
  std::vector<double> acc;
  for (const auto& r : runs)
    if (r.method == method) acc.push_back(r.final_accuracy);
  s.runs = acc.size();
  if (acc.empty()) return s;
  double sum = 0.0;
  for (double a : acc) sum += a;
  s.mean = sum / static_cast<double>(acc.size());
  double var = 0.0;
  for (double a : acc) var += (a - s.mean) * (a - s.mean);
  s.stddev = acc.size() > 1 ? std::sqrt(var / static_cast<double>(acc.size() - 1)) : 0.0;
  return s;
}

std::vector<PairedDelta> paired_deltas(const RunResult& result, Method baseline, Method treatment) {
  std::vector<PairedDelta> out;
  for (const auto& b : result.runs) {
    if (b.method != baseline) continue;
    for (const auto& t : result.runs)
      if (t.method == treatment && t.target == b.target && t.seed == b.seed)
        out.push_back({b.target, b.seed, b.final_accuracy, t.final_accuracy, t.final_accuracy - b.final_accuracy});
  }
  return out;
}

RunResult run_protocol(const TrainConfig& config, const std::vector<Method>& methods, const RunCallback& on_run) {
  config.validate();
  struct Job {
    Method method;
    std::size_t target;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (Method m : methods)
    for (std::size_t t = 0; t < config.benchmark.num_domains; ++t)
      for (std::uint64_t s : config.seeds) jobs.push_back({m, t, s});

  const DomainBenchmark bench = generate_benchmark(config.benchmark);
  RunResult result;
  result.runs.resize(jobs.size());
  std::mutex report_mutex;
  auto run_job = [&](std::size_t i) {
    TrainConfig cfg = config;
    cfg.method = jobs[i].method;
    // each job gets its own benchmark copy: access counters are not shared across threads
    const DomainBenchmark local = config.jobs > 1 ? generate_benchmark(config.benchmark) : DomainBenchmark(bench);
    result.runs[i] = train_one(cfg, local, jobs[i].target, jobs[i].seed);
    if (on_run) {
      std::lock_guard lock(report_mutex);
      on_run(result.runs[i]);
    }
  };

  if (config.jobs <= 1) {
    for (std::size_t i = 0; i < jobs.size(); ++i) run_job(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    std::exception_ptr failure;
    std::mutex failure_mutex;
    for (std::size_t w = 0; w < std::min(config.jobs, jobs.size()); ++w)
      pool.emplace_back([&] {
        for (std::size_t i; (i = next.fetch_add(1)) < jobs.size();) {
          try {
            run_job(i);
          } catch (...) {
            std::lock_guard lock(failure_mutex);
            if (!failure) failure = std::current_exception();
          }
        }
      });
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);
  }
  for (Method m : methods) result.summaries.push_back(summarize_method(result.runs, m));
  return result;
}

RunResult run_protocol(const TrainConfig& config) { return run_protocol(config, {config.method}); }

void write_metrics_csv(const RunResult& result, std::ostream& out) {
  out << "run_id,target_domain,seed,epoch,metric,value\n";
  for (const auto& run : result.runs) {
    const std::string prefix = run.run_id() + "," + std::to_string(run.target) + "," + std::to_string(run.seed) + ",";
    for (const auto& e : run.epochs) {
      auto row = [&](const char* metric, double v) {
        out << prefix << e.epoch << ',' << metric << ',' << io::format_double(v) << '\n';
      };
      row("l_sup", e.mean_loss.l_sup);
      row("l_unsup", e.mean_loss.l_unsup);
      row("l_upc", e.mean_loss.l_upc);
      row("l_sc", e.mean_loss.l_sc);
      row("l_total", e.mean_loss.l_total);
      row("n_uc", e.mean_n_uc);
      row("n_uu", e.mean_n_uu);
      row("degenerate_uniform", static_cast<double>(e.mean_loss.degenerate_uniform));
      row("lr_backbone", e.lr_backbone);
      row("source_unlabeled_accuracy", e.source_unlabeled_accuracy);
      row("target_accuracy", e.target_accuracy);
      row("uus_rate", e.uus_rate);
      if (e.inclusion_rate) row("inclusion_rate", *e.inclusion_rate);
      if (e.chance_inclusion) row("chance_inclusion", *e.chance_inclusion);
    }
  }
}

void write_results_csv(const RunResult& result, std::ostream& out) {
  out << "method,target,seed,final_accuracy\n";
  for (const auto& run : result.runs)
    out << method_name(run.method) << ',' << run.target << ',' << run.seed << ',' << io::format_double(run.final_accuracy) << '\n';
}

void write_paired_csv(const std::vector<PairedDelta>& deltas, Method baseline, Method treatment, std::ostream& out) {
  out << "baseline,treatment,target,seed,baseline_accuracy,treatment_accuracy,delta\n";
  for (const auto& d : deltas)
    out << method_name(baseline) << ',' << method_name(treatment) << ',' << d.target << ',' << d.seed << ','
        << io::format_double(d.baseline) << ',' << io::format_double(d.treatment) << ',' << io::format_double(d.delta) << '\n';
}

void write_confidence_csv(const RunFragment& run, std::ostream& out) {
  out << "run_id,target_domain,seed,epoch,domain,sample_index";
  for (std::size_t c = 0; c < run.confidences.num_classes; ++c) out << ",c_" << c;
  out << '\n';
  for (const auto& r : run.confidences.records) {
    out << run.run_id() << ',' << run.target << ',' << run.seed << ',' << r.epoch << ',' << r.domain << ',' << r.sample_index;
    for (Eigen::Index c = 0; c < r.confidence.size(); ++c) out << ',' << io::format_double(r.confidence(c));
    out << '\n';
  }
}

// ---------------------------------------------------------------------------

bool GradcheckReport::passed() const {
  return std::all_of(terms.begin(), terms.end(), [&](const auto& t) { return t.max_relative_error < tolerance; });
}

namespace {

void randomize(Matrix& m, double sigma, Rng& rng) {
  std::normal_distribution<double> dist(0.0, sigma);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
}

/*
 * Small random problem in which both partition sides are populated: tau sits
 * halfway between two neighbouring max-confidences of the weak view.
 */
struct GradcheckProblem {
  ModelState state;
  AugmentedBatch views;
  PseudoTargets targets;
};

GradcheckProblem make_problem(std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_int_distribution<std::size_t> num_classes(3, 5);
  const std::size_t c = num_classes(rng);
  ModelDims dims{5, {6}, 4, c};
  GradcheckProblem p{init_model(dims, seed), {}, {}};
  for (auto& layer : p.state.featurizer) randomize(layer.bias, 0.3, rng);
  randomize(p.state.feature_projector.bias, 0.2, rng);
  randomize(p.state.classifier_projector.bias, 0.2, rng);

  const Eigen::Index n_lab = 6;
  const Eigen::Index n_unl = 8;
  p.views.labeled_x.resize(n_lab, 5);
  randomize(p.views.labeled_x, 1.5, rng);
  std::uniform_int_distribution<int> label(0, static_cast<int>(c) - 1);
  for (Eigen::Index i = 0; i < n_lab; ++i) p.views.labeled_y.push_back(label(rng));
  p.views.weak.resize(n_unl, 5);
  randomize(p.views.weak, 1.5, rng);
  p.views.strong = p.views.weak;
  Matrix noise(n_unl, 5);
  randomize(noise, 0.5, rng);
  p.views.strong += noise;

  const Matrix conf = class_confidence(p.state, featurize(p.state, p.views.weak));
  std::vector<double> maxima;
  for (Eigen::Index i = 0; i < conf.rows(); ++i) maxima.push_back(conf.row(i).maxCoeff());
  std::sort(maxima.begin(), maxima.end());
  std::uniform_int_distribution<std::size_t> cut(1, maxima.size() - 1);
  const std::size_t k = cut(rng);
  const double chance = 1.0 / static_cast<double>(c);
  double tau = 0.5 * (maxima[k - 1] + maxima[k]);
  tau = std::clamp(tau, chance + 1e-6, 1.0 - 1e-9);
  p.targets = compute_targets(p.state, p.views.weak, tau);
  return p;
}

}  // namespace

GradcheckReport run_gradcheck(std::size_t draws, std::uint64_t seed, double h, double tolerance) {
  struct Term {
    const char* name;
    MethodFlags flags;
  };
  const Term terms[] = {{"l_sup", {true, false, false, false}},
                        {"l_unsup", {false, true, false, false}},
                        {"l_upc", {false, false, true, false}},
                        {"l_sc", {false, false, false, true}},
                        {"l_total", {true, true, true, true}}};
  GradcheckReport report;
  report.tolerance = tolerance;
  for (const auto& t : terms) report.terms.push_back({t.name, 0.0, 0, 0});

  for (std::size_t d = 0; d < draws; ++d) {
    const GradcheckProblem p = make_problem(derive_seed({seed, d, 0x67726164ULL}));
    for (std::size_t k = 0; k < std::size(terms); ++k) {
      const TotalLoss analytic = total_loss(p.state, p.views, p.targets, terms[k].flags);
      const GradientSet numeric = finite_diff_gradient(
          [&](const ModelState& s) { return total_loss(s, p.views, p.targets, terms[k].flags).breakdown.l_total; }, p.state, h);
      GradcheckTerm& out = report.terms[k];
      out.max_relative_error = std::max(out.max_relative_error, max_relative_error(analytic.grads, numeric));
      ++out.draws;
      if (analytic.breakdown.l_total > 0.0) ++out.nontrivial_draws;
    }
  }
  return report;
}

}  // namespace upcsc
