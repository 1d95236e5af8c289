#ifndef UPCSC_HARNESS_HPP
#define UPCSC_HARNESS_HPP

#include "upcsc/analysis.hpp"
#include "upcsc/losses.hpp"
#include "upcsc/model.hpp"
#include "upcsc/synthdata.hpp"

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace upcsc {

struct TrainConfig {
  BenchmarkConfig benchmark;
  std::vector<std::size_t> hidden_dims{64};
  std::size_t feature_dim = 64;
  Method method = Method::FixMatchUpcsc;
  double tau = 0.95;
  std::size_t epochs = 20;
  std::size_t steps_per_epoch = 50;
  GroupRates rates{0.003, 0.01, 0.0005};
  BatchCounts batch;
  AugmentConfig augment;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  bool log_confidences = false;
  std::size_t jobs = 1;

  /// Input width and class count come from the benchmark.
  ModelDims model_dims() const;
  std::size_t total_steps() const { return epochs * steps_per_epoch; }
  void validate() const;
};

/// Applies `key = value` pairs onto `base`; unknown keys are config errors.
TrainConfig apply_config(TrainConfig base, const std::map<std::string, std::string>& kv);
TrainConfig load_config(const std::string& path);
std::string format_config(const TrainConfig& cfg);

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based, recorded after the epoch's last step
  LossBreakdown mean_loss;  // step averages of the loss terms; counts are epoch totals
  double mean_n_uc = 0.0;
  double mean_n_uu = 0.0;
  double target_accuracy = 0.0;
  double source_unlabeled_accuracy = 0.0;
  double uus_rate = 0.0;
  std::optional<double> inclusion_rate;
  std::optional<double> chance_inclusion;
  double lr_backbone = 0.0;
};

struct RunFragment {
  Method method = Method::FixMatchUpcsc;
  std::size_t target = 0;
  std::uint64_t seed = 0;
  std::vector<EpochRecord> epochs;
  double final_accuracy = 0.0;
  ModelState final_state;
  analysis::ConfidenceLog confidences;  // filled when log_confidences is set

  std::string run_id() const;
};

/*
 * Single-threaded training loop over the source domains of one
 * leave-one-domain-out split. It only ever sees a SourceView.
 */
class Trainer {
public:
  Trainer(const TrainConfig& config, SourceView sources, std::size_t target, std::uint64_t seed);

  /// One SGD step: sample, augment, partition, losses, update.
  LossBreakdown step();

  const ModelState& state() const { return state_; }
  std::size_t steps_taken() const { return step_; }
  GroupRates current_rates() const;

private:
  TrainConfig config_;
  SourceView sources_;
  std::size_t target_;
  std::uint64_t seed_;
  MethodFlags flags_;
  ModelState state_;
  std::size_t step_ = 0;
};

ModelState initial_state(const TrainConfig& config, std::size_t target, std::uint64_t seed);

/// Accuracy of a model on every sample (all splits) of one domain.
double domain_accuracy(const ModelState& state, const DomainData& domain);

RunFragment train_one(const TrainConfig& config, std::size_t target, std::uint64_t seed);
RunFragment train_one(const TrainConfig& config, const DomainBenchmark& bench, std::size_t target, std::uint64_t seed);

struct MethodSummary {
  Method method;
  double mean = 0.0;
  double stddev = 0.0;
  std::size_t runs = 0;
};

struct RunResult {
  std::vector<RunFragment> runs;  // ordered by (method, target, seed)
  std::vector<MethodSummary> summaries;
};

MethodSummary summarize_method(const std::vector<RunFragment>& runs, Method method);

struct PairedDelta {
  std::size_t target;
  std::uint64_t seed;
  double baseline;
  double treatment;
  double delta;
};

/// Per (target, seed) differences treatment - baseline over matching runs.
std::vector<PairedDelta> paired_deltas(const RunResult& result, Method baseline, Method treatment);

using RunCallback = std::function<void(const RunFragment&)>;

/// Every domain as target times every seed, for each requested method.
RunResult run_protocol(const TrainConfig& config, const std::vector<Method>& methods, const RunCallback& on_run = {});
RunResult run_protocol(const TrainConfig& config);

void write_metrics_csv(const RunResult& result, std::ostream& out);
void write_results_csv(const RunResult& result, std::ostream& out);
void write_paired_csv(const std::vector<PairedDelta>& deltas, Method baseline, Method treatment, std::ostream& out);
void write_confidence_csv(const RunFragment& run, std::ostream& out);

// ---------------------------------------------------------------------------
// Finite-difference verification of every loss term

struct GradcheckTerm {
  std::string name;
  double max_relative_error = 0.0;
  std::size_t draws = 0;
  std::size_t nontrivial_draws = 0;  // draws where the term was nonzero
};

struct GradcheckReport {
  std::vector<GradcheckTerm> terms;
  double tolerance = 1e-4;
  bool passed() const;
};

/// Random small (state, batch) draws; analytic gradients against central differences with step h.
GradcheckReport run_gradcheck(std::size_t draws, std::uint64_t seed, double h = 1e-5, double tolerance = 1e-4);

}  // namespace upcsc

#endif  // UPCSC_HARNESS_HPP
