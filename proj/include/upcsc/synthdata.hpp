#ifndef UPCSC_SYNTHDATA_HPP
#define UPCSC_SYNTHDATA_HPP

#include "upcsc/numerics.hpp"
#include "upcsc/random.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace upcsc {

using Labels = std::vector<int>;

class DomainBenchmark;

namespace analysis {
class TruthAccess;
}

/*
 * Passkey for reading quarantined ground truth. Only the analysis module and
 * the benchmark CSV exporter can mint one; losses and the trainer cannot.
 */
class QuarantineKey {
  QuarantineKey() = default;
  friend class analysis::TruthAccess;
  friend void export_benchmark(const DomainBenchmark&, const std::string&);
};

template <typename T>
class Quarantined {
public:
  Quarantined() = default;
  explicit Quarantined(T value) : value_(std::move(value)) {}

  const T& reveal(QuarantineKey) const { return value_; }
  std::size_t size() const { return value_.size(); }

private:
  T value_{};
};

struct BenchmarkConfig {
  std::size_t num_domains = 4;
  std::size_t num_classes = 7;
  std::size_t latent_dim = 32;
  std::size_t samples_per_class_per_domain = 500;
  std::size_t labels_per_class = 10;
  double class_separation = 5.0;
  double noise_sigma = 1.0;
  // Domain-shift knobs; all zero gives identical domains.
  double rotation_strength = 0.35;
  double scale_strength = 0.5;
  double shift_sigma = 0.5;
  double test_fraction = 0.2;
  std::uint64_t master_seed = 2024;

  void validate() const;
  std::size_t test_per_class() const;
  std::size_t unlabeled_per_class() const;
};

/// x = rotation * diag(scale) * latent + shift.
struct DomainSpec {
  std::size_t domain_id = 0;
  std::uint64_t rotation_seed = 0;
  Matrix rotation;
  Vector scale;
  Vector shift;
  double noise_sigma = 0.0;
};

struct LabeledSplit {
  Matrix x;
  Labels y;
};

struct UnlabeledSplit {
  Matrix x;
  Quarantined<Labels> truth;
};

struct DomainData {
  DomainSpec spec;
  LabeledSplit labeled;
  UnlabeledSplit unlabeled;
  LabeledSplit test;
};

class SourceView;

/*
 * D domains sharing one label space. Every call to domain(d) is counted so
 * tests can assert a held-out target was never touched during training.
 */
class DomainBenchmark {
public:
  DomainBenchmark(BenchmarkConfig config, Matrix prototypes, std::vector<DomainData> domains);

  const BenchmarkConfig& config() const { return config_; }
  const Matrix& prototypes() const { return prototypes_; }
  std::size_t num_domains() const { return domains_.size(); }

  const DomainData& domain(std::size_t d) const;
  std::size_t access_count(std::size_t d) const { return access_.at(d); }

  /// View over every domain except `target`; the target's splits are unreachable through it.
  SourceView sources_excluding(std::size_t target) const;

private:
  BenchmarkConfig config_;
  Matrix prototypes_;
  std::vector<DomainData> domains_;
  mutable std::vector<std::size_t> access_;
};

class SourceView {
public:
  std::size_t size() const { return ids_.size(); }
  std::size_t domain_id(std::size_t k) const { return ids_.at(k); }
  const DomainData& domain(std::size_t k) const { return bench_->domain(ids_.at(k)); }
  const BenchmarkConfig& config() const { return bench_->config(); }

private:
  friend class DomainBenchmark;
  SourceView(const DomainBenchmark* bench, std::vector<std::size_t> ids) : bench_(bench), ids_(std::move(ids)) {}

  const DomainBenchmark* bench_;
  std::vector<std::size_t> ids_;
};

/// Per-domain specs; a pure function of (config, domain id) through derived sub-seeds.
std::vector<DomainSpec> make_domain_specs(const BenchmarkConfig& cfg);
Matrix make_prototypes(const BenchmarkConfig& cfg);

DomainBenchmark generate_benchmark(const BenchmarkConfig& cfg);

/// Inverse of the domain transform.
Matrix to_latent(const DomainSpec& spec, const Matrix& x);

struct AugmentConfig {
  double weak_sigma = 0.05;
  double strong_sigma = 0.5;
  double strong_dropout = 0.2;
};

Matrix weak_augment(const Matrix& x, double sigma, Rng& rng);
Matrix strong_augment(const Matrix& x, double sigma, double dropout, Rng& rng);

struct BatchCounts {
  std::size_t labeled = 16;
  std::size_t unlabeled = 16;
};

struct SampleRef {
  std::size_t domain = 0;
  std::size_t index = 0;
  bool operator==(const SampleRef&) const = default;
};

/* Per source domain: counts.labeled labeled pairs and counts.unlabeled unlabeled inputs. */
struct TrainBatch {
  Matrix labeled_x;
  Labels labeled_y;
  Matrix unlabeled_x;
  std::vector<SampleRef> labeled_refs;
  std::vector<SampleRef> unlabeled_refs;
};

/// Indices drawn without replacement when the split is large enough, with replacement otherwise.
std::vector<std::size_t> sample_indices(std::size_t split_size, std::size_t count, Rng& rng);

TrainBatch sample_batch(const SourceView& sources, const BatchCounts& counts, Rng& rng);

// CSV exchange: domain<d>_{labeled,unlabeled,test}.csv with header x_0..x_{k-1},label,
// plus domain<d>_unlabeled_truth.csv and benchmark.cfg.

void export_benchmark(const DomainBenchmark& bench, const std::string& dir);
DomainBenchmark import_benchmark(const std::string& dir);

}  // namespace upcsc

#endif  // UPCSC_SYNTHDATA_HPP
