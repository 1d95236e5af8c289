#include "upcsc/analysis.hpp"
#include "upcsc/synthdata.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <tuple>

using namespace upcsc;

namespace {

BenchmarkConfig small_config() {
  BenchmarkConfig cfg;
  cfg.num_domains = 3;
  cfg.num_classes = 4;
  cfg.latent_dim = 6;
  cfg.samples_per_class_per_domain = 60;
  cfg.labels_per_class = 5;
  return cfg;
}

struct AllRows {
  Matrix x;
  Labels y;
};

AllRows whole_domain(const DomainData& d) {
  AllRows out;
  out.x.resize(d.labeled.x.rows() + d.unlabeled.x.rows() + d.test.x.rows(), d.labeled.x.cols());
  out.x << d.labeled.x, d.unlabeled.x, d.test.x;
  out.y = d.labeled.y;
  const Labels& hidden = analysis::TruthAccess::unlabeled_truth(d.unlabeled);
  out.y.insert(out.y.end(), hidden.begin(), hidden.end());
  out.y.insert(out.y.end(), d.test.y.begin(), d.test.y.end());
  return out;
}

std::vector<double> row_key(const Matrix& m, Eigen::Index i) { return {m.row(i).data(), m.row(i).data() + m.cols()}; }

}  // namespace

TEST(Benchmark, DefaultLabeledSplitHasSeventyItems) {
  BenchmarkConfig cfg;
  cfg.samples_per_class_per_domain = 100;
  const DomainBenchmark bench = generate_benchmark(cfg);
  ASSERT_EQ(bench.num_domains(), 4u);
  for (std::size_t d = 0; d < 4; ++d) {
    EXPECT_EQ(bench.domain(d).labeled.x.rows(), 70);
    EXPECT_EQ(bench.domain(d).labeled.y.size(), 70u);
    EXPECT_EQ(bench.domain(d).test.x.rows(), 7 * 20);
    EXPECT_EQ(bench.domain(d).unlabeled.x.rows(), 7 * 70);
    EXPECT_GT(bench.domain(d).unlabeled.x.rows(), bench.domain(d).labeled.x.rows());
  }
}

TEST(Benchmark, DeterministicGivenMasterSeed) {
  const DomainBenchmark a = generate_benchmark(small_config());
  const DomainBenchmark b = generate_benchmark(small_config());
  for (std::size_t d = 0; d < a.num_domains(); ++d) {
    EXPECT_EQ(a.domain(d).labeled.x, b.domain(d).labeled.x);
    EXPECT_EQ(a.domain(d).labeled.y, b.domain(d).labeled.y);
    EXPECT_EQ(a.domain(d).unlabeled.x, b.domain(d).unlabeled.x);
    EXPECT_EQ(analysis::TruthAccess::unlabeled_truth(a.domain(d).unlabeled),
              analysis::TruthAccess::unlabeled_truth(b.domain(d).unlabeled));
    EXPECT_EQ(a.domain(d).test.x, b.domain(d).test.x);
  }
  BenchmarkConfig other = small_config();
  other.master_seed += 1;
  EXPECT_NE(generate_benchmark(other).domain(0).labeled.x, a.domain(0).labeled.x);
}

TEST(Benchmark, NearestPrototypeIsPerfectWhenWellSeparated) {
  BenchmarkConfig cfg = small_config();
  cfg.class_separation = 10.0;
  cfg.noise_sigma = 0.1;
  const DomainBenchmark bench = generate_benchmark(cfg);
  for (std::size_t d = 0; d < bench.num_domains(); ++d) {
    const AllRows all = whole_domain(bench.domain(d));
    const Matrix latent = to_latent(bench.domain(d).spec, all.x);
    for (Eigen::Index i = 0; i < latent.rows(); ++i) {
      Eigen::Index best = 0;
      (bench.prototypes().rowwise() - latent.row(i)).rowwise().squaredNorm().minCoeff(&best);
      ASSERT_EQ(best, all.y[static_cast<std::size_t>(i)]);
    }
  }
}

TEST(Benchmark, ClassHistogramIsBalancedPerDomain) {
  const BenchmarkConfig cfg = small_config();
  const DomainBenchmark bench = generate_benchmark(cfg);
  for (std::size_t d = 0; d < bench.num_domains(); ++d) {
    std::map<int, std::size_t> counts;
    for (int y : whole_domain(bench.domain(d)).y) ++counts[y];
    ASSERT_EQ(counts.size(), cfg.num_classes);
    for (const auto& [label, n] : counts) EXPECT_EQ(n, cfg.samples_per_class_per_domain) << "class " << label;
    std::map<int, std::size_t> labeled;
    for (int y : bench.domain(d).labeled.y) ++labeled[y];
    for (const auto& [label, n] : labeled) EXPECT_EQ(n, cfg.labels_per_class);
  }
}

TEST(Benchmark, SplitsArePairwiseDisjoint) {
  const DomainBenchmark bench = generate_benchmark(small_config());
  for (std::size_t d = 0; d < bench.num_domains(); ++d) {
    const DomainData& dom = bench.domain(d);
    std::set<std::vector<double>> seen;
    std::size_t total = 0;
    for (const Matrix* m : {&dom.labeled.x, &dom.unlabeled.x, &dom.test.x})
      for (Eigen::Index i = 0; i < m->rows(); ++i) {
        seen.insert(row_key(*m, i));
        ++total;
      }
    EXPECT_EQ(seen.size(), total);
  }
}

TEST(Benchmark, RotationsAreOrthogonalAndScalesInRange) {
  const BenchmarkConfig cfg = small_config();
  for (const DomainSpec& spec : make_domain_specs(cfg)) {
    const auto n = static_cast<Eigen::Index>(cfg.latent_dim);
    EXPECT_LT((spec.rotation.transpose() * spec.rotation - Matrix::Identity(n, n)).cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_GE(spec.scale.minCoeff(), 0.5);
    EXPECT_LE(spec.scale.maxCoeff(), 2.0);
    EXPECT_GT(spec.noise_sigma, 0.0);
  }
}

TEST(Benchmark, DomainsDifferUnderShift) {
  const auto specs = make_domain_specs(small_config());
  EXPECT_NE(specs[0].rotation, specs[1].rotation);
  EXPECT_NE(specs[0].shift, specs[1].shift);
}

TEST(Benchmark, IdentityShiftGivesIdenticallyDistributedDomains) {
  BenchmarkConfig cfg = small_config();
  cfg.rotation_strength = 0.0;
  cfg.scale_strength = 0.0;
  cfg.shift_sigma = 0.0;
  cfg.samples_per_class_per_domain = 400;
  const DomainBenchmark bench = generate_benchmark(cfg);
  for (const DomainSpec& s : make_domain_specs(cfg)) {
    EXPECT_EQ(s.rotation, Matrix::Identity(6, 6));
    EXPECT_EQ(s.scale, Vector::Ones(6));
    EXPECT_EQ(s.shift, Vector::Zero(6));
  }
  // Per (class, coordinate) two-sample z-test between domains 0 and 1, Bonferroni-bounded.
  const AllRows a = whole_domain(bench.domain(0));
  const AllRows b = whole_domain(bench.domain(1));
  const double n = static_cast<double>(cfg.samples_per_class_per_domain);
  double worst = 0.0;
  for (int c = 0; c < static_cast<int>(cfg.num_classes); ++c) {
    RowVector ma = RowVector::Zero(6), mb = RowVector::Zero(6);
    for (Eigen::Index i = 0; i < a.x.rows(); ++i)
      if (a.y[static_cast<std::size_t>(i)] == c) ma += a.x.row(i);
    for (Eigen::Index i = 0; i < b.x.rows(); ++i)
      if (b.y[static_cast<std::size_t>(i)] == c) mb += b.x.row(i);
    const RowVector z = (ma - mb) / n / (cfg.noise_sigma * std::sqrt(2.0 / n));
    worst = std::max(worst, z.cwiseAbs().maxCoeff());
  }
  EXPECT_LT(worst, 4.0);
}

TEST(Benchmark, InfeasibleSplitsRejected) {
  BenchmarkConfig cfg = small_config();
  cfg.labels_per_class = 40;  // 40 labeled + 12 test leaves 8 unlabeled
  EXPECT_THROW(generate_benchmark(cfg), ConfigError);
  cfg = small_config();
  cfg.labels_per_class = 60;
  EXPECT_THROW(generate_benchmark(cfg), ConfigError);
  cfg = small_config();
  cfg.num_domains = 1;
  EXPECT_THROW(generate_benchmark(cfg), ConfigError);
  cfg = small_config();
  cfg.num_classes = 65;
  EXPECT_THROW(generate_benchmark(cfg), ConfigError);
}

TEST(Benchmark, SourceViewHidesTargetAndCountsAccess) {
  const DomainBenchmark bench = generate_benchmark(small_config());
  const SourceView view = bench.sources_excluding(1);
  ASSERT_EQ(view.size(), 2u);
  EXPECT_EQ(view.domain_id(0), 0u);
  EXPECT_EQ(view.domain_id(1), 2u);
  (void)view.domain(0);
  (void)view.domain(1);
  EXPECT_EQ(bench.access_count(1), 0u);
  EXPECT_EQ(bench.access_count(0), 1u);
  EXPECT_THROW(view.domain(2), std::out_of_range);
}

TEST(Augment, ZeroStrengthIsIdentity) {
  Rng rng(1);
  const Matrix x = Matrix::Random(5, 4);
  EXPECT_EQ(weak_augment(x, 0.0, rng), x);
  EXPECT_EQ(strong_augment(x, 0.0, 0.0, rng), x);
}

TEST(Augment, FullDropoutZeroes) {
  Rng rng(2);
  EXPECT_EQ(strong_augment(Matrix::Random(5, 4), 0.5, 1.0, rng), Matrix::Zero(5, 4));
}

TEST(Augment, ShapesPreserved) {
  Rng rng(3);
  const Matrix x = Matrix::Random(7, 3);
  EXPECT_EQ(weak_augment(x, 0.05, rng).rows(), 7);
  EXPECT_EQ(weak_augment(x, 0.05, rng).cols(), 3);
  EXPECT_EQ(strong_augment(x, 0.5, 0.2, rng).rows(), 7);
  EXPECT_EQ(strong_augment(x, 0.5, 0.2, rng).cols(), 3);
  EXPECT_THROW(strong_augment(x, 0.5, 1.5, rng), std::invalid_argument);
}

TEST(Augment, WeakNoiseStdMatchesSigma) {
  Rng rng(4);
  const double sigma = 0.05;
  const Matrix x = Matrix::Random(1, 8);
  Eigen::Array<double, 1, Eigen::Dynamic> sum_sq = Eigen::Array<double, 1, Eigen::Dynamic>::Zero(8);
  const int draws = 10000;
  for (int t = 0; t < draws; ++t) sum_sq += (weak_augment(x, sigma, rng) - x).array().square();
  const auto std_dev = (sum_sq / draws).sqrt();
  EXPECT_GT(std_dev.minCoeff(), 0.95 * sigma);
  EXPECT_LT(std_dev.maxCoeff(), 1.05 * sigma);
}

TEST(Augment, StrongDropoutFractionMatches) {
  Rng rng(5);
  const Matrix x = Matrix::Constant(1000, 100, 3.0);
  const Matrix y = strong_augment(x, 0.5, 0.2, rng);
  const double zero_fraction = static_cast<double>((y.array() == 0.0).count()) / static_cast<double>(y.size());
  EXPECT_NEAR(zero_fraction, 0.2, 0.01);
}

TEST(Sampling, BatchTotalsMatchCounts) {
  BenchmarkConfig cfg = small_config();
  cfg.num_domains = 4;
  const DomainBenchmark bench = generate_benchmark(cfg);
  Rng rng(6);
  const TrainBatch batch = sample_batch(bench.sources_excluding(0), {16, 16}, rng);
  EXPECT_EQ(batch.labeled_x.rows(), 48);
  EXPECT_EQ(batch.labeled_y.size(), 48u);
  EXPECT_EQ(batch.unlabeled_x.rows(), 48);
  EXPECT_EQ(batch.labeled_refs.size(), 48u);
  for (const SampleRef& r : batch.labeled_refs) EXPECT_NE(r.domain, 0u);
  EXPECT_EQ(bench.access_count(0), 0u);
}

TEST(Sampling, LabeledRowsCarryTheirLabels) {
  const DomainBenchmark bench = generate_benchmark(small_config());
  Rng rng(7);
  const TrainBatch batch = sample_batch(bench.sources_excluding(2), {8, 8}, rng);
  for (std::size_t k = 0; k < batch.labeled_refs.size(); ++k) {
    const SampleRef& r = batch.labeled_refs[k];
    const DomainData& d = bench.domain(r.domain);
    EXPECT_EQ(batch.labeled_x.row(static_cast<Eigen::Index>(k)), d.labeled.x.row(static_cast<Eigen::Index>(r.index)));
    EXPECT_EQ(batch.labeled_y[k], d.labeled.y[r.index]);
  }
  for (std::size_t k = 0; k < batch.unlabeled_refs.size(); ++k) {
    const SampleRef& r = batch.unlabeled_refs[k];
    EXPECT_EQ(batch.unlabeled_x.row(static_cast<Eigen::Index>(k)),
              bench.domain(r.domain).unlabeled.x.row(static_cast<Eigen::Index>(r.index)));
  }
}

TEST(Sampling, WithoutReplacementWhenSplitIsLargeEnough) {
  Rng rng(8);
  for (int t = 0; t < 100; ++t) {
    const auto idx = sample_indices(20, 16, rng);
    ASSERT_EQ(idx.size(), 16u);
    EXPECT_EQ(std::set<std::size_t>(idx.begin(), idx.end()).size(), 16u);
    for (std::size_t i : idx) EXPECT_LT(i, 20u);
  }
}

TEST(Sampling, ReplacementFillsSmallSplits) {
  Rng rng(9);
  const auto idx = sample_indices(5, 16, rng);
  ASSERT_EQ(idx.size(), 16u);
  for (std::size_t i : idx) EXPECT_LT(i, 5u);
  EXPECT_THROW(sample_indices(0, 4, rng), DataError);
}

TEST(Sampling, SameRngSeedSameBatch) {
  const DomainBenchmark bench = generate_benchmark(small_config());
  Rng a(10), b(10);
  const TrainBatch x = sample_batch(bench.sources_excluding(0), {16, 16}, a);
  const TrainBatch y = sample_batch(bench.sources_excluding(0), {16, 16}, b);
  EXPECT_EQ(x.labeled_refs, y.labeled_refs);
  EXPECT_EQ(x.unlabeled_refs, y.unlabeled_refs);
}

TEST(Exchange, CsvRoundTripIsLossless) {
  const DomainBenchmark bench = generate_benchmark(small_config());
  const auto dir = std::filesystem::temp_directory_path() / "upcsc_exchange_test";
  std::filesystem::remove_all(dir);
  export_benchmark(bench, dir.string());
  EXPECT_TRUE(std::filesystem::exists(dir / "domain0_unlabeled_truth.csv"));
  const DomainBenchmark back = import_benchmark(dir.string());
  ASSERT_EQ(back.num_domains(), bench.num_domains());
  for (std::size_t d = 0; d < bench.num_domains(); ++d) {
    EXPECT_EQ(back.domain(d).labeled.x, bench.domain(d).labeled.x);
    EXPECT_EQ(back.domain(d).labeled.y, bench.domain(d).labeled.y);
    EXPECT_EQ(back.domain(d).unlabeled.x, bench.domain(d).unlabeled.x);
    EXPECT_EQ(analysis::TruthAccess::unlabeled_truth(back.domain(d).unlabeled),
              analysis::TruthAccess::unlabeled_truth(bench.domain(d).unlabeled));
    EXPECT_EQ(back.domain(d).test.x, bench.domain(d).test.x);
    EXPECT_EQ(back.domain(d).test.y, bench.domain(d).test.y);
  }
  std::filesystem::remove_all(dir);
}

TEST(Exchange, UnlabeledCsvHidesLabels) {
  const DomainBenchmark bench = generate_benchmark(small_config());
  const auto dir = std::filesystem::temp_directory_path() / "upcsc_exchange_hidden";
  std::filesystem::remove_all(dir);
  export_benchmark(bench, dir.string());
  std::ifstream in(dir / "domain0_unlabeled.csv");
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line.substr(line.rfind(',') + 1), "label");
  while (std::getline(in, line)) ASSERT_EQ(line.substr(line.rfind(',') + 1), "-1");
  std::filesystem::remove_all(dir);
}
