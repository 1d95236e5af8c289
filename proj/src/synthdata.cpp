#include "upcsc/synthdata.hpp"

#include "upcsc/io.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

namespace upcsc {

void BenchmarkConfig::validate() const {
  if (num_domains < 2) throw ConfigError("benchmark: num_domains must be at least 2");
  if (num_classes < 2) throw ConfigError("benchmark: num_classes must be at least 2");
  if (num_classes > 64) throw ConfigError("benchmark: at most 64 classes are supported");
  if (latent_dim == 0) throw ConfigError("benchmark: latent_dim must be positive");
  if (labels_per_class == 0) throw ConfigError("benchmark: labels_per_class must be positive");
  if (!(class_separation > 0.0)) throw ConfigError("benchmark: class_separation must be positive");
  if (!(noise_sigma > 0.0)) throw ConfigError("benchmark: noise_sigma must be positive");
  if (rotation_strength < 0.0 || scale_strength < 0.0 || scale_strength > 1.0 || shift_sigma < 0.0)
    throw ConfigError("benchmark: invalid domain-shift strengths");
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw ConfigError("benchmark: test_fraction must lie in (0,1)");
  if (labels_per_class + test_per_class() >= samples_per_class_per_domain)
    throw ConfigError("benchmark: labeled + test samples leave no unlabeled data");
  if (unlabeled_per_class() <= labels_per_class)
    throw ConfigError("benchmark: unlabeled split must be larger than the labeled split");
}

std::size_t BenchmarkConfig::test_per_class() const {
  return static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(samples_per_class_per_domain)));
}

std::size_t BenchmarkConfig::unlabeled_per_class() const {
  const std::size_t used = labels_per_class + test_per_class();
  return used >= samples_per_class_per_domain ? 0 : samples_per_class_per_domain - used;
}

DomainBenchmark::DomainBenchmark(BenchmarkConfig config, Matrix prototypes, std::vector<DomainData> domains)
    : config_(std::move(config)), prototypes_(std::move(prototypes)), domains_(std::move(domains)),
      access_(domains_.size(), 0) {}

const DomainData& DomainBenchmark::domain(std::size_t d) const {
  if (d >= domains_.size()) throw std::out_of_range("benchmark: domain " + std::to_string(d) + " out of range");
  ++access_[d];
  return domains_[d];
}

SourceView DomainBenchmark::sources_excluding(std::size_t target) const {
  if (target >= domains_.size()) throw std::out_of_range("benchmark: target " + std::to_string(target) + " out of range");
  std::vector<std::size_t> ids;
  for (std::size_t d = 0; d < domains_.size(); ++d)
    if (d != target) ids.push_back(d);
  return SourceView(this, std::move(ids));
}

namespace {

constexpr std::uint64_t kPrototypeStream = 0x70726f746fULL;
constexpr std::uint64_t kRotationStream = 0x726f74ULL;
constexpr std::uint64_t kSampleStream = 0x73616d70ULL;

Matrix gaussian_matrix(Eigen::Index rows, Eigen::Index cols, double sigma, Rng& rng) {
  std::normal_distribution<double> dist(0.0, sigma);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

/*
 * Cayley transform of a random skew-symmetric generator: exactly orthogonal,
 * and reduces to the identity at strength 0.
 */
Matrix random_rotation(std::size_t dim, double strength, std::uint64_t seed) {
  const auto n = static_cast<Eigen::Index>(dim);
  if (strength == 0.0) return Matrix::Identity(n, n);
  Rng rng(seed);
  const Matrix g = gaussian_matrix(n, n, 1.0, rng);
  const Matrix skew = strength * (g - g.transpose()) / (2.0 * std::sqrt(static_cast<double>(dim)));
  const Matrix eye = Matrix::Identity(n, n);
  return (eye - skew).partialPivLu().solve(eye + skew);
}

}  // namespace

Matrix make_prototypes(const BenchmarkConfig& cfg) {
  Rng rng(derive_seed({cfg.master_seed, kPrototypeStream}));
  Matrix protos = gaussian_matrix(static_cast<Eigen::Index>(cfg.num_classes), static_cast<Eigen::Index>(cfg.latent_dim),
                                  1.0, rng);
  for (Eigen::Index c = 0; c < protos.rows(); ++c) protos.row(c) *= cfg.class_separation / protos.row(c).norm();
  return protos;
}

std::vector<DomainSpec> make_domain_specs(const BenchmarkConfig& cfg) {
  std::vector<DomainSpec> specs;
  const auto n = static_cast<Eigen::Index>(cfg.latent_dim);
  for (std::size_t d = 0; d < cfg.num_domains; ++d) {
    const std::uint64_t sub = derive_seed({cfg.master_seed, d + 1});
    DomainSpec spec;
    spec.domain_id = d;
    spec.rotation_seed = derive_seed({sub, kRotationStream});
    spec.rotation = random_rotation(cfg.latent_dim, cfg.rotation_strength, spec.rotation_seed);
    Rng rng(derive_seed({sub, 0x7363616c65ULL}));
    std::uniform_real_distribution<double> unit(-1.0, 1.0);
    spec.scale.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) spec.scale(i) = std::exp2(cfg.scale_strength * unit(rng));
    std::normal_distribution<double> shift(0.0, 1.0);
    spec.shift.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) spec.shift(i) = cfg.shift_sigma * shift(rng);
    spec.noise_sigma = cfg.noise_sigma;
    specs.push_back(std::move(spec));
  }
  return specs;
}

Matrix to_latent(const DomainSpec& spec, const Matrix& x) {
  Matrix centered = x.rowwise() - spec.shift.transpose();
  // rotation is orthogonal, so its inverse is its transpose
  Matrix unrotated = centered * spec.rotation;
  return unrotated.array().rowwise() / spec.scale.transpose().array();
}

namespace {

Matrix apply_domain(const DomainSpec& spec, const Matrix& latent) {
  Matrix scaled = latent.array().rowwise() * spec.scale.transpose().array();
  Matrix rotated = scaled * spec.rotation.transpose();
  rotated.rowwise() += spec.shift.transpose();
  return rotated;
}

Matrix gather_rows(const Matrix& m, const std::vector<std::size_t>& rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(rows[i]));
  return out;
}

Labels gather(const Labels& y, const std::vector<std::size_t>& rows) {
  Labels out;
  out.reserve(rows.size());
  for (std::size_t r : rows) out.push_back(y[r]);
  return out;
}

}  // namespace

DomainBenchmark generate_benchmark(const BenchmarkConfig& cfg) {
  cfg.validate();
  const Matrix prototypes = make_prototypes(cfg);
  auto specs = make_domain_specs(cfg);
  const std::size_t per_class = cfg.samples_per_class_per_domain;
  const auto total = static_cast<Eigen::Index>(per_class * cfg.num_classes);

  std::vector<DomainData> domains;
  for (auto& spec : specs) {
    Rng rng(derive_seed({cfg.master_seed, spec.domain_id + 1, kSampleStream}));
    Matrix latent = gaussian_matrix(total, static_cast<Eigen::Index>(cfg.latent_dim), cfg.noise_sigma, rng);
    Labels y(static_cast<std::size_t>(total));
    for (std::size_t c = 0; c < cfg.num_classes; ++c)
      for (std::size_t k = 0; k < per_class; ++k) {
        const auto row = static_cast<Eigen::Index>(c * per_class + k);
        latent.row(row) += prototypes.row(static_cast<Eigen::Index>(c));
        y[static_cast<std::size_t>(row)] = static_cast<int>(c);
      }
    const Matrix x = apply_domain(spec, latent);

    std::vector<std::size_t> labeled_rows, unlabeled_rows, test_rows;
    for (std::size_t c = 0; c < cfg.num_classes; ++c) {
      std::vector<std::size_t> rows(per_class);
      std::iota(rows.begin(), rows.end(), c * per_class);
      std::shuffle(rows.begin(), rows.end(), rng);
      const std::size_t n_lab = cfg.labels_per_class;
      const std::size_t n_test = cfg.test_per_class();
      labeled_rows.insert(labeled_rows.end(), rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(n_lab));
      test_rows.insert(test_rows.end(), rows.begin() + static_cast<std::ptrdiff_t>(n_lab),
                       rows.begin() + static_cast<std::ptrdiff_t>(n_lab + n_test));
      unlabeled_rows.insert(unlabeled_rows.end(), rows.begin() + static_cast<std::ptrdiff_t>(n_lab + n_test), rows.end());
    }
    std::shuffle(labeled_rows.begin(), labeled_rows.end(), rng);
    std::shuffle(unlabeled_rows.begin(), unlabeled_rows.end(), rng);
    std::shuffle(test_rows.begin(), test_rows.end(), rng);

    DomainData data;
    data.labeled = {gather_rows(x, labeled_rows), gather(y, labeled_rows)};
    data.unlabeled = {gather_rows(x, unlabeled_rows), Quarantined<Labels>(gather(y, unlabeled_rows))};
    data.test = {gather_rows(x, test_rows), gather(y, test_rows)};
    data.spec = std::move(spec);
    domains.push_back(std::move(data));
  }
  return DomainBenchmark(cfg, prototypes, std::move(domains));
}

Matrix weak_augment(const Matrix& x, double sigma, Rng& rng) {
  if (sigma == 0.0) return x;
  std::normal_distribution<double> noise(0.0, sigma);
  Matrix out = x;
  for (Eigen::Index i = 0; i < out.size(); ++i) out.data()[i] += noise(rng);
  return out;
}

Matrix strong_augment(const Matrix& x, double sigma, double dropout, Rng& rng) {
  if (dropout < 0.0 || dropout > 1.0) throw std::invalid_argument("strong_augment: dropout must lie in [0,1]");
  Matrix out = weak_augment(x, sigma, rng);
  if (dropout == 0.0) return out;
  std::bernoulli_distribution drop(dropout);
  for (Eigen::Index i = 0; i < out.size(); ++i)
    if (drop(rng)) out.data()[i] = 0.0;
  return out;
}

std::vector<std::size_t> sample_indices(std::size_t split_size, std::size_t count, Rng& rng) {
  if (split_size == 0) throw DataError("sample_batch: empty split");
  std::vector<std::size_t> out;
  out.reserve(count);
  if (split_size >= count) {
    // partial Fisher-Yates
    std::vector<std::size_t> pool(split_size);
    std::iota(pool.begin(), pool.end(), 0);
    for (std::size_t i = 0; i < count; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, split_size - 1);
      std::swap(pool[i], pool[pick(rng)]);
      out.push_back(pool[i]);
    }
  } else {
    std::uniform_int_distribution<std::size_t> pick(0, split_size - 1);
    for (std::size_t i = 0; i < count; ++i) out.push_back(pick(rng));
  }
  return out;
}

TrainBatch sample_batch(const SourceView& sources, const BatchCounts& counts, Rng& rng) {
  if (sources.size() == 0) throw DataError("sample_batch: no source domains");
  const auto cols = sources.domain(0).labeled.x.cols();
  TrainBatch batch;
  batch.labeled_x.resize(static_cast<Eigen::Index>(counts.labeled * sources.size()), cols);
  batch.unlabeled_x.resize(static_cast<Eigen::Index>(counts.unlabeled * sources.size()), cols);
  Eigen::Index lrow = 0;
  Eigen::Index urow = 0;
  for (std::size_t k = 0; k < sources.size(); ++k) {
    const DomainData& dom = sources.domain(k);
    const std::size_t d = sources.domain_id(k);
    for (std::size_t i : sample_indices(dom.labeled.y.size(), counts.labeled, rng)) {
      batch.labeled_x.row(lrow++) = dom.labeled.x.row(static_cast<Eigen::Index>(i));
      batch.labeled_y.push_back(dom.labeled.y[i]);
      batch.labeled_refs.push_back({d, i});
    }
    for (std::size_t i : sample_indices(static_cast<std::size_t>(dom.unlabeled.x.rows()), counts.unlabeled, rng)) {
      batch.unlabeled_x.row(urow++) = dom.unlabeled.x.row(static_cast<Eigen::Index>(i));
      batch.unlabeled_refs.push_back({d, i});
    }
  }
  return batch;
}

// ---------------------------------------------------------------------------
// CSV exchange

namespace {

namespace fs = std::filesystem;

std::string split_path(const std::string& dir, std::size_t d, const char* split) {
  return (fs::path(dir) / ("domain" + std::to_string(d) + "_" + split + ".csv")).string();
}

void write_split(const std::string& path, const Matrix& x, const Labels* y) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  for (Eigen::Index j = 0; j < x.cols(); ++j) out << "x_" << j << ',';
  out << "label\n";
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    for (Eigen::Index j = 0; j < x.cols(); ++j) out << io::format_double(x(i, j)) << ',';
    out << (y ? (*y)[static_cast<std::size_t>(i)] : -1) << '\n';
  }
}

LabeledSplit read_split(const std::string& path) {
  const io::CsvTable table = io::read_csv(path);
  if (table.header.empty() || table.header.back() != "label") throw DataError(path + ": last column must be 'label'");
  const auto cols = static_cast<Eigen::Index>(table.header.size() - 1);
  LabeledSplit split;
  split.x.resize(static_cast<Eigen::Index>(table.rows.size()), cols);
  for (std::size_t i = 0; i < table.rows.size(); ++i) {
    for (Eigen::Index j = 0; j < cols; ++j)
      split.x(static_cast<Eigen::Index>(i), j) = io::parse_double(table.rows[i][static_cast<std::size_t>(j)]);
    split.y.push_back(static_cast<int>(io::parse_int(table.rows[i].back())));
  }
  return split;
}

}  // namespace

void export_benchmark(const DomainBenchmark& bench, const std::string& dir) {
  fs::create_directories(dir);
  const BenchmarkConfig& cfg = bench.config();
  {
    std::ofstream meta((fs::path(dir) / "benchmark.cfg").string());
    meta << "num_domains = " << cfg.num_domains << "\nnum_classes = " << cfg.num_classes
         << "\nlatent_dim = " << cfg.latent_dim << "\nsamples_per_class_per_domain = " << cfg.samples_per_class_per_domain
         << "\nlabels_per_class = " << cfg.labels_per_class << "\nclass_separation = " << io::format_double(cfg.class_separation)
         << "\nnoise_sigma = " << io::format_double(cfg.noise_sigma)
         << "\nrotation_strength = " << io::format_double(cfg.rotation_strength)
         << "\nscale_strength = " << io::format_double(cfg.scale_strength)
         << "\nshift_sigma = " << io::format_double(cfg.shift_sigma)
         << "\ntest_fraction = " << io::format_double(cfg.test_fraction) << "\nmaster_seed = " << cfg.master_seed << '\n';
  }
  const QuarantineKey key;
  for (std::size_t d = 0; d < bench.num_domains(); ++d) {
    const DomainData& dom = bench.domain(d);
    write_split(split_path(dir, d, "labeled"), dom.labeled.x, &dom.labeled.y);
    write_split(split_path(dir, d, "unlabeled"), dom.unlabeled.x, nullptr);
    write_split(split_path(dir, d, "test"), dom.test.x, &dom.test.y);
    std::ofstream truth(split_path(dir, d, "unlabeled_truth"));
    truth << "label\n";
    for (int y : dom.unlabeled.truth.reveal(key)) truth << y << '\n';
  }
}

DomainBenchmark import_benchmark(const std::string& dir) {
  const auto kv = io::read_key_values((fs::path(dir) / "benchmark.cfg").string());
  auto get = [&](const char* k) -> const std::string& {
    const auto it = kv.find(k);
    if (it == kv.end()) throw DataError(std::string("benchmark.cfg: missing ") + k);
    return it->second;
  };
  BenchmarkConfig cfg;
  cfg.num_domains = static_cast<std::size_t>(io::parse_int(get("num_domains")));
  cfg.num_classes = static_cast<std::size_t>(io::parse_int(get("num_classes")));
  cfg.latent_dim = static_cast<std::size_t>(io::parse_int(get("latent_dim")));
  cfg.samples_per_class_per_domain = static_cast<std::size_t>(io::parse_int(get("samples_per_class_per_domain")));
  cfg.labels_per_class = static_cast<std::size_t>(io::parse_int(get("labels_per_class")));
  cfg.class_separation = io::parse_double(get("class_separation"));
  cfg.noise_sigma = io::parse_double(get("noise_sigma"));
  cfg.rotation_strength = io::parse_double(get("rotation_strength"));
  cfg.scale_strength = io::parse_double(get("scale_strength"));
  cfg.shift_sigma = io::parse_double(get("shift_sigma"));
  cfg.test_fraction = io::parse_double(get("test_fraction"));
  cfg.master_seed = static_cast<std::uint64_t>(io::parse_int(get("master_seed")));
  cfg.validate();

  auto specs = make_domain_specs(cfg);
  std::vector<DomainData> domains;
  for (std::size_t d = 0; d < cfg.num_domains; ++d) {
    DomainData dom;
    dom.labeled = read_split(split_path(dir, d, "labeled"));
    LabeledSplit unl = read_split(split_path(dir, d, "unlabeled"));
    const io::CsvTable truth = io::read_csv(split_path(dir, d, "unlabeled_truth"));
    if (truth.rows.size() != unl.y.size()) throw DataError("truth sidecar row count mismatch for domain " + std::to_string(d));
    Labels labels;
    for (const auto& row : truth.rows) labels.push_back(static_cast<int>(io::parse_int(row.at(0))));
    dom.unlabeled = {std::move(unl.x), Quarantined<Labels>(std::move(labels))};
    dom.test = read_split(split_path(dir, d, "test"));
    dom.spec = std::move(specs[d]);
    domains.push_back(std::move(dom));
  }
  return DomainBenchmark(cfg, make_prototypes(cfg), std::move(domains));
}

}  // namespace upcsc
