#include "upcsc/analysis.hpp"

#include "upcsc/io.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>

namespace upcsc::analysis {

void ConfidenceLog::append(const Matrix& confidences, const Labels& truths, std::size_t epoch, std::size_t domain) {
  if (static_cast<std::size_t>(confidences.rows()) != truths.size()) throw ShapeError("confidence log: truth count mismatch");
  if (num_classes == 0) num_classes = static_cast<std::size_t>(confidences.cols());
  if (static_cast<std::size_t>(confidences.cols()) != num_classes) throw ShapeError("confidence log: class count mismatch");
  for (Eigen::Index i = 0; i < confidences.rows(); ++i)
    records.push_back({confidences.row(i), truths[static_cast<std::size_t>(i)], epoch, domain, static_cast<std::size_t>(i)});
}

void ConfidenceLog::append(const Matrix& confidences, const UnlabeledSplit& split, std::size_t epoch, std::size_t domain) {
  append(confidences, TruthAccess::unlabeled_truth(split), epoch, domain);
}

namespace {

double chance(const ConfidenceLog& log) { return 1.0 / static_cast<double>(log.num_classes); }

bool unconfident(const ConfidenceRecord& r, double tau) { return r.confidence.maxCoeff() < tau; }

std::size_t candidate_count(const ConfidenceRecord& r, double threshold) {
  return static_cast<std::size_t>((r.confidence.array() > threshold).count());
}

}  // namespace

double uus_rate(const ConfidenceLog& log, double tau) {
  if (log.empty()) throw DataError("uus_rate: empty log");
  const auto n = std::count_if(log.records.begin(), log.records.end(), [&](const auto& r) { return unconfident(r, tau); });
  return static_cast<double>(n) / static_cast<double>(log.records.size());
}

std::optional<double> inclusion_rate(const ConfidenceLog& log, double tau) {
  std::size_t total = 0;
  std::size_t included = 0;
  for (const auto& r : log.records) {
    if (!unconfident(r, tau)) continue;
    ++total;
    if (r.truth >= 0 && r.confidence(r.truth) > chance(log)) ++included;
  }
  if (total == 0) return std::nullopt;
  return static_cast<double>(included) / static_cast<double>(total);
}

std::optional<double> chance_inclusion(const ConfidenceLog& log, double tau) {
  std::size_t total = 0;
  std::size_t sizes = 0;
  for (const auto& r : log.records) {
    if (!unconfident(r, tau)) continue;
    ++total;
    sizes += candidate_count(r, chance(log));
  }
  if (total == 0) return std::nullopt;
  return static_cast<double>(sizes) / static_cast<double>(total) / static_cast<double>(log.num_classes);
}

std::size_t CandidateHistogram::total() const {
  std::size_t n = 0;
  for (const auto& [size, count] : counts) n += count;
  return n;
}

std::optional<std::size_t> CandidateHistogram::median() const {
  const std::size_t n = total();
  if (n == 0) return std::nullopt;
  const std::size_t rank = (n - 1) / 2;
  std::size_t seen = 0;
  for (const auto& [size, count] : counts) {
    seen += count;
    if (seen > rank) return size;
  }
  return std::nullopt;
}

CandidateHistogram confusing_class_histogram(const ConfidenceLog& log, double tau) {
  CandidateHistogram hist;
  for (const auto& r : log.records) {
    if (!unconfident(r, tau)) continue;
    const std::size_t k = candidate_count(r, chance(log));
    if (k == 0)
      ++hist.degenerate_uniform;
    else
      ++hist.counts[k];
  }
  return hist;
}

double top1_accuracy(const Matrix& confidences, const Labels& truths) {
  if (static_cast<std::size_t>(confidences.rows()) != truths.size()) throw ShapeError("top1_accuracy: label count mismatch");
  if (truths.empty()) throw DataError("top1_accuracy: empty input");
  std::size_t correct = 0;
  for (Eigen::Index i = 0; i < confidences.rows(); ++i) {
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < confidences.cols(); ++c)
      if (confidences(i, c) > confidences(i, best)) best = c;
    if (best == truths[static_cast<std::size_t>(i)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(truths.size());
}

ConfidenceLog filter(const ConfidenceLog& log, std::optional<std::size_t> epoch, std::optional<std::size_t> domain) {
  ConfidenceLog out;
  out.num_classes = log.num_classes;
  for (const auto& r : log.records)
    if ((!epoch || r.epoch == *epoch) && (!domain || r.domain == *domain)) out.records.push_back(r);
  return out;
}

std::vector<StatRow> summarize(const ConfidenceLog& log, double tau) {
  std::set<std::size_t> epochs, domains;
  for (const auto& r : log.records) {
    epochs.insert(r.epoch);
    domains.insert(r.domain);
  }
  std::vector<StatRow> rows;
  for (std::size_t e : epochs) {
    double uus_sum = 0.0, inc_sum = 0.0;
    std::size_t inc_n = 0;
    for (std::size_t d : domains) {
      const ConfidenceLog part = filter(log, e, d);
      if (part.empty()) continue;
      const std::string dom = std::to_string(d);
      const double uus = uus_rate(part, tau);
      uus_sum += uus;
      rows.push_back({"uus_rate", e, dom, uus});
      if (const auto inc = inclusion_rate(part, tau)) {
        rows.push_back({"inclusion_rate", e, dom, *inc});
        rows.push_back({"chance_inclusion", e, dom, *chance_inclusion(part, tau)});
        inc_sum += *inc;
        ++inc_n;
      }
    }
    const ConfidenceLog pooled = filter(log, e, std::nullopt);
    rows.push_back({"uus_rate", e, "all", uus_rate(pooled, tau)});
    rows.push_back({"uus_rate", e, "mean", uus_sum / static_cast<double>(domains.size())});
    if (const auto inc = inclusion_rate(pooled, tau)) {
      rows.push_back({"inclusion_rate", e, "all", *inc});
      rows.push_back({"chance_inclusion", e, "all", *chance_inclusion(pooled, tau)});
    }
    if (inc_n > 0) rows.push_back({"inclusion_rate", e, "mean", inc_sum / static_cast<double>(inc_n)});
  }
  return rows;
}

void write_stats_csv(const std::vector<StatRow>& rows, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  out << "statistic,epoch,domain,value\n";
  for (const auto& r : rows) out << r.statistic << ',' << r.epoch << ',' << r.domain << ',' << io::format_double(r.value) << '\n';
}

void write_histogram_csv(const CandidateHistogram& hist, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  out << "set_size,count\n";
  if (hist.degenerate_uniform > 0) out << 0 << ',' << hist.degenerate_uniform << '\n';
  for (const auto& [size, count] : hist.counts) out << size << ',' << count << '\n';
}

ConfidenceLog read_confidence_log(const std::string& path, const std::string& data_dir) {
  const io::CsvTable table = io::read_csv(path);
  const std::size_t c_epoch = table.column("epoch");
  const std::size_t c_domain = table.column("domain");
  const std::size_t c_index = table.column("sample_index");
  std::vector<std::size_t> conf_cols;
  for (std::size_t k = 0;; ++k) {
    const auto it = std::find(table.header.begin(), table.header.end(), "c_" + std::to_string(k));
    if (it == table.header.end()) break;
    conf_cols.push_back(static_cast<std::size_t>(it - table.header.begin()));
  }
  if (conf_cols.size() < 2) throw DataError(path + ": expected confidence columns c_0..c_{C-1}");

  std::map<std::size_t, Labels> truths;
  auto truth_of = [&](std::size_t d) -> const Labels& {
    auto it = truths.find(d);
    if (it != truths.end()) return it->second;
    const auto file = (std::filesystem::path(data_dir) / ("domain" + std::to_string(d) + "_unlabeled_truth.csv")).string();
    Labels labels;
    for (const auto& row : io::read_csv(file).rows) labels.push_back(static_cast<int>(io::parse_int(row.at(0))));
    return truths.emplace(d, std::move(labels)).first->second;
  };

  ConfidenceLog log;
  log.num_classes = conf_cols.size();
  for (const auto& row : table.rows) {
    ConfidenceRecord r;
    r.epoch = static_cast<std::size_t>(io::parse_int(row[c_epoch]));
    r.domain = static_cast<std::size_t>(io::parse_int(row[c_domain]));
    const auto idx = static_cast<std::size_t>(io::parse_int(row[c_index]));
    const Labels& t = truth_of(r.domain);
    if (idx >= t.size()) throw DataError(path + ": sample_index beyond truth sidecar");
    r.truth = t[idx];
    r.sample_index = idx;
    r.confidence.resize(static_cast<Eigen::Index>(conf_cols.size()));
    for (std::size_t k = 0; k < conf_cols.size(); ++k) r.confidence(static_cast<Eigen::Index>(k)) = io::parse_double(row[conf_cols[k]]);
    log.records.push_back(std::move(r));
  }
  return log;
}

}  // namespace upcsc::analysis
