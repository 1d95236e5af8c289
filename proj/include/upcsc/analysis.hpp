#ifndef UPCSC_ANALYSIS_HPP
#define UPCSC_ANALYSIS_HPP

#include "upcsc/numerics.hpp"
#include "upcsc/synthdata.hpp"

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace upcsc::analysis {

/// The only reader of quarantined ground truth.
class TruthAccess {
public:
  static const Labels& unlabeled_truth(const UnlabeledSplit& split) { return split.truth.reveal(QuarantineKey{}); }
};

struct ConfidenceRecord {
  RowVector confidence;
  int truth = 0;
  std::size_t epoch = 0;
  std::size_t domain = 0;
  std::size_t sample_index = 0;
};

struct ConfidenceLog {
  std::size_t num_classes = 0;
  std::vector<ConfidenceRecord> records;

  void append(const Matrix& confidences, const UnlabeledSplit& split, std::size_t epoch, std::size_t domain);
  void append(const Matrix& confidences, const Labels& truths, std::size_t epoch, std::size_t domain);
  bool empty() const { return records.empty(); }
};

/// Fraction of rows whose max confidence is below tau.
double uus_rate(const ConfidenceLog& log, double tau);

/// Among unconfident rows, fraction whose true label has confidence above 1/C; nullopt without unconfident rows.
std::optional<double> inclusion_rate(const ConfidenceLog& log, double tau);

/// Mean candidate-set size over unconfident rows divided by C: the inclusion rate of a random set of that size.
std::optional<double> chance_inclusion(const ConfidenceLog& log, double tau);

struct CandidateHistogram {
  std::map<std::size_t, std::size_t> counts;  // |C_i| -> rows, sizes 1..C
  std::size_t degenerate_uniform = 0;         // unconfident rows with an empty candidate set

  std::size_t total() const;
  /// Lower median of the set-size distribution; nullopt when empty.
  std::optional<std::size_t> median() const;
};

CandidateHistogram confusing_class_histogram(const ConfidenceLog& log, double tau);

/// argmax(row) == truth, ties toward the lowest class index.
double top1_accuracy(const Matrix& confidences, const Labels& truths);

/// Restrict a log to one epoch and/or domain.
ConfidenceLog filter(const ConfidenceLog& log, std::optional<std::size_t> epoch, std::optional<std::size_t> domain);

// ---------------------------------------------------------------------------
// CSV surfaces

struct StatRow {
  std::string statistic;
  std::size_t epoch = 0;
  std::string domain;  // domain id, or "all" for pooled (micro) and "mean" for per-domain average (macro)
  double value = 0.0;
};

/// uus_rate, inclusion_rate and chance_inclusion per (epoch, domain) plus micro and macro aggregates.
std::vector<StatRow> summarize(const ConfidenceLog& log, double tau);

void write_stats_csv(const std::vector<StatRow>& rows, const std::string& path);
void write_histogram_csv(const CandidateHistogram& hist, const std::string& path);

/*
 * Confidence log written by the trainer: run_id,target_domain,seed,epoch,domain,sample_index,c_0..c_{C-1}.
 * Truth is joined from <data_dir>/domain<d>_unlabeled_truth.csv by sample_index.
 */
ConfidenceLog read_confidence_log(const std::string& path, const std::string& data_dir);

}  // namespace upcsc::analysis

#endif  // UPCSC_ANALYSIS_HPP
