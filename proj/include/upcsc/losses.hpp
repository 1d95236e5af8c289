#ifndef UPCSC_LOSSES_HPP
#define UPCSC_LOSSES_HPP

#include "upcsc/model.hpp"
#include "upcsc/numerics.hpp"
#include "upcsc/synthdata.hpp"

#include <bit>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace upcsc {

/// Set of class indices in [0, 64).
class ClassSet {
public:
  constexpr ClassSet() = default;
  static constexpr ClassSet from_bits(std::uint64_t bits) { return ClassSet(bits); }

  constexpr bool contains(std::size_t c) const { return (bits_ >> c) & 1ULL; }
  constexpr void insert(std::size_t c) { bits_ |= 1ULL << c; }
  constexpr bool empty() const { return bits_ == 0; }
  constexpr std::size_t size() const { return static_cast<std::size_t>(std::popcount(bits_)); }
  constexpr bool intersects(ClassSet other) const { return (bits_ & other.bits_) != 0; }
  constexpr std::uint64_t bits() const { return bits_; }

  /// Y \ this, for a label space of num_classes classes.
  constexpr ClassSet complement(std::size_t num_classes) const {
    const std::uint64_t all = num_classes >= 64 ? ~0ULL : ((1ULL << num_classes) - 1);
    return ClassSet(all & ~bits_);
  }

  constexpr bool operator==(const ClassSet&) const = default;

private:
  constexpr explicit ClassSet(std::uint64_t bits) : bits_(bits) {}
  std::uint64_t bits_ = 0;
};

/// Classes whose confidence strictly exceeds chance 1/C.
ClassSet candidate_set(const RowVector& confidence);

struct ConfidentSample {
  std::size_t index;
  int pseudo_label;
};

struct UnconfidentSample {
  std::size_t index;
  ClassSet candidates;
};

/*
 * Split of an unlabeled batch by max confidence against tau. Excluded sets are
 * never stored; they are the complement of the candidate set.
 */
struct BatchPartition {
  std::vector<ConfidentSample> confident;
  std::vector<UnconfidentSample> unconfident;
  double tau = 0.0;
  std::size_t num_classes = 0;

  ClassSet excluded(std::size_t k) const { return unconfident.at(k).candidates.complement(num_classes); }
  Labels pseudo_labels() const;
  std::vector<ClassSet> candidate_sets() const;
  std::size_t degenerate_uniform() const;
};

BatchPartition partition_unlabeled(const Matrix& confidence, double tau);

/// argmax with ties resolved toward the lowest index.
int argmax_lowest(const RowVector& row);

// ---------------------------------------------------------------------------
// Baseline terms

struct ModelLoss {
  double value = 0.0;
  GradientSet grads;
};

/// Mean cross-entropy of softmax(logits) against labels; d_logits is dL/dlogits.
struct CrossEntropy {
  double value = 0.0;
  Matrix d_logits;
};
CrossEntropy cross_entropy(const Matrix& logits, const Labels& labels);

ModelLoss supervised_loss(const ModelState& state, const Matrix& x, const Labels& y);

struct ConsistencyLoss {
  double value = 0.0;
  GradientSet grads;
  BatchPartition partition;
};

/// Pseudo-labels from the weak view (no gradient), cross-entropy on the strong view of confident samples.
ConsistencyLoss consistency_loss(const ModelState& state, const Matrix& weak_view, const Matrix& strong_view,
                                 double tau);
ConsistencyLoss consistency_loss(const ModelState& state, const Matrix& x_u, double tau, const AugmentConfig& aug,
                                 Rng& rng);

// ---------------------------------------------------------------------------
// Contrastive terms. Embedding rows are unit-norm; there is no temperature.

/// Reference proxy-based contrastive loss over a fully labeled batch.
double pcl_reference_loss(const Matrix& z, const Matrix& w, const Labels& labels);

/* Negative partners of each anchor, split by pool. Indices are rows of that pool. */
struct NegativePairs {
  std::vector<std::vector<std::size_t>> confident;
  std::vector<std::vector<std::size_t>> unconfident;
};

/// For confident anchor i: confident j with pseudo_j != pseudo_i, unconfident j with pseudo_i excluded by j.
NegativePairs upc_negative_pairs(const Labels& pseudo, const std::vector<ClassSet>& unconfident_candidates);

/// For unconfident anchor i: confident j with pseudo_j excluded by i, unconfident j with disjoint candidates.
NegativePairs sc_negative_pairs(const std::vector<ClassSet>& unconfident_candidates, const Labels& pseudo);

struct UpcLoss {
  double value = 0.0;
  Matrix d_z_uc;
  Matrix d_w;
  Matrix d_z_uu;
};

UpcLoss upc_loss(const Matrix& z_uc, const Matrix& w, const Labels& pseudo, const Matrix& z_uu,
                 const std::vector<ClassSet>& candidates);

/// Confidence-weighted sum of candidate-class projected proxies; nullopt for an empty candidate set.
std::optional<RowVector> surrogate_class(const RowVector& confidence, ClassSet candidates, const Matrix& w);

/// SC proxies for every unconfident row; rows with empty candidate sets are zero.
Matrix surrogate_classes(const Matrix& confidences, const std::vector<ClassSet>& candidates, const Matrix& w);

/// Chain rule from dL/dSC into dL/dw with the confidence weights held constant.
void surrogate_class_backward(const Matrix& confidences, const std::vector<ClassSet>& candidates,
                              const Matrix& d_sc, Matrix& d_w);

struct ScLoss {
  double value = 0.0;
  Matrix d_z_uu;
  Matrix d_sc;
  Matrix d_z_uc;
  std::size_t anchors = 0;
};

/// Anchors with empty candidate sets are skipped and excluded from the mean.
ScLoss sc_loss(const Matrix& z_uu, const Matrix& sc, const std::vector<ClassSet>& candidates, const Matrix& z_uc,
               const Labels& pseudo);

// ---------------------------------------------------------------------------
// Total objective

enum class Method { SupervisedOnly, FixMatch, FixMatchUpc, FixMatchSc, FixMatchUpcsc };

std::string method_name(Method m);
Method parse_method(const std::string& name);

struct MethodFlags {
  bool sup = true;
  bool unsup = false;
  bool upc = false;
  bool sc = false;

  static MethodFlags of(Method m);
};

struct AugmentedBatch {
  Matrix labeled_x;
  Labels labeled_y;
  Matrix weak;
  Matrix strong;
};

AugmentedBatch augment_batch(const TrainBatch& batch, const AugmentConfig& aug, Rng& rng);

/* Everything derived from the weak view before any loss is evaluated; held constant for differentiation. */
struct PseudoTargets {
  Matrix weak_confidence;
  BatchPartition partition;
};

PseudoTargets compute_targets(const ModelState& state, const Matrix& weak_view, double tau);

struct LossBreakdown {
  double l_sup = 0.0;
  double l_unsup = 0.0;
  double l_upc = 0.0;
  double l_sc = 0.0;
  double l_total = 0.0;
  std::size_t n_uc = 0;
  std::size_t n_uu = 0;
  std::size_t degenerate_uniform = 0;
};

struct TotalLoss {
  LossBreakdown breakdown;
  GradientSet grads;
};

/*
 * L_total = L_sup + L_unsup + L_UPC + L_SC, each term gated by its flag.
 * Weak and strong views both enter the contrastive terms, each inheriting
 * its sample's partition entry.
 */
TotalLoss total_loss(const ModelState& state, const AugmentedBatch& batch, const PseudoTargets& targets,
                     const MethodFlags& flags);

TotalLoss total_loss(const ModelState& state, const TrainBatch& batch, const MethodFlags& flags, double tau,
                     const AugmentConfig& aug, Rng& rng);

}  // namespace upcsc

#endif  // UPCSC_LOSSES_HPP
