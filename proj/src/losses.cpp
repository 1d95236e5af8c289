#include "upcsc/losses.hpp"

#include <algorithm>
#include <cmath>

namespace upcsc {

ClassSet candidate_set(const RowVector& confidence) {
  const double chance = 1.0 / static_cast<double>(confidence.size());
  ClassSet set;
  for (Eigen::Index c = 0; c < confidence.size(); ++c)
    if (confidence(c) > chance) set.insert(static_cast<std::size_t>(c));
  return set;
}

int argmax_lowest(const RowVector& row) {
  Eigen::Index best = 0;
  for (Eigen::Index c = 1; c < row.size(); ++c)
    if (row(c) > row(best)) best = c;
  return static_cast<int>(best);
}

Labels BatchPartition::pseudo_labels() const {
  Labels out;
  out.reserve(confident.size());
  for (const auto& s : confident) out.push_back(s.pseudo_label);
  return out;
}

std::vector<ClassSet> BatchPartition::candidate_sets() const {
  std::vector<ClassSet> out;
  out.reserve(unconfident.size());
  for (const auto& s : unconfident) out.push_back(s.candidates);
  return out;
}

std::size_t BatchPartition::degenerate_uniform() const {
  return static_cast<std::size_t>(
      std::count_if(unconfident.begin(), unconfident.end(), [](const auto& s) { return s.candidates.empty(); }));
}

BatchPartition partition_unlabeled(const Matrix& confidence, double tau) {
  const auto num_classes = static_cast<std::size_t>(confidence.cols());
  if (num_classes < 2 || num_classes > 64) throw ConfigError("partition: class count must lie in [2, 64]");
  const double chance = 1.0 / static_cast<double>(num_classes);
  if (!(tau > chance && tau < 1.0)) throw ConfigError("partition: tau must lie in (1/C, 1)");
  BatchPartition part;
  part.tau = tau;
  part.num_classes = num_classes;
  for (Eigen::Index i = 0; i < confidence.rows(); ++i) {
    const RowVector row = confidence.row(i);
    const auto index = static_cast<std::size_t>(i);
    if (row.maxCoeff() >= tau)
      part.confident.push_back({index, argmax_lowest(row)});
    else
      part.unconfident.push_back({index, candidate_set(row)});
  }
  return part;
}

// ---------------------------------------------------------------------------

namespace {

Matrix gather_rows(const Matrix& m, const std::vector<std::size_t>& rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t k = 0; k < rows.size(); ++k) out.row(static_cast<Eigen::Index>(k)) = m.row(static_cast<Eigen::Index>(rows[k]));
  return out;
}

void scatter_add_rows(Matrix& target, const std::vector<std::size_t>& rows, const Matrix& values,
                      Eigen::Index offset = 0) {
  for (std::size_t k = 0; k < rows.size(); ++k)
    target.row(static_cast<Eigen::Index>(rows[k])) += values.row(static_cast<Eigen::Index>(k) + offset);
}

/*
 * One anchor of a proxy contrastive term, -log(e^{a.p} / (e^{a.p} + sum_n e^{a.n})),
 * with its gradient scaled by `weight` accumulated into the anchor, positive and
 * negative rows. Pools may alias the anchor matrix.
 */
double contrastive_anchor(const Matrix& anchors, Eigen::Index i, const RowVector& positive, const Matrix& pool_a,
                          const std::vector<std::size_t>& neg_a, const Matrix& pool_b,
                          const std::vector<std::size_t>& neg_b, double weight, Matrix& d_anchors,
                          RowVector& d_positive, Matrix& d_pool_a, Matrix& d_pool_b) {
  const auto a = anchors.row(i);
  const double s0 = a.dot(positive);
  std::vector<double> sa(neg_a.size()), sb(neg_b.size());
  double top = s0;
  for (std::size_t k = 0; k < neg_a.size(); ++k) top = std::max(top, sa[k] = a.dot(pool_a.row(static_cast<Eigen::Index>(neg_a[k]))));
  for (std::size_t k = 0; k < neg_b.size(); ++k) top = std::max(top, sb[k] = a.dot(pool_b.row(static_cast<Eigen::Index>(neg_b[k]))));
  double sum = std::exp(s0 - top);
  for (double s : sa) sum += std::exp(s - top);
  for (double s : sb) sum += std::exp(s - top);
  const double lse = top + std::log(sum);

  const double q0 = std::exp(s0 - lse);
  RowVector d_a = (q0 - 1.0) * positive;
  d_positive += weight * (q0 - 1.0) * a;
  for (std::size_t k = 0; k < neg_a.size(); ++k) {
    const double q = std::exp(sa[k] - lse);
    const auto j = static_cast<Eigen::Index>(neg_a[k]);
    d_a += q * pool_a.row(j);
    d_pool_a.row(j) += weight * q * a;
  }
  for (std::size_t k = 0; k < neg_b.size(); ++k) {
    const double q = std::exp(sb[k] - lse);
    const auto j = static_cast<Eigen::Index>(neg_b[k]);
    d_a += q * pool_b.row(j);
    d_pool_b.row(j) += weight * q * a;
  }
  d_anchors.row(i) += weight * d_a;
  return lse - s0;
}

void require_unit_rows(const Matrix& m, const char* what) {
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    if (std::abs(m.row(i).norm() - 1.0) > 1e-8) throw DegenerateInputError(std::string(what) + ": rows must be unit-norm");
}

}  // namespace

CrossEntropy cross_entropy(const Matrix& logits, const Labels& labels) {
  if (static_cast<std::size_t>(logits.rows()) != labels.size()) throw ShapeError("cross_entropy: label count mismatch");
  CrossEntropy ce;
  ce.d_logits = Matrix::Zero(logits.rows(), logits.cols());
  if (labels.empty()) return ce;
  const Matrix logp = log_softmax_rows(logits);
  const double n = static_cast<double>(labels.size());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= logits.cols()) throw std::out_of_range("cross_entropy: label out of range");
    ce.value -= logp(i, y) / n;
    ce.d_logits.row(i) = logp.row(i).array().exp() / n;
    ce.d_logits(i, y) -= 1.0 / n;
  }
  return ce;
}

ModelLoss supervised_loss(const ModelState& state, const Matrix& x, const Labels& y) {
  ModelLoss out{0.0, zeros_like(state)};
  if (y.empty()) return out;
  const FeaturizerTrace trace = featurize_traced(state, x);
  const CrossEntropy ce = cross_entropy(class_logits(state, trace.features), y);
  out.value = ce.value;
  out.grads.proxies.noalias() += ce.d_logits.transpose() * trace.features;
  featurize_backward(state, trace, ce.d_logits * state.proxies, out.grads);
  return out;
}

ConsistencyLoss consistency_loss(const ModelState& state, const Matrix& weak_view, const Matrix& strong_view,
                                 double tau) {
  require_same_shape(weak_view, strong_view, "consistency_loss");
  ConsistencyLoss out{0.0, zeros_like(state), {}};
  out.partition = partition_unlabeled(class_confidence(state, featurize(state, weak_view)), tau);
  if (out.partition.confident.empty()) return out;
  std::vector<std::size_t> rows;
  for (const auto& s : out.partition.confident) rows.push_back(s.index);
  const ModelLoss ce = supervised_loss(state, gather_rows(strong_view, rows), out.partition.pseudo_labels());
  out.value = ce.value;
  out.grads = ce.grads;
  return out;
}

ConsistencyLoss consistency_loss(const ModelState& state, const Matrix& x_u, double tau, const AugmentConfig& aug,
                                 Rng& rng) {
  const Matrix weak = weak_augment(x_u, aug.weak_sigma, rng);
  const Matrix strong = strong_augment(x_u, aug.strong_sigma, aug.strong_dropout, rng);
  return consistency_loss(state, weak, strong, tau);
}

double pcl_reference_loss(const Matrix& z, const Matrix& w, const Labels& labels) {
  if (static_cast<std::size_t>(z.rows()) != labels.size()) throw ShapeError("pcl_reference_loss: label count mismatch");
  if (labels.empty()) return 0.0;
  double total = 0.0;
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const int yi = labels[static_cast<std::size_t>(i)];
    const double pos = std::exp(z.row(i).dot(w.row(yi)));
    double r = 0.0;
    for (Eigen::Index j = 0; j < z.rows(); ++j)
      if (labels[static_cast<std::size_t>(j)] != yi) r += std::exp(z.row(i).dot(z.row(j)));
    total += std::log(pos / (pos + r));
  }
  return -total / static_cast<double>(z.rows());
}

NegativePairs upc_negative_pairs(const Labels& pseudo, const std::vector<ClassSet>& unconfident_candidates) {
  NegativePairs pairs;
  pairs.confident.resize(pseudo.size());
  pairs.unconfident.resize(pseudo.size());
  for (std::size_t i = 0; i < pseudo.size(); ++i) {
    for (std::size_t j = 0; j < pseudo.size(); ++j)
      if (pseudo[j] != pseudo[i]) pairs.confident[i].push_back(j);
    const auto yi = static_cast<std::size_t>(pseudo[i]);
    for (std::size_t j = 0; j < unconfident_candidates.size(); ++j)
      if (!unconfident_candidates[j].contains(yi)) pairs.unconfident[i].push_back(j);
  }
  return pairs;
}

NegativePairs sc_negative_pairs(const std::vector<ClassSet>& unconfident_candidates, const Labels& pseudo) {
  NegativePairs pairs;
  const std::size_t n = unconfident_candidates.size();
  pairs.confident.resize(n);
  pairs.unconfident.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const ClassSet ci = unconfident_candidates[i];
    for (std::size_t j = 0; j < pseudo.size(); ++j)
      if (!ci.contains(static_cast<std::size_t>(pseudo[j]))) pairs.confident[i].push_back(j);
    for (std::size_t j = 0; j < n; ++j)
      if (!unconfident_candidates[j].intersects(ci)) pairs.unconfident[i].push_back(j);
  }
  return pairs;
}

UpcLoss upc_loss(const Matrix& z_uc, const Matrix& w, const Labels& pseudo, const Matrix& z_uu,
                 const std::vector<ClassSet>& candidates) {
  if (static_cast<std::size_t>(z_uc.rows()) != pseudo.size()) throw ShapeError("upc_loss: pseudo label count mismatch");
  if (static_cast<std::size_t>(z_uu.rows()) != candidates.size()) throw ShapeError("upc_loss: candidate count mismatch");
  UpcLoss out;
  out.d_z_uc = Matrix::Zero(z_uc.rows(), z_uc.cols());
  out.d_w = Matrix::Zero(w.rows(), w.cols());
  out.d_z_uu = Matrix::Zero(z_uu.rows(), z_uu.cols());
  if (pseudo.empty()) return out;
  require_unit_rows(z_uc, "upc_loss");
  require_unit_rows(z_uu, "upc_loss");

  const NegativePairs pairs = upc_negative_pairs(pseudo, candidates);
  const double weight = 1.0 / static_cast<double>(pseudo.size());
  for (std::size_t i = 0; i < pseudo.size(); ++i) {
    const int y = pseudo[i];
    if (y < 0 || y >= w.rows()) throw std::out_of_range("upc_loss: pseudo label out of range");
    RowVector d_pos = RowVector::Zero(w.cols());
    out.value += weight * contrastive_anchor(z_uc, static_cast<Eigen::Index>(i), w.row(y), z_uc, pairs.confident[i], z_uu,
                                             pairs.unconfident[i], weight, out.d_z_uc, d_pos, out.d_z_uc, out.d_z_uu);
    out.d_w.row(y) += d_pos;
  }
  return out;
}

std::optional<RowVector> surrogate_class(const RowVector& confidence, ClassSet candidates, const Matrix& w) {
  if (candidates.empty()) return std::nullopt;
  if (confidence.size() != w.rows()) throw ShapeError("surrogate_class: confidence width must equal proxy count");
  RowVector sc = RowVector::Zero(w.cols());
  for (Eigen::Index c = 0; c < w.rows(); ++c)
    if (candidates.contains(static_cast<std::size_t>(c))) sc += confidence(c) * w.row(c);
  return sc;
}

Matrix surrogate_classes(const Matrix& confidences, const std::vector<ClassSet>& candidates, const Matrix& w) {
  if (static_cast<std::size_t>(confidences.rows()) != candidates.size()) throw ShapeError("surrogate_classes: row count mismatch");
  Matrix out = Matrix::Zero(confidences.rows(), w.cols());
  for (Eigen::Index i = 0; i < confidences.rows(); ++i)
    if (auto sc = surrogate_class(confidences.row(i), candidates[static_cast<std::size_t>(i)], w)) out.row(i) = *sc;
  return out;
}

void surrogate_class_backward(const Matrix& confidences, const std::vector<ClassSet>& candidates, const Matrix& d_sc,
                              Matrix& d_w) {
  for (Eigen::Index i = 0; i < confidences.rows(); ++i)
    for (Eigen::Index c = 0; c < d_w.rows(); ++c)
      if (candidates[static_cast<std::size_t>(i)].contains(static_cast<std::size_t>(c)))
        d_w.row(c) += confidences(i, c) * d_sc.row(i);
}

ScLoss sc_loss(const Matrix& z_uu, const Matrix& sc, const std::vector<ClassSet>& candidates, const Matrix& z_uc,
               const Labels& pseudo) {
  if (static_cast<std::size_t>(z_uu.rows()) != candidates.size()) throw ShapeError("sc_loss: candidate count mismatch");
  if (static_cast<std::size_t>(z_uc.rows()) != pseudo.size()) throw ShapeError("sc_loss: pseudo label count mismatch");
  require_same_shape(z_uu, sc, "sc_loss");
  ScLoss out;
  out.d_z_uu = Matrix::Zero(z_uu.rows(), z_uu.cols());
  out.d_sc = Matrix::Zero(sc.rows(), sc.cols());
  out.d_z_uc = Matrix::Zero(z_uc.rows(), z_uc.cols());
  out.anchors = static_cast<std::size_t>(std::count_if(candidates.begin(), candidates.end(), [](ClassSet c) { return !c.empty(); }));
  if (out.anchors == 0) return out;
  require_unit_rows(z_uu, "sc_loss");
  require_unit_rows(z_uc, "sc_loss");

  const NegativePairs pairs = sc_negative_pairs(candidates, pseudo);
  const double weight = 1.0 / static_cast<double>(out.anchors);
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    if (candidates[i].empty()) continue;
    const auto row = static_cast<Eigen::Index>(i);
    RowVector d_pos = RowVector::Zero(sc.cols());
    out.value += weight * contrastive_anchor(z_uu, row, sc.row(row), z_uc, pairs.confident[i], z_uu, pairs.unconfident[i],
                                             weight, out.d_z_uu, d_pos, out.d_z_uc, out.d_z_uu);
    out.d_sc.row(row) += d_pos;
  }
  return out;
}

// ---------------------------------------------------------------------------

std::string method_name(Method m) {
  switch (m) {
    case Method::SupervisedOnly: return "supervised-only";
    case Method::FixMatch: return "fixmatch";
    case Method::FixMatchUpc: return "fixmatch+upc";
    case Method::FixMatchSc: return "fixmatch+sc";
    case Method::FixMatchUpcsc: return "fixmatch+upcsc";
  }
  return "unknown";
}

Method parse_method(const std::string& name) {
  for (Method m : {Method::SupervisedOnly, Method::FixMatch, Method::FixMatchUpc, Method::FixMatchSc, Method::FixMatchUpcsc})
    if (method_name(m) == name) return m;
  throw ConfigError("unknown method '" + name + "'");
}

MethodFlags MethodFlags::of(Method m) {
  switch (m) {
    case Method::SupervisedOnly: return {true, false, false, false};
    case Method::FixMatch: return {true, true, false, false};
    case Method::FixMatchUpc: return {true, true, true, false};
    case Method::FixMatchSc: return {true, true, false, true};
    case Method::FixMatchUpcsc: return {true, true, true, true};
  }
  return {};
}

AugmentedBatch augment_batch(const TrainBatch& batch, const AugmentConfig& aug, Rng& rng) {
  AugmentedBatch out;
  out.labeled_x = batch.labeled_x;
  out.labeled_y = batch.labeled_y;
  out.weak = weak_augment(batch.unlabeled_x, aug.weak_sigma, rng);
  out.strong = strong_augment(batch.unlabeled_x, aug.strong_sigma, aug.strong_dropout, rng);
  return out;
}

PseudoTargets compute_targets(const ModelState& state, const Matrix& weak_view, double tau) {
  PseudoTargets t;
  t.weak_confidence = class_confidence(state, featurize(state, weak_view));
  t.partition = partition_unlabeled(t.weak_confidence, tau);
  return t;
}

TotalLoss total_loss(const ModelState& state, const AugmentedBatch& batch, const PseudoTargets& targets,
                     const MethodFlags& flags) {
  TotalLoss out{{}, zeros_like(state)};
  LossBreakdown& lb = out.breakdown;
  const BatchPartition& part = targets.partition;
  lb.n_uc = part.confident.size();
  lb.n_uu = part.unconfident.size();
  lb.degenerate_uniform = part.degenerate_uniform();

  if (flags.sup && !batch.labeled_y.empty()) {
    const ModelLoss sup = supervised_loss(state, batch.labeled_x, batch.labeled_y);
    lb.l_sup = sup.value;
    out.grads = sup.grads;
  }

  const bool contrastive = flags.upc || flags.sc;
  if (!flags.unsup && !contrastive) {
    lb.l_total = lb.l_sup + lb.l_unsup + lb.l_upc + lb.l_sc;
    return out;
  }

  std::vector<std::size_t> uc_rows, uu_rows;
  for (const auto& s : part.confident) uc_rows.push_back(s.index);
  for (const auto& s : part.unconfident) uu_rows.push_back(s.index);

  const FeaturizerTrace strong = featurize_traced(state, batch.strong);
  Matrix d_strong_features = Matrix::Zero(strong.features.rows(), strong.features.cols());

  if (flags.unsup && !uc_rows.empty()) {
    const CrossEntropy ce = cross_entropy(class_logits(state, gather_rows(strong.features, uc_rows)), part.pseudo_labels());
    lb.l_unsup = ce.value;
    const Matrix uc_features = gather_rows(strong.features, uc_rows);
    out.grads.proxies.noalias() += ce.d_logits.transpose() * uc_features;
    scatter_add_rows(d_strong_features, uc_rows, ce.d_logits * state.proxies);
  }

  if (contrastive && (!uc_rows.empty() || !uu_rows.empty())) {
    const FeaturizerTrace weak = featurize_traced(state, batch.weak);
    const ProjectionTrace pw = project_traced(state.feature_projector, weak.features);
    const ProjectionTrace ps = project_traced(state.feature_projector, strong.features);
    const ProjectionTrace proxy = project_traced(state.classifier_projector, state.proxies);
    const Matrix& w = proxy.embedding;

    // Contrastive elements: weak rows first, then strong rows, for each partition side.
    auto stack = [](const Matrix& a_full, const Matrix& b_full, const std::vector<std::size_t>& rows) {
      Matrix out(static_cast<Eigen::Index>(2 * rows.size()), a_full.cols());
      const auto n = static_cast<Eigen::Index>(rows.size());
      if (n > 0) {
        out.topRows(n) = gather_rows(a_full, rows);
        out.bottomRows(n) = gather_rows(b_full, rows);
      }
      return out;
    };
    const Matrix z_uc = stack(pw.embedding, ps.embedding, uc_rows);
    const Matrix z_uu = stack(pw.embedding, ps.embedding, uu_rows);
    Labels pseudo = part.pseudo_labels();
    pseudo.insert(pseudo.end(), pseudo.begin(), pseudo.end());
    std::vector<ClassSet> cands = part.candidate_sets();
    cands.insert(cands.end(), cands.begin(), cands.end());

    Matrix d_z_uc = Matrix::Zero(z_uc.rows(), z_uc.cols());
    Matrix d_z_uu = Matrix::Zero(z_uu.rows(), z_uu.cols());
    Matrix d_w = Matrix::Zero(w.rows(), w.cols());

    if (flags.upc && !uc_rows.empty()) {
      const UpcLoss upc = upc_loss(z_uc, w, pseudo, z_uu, cands);
      lb.l_upc = upc.value;
      d_z_uc += upc.d_z_uc;
      d_z_uu += upc.d_z_uu;
      d_w += upc.d_w;
    }
    if (flags.sc && !uu_rows.empty()) {
      const Matrix uu_conf = gather_rows(targets.weak_confidence, uu_rows);
      Matrix conf2(2 * uu_conf.rows(), uu_conf.cols());
      conf2 << uu_conf, uu_conf;
      const Matrix sc = surrogate_classes(conf2, cands, w);
      const ScLoss scl = sc_loss(z_uu, sc, cands, z_uc, pseudo);
      lb.l_sc = scl.value;
      d_z_uu += scl.d_z_uu;
      d_z_uc += scl.d_z_uc;
      surrogate_class_backward(conf2, cands, scl.d_sc, d_w);
    }

    Matrix d_weak_embed = Matrix::Zero(pw.embedding.rows(), pw.embedding.cols());
    Matrix d_strong_embed = Matrix::Zero(ps.embedding.rows(), ps.embedding.cols());
    const auto nuc = static_cast<Eigen::Index>(uc_rows.size());
    const auto nuu = static_cast<Eigen::Index>(uu_rows.size());
    scatter_add_rows(d_weak_embed, uc_rows, d_z_uc, 0);
    scatter_add_rows(d_strong_embed, uc_rows, d_z_uc, nuc);
    scatter_add_rows(d_weak_embed, uu_rows, d_z_uu, 0);
    scatter_add_rows(d_strong_embed, uu_rows, d_z_uu, nuu);

    const Matrix d_weak_features =
        project_backward(state.feature_projector, weak.features, pw, d_weak_embed, out.grads.feature_projector);
    d_strong_features +=
        project_backward(state.feature_projector, strong.features, ps, d_strong_embed, out.grads.feature_projector);
    out.grads.proxies += project_backward(state.classifier_projector, state.proxies, proxy, d_w, out.grads.classifier_projector);
    featurize_backward(state, weak, d_weak_features, out.grads);
  }

  featurize_backward(state, strong, d_strong_features, out.grads);
  lb.l_total = lb.l_sup + lb.l_unsup + lb.l_upc + lb.l_sc;
  return out;
}

TotalLoss total_loss(const ModelState& state, const TrainBatch& batch, const MethodFlags& flags, double tau,
                     const AugmentConfig& aug, Rng& rng) {
  const AugmentedBatch views = augment_batch(batch, aug, rng);
  const PseudoTargets targets = compute_targets(state, views.weak, tau);
  return total_loss(state, views, targets, flags);
}

}  // namespace upcsc
