#ifndef UPCSC_MODEL_HPP
#define UPCSC_MODEL_HPP

#include "upcsc/numerics.hpp"

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace upcsc {

struct ModelDims {
  std::size_t input_dim = 32;
  std::vector<std::size_t> hidden_dims{64};
  std::size_t feature_dim = 64;
  std::size_t num_classes = 7;

  void validate() const;
  bool operator==(const ModelDims&) const = default;
};

/// y = x W^T + b, with W stored out x in and b a 1 x out row.
struct LinearLayer {
  Matrix weight;
  Matrix bias;

  Matrix forward(const Matrix& x) const;
};

/*
 * Featurizer f (MLP, ReLU between layers, none after the last), bias-free
 * proxy classifier h (rows are class proxies), and the two dimension-preserving
 * projectors p_f and p_c used by the contrastive terms.
 */
struct ModelState {
  std::vector<LinearLayer> featurizer;
  Matrix proxies;
  LinearLayer feature_projector;
  LinearLayer classifier_projector;

  ModelDims dims() const;

  /// Declaration order: featurizer (weight, bias)..., proxies, p_f (weight, bias), p_c (weight, bias).
  std::vector<ParameterRef<double>> parameters();
  std::vector<ConstParameterRef<double>> parameters() const;
};

/* A gradient has exactly the structure of the parameters it differentiates. */
using GradientSet = ModelState;

ModelState init_model(const ModelDims& dims, std::uint64_t seed);

Matrix featurize(const ModelState& state, const Matrix& x);
Matrix class_logits(const ModelState& state, const Matrix& features);
Matrix class_confidence(const ModelState& state, const Matrix& features);
Matrix project_features(const ModelState& state, const Matrix& features);
Matrix project_proxies(const ModelState& state);

// Traced forward passes and their backward counterparts, used by the losses.

struct FeaturizerTrace {
  std::vector<Matrix> layer_inputs;  // input seen by each layer (post-ReLU for k > 0)
  std::vector<Matrix> pre_activations;
  Matrix features;
};

FeaturizerTrace featurize_traced(const ModelState& state, const Matrix& x);

/// Accumulates dL/d(featurizer params) into grads given dL/d(features).
void featurize_backward(const ModelState& state, const FeaturizerTrace& trace, const Matrix& d_features,
                        GradientSet& grads);

struct ProjectionTrace {
  Matrix pre_norm;
  Matrix embedding;
};

ProjectionTrace project_traced(const LinearLayer& projector, const Matrix& input);

/// Accumulates projector gradients into grad_layer and returns dL/d(input).
Matrix project_backward(const LinearLayer& projector, const Matrix& input, const ProjectionTrace& trace,
                        const Matrix& d_embedding, LinearLayer& grad_layer);

// Binary model file: "UPCS", u32 version, dims, then parameters() in order as little-endian f64.

inline constexpr std::uint32_t kModelFormatVersion = 1;

void save_model(const ModelState& state, std::ostream& out);
void save_model(const ModelState& state, const std::string& path);
ModelState load_model(std::istream& in);
ModelState load_model(const std::string& path);

}  // namespace upcsc

#endif  // UPCSC_MODEL_HPP
