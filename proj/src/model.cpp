#include "upcsc/model.hpp"

#include "upcsc/random.hpp"

#include <array>
#include <bit>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>

namespace upcsc {

void ModelDims::validate() const {
  if (input_dim == 0) throw ConfigError("model: input_dim must be positive");
  if (feature_dim == 0) throw ConfigError("model: feature_dim must be positive");
  for (std::size_t h : hidden_dims)
    if (h == 0) throw ConfigError("model: hidden dims must be positive");
  if (num_classes < 2) throw ConfigError("model: num_classes must be at least 2");
}

Matrix LinearLayer::forward(const Matrix& x) const {
  if (x.cols() != weight.cols())
    throw ShapeError("linear: input " + shape_string(x.rows(), x.cols()) + " for weight " +
                     shape_string(weight.rows(), weight.cols()));
  Matrix y = x * weight.transpose();
  y.rowwise() += bias.row(0);
  return y;
}

ModelDims ModelState::dims() const {
  ModelDims d;
  d.input_dim = featurizer.empty() ? 0 : static_cast<std::size_t>(featurizer.front().weight.cols());
  d.hidden_dims.clear();
  for (std::size_t k = 0; k + 1 < featurizer.size(); ++k)
    d.hidden_dims.push_back(static_cast<std::size_t>(featurizer[k].weight.rows()));
  d.feature_dim = static_cast<std::size_t>(proxies.cols());
  d.num_classes = static_cast<std::size_t>(proxies.rows());
  return d;
}

std::vector<ParameterRef<double>> ModelState::parameters() {
  std::vector<ParameterRef<double>> refs;
  for (auto& layer : featurizer) {
    refs.push_back({ParamGroup::Backbone, &layer.weight});
    refs.push_back({ParamGroup::Backbone, &layer.bias});
  }
  refs.push_back({ParamGroup::Classifier, &proxies});
  refs.push_back({ParamGroup::Projector, &feature_projector.weight});
  refs.push_back({ParamGroup::Projector, &feature_projector.bias});
  refs.push_back({ParamGroup::Projector, &classifier_projector.weight});
  refs.push_back({ParamGroup::Projector, &classifier_projector.bias});
  return refs;
}

std::vector<ConstParameterRef<double>> ModelState::parameters() const {
  std::vector<ConstParameterRef<double>> refs;
  for (auto& ref : const_cast<ModelState*>(this)->parameters()) refs.push_back({ref.group, ref.value});
  return refs;
}

namespace {

Matrix glorot_uniform(Eigen::Index out, Eigen::Index in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Matrix w(out, in);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = dist(rng);
  return w;
}

LinearLayer make_layer(std::size_t in, std::size_t out, Rng& rng) {
  const auto o = static_cast<Eigen::Index>(out);
  const auto i = static_cast<Eigen::Index>(in);
  return {glorot_uniform(o, i, rng), Matrix::Zero(1, o)};
}

}  // namespace

ModelState init_model(const ModelDims& dims, std::uint64_t seed) {
  dims.validate();
  Rng rng(derive_seed({seed, 0x6d6f64656cULL}));
  ModelState state;
  std::size_t fan_in = dims.input_dim;
  for (std::size_t h : dims.hidden_dims) {
    state.featurizer.push_back(make_layer(fan_in, h, rng));
    fan_in = h;
  }
  state.featurizer.push_back(make_layer(fan_in, dims.feature_dim, rng));
  state.proxies = glorot_uniform(static_cast<Eigen::Index>(dims.num_classes),
                                 static_cast<Eigen::Index>(dims.feature_dim), rng);
  state.feature_projector = make_layer(dims.feature_dim, dims.feature_dim, rng);
  state.classifier_projector = make_layer(dims.feature_dim, dims.feature_dim, rng);
  return state;
}

FeaturizerTrace featurize_traced(const ModelState& state, const Matrix& x) {
  if (state.featurizer.empty()) throw ShapeError("featurize: empty featurizer");
  if (x.cols() != state.featurizer.front().weight.cols())
    throw ShapeError("featurize: input has " + std::to_string(x.cols()) + " columns, expected " +
                     std::to_string(state.featurizer.front().weight.cols()));
  FeaturizerTrace trace;
  Matrix current = x;
  for (std::size_t k = 0; k < state.featurizer.size(); ++k) {
    trace.layer_inputs.push_back(current);
    Matrix pre = state.featurizer[k].forward(current);
    const bool last = k + 1 == state.featurizer.size();
    current = last ? pre : Matrix(pre.cwiseMax(0.0));
    trace.pre_activations.push_back(std::move(pre));
  }
  trace.features = std::move(current);
  return trace;
}

void featurize_backward(const ModelState& state, const FeaturizerTrace& trace, const Matrix& d_features,
                        GradientSet& grads) {
  Matrix delta = d_features;
  for (std::size_t k = state.featurizer.size(); k-- > 0;) {
    if (k + 1 != state.featurizer.size())
      delta = (trace.pre_activations[k].array() > 0.0).select(delta, 0.0);
    grads.featurizer[k].weight.noalias() += delta.transpose() * trace.layer_inputs[k];
    grads.featurizer[k].bias += delta.colwise().sum();
    if (k > 0) delta = delta * state.featurizer[k].weight;
  }
}

Matrix featurize(const ModelState& state, const Matrix& x) { return featurize_traced(state, x).features; }

Matrix class_logits(const ModelState& state, const Matrix& features) {
  if (features.cols() != state.proxies.cols())
    throw ShapeError("class_logits: features have " + std::to_string(features.cols()) +
                     " columns, proxies " + std::to_string(state.proxies.cols()));
  return features * state.proxies.transpose();
}

Matrix class_confidence(const ModelState& state, const Matrix& features) {
  return softmax_rows(class_logits(state, features));
}

ProjectionTrace project_traced(const LinearLayer& projector, const Matrix& input) {
  ProjectionTrace trace;
  trace.pre_norm = projector.forward(input);
  trace.embedding = l2_normalize_rows(trace.pre_norm);
  return trace;
}

Matrix project_backward(const LinearLayer& projector, const Matrix& input, const ProjectionTrace& trace,
                        const Matrix& d_embedding, LinearLayer& grad_layer) {
  const Matrix d_pre = l2_normalize_rows_backward(trace.pre_norm, trace.embedding, d_embedding);
  grad_layer.weight.noalias() += d_pre.transpose() * input;
  grad_layer.bias += d_pre.colwise().sum();
  return d_pre * projector.weight;
}

Matrix project_features(const ModelState& state, const Matrix& features) {
  if (features.cols() != state.proxies.cols()) throw ShapeError("project_features: feature width mismatch");
  return project_traced(state.feature_projector, features).embedding;
}

Matrix project_proxies(const ModelState& state) {
  return project_traced(state.classifier_projector, state.proxies).embedding;
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

constexpr std::array<char, 4> kMagic{'U', 'P', 'C', 'S'};

template <typename U>
void write_le(std::ostream& out, U value) {
  std::array<char, sizeof(U)> bytes;
  for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<char>((value >> (8 * i)) & 0xff);
  out.write(bytes.data(), bytes.size());
}

template <typename U>
U read_le(std::istream& in) {
  std::array<unsigned char, sizeof(U)> bytes;
  in.read(reinterpret_cast<char*>(bytes.data()), bytes.size());
  if (!in) throw DataError("load_model: truncated file");
  U value = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) value |= static_cast<U>(bytes[i]) << (8 * i);
  return value;
}

}  // namespace

void save_model(const ModelState& state, std::ostream& out) {
  const ModelDims d = state.dims();
  out.write(kMagic.data(), kMagic.size());
  write_le<std::uint32_t>(out, kModelFormatVersion);
  write_le<std::uint64_t>(out, d.input_dim);
  write_le<std::uint64_t>(out, d.hidden_dims.size());
  for (std::size_t h : d.hidden_dims) write_le<std::uint64_t>(out, h);
  write_le<std::uint64_t>(out, d.feature_dim);
  write_le<std::uint64_t>(out, d.num_classes);
  for (const auto& ref : state.parameters())
    for (Eigen::Index i = 0; i < ref.value->size(); ++i)
      write_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(ref.value->data()[i]));
  if (!out) throw DataError("save_model: write failed");
}

void save_model(const ModelState& state, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("save_model: cannot open " + path);
  save_model(state, out);
}

ModelState load_model(std::istream& in) {
  std::array<char, 4> magic{};
  in.read(magic.data(), magic.size());
  if (!in || magic != kMagic) throw DataError("load_model: bad magic");
  const auto version = read_le<std::uint32_t>(in);
  if (version != kModelFormatVersion) throw DataError("load_model: unsupported version " + std::to_string(version));
  ModelDims d;
  d.input_dim = read_le<std::uint64_t>(in);
  const auto hidden = read_le<std::uint64_t>(in);
  if (hidden > 1024) throw DataError("load_model: implausible layer count");
  d.hidden_dims.resize(hidden);
  for (auto& h : d.hidden_dims) h = read_le<std::uint64_t>(in);
  d.feature_dim = read_le<std::uint64_t>(in);
  d.num_classes = read_le<std::uint64_t>(in);
  d.validate();
  ModelState state = init_model(d, 0);
  for (auto& ref : state.parameters())
    for (Eigen::Index i = 0; i < ref.value->size(); ++i)
      ref.value->data()[i] = std::bit_cast<double>(read_le<std::uint64_t>(in));
  return state;
}

ModelState load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("load_model: cannot open " + path);
  return load_model(in);
}

}  // namespace upcsc
