#pragma once

// Minimal dense-network substrate: affine layers with a fixed activation set,
// exact reverse-mode gradients, a small operator library with matching
// backward passes, AdamW with parameter groups, and a versioned checkpoint
// format.
//
// Batched tensors are column-major Eigen matrices with one sample per column.

#include <Eigen/Dense>

#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "rrw/common.hpp"

namespace rrw {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

enum class Activation { Identity, ReLU, Tanh };
enum class ParamGroup { Backbone, Head };

inline std::string to_string(Activation a) {
  switch (a) {
    case Activation::Identity: return "identity";
    case Activation::ReLU: return "relu";
    case Activation::Tanh: return "tanh";
  }
  return "identity";
}
inline Activation activation_from_string(std::string_view s) {
  if (s == "identity") return Activation::Identity;
  if (s == "relu") return Activation::ReLU;
  if (s == "tanh") return Activation::Tanh;
  throw Error("unknown activation: " + std::string(s));
}
inline std::string to_string(ParamGroup g) {
  return g == ParamGroup::Backbone ? "backbone" : "head";
}
inline ParamGroup group_from_string(std::string_view s) {
  if (s == "backbone") return ParamGroup::Backbone;
  if (s == "head") return ParamGroup::Head;
  throw Error("unknown parameter group: " + std::string(s));
}

// ---------------------------------------------------------------------------
// Operators.

namespace ops {

inline Mat activate(const Mat& z, Activation a) {
  switch (a) {
    case Activation::Identity: return z;
    case Activation::ReLU: return z.cwiseMax(0.0);
    case Activation::Tanh: return z.array().tanh().matrix();
  }
  return z;
}

// dL/dz given dL/dy, the pre-activation z and the output y.
inline Mat activate_backward(const Mat& grad_out, const Mat& z, const Mat& y,
                             Activation a) {
  switch (a) {
    case Activation::Identity: return grad_out;
    case Activation::ReLU:
      return (z.array() > 0.0).select(grad_out, 0.0);
    case Activation::Tanh:
      return (grad_out.array() * (1.0 - y.array().square())).matrix();
  }
  return grad_out;
}

inline double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

inline Mat sigmoid(const Mat& z) { return z.unaryExpr([](double v) { return sigmoid(v); }); }

// Column-wise numerically stable softmax.
inline Mat softmax(const Mat& logits) {
  Mat out(logits.rows(), logits.cols());
  for (Eigen::Index c = 0; c < logits.cols(); ++c) {
    const double m = logits.col(c).maxCoeff();
    out.col(c) = (logits.col(c).array() - m).exp().matrix();
    out.col(c) /= out.col(c).sum();
  }
  return out;
}

// Softmax backward: dL/dlogits = p ⊙ (g - <g, p>) per column.
inline Mat softmax_backward(const Mat& probs, const Mat& grad_probs) {
  Mat out(probs.rows(), probs.cols());
  for (Eigen::Index c = 0; c < probs.cols(); ++c) {
    const double dot = probs.col(c).dot(grad_probs.col(c));
    out.col(c) = probs.col(c).cwiseProduct(
        (grad_probs.col(c).array() - dot).matrix());
  }
  return out;
}

// Column-wise L2 normalization; zero columns stay zero.
inline Mat l2_normalize(const Mat& x, Vec* norms = nullptr) {
  Mat out = x;
  Vec n(x.cols());
  for (Eigen::Index c = 0; c < x.cols(); ++c) {
    n[c] = x.col(c).norm();
    if (n[c] > 0) out.col(c) /= n[c];
  }
  if (norms) *norms = n;
  return out;
}

// Backward of y = x/|x|: dx = (g - y <y, g>) / |x|.
inline Mat l2_normalize_backward(const Mat& y, const Vec& norms,
                                 const Mat& grad_y) {
  Mat out(y.rows(), y.cols());
  for (Eigen::Index c = 0; c < y.cols(); ++c) {
    if (norms[c] == 0) {
      out.col(c).setZero();
      continue;
    }
    const double dot = y.col(c).dot(grad_y.col(c));
    out.col(c) = (grad_y.col(c) - dot * y.col(c)) / norms[c];
  }
  return out;
}

// Pair features [a; b; |a - b|; a ⊙ b] stacked row-wise.
inline Mat pair_features(const Mat& a, const Mat& b) {
  const Eigen::Index d = a.rows();
  Mat f(4 * d, a.cols());
  f.topRows(d) = a;
  f.middleRows(d, d) = b;
  f.middleRows(2 * d, d) = (a - b).cwiseAbs();
  f.bottomRows(d) = a.cwiseProduct(b);
  return f;
}

// Backward of pair_features; d|u|/du taken as sign(u) with sign(0) = 0.
inline void pair_features_backward(const Mat& a, const Mat& b, const Mat& grad_f,
                                   Mat& grad_a, Mat& grad_b) {
  const Eigen::Index d = a.rows();
  const Mat diff_sign = (a - b).unaryExpr(
      [](double v) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); });
  const Mat g_abs = grad_f.middleRows(2 * d, d).cwiseProduct(diff_sign);
  const Mat g_prod = grad_f.bottomRows(d);
  grad_a = grad_f.topRows(d) + g_abs + g_prod.cwiseProduct(b);
  grad_b = grad_f.middleRows(d, d) - g_abs + g_prod.cwiseProduct(a);
}

inline Vec mean_pool(const Mat& rows_as_columns) {
  if (rows_as_columns.cols() == 0) return Vec::Zero(rows_as_columns.rows());
  return rows_as_columns.rowwise().mean();
}

// Cosine of two vectors and its gradients.
inline double cosine_with_grad(const Vec& a, const Vec& b, Vec* ga, Vec* gb) {
  const double na = a.norm(), nb = b.norm();
  if (na == 0 || nb == 0) throw Error("cosine: zero vector");
  const double c = a.dot(b) / (na * nb);
  if (ga) *ga = b / (na * nb) - c * a / (na * na);
  if (gb) *gb = a / (na * nb) - c * b / (nb * nb);
  return c;
}

}  // namespace ops

// ---------------------------------------------------------------------------
// Parameters.

// A view of one parameter tensor and its gradient buffer.
struct ParamSlot {
  std::string name;
  double* value = nullptr;
  double* grad = nullptr;
  std::size_t size = 0;
  ParamGroup group = ParamGroup::Head;
};

using ParamList = std::vector<ParamSlot>;

template <typename Derived>
ParamSlot make_slot(std::string name, Eigen::PlainObjectBase<Derived>& value,
                    Eigen::PlainObjectBase<Derived>& grad, ParamGroup g) {
  if (value.size() != grad.size()) throw Error("make_slot: shape mismatch");
  return ParamSlot{std::move(name), value.data(), grad.data(),
                   static_cast<std::size_t>(value.size()), g};
}

inline void zero_grads(const ParamList& params) {
  for (const auto& p : params) std::fill(p.grad, p.grad + p.size, 0.0);
}

inline double grad_norm(const ParamList& params) {
  double s = 0;
  for (const auto& p : params)
    for (std::size_t i = 0; i < p.size; ++i) s += p.grad[i] * p.grad[i];
  return std::sqrt(s);
}

// ---------------------------------------------------------------------------
// DenseNet.

struct DenseLayer {
  Mat weight;  // out x in
  Vec bias;
  Activation activation = Activation::Identity;
  ParamGroup group = ParamGroup::Head;
};

struct DenseGrads {
  std::vector<Mat> weight;
  std::vector<Vec> bias;
};

struct ForwardCache {
  std::vector<Mat> inputs;  // input to each layer
  std::vector<Mat> pre;     // pre-activations
  std::vector<Mat> post;    // outputs
  bool empty() const { return inputs.empty(); }
};

class DenseNet {
 public:
  DenseNet() = default;

  // dims = {in, h1, ..., out}; activations has dims.size()-1 entries.
  // Weights use Glorot-uniform initialization, biases start at zero.
  static DenseNet make(const std::vector<int>& dims,
                       const std::vector<Activation>& activations,
                       ParamGroup group, Rng& rng) {
    if (dims.size() < 2 || activations.size() != dims.size() - 1) {
      throw Error("DenseNet::make: dims/activations mismatch");
    }
    DenseNet net;
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
      DenseLayer layer;
      const int in = dims[l], out = dims[l + 1];
      const double limit = std::sqrt(6.0 / (in + out));
      layer.weight.resize(out, in);
      for (int r = 0; r < out; ++r)
        for (int c = 0; c < in; ++c) layer.weight(r, c) = rng.uniform(-limit, limit);
      layer.bias = Vec::Zero(out);
      layer.activation = activations[l];
      layer.group = group;
      net.layers_.push_back(std::move(layer));
    }
    net.check();
    return net;
  }

  static DenseNet from_layers(std::vector<DenseLayer> layers) {
    DenseNet net;
    net.layers_ = std::move(layers);
    net.check();
    return net;
  }

  Eigen::Index input_dim() const { return layers_.front().weight.cols(); }
  Eigen::Index output_dim() const { return layers_.back().weight.rows(); }
  bool empty() const { return layers_.empty(); }
  std::vector<DenseLayer>& layers() { return layers_; }
  const std::vector<DenseLayer>& layers() const { return layers_; }

  Mat forward(const Mat& x, ForwardCache* cache = nullptr) const {
    if (layers_.empty()) throw Error("DenseNet::forward: empty network");
    if (x.rows() != input_dim()) {
      throw Error("DenseNet::forward: dimension mismatch (expected " +
                  std::to_string(input_dim()) + ", got " +
                  std::to_string(x.rows()) + ")");
    }
    if (cache) *cache = ForwardCache{};
    Mat h = x;
    for (const auto& layer : layers_) {
      Mat z = layer.weight * h;
      z.colwise() += layer.bias;
      Mat y = ops::activate(z, layer.activation);
      if (cache) {
        cache->inputs.push_back(std::move(h));
        cache->pre.push_back(std::move(z));
        cache->post.push_back(y);
      }
      h = std::move(y);
    }
    return h;
  }

  Vec forward(const Vec& x) const { return forward(Mat(x)).col(0); }

  DenseGrads zero_grads() const {
    DenseGrads g;
    for (const auto& l : layers_) {
      g.weight.push_back(Mat::Zero(l.weight.rows(), l.weight.cols()));
      g.bias.push_back(Vec::Zero(l.bias.size()));
    }
    return g;
  }

  // Accumulates parameter gradients into `grads` and returns dL/dinput.
  Mat backward(const ForwardCache& cache, const Mat& upstream,
               DenseGrads& grads) const {
    if (cache.empty() || cache.inputs.size() != layers_.size()) {
      throw Error("DenseNet::backward: missing forward cache");
    }
    if (grads.weight.size() != layers_.size()) grads = zero_grads();
    Mat g = upstream;
    for (std::size_t l = layers_.size(); l-- > 0;) {
      const auto& layer = layers_[l];
      Mat gz = ops::activate_backward(g, cache.pre[l], cache.post[l],
                                      layer.activation);
      grads.weight[l].noalias() += gz * cache.inputs[l].transpose();
      grads.bias[l] += gz.rowwise().sum();
      g = layer.weight.transpose() * gz;
    }
    return g;
  }

  void register_params(const std::string& prefix, DenseGrads& grads,
                       ParamList& out) {
    if (grads.weight.size() != layers_.size()) grads = zero_grads();
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const auto tag = prefix + "." + std::to_string(l);
      out.push_back(make_slot(tag + ".weight", layers_[l].weight,
                              grads.weight[l], layers_[l].group));
      out.push_back(make_slot(tag + ".bias", layers_[l].bias, grads.bias[l],
                              layers_[l].group));
    }
  }

  bool operator==(const DenseNet& o) const {
    if (layers_.size() != o.layers_.size()) return false;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const auto &a = layers_[l], &b = o.layers_[l];
      if (a.activation != b.activation || a.group != b.group ||
          a.weight != b.weight || a.bias != b.bias)
        return false;
    }
    return true;
  }

 private:
  void check() const {
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      if (layers_[l].bias.size() != layers_[l].weight.rows())
        throw Error("DenseNet: bias size mismatch");
      if (l > 0 && layers_[l].weight.cols() != layers_[l - 1].weight.rows())
        throw Error("DenseNet: adjacent layer dimensions incompatible");
    }
  }

  std::vector<DenseLayer> layers_;
};

// ---------------------------------------------------------------------------
// Optimization.

struct TrainConfig {
  double lr_head = 1e-3;
  double lr_backbone = 3e-4;
  double weight_decay_head = 1e-4;
  double weight_decay_backbone = 1e-2;
  int batch_size = 64;
  double clip_norm = 1.0;
  int warmup_steps = 0;  // linear learning-rate warmup
  int max_epochs = 20;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(lr_backbone <= lr_head)) throw ConfigError("lr_backbone must be <= lr_head");
    if (!(clip_norm > 0)) throw ConfigError("clip_norm must be > 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (warmup_steps < 0) throw ConfigError("warmup_steps must be >= 0");
  }
};

class AdamW {
 public:
  explicit AdamW(TrainConfig cfg, double beta1 = 0.9, double beta2 = 0.999,
                 double eps = 1e-8)
      : cfg_(cfg), beta1_(beta1), beta2_(beta2), eps_(eps) {
    cfg_.validate();
  }

  // Clips by global norm, then applies one decoupled-weight-decay Adam step
  // per slot with its group's learning rate and decay. Returns the
  // pre-clipping gradient norm.
  double step(const ParamList& params) {
    if (moments_m_.empty()) {
      for (const auto& p : params) {
        moments_m_.emplace_back(p.size, 0.0);
        moments_v_.emplace_back(p.size, 0.0);
      }
    } else if (moments_m_.size() != params.size()) {
      throw Error("AdamW::step: parameter list changed between steps");
    }
    for (const auto& p : params) {
      for (std::size_t i = 0; i < p.size; ++i) {
        if (!std::isfinite(p.grad[i])) {
          throw Error("AdamW::step: non-finite gradient in " + p.name + "[" +
                      std::to_string(i) + "] at step " +
                      std::to_string(t_ + 1));
        }
      }
    }
    const double norm = grad_norm(params);
    const double scale = norm > cfg_.clip_norm ? cfg_.clip_norm / norm : 1.0;
    ++t_;
    const double warm =
        cfg_.warmup_steps > 0
            ? std::min(1.0, static_cast<double>(t_) / cfg_.warmup_steps)
            : 1.0;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t s = 0; s < params.size(); ++s) {
      const auto& p = params[s];
      const bool backbone = p.group == ParamGroup::Backbone;
      const double lr = warm * (backbone ? cfg_.lr_backbone : cfg_.lr_head);
      const double wd = backbone ? cfg_.weight_decay_backbone : cfg_.weight_decay_head;
      last_lr_[p.group] = lr;
      auto& m = moments_m_[s];
      auto& v = moments_v_[s];
      for (std::size_t i = 0; i < p.size; ++i) {
        const double g = p.grad[i] * scale;
        m[i] = beta1_ * m[i] + (1 - beta1_) * g;
        v[i] = beta2_ * v[i] + (1 - beta2_) * g * g;
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        p.value[i] -= lr * (mhat / (std::sqrt(vhat) + eps_) + wd * p.value[i]);
      }
    }
    return norm;
  }

  long steps() const { return t_; }
  double last_lr(ParamGroup g) const {
    auto it = last_lr_.find(g);
    return it == last_lr_.end() ? 0.0 : it->second;
  }
  const TrainConfig& config() const { return cfg_; }

 private:
  TrainConfig cfg_;
  double beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<std::vector<double>> moments_m_, moments_v_;
  std::map<ParamGroup, double> last_lr_;
};

// ---------------------------------------------------------------------------
// Checkpoints: a text header (metadata, tensor shapes and group tags)
// followed by a raw row-major little-endian float64 payload.

inline constexpr std::string_view kCheckpointMagic = "RRWCKPT";
inline constexpr int kCheckpointVersion = 1;

struct Tensor {
  Mat values;
  ParamGroup group = ParamGroup::Head;
};

class Checkpoint {
 public:
  std::map<std::string, std::string> meta;
  std::vector<std::pair<std::string, Tensor>> tensors;

  void put(const std::string& name, const Mat& m,
           ParamGroup g = ParamGroup::Head) {
    tensors.emplace_back(name, Tensor{m, g});
  }
  void put(const std::string& name, const Vec& v,
           ParamGroup g = ParamGroup::Head) {
    put(name, Mat(v), g);
  }

  const Tensor& at(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return t;
    throw Error("checkpoint has no tensor '" + name + "'");
  }
  Vec vec(const std::string& name) const { return at(name).values.col(0); }

  const std::string& meta_at(const std::string& key) const {
    auto it = meta.find(key);
    if (it == meta.end()) throw Error("checkpoint has no meta '" + key + "'");
    return it->second;
  }

  void put_net(const std::string& prefix, const DenseNet& net) {
    meta[prefix + ".layers"] = std::to_string(net.layers().size());
    for (std::size_t l = 0; l < net.layers().size(); ++l) {
      const auto& layer = net.layers()[l];
      const auto tag = prefix + "." + std::to_string(l);
      meta[tag + ".activation"] = to_string(layer.activation);
      put(tag + ".weight", layer.weight, layer.group);
      put(tag + ".bias", layer.bias, layer.group);
    }
  }

  DenseNet get_net(const std::string& prefix) const {
    const int n = std::stoi(meta_at(prefix + ".layers"));
    std::vector<DenseLayer> layers;
    for (int l = 0; l < n; ++l) {
      const auto tag = prefix + "." + std::to_string(l);
      DenseLayer layer;
      const auto& w = at(tag + ".weight");
      layer.weight = w.values;
      layer.group = w.group;
      layer.bias = vec(tag + ".bias");
      layer.activation = activation_from_string(meta_at(tag + ".activation"));
      layers.push_back(std::move(layer));
    }
    return DenseNet::from_layers(std::move(layers));
  }

  void write(std::ostream& os) const {
    os << kCheckpointMagic << ' ' << kCheckpointVersion << '\n';
    for (const auto& [k, v] : meta) os << "meta " << k << ' ' << v << '\n';
    for (const auto& [name, t] : tensors) {
      os << "tensor " << name << ' ' << t.values.rows() << ' '
         << t.values.cols() << ' ' << to_string(t.group) << '\n';
    }
    os << "payload\n";
    for (const auto& [name, t] : tensors) {
      for (Eigen::Index r = 0; r < t.values.rows(); ++r) {
        for (Eigen::Index c = 0; c < t.values.cols(); ++c) {
          const double v = t.values(r, c);
          char bytes[sizeof(double)];
          std::memcpy(bytes, &v, sizeof(double));
          os.write(bytes, sizeof(double));
        }
      }
    }
  }

  static Checkpoint read(std::istream& is) {
    std::string line;
    if (!std::getline(is, line)) throw Error("checkpoint: empty stream");
    {
      std::istringstream hs(line);
      std::string magic;
      int version = 0;
      hs >> magic >> version;
      if (magic != kCheckpointMagic) throw Error("checkpoint: bad magic");
      if (version != kCheckpointVersion)
        throw Error("checkpoint: unsupported version " + std::to_string(version));
    }
    Checkpoint ck;
    std::vector<std::tuple<std::string, Eigen::Index, Eigen::Index, ParamGroup>> shapes;
    while (std::getline(is, line)) {
      if (line == "payload") break;
      std::istringstream ls(line);
      std::string kind;
      ls >> kind;
      if (kind == "meta") {
        std::string key, value;
        ls >> key;
        std::getline(ls, value);
        if (!value.empty() && value[0] == ' ') value.erase(0, 1);
        ck.meta[key] = value;
      } else if (kind == "tensor") {
        std::string name, group;
        Eigen::Index rows = 0, cols = 0;
        ls >> name >> rows >> cols >> group;
        shapes.emplace_back(name, rows, cols, group_from_string(group));
      } else {
        throw Error("checkpoint: unexpected header line: " + line);
      }
    }
    for (const auto& [name, rows, cols, group] : shapes) {
      Mat m(rows, cols);
      for (Eigen::Index r = 0; r < rows; ++r) {
        for (Eigen::Index c = 0; c < cols; ++c) {
          char bytes[sizeof(double)];
          if (!is.read(bytes, sizeof(double))) throw Error("checkpoint: truncated payload");
          std::memcpy(&m(r, c), bytes, sizeof(double));
        }
      }
      ck.tensors.emplace_back(name, Tensor{std::move(m), group});
    }
    return ck;
  }

  void save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot write checkpoint: " + path);
    write(os);
  }

  static Checkpoint load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw MissingArtifact("cannot read checkpoint: " + path);
    return read(is);
  }
};

// Stacks column vectors into a matrix (one sample per column).
inline Mat stack_columns(std::span<const Vec> cols, Eigen::Index dim) {
  Mat m(dim, static_cast<Eigen::Index>(cols.size()));
  for (std::size_t i = 0; i < cols.size(); ++i) m.col(static_cast<Eigen::Index>(i)) = cols[i];
  return m;
}

}  // namespace rrw
