// Minimal dense-network engine: forward pass with an activation tape, exact
// manual backpropagation, inverted dropout, SGD and Adam, and the versioned
// checkpoint format shared with the CLI.
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "opu/core.hpp"
#include "opu/random.hpp"

namespace opu {

enum class Activation : uint32_t { identity = 0, relu = 1, softmax = 2 };

inline const char* activation_name(Activation a) {
  switch (a) {
    case Activation::identity: return "identity";
    case Activation::relu: return "relu";
    case Activation::softmax: return "softmax";
  }
  return "?";
}

inline Activation activation_from_name(const std::string& s) {
  if (s == "identity") return Activation::identity;
  if (s == "relu") return Activation::relu;
  if (s == "softmax") return Activation::softmax;
  throw std::invalid_argument("unknown activation: " + s);
}

struct MlpLayer {
  Matrix W;  // out x in
  Vec b;     // out
  Activation act = Activation::identity;
};

struct MlpParams {
  std::vector<MlpLayer> layers;

  int input_dim() const { return layers.empty() ? 0 : layers.front().W.cols; }
  int output_dim() const { return layers.empty() ? 0 : layers.back().W.rows; }
  size_t layer_count() const { return layers.size(); }
};

inline void validate_mlp(const MlpParams& p) {
  if (p.layers.empty()) throw std::invalid_argument("mlp: no layers");
  for (size_t i = 0; i < p.layers.size(); ++i) {
    const auto& l = p.layers[i];
    if (l.W.rows != static_cast<int>(l.b.size()))
      throw std::invalid_argument("mlp: bias/weight row mismatch");
    if (i > 0 && p.layers[i - 1].W.rows != l.W.cols)
      throw std::invalid_argument("mlp: adjacent layer dimensions do not chain");
    if (l.act == Activation::softmax && i + 1 != p.layers.size())
      throw std::invalid_argument("mlp: softmax allowed only as final activation");
    if (!all_finite(l.W.data) || !all_finite(l.b))
      throw std::invalid_argument("mlp: non-finite parameter");
  }
}

// Per-layer binary keep vectors over each weight layer's inputs, with the
// keep probability used for inverted-dropout scaling.
struct DropoutMask {
  std::vector<std::vector<uint8_t>> keep;  // keep[i] sized to layer i input width
  Vec keep_prob;                           // per layer

  bool empty() const { return keep.empty(); }
};

inline DropoutMask sample_dropout_mask(const MlpParams& params, const Vec& keep_probs,
                                       RngState& rng) {
  if (keep_probs.size() != params.layers.size())
    throw std::invalid_argument("dropout: keep_prob count must match layer count");
  DropoutMask mask;
  mask.keep_prob = keep_probs;
  mask.keep.resize(params.layers.size());
  for (size_t i = 0; i < params.layers.size(); ++i) {
    const double p = keep_probs[i];
    if (!(p > 0.0 && p <= 1.0))
      throw std::invalid_argument("dropout: keep probability must be in (0,1]");
    const int width = params.layers[i].W.cols;
    mask.keep[i].resize(width);
    for (int j = 0; j < width; ++j)
      mask.keep[i][j] = (p >= 1.0 || rng.uniform() < p) ? 1 : 0;
  }
  return mask;
}

inline DropoutMask all_keep_mask(const MlpParams& params) {
  DropoutMask mask;
  mask.keep_prob.assign(params.layers.size(), 1.0);
  mask.keep.resize(params.layers.size());
  for (size_t i = 0; i < params.layers.size(); ++i)
    mask.keep[i].assign(params.layers[i].W.cols, 1);
  return mask;
}

// Everything the backward pass needs: per-layer (masked) inputs, linear
// pre-activations and post-activation outputs.
struct ForwardTape {
  Vec input;
  std::vector<Vec> layer_in;  // input actually fed to layer i (after dropout)
  std::vector<Vec> pre;
  std::vector<Vec> post;
  DropoutMask mask;  // empty when no dropout was applied
};

namespace detail {
inline void apply_activation(Activation act, const Vec& z, Vec& out) {
  out.resize(z.size());
  switch (act) {
    case Activation::identity:
      out = z;
      break;
    case Activation::relu:
      for (size_t i = 0; i < z.size(); ++i) out[i] = z[i] > 0.0 ? z[i] : 0.0;
      break;
    case Activation::softmax: {
      double zmax = z[0];
      for (double v : z) zmax = std::max(zmax, v);
      double sum = 0.0;
      for (size_t i = 0; i < z.size(); ++i) {
        out[i] = std::exp(z[i] - zmax);
        sum += out[i];
      }
      for (double& v : out) v /= sum;
      break;
    }
  }
}
}  // namespace detail

inline Vec mlp_forward(const MlpParams& params, const Vec& x,
                       const DropoutMask* mask = nullptr, ForwardTape* tape = nullptr) {
  if (params.layers.empty()) throw std::invalid_argument("mlp_forward: empty net");
  if (static_cast<int>(x.size()) != params.input_dim())
    throw std::invalid_argument("mlp_forward: input dimension mismatch");
  if (mask && !mask->empty() && mask->keep.size() != params.layers.size())
    throw std::invalid_argument("mlp_forward: mask does not match architecture");
  if (tape) {
    tape->input = x;
    tape->layer_in.clear();
    tape->pre.clear();
    tape->post.clear();
    tape->mask = mask ? *mask : DropoutMask{};
  }
  Vec a = x;
  for (size_t i = 0; i < params.layers.size(); ++i) {
    const auto& l = params.layers[i];
    Vec fed = a;
    if (mask && !mask->empty()) {
      if (static_cast<int>(mask->keep[i].size()) != l.W.cols)
        throw std::invalid_argument("mlp_forward: mask width mismatch at layer " +
                                    std::to_string(i));
      const double p = mask->keep_prob[i];
      for (int j = 0; j < l.W.cols; ++j)
        fed[j] = mask->keep[i][j] ? fed[j] / p : 0.0;  // inverted dropout
    }
    Vec z(l.W.rows);
    for (int r = 0; r < l.W.rows; ++r) {
      const double* wr = l.W.row_ptr(r);
      double s = l.b[r];
      for (int c = 0; c < l.W.cols; ++c) s += wr[c] * fed[c];
      z[r] = s;
    }
    Vec out;
    detail::apply_activation(l.act, z, out);
    if (tape) {
      tape->layer_in.push_back(std::move(fed));
      tape->pre.push_back(z);
      tape->post.push_back(out);
    }
    a = std::move(out);
  }
  return a;
}

struct MlpGrads {
  std::vector<Matrix> dW;
  std::vector<Vec> db;
};

inline MlpGrads zero_grads(const MlpParams& params) {
  MlpGrads g;
  g.dW.reserve(params.layers.size());
  g.db.reserve(params.layers.size());
  for (const auto& l : params.layers) {
    g.dW.emplace_back(l.W.rows, l.W.cols);
    g.db.emplace_back(l.b.size(), 0.0);
  }
  return g;
}

inline void accumulate_grads(MlpGrads& into, const MlpGrads& g, double scale = 1.0) {
  for (size_t i = 0; i < into.dW.size(); ++i) {
    for (size_t j = 0; j < into.dW[i].data.size(); ++j)
      into.dW[i].data[j] += scale * g.dW[i].data[j];
    for (size_t j = 0; j < into.db[i].size(); ++j) into.db[i][j] += scale * g.db[i][j];
  }
}

// Exact gradients of the scalar path encoded by `upstream` (dL/d output).
// Accumulates into `grads` and returns dL/d input.
inline Vec mlp_backward(const MlpParams& params, const ForwardTape& tape,
                        const Vec& upstream, MlpGrads* grads) {
  const size_t n = params.layers.size();
  if (tape.pre.size() != n)
    throw std::invalid_argument("mlp_backward: tape does not match params");
  if (static_cast<int>(upstream.size()) != params.output_dim())
    throw std::invalid_argument("mlp_backward: upstream dimension mismatch");
  Vec g = upstream;
  for (size_t ii = n; ii-- > 0;) {
    const auto& l = params.layers[ii];
    // through the activation
    Vec gz(l.W.rows);
    switch (l.act) {
      case Activation::identity:
        gz = g;
        break;
      case Activation::relu:
        for (int r = 0; r < l.W.rows; ++r) gz[r] = tape.pre[ii][r] > 0.0 ? g[r] : 0.0;
        break;
      case Activation::softmax: {
        const Vec& y = tape.post[ii];
        double dot = 0.0;
        for (int r = 0; r < l.W.rows; ++r) dot += g[r] * y[r];
        for (int r = 0; r < l.W.rows; ++r) gz[r] = y[r] * (g[r] - dot);
        break;
      }
    }
    // parameter grads and input grad of the linear map
    const Vec& fed = tape.layer_in[ii];
    if (grads) {
      for (int r = 0; r < l.W.rows; ++r) {
        double* gw = grads->dW[ii].row_ptr(r);
        for (int c = 0; c < l.W.cols; ++c) gw[c] += gz[r] * fed[c];
        grads->db[ii][r] += gz[r];
      }
    }
    Vec gin(l.W.cols, 0.0);
    for (int r = 0; r < l.W.rows; ++r) {
      const double* wr = l.W.row_ptr(r);
      for (int c = 0; c < l.W.cols; ++c) gin[c] += wr[c] * gz[r];
    }
    // back through dropout scaling
    if (!tape.mask.empty()) {
      const double p = tape.mask.keep_prob[ii];
      for (int c = 0; c < l.W.cols; ++c)
        gin[c] = tape.mask.keep[ii][c] ? gin[c] / p : 0.0;
    }
    g = std::move(gin);
  }
  return g;
}

// He-uniform init for relu layers, scaled-uniform for linear outputs.
inline MlpParams make_mlp(const std::vector<int>& dims, Activation final_act,
                          RngState& rng) {
  if (dims.size() < 2) throw std::invalid_argument("make_mlp: need at least 2 dims");
  MlpParams p;
  for (size_t i = 0; i + 1 < dims.size(); ++i) {
    MlpLayer l;
    const int fan_in = dims[i], fan_out = dims[i + 1];
    const bool last = (i + 2 == dims.size());
    l.act = last ? final_act : Activation::relu;
    const double bound = last ? std::sqrt(1.0 / fan_in) : std::sqrt(6.0 / fan_in);
    l.W = Matrix(fan_out, fan_in);
    for (double& w : l.W.data) w = bound * (2.0 * rng.uniform() - 1.0);
    l.b.assign(fan_out, 0.0);
    p.layers.push_back(std::move(l));
  }
  return p;
}

struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long step = 0;
  std::vector<Matrix> mW, vW;
  std::vector<Vec> mb, vb;
};

inline AdamState make_adam(const MlpParams& params, double lr) {
  AdamState s;
  s.lr = lr;
  for (const auto& l : params.layers) {
    s.mW.emplace_back(l.W.rows, l.W.cols);
    s.vW.emplace_back(l.W.rows, l.W.cols);
    s.mb.emplace_back(l.b.size(), 0.0);
    s.vb.emplace_back(l.b.size(), 0.0);
  }
  return s;
}

// Standard Adam update with bias correction. Deterministic; throws on a
// non-finite gradient naming the offending layer.
inline void adam_step(MlpParams& params, const MlpGrads& grads, AdamState& s) {
  for (size_t i = 0; i < params.layers.size(); ++i)
    if (!all_finite(grads.dW[i].data) || !all_finite(grads.db[i]))
      throw std::runtime_error("adam_step: non-finite gradient in layer " +
                               std::to_string(i));
  s.step += 1;
  const double bc1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
  const double bc2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
  for (size_t i = 0; i < params.layers.size(); ++i) {
    auto upd = [&](double& theta, double& m, double& v, double g) {
      m = s.beta1 * m + (1.0 - s.beta1) * g;
      v = s.beta2 * v + (1.0 - s.beta2) * g * g;
      theta -= s.lr * (m / bc1) / (std::sqrt(v / bc2) + s.eps);
    };
    auto& l = params.layers[i];
    for (size_t j = 0; j < l.W.data.size(); ++j)
      upd(l.W.data[j], s.mW[i].data[j], s.vW[i].data[j], grads.dW[i].data[j]);
    for (size_t j = 0; j < l.b.size(); ++j)
      upd(l.b[j], s.mb[i][j], s.vb[i][j], grads.db[i][j]);
  }
}

inline void sgd_step(MlpParams& params, const MlpGrads& grads, double lr) {
  for (size_t i = 0; i < params.layers.size(); ++i) {
    if (!all_finite(grads.dW[i].data) || !all_finite(grads.db[i]))
      throw std::runtime_error("sgd_step: non-finite gradient in layer " +
                               std::to_string(i));
    auto& l = params.layers[i];
    for (size_t j = 0; j < l.W.data.size(); ++j) l.W.data[j] -= lr * grads.dW[i].data[j];
    for (size_t j = 0; j < l.b.size(); ++j) l.b[j] -= lr * grads.db[i][j];
  }
}

// ---------------------------------------------------------------------------
// Checkpoint format: binary header {magic, version, layer shapes} followed by
// row-major little-endian f64 weight/bias arrays, plus a JSON sidecar
// describing the shapes.

namespace detail {

inline void write_u32(std::ostream& os, uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}
inline uint32_t read_u32(std::istream& is) {
  uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  return v;
}
inline void write_f64s(std::ostream& os, const Vec& v) {
  os.write(reinterpret_cast<const char*>(v.data()),
           static_cast<std::streamsize>(v.size() * sizeof(double)));
}
inline void read_f64s(std::istream& is, Vec& v) {
  is.read(reinterpret_cast<char*>(v.data()),
          static_cast<std::streamsize>(v.size() * sizeof(double)));
}

inline constexpr char kCkptMagic[8] = {'O', 'P', 'U', 'N', 'E', 'T', '0', '1'};

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

}  // namespace detail

inline nlohmann::json mlp_architecture_json(const MlpParams& params) {
  nlohmann::json arch = nlohmann::json::array();
  for (const auto& l : params.layers)
    arch.push_back({{"in", l.W.cols}, {"out", l.W.rows},
                    {"activation", activation_name(l.act)}});
  return arch;
}

inline void save_mlp(const std::string& path, const MlpParams& params,
                     const nlohmann::json& extra_sidecar = nlohmann::json::object()) {
  validate_mlp(params);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("save_mlp: cannot open " + path);
  os.write(detail::kCkptMagic, 8);
  detail::write_u32(os, 1);  // format version
  detail::write_u32(os, static_cast<uint32_t>(params.layers.size()));
  for (const auto& l : params.layers) {
    detail::write_u32(os, static_cast<uint32_t>(l.W.rows));
    detail::write_u32(os, static_cast<uint32_t>(l.W.cols));
    detail::write_u32(os, static_cast<uint32_t>(l.act));
  }
  for (const auto& l : params.layers) {
    detail::write_f64s(os, l.W.data);
    detail::write_f64s(os, l.b);
  }
  if (!os) throw std::runtime_error("save_mlp: write failed for " + path);
  os.close();

  nlohmann::json sidecar = extra_sidecar;
  sidecar["format_version"] = 1;
  sidecar["architecture"] = mlp_architecture_json(params);
  std::ofstream js(path + ".json", std::ios::trunc);
  js << sidecar.dump(2) << "\n";
}

inline MlpParams load_mlp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_mlp: cannot open " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, detail::kCkptMagic, 8) != 0)
    throw std::runtime_error("load_mlp: bad magic in " + path);
  const uint32_t version = detail::read_u32(is);
  if (version != 1) throw std::runtime_error("load_mlp: unsupported version");
  const uint32_t n = detail::read_u32(is);
  MlpParams p;
  p.layers.resize(n);
  for (auto& l : p.layers) {
    const uint32_t rows = detail::read_u32(is);
    const uint32_t cols = detail::read_u32(is);
    const uint32_t act = detail::read_u32(is);
    if (act > 2) throw std::runtime_error("load_mlp: bad activation tag");
    l.W = Matrix(static_cast<int>(rows), static_cast<int>(cols));
    l.b.assign(rows, 0.0);
    l.act = static_cast<Activation>(act);
  }
  for (auto& l : p.layers) {
    detail::read_f64s(is, l.W.data);
    detail::read_f64s(is, l.b);
  }
  if (!is) throw std::runtime_error("load_mlp: truncated file " + path);
  validate_mlp(p);
  return p;
}

}  // namespace opu
