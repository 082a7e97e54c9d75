#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <deque>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "fdrec/common.hpp"

namespace fdrec {

using Vec = Eigen::VectorXd;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using VecMap = Eigen::Map<Vec>;
using ConstVecMap = Eigen::Map<const Vec>;

enum class Init { Embedding, Weight, Zero };

/// A named parameter tensor with a same-shape gradient accumulator. Rank 1
/// and rank 2 only; rank-2 tensors are row-major.
struct ParamTensor {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<double> values;
  std::vector<double> grad;

  std::size_t size() const { return values.size(); }
  std::size_t rows() const { return shape.empty() ? 0 : shape[0]; }
  std::size_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }

  MatMap mat() { return MatMap(values.data(), rows(), cols()); }
  ConstMatMap mat() const { return ConstMatMap(values.data(), rows(), cols()); }
  MatMap gmat() { return MatMap(grad.data(), rows(), cols()); }
  VecMap vec() { return VecMap(values.data(), size()); }
  ConstVecMap vec() const { return ConstVecMap(values.data(), size()); }
  VecMap gvec() { return VecMap(grad.data(), size()); }
  VecMap row(std::size_t i) { return VecMap(values.data() + i * cols(), cols()); }
  ConstVecMap row(std::size_t i) const { return ConstVecMap(values.data() + i * cols(), cols()); }
  VecMap grow(std::size_t i) { return VecMap(grad.data() + i * cols(), cols()); }
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// Ordered parameter set plus Adam moments. Tensors live in a deque so
/// indices and references stay valid as tensors are added.
class ModelState {
 public:
  explicit ModelState(std::uint64_t seed = 0) : seed_(seed), rng_(seed) {}

  /// Adds a tensor and initializes it from the state's rng. Embedding rows
  /// draw from U(-1/sqrt(D), 1/sqrt(D)) with D the last dimension, weights
  /// from U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases are zero.
  std::size_t add(const std::string& name, std::vector<std::size_t> shape, Init init) {
    if (shape.empty() || shape.size() > 2) throw Error("tensor " + name + ": rank must be 1 or 2");
    if (index_.count(name)) throw Error("duplicate tensor " + name);
    std::size_t n = std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
    ParamTensor t{name, std::move(shape), std::vector<double>(n, 0.0), std::vector<double>(n, 0.0)};
    double bound = 0.0;
    if (init == Init::Embedding) bound = 1.0 / std::sqrt(static_cast<double>(t.cols()));
    if (init == Init::Weight) bound = 1.0 / std::sqrt(static_cast<double>(t.cols()));
    if (bound > 0.0) {
      std::uniform_real_distribution<double> dist(-bound, bound);
      for (auto& v : t.values) v = dist(rng_);
    }
    tensors_.push_back(std::move(t));
    m_.emplace_back(n, 0.0);
    v_.emplace_back(n, 0.0);
    index_[tensors_.back().name] = tensors_.size() - 1;
    return tensors_.size() - 1;
  }

  ParamTensor& operator[](std::size_t i) { return tensors_[i]; }
  const ParamTensor& operator[](std::size_t i) const { return tensors_[i]; }
  std::size_t num_tensors() const { return tensors_.size(); }

  ParamTensor& get(const std::string& name) { return tensors_[index_of(name)]; }
  const ParamTensor& get(const std::string& name) const { return tensors_[index_of(name)]; }
  std::size_t index_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error("unknown tensor " + name);
    return it->second;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors_) n += t.size();
    return n;
  }

  void zero_grad() {
    for (auto& t : tensors_) std::fill(t.grad.begin(), t.grad.end(), 0.0);
  }

  std::uint64_t seed() const { return seed_; }
  std::uint64_t step() const { return step_; }

  /// Bias-corrected Adam with decoupled weight decay. Clears gradients and
  /// advances the step counter.
  void adam_step(const AdamConfig& c) {
    ++step_;
    const double t = static_cast<double>(step_);
    const double bc1 = 1.0 - std::pow(c.beta1, t);
    const double bc2 = 1.0 - std::pow(c.beta2, t);
    for (std::size_t k = 0; k < tensors_.size(); ++k) {
      auto& p = tensors_[k];
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double g = p.grad[i];
        m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
        v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
        const double mh = m[i] / bc1;
        const double vh = v[i] / bc2;
        p.values[i] -= c.lr * (mh / (std::sqrt(vh) + c.eps) + c.weight_decay * p.values[i]);
        p.grad[i] = 0.0;
      }
    }
  }

  std::vector<std::vector<double>> snapshot() const {
    std::vector<std::vector<double>> out;
    for (const auto& t : tensors_) out.push_back(t.values);
    return out;
  }
  void restore(const std::vector<std::vector<double>>& snap) {
    if (snap.size() != tensors_.size()) throw Error("restore: tensor count mismatch");
    for (std::size_t k = 0; k < snap.size(); ++k) {
      if (snap[k].size() != tensors_[k].size()) throw Error("restore: size mismatch for " + tensors_[k].name);
      tensors_[k].values = snap[k];
    }
  }

  void set_step(std::uint64_t s) { step_ = s; }

 private:
  std::uint64_t seed_;
  Rng rng_;
  std::uint64_t step_ = 0;
  std::deque<ParamTensor> tensors_;
  std::deque<std::vector<double>> m_, v_;
  std::map<std::string, std::size_t> index_;
};

// ---- layers ---------------------------------------------------------------

inline Vec embed_lookup(const ParamTensor& table, std::size_t index) {
  if (index >= table.rows()) throw Error("embed_lookup: index out of range for " + table.name);
  return table.row(index);
}

inline void embed_backward(ParamTensor& table, std::size_t index, const Vec& g) {
  if (index >= table.rows()) throw Error("embed_backward: index out of range for " + table.name);
  table.grow(index) += g;
}

inline Vec dense(const ParamTensor& W, const ParamTensor& b, const Vec& x) {
  if (W.cols() != static_cast<std::size_t>(x.size()) || b.size() != W.rows())
    throw Error("dense: shape mismatch for " + W.name);
  return W.mat() * x + b.vec();
}

/// Accumulates dW, db and returns dx.
inline Vec dense_backward(ParamTensor& W, ParamTensor& b, const Vec& x, const Vec& gy) {
  W.gmat().noalias() += gy * x.transpose();
  b.gvec() += gy;
  return W.mat().transpose() * gy;
}

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

/// ln(1 + e^x) without overflow.
inline double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

inline Vec sigmoid(const Vec& x) { return x.unaryExpr([](double v) { return sigmoid(v); }); }

inline Vec softmax(const Vec& z) {
  Vec e = (z.array() - z.maxCoeff()).exp();
  return e / e.sum();
}

/// Gradient w.r.t. the logits given the softmax output y and upstream gy.
inline Vec softmax_backward(const Vec& y, const Vec& gy) { return y.cwiseProduct(gy) - y * y.dot(gy); }

/// -ln sigmoid(pos - neg).
inline double bpr_loss(double pos, double neg) { return softplus(-(pos - neg)); }

/// d loss / d pos; the gradient w.r.t. neg is its negation.
inline double bpr_grad(double pos, double neg) { return -sigmoid(-(pos - neg)); }

/// GRU weights: W [3H x I], U [3H x H], b [3H]; gate blocks ordered
/// (update, reset, candidate). The candidate sees r * h through U.
struct Gru {
  std::size_t W = 0, U = 0, b = 0;

  static Gru create(ModelState& s, const std::string& prefix, std::size_t in, std::size_t hidden) {
    Gru g;
    g.W = s.add(prefix + ".W", {3 * hidden, in}, Init::Weight);
    g.U = s.add(prefix + ".U", {3 * hidden, hidden}, Init::Weight);
    g.b = s.add(prefix + ".b", {3 * hidden}, Init::Zero);
    return g;
  }
  std::size_t hidden(const ModelState& s) const { return s[U].cols(); }
  std::size_t input(const ModelState& s) const { return s[W].cols(); }
};

struct GruCache {
  Vec x, h, z, r, c, rh;
};

/// One step h' = (1-z)*h + z*c with z = sig(Wz x + Uz h + bz),
/// r = sig(Wr x + Ur h + br), c = tanh(Wc x + Uc (r*h) + bc).
inline Vec gru_cell(const ModelState& s, const Gru& g, const Vec& x, const Vec& h, GruCache* cache = nullptr) {
  const auto H = static_cast<Eigen::Index>(g.hidden(s));
  if (static_cast<std::size_t>(x.size()) != g.input(s) || h.size() != H) throw Error("gru_cell: shape mismatch");
  auto W = s[g.W].mat();
  auto U = s[g.U].mat();
  auto b = s[g.b].vec();
  Vec wx = W * x + b;
  Vec uzr = U.topRows(2 * H) * h;
  Vec z = sigmoid(Vec(wx.head(H) + uzr.head(H)));
  Vec r = sigmoid(Vec(wx.segment(H, H) + uzr.tail(H)));
  Vec rh = r.cwiseProduct(h);
  Vec c = (wx.tail(H) + U.bottomRows(H) * rh).array().tanh().matrix();
  Vec out = h + z.cwiseProduct(c - h);
  if (cache) *cache = GruCache{x, h, std::move(z), std::move(r), std::move(c), std::move(rh)};
  return out;
}

/// Backward through one step. Accumulates parameter gradients; writes input
/// and previous-state gradients into gx / gh when non-null.
inline void gru_cell_backward(ModelState& s, const Gru& g, const GruCache& k, const Vec& gout, Vec* gx, Vec* gh) {
  const auto H = static_cast<Eigen::Index>(g.hidden(s));
  Vec dc = gout.cwiseProduct(k.z);
  Vec dz = gout.cwiseProduct(k.c - k.h);
  Vec dh = gout.cwiseProduct(Vec::Ones(H) - k.z);
  Vec dac = dc.cwiseProduct(Vec((1.0 - k.c.array().square()).matrix()));
  Vec daz = dz.cwiseProduct(Vec((k.z.array() * (1.0 - k.z.array())).matrix()));
  auto U = s[g.U].mat();
  Vec drh = U.bottomRows(H).transpose() * dac;
  Vec dr = drh.cwiseProduct(k.h);
  dh += drh.cwiseProduct(k.r);
  Vec dar = dr.cwiseProduct(Vec((k.r.array() * (1.0 - k.r.array())).matrix()));

  Vec da(3 * H);
  da << daz, dar, dac;
  auto gW = s[g.W].gmat();
  auto gU = s[g.U].gmat();
  gW.noalias() += da * k.x.transpose();
  s[g.b].gvec() += da;
  gU.topRows(H).noalias() += daz * k.h.transpose();
  gU.middleRows(H, H).noalias() += dar * k.h.transpose();
  gU.bottomRows(H).noalias() += dac * k.rh.transpose();
  dh.noalias() += U.topRows(2 * H).transpose() * da.head(2 * H);
  if (gx) *gx = s[g.W].mat().transpose() * da;
  if (gh) *gh = std::move(dh);
}

/// Runs the GRU from a zero state over xs; returns the final state. Caches
/// every step when requested.
inline Vec gru_sequence(const ModelState& s, const Gru& g, const std::vector<Vec>& xs,
                        std::vector<GruCache>* caches = nullptr) {
  Vec h = Vec::Zero(static_cast<Eigen::Index>(g.hidden(s)));
  if (caches) caches->resize(xs.size());
  for (std::size_t t = 0; t < xs.size(); ++t) h = gru_cell(s, g, xs[t], h, caches ? &(*caches)[t] : nullptr);
  return h;
}

/// Backpropagates a gradient on the final state through a cached sequence.
/// gxs receives per-step input gradients.
inline void gru_sequence_backward(ModelState& s, const Gru& g, const std::vector<GruCache>& caches, Vec gh,
                                  std::vector<Vec>* gxs) {
  if (gxs) gxs->resize(caches.size());
  for (std::size_t t = caches.size(); t-- > 0;) {
    Vec gx, gprev;
    gru_cell_backward(s, g, caches[t], gh, gxs ? &gx : nullptr, &gprev);
    if (gxs) (*gxs)[t] = std::move(gx);
    gh = std::move(gprev);
  }
}

// ---- gradient check -------------------------------------------------------

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
  std::string worst;  // tensor[index] of the worst coordinate
};

/// Compares analytic gradients against central differences. `loss` must
/// return the scalar loss and accumulate its gradient into the state.
/// Half of the sampled coordinates come from entries with a nonzero analytic
/// gradient so sparse embedding tables are still exercised. Relative error is
/// |a - n| / max(|a|, |n|, floor).
inline GradCheckResult finite_difference_check(const std::function<double(ModelState&)>& loss, ModelState& state,
                                               double eps = 1e-5, std::size_t samples = 100,
                                               std::uint64_t seed = 1, double floor = 1e-6) {
  state.zero_grad();
  double f0 = loss(state);
  if (!std::isfinite(f0)) throw Error("finite_difference_check: non-finite loss");
  std::vector<std::pair<std::size_t, std::size_t>> all, nonzero;
  std::vector<std::vector<double>> analytic;
  for (std::size_t k = 0; k < state.num_tensors(); ++k) {
    analytic.push_back(state[k].grad);
    for (std::size_t i = 0; i < state[k].size(); ++i) {
      all.emplace_back(k, i);
      if (state[k].grad[i] != 0.0) nonzero.emplace_back(k, i);
    }
  }
  std::vector<std::pair<std::size_t, std::size_t>> picks;
  if (all.size() <= samples) {
    picks = all;
  } else {
    Rng rng(seed);
    std::size_t from_nz = std::min(nonzero.size(), samples / 2);
    std::shuffle(nonzero.begin(), nonzero.end(), rng);
    picks.assign(nonzero.begin(), nonzero.begin() + static_cast<std::ptrdiff_t>(from_nz));
    while (picks.size() < samples) picks.push_back(all[uniform_index(rng, all.size())]);
  }
  GradCheckResult res;
  for (auto [k, i] : picks) {
    double& p = state[k].values[i];
    const double orig = p;
    p = orig + eps;
    double fp = loss(state);
    p = orig - eps;
    double fm = loss(state);
    p = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) throw Error("finite_difference_check: non-finite loss");
    double num = (fp - fm) / (2 * eps);
    double a = analytic[k][i];
    double rel = std::abs(a - num) / std::max({std::abs(a), std::abs(num), floor});
    ++res.coordinates;
    if (rel > res.max_rel_error) {
      res.max_rel_error = rel;
      res.worst = state[k].name + "[" + std::to_string(i) + "]";
    }
  }
  state.zero_grad();
  return res;
}

// ---- checkpoints ----------------------------------------------------------

/// Text checkpoint: a magic line, `meta key value` lines, then one block per
/// tensor (`tensor name rank dims...` followed by values, %.17g, 8 per line).
inline void save_checkpoint(const ModelState& s, const std::map<std::string, std::string>& meta,
                            const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(path + ": cannot open for writing");
  out << "fdrec-checkpoint 1\n";
  out << "meta seed " << s.seed() << "\n";
  out << "meta step " << s.step() << "\n";
  for (const auto& [k, v] : meta) {
    if (k.find_first_of(" \t\n") != std::string::npos || v.find('\n') != std::string::npos)
      throw Error("checkpoint meta entries must be single tokens / lines");
    out << "meta " << k << " " << v << "\n";
  }
  char buf[32];
  for (std::size_t k = 0; k < s.num_tensors(); ++k) {
    const auto& t = s[k];
    out << "tensor " << t.name << " " << t.shape.size();
    for (auto d : t.shape) out << " " << d;
    out << "\n";
    for (std::size_t i = 0; i < t.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%.17g", t.values[i]);
      out << buf << ((i % 8 == 7 || i + 1 == t.size()) ? "\n" : " ");
    }
  }
  if (!out) throw Error(path + ": write failed");
}

struct Checkpoint {
  std::map<std::string, std::string> meta;
  std::vector<ParamTensor> tensors;
};

inline Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(path + ": cannot open checkpoint");
  std::string magic, version;
  in >> magic >> version;
  if (magic != "fdrec-checkpoint" || version != "1") throw Error(path + ": not an fdrec checkpoint");
  Checkpoint c;
  std::string tag;
  while (in >> tag) {
    if (tag == "meta") {
      std::string k, v;
      in >> k;
      std::getline(in, v);
      if (!v.empty() && v[0] == ' ') v.erase(0, 1);
      c.meta[k] = v;
    } else if (tag == "tensor") {
      ParamTensor t;
      std::size_t rank = 0;
      in >> t.name >> rank;
      if (!in || rank == 0 || rank > 2) throw Error(path + ": bad tensor header");
      t.shape.resize(rank);
      std::size_t n = 1;
      for (auto& d : t.shape) {
        in >> d;
        n *= d;
      }
      t.values.resize(n);
      for (auto& v : t.values) in >> v;
      if (!in) throw Error(path + ": truncated tensor " + t.name);
      t.grad.assign(n, 0.0);
      c.tensors.push_back(std::move(t));
    } else {
      throw Error(path + ": unexpected token '" + tag + "'");
    }
  }
  return c;
}

/// Copies checkpoint values into a state with the same tensor layout.
inline void load_into(ModelState& s, const Checkpoint& c) {
  if (c.tensors.size() != s.num_tensors()) throw Error("checkpoint tensor count does not match the model");
  for (std::size_t k = 0; k < c.tensors.size(); ++k) {
    const auto& t = c.tensors[k];
    if (t.name != s[k].name || t.shape != s[k].shape) throw Error("checkpoint tensor mismatch at " + t.name);
    s[k].values = t.values;
  }
  if (auto it = c.meta.find("step"); it != c.meta.end()) s.set_step(std::stoull(it->second));
}

}  // namespace fdrec
