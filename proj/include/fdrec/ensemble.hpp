#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "fdrec/evalharness.hpp"
#include "fdrec/exprec.hpp"
#include "fdrec/modelcore.hpp"
#include "fdrec/reprec.hpp"

namespace fdrec {

struct IntentEstimate {
  double repeat_prob = 0.5;
  double explore_prob = 0.5;
};

/// Min-max scaling to [0, 1]; a constant list maps to 0.5 everywhere.
inline std::vector<double> normalize_slate(const std::vector<double>& scores) {
  if (scores.empty()) throw Error("normalize_slate: empty slate");
  auto [lo, hi] = std::minmax_element(scores.begin(), scores.end());
  const double a = *lo, b = *hi;
  std::vector<double> out(scores.size(), 0.5);
  if (b > a)
    for (std::size_t i = 0; i < scores.size(); ++i) out[i] = (scores[i] - a) / (b - a);
  return out;
}

/// Repeat items first, exploration items after, each with its final score
/// p = weight * base score.
struct CombinedSlate {
  ScoredSlate repeat, exploration;  // normalized base scores
  std::vector<double> w_r, w_e;
  std::vector<double> p;
};

struct EnsembleConfig {
  TrainConfig train{};
  std::size_t attn_dim = 32;
  std::size_t history_limit = 20;
  double intent_weight = 1.0;
  std::size_t intent_epochs = 20;
  std::size_t train_candidates = 100;  // candidate list size for training instances
  std::size_t train_instances = 20000;  // training rows sampled once (0 keeps all)
};

namespace detail {

inline RowMat row_softmax(const RowMat& s) {
  RowMat out(s.rows(), s.cols());
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    Eigen::RowVectorXd e = (s.row(i).array() - s.row(i).maxCoeff()).exp();
    out.row(i) = e / e.sum();
  }
  return out;
}

inline RowMat row_softmax_backward(const RowMat& a, const RowMat& ga) {
  RowMat out = a.cwiseProduct(ga);
  Eigen::VectorXd dots = out.rowwise().sum();
  out -= a.cwiseProduct(dots.replicate(1, a.cols()));
  return out;
}

}  // namespace detail

/// Intent predictor plus item-level weighting of the two base slates.
///
/// Items enter as (normalized score, origin) pairs lifted to attn_dim; one
/// single-head self-attention pass mixes them (with a residual), then each
/// item attends over two intent tokens built from (probability, intent
/// one-hot), and a sigmoid projection yields its weight.
struct EnsembleModel {
  ModelState state;
  LocationMap locations;
  std::size_t history_limit = 20;
  // Intent predictor.
  std::size_t flags = 0, users = 0, head_W = 0, head_b = 0;
  SituationEmbedding situation;
  Gru gru;
  // Combiner.
  std::size_t lift_W = 0, lift_b = 0, sq = 0, sk = 0, sv = 0;
  std::size_t tok_W = 0, tok_b = 0, cq = 0, ck = 0, cv = 0, proj_w = 0, proj_b = 0;

  static EnsembleModel create(std::size_t num_users, LocationMap locations, std::size_t dim, std::size_t attn_dim,
                              std::uint64_t seed) {
    EnsembleModel m{ModelState(seed), std::move(locations)};
    auto& s = m.state;
    m.flags = s.add("ensemble.intent.flag", {2, dim}, Init::Embedding);
    m.gru = Gru::create(s, "ensemble.intent.gru", dim, dim);
    m.situation = SituationEmbedding::create(s, "ensemble.intent.situation", m.locations.rows, dim);
    m.users = s.add("ensemble.intent.user", {num_users, dim}, Init::Embedding);
    m.head_W = s.add("ensemble.intent.head.W", {2, 3 * dim}, Init::Weight);
    m.head_b = s.add("ensemble.intent.head.b", {2}, Init::Zero);
    m.lift_W = s.add("ensemble.lift.W", {attn_dim, 2}, Init::Weight);
    m.lift_b = s.add("ensemble.lift.b", {attn_dim}, Init::Zero);
    m.sq = s.add("ensemble.self.Wq", {attn_dim, attn_dim}, Init::Weight);
    m.sk = s.add("ensemble.self.Wk", {attn_dim, attn_dim}, Init::Weight);
    m.sv = s.add("ensemble.self.Wv", {attn_dim, attn_dim}, Init::Weight);
    m.tok_W = s.add("ensemble.intent_token.W", {attn_dim, 3}, Init::Weight);
    m.tok_b = s.add("ensemble.intent_token.b", {attn_dim}, Init::Zero);
    m.cq = s.add("ensemble.cross.Wq", {attn_dim, attn_dim}, Init::Weight);
    m.ck = s.add("ensemble.cross.Wk", {attn_dim, attn_dim}, Init::Weight);
    m.cv = s.add("ensemble.cross.Wv", {attn_dim, attn_dim}, Init::Weight);
    m.proj_w = s.add("ensemble.proj.w", {1, attn_dim}, Init::Weight);
    m.proj_b = s.add("ensemble.proj.b", {1}, Init::Zero);
    return m;
  }

  std::size_t dim() const { return state[flags].cols(); }
  std::size_t attn_dim() const { return state[lift_b].size(); }

  // ---- intent --------------------------------------------------------------

  struct IntentCache {
    std::vector<GruCache> gru;
    std::vector<int> flags;
    Vec input;  // hidden ++ situation ++ user
    Vec probs;
    SituationFeatures now;
    UserId user = 0;
  };

  IntentEstimate predict_intent(UserId user, const std::vector<bool>& intent_history, const SituationFeatures& now,
                                IntentCache* cache = nullptr) const {
    const auto D = static_cast<Eigen::Index>(dim());
    std::size_t begin = history_limit > 0 && intent_history.size() > history_limit
                            ? intent_history.size() - history_limit
                            : 0;
    std::vector<Vec> xs;
    std::vector<int> fl;
    for (std::size_t i = begin; i < intent_history.size(); ++i) {
      fl.push_back(intent_history[i] ? 1 : 0);
      xs.push_back(state[flags].row(static_cast<std::size_t>(fl.back())));
    }
    std::vector<GruCache> caches;
    Vec h = gru_sequence(state, gru, xs, cache ? &caches : nullptr);
    Vec in(3 * D);
    in << h, situation.encode(state, now, locations), state[users].row(user);
    Vec p = softmax(dense(state[head_W], state[head_b], in));
    if (cache) *cache = IntentCache{std::move(caches), std::move(fl), in, p, now, user};
    return {p[0], p[1]};
  }

  /// Backward from gradients on (repeat_prob, explore_prob).
  void intent_backward(const IntentCache& c, const Vec& gp) {
    const auto D = static_cast<Eigen::Index>(dim());
    Vec gin = dense_backward(state[head_W], state[head_b], c.input, softmax_backward(c.probs, gp));
    state[users].grow(c.user) += gin.tail(D);
    situation.backward(state, c.now, locations, gin.segment(D, D));
    if (!c.gru.empty()) {
      std::vector<Vec> gxs;
      gru_sequence_backward(state, gru, c.gru, gin.head(D), &gxs);
      for (std::size_t t = 0; t < gxs.size(); ++t) state[flags].grow(static_cast<std::size_t>(c.flags[t])) += gxs[t];
    }
  }

  // ---- combiner ------------------------------------------------------------

  struct CombineCache {
    RowMat in, X, Q, K, V, A, H, Tin, T, Q2, K2, V2, A2, Z;
    Vec logits, weights;
  };

  /// Per-item weights in (0, 1) for items given as (normalized score,
  /// origin = 1 for repeat) rows.
  Vec item_weights(const RowMat& items, const IntentEstimate& intent, CombineCache* cache = nullptr) const {
    const double scale = 1.0 / std::sqrt(static_cast<double>(attn_dim()));
    CombineCache c;
    c.in = items;
    c.X = (items * state[lift_W].mat().transpose()).rowwise() + state[lift_b].vec().transpose();
    c.Q = c.X * state[sq].mat().transpose();
    c.K = c.X * state[sk].mat().transpose();
    c.V = c.X * state[sv].mat().transpose();
    c.A = detail::row_softmax(RowMat(c.Q * c.K.transpose() * scale));
    c.H = c.X + c.A * c.V;
    c.Tin.resize(2, 3);
    c.Tin << intent.repeat_prob, 1.0, 0.0, intent.explore_prob, 0.0, 1.0;
    c.T = (c.Tin * state[tok_W].mat().transpose()).rowwise() + state[tok_b].vec().transpose();
    c.Q2 = c.H * state[cq].mat().transpose();
    c.K2 = c.T * state[ck].mat().transpose();
    c.V2 = c.T * state[cv].mat().transpose();
    c.A2 = detail::row_softmax(RowMat(c.Q2 * c.K2.transpose() * scale));
    c.Z = c.H + c.A2 * c.V2;
    c.logits = (c.Z * state[proj_w].mat().transpose()).col(0).array() + state[proj_b].values[0];
    c.weights = sigmoid(c.logits);
    Vec w = c.weights;
    if (cache) *cache = std::move(c);
    return w;
  }

  /// Backward from gradients on the item weights; returns the gradient on
  /// (repeat_prob, explore_prob).
  Vec item_weights_backward(const CombineCache& c, const Vec& gw) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(attn_dim()));
    Vec gl = gw.cwiseProduct(Vec((c.weights.array() * (1.0 - c.weights.array())).matrix()));
    state[proj_w].gmat().row(0) += (c.Z.transpose() * gl).transpose();
    state[proj_b].grad[0] += gl.sum();
    RowMat dZ = gl * state[proj_w].mat().row(0);

    // Cross attention.
    RowMat dH = dZ;
    RowMat dV2 = c.A2.transpose() * dZ;
    RowMat dA2 = dZ * c.V2.transpose();
    RowMat dS2 = detail::row_softmax_backward(c.A2, dA2) * scale;
    RowMat dQ2 = dS2 * c.K2;
    RowMat dK2 = dS2.transpose() * c.Q2;
    state[cq].gmat() += dQ2.transpose() * c.H;
    state[ck].gmat() += dK2.transpose() * c.T;
    state[cv].gmat() += dV2.transpose() * c.T;
    dH += dQ2 * state[cq].mat();
    RowMat dT = dK2 * state[ck].mat() + dV2 * state[cv].mat();
    state[tok_W].gmat() += dT.transpose() * c.Tin;
    state[tok_b].gvec() += dT.colwise().sum().transpose();
    Vec gp(2);
    gp[0] = dT.row(0).dot(state[tok_W].mat().col(0));
    gp[1] = dT.row(1).dot(state[tok_W].mat().col(0));

    // Self attention with residual.
    RowMat dX = dH;
    RowMat dV = c.A.transpose() * dH;
    RowMat dA = dH * c.V.transpose();
    RowMat dS = detail::row_softmax_backward(c.A, dA) * scale;
    RowMat dQ = dS * c.K;
    RowMat dK = dS.transpose() * c.Q;
    state[sq].gmat() += dQ.transpose() * c.X;
    state[sk].gmat() += dK.transpose() * c.X;
    state[sv].gmat() += dV.transpose() * c.X;
    dX += dQ * state[sq].mat() + dK * state[sk].mat() + dV * state[sv].mat();
    state[lift_W].gmat() += dX.transpose() * c.in;
    state[lift_b].gvec() += dX.colwise().sum().transpose();
    return gp;
  }

  static RowMat item_rows(const std::vector<double>& rep, const std::vector<double>& exp) {
    RowMat items(static_cast<Eigen::Index>(rep.size() + exp.size()), 2);
    Eigen::Index r = 0;
    for (double v : rep) items.row(r++) << v, 1.0;
    for (double v : exp) items.row(r++) << v, 0.0;
    return items;
  }

  /// Combines normalized repeat and exploration slates: p_i = w_i * score_i
  /// with repeat items first.
  CombinedSlate combine(const ScoredSlate& repeat, const ScoredSlate& exploration, const IntentEstimate& intent) const {
    for (auto a : repeat.candidates)
      for (auto b : exploration.candidates)
        if (a == b) throw Error("ensemble: store " + std::to_string(a) + " appears in both slates");
    CombinedSlate out;
    out.repeat = repeat;
    out.exploration = exploration;
    if (repeat.candidates.empty() && exploration.candidates.empty()) return out;
    Vec w = item_weights(item_rows(repeat.scores, exploration.scores), intent);
    const std::size_t a = repeat.scores.size();
    for (std::size_t i = 0; i < a; ++i) {
      out.w_r.push_back(w[static_cast<Eigen::Index>(i)]);
      out.p.push_back(out.w_r.back() * repeat.scores[i]);
    }
    for (std::size_t i = 0; i < exploration.scores.size(); ++i) {
      out.w_e.push_back(w[static_cast<Eigen::Index>(a + i)]);
      out.p.push_back(out.w_e.back() * exploration.scores[i]);
    }
    return out;
  }

  /// Stage-two loss for one instance: BPR between the target's and a
  /// negative's final score plus intent_weight times the intent
  /// cross-entropy. Accumulates gradients.
  double loss(UserId user, const std::vector<bool>& intent_history, const SituationFeatures& now,
              const std::vector<double>& rep, const std::vector<double>& exp, std::size_t target, std::size_t negative,
              bool target_is_repeat, double intent_weight) {
    IntentCache ic;
    auto intent = predict_intent(user, intent_history, now, &ic);
    RowMat items = item_rows(rep, exp);
    CombineCache cc;
    Vec w = item_weights(items, intent, &cc);
    const double st = items(static_cast<Eigen::Index>(target), 0), sn = items(static_cast<Eigen::Index>(negative), 0);
    const double xp = w[static_cast<Eigen::Index>(target)] * st, xn = w[static_cast<Eigen::Index>(negative)] * sn;
    const double g = bpr_grad(xp, xn);
    Vec gw = Vec::Zero(w.size());
    gw[static_cast<Eigen::Index>(target)] += g * st;
    gw[static_cast<Eigen::Index>(negative)] -= g * sn;
    Vec gp = item_weights_backward(cc, gw);
    const int label = target_is_repeat ? 0 : 1;
    gp[label] -= intent_weight / ic.probs[label];
    intent_backward(ic, gp);
    return bpr_loss(xp, xn) - intent_weight * std::log(ic.probs[label]);
  }

  /// Intent cross-entropy alone (stage one). Accumulates gradients.
  double intent_loss(UserId user, const std::vector<bool>& intent_history, const SituationFeatures& now,
                     bool is_repeat) {
    IntentCache ic;
    predict_intent(user, intent_history, now, &ic);
    const int label = is_repeat ? 0 : 1;
    Vec gp = Vec::Zero(2);
    gp[label] = -1.0 / ic.probs[label];
    intent_backward(ic, gp);
    return -std::log(ic.probs[label]);
  }
};

/// Repeat flags of the user's interactions before `row`.
inline std::vector<bool> intent_history_before(const DatasetSplit& split, std::size_t row, std::size_t limit) {
  const auto& log = *split.log;
  auto seq = log.user_rows(log.row(row).user);
  std::size_t end = log.rank_in_user(row);
  std::size_t begin = limit > 0 && end > limit ? end - limit : 0;
  std::vector<bool> out;
  for (std::size_t k = begin; k < end; ++k) out.push_back(split.repeat[seq[k]] != 0);
  return out;
}

/// Normalized base slates for a combined-protocol case: the first num_prior
/// candidates go to RepRec, the rest to ExpRec.
struct BaseSlates {
  std::vector<double> rep, exp;
};

inline BaseSlates base_slates(const RepRecModel& rr, const ExpRecModel& er, const DatasetSplit& split,
                              const EvalCase& c) {
  const auto& log = *split.log;
  const auto now = log.situation(c.row);
  std::vector<StoreId> rc(c.candidates.begin(), c.candidates.begin() + static_cast<std::ptrdiff_t>(c.num_prior));
  std::vector<StoreId> ec(c.candidates.begin() + static_cast<std::ptrdiff_t>(c.num_prior), c.candidates.end());
  BaseSlates b;
  if (!rc.empty()) b.rep = normalize_slate(rr.score(history_before(split, c.row, rr.history_limit), now, rc));
  if (!ec.empty())
    b.exp = normalize_slate(er.score(log.row(c.row).user, history_before(split, c.row, er.history_limit), now, ec));
  return b;
}

/// Unit-weight concatenation of the two normalized slates.
inline CaseScorer concat_scorer(const RepRecModel& rr, const ExpRecModel& er, const DatasetSplit& split) {
  return [&rr, &er, &split](const EvalCase& c) {
    auto b = base_slates(rr, er, split, c);
    b.rep.insert(b.rep.end(), b.exp.begin(), b.exp.end());
    return b.rep;
  };
}

inline CaseScorer ensemble_scorer(const EnsembleModel& m, const RepRecModel& rr, const ExpRecModel& er,
                                  const DatasetSplit& split) {
  return [&m, &rr, &er, &split](const EvalCase& c) {
    const auto& log = *split.log;
    auto b = base_slates(rr, er, split, c);
    auto intent = m.predict_intent(log.row(c.row).user, intent_history_before(split, c.row, m.history_limit),
                                   log.situation(c.row));
    Vec w = m.item_weights(EnsembleModel::item_rows(b.rep, b.exp), intent);
    std::vector<double> p;
    for (std::size_t i = 0; i < b.rep.size(); ++i) p.push_back(w[static_cast<Eigen::Index>(i)] * b.rep[i]);
    for (std::size_t i = 0; i < b.exp.size(); ++i)
      p.push_back(w[static_cast<Eigen::Index>(b.rep.size() + i)] * b.exp[i]);
    return p;
  };
}

/// Two-stage training with frozen base models. Stage one fits the intent
/// predictor with cross-entropy on repeat flags of training rows (early
/// stopping on validation cross-entropy). Stage two fits the combiner with
/// BPR over combined-protocol candidates plus the weighted intent loss,
/// early-stopping on validation combined HR@3.
inline EnsembleModel ensemble_train(const DatasetSplit& split, const RepRecModel& rr, const ExpRecModel& er,
                                    const EnsembleConfig& cfg, TrainHistory* history = nullptr,
                                    const std::function<void(const EpochRecord&)>& log_fn = {}) {
  const auto& log = *split.log;
  const auto& tc = cfg.train;
  auto m = EnsembleModel::create(log.num_users(), LocationMap::from_split(split), tc.dim, cfg.attn_dim, tc.seed);
  m.history_limit = cfg.history_limit;

  std::vector<std::size_t> rows;
  for (std::size_t i = split.begin(Partition::Train); i < split.end(Partition::Train); ++i) rows.push_back(i);
  if (rows.empty()) throw Error("ensemble: empty training partition");
  if (cfg.train_instances > 0 && rows.size() > cfg.train_instances) {
    std::vector<std::size_t> thin(cfg.train_instances);
    for (std::size_t k = 0; k < thin.size(); ++k) thin[k] = rows[k * rows.size() / thin.size()];
    rows = std::move(thin);
  }

  // Stage one.
  std::vector<std::size_t> vrows;
  for (std::size_t i = split.begin(Partition::Valid); i < split.end(Partition::Valid); ++i) vrows.push_back(i);
  if (tc.valid_cases > 0 && vrows.size() > tc.valid_cases) {
    std::vector<std::size_t> thin(tc.valid_cases);
    for (std::size_t k = 0; k < thin.size(); ++k) thin[k] = vrows[k * vrows.size() / thin.size()];
    vrows = std::move(thin);
  }
  auto intent_epoch = [&](std::size_t e) {
    auto order = epoch_order(rows.size(), tc.seed ^ 0x1e7, e);
    double total = 0.0;
    for (std::size_t b = 0; b < rows.size(); b += tc.batch) {
      for (std::size_t k = b; k < std::min(rows.size(), b + tc.batch); ++k) {
        std::size_t r = rows[order[k]];
        total += m.intent_loss(log.row(r).user, intent_history_before(split, r, m.history_limit), log.situation(r),
                               split.repeat[r] != 0);
      }
      m.state.adam_step(tc.adam);
    }
    return total / static_cast<double>(rows.size());
  };
  auto intent_valid = [&] {
    double ce = 0.0;
    for (auto r : vrows) {
      auto p = m.predict_intent(log.row(r).user, intent_history_before(split, r, m.history_limit), log.situation(r));
      ce -= std::log(split.repeat[r] ? p.repeat_prob : p.explore_prob);
    }
    return vrows.empty() ? 0.0 : -ce / static_cast<double>(vrows.size());
  };
  TrainConfig stage1 = tc;
  stage1.max_epochs = cfg.intent_epochs;
  fit(m.state, stage1, intent_epoch, intent_valid);

  // Stage two: candidates and frozen base scores are fixed once.
  struct Instance {
    std::size_t row;
    BaseSlates base;
    std::size_t target;
  };
  std::vector<Instance> inst(rows.size());
  parallel_for(rows.size(), [&](std::size_t k) {
    EvalCase c = make_case(split, rows[k], Protocol::Combined, tc.seed ^ 0xc0b, cfg.train_candidates);
    inst[k] = {rows[k], base_slates(rr, er, split, c), c.target_pos};
  });
  auto valid = build_cases(split, Protocol::Combined, tc.seed, Partition::Valid, tc.valid_cases);

  auto epoch = [&](std::size_t e) {
    auto order = epoch_order(inst.size(), tc.seed, e);
    Rng rng(mix_seed(tc.seed ^ 0xe75e, e));
    double total = 0.0;
    for (std::size_t b = 0; b < inst.size(); b += tc.batch) {
      for (std::size_t k = b; k < std::min(inst.size(), b + tc.batch); ++k) {
        const auto& x = inst[order[k]];
        const std::size_t n = x.base.rep.size() + x.base.exp.size();
        if (n < 2) continue;
        std::size_t neg = uniform_index(rng, n - 1);
        if (neg >= x.target) ++neg;
        total += m.loss(log.row(x.row).user, intent_history_before(split, x.row, m.history_limit),
                        log.situation(x.row), x.base.rep, x.base.exp, x.target, neg, split.repeat[x.row] != 0,
                        cfg.intent_weight);
      }
      m.state.adam_step(tc.adam);
    }
    return total / static_cast<double>(inst.size());
  };
  auto val = [&] { return valid.empty() ? 0.0 : evaluate(ensemble_scorer(m, rr, er, split), valid).hr; };
  auto h = fit(m.state, tc, epoch, val, log_fn);
  if (history) *history = std::move(h);
  return m;
}

}  // namespace fdrec
