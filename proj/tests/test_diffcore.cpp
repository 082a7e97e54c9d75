#include <gtest/gtest.h>

#include "fdrec/diffcore.hpp"
#include "fixtures.hpp"

using namespace fdrec;
using namespace fdrec::testing;

TEST(Scalars, BprAndSigmoid) {
  EXPECT_NEAR(bpr_loss(0.0, 0.0), std::log(2.0), 1e-15);
  EXPECT_NEAR(bpr_loss(2.0, 1.0), std::log1p(std::exp(-1.0)), 1e-15);
  EXPECT_NEAR(bpr_grad(2.0, 1.0), -1.0 / (1.0 + std::exp(1.0)), 1e-15);
  EXPECT_NEAR(bpr_loss(-800.0, 0.0), 800.0, 1e-9);  // no overflow
  EXPECT_NEAR(bpr_loss(800.0, 0.0), 0.0, 1e-300);
  EXPECT_DOUBLE_EQ(sigmoid(0.0), 0.5);
  EXPECT_NEAR(sigmoid(-800.0), 0.0, 1e-300);
  EXPECT_NEAR(sigmoid(3.0) + sigmoid(-3.0), 1.0, 1e-15);
}

TEST(Scalars, SoftmaxStableAndNormalized) {
  Vec z(3);
  z << 1.0, 2.0, 3.0;
  Vec y = softmax(z);
  double e1 = std::exp(1.0), e2 = std::exp(2.0), e3 = std::exp(3.0);
  EXPECT_NEAR(y[0], e1 / (e1 + e2 + e3), 1e-15);
  EXPECT_NEAR(y.sum(), 1.0, 1e-15);
  z << 1000.0, 1000.0, -1000.0;
  y = softmax(z);
  EXPECT_NEAR(y[0], 0.5, 1e-15);
  EXPECT_TRUE(y.allFinite());
  Vec zero = Vec::Zero(2);
  EXPECT_NEAR(softmax(zero)[0], 0.5, 1e-15);
}

TEST(ModelState, InitAndCount) {
  ModelState s(4);
  auto e = s.add("emb", {10, 16}, Init::Embedding);
  auto w = s.add("w", {3, 16}, Init::Weight);
  auto b = s.add("b", {3}, Init::Zero);
  EXPECT_EQ(s.parameter_count(), 160u + 48u + 3u);
  for (double v : s[e].values) EXPECT_LE(std::abs(v), 0.25);
  for (double v : s[b].values) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(s.index_of("w"), w);
  EXPECT_THROW(s.add("w", {2}, Init::Zero), Error);
  EXPECT_THROW(s.add("r3", {2, 2, 2}, Init::Zero), Error);
  EXPECT_THROW(s.get("missing"), Error);
  ModelState t(4);
  t.add("emb", {10, 16}, Init::Embedding);
  EXPECT_EQ(t[0].values, s[e].values);  // same seed, same init
}

TEST(ModelState, AdamMatchesHandComputation) {
  ModelState s(1);
  auto k = s.add("p", {2}, Init::Zero);
  s[k].values = {1.0, -2.0};
  AdamConfig c;
  c.lr = 0.1;
  c.weight_decay = 0.01;
  // Two steps with gradients g1 and g2, recomputed by hand.
  const double g1[2] = {0.5, -1.0}, g2[2] = {0.25, 3.0};
  double p[2] = {1.0, -2.0}, m[2] = {0, 0}, v[2] = {0, 0};
  for (int t = 1; t <= 2; ++t) {
    const double* g = t == 1 ? g1 : g2;
    s[k].grad = {g[0], g[1]};
    s.adam_step(c);
    for (int i = 0; i < 2; ++i) {
      m[i] = 0.9 * m[i] + 0.1 * g[i];
      v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
      double mh = m[i] / (1 - std::pow(0.9, t)), vh = v[i] / (1 - std::pow(0.999, t));
      p[i] -= 0.1 * (mh / (std::sqrt(vh) + 1e-8) + 0.01 * p[i]);
    }
    EXPECT_NEAR(s[k].values[0], p[0], 1e-15);
    EXPECT_NEAR(s[k].values[1], p[1], 1e-15);
    EXPECT_EQ(s[k].grad[0], 0.0);
  }
  EXPECT_EQ(s.step(), 2u);
}

TEST(ModelState, SnapshotRestore) {
  ModelState s(2);
  s.add("a", {3, 3}, Init::Weight);
  auto snap = s.snapshot();
  s[0].values[4] = 99.0;
  s.restore(snap);
  EXPECT_EQ(s[0].values, snap[0]);
  snap.pop_back();
  EXPECT_THROW(s.restore(snap), Error);
}

TEST(GradCheck, DenseLinearLayer) {
  ModelState s(3);
  auto W = s.add("W", {4, 5}, Init::Weight), b = s.add("b", {4}, Init::Weight);
  Vec x = Vec::LinSpaced(5, -1.0, 2.0), target = Vec::LinSpaced(4, 0.5, -0.5);
  auto loss = [&](ModelState& st) {
    Vec y = dense(st[W], st[b], x);
    Vec d = y - target;
    dense_backward(st[W], st[b], x, d);
    return 0.5 * d.squaredNorm();
  };
  auto r = finite_difference_check(loss, s, 1e-5, 100);
  EXPECT_LE(r.max_rel_error, 1e-6) << r.worst;
  // Input gradient of a dense layer.
  s.zero_grad();
  Vec gx = dense_backward(s[W], s[b], x, Vec::Ones(4));
  for (int i = 0; i < 5; ++i) {
    Vec xp = x, xm = x;
    xp[i] += 1e-6;
    xm[i] -= 1e-6;
    double num = (dense(s[W], s[b], xp).sum() - dense(s[W], s[b], xm).sum()) / 2e-6;
    EXPECT_NEAR(gx[i], num, 1e-8);
  }
}

TEST(GradCheck, EmbeddingLookupAccumulates) {
  ModelState s(1);
  auto E = s.add("E", {3, 2}, Init::Embedding);
  embed_backward(s[E], 1, Vec::Ones(2));
  embed_backward(s[E], 1, Vec::Ones(2));
  EXPECT_EQ(s[E].grad, (std::vector<double>{0, 0, 2, 2, 0, 0}));
  EXPECT_EQ(embed_lookup(s[E], 2)[0], s[E].values[4]);
}

TEST(GradCheck, GruCell) {
  ModelState s(5);
  auto g = Gru::create(s, "gru", 4, 3);
  auto hin = s.add("h0", {3}, Init::Embedding);
  auto xin = s.add("x0", {4}, Init::Embedding);
  auto loss = [&](ModelState& st) {
    GruCache c;
    Vec h = gru_cell(st, g, st[xin].vec(), st[hin].vec(), &c);
    Vec gout = h;  // d(0.5|h|^2)/dh
    Vec gx, gh;
    gru_cell_backward(st, g, c, gout, &gx, &gh);
    st[xin].gvec() += gx;
    st[hin].gvec() += gh;
    return 0.5 * h.squaredNorm();
  };
  auto r = finite_difference_check(loss, s, 1e-5, 200);
  EXPECT_LE(r.max_rel_error, 1e-4) << r.worst;
}

TEST(GradCheck, GruSequenceWithSoftmaxHead) {
  ModelState s(3);
  auto g = Gru::create(s, "g", 4, 3);
  auto W = s.add("W", {2, 3}, Init::Weight), b = s.add("b", {2}, Init::Weight);
  std::vector<Vec> xs = {Vec::LinSpaced(4, -1, 1), Vec::LinSpaced(4, 0.5, -0.3), Vec::LinSpaced(4, 0.2, 0.9)};
  auto loss = [&](ModelState& st) {
    std::vector<GruCache> c;
    Vec h = gru_sequence(st, g, xs, &c);
    Vec p = softmax(dense(st[W], st[b], h));
    Vec gy = p;
    gy[0] -= 1;
    Vec gh = dense_backward(st[W], st[b], h, gy);
    gru_sequence_backward(st, g, c, gh, nullptr);
    return -std::log(p[0]);
  };
  auto r = finite_difference_check(loss, s, 1e-5, 200);
  EXPECT_LE(r.max_rel_error, 1e-4) << r.worst;
}

TEST(GradCheck, EmptySequenceIsZeroState) {
  ModelState s(3);
  auto g = Gru::create(s, "g", 2, 3);
  Vec h = gru_sequence(s, g, {});
  EXPECT_EQ(h.size(), 3);
  EXPECT_EQ(h.norm(), 0.0);
}

TEST(GradCheck, SoftmaxBackward) {
  Vec z(4);
  z << 0.3, -1.2, 2.0, 0.1;
  Vec w(4);
  w << 1.0, -2.0, 0.5, 3.0;
  Vec g = softmax_backward(softmax(z), w);
  for (int i = 0; i < 4; ++i) {
    Vec zp = z, zm = z;
    zp[i] += 1e-6;
    zm[i] -= 1e-6;
    EXPECT_NEAR(g[i], (softmax(zp).dot(w) - softmax(zm).dot(w)) / 2e-6, 1e-8);
  }
}

TEST(GradCheck, DetectsAWrongGradient) {
  ModelState s(1);
  auto p = s.add("p", {3}, Init::Weight);
  auto loss = [&](ModelState& st) {
    st[p].gvec() += 3.0 * st[p].vec();  // true gradient is 2p
    return st[p].vec().squaredNorm();
  };
  EXPECT_GT(finite_difference_check(loss, s).max_rel_error, 0.1);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  ModelState s(9);
  s.add("a.b", {7, 5}, Init::Embedding);
  s.add("c", {3}, Init::Weight);
  s[1].values[0] = 1.0 / 3.0;
  s[1].values[1] = -1e-300;
  s.set_step(17);
  auto dir = scratch_dir("ckpt");
  save_checkpoint(s, {{"model", "x"}}, (dir / "m.ckpt").string());
  auto c = read_checkpoint((dir / "m.ckpt").string());
  EXPECT_EQ(c.meta.at("model"), "x");
  EXPECT_EQ(c.meta.at("step"), "17");
  ModelState t(0);
  t.add("a.b", {7, 5}, Init::Zero);
  t.add("c", {3}, Init::Zero);
  load_into(t, c);
  for (std::size_t k = 0; k < 2; ++k) EXPECT_EQ(t[k].values, s[k].values);
  EXPECT_EQ(t.step(), 17u);
  EXPECT_NE(read_file(dir / "m.ckpt").find("tensor a.b 2 7 5"), std::string::npos);
}

TEST(Checkpoint, Mismatches) {
  ModelState s(9);
  s.add("a", {2, 2}, Init::Embedding);
  auto dir = scratch_dir("ckpt-bad");
  save_checkpoint(s, {}, (dir / "m.ckpt").string());
  ModelState other(0);
  other.add("a", {2, 3}, Init::Zero);
  EXPECT_THROW(load_into(other, read_checkpoint((dir / "m.ckpt").string())), Error);
  ModelState more(0);
  more.add("a", {2, 2}, Init::Zero);
  more.add("b", {1}, Init::Zero);
  EXPECT_THROW(load_into(more, read_checkpoint((dir / "m.ckpt").string())), Error);
  write_file(dir / "junk.ckpt", "hello\n");
  EXPECT_THROW(read_checkpoint((dir / "junk.ckpt").string()), Error);
  EXPECT_THROW(save_checkpoint(s, {{"bad key", "v"}}, (dir / "x.ckpt").string()), Error);
}

TEST(Examples, SoftmaxCases) {
  Vec z = Vec::Constant(4, 0.7);
  for (double v : softmax(z)) EXPECT_NEAR(v, 0.25, 1e-15);
  Vec y(2);
  y << 0.0, std::log(3.0);
  Vec p = softmax(y);
  EXPECT_NEAR(p[0], 0.25, 1e-12);
  EXPECT_NEAR(p[1], 0.75, 1e-12);
  Vec r = Vec::LinSpaced(5, -2.0, 3.0);
  EXPECT_LE((softmax(r) - softmax(Vec(r.array() + 100.0))).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Examples, BprCases) {
  EXPECT_NEAR(bpr_loss(std::log(3.0), 0.0), std::log(4.0 / 3.0), 1e-12);
  double prev = bpr_loss(0.0, 0.0);
  for (double d = 0.5; d < 60.0; d += 0.5) {
    double cur = bpr_loss(d, 0.0);
    EXPECT_LE(cur, prev);
    prev = cur;
  }
  EXPECT_LT(prev, 1e-20);
}

TEST(Examples, EmbeddingAndDense) {
  ModelState s(0);
  auto E = s.add("E", {3, 3}, Init::Zero);
  s[E].mat() = RowMat::Identity(3, 3);
  Vec e2 = Vec::Zero(3);
  e2[1] = 1.0;
  EXPECT_EQ(embed_lookup(s[E], 1), e2);
  auto W = s.add("W", {3, 3}, Init::Zero), b = s.add("b", {3}, Init::Zero);
  Vec x = Vec::LinSpaced(3, -1.0, 4.0);
  EXPECT_EQ(dense(s[W], s[b], x), Vec::Zero(3));
  s[W].mat() = RowMat::Identity(3, 3);
  EXPECT_EQ(dense(s[W], s[b], x), x);
}

TEST(Examples, GruZeroWeightsHalveTheState) {
  ModelState s(0);
  auto g = Gru::create(s, "g", 2, 3);
  for (std::size_t k = 0; k < s.num_tensors(); ++k) std::fill(s[k].values.begin(), s[k].values.end(), 0.0);
  Vec h = Vec::LinSpaced(3, -2.0, 1.0);
  EXPECT_NEAR((gru_cell(s, g, Vec::Ones(2), h) - 0.5 * h).norm(), 0.0, 1e-15);
  EXPECT_EQ(gru_cell(s, g, Vec::Zero(2), Vec::Zero(3)), Vec::Zero(3));
  // A one-step sequence equals a direct cell call.
  ModelState t(5);
  auto g2 = Gru::create(t, "g", 2, 3);
  Vec x = Vec::LinSpaced(2, 0.3, -0.8);
  EXPECT_EQ(gru_sequence(t, g2, {x}), gru_cell(t, g2, x, Vec::Zero(3)));
}

TEST(Examples, AdamCases) {
  AdamConfig c;
  c.lr = 0.01;
  ModelState s(2);
  auto p = s.add("p", {4}, Init::Embedding);
  auto before = s[p].values;
  s.adam_step(c);  // zero gradient
  EXPECT_EQ(s[p].values, before);
  ModelState t(2);
  auto q = t.add("q", {1}, Init::Zero);
  t[q].grad[0] = -3.7;
  t.adam_step(c);
  EXPECT_NEAR(t[q].values[0], 0.01, 1e-9);  // first step moves by lr against the gradient sign
  // Identical runs give identical parameters.
  auto run = [] {
    ModelState u(8);
    auto k = u.add("w", {5}, Init::Embedding);
    AdamConfig a;
    a.weight_decay = 0.1;
    for (int i = 0; i < 10; ++i) {
      for (std::size_t j = 0; j < 5; ++j) u[k].grad[j] = std::sin(i + j * 1.0) + u[k].values[j];
      u.adam_step(a);
    }
    return u[k].values;
  };
  EXPECT_EQ(run(), run());
}

TEST(Examples, QuadraticBowlIsExact) {
  ModelState s(6);
  auto p = s.add("p", {20}, Init::Embedding);
  auto loss = [&](ModelState& st) {
    st[p].gvec() += 2.0 * st[p].vec();
    return st[p].vec().squaredNorm();
  };
  EXPECT_LE(finite_difference_check(loss, s).max_rel_error, 1e-8);
  auto bad = [&](ModelState&) { return std::numeric_limits<double>::infinity(); };
  EXPECT_THROW(finite_difference_check(bad, s), Error);
}
