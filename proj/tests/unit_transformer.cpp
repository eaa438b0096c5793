// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "agrifuse/errors.hpp"
#include "agrifuse/transformer.hpp"
#include "test_support.hpp"

using namespace agrifuse;
using testsup::check_gradients;
using testsup::random_tensor;

namespace {

// Loop reference for scaled attention, independent of the tensor engine.
std::vector<double> attention_ref(const std::vector<double>& q,
                                  const std::vector<double>& k,
                                  const std::vector<double>& v, std::size_t nq,
                                  std::size_t nk, std::size_t dk,
                                  std::size_t dv) {
  std::vector<double> out(nq * dv, 0.0);
  for (std::size_t i = 0; i < nq; ++i) {
    std::vector<double> scores(nk);
    for (std::size_t j = 0; j < nk; ++j) {
      double s = 0;
      for (std::size_t t = 0; t < dk; ++t) s += q[i * dk + t] * k[j * dk + t];
      scores[j] = s / std::sqrt(static_cast<double>(dk));
    }
    const double m = *std::max_element(scores.begin(), scores.end());
    double z = 0;
    for (double& s : scores) {
      s = std::exp(s - m);
      z += s;
    }
    for (std::size_t j = 0; j < nk; ++j) {
      for (std::size_t t = 0; t < dv; ++t) {
        out[i * dv + t] += scores[j] / z * v[j * dv + t];
      }
    }
  }
  return out;
}

std::vector<double> to_vec(const Tensor& t) {
  return {t.values().begin(), t.values().end()};
}

void zero_all(EncoderParams& p) {
  p.visit("p", [](const std::string& name, Tensor& t) {
    if (name.find(".ln") != std::string::npos) return;  // keep LN affine
    auto v = t.mutable_values();
    std::fill(v.begin(), v.end(), 0.0);
  });
}

Tensor eye(std::size_t n) {
  Tensor t = Tensor::zeros({n, n}, true);
  auto v = t.mutable_values();
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
  return t;
}

std::vector<Tensor> collect(EncoderParams& p) {
  std::vector<Tensor> out;
  p.visit("p", [&](const std::string&, Tensor& t) { out.push_back(t); });
  return out;
}

}  // namespace

TEST_CASE("scaled_attention degenerate cases") {
  Rng rng(3);
  // single key/value: softmax of a singleton is 1, output == that V row
  Tensor q = random_tensor({4, 3}, rng, -2, 2, false);
  Tensor k = random_tensor({1, 3}, rng, -2, 2, false);
  Tensor v = random_tensor({1, 5}, rng, -2, 2, false);
  Tensor out = scaled_attention(q, k, v);
  REQUIRE(out.shape() == Shape{4, 5});
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < 5; ++j) {
      CHECK(out.at({i, j}) == doctest::Approx(v.at({0, j})).epsilon(1e-14));
    }
  }

  // zero logits attend uniformly: rows become the column mean of V
  Tensor q0 = Tensor::zeros({2, 3});
  Tensor k0 = Tensor::zeros({4, 3});
  Tensor v2 = random_tensor({4, 2}, rng, -1, 1, false);
  Tensor uniform = scaled_attention(q0, k0, v2);
  for (std::size_t j = 0; j < 2; ++j) {
    double mean = 0;
    for (std::size_t r = 0; r < 4; ++r) mean += v2.at({r, j});
    mean /= 4.0;
    CHECK(uniform.at({0, j}) == doctest::Approx(mean).epsilon(1e-14));
    CHECK(uniform.at({1, j}) == doctest::Approx(mean).epsilon(1e-14));
  }

  Tensor bad_k = Tensor::zeros({4, 2});
  CHECK_THROWS_AS(scaled_attention(q, bad_k, v2), ShapeError);
}

TEST_CASE("scaled_attention matches the loop reference") {
  Rng rng(11);
  for (int rep = 0; rep < 10; ++rep) {
    Tensor q = random_tensor({3, 4}, rng, -2, 2, false);
    Tensor k = random_tensor({5, 4}, rng, -2, 2, false);
    Tensor v = random_tensor({5, 3}, rng, -2, 2, false);
    Tensor out = scaled_attention(q, k, v);
    auto ref = attention_ref(to_vec(q), to_vec(k), to_vec(v), 3, 5, 4, 3);
    for (std::size_t i = 0; i < ref.size(); ++i) {
      CHECK(std::fabs(out.values()[i] - ref[i]) < 1e-12);
    }
  }
}

TEST_CASE("attention outputs stay in the convex hull of V") {
  Rng rng(19);
  for (int rep = 0; rep < 20; ++rep) {
    Tensor q = random_tensor({4, 6}, rng, -3, 3, false);
    Tensor k = random_tensor({7, 6}, rng, -3, 3, false);
    Tensor v = random_tensor({7, 2}, rng, -5, 5, false);
    Tensor out = scaled_attention(q, k, v);
    for (std::size_t j = 0; j < 2; ++j) {
      double lo = 1e300, hi = -1e300;
      for (std::size_t r = 0; r < 7; ++r) {
        lo = std::min(lo, v.at({r, j}));
        hi = std::max(hi, v.at({r, j}));
      }
      for (std::size_t r = 0; r < 4; ++r) {
        CHECK(out.at({r, j}) >= lo - 1e-12);
        CHECK(out.at({r, j}) <= hi + 1e-12);
      }
    }
  }
}

TEST_CASE("multi_head reduces to scaled_attention with identity maps") {
  Rng rng(23);
  const std::size_t d = 4;
  MultiHeadParams p;
  p.wq.push_back(eye(d));
  p.wk.push_back(eye(d));
  p.wv.push_back(eye(d));
  p.wo = eye(d);
  Tensor x = random_tensor({5, d}, rng, -1, 1, false);
  Tensor a = multi_head(x, p);
  Tensor b = scaled_attention(x, x, x);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a.values()[i] == doctest::Approx(b.values()[i]).epsilon(1e-14));
  }
}

TEST_CASE("multi_head matches per-head loop oracle") {
  Rng rng(29);
  const std::size_t d_model = 64, h = 8, d_head = d_model / h, n = 6;
  MultiHeadParams p = MultiHeadParams::make(d_model, h, rng);
  Tensor x = random_tensor({n, d_model}, rng, -1, 1, false);

  Tensor fast = multi_head(x, p);

  // oracle: naive matmul projections, loop attention, manual concat
  const auto xv = to_vec(x);
  std::vector<double> concat(n * d_model);
  for (std::size_t head = 0; head < h; ++head) {
    auto qs = testsup::naive_matmul(xv, to_vec(p.wq[head]), n, d_model, d_head);
    auto ks = testsup::naive_matmul(xv, to_vec(p.wk[head]), n, d_model, d_head);
    auto vs = testsup::naive_matmul(xv, to_vec(p.wv[head]), n, d_model, d_head);
    auto att = attention_ref(qs, ks, vs, n, n, d_head, d_head);
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = 0; c < d_head; ++c) {
        concat[r * d_model + head * d_head + c] = att[r * d_head + c];
      }
    }
  }
  auto ref = testsup::naive_matmul(concat, to_vec(p.wo), n, d_model, d_model);
  for (std::size_t i = 0; i < ref.size(); ++i) {
    CHECK(std::fabs(fast.values()[i] - ref[i]) < 1e-12);
  }

  Tensor wrong = random_tensor({n, d_model + 1}, rng, -1, 1, false);
  CHECK_THROWS_AS(multi_head(wrong, p), ShapeError);
}

TEST_CASE("ffn worked examples") {
  Rng rng(31);
  FfnParams zero;
  zero.w1 = Tensor::zeros({3, 4}, true);
  zero.b1 = Tensor::zeros({4}, true);
  zero.w2 = Tensor::zeros({4, 3}, true);
  zero.b2 = Tensor::zeros({3}, true);
  Tensor x = random_tensor({2, 3}, rng, -1, 1, false);
  Tensor out = ffn(x, zero);
  for (double v : out.values()) CHECK(v == 0.0);

  // identity maps with GELU: x = 0 stays 0
  FfnParams ident;
  ident.w1 = eye(3);
  ident.b1 = Tensor::zeros({3}, true);
  ident.w2 = eye(3);
  ident.b2 = Tensor::zeros({3}, true);
  Tensor zeros_out = ffn(Tensor::zeros({2, 3}), ident);
  for (double v : zeros_out.values()) CHECK(v == 0.0);

  // random case vs manual two-step composition
  FfnParams p = FfnParams::make(3, 5, rng);
  Tensor y = ffn(x, p);
  Tensor manual = add_bias(
      matmul(gelu(add_bias(matmul(x, p.w1), p.b1)), p.w2), p.b2);
  for (std::size_t i = 0; i < y.size(); ++i) {
    CHECK(std::fabs(y.values()[i] - manual.values()[i]) < 1e-12);
  }
}

TEST_CASE("post-norm block composition and shape") {
  Rng rng(37);
  EncoderParams p = EncoderParams::make(6, 2, 8, 0.1, rng);
  Tensor x = random_tensor({4, 6}, rng, -1, 1, false);
  Rng fwd(1);
  Tensor out = encoder_block_postnorm(x, p, Mode::eval, fwd);
  CHECK(out.shape() == x.shape());

  // eval mode equals the explicit four-step composition
  Tensor h = layer_norm(add(x, multi_head(x, p.mha)), p.ln1_gain, p.ln1_bias);
  Tensor ref = layer_norm(add(h, ffn(h, p.ff)), p.ln2_gain, p.ln2_bias);
  for (std::size_t i = 0; i < out.size(); ++i) {
    CHECK(std::fabs(out.values()[i] - ref.values()[i]) < 1e-12);
  }

  // zero sublayer weights with unit LN affine: out = LN(LN(x))
  EncoderParams pz = EncoderParams::make(6, 2, 8, 0.0, rng);
  zero_all(pz);
  Rng fwd2(1);
  Tensor pure = encoder_block_postnorm(x, pz, Mode::eval, fwd2);
  Tensor lnln = layer_norm(layer_norm(x, pz.ln1_gain, pz.ln1_bias),
                           pz.ln2_gain, pz.ln2_bias);
  for (std::size_t i = 0; i < pure.size(); ++i) {
    CHECK(std::fabs(pure.values()[i] - lnln.values()[i]) < 1e-12);
  }
}

TEST_CASE("pre-norm block: zero sublayers give the exact identity") {
  Rng rng(41);
  EncoderParams p = EncoderParams::make(5, 1, 7, 0.0, rng);
  zero_all(p);
  Tensor x = random_tensor({6, 5}, rng, -2, 2, false);
  Tensor out = encoder_block_prenorm(x, p);
  REQUIRE(out.shape() == x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    CHECK(out.values()[i] == x.values()[i]);
  }

  // compositional check with live weights
  EncoderParams q = EncoderParams::make(5, 1, 7, 0.0, rng);
  Tensor zp = add(multi_head(layer_norm(x, q.ln1_gain, q.ln1_bias), q.mha), x);
  Tensor ref = add(ffn(layer_norm(zp, q.ln2_gain, q.ln2_bias), q.ff), zp);
  Tensor got = encoder_block_prenorm(x, q);
  for (std::size_t i = 0; i < got.size(); ++i) {
    CHECK(std::fabs(got.values()[i] - ref.values()[i]) < 1e-12);
  }
}

TEST_CASE("blocks are permutation equivariant in eval mode") {
  Rng rng(43);
  const std::size_t n = 6, d = 8;
  EncoderParams p = EncoderParams::make(d, 2, 12, 0.1, rng);
  Tensor x = random_tensor({n, d}, rng, -1, 1, false);

  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  for (std::size_t i = n; i > 1; --i) {
    std::swap(perm[i - 1], perm[rng.below(i)]);
  }
  std::vector<double> permuted(n * d);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < d; ++c) {
      permuted[r * d + c] = x.at({perm[r], c});
    }
  }
  Tensor px = Tensor::from_vector({n, d}, permuted);

  Rng r1(1), r2(1);
  Tensor a = encoder_block_postnorm(x, p, Mode::eval, r1);
  Tensor b = encoder_block_postnorm(px, p, Mode::eval, r2);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < d; ++c) {
      CHECK(std::fabs(b.at({r, c}) - a.at({perm[r], c})) < 1e-10);
    }
  }

  Tensor ap = encoder_block_prenorm(x, p);
  Tensor bp = encoder_block_prenorm(px, p);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < d; ++c) {
      CHECK(std::fabs(bp.at({r, c}) - ap.at({perm[r], c})) < 1e-10);
    }
  }
}

TEST_CASE("encoder blocks pass gradient checks") {
  Rng rng(47);
  Tensor x = random_tensor({3, 4}, rng);
  EncoderParams p = EncoderParams::make(4, 2, 5, 0.1, rng);
  std::vector<Tensor> leaves = collect(p);
  leaves.push_back(x);

  auto post = check_gradients(
      [&] {
        Rng fixed(900);
        return sum(encoder_block_postnorm(x, p, Mode::train, fixed));
      },
      leaves);
  CHECK(post.max_rel_err < 1e-4);

  auto pre = check_gradients(
      [&] { return mean(encoder_block_prenorm(x, p)); }, leaves);
  CHECK(pre.max_rel_err < 1e-4);
}
