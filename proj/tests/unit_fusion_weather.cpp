// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "agrifuse/errors.hpp"
#include "agrifuse/model.hpp"
#include "agrifuse/optim.hpp"
#include "test_support.hpp"

using namespace agrifuse;
using testsup::check_gradients;
using testsup::random_tensor;

namespace {

WeatherRecord plausible_record() {
  WeatherRecord r;
  r.date = Date{2020, 7, 4};
  r.precip_mm = 3.2;
  r.rain_var = 0.4;
  r.rain_dur_h = 2.0;
  r.tmin_c = 12.0;
  r.tavg_c = 18.5;
  r.tmax_c = 25.0;
  r.hmin_pct = 40.0;
  r.havg_pct = 60.0;
  r.hmax_pct = 85.0;
  r.pot_evap_mm = 4.1;
  r.sun_h = 9.0;
  return r;
}

WeatherEncoderConfig reduced_weather() {
  WeatherEncoderConfig c;
  c.tokens = 2;
  c.d_model = 8;
  c.layers = 2;
  c.heads = 2;
  c.d_ff = 8;
  c.out_side = 14;
  c.dropout = 0.1;
  return c;
}

FusionConfig reduced_fusion(std::size_t rows) {
  FusionConfig c;
  c.in_rows = rows;
  c.in_cols = 14;
  c.tokens = 2;
  c.d_model = 8;
  c.layers = 2;
  c.heads = 2;
  c.d_ff = 8;
  c.dropout = 0.1;
  return c;
}

}  // namespace

TEST_CASE("weather record invariants") {
  WeatherRecord good = plausible_record();
  CHECK_NOTHROW(good.validate());

  WeatherRecord bad = plausible_record();
  bad.tmin_c = 30.0;  // above tmax
  CHECK_THROWS_AS(bad.validate(), InputError);

  WeatherRecord humid = plausible_record();
  humid.hmax_pct = 130.0;
  CHECK_THROWS_AS(humid.validate(), InputError);

  WeatherRecord negative = plausible_record();
  negative.precip_mm = -1.0;
  CHECK_THROWS_AS(negative.validate(), InputError);

  WeatherRecord nan_rec = plausible_record();
  nan_rec.sun_h = std::nan("");
  CHECK_THROWS_AS(nan_rec.validate(), InputError);
}

TEST_CASE("feature statistics standardize to zero mean unit variance") {
  std::vector<WeatherRecord> records;
  Rng rng(3);
  for (int i = 0; i < 50; ++i) {
    WeatherRecord r = plausible_record();
    r.date = Date{2020, 6, 1}.plus_days(i);
    r.tavg_c += rng.uniform(-5, 5);
    r.tmin_c = r.tavg_c - rng.uniform(1, 6);
    r.tmax_c = r.tavg_c + rng.uniform(1, 6);
    r.precip_mm = rng.uniform(0, 12);
    records.push_back(r);
  }
  FeatureStats stats = FeatureStats::fit(records);
  // standardized features over the fit set average to ~0 with unit spread
  std::array<double, kWeatherFeatures> mean{}, var{};
  for (const auto& r : records) {
    Tensor z = stats.standardize(r);
    for (std::size_t i = 0; i < kWeatherFeatures; ++i) {
      mean[i] += z.values()[i];
      var[i] += z.values()[i] * z.values()[i];
    }
  }
  for (std::size_t i = 0; i < kWeatherFeatures; ++i) {
    mean[i] /= 50.0;
    var[i] /= 50.0;
    CHECK(std::fabs(mean[i]) < 1e-10);
    if (var[i] > 1e-6) CHECK(var[i] == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("weather expansion agrees with a manual affine map") {
  Rng rng(5);
  WeatherEncoderConfig c = reduced_weather();
  WeatherEncoderParams p = WeatherEncoderParams::make(c, rng);

  // zero weights: every token row equals the matching bias slice
  WeatherEncoderParams pz = WeatherEncoderParams::make(c, rng);
  {
    auto w = pz.expand_w.mutable_values();
    std::fill(w.begin(), w.end(), 0.0);
    auto b = pz.expand_b.mutable_values();
    for (std::size_t i = 0; i < b.size(); ++i) b[i] = 0.1 * double(i);
    Tensor feat = random_tensor({11}, rng, -1, 1, false);
    Rng fwd(1);
    Tensor tokens = weather_expand(feat, pz, Mode::eval, fwd);
    REQUIRE(tokens.shape() == Shape{c.tokens, c.d_model});
    for (std::size_t t = 0; t < c.tokens; ++t) {
      for (std::size_t d = 0; d < c.d_model; ++d) {
        CHECK(tokens.at({t, d}) == 0.1 * double(t * c.d_model + d));
      }
    }
  }

  // eval determinism + manual matrix-vector oracle
  Tensor feat = random_tensor({11}, rng, -2, 2, false);
  Rng f1(9), f2(9);
  Tensor a = weather_expand(feat, p, Mode::eval, f1);
  Tensor b = weather_expand(feat, p, Mode::eval, f2);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a.values()[i] == b.values()[i]);
  }
  for (std::size_t t = 0; t < c.tokens; ++t) {
    for (std::size_t d = 0; d < c.d_model; ++d) {
      const std::size_t col = t * c.d_model + d;
      double acc = p.expand_b.values()[col];
      for (std::size_t i = 0; i < 11; ++i) {
        acc += feat.values()[i] * p.expand_w.at({i, col});
      }
      CHECK(std::fabs(a.at({t, d}) - acc) < 1e-12);
    }
  }

  Tensor nan_feat = Tensor::from_vector({11}, std::vector<double>(11, 0.0));
  nan_feat.mutable_values()[3] = std::nan("");
  Rng f3(1);
  CHECK_THROWS_AS(weather_expand(nan_feat, p, Mode::eval, f3), InputError);
}

TEST_CASE("weather_forward shape contract and zero head") {
  Rng rng(7);
  // paper-scale config: (11) -> (14,14)
  WeatherEncoderConfig paper;
  CHECK(paper.layers == 12);
  CHECK(paper.heads == 8);
  CHECK(paper.d_ff == 128);
  CHECK(paper.d_model == 64);
  WeatherEncoderParams p = WeatherEncoderParams::make(paper, rng);
  Tensor feat = random_tensor({11}, rng, -1, 1, false);
  Rng fwd(1);
  Tensor out = weather_forward(feat, p, Mode::eval, fwd);
  CHECK(out.shape() == Shape{14, 14});

  auto w = p.proj_w.mutable_values();
  std::fill(w.begin(), w.end(), 0.0);
  auto b = p.proj_b.mutable_values();
  std::fill(b.begin(), b.end(), 0.0);
  Rng fwd2(1);
  Tensor zero = weather_forward(feat, p, Mode::eval, fwd2);
  for (double v : zero.values()) CHECK(v == 0.0);
}

TEST_CASE("weather_forward gradient check at reduced size") {
  Rng rng(11);
  WeatherEncoderConfig c = reduced_weather();
  WeatherEncoderParams p = WeatherEncoderParams::make(c, rng);
  Tensor feat = random_tensor({11}, rng, -1, 1, true);
  std::vector<Tensor> leaves;
  p.visit("w", [&](const std::string&, Tensor& t) { leaves.push_back(t); });
  leaves.push_back(feat);
  auto res = check_gradients(
      [&] {
        Rng fixed(77);
        Tensor out = weather_forward(feat, p, Mode::train, fixed);
        return mean(hadamard(out, out));
      },
      leaves, 1e-5, 6);
  CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("every weather feature matters to a trained encoder") {
  Rng rng(13);
  WeatherEncoderConfig c = reduced_weather();
  c.dropout = 0.0;
  WeatherEncoderParams p = WeatherEncoderParams::make(c, rng);

  // brief synthetic regression so the weights are trained, not random
  ParamMap params;
  p.visit("w", [&](const std::string& n, Tensor& t) {
    params.emplace_back(n, &t);
  });
  Adam opt(params);
  Rng data(17);
  for (int step = 0; step < 60; ++step) {
    opt.zero_grad();
    Tensor loss;
    for (int s = 0; s < 4; ++s) {
      Tensor feat = random_tensor({11}, data, -1, 1, false);
      double target = 0;
      for (std::size_t i = 0; i < 11; ++i) {
        target += (i % 2 ? 0.3 : -0.2) * feat.values()[i];
      }
      Rng fwd(1);
      Tensor out = weather_forward(feat, p, Mode::train, fwd);
      Tensor diff = add_scalar(mean(out), -target);
      Tensor sq = hadamard(diff, diff);
      loss = loss.defined() ? add(loss, sq) : sq;
    }
    loss.backward();
    opt.step(1e-2);
  }

  Tensor base_feat = random_tensor({11}, data, 0.5, 1.5, false);
  Rng fa(1);
  Tensor base = weather_forward(base_feat, p, Mode::eval, fa);
  for (std::size_t i = 0; i < 11; ++i) {
    std::vector<double> zeroed(base_feat.values().begin(),
                               base_feat.values().end());
    zeroed[i] = 0.0;
    Rng fb(1);
    Tensor out =
        weather_forward(Tensor::from_vector({11}, zeroed), p, Mode::eval, fb);
    double max_delta = 0;
    for (std::size_t j = 0; j < out.size(); ++j) {
      max_delta = std::max(max_delta,
                           std::fabs(out.values()[j] - base.values()[j]));
    }
    CHECK(max_delta > 0.0);
  }
}

TEST_CASE("fuse stacks weather rows over visual rows") {
  Rng rng(19);
  Tensor ow = random_tensor({14, 14}, rng, -1, 1, false);
  Tensor ov = random_tensor({14, 14}, rng, -1, 1, false);
  Tensor fused = fuse(ow, ov);
  CHECK(fused.shape() == Shape{28, 14});
  for (std::size_t i = 0; i < 14; ++i) {
    for (std::size_t j = 0; j < 14; ++j) {
      CHECK(fused.at({i, j}) == ow.at({i, j}));
      CHECK(fused.at({i + 14, j}) == ov.at({i, j}));
    }
  }

  Tensor fused0 = fuse(Tensor::zeros({14, 14}), ov);
  for (std::size_t i = 0; i < 14; ++i) {
    for (std::size_t j = 0; j < 14; ++j) {
      CHECK(fused0.at({i, j}) == 0.0);
      CHECK(fused0.at({i + 14, j}) == ov.at({i, j}));
    }
  }

  CHECK_THROWS_AS(fuse(ow, Tensor::zeros({13, 14})), ShapeError);
}

TEST_CASE("fusion_forward head behavior and robustness") {
  Rng rng(23);
  FusionConfig c = reduced_fusion(28);
  FusionParams p = FusionParams::make(c, rng);

  // zero head weights, fixed bias -> logits equal the bias
  {
    auto w = p.head_w.mutable_values();
    std::fill(w.begin(), w.end(), 0.0);
    auto b = p.head_b.mutable_values();
    b[0] = 0.7;
    b[1] = -0.3;
    Tensor in = random_tensor({28, 14}, rng, -1, 1, false);
    Rng fwd(1);
    Tensor logits = fusion_forward(in, p, Mode::eval, fwd);
    CHECK(logits.values()[0] == 0.7);
    CHECK(logits.values()[1] == -0.3);
  }

  // finite logits across a fuzz sweep
  FusionParams q = FusionParams::make(c, rng);
  for (int i = 0; i < 1000; ++i) {
    Tensor in = random_tensor({28, 14}, rng, -3, 3, false);
    Rng fwd(1);
    Tensor logits = fusion_forward(in, q, Mode::eval, fwd);
    CHECK(std::isfinite(logits.values()[0]));
    CHECK(std::isfinite(logits.values()[1]));
  }

  Rng fwd(1);
  CHECK_THROWS_AS(
      fusion_forward(Tensor::zeros({14, 14}), q, Mode::eval, fwd),
      ShapeError);
}

TEST_CASE("fusion_forward gradient check at reduced size") {
  Rng rng(29);
  FusionConfig c = reduced_fusion(28);
  FusionParams p = FusionParams::make(c, rng);
  Tensor in = random_tensor({28, 14}, rng, -1, 1, true);
  std::vector<Tensor> leaves;
  p.visit("f", [&](const std::string&, Tensor& t) { leaves.push_back(t); });
  leaves.push_back(in);
  auto res = check_gradients(
      [&] {
        Rng fixed(55);
        return cross_entropy(fusion_forward(in, p, Mode::train, fixed), 1);
      },
      leaves, 1e-5, 6);
  CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("classify rules") {
  Classification tie = classify(Tensor::from_vector({2}, {0.0, 0.0}));
  CHECK(tie.label == 0);  // ties stay negative
  CHECK(tie.p_positive == doctest::Approx(0.5).epsilon(1e-15));

  Classification pos = classify(Tensor::from_vector({2}, {-3.0, 5.0}));
  CHECK(pos.label == 1);
  CHECK(pos.p_positive ==
        doctest::Approx(1.0 / (1.0 + std::exp(-8.0))).epsilon(1e-12));
  CHECK(pos.p_positive == doctest::Approx(0.99966).epsilon(1e-4));

  // shift invariance
  Classification shifted = classify(Tensor::from_vector({2}, {-3.0 + 11.0, 5.0 + 11.0}));
  CHECK(shifted.label == pos.label);
  CHECK(shifted.p_positive == doctest::Approx(pos.p_positive).epsilon(1e-12));

  // positive scaling keeps the argmax
  Classification scaled = classify(Tensor::from_vector({2}, {-30.0, 50.0}));
  CHECK(scaled.label == pos.label);

  CHECK_THROWS_AS(classify(Tensor::from_vector({3}, {0, 0, 0})), ShapeError);
}

TEST_CASE("full model: shape contract, purity, checkpoint round trip") {
  Rng rng(31);
  FusionModelConfig cfg;
  cfg.vit.channels = 9;
  cfg.vit.image_side = 32;
  cfg.vit.patch = 16;
  cfg.vit.dim = 8;
  cfg.vit.layers = 1;
  cfg.vit.heads = 2;
  cfg.vit.d_ff = 16;
  cfg.weather = reduced_weather();
  cfg.fusion = reduced_fusion(28);
  FusionModel model = FusionModel::make(cfg, rng);

  Tensor img = random_tensor({9, 32, 32}, rng, 0, 1, false);
  Tensor feat = random_tensor({11}, rng, -1, 1, false);
  Rng f1(1), f2(1);
  Tensor l1 = model.forward(img, feat, Mode::eval, f1);
  Tensor l2 = model.forward(img, feat, Mode::eval, f2);
  CHECK(l1.shape() == Shape{2});
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(l1.values()[i] == l2.values()[i]);  // bitwise purity
  }
  Classification c1 = classify(l1), c2 = classify(l2);
  CHECK(c1.label == c2.label);
  CHECK(c1.p_positive == c2.p_positive);

  // checkpoint round trip preserves predictions exactly
  const auto dir = std::filesystem::temp_directory_path() /
                   "agrifuse-model-roundtrip";
  std::filesystem::remove_all(dir);
  model.stats.mean[0] = 1.5;
  model.save(dir);
  FusionModel loaded = FusionModel::load(dir);
  CHECK(loaded.stats.mean[0] == 1.5);
  Rng f3(1);
  Tensor l3 = loaded.forward(img, feat, Mode::eval, f3);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(l3.values()[i] == l1.values()[i]);
  }
  std::filesystem::remove_all(dir);

  // ablation branches accept (14,14) fusion inputs end to end
  FusionModelConfig img_cfg = cfg;
  img_cfg.branch = FusionBranch::image_only;
  FusionModel img_model = FusionModel::make(img_cfg, rng);
  CHECK(img_model.fusion.config.in_rows == 14);
  Rng f4(1);
  Tensor li = img_model.forward(img, feat, Mode::eval, f4);
  CHECK(li.shape() == Shape{2});

  FusionModelConfig w_cfg = cfg;
  w_cfg.branch = FusionBranch::weather_only;
  FusionModel w_model = FusionModel::make(w_cfg, rng);
  Rng f5(1);
  Tensor lw = w_model.forward(img, feat, Mode::eval, f5);
  CHECK(lw.shape() == Shape{2});
}
