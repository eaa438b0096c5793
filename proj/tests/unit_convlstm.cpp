// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "agrifuse/convlstm.hpp"
#include "agrifuse/errors.hpp"
#include "test_support.hpp"

using namespace agrifuse;
using testsup::random_tensor;

namespace {

ConvLstmConfig tiny_config() {
  ConvLstmConfig c;
  c.channels = 1;
  c.hidden = 2;
  c.blocks = 4;
  c.kernel = 3;
  c.side = 8;
  c.context = 3;
  return c;
}

ImageSeries ramp_series(const std::vector<long>& days, double step,
                        Provenance prov = Provenance::real) {
  ImageSeries s;
  for (long d : days) {
    s.frames.push_back({Date{2020, 6, 1}.plus_days(d),
                        Tensor::full({1, 4, 4}, 0.1 + step * double(d)),
                        prov});
  }
  return s;
}

}  // namespace

TEST_CASE("linear interpolation examples and bounds") {
  Tensor zero = Tensor::zeros({1, 2, 2});
  Tensor one = Tensor::full({1, 2, 2}, 1.0);

  Tensor quarter = linear_interpolate(zero, one, 1, 4);
  for (double v : quarter.values()) CHECK(v == doctest::Approx(0.25));

  // near-endpoint weights: i=1 with large k leans (k-1)/k onto the start
  Tensor lean = linear_interpolate(zero, one, 1, 1000);
  for (double v : lean.values()) {
    CHECK(v == doctest::Approx(1.0 / 1000.0).epsilon(1e-12));
  }

  // equal endpoints reproduce themselves at every i
  Rng rng(3);
  Tensor x = random_tensor({2, 3, 3}, rng, 0, 1, false);
  for (long i = 1; i < 5; ++i) {
    Tensor mid = linear_interpolate(x, x, i, 5);
    for (std::size_t j = 0; j < x.size(); ++j) {
      CHECK(mid.values()[j] == doctest::Approx(x.values()[j]).epsilon(1e-14));
    }
  }

  CHECK_THROWS_AS(linear_interpolate(zero, one, 0, 4), ContractError);
  CHECK_THROWS_AS(linear_interpolate(zero, one, 4, 4), ContractError);
  CHECK_THROWS_AS(linear_interpolate(zero, one, -1, 4), ContractError);
  CHECK_THROWS_AS(linear_interpolate(zero, Tensor::zeros({1, 3, 3}), 1, 4),
                  ShapeError);

  // elementwise boundedness by the endpoints
  Tensor a = random_tensor({1, 5, 5}, rng, 0, 1, false);
  Tensor b = random_tensor({1, 5, 5}, rng, 0, 1, false);
  for (long i = 1; i < 7; ++i) {
    Tensor mid = linear_interpolate(a, b, i, 7);
    for (std::size_t j = 0; j < a.size(); ++j) {
      const double lo = std::min(a.values()[j], b.values()[j]);
      const double hi = std::max(a.values()[j], b.values()[j]);
      CHECK(mid.values()[j] >= lo - 1e-12);
      CHECK(mid.values()[j] <= hi + 1e-12);
    }
  }
}

TEST_CASE("noise injection") {
  Rng rng(7);
  Tensor img = Tensor::full({1, 224, 224}, 0.5);

  Tensor same = inject_noise(img, 0.0, rng);
  for (std::size_t i = 0; i < img.size(); ++i) {
    CHECK(same.values()[i] == img.values()[i]);
  }

  // sigma 0.1 around 0.5: no clamping with this seed, mean error < 0.002
  Rng r2(1234);
  Tensor noisy = inject_noise(img, 0.1, r2);
  double mean = 0, lo = 1e300, hi = -1e300;
  for (double v : noisy.values()) {
    mean += v;
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  mean /= double(img.size());
  CHECK(lo > 0.0);   // pre-clamp values stayed inside the unit range
  CHECK(hi < 1.0);
  CHECK(std::fabs(mean - 0.5) < 0.002);

  // clamping keeps the unit range even at large sigma
  Rng r3(99);
  Tensor wild = inject_noise(img, 0.8, r3);
  for (double v : wild.values()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }

  // reproducible under a fixed seed
  Rng r4(42), r5(42);
  Tensor n1 = inject_noise(img, 0.1, r4);
  Tensor n2 = inject_noise(img, 0.1, r5);
  for (std::size_t i = 0; i < n1.size(); ++i) {
    CHECK(n1.values()[i] == n2.values()[i]);
  }

  CHECK_THROWS_AS(inject_noise(img, -0.1, rng), ContractError);
}

TEST_CASE("interpolate_series fills gaps") {
  ImageSeries sparse = ramp_series({0, 4, 6}, 0.02);
  ImageSeries full = interpolate_series(sparse);
  CHECK(full.complete());
  CHECK(full.frames.size() == 7);
  CHECK(full.frames[0].provenance == Provenance::real);
  CHECK(full.frames[1].provenance == Provenance::interpolated);
  CHECK(full.frames[4].provenance == Provenance::real);
  // ramp values: linear interpolation reproduces the ramp exactly
  for (std::size_t i = 0; i < full.frames.size(); ++i) {
    CHECK(full.frames[i].image.values()[0] ==
          doctest::Approx(0.1 + 0.02 * double(i)).epsilon(1e-12));
  }
}

TEST_CASE("cell_step zero weights and state") {
  Rng rng(11);
  ConvLstmConfig c = tiny_config();
  ConvLstmModel m = ConvLstmModel::make(c, rng);
  ConvLstmBlockParams& blk = m.blocks[0];
  blk.w_di = Tensor::zeros({2, 1, 3, 3}, true);
  blk.w_hi = Tensor::zeros({2, 2, 3, 3}, true);
  // peepholes and biases already start at zero
  Tensor input = Tensor::zeros({1, 8, 8});
  Tensor h0 = Tensor::zeros({2, 8, 8});
  Tensor c0 = Tensor::zeros({2, 8, 8});
  ConvLstmCellState s = cell_step(input, h0, c0, blk);
  for (double v : s.input_gate.values()) CHECK(v == 0.5);
  for (double v : s.c.values()) CHECK(v == 0.0);
  for (double v : s.h.values()) CHECK(v == 0.0);
}

TEST_CASE("cell_step gate ranges and state bound") {
  Rng rng(13);
  ConvLstmConfig c = tiny_config();
  ConvLstmModel m = ConvLstmModel::make(c, rng);
  for (int rep = 0; rep < 10; ++rep) {
    Tensor input = random_tensor({1, 8, 8}, rng, -3, 3, false);
    Tensor h = random_tensor({2, 8, 8}, rng, -2, 2, false);
    Tensor cp = random_tensor({2, 8, 8}, rng, -2, 2, false);
    ConvLstmCellState s = cell_step(input, h, cp, m.blocks[0]);
    for (const Tensor* gate :
         {&s.input_gate, &s.forget_gate, &s.output_gate}) {
      for (double v : gate->values()) {
        CHECK(v > 0.0);
        CHECK(v < 1.0);
      }
    }
    // |C_t| <= |f . C_prev| + |i| elementwise (candidate bounded by 1)
    for (std::size_t j = 0; j < s.c.size(); ++j) {
      const double bound = std::fabs(s.forget_gate.values()[j] *
                                     cp.values()[j]) +
                           std::fabs(s.input_gate.values()[j]);
      CHECK(std::fabs(s.c.values()[j]) <= bound + 1e-12);
    }
  }
}

TEST_CASE("cell_step matches a scalar peephole LSTM") {
  Rng rng(17);
  ConvLstmConfig c;
  c.channels = 1;
  c.hidden = 1;
  c.blocks = 1;
  c.kernel = 1;
  c.side = 1;
  ConvLstmModel m = ConvLstmModel::make(c, rng);
  ConvLstmBlockParams& b = m.blocks[0];
  // give every weight a distinct nonzero value
  std::vector<Tensor*> weights = {&b.w_di, &b.w_hi, &b.w_ci, &b.b_i,
                                  &b.w_df, &b.w_hf, &b.w_cf, &b.b_f,
                                  &b.w_dc, &b.w_hc, &b.b_c,
                                  &b.w_do, &b.w_ho, &b.w_co, &b.b_o};
  for (std::size_t i = 0; i < weights.size(); ++i) {
    weights[i]->mutable_values()[0] = 0.05 * double(i + 1) - 0.3;
  }
  const double d = 0.7, hp = -0.4, cp = 0.6;
  ConvLstmCellState s =
      cell_step(Tensor::full({1, 1, 1}, d), Tensor::full({1, 1, 1}, hp),
                Tensor::full({1, 1, 1}, cp), b);

  auto sig = [](double x) { return 1.0 / (1.0 + std::exp(-x)); };
  auto w = [&](int i) { return 0.05 * double(i + 1) - 0.3; };
  const double i_g = sig(w(0) * d + w(1) * hp + w(2) * cp + w(3));
  const double f_g = sig(w(4) * d + w(5) * hp + w(6) * cp + w(7));
  const double c_t = f_g * cp + i_g * std::tanh(w(8) * d + w(9) * hp + w(10));
  const double o_g = sig(w(11) * d + w(12) * hp + w(13) * c_t + w(14));
  const double h_t = o_g * std::tanh(c_t);

  CHECK(std::fabs(s.input_gate.values()[0] - i_g) < 1e-12);
  CHECK(std::fabs(s.forget_gate.values()[0] - f_g) < 1e-12);
  CHECK(std::fabs(s.c.values()[0] - c_t) < 1e-12);
  CHECK(std::fabs(s.output_gate.values()[0] - o_g) < 1e-12);
  CHECK(std::fabs(s.h.values()[0] - h_t) < 1e-12);
}

TEST_CASE("convlstm_forward shape, zero model, determinism") {
  Rng rng(19);
  ConvLstmConfig c = tiny_config();
  ConvLstmModel m = ConvLstmModel::make(c, rng);

  std::vector<Tensor> frames = {random_tensor({1, 8, 8}, rng, 0, 1, false),
                                random_tensor({1, 8, 8}, rng, 0, 1, false),
                                random_tensor({1, 8, 8}, rng, 0, 1, false)};
  Tensor out = convlstm_forward(frames, m, Mode::eval);
  CHECK(out.shape() == Shape{1, 8, 8});

  Tensor again = convlstm_forward(frames, m, Mode::eval);
  for (std::size_t i = 0; i < out.size(); ++i) {
    CHECK(out.values()[i] == again.values()[i]);  // eval determinism
  }

  // zero weights, zero input: output is the clamp of the readout bias
  ConvLstmModel z = ConvLstmModel::make(c, rng);
  z.visit_trainable([](const std::string& name, Tensor& t) {
    if (name.find("bn.gain") != std::string::npos) return;
    auto v = t.mutable_values();
    std::fill(v.begin(), v.end(), 0.0);
  });
  auto rb = z.readout_b.mutable_values();
  rb[0] = 0.25;
  std::vector<Tensor> zeros = {Tensor::zeros({1, 8, 8}),
                               Tensor::zeros({1, 8, 8}),
                               Tensor::zeros({1, 8, 8})};
  Tensor zo = convlstm_forward(zeros, z, Mode::eval);
  for (double v : zo.values()) CHECK(v == 0.25);

  CHECK_THROWS_AS(convlstm_forward({frames[0]}, m, Mode::eval),
                  ContractError);
  CHECK_THROWS_AS(
      convlstm_forward({frames[0], frames[1],
                        Tensor::zeros({1, 4, 4})},
                       m, Mode::eval),
      ShapeError);
}

TEST_CASE("convlstm gradient check at 1x8x8") {
  Rng rng(23);
  ConvLstmConfig c = tiny_config();
  ConvLstmModel m = ConvLstmModel::make(c, rng);
  std::vector<Tensor> frames = {random_tensor({1, 8, 8}, rng, 0.2, 0.8),
                                random_tensor({1, 8, 8}, rng, 0.2, 0.8),
                                random_tensor({1, 8, 8}, rng, 0.2, 0.8)};
  Tensor target = random_tensor({1, 8, 8}, rng, 0.3, 0.7, false);

  std::vector<Tensor> leaves;
  m.visit_trainable([&](const std::string&, Tensor& t) {
    leaves.push_back(t);
  });
  for (auto& f : frames) leaves.push_back(f);

  auto res = testsup::check_gradients(
      [&] {
        Tensor pred = convlstm_forward(frames, m, Mode::train);
        Tensor diff = sub(pred, target);
        return mean(hadamard(diff, diff));
      },
      leaves, 1e-5, 4);
  CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("generate_daily fills gaps and keeps real frames") {
  Rng rng(29);
  ConvLstmConfig c;
  c.channels = 1;
  c.hidden = 2;
  c.blocks = 2;
  c.side = 4;
  ConvLstmModel m = ConvLstmModel::make(c, rng);

  // already-complete series returns unchanged
  ImageSeries complete = ramp_series({0, 1, 2, 3, 4}, 0.05);
  ImageSeries same = generate_daily(complete, m);
  CHECK(same.frames.size() == 5);
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(same.frames[i].provenance == Provenance::real);
  }

  // one missing day: exactly one generated frame
  ImageSeries one_gap = ramp_series({0, 1, 2, 3, 5, 6}, 0.05);
  ImageSeries filled = generate_daily(one_gap, m);
  CHECK(filled.complete());
  CHECK(filled.frames.size() == 7);
  std::size_t generated = 0;
  for (const auto& f : filled.frames) {
    if (f.provenance == Provenance::generated) ++generated;
  }
  CHECK(generated == 1);
  CHECK(filled.frames[4].provenance == Provenance::generated);

  // real frames pass through bit-identical
  for (long d : {0L, 1L, 2L, 3L, 5L, 6L}) {
    const SeriesFrame* in = one_gap.find(Date{2020, 6, 1}.plus_days(d));
    const SeriesFrame* out = filled.find(Date{2020, 6, 1}.plus_days(d));
    REQUIRE(out != nullptr);
    CHECK(out->provenance == Provenance::real);
    for (std::size_t i = 0; i < in->image.size(); ++i) {
      CHECK(out->image.values()[i] == in->image.values()[i]);
    }
  }

  // bootstrap days come from interpolation when missing
  ImageSeries head_gap = ramp_series({0, 2, 4, 5, 6}, 0.05);
  ImageSeries boot = generate_daily(head_gap, m);
  CHECK(boot.complete());
  CHECK(boot.frames[1].provenance == Provenance::interpolated);

  ImageSeries too_few = ramp_series({0, 3, 9}, 0.05);
  CHECK_THROWS_AS(generate_daily(too_few, m), InputError);
}

TEST_CASE("series round trip on disk") {
  const auto dir =
      std::filesystem::temp_directory_path() / "agrifuse-series-test";
  std::filesystem::remove_all(dir);
  Rng rng(31);
  ImageSeries s;
  s.frames.push_back({Date{2021, 6, 1},
                      random_tensor({3, 4, 4}, rng, 0, 1, false),
                      Provenance::real});
  s.frames.push_back({Date{2021, 6, 3},
                      random_tensor({3, 4, 4}, rng, 0, 1, false),
                      Provenance::interpolated});
  s.frames.push_back({Date{2021, 6, 4},
                      random_tensor({3, 4, 4}, rng, 0, 1, false),
                      Provenance::generated});
  save_series(dir, s);
  ImageSeries back = load_series(dir);
  REQUIRE(back.frames.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(back.frames[i].date == s.frames[i].date);
    CHECK(back.frames[i].provenance == s.frames[i].provenance);
    for (std::size_t j = 0; j < s.frames[i].image.size(); ++j) {
      CHECK(back.frames[i].image.values()[j] == s.frames[i].image.values()[j]);
    }
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("model checkpoint round trip") {
  const auto dir =
      std::filesystem::temp_directory_path() / "agrifuse-convlstm-ckpt";
  std::filesystem::remove_all(dir);
  Rng rng(37);
  ConvLstmConfig c = tiny_config();
  ConvLstmModel m = ConvLstmModel::make(c, rng);
  std::vector<Tensor> frames = {random_tensor({1, 8, 8}, rng, 0, 1, false),
                                random_tensor({1, 8, 8}, rng, 0, 1, false),
                                random_tensor({1, 8, 8}, rng, 0, 1, false)};
  // push the running stats away from init so the round trip must carry them
  convlstm_forward(frames, m, Mode::train);
  Tensor before = convlstm_forward(frames, m, Mode::eval);
  m.save(dir);
  ConvLstmModel loaded = ConvLstmModel::load(dir);
  Tensor after = convlstm_forward(frames, loaded, Mode::eval);
  for (std::size_t i = 0; i < before.size(); ++i) {
    CHECK(after.values()[i] == before.values()[i]);
  }
  std::filesystem::remove_all(dir);
}
