// SPDX-License-Identifier: Apache-2.0

#include "agrifuse/convlstm.hpp"

#include <algorithm>

#include "agrifuse/errors.hpp"

namespace agrifuse {

std::string to_string(Provenance p) {
  switch (p) {
    case Provenance::real:
      return "real";
    case Provenance::interpolated:
      return "interpolated";
    case Provenance::generated:
      return "generated";
  }
  return "real";
}

Provenance provenance_from_string(const std::string& name) {
  if (name == "real") return Provenance::real;
  if (name == "interpolated") return Provenance::interpolated;
  if (name == "generated") return Provenance::generated;
  throw InputError("unknown provenance '" + name + "'");
}

void ImageSeries::validate() const {
  for (std::size_t i = 0; i < frames.size(); ++i) {
    if (i > 0) {
      if (!(frames[i - 1].date < frames[i].date)) {
        throw InputError("series dates not strictly increasing at " +
                         frames[i].date.to_string());
      }
      if (frames[i].image.shape() != frames[0].image.shape()) {
        throw InputError("series frame shapes differ at " +
                         frames[i].date.to_string());
      }
    }
    if (frames[i].image.rank() != 3) {
      throw InputError("series frames must be [C,H,W]");
    }
  }
}

bool ImageSeries::complete() const {
  for (std::size_t i = 1; i < frames.size(); ++i) {
    if (frames[i].date - frames[i - 1].date != 1) return false;
  }
  return true;
}

const SeriesFrame* ImageSeries::find(const Date& date) const {
  for (const auto& f : frames) {
    if (f.date == date) return &f;
  }
  return nullptr;
}

Tensor linear_interpolate(const Tensor& a, const Tensor& b, long i, long k) {
  if (a.shape() != b.shape()) {
    throw ShapeError("linear_interpolate: endpoint shapes " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  if (!(0 < i && i < k)) {
    throw ContractError("linear_interpolate: need 0 < i < k, got i=" +
                        std::to_string(i) + " k=" + std::to_string(k));
  }
  const double wa = static_cast<double>(k - i) / static_cast<double>(k);
  const double wb = static_cast<double>(i) / static_cast<double>(k);
  return add(scale(a, wa), scale(b, wb));
}

Tensor inject_noise(const Tensor& image, double sigma, Rng& rng) {
  if (sigma < 0.0) {
    throw ContractError("inject_noise: sigma must be non-negative");
  }
  if (sigma == 0.0) return image.detach();
  std::vector<double> out(image.values().begin(), image.values().end());
  for (double& v : out) {
    v = std::clamp(v + rng.normal(0.0, sigma), 0.0, 1.0);
  }
  return Tensor::from_vector(image.shape(), std::move(out));
}

ImageSeries interpolate_series(const ImageSeries& sparse) {
  sparse.validate();
  if (sparse.frames.size() < 2) return sparse;
  ImageSeries out;
  for (std::size_t i = 0; i + 1 < sparse.frames.size(); ++i) {
    const SeriesFrame& lo = sparse.frames[i];
    const SeriesFrame& hi = sparse.frames[i + 1];
    out.frames.push_back(lo);
    const long k = hi.date - lo.date;
    for (long d = 1; d < k; ++d) {
      out.frames.push_back({lo.date.plus_days(d),
                            linear_interpolate(lo.image, hi.image, d, k),
                            Provenance::interpolated});
    }
  }
  out.frames.push_back(sparse.frames.back());
  return out;
}

void ConvLstmConfig::validate() const {
  if (channels == 0 || hidden == 0 || blocks == 0 || side == 0 ||
      context == 0) {
    throw ConfigError("convlstm: all dimensions must be positive");
  }
  if (kernel % 2 == 0) {
    throw ConfigError("convlstm: even kernel size " + std::to_string(kernel));
  }
}

nlohmann::json ConvLstmConfig::to_json() const {
  return {{"channels", channels}, {"hidden", hidden}, {"blocks", blocks},
          {"kernel", kernel},     {"side", side},     {"context", context}};
}

ConvLstmConfig ConvLstmConfig::from_json(const nlohmann::json& j) {
  ConvLstmConfig c;
  c.channels = j.at("channels");
  c.hidden = j.at("hidden");
  c.blocks = j.at("blocks");
  c.kernel = j.at("kernel");
  c.side = j.at("side");
  c.context = j.at("context");
  return c;
}

namespace {

ConvLstmBlockParams make_block(std::size_t in_ch, std::size_t hidden,
                               std::size_t k, std::size_t side, Rng& rng) {
  const std::size_t fan_in = in_ch * k * k;
  const std::size_t fan_h = hidden * k * k;
  auto conv_in = [&] {
    return Tensor::xavier_uniform({hidden, in_ch, k, k}, fan_in, hidden, rng);
  };
  auto conv_h = [&] {
    return Tensor::xavier_uniform({hidden, hidden, k, k}, fan_h, hidden, rng);
  };
  auto peephole = [&] {
    // starts at zero: gates begin peephole-free and learn the coupling
    return Tensor::zeros({hidden, side, side}, true);
  };
  auto bias = [&] { return Tensor::zeros({hidden}, true); };
  ConvLstmBlockParams b;
  b.w_di = conv_in(); b.w_hi = conv_h(); b.w_ci = peephole(); b.b_i = bias();
  b.w_df = conv_in(); b.w_hf = conv_h(); b.w_cf = peephole(); b.b_f = bias();
  b.w_dc = conv_in(); b.w_hc = conv_h(); b.b_c = bias();
  b.w_do = conv_in(); b.w_ho = conv_h(); b.w_co = peephole(); b.b_o = bias();
  b.bn = BatchNorm2d::make(hidden);
  return b;
}

}  // namespace

ConvLstmModel ConvLstmModel::make(const ConvLstmConfig& config, Rng& rng) {
  config.validate();
  ConvLstmModel m;
  m.config = config;
  for (std::size_t i = 0; i < config.blocks; ++i) {
    const std::size_t in_ch = i == 0 ? config.channels : config.hidden;
    m.blocks.push_back(
        make_block(in_ch, config.hidden, config.kernel, config.side, rng));
  }
  m.readout_w = Tensor::xavier_uniform({config.channels, config.hidden, 1, 1},
                                       config.hidden, config.channels, rng);
  m.readout_b = Tensor::full({config.channels}, 0.5, true);
  return m;
}

void ConvLstmModel::visit_trainable(const ParamVisitor& fn) {
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    auto& b = blocks[i];
    const std::string p = "block" + std::to_string(i);
    fn(p + ".w_di", b.w_di); fn(p + ".w_hi", b.w_hi);
    fn(p + ".w_ci", b.w_ci); fn(p + ".b_i", b.b_i);
    fn(p + ".w_df", b.w_df); fn(p + ".w_hf", b.w_hf);
    fn(p + ".w_cf", b.w_cf); fn(p + ".b_f", b.b_f);
    fn(p + ".w_dc", b.w_dc); fn(p + ".w_hc", b.w_hc); fn(p + ".b_c", b.b_c);
    fn(p + ".w_do", b.w_do); fn(p + ".w_ho", b.w_ho);
    fn(p + ".w_co", b.w_co); fn(p + ".b_o", b.b_o);
    fn(p + ".bn.gain", b.bn.gain);
    fn(p + ".bn.bias", b.bn.bias);
  }
  fn("readout.w", readout_w);
  fn("readout.b", readout_b);
}

void ConvLstmModel::visit_state(const ParamVisitor& fn) {
  visit_trainable(fn);
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const std::string p = "block" + std::to_string(i);
    fn(p + ".bn.running_mean", blocks[i].bn.running_mean);
    fn(p + ".bn.running_var", blocks[i].bn.running_var);
  }
}

ParamMap ConvLstmModel::trainable() {
  ParamMap map;
  visit_trainable([&](const std::string& n, Tensor& t) {
    map.emplace_back(n, &t);
  });
  return map;
}

void ConvLstmModel::save(const std::filesystem::path& dir) const {
  auto* self = const_cast<ConvLstmModel*>(this);
  ParamMap map;
  self->visit_state([&](const std::string& n, Tensor& t) {
    map.emplace_back(n, &t);
  });
  save_checkpoint(dir, map, {{"model", config.to_json()}});
}

ConvLstmModel ConvLstmModel::load(const std::filesystem::path& dir) {
  const nlohmann::json hyper = read_checkpoint_hyper(dir);
  Rng rng(0);
  ConvLstmModel m = make(ConvLstmConfig::from_json(hyper.at("model")), rng);
  ParamMap map;
  m.visit_state([&](const std::string& n, Tensor& t) {
    map.emplace_back(n, &t);
  });
  load_checkpoint(dir, map);
  return m;
}

ConvLstmCellState cell_step(const Tensor& input, const Tensor& h_prev,
                            const Tensor& c_prev,
                            const ConvLstmBlockParams& p) {
  const std::size_t hidden = p.b_i.shape()[0];
  Tensor no_bias = Tensor::zeros({hidden});
  ConvLstmCellState s;
  s.input_gate =
      sigmoid(add(add(conv2d_same(input, p.w_di, p.b_i),
                      conv2d_same(h_prev, p.w_hi, no_bias)),
                  hadamard(p.w_ci, c_prev)));
  s.forget_gate =
      sigmoid(add(add(conv2d_same(input, p.w_df, p.b_f),
                      conv2d_same(h_prev, p.w_hf, no_bias)),
                  hadamard(p.w_cf, c_prev)));
  Tensor candidate = tanh_act(add(conv2d_same(input, p.w_dc, p.b_c),
                                  conv2d_same(h_prev, p.w_hc, no_bias)));
  s.c = add(hadamard(s.forget_gate, c_prev),
            hadamard(s.input_gate, candidate));
  s.output_gate =
      sigmoid(add(add(conv2d_same(input, p.w_do, p.b_o),
                      conv2d_same(h_prev, p.w_ho, no_bias)),
                  hadamard(p.w_co, s.c)));
  s.h = hadamard(s.output_gate, tanh_act(s.c));
  return s;
}

Tensor convlstm_forward(const std::vector<Tensor>& inputs, ConvLstmModel& m,
                        Mode mode) {
  const ConvLstmConfig& c = m.config;
  if (inputs.size() != c.context) {
    throw ContractError("convlstm: expected " + std::to_string(c.context) +
                        " ordered input frames, got " +
                        std::to_string(inputs.size()));
  }
  const Shape frame_shape = {c.channels, c.side, c.side};
  for (const auto& f : inputs) {
    if (f.shape() != frame_shape) {
      throw ShapeError("convlstm: frame " + shape_str(f.shape()) +
                       ", expected " + shape_str(frame_shape));
    }
  }
  std::vector<Tensor> seq = inputs;
  for (auto& block : m.blocks) {
    Tensor h = Tensor::zeros({c.hidden, c.side, c.side});
    Tensor cell = Tensor::zeros({c.hidden, c.side, c.side});
    std::vector<Tensor> outs;
    outs.reserve(seq.size());
    for (const auto& frame : seq) {
      ConvLstmCellState s = cell_step(frame, h, cell, block);
      h = s.h;
      cell = s.c;
      outs.push_back(leaky_relu(batch_norm2d(h, block.bn, mode)));
    }
    seq = std::move(outs);
  }
  return clamp01(conv2d_same(seq.back(), m.readout_w, m.readout_b));
}

ImageSeries generate_daily(const ImageSeries& sparse, ConvLstmModel& model) {
  sparse.validate();
  std::size_t real_count = 0;
  for (const auto& f : sparse.frames) {
    if (f.provenance == Provenance::real) ++real_count;
  }
  if (real_count < 4) {
    throw InputError("generate_daily: need at least 4 real acquisitions, got " +
                     std::to_string(real_count));
  }
  if (sparse.complete()) return sparse;

  NoGradGuard guard;
  const Date first = sparse.frames.front().date;
  const Date last = sparse.frames.back().date;
  const std::size_t span = static_cast<std::size_t>(last - first) + 1;
  const std::size_t context = model.config.context;

  ImageSeries out;
  out.frames.reserve(span);
  // bootstrap window: fill the first `context` days by interpolation
  ImageSeries interpolated = interpolate_series(sparse);
  for (std::size_t d = 0; d < std::min(span, context); ++d) {
    const Date date = first.plus_days(static_cast<long>(d));
    if (const SeriesFrame* real = sparse.find(date)) {
      out.frames.push_back(*real);
    } else {
      out.frames.push_back(*interpolated.find(date));
    }
  }
  // recursive one-day-ahead prediction for everything else
  for (std::size_t d = context; d < span; ++d) {
    const Date date = first.plus_days(static_cast<long>(d));
    if (const SeriesFrame* real = sparse.find(date)) {
      out.frames.push_back(*real);
      continue;
    }
    std::vector<Tensor> window;
    for (std::size_t i = context; i >= 1; --i) {
      window.push_back(out.frames[d - i].image);
    }
    Tensor predicted = convlstm_forward(window, model, Mode::eval);
    out.frames.push_back({date, predicted, Provenance::generated});
  }
  return out;
}

void save_series(const std::filesystem::path& dir, const ImageSeries& series) {
  series.validate();
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string());
  nlohmann::json frames = nlohmann::json::array();
  for (const auto& f : series.frames) {
    const std::string name = f.date.to_string() + ".agt";
    write_tensor(dir / name, f.image);
    frames.push_back({{"date", f.date.to_string()},
                      {"provenance", to_string(f.provenance)},
                      {"file", name}});
  }
  write_json_file(dir / "manifest.json", {{"frames", frames}});
}

ImageSeries load_series(const std::filesystem::path& dir) {
  const nlohmann::json manifest = read_json_file(dir / "manifest.json");
  ImageSeries series;
  for (const auto& entry : manifest.at("frames")) {
    SeriesFrame f;
    f.date = Date::parse(entry.at("date"));
    f.provenance = provenance_from_string(entry.at("provenance"));
    f.image = read_tensor(dir / entry.at("file").get<std::string>());
    series.frames.push_back(std::move(f));
  }
  series.validate();
  return series;
}

}  // namespace agrifuse
