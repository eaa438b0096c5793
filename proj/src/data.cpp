// SPDX-License-Identifier: Apache-2.0

#include "agrifuse/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "agrifuse/errors.hpp"

namespace agrifuse {

std::string to_string(IndexKind k) {
  switch (k) {
    case IndexKind::ndci:
      return "ndci";
    case IndexKind::ndvi:
      return "ndvi";
    case IndexKind::ndmi:
      return "ndmi";
  }
  return "ndci";
}

IndexKind index_from_string(const std::string& name) {
  if (name == "ndci") return IndexKind::ndci;
  if (name == "ndvi") return IndexKind::ndvi;
  if (name == "ndmi") return IndexKind::ndmi;
  throw InputError("unknown vegetation index '" + name + "'");
}

namespace {

Tensor normalized_difference(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("index: band shapes " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  std::vector<double> out(a.size());
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double denom = av[i] + bv[i];
    out[i] = denom == 0.0 ? 0.0 : (av[i] - bv[i]) / denom;
  }
  return Tensor::from_vector(a.shape(), std::move(out));
}

}  // namespace

Tensor compute_index(const SceneBands& bands, IndexKind kind) {
  switch (kind) {
    case IndexKind::ndvi:
      if (!bands.b08.defined() || !bands.b04.defined()) {
        throw InputError("ndvi: bands B04/B08 missing");
      }
      return normalized_difference(bands.b08, bands.b04);
    case IndexKind::ndci:
      if (!bands.b05.defined() || !bands.b04.defined()) {
        throw InputError("ndci: bands B04/B05 missing");
      }
      return normalized_difference(bands.b05, bands.b04);
    case IndexKind::ndmi: {
      if (!bands.b8a.defined() || !bands.b11.defined()) {
        throw InputError("ndmi: bands B8A/B11 missing");
      }
      // 20 m bands join the common 10 m grid before the ratio
      const std::size_t h = bands.b04.defined() ? bands.b04.shape()[0]
                                                : 2 * bands.b8a.shape()[0];
      const std::size_t w = bands.b04.defined() ? bands.b04.shape()[1]
                                                : 2 * bands.b8a.shape()[1];
      Tensor b8a = bilinear_resize(bands.b8a, h, w);
      Tensor b11 = bilinear_resize(bands.b11, h, w);
      return normalized_difference(b8a, b11);
    }
  }
  throw InputError("unknown index kind");
}

Tensor bilinear_resize(const Tensor& plane, std::size_t out_h,
                       std::size_t out_w) {
  if (plane.rank() != 2) {
    throw ShapeError("bilinear_resize: [H,W] plane required, got " +
                     shape_str(plane.shape()));
  }
  const std::size_t in_h = plane.shape()[0], in_w = plane.shape()[1];
  if (in_h == out_h && in_w == out_w) return plane.detach();
  auto src = plane.values();
  std::vector<double> out(out_h * out_w);
  const double sy = static_cast<double>(in_h) / static_cast<double>(out_h);
  const double sx = static_cast<double>(in_w) / static_cast<double>(out_w);
  for (std::size_t y = 0; y < out_h; ++y) {
    const double fy = (static_cast<double>(y) + 0.5) * sy - 0.5;
    const double cy = std::clamp(fy, 0.0, static_cast<double>(in_h - 1));
    const std::size_t y0 = static_cast<std::size_t>(cy);
    const std::size_t y1 = std::min(y0 + 1, in_h - 1);
    const double wy = cy - static_cast<double>(y0);
    for (std::size_t x = 0; x < out_w; ++x) {
      const double fx = (static_cast<double>(x) + 0.5) * sx - 0.5;
      const double cx = std::clamp(fx, 0.0, static_cast<double>(in_w - 1));
      const std::size_t x0 = static_cast<std::size_t>(cx);
      const std::size_t x1 = std::min(x0 + 1, in_w - 1);
      const double wx = cx - static_cast<double>(x0);
      const double top = src[y0 * in_w + x0] * (1 - wx) + src[y0 * in_w + x1] * wx;
      const double bot = src[y1 * in_w + x0] * (1 - wx) + src[y1 * in_w + x1] * wx;
      out[y * out_w + x] = top * (1 - wy) + bot * wy;
    }
  }
  return Tensor::from_vector({out_h, out_w}, std::move(out));
}

namespace {

void colormap_eval(double v, double& r, double& g, double& b) {
  const auto& stops = kColormap;
  if (v <= stops.front().value) {
    r = stops.front().r; g = stops.front().g; b = stops.front().b;
    return;
  }
  if (v >= stops.back().value) {
    r = stops.back().r; g = stops.back().g; b = stops.back().b;
    return;
  }
  for (std::size_t i = 0; i + 1 < stops.size(); ++i) {
    if (v <= stops[i + 1].value) {
      const double t =
          (v - stops[i].value) / (stops[i + 1].value - stops[i].value);
      r = stops[i].r + t * (stops[i + 1].r - stops[i].r);
      g = stops[i].g + t * (stops[i + 1].g - stops[i].g);
      b = stops[i].b + t * (stops[i + 1].b - stops[i].b);
      return;
    }
  }
}

}  // namespace

Tensor index_to_rgb(const Tensor& index, std::size_t side,
                    std::size_t* clamped) {
  if (index.rank() != 2) {
    throw ShapeError("index_to_rgb: [H,W] index required, got " +
                     shape_str(index.shape()));
  }
  std::size_t clipped = 0;
  std::vector<double> bounded(index.values().begin(), index.values().end());
  for (double& v : bounded) {
    if (v < -1.0 || v > 1.0) {
      v = std::clamp(v, -1.0, 1.0);
      ++clipped;
    }
  }
  if (clamped) *clamped = clipped;
  Tensor plane = bilinear_resize(
      Tensor::from_vector(index.shape(), std::move(bounded)), side, side);
  std::vector<double> rgb(3 * side * side);
  auto pv = plane.values();
  for (std::size_t i = 0; i < side * side; ++i) {
    double r, g, b;
    colormap_eval(pv[i], r, g, b);
    rgb[0 * side * side + i] = r;
    rgb[1 * side * side + i] = g;
    rgb[2 * side * side + i] = b;
  }
  return Tensor::from_vector({3, side, side}, std::move(rgb));
}

// ---- CSV ----------------------------------------------------------------------

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::stringstream ss(line);
  std::string field;
  while (std::getline(ss, field, ',')) fields.push_back(field);
  if (!line.empty() && line.back() == ',') fields.push_back("");
  return fields;
}

double parse_double(const std::string& text, const std::string& context) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(text, &pos);
    if (pos != text.size()) throw std::invalid_argument(text);
    return v;
  } catch (const std::exception&) {
    throw InputError(context + ": malformed number '" + text + "'");
  }
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace

std::vector<WeatherRecord> load_weather(const std::filesystem::path& csv) {
  std::ifstream in(csv);
  if (!in) throw IoError("cannot open " + csv.string());
  std::string line;
  if (!std::getline(in, line)) {
    throw InputError(csv.string() + ": empty file, expected header");
  }
  if (line != kWeatherHeader) {
    throw InputError(csv.string() + ": unexpected header '" + line + "'");
  }
  std::vector<WeatherRecord> records;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::string where = csv.string() + ":" + std::to_string(line_no);
    const auto fields = split_csv_line(line);
    if (fields.size() != 12) {
      throw InputError(where + ": expected 12 fields, got " +
                       std::to_string(fields.size()));
    }
    WeatherRecord r;
    r.date = Date::parse(fields[0]);
    r.precip_mm = parse_double(fields[1], where);
    r.rain_var = parse_double(fields[2], where);
    r.rain_dur_h = parse_double(fields[3], where);
    r.tmin_c = parse_double(fields[4], where);
    r.tavg_c = parse_double(fields[5], where);
    r.tmax_c = parse_double(fields[6], where);
    r.hmin_pct = parse_double(fields[7], where);
    r.havg_pct = parse_double(fields[8], where);
    r.hmax_pct = parse_double(fields[9], where);
    r.pot_evap_mm = parse_double(fields[10], where);
    r.sun_h = parse_double(fields[11], where);
    r.validate();
    records.push_back(r);
  }
  std::sort(records.begin(), records.end(),
            [](const WeatherRecord& a, const WeatherRecord& b) {
              return a.date < b.date;
            });
  return records;
}

void save_weather(const std::filesystem::path& csv,
                  const std::vector<WeatherRecord>& records) {
  std::ofstream out(csv, std::ios::trunc);
  if (!out) throw IoError("cannot write " + csv.string());
  out << kWeatherHeader << '\n';
  for (const auto& r : records) {
    out << r.date.to_string();
    for (double v : r.features()) out << ',' << format_double(v);
    out << '\n';
  }
}

std::vector<LabelRecord> load_labels(const std::filesystem::path& csv) {
  std::ifstream in(csv);
  if (!in) throw IoError("cannot open " + csv.string());
  std::string line;
  if (!std::getline(in, line) || line != "date,plot_id,label") {
    throw InputError(csv.string() + ": unexpected label header");
  }
  std::vector<LabelRecord> labels;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::string where = csv.string() + ":" + std::to_string(line_no);
    const auto fields = split_csv_line(line);
    if (fields.size() != 3) {
      throw InputError(where + ": expected 3 fields");
    }
    LabelRecord l;
    l.date = Date::parse(fields[0]);
    l.plot_id = fields[1];
    if (fields[2] != "0" && fields[2] != "1") {
      throw InputError(where + ": label must be 0 or 1, got '" + fields[2] +
                       "'");
    }
    l.label = fields[2] == "1" ? 1 : 0;
    labels.push_back(l);
  }
  return labels;
}

void save_labels(const std::filesystem::path& csv,
                 const std::vector<LabelRecord>& labels) {
  std::ofstream out(csv, std::ios::trunc);
  if (!out) throw IoError("cannot write " + csv.string());
  out << "date,plot_id,label\n";
  for (const auto& l : labels) {
    out << l.date.to_string() << ',' << l.plot_id << ',' << l.label << '\n';
  }
}

// ---- synthetic scenes -----------------------------------------------------------

void SyntheticSpec::validate() const {
  if (plots == 0 || years == 0 || season_days == 0) {
    throw ConfigError("synthetic spec: zero plots/years/days");
  }
  if (base_side % 2 != 0 || base_side == 0) {
    throw ConfigError("synthetic spec: base_side must be even and positive");
  }
  if (scene != "field" && scene != "ramp") {
    throw ConfigError("synthetic spec: scene must be 'field' or 'ramp'");
  }
  if (acquisition_gap_mean < 1.0) {
    throw ConfigError("synthetic spec: acquisition gap must be >= 1 day");
  }
  for (std::size_t y : positive_years) {
    if (y >= years) {
      throw ConfigError("synthetic spec: positive year offset out of range");
    }
  }
}

nlohmann::json SyntheticSpec::to_json() const {
  return {{"plots", plots},
          {"years", years},
          {"start_year", start_year},
          {"season_days", season_days},
          {"image_side", image_side},
          {"base_side", base_side},
          {"acquisition_gap_mean", acquisition_gap_mean},
          {"scene", scene},
          {"positive_years", positive_years},
          {"positive_month_begin", positive_month_begin},
          {"positive_month_end", positive_month_end},
          {"image_confounder_prob", image_confounder_prob},
          {"weather_confounder_prob", weather_confounder_prob},
          {"stress_visibility", stress_visibility},
          {"stress_depth", stress_depth}};
}

SyntheticSpec SyntheticSpec::from_json(const nlohmann::json& j) {
  SyntheticSpec s;
  s.plots = j.value("plots", s.plots);
  s.years = j.value("years", s.years);
  s.start_year = j.value("start_year", s.start_year);
  s.season_days = j.value("season_days", s.season_days);
  s.image_side = j.value("image_side", s.image_side);
  s.base_side = j.value("base_side", s.base_side);
  s.acquisition_gap_mean =
      j.value("acquisition_gap_mean", s.acquisition_gap_mean);
  s.scene = j.value("scene", s.scene);
  if (j.contains("positive_years")) {
    s.positive_years = j.at("positive_years").get<std::vector<std::size_t>>();
  }
  s.positive_month_begin = j.value("positive_month_begin", s.positive_month_begin);
  s.positive_month_end = j.value("positive_month_end", s.positive_month_end);
  s.image_confounder_prob =
      j.value("image_confounder_prob", s.image_confounder_prob);
  s.weather_confounder_prob =
      j.value("weather_confounder_prob", s.weather_confounder_prob);
  if (j.contains("stress_visibility")) {
    for (std::size_t i = 0; i < 3; ++i) {
      s.stress_visibility[i] = j.at("stress_visibility")[i];
    }
  }
  s.stress_depth = j.value("stress_depth", s.stress_depth);
  return s;
}

namespace {

/// Smooth spatial field parameters for one (plot, index) pair. All terms
/// vary slowly in space and linearly or sinusoidally in time, so the daily
/// sequences interpolate well.
struct FieldParams {
  double base;         // overall index level
  double bump_amp[2];  // two Gaussian vigor bumps
  double bump_cx[2], bump_cy[2], bump_r[2];
  double drift;     // seasonal linear drift
  double wobble;    // seasonal sinusoid amplitude
  double phase;     // sinusoid phase
  double ramp_a0, ramp_b0, ramp_b_span;  // ramp-mode coefficients
  double patch_cx, patch_cy, patch_r;    // stress patch (shared per plot)
};

FieldParams draw_field_params(Rng& rng, const std::string& scene) {
  FieldParams f;
  f.base = rng.uniform(-0.1, 0.15);
  for (int i = 0; i < 2; ++i) {
    f.bump_amp[i] = rng.uniform(0.08, 0.22);
    f.bump_cx[i] = rng.uniform(0.15, 0.85);
    f.bump_cy[i] = rng.uniform(0.15, 0.85);
    f.bump_r[i] = rng.uniform(0.18, 0.4);
  }
  f.drift = rng.uniform(-0.08, 0.08);
  f.wobble = rng.uniform(0.02, 0.06);
  f.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  f.ramp_a0 = rng.uniform(-0.97, -0.93);
  f.ramp_b0 = rng.uniform(0.0090, 0.0093);
  f.ramp_b_span = rng.uniform(0.0002, 0.0004);
  f.patch_cx = rng.uniform(0.25, 0.75);
  f.patch_cy = rng.uniform(0.25, 0.75);
  f.patch_r = rng.uniform(0.18, 0.28);
  (void)scene;
  return f;
}

double field_index_value(const FieldParams& f, const std::string& scene,
                         double x01, double y01, double day_frac,
                         std::size_t day, bool stressed, double depth) {
  if (scene == "ramp") {
    const double b =
        f.ramp_b0 + f.ramp_b_span * std::sin(2.0 * std::numbers::pi *
                                             (x01 + 0.7 * y01));
    return std::clamp(f.ramp_a0 + b * static_cast<double>(day), -1.0, 0.0);
  }
  double v = f.base + f.drift * day_frac +
             f.wobble * std::sin(2.0 * std::numbers::pi * day_frac + f.phase +
                                 0.6 * x01 + 0.9 * y01);
  for (int i = 0; i < 2; ++i) {
    const double dx = x01 - f.bump_cx[i], dy = y01 - f.bump_cy[i];
    v += f.bump_amp[i] *
         std::exp(-(dx * dx + dy * dy) / (f.bump_r[i] * f.bump_r[i]));
  }
  if (stressed) {
    const double dx = x01 - f.patch_cx, dy = y01 - f.patch_cy;
    const double rr = (dx * dx + dy * dy) / (f.patch_r * f.patch_r);
    if (rr < 1.0) v -= depth * (1.0 - rr);
  }
  return std::clamp(v, -0.55, 0.55);
}

/// Solves (hi - lo) / (hi + lo) = v for hi, with lo fixed.
double band_from_index(double lo, double v) {
  return lo * (1.0 + v) / (1.0 - v);
}

Tensor render_plane(const FieldParams& f, const std::string& scene,
                    std::size_t side, double day_frac, std::size_t day,
                    bool stressed, double depth,
                    const std::function<double(double, double, double)>& to_band) {
  std::vector<double> out(side * side);
  for (std::size_t y = 0; y < side; ++y) {
    for (std::size_t x = 0; x < side; ++x) {
      const double x01 = (static_cast<double>(x) + 0.5) / double(side);
      const double y01 = (static_cast<double>(y) + 0.5) / double(side);
      const double v = field_index_value(f, scene, x01, y01, day_frac, day,
                                         stressed, depth);
      out[y * side + x] = to_band(x01, y01, v);
    }
  }
  return Tensor::from_vector({side, side}, std::move(out));
}

WeatherRecord draw_weather(const Date& date, double day_frac, bool regime,
                           const std::string& scene, Rng& rng) {
  WeatherRecord r;
  r.date = date;
  const double arc = std::sin(std::numbers::pi * day_frac);
  const bool shift = scene != "ramp" && regime;
  r.tavg_c = 17.0 + 7.0 * arc + (shift ? 6.0 : 0.0) + rng.normal(0, 1.6);
  r.tmin_c = r.tavg_c - (2.5 + std::fabs(rng.normal(0, 1.5)));
  r.tmax_c = r.tavg_c + (3.0 + std::fabs(rng.normal(0, 1.5)));
  r.havg_pct = std::clamp(
      52.0 + (shift ? 20.0 : 0.0) + rng.normal(0, 5.0), 2.0, 98.0);
  r.hmin_pct = std::clamp(r.havg_pct - (12.0 + std::fabs(rng.normal(0, 4.0))),
                          0.0, 100.0);
  r.hmax_pct = std::clamp(r.havg_pct + (10.0 + std::fabs(rng.normal(0, 4.0))),
                          r.havg_pct, 100.0);
  r.precip_mm = shift ? std::max(0.0, 4.0 + rng.normal(0, 2.0))
                      : std::max(0.0, rng.normal(0.4, 0.8));
  r.rain_var = std::fabs(rng.normal(0, 0.5)) + (shift ? 0.4 : 0.0);
  r.rain_dur_h =
      r.precip_mm > 0.05 ? std::min(24.0, 0.8 * r.precip_mm +
                                              std::fabs(rng.normal(0, 1.0)))
                         : 0.0;
  r.pot_evap_mm =
      std::max(0.0, 3.5 + 2.0 * arc - (shift ? 1.2 : 0.0) + rng.normal(0, 0.5));
  r.sun_h = std::clamp(9.0 + 3.0 * arc - (shift ? 3.5 : 0.0) +
                           rng.normal(0, 1.2),
                       0.0, 16.0);
  r.validate();
  return r;
}

nlohmann::json truth_to_json(const DayTruth& t) {
  return {{"date", t.date.to_string()},
          {"label", t.label},
          {"image_stress", t.image_stress},
          {"weather_regime", t.weather_regime},
          {"visible", {t.visible[0], t.visible[1], t.visible[2]}}};
}

}  // namespace

std::vector<DayTruth> truths_from_manifest(const nlohmann::json& manifest) {
  std::vector<DayTruth> out;
  for (const auto& j : manifest.at("truths")) {
    DayTruth t;
    t.date = Date::parse(j.at("date"));
    t.label = j.at("label");
    t.image_stress = j.at("image_stress");
    t.weather_regime = j.at("weather_regime");
    for (std::size_t i = 0; i < 3; ++i) t.visible[i] = j.at("visible")[i];
    out.push_back(t);
  }
  return out;
}

double single_modality_ceiling(const std::vector<DayTruth>& truths,
                               bool use_image_factor) {
  // exhaustive scoring of the two deterministic rules per factor value
  std::array<std::array<std::size_t, 2>, 2> counts{};  // [factor][label]
  for (const auto& t : truths) {
    const bool factor = use_image_factor ? t.image_stress : t.weather_regime;
    counts[factor ? 1 : 0][t.label]++;
  }
  std::size_t best = 0, total = 0;
  for (int f = 0; f < 2; ++f) {
    best += std::max(counts[f][0], counts[f][1]);
    total += counts[f][0] + counts[f][1];
  }
  return total == 0 ? 0.0 : static_cast<double>(best) / double(total);
}

void synthesize_dataset(const SyntheticSpec& spec, std::uint64_t seed,
                        const std::filesystem::path& out) {
  spec.validate();
  std::error_code ec;
  std::filesystem::create_directories(out, ec);
  if (ec) throw IoError("cannot create " + out.string());

  std::vector<DayTruth> truths;
  std::vector<WeatherRecord> weather;
  std::vector<LabelRecord> labels;
  std::vector<std::string> plot_ids;
  for (std::size_t p = 0; p < spec.plots; ++p) {
    plot_ids.push_back("p" + std::to_string(p));
  }

  // day truths and weather, shared across plots
  for (std::size_t y = 0; y < spec.years; ++y) {
    Rng truth_rng(mix_seed(seed, 1000 + y));
    Rng weather_rng(mix_seed(seed, 2000 + y));
    const Date season_start{spec.start_year + static_cast<int>(y), 6, 1};
    const bool positive_year =
        std::find(spec.positive_years.begin(), spec.positive_years.end(), y) !=
        spec.positive_years.end();
    for (std::size_t d = 0; d < spec.season_days; ++d) {
      const Date date = season_start.plus_days(static_cast<long>(d));
      DayTruth t;
      t.date = date;
      const bool scheduled = positive_year &&
                             date.month >= spec.positive_month_begin &&
                             date.month <= spec.positive_month_end;
      if (spec.scene == "ramp") {
        t.label = 0;
      } else if (scheduled) {
        t.label = 1;
        t.image_stress = true;
        t.weather_regime = true;
      } else {
        t.label = 0;
        t.image_stress = truth_rng.bernoulli(spec.image_confounder_prob);
        t.weather_regime = truth_rng.bernoulli(spec.weather_confounder_prob);
      }
      for (std::size_t k = 0; k < 3; ++k) {
        t.visible[k] =
            t.image_stress && truth_rng.bernoulli(spec.stress_visibility[k]);
      }
      const double day_frac =
          static_cast<double>(d) / static_cast<double>(spec.season_days);
      weather.push_back(
          draw_weather(date, day_frac, t.weather_regime, spec.scene,
                       weather_rng));
      for (const auto& plot : plot_ids) {
        labels.push_back({date, plot, t.label});
      }
      truths.push_back(t);
    }
  }

  // shared acquisition calendar per year (one satellite pass covers all plots)
  std::vector<std::vector<std::size_t>> acquisition_days(spec.years);
  for (std::size_t y = 0; y < spec.years; ++y) {
    Rng acq_rng(mix_seed(seed, 3000 + y));
    std::size_t d = 0;
    while (d < spec.season_days) {
      acquisition_days[y].push_back(d);
      const double jitter = acq_rng.normal(0.0, 1.0);
      const long gap = std::max(
          1L, std::lround(spec.acquisition_gap_mean + jitter));
      d += static_cast<std::size_t>(gap);
    }
    // close the season so interpolation and generation span every day
    if (acquisition_days[y].back() != spec.season_days - 1) {
      acquisition_days[y].push_back(spec.season_days - 1);
    }
    if (acquisition_days[y].size() < 4) {
      // short seasons can draw too few passes; fall back to even spacing
      // so the generation bootstrap always has enough real frames
      acquisition_days[y].clear();
      for (std::size_t i = 0; i < 4; ++i) {
        acquisition_days[y].push_back(i * (spec.season_days - 1) / 3);
      }
      if (spec.season_days < 4) {
        throw ConfigError("synthetic spec: season too short for 4 acquisitions");
      }
    }
  }

  // band rendering per plot and index
  for (std::size_t p = 0; p < spec.plots; ++p) {
    // one stress patch location per plot, shared by all indices
    Rng patch_rng(mix_seed(seed, 4000 + p));
    const double patch_cx = patch_rng.uniform(0.25, 0.75);
    const double patch_cy = patch_rng.uniform(0.25, 0.75);
    const double patch_r = patch_rng.uniform(0.2, 0.3);
    for (IndexKind kind : kAllIndices) {
      const std::size_t k = static_cast<std::size_t>(kind);
      Rng field_rng(mix_seed(seed, 5000 + p * 16 + k));
      FieldParams field = draw_field_params(field_rng, spec.scene);
      field.patch_cx = patch_cx;
      field.patch_cy = patch_cy;
      field.patch_r = patch_r;
      // static companion band (B04 or B11) over the plot
      const double lo_base = field_rng.uniform(0.22, 0.28);
      const double lo_wave = field_rng.uniform(0.01, 0.03);
      const double lo_phase = field_rng.uniform(0.0, 2.0 * std::numbers::pi);
      auto lo_band = [&](double x01, double y01) {
        return lo_base + lo_wave * std::sin(2.0 * std::numbers::pi *
                                                (x01 + 0.5 * y01) +
                                            lo_phase);
      };

      ImageSeries series;
      for (std::size_t y = 0; y < spec.years; ++y) {
        const Date season_start{spec.start_year + static_cast<int>(y), 6, 1};
        for (std::size_t d : acquisition_days[y]) {
          const Date date = season_start.plus_days(static_cast<long>(d));
          const DayTruth& t =
              truths[y * spec.season_days + d];
          const bool stressed = spec.scene != "ramp" && t.visible[k];
          const double day_frac =
              static_cast<double>(d) / static_cast<double>(spec.season_days);
          // NDMI synthesizes its band pair at half resolution
          const std::size_t side =
              kind == IndexKind::ndmi ? spec.base_side / 2 : spec.base_side;
          SceneBands bands;
          bands.date = date;
          bands.plot_id = plot_ids[p];
          Tensor lo = render_plane(
              field, spec.scene, side, day_frac, d, stressed, spec.stress_depth,
              [&](double x01, double y01, double) { return lo_band(x01, y01); });
          Tensor hi = render_plane(
              field, spec.scene, side, day_frac, d, stressed, spec.stress_depth,
              [&](double x01, double y01, double v) {
                return band_from_index(lo_band(x01, y01), v);
              });
          Tensor index;
          switch (kind) {
            case IndexKind::ndvi:
              bands.b04 = lo;
              bands.b08 = hi;
              index = compute_index(bands, kind);
              break;
            case IndexKind::ndci:
              bands.b04 = lo;
              bands.b05 = hi;
              index = compute_index(bands, kind);
              break;
            case IndexKind::ndmi:
              bands.b11 = lo;
              bands.b8a = hi;
              index = compute_index(bands, kind);
              break;
          }
          series.frames.push_back(
              {date, index_to_rgb(index, spec.image_side), Provenance::real});
        }
      }
      save_series(out / plot_ids[p] / to_string(kind), series);
    }
  }

  save_weather(out / "weather.csv", weather);
  save_labels(out / "labels.csv", labels);

  nlohmann::json truths_json = nlohmann::json::array();
  for (const auto& t : truths) truths_json.push_back(truth_to_json(t));
  nlohmann::json manifest = {
      {"format", "agrifuse-dataset-v1"},
      {"spec", spec.to_json()},
      {"seed", seed},
      {"colormap", kColormapVersion},
      {"weather_feature_layout", "t3h3"},
      {"plots", plot_ids},
      {"indices", {"ndci", "ndvi", "ndmi"}},
      {"truths", truths_json},
  };
  write_json_file(out / "manifest.json", manifest);
}

// ---- dataset access -------------------------------------------------------------

Dataset open_dataset(const std::filesystem::path& root) {
  Dataset d;
  d.root = root;
  d.manifest = read_json_file(root / "manifest.json");
  if (d.manifest.value("format", "") != "agrifuse-dataset-v1") {
    throw IoError("unrecognized dataset manifest in " + root.string());
  }
  d.plots = d.manifest.at("plots").get<std::vector<std::string>>();
  d.weather = load_weather(root / "weather.csv");
  d.labels = load_labels(root / "labels.csv");
  return d;
}

std::filesystem::path Dataset::series_dir(const std::string& plot,
                                          IndexKind kind) const {
  return root / plot / to_string(kind);
}

ImageSeries Dataset::series(const std::string& plot, IndexKind kind) const {
  return load_series(series_dir(plot, kind));
}

std::vector<ImageSeries> split_by_year(const ImageSeries& series) {
  std::vector<ImageSeries> out;
  for (const auto& frame : series.frames) {
    if (out.empty() || out.back().frames.back().date.year != frame.date.year) {
      out.emplace_back();
    }
    out.back().frames.push_back(frame);
  }
  return out;
}

// ---- samples ----------------------------------------------------------------------

std::vector<Sample> assemble(
    const Dataset& data,
    const std::map<std::string, std::array<ImageSeries, 3>>& complete,
    const FeatureStats& stats, const std::vector<IndexKind>& channels) {
  if (channels.empty()) {
    throw ConfigError("assemble: at least one index channel required");
  }
  std::map<long, const WeatherRecord*> weather_by_day;
  for (const auto& r : data.weather) weather_by_day[r.date.to_days()] = &r;
  std::map<std::pair<std::string, long>, int> label_by_key;
  for (const auto& l : data.labels) {
    label_by_key[{l.plot_id, l.date.to_days()}] = l.label;
  }

  std::vector<Sample> samples;
  for (const auto& [plot, by_index] : complete) {
    const ImageSeries& lead = by_index[static_cast<std::size_t>(channels[0])];
    for (IndexKind kind : channels) {
      const ImageSeries& other = by_index[static_cast<std::size_t>(kind)];
      if (other.frames.size() != lead.frames.size()) {
        throw InputError("assemble: plot " + plot + " has " +
                         std::to_string(other.frames.size()) + " frames of " +
                         to_string(kind) + " but " +
                         std::to_string(lead.frames.size()) + " of " +
                         to_string(channels[0]));
      }
    }
    for (const auto& frame : lead.frames) {
      const Date& date = frame.date;
      Sample s;
      s.date = date;
      s.plot_id = plot;
      s.provenance = Provenance::real;
      Tensor stacked;
      for (IndexKind kind : channels) {
        const ImageSeries& series = by_index[static_cast<std::size_t>(kind)];
        const SeriesFrame* f = series.find(date);
        if (!f) {
          throw InputError("assemble: index " + to_string(kind) + " of plot " +
                           plot + " is missing " + date.to_string());
        }
        if (static_cast<int>(f->provenance) >
            static_cast<int>(s.provenance)) {
          s.provenance = f->provenance;
        }
        const std::size_t side = f->image.shape()[1];
        Tensor flat = reshape(f->image, {3 * side, side});
        stacked = stacked.defined() ? concat_rows(stacked, flat) : flat;
      }
      const std::size_t side = stacked.shape()[1];
      s.image = reshape(stacked, {3 * channels.size(), side, side}).detach();

      auto w = weather_by_day.find(date.to_days());
      if (w == weather_by_day.end()) {
        throw InputError("assemble: no weather record for " +
                         date.to_string());
      }
      s.features = stats.standardize(*w->second);
      auto l = label_by_key.find({plot, date.to_days()});
      if (l == label_by_key.end()) {
        throw InputError("assemble: no label for plot " + plot + " on " +
                         date.to_string());
      }
      s.label = l->second;
      samples.push_back(std::move(s));
    }
  }
  std::sort(samples.begin(), samples.end(),
            [](const Sample& a, const Sample& b) {
              return std::tie(a.plot_id, a.date) < std::tie(b.plot_id, b.date);
            });
  return samples;
}

}  // namespace agrifuse
