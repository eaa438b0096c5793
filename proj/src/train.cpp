// SPDX-License-Identifier: Apache-2.0

#include "agrifuse/train.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <iostream>
#include <set>
#include <thread>

#include "agrifuse/errors.hpp"

namespace agrifuse {

nlohmann::json RunConfig::to_json() const {
  return {{"seed", seed},
          {"epochs", epochs},
          {"warmup", warmup},
          {"lr", lr},
          {"batch", batch},
          {"patience", patience},
          {"min_delta", min_delta},
          {"sigma_grid", sigma_grid},
          {"train_years", train_years},
          {"test_years", test_years},
          {"layers", layers},
          {"heads", heads},
          {"d_model", d_model},
          {"d_ff", d_ff},
          {"tokens", tokens},
          {"dropout", dropout},
          {"vit_dim", vit_dim},
          {"vit_layers", vit_layers},
          {"vit_heads", vit_heads},
          {"vit_d_ff", vit_d_ff},
          {"patch", patch},
          {"image_side", image_side},
          {"conv_hidden", conv_hidden},
          {"conv_blocks", conv_blocks},
          {"conv_kernel", conv_kernel},
          {"conv_steps", conv_steps},
          {"conv_batch", conv_batch},
          {"conv_lr", conv_lr},
          {"gen_sigma", gen_sigma},
          {"indices", indices},
          {"val_fraction", val_fraction}};
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  RunConfig c;
  c.seed = j.value("seed", c.seed);
  c.epochs = j.value("epochs", c.epochs);
  c.warmup = j.value("warmup", c.warmup);
  c.lr = j.value("lr", c.lr);
  c.batch = j.value("batch", c.batch);
  c.patience = j.value("patience", c.patience);
  c.min_delta = j.value("min_delta", c.min_delta);
  if (j.contains("sigma_grid")) {
    c.sigma_grid = j.at("sigma_grid").get<std::vector<double>>();
  }
  if (j.contains("train_years")) {
    c.train_years = j.at("train_years").get<std::vector<int>>();
  }
  if (j.contains("test_years")) {
    c.test_years = j.at("test_years").get<std::vector<int>>();
  }
  c.layers = j.value("layers", c.layers);
  c.heads = j.value("heads", c.heads);
  c.d_model = j.value("d_model", c.d_model);
  c.d_ff = j.value("d_ff", c.d_ff);
  c.tokens = j.value("tokens", c.tokens);
  c.dropout = j.value("dropout", c.dropout);
  c.vit_dim = j.value("vit_dim", c.vit_dim);
  c.vit_layers = j.value("vit_layers", c.vit_layers);
  c.vit_heads = j.value("vit_heads", c.vit_heads);
  c.vit_d_ff = j.value("vit_d_ff", c.vit_d_ff);
  c.patch = j.value("patch", c.patch);
  c.image_side = j.value("image_side", c.image_side);
  c.conv_hidden = j.value("conv_hidden", c.conv_hidden);
  c.conv_blocks = j.value("conv_blocks", c.conv_blocks);
  c.conv_kernel = j.value("conv_kernel", c.conv_kernel);
  c.conv_steps = j.value("conv_steps", c.conv_steps);
  c.conv_batch = j.value("conv_batch", c.conv_batch);
  c.conv_lr = j.value("conv_lr", c.conv_lr);
  c.gen_sigma = j.value("gen_sigma", c.gen_sigma);
  if (j.contains("indices")) {
    c.indices = j.at("indices").get<std::vector<std::string>>();
  }
  c.val_fraction = j.value("val_fraction", c.val_fraction);
  return c;
}

RunConfig RunConfig::from_file(const std::filesystem::path& path) {
  return from_json(read_json_file(path));
}

std::vector<IndexKind> RunConfig::index_kinds() const {
  std::vector<IndexKind> kinds;
  for (const auto& name : indices) kinds.push_back(index_from_string(name));
  if (kinds.empty()) throw ConfigError("config: empty index list");
  return kinds;
}

FusionModelConfig RunConfig::model_config(FusionBranch branch) const {
  FusionModelConfig m;
  m.branch = branch;
  m.vit.channels = 3 * index_kinds().size();
  m.vit.image_side = image_side;
  m.vit.patch = patch;
  m.vit.dim = vit_dim;
  m.vit.layers = vit_layers;
  m.vit.heads = vit_heads;
  m.vit.d_ff = vit_d_ff;
  m.weather.tokens = tokens;
  m.weather.d_model = d_model;
  m.weather.layers = layers;
  m.weather.heads = heads;
  m.weather.d_ff = d_ff;
  m.weather.dropout = dropout;
  m.fusion.tokens = tokens;
  m.fusion.d_model = d_model;
  m.fusion.layers = layers;
  m.fusion.heads = heads;
  m.fusion.d_ff = d_ff;
  m.fusion.dropout = dropout;
  m.finalize();
  return m;
}

ConvLstmConfig RunConfig::convlstm_config() const {
  ConvLstmConfig c;
  c.channels = 3;  // one RGB-coded index per generator
  c.hidden = conv_hidden;
  c.blocks = conv_blocks;
  c.kernel = conv_kernel;
  c.side = image_side;
  c.context = 3;
  return c;
}

std::size_t worker_count() {
  const char* env = std::getenv("AGRIFUSE_THREADS");
  if (!env) return 1;
  const long v = std::strtol(env, nullptr, 10);
  return v < 1 ? 1 : static_cast<std::size_t>(v);
}

// ---- ConvLSTM cross-validation ------------------------------------------------

namespace {

struct SeasonSet {
  int year;
  // per plot: sparse season and its noise-free daily interpolation
  std::vector<ImageSeries> sparse;
  std::vector<ImageSeries> daily;
};

struct TrainWindow {
  int year;
  std::array<const Tensor*, 4> frames;  // 3 context + target
};

std::vector<SeasonSet> load_seasons(const Dataset& data, IndexKind kind) {
  std::map<int, SeasonSet> by_year;
  for (const auto& plot : data.plots) {
    ImageSeries all = data.series(plot, kind);
    for (auto& season : split_by_year(all)) {
      SeasonSet& set = by_year[season.frames.front().date.year];
      set.year = season.frames.front().date.year;
      set.daily.push_back(interpolate_series(season));
      set.sparse.push_back(std::move(season));
    }
  }
  std::vector<SeasonSet> out;
  for (auto& [year, set] : by_year) out.push_back(std::move(set));
  return out;
}

/// Training set for one run: windows over the noised daily series of every
/// year except the held-out fold.
struct RunData {
  std::vector<ImageSeries> noised;  // owns the noisy frames
  std::vector<TrainWindow> windows;
};

RunData build_run_data(const std::vector<SeasonSet>& seasons, int fold_year,
                       double sigma, Rng& rng) {
  RunData run;
  for (const auto& set : seasons) {
    if (set.year == fold_year) continue;
    for (const auto& daily : set.daily) {
      ImageSeries noisy;
      noisy.frames.reserve(daily.frames.size());
      for (const auto& frame : daily.frames) {
        SeriesFrame f = frame;
        if (f.provenance == Provenance::interpolated) {
          f.image = inject_noise(f.image, sigma, rng);
        }
        noisy.frames.push_back(std::move(f));
      }
      run.noised.push_back(std::move(noisy));
    }
  }
  for (const auto& series : run.noised) {
    const int year = series.frames.front().date.year;
    for (std::size_t i = 0; i + 3 < series.frames.size(); ++i) {
      run.windows.push_back({year,
                             {&series.frames[i].image,
                              &series.frames[i + 1].image,
                              &series.frames[i + 2].image,
                              &series.frames[i + 3].image}});
    }
  }
  return run;
}

ConvLstmModel train_generator(const std::vector<SeasonSet>& seasons,
                              int fold_year, double sigma,
                              const RunConfig& config, std::uint64_t seed) {
  Rng rng(seed);
  RunData run = build_run_data(seasons, fold_year, sigma, rng);
  if (run.windows.empty()) {
    throw InputError("convlstm training: no usable 4-frame windows");
  }
  ConvLstmModel model = ConvLstmModel::make(config.convlstm_config(), rng);
  Adam opt(model.trainable());
  for (std::size_t step = 0; step < config.conv_steps; ++step) {
    opt.zero_grad();
    Tensor loss;
    for (std::size_t b = 0; b < config.conv_batch; ++b) {
      const TrainWindow& w =
          run.windows[rng.below(run.windows.size())];
      if (w.year == fold_year) {
        throw ContractError("convlstm training: held-out year leaked into "
                            "a training batch");
      }
      std::vector<Tensor> context = {*w.frames[0], *w.frames[1],
                                     *w.frames[2]};
      Tensor pred = convlstm_forward(context, model, Mode::train);
      Tensor l = rmse_loss(pred, *w.frames[3]);
      loss = loss.defined() ? add(loss, l) : l;
    }
    loss = scale(loss, 1.0 / static_cast<double>(config.conv_batch));
    loss.backward();
    opt.step(config.conv_lr);
  }
  return model;
}

/// RMSE of one-step predictions of the fold year's real frames, each
/// predicted from the three preceding frames of the noise-free daily
/// interpolation ("only the real images are involved in the test").
std::pair<double, std::size_t> score_fold(const SeasonSet& fold,
                                          ConvLstmModel& model) {
  NoGradGuard guard;
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t p = 0; p < fold.sparse.size(); ++p) {
    const ImageSeries& daily = fold.daily[p];
    for (const auto& frame : fold.sparse[p].frames) {
      if (frame.provenance != Provenance::real) continue;
      const long offset = frame.date - daily.frames.front().date;
      if (offset < 3) continue;
      std::vector<Tensor> context;
      for (long i = 3; i >= 1; --i) {
        context.push_back(daily.frames[static_cast<std::size_t>(offset - i)]
                              .image);
      }
      Tensor pred = convlstm_forward(context, model, Mode::eval);
      total += rmse_loss(pred, frame.image).item();
      ++count;
    }
  }
  return {count ? total / static_cast<double>(count) : 0.0, count};
}

}  // namespace

double ConvCvReport::fold_mean(int year) const {
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& cell : cells) {
    if (cell.fold_year == year && cell.frames_scored > 0) {
      total += cell.rmse;
      ++n;
    }
  }
  return n ? total / static_cast<double>(n) : 0.0;
}

std::vector<ConvCvReport> train_convlstm_cv(const Dataset& data,
                                            const RunConfig& config) {
  std::vector<ConvCvReport> reports;
  for (IndexKind kind : config.index_kinds()) {
    const std::vector<SeasonSet> seasons = load_seasons(data, kind);
    if (seasons.size() < 2) {
      throw InputError("convlstm cv: at least two years required");
    }
    ConvCvReport report;
    report.index = kind;
    for (const auto& s : seasons) report.fold_years.push_back(s.year);

    const std::size_t n_tasks = seasons.size() * config.sigma_grid.size();
    report.cells.resize(n_tasks);
    std::atomic<std::size_t> next{0};
    auto work = [&] {
      for (std::size_t task = next.fetch_add(1); task < n_tasks;
           task = next.fetch_add(1)) {
        const std::size_t fold_i = task / config.sigma_grid.size();
        const std::size_t sigma_i = task % config.sigma_grid.size();
        const int fold_year = seasons[fold_i].year;
        const double sigma = config.sigma_grid[sigma_i];
        const std::uint64_t task_seed =
            mix_seed(config.seed, 0xC0 + task +
                                      1000 * static_cast<std::size_t>(kind));
        ConvLstmModel model =
            train_generator(seasons, fold_year, sigma, config, task_seed);
        auto [rmse, scored] = score_fold(seasons[fold_i], model);
        report.cells[task] = {fold_year, sigma, rmse, scored};
        if (scored == 0) {
          std::cerr << "warning: fold " << fold_year << " sigma " << sigma
                    << " has no scorable real frames; skipped\n";
        }
      }
    };
    const std::size_t workers =
        std::min(worker_count(), n_tasks == 0 ? std::size_t{1} : n_tasks);
    if (workers <= 1) {
      work();
    } else {
      std::vector<std::thread> pool;
      for (std::size_t i = 0; i < workers; ++i) pool.emplace_back(work);
      for (auto& t : pool) t.join();
    }

    double total = 0.0;
    std::size_t n = 0;
    for (const auto& cell : report.cells) {
      if (cell.frames_scored > 0) {
        total += cell.rmse;
        ++n;
      }
    }
    report.overall_mean = n ? total / static_cast<double>(n) : 0.0;
    reports.push_back(std::move(report));
  }
  return reports;
}

nlohmann::json cv_report_json(const std::vector<ConvCvReport>& reports,
                              const RunConfig& config) {
  nlohmann::json by_index;
  for (const auto& report : reports) {
    nlohmann::json folds = nlohmann::json::array();
    for (int year : report.fold_years) {
      nlohmann::json per_sigma;
      for (const auto& cell : report.cells) {
        if (cell.fold_year != year) continue;
        char key[16];
        std::snprintf(key, sizeof key, "%.2f", cell.sigma);
        per_sigma[key] = cell.frames_scored > 0
                             ? nlohmann::json(cell.rmse)
                             : nlohmann::json();
      }
      folds.push_back({{"year", year},
                       {"per_sigma", per_sigma},
                       {"mean", report.fold_mean(year)}});
    }
    by_index[to_string(report.index)] = {
        {"folds", folds}, {"overall_mean", report.overall_mean}};
  }
  return {{"config_hash", config_hash(config.to_json())},
          {"sigma_grid", config.sigma_grid},
          {"indices", by_index}};
}

void train_generation_models(const Dataset& data, const RunConfig& config,
                             const std::filesystem::path& out) {
  for (IndexKind kind : config.index_kinds()) {
    const std::vector<SeasonSet> seasons = load_seasons(data, kind);
    const std::uint64_t seed =
        mix_seed(config.seed, 0x6E0 + static_cast<std::size_t>(kind));
    // fold_year 0 matches no calendar year: trains on every season
    ConvLstmModel model =
        train_generator(seasons, 0, config.gen_sigma, config, seed);
    model.save(out / "models" / to_string(kind));
  }
}

// ---- fusion training --------------------------------------------------------------

FeatureStats fit_train_stats(const Dataset& data,
                             const std::vector<int>& years) {
  std::vector<WeatherRecord> subset;
  for (const auto& r : data.weather) {
    if (std::find(years.begin(), years.end(), r.date.year) != years.end()) {
      subset.push_back(r);
    }
  }
  if (subset.empty()) {
    throw InputError("no weather records in the requested training years");
  }
  return FeatureStats::fit(subset);
}

std::vector<Sample> gather_samples(const Dataset& data,
                                   const RunConfig& config,
                                   const std::vector<int>& years,
                                   const FeatureStats& stats) {
  const std::vector<IndexKind> kinds = config.index_kinds();
  std::vector<Sample> all;
  for (const auto& plot : data.plots) {
    std::map<std::string, std::array<ImageSeries, 3>> one;
    for (IndexKind k : kinds) {
      one[plot][static_cast<std::size_t>(k)] = data.series(plot, k);
    }
    auto samples = assemble(data, one, stats, kinds);
    for (auto& s : samples) {
      if (std::find(years.begin(), years.end(), s.date.year) != years.end()) {
        all.push_back(std::move(s));
      }
    }
  }
  std::sort(all.begin(), all.end(), [](const Sample& a, const Sample& b) {
    return std::tie(a.plot_id, a.date) < std::tie(b.plot_id, b.date);
  });
  return all;
}

namespace {

std::vector<std::vector<double>> snapshot_params(FusionModel& model) {
  std::vector<std::vector<double>> snap;
  model.visit([&](const std::string&, Tensor& t) {
    auto v = t.values();
    snap.emplace_back(v.begin(), v.end());
  });
  return snap;
}

void restore_params(FusionModel& model,
                    const std::vector<std::vector<double>>& snap) {
  std::size_t i = 0;
  model.visit([&](const std::string&, Tensor& t) {
    auto v = t.mutable_values();
    std::copy(snap[i].begin(), snap[i].end(), v.begin());
    ++i;
  });
}

double eval_loss(FusionModel& model, const std::vector<Sample>& samples,
                 Rng& rng) {
  if (samples.empty()) return 0.0;
  NoGradGuard guard;
  double total = 0.0;
  for (const auto& s : samples) {
    Tensor logits = model.forward(s.image, s.features, Mode::eval, rng);
    total += cross_entropy(logits, static_cast<std::size_t>(s.label)).item();
  }
  return total / static_cast<double>(samples.size());
}

}  // namespace

FusionTrainResult train_fusion(const Dataset& data, const RunConfig& config,
                               FusionBranch branch) {
  for (int year : config.train_years) {
    if (std::find(config.test_years.begin(), config.test_years.end(), year) !=
        config.test_years.end()) {
      throw ConfigError("train/test year sets overlap at " +
                        std::to_string(year));
    }
  }
  if (config.train_years.empty()) {
    throw ConfigError("train_fusion: no training years configured");
  }
  const FeatureStats stats = fit_train_stats(data, config.train_years);
  std::vector<Sample> pool =
      gather_samples(data, config, config.train_years, stats);
  if (pool.empty()) throw InputError("train_fusion: no training samples");

  // per-year tail split for validation
  std::map<int, std::set<long>> days_by_year;
  for (const auto& s : pool) days_by_year[s.date.year].insert(s.date.to_days());
  std::set<long> val_days;
  for (const auto& [year, days] : days_by_year) {
    const std::size_t n_val = static_cast<std::size_t>(
        std::ceil(config.val_fraction * static_cast<double>(days.size())));
    std::size_t skip = days.size() - std::min(n_val, days.size());
    for (auto it = days.begin(); it != days.end(); ++it) {
      if (skip > 0) {
        --skip;
        continue;
      }
      val_days.insert(*it);
    }
  }
  std::vector<Sample> train, val;
  for (auto& s : pool) {
    (val_days.count(s.date.to_days()) ? val : train).push_back(std::move(s));
  }
  if (train.empty()) throw InputError("train_fusion: empty training split");

  Rng init_rng(mix_seed(config.seed, 0xF0));
  FusionModel model = FusionModel::make(config.model_config(branch), init_rng);
  model.stats = stats;
  Adam opt(model.params());
  Schedule schedule{config.warmup, config.epochs, config.lr};
  Rng run_rng(mix_seed(config.seed, 0xF1));

  std::vector<double> train_curve, val_curve;
  double best_val = std::numeric_limits<double>::infinity();
  std::size_t best_epoch = 0, since_best = 0, stopped_epoch = 0;
  auto best_snapshot = snapshot_params(model);

  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const double lr = cosine_warmup_lr(epoch, schedule);
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[run_rng.below(i)]);
    }
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t at = 0; at < order.size(); at += config.batch) {
      const std::size_t take = std::min(config.batch, order.size() - at);
      opt.zero_grad();
      Tensor loss;
      for (std::size_t b = 0; b < take; ++b) {
        const Sample& s = train[order[at + b]];
        Tensor logits = model.forward(s.image, s.features, Mode::train,
                                      run_rng);
        Tensor l = cross_entropy(logits, static_cast<std::size_t>(s.label));
        loss = loss.defined() ? add(loss, l) : l;
      }
      loss = scale(loss, 1.0 / static_cast<double>(take));
      loss.backward();
      opt.step(lr);
      epoch_loss += loss.item();
      ++batches;
    }
    train_curve.push_back(epoch_loss / static_cast<double>(batches));

    const double val_loss =
        val.empty() ? train_curve.back() : eval_loss(model, val, run_rng);
    val_curve.push_back(val_loss);
    stopped_epoch = epoch;
    if (val_loss < best_val - config.min_delta) {
      best_val = val_loss;
      best_epoch = epoch;
      best_snapshot = snapshot_params(model);
      since_best = 0;
    } else if (++since_best >= config.patience) {
      break;
    }
  }
  restore_params(model, best_snapshot);

  nlohmann::json metrics = {
      {"config_hash", config_hash(config.to_json())},
      {"branch", to_string(branch)},
      {"train_loss", train_curve},
      {"val_loss", val_curve},
      {"best_epoch", best_epoch},
      {"best_val_loss", best_val},
      {"stopped_epoch", stopped_epoch},
      {"train_samples", train.size()},
      {"val_samples", val.size()},
  };
  return {std::move(model), std::move(metrics)};
}

std::vector<double> overfit_one_batch(const std::vector<Sample>& batch,
                                      FusionModel& model, std::size_t steps,
                                      double lr, std::uint64_t seed) {
  if (batch.empty()) throw InputError("overfit_one_batch: empty batch");
  Adam opt(model.params());
  Rng rng(seed);
  std::vector<double> curve;
  curve.reserve(steps);
  for (std::size_t step = 0; step < steps; ++step) {
    opt.zero_grad();
    Tensor loss;
    for (const auto& s : batch) {
      Tensor logits = model.forward(s.image, s.features, Mode::train, rng);
      Tensor l = cross_entropy(logits, static_cast<std::size_t>(s.label));
      loss = loss.defined() ? add(loss, l) : l;
    }
    loss = scale(loss, 1.0 / static_cast<double>(batch.size()));
    loss.backward();
    opt.step(lr);
    curve.push_back(loss.item());
  }
  return curve;
}

}  // namespace agrifuse
