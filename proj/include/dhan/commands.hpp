#pragma once

// train / eval / trace entry points. Each returns a process exit code:
// 0 success, 1 configuration or input error, 2 numeric failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dhan/checkpoint.hpp"
#include "dhan/config.hpp"
#include "dhan/data.hpp"
#include "dhan/png_io.hpp"
#include "dhan/trainer.hpp"

namespace dhan {

inline constexpr const char* kMetricsHeader = "epoch,split,loss,reward,acc,prr";

struct TrainOptions {
  std::optional<std::string> config;
  std::optional<std::string> dataset;
  bool synthetic = false;
  std::string out = "run";
  std::optional<std::string> resume;
};

struct EvalOptions {
  std::string checkpoint;
  std::optional<std::string> dataset;
  bool synthetic = false;
  std::optional<int> magnification;
};

struct TraceOptions {
  std::string checkpoint;
  std::string image;
  std::string out;
  std::optional<std::string> overlay;
};

namespace detail {

inline std::string metrics_row(std::size_t epoch, const char* split, double loss, double reward, double acc, double prr) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%zu,%s,%.9g,%.9g,%.9g,%.9g", epoch, split, loss, reward, acc, prr);
  return buf;
}

// Keeps the header and the rows of epochs <= `epoch`.
inline void truncate_metrics(const std::filesystem::path& path, std::size_t epoch) {
  std::vector<std::string> keep{kMetricsHeader};
  if (std::ifstream in(path); in) {
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      if (std::stoull(line.substr(0, line.find(','))) <= epoch) keep.push_back(line);
    }
  }
  std::ofstream out(path, std::ios::trunc);
  for (const auto& l : keep) out << l << '\n';
}

struct Datasets {
  std::vector<LabeledImage> train, test;
};

inline Datasets load_training_data(const RunConfig& cfg, const TrainOptions& opt, std::ostream& log) {
  Datasets d;
  if (opt.synthetic) {
    auto [train, test] = synthetic_split(cfg.synthetic);
    d.train = std::move(train);
    d.test = std::move(test);
  } else {
    std::optional<int> mag;
    if (cfg.magnification != 0) mag = cfg.magnification;
    auto loaded = load_dataset(*opt.dataset, mag);
    for (const auto& e : loaded.errors) log << "skipped " << e << '\n';
    if (loaded.images.empty()) throw DatasetError("no images at magnification " + std::to_string(cfg.magnification));
    auto manifest = split_by_patient(patient_labels(loaded.images), cfg.split_ratio, cfg.seed);
    std::ofstream(std::filesystem::path(opt.out) / "split.json") << nlohmann::json(manifest).dump(2) << '\n';
    d.train = select_patients(loaded.images, manifest.train);
    d.test = select_patients(loaded.images, manifest.test);
  }
  if (!cfg.transforms.empty()) d.train = augment_all(d.train, cfg.transforms);
  return d;
}

inline RunConfig config_from_checkpoint(const Checkpoint& c) {
  return parse_config(c.config_text, RunConfig::defaults());
}

}  // namespace detail

inline int cmd_train(const TrainOptions& opt, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  namespace fs = std::filesystem;
  try {
    if (opt.synthetic == opt.dataset.has_value()) throw ConfigError("train: give exactly one of --dataset or --synthetic");
    std::optional<Checkpoint> resume;
    if (opt.resume) resume = load_checkpoint(*opt.resume);
    RunConfig cfg = RunConfig::defaults(opt.synthetic ? Profile::synthetic : Profile::breakhis);
    if (opt.config) cfg = load_config(*opt.config, cfg);
    else if (resume) cfg = detail::config_from_checkpoint(*resume);
    apply_env_overrides(cfg);
    validate(cfg);
    fs::create_directories(opt.out);
    std::ofstream(fs::path(opt.out) / "config.txt") << to_text(cfg);

    auto data = detail::load_training_data(cfg, opt, err);
    Model<float> model(cfg.model, cfg.seed);
    Trainer<float> trainer(model, cfg.trainer_config());
    const fs::path metrics = fs::path(opt.out) / "metrics.csv";
    if (resume) {
      restore_model(*resume, model);
      restore_trainer(*resume, trainer);
      detail::truncate_metrics(metrics, trainer.epoch());
    } else {
      std::ofstream(metrics, std::ios::trunc) << kMetricsHeader << '\n';
    }

    auto save = [&](std::size_t epoch) {
      const auto ck = capture(cfg, model, &trainer);
      save_checkpoint((fs::path(opt.out) / ("checkpoint_epoch" + std::to_string(epoch) + ".bin")).string(), ck);
      save_checkpoint((fs::path(opt.out) / "checkpoint.bin").string(), ck);
    };
    while (trainer.epoch() < cfg.trainer.epochs) {
      const auto m = trainer.train_epoch(data.train);
      const std::size_t epoch = trainer.epoch();
      std::ofstream(metrics, std::ios::app) << detail::metrics_row(epoch, "train", m.loss, m.reward, m.acc, m.prr) << '\n';
      out << detail::metrics_row(epoch, "train", m.loss, m.reward, m.acc, m.prr) << std::endl;
      if (epoch % cfg.checkpoint_every == 0 || epoch == cfg.trainer.epochs) save(epoch);
    }
    if (!data.test.empty()) {
      const auto e = Trainer<float>::evaluate_model(model, data.test, cfg.trainer.batch);
      std::ofstream test(fs::path(opt.out) / "test_metrics.csv", std::ios::trunc);
      test << kMetricsHeader << '\n' << detail::metrics_row(trainer.epoch(), "test", e.loss, e.acc, e.acc, e.prr) << '\n';
      out << detail::metrics_row(trainer.epoch(), "test", e.loss, e.acc, e.acc, e.prr) << std::endl;
    }
    return 0;
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

inline int cmd_eval(const EvalOptions& opt, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  try {
    if (opt.synthetic == opt.dataset.has_value()) throw ConfigError("eval: give exactly one of --dataset or --synthetic");
    const auto ck = load_checkpoint(opt.checkpoint);
    const RunConfig cfg = detail::config_from_checkpoint(ck);
    Model<float> model(cfg.model, cfg.seed);
    restore_model(ck, model);
    std::vector<LabeledImage> data;
    if (opt.synthetic) {
      data = synthetic_split(cfg.synthetic).second;
      if (opt.magnification) data.clear();  // synthetic images carry no magnification
    } else {
      auto loaded = load_dataset(*opt.dataset, opt.magnification);
      for (const auto& e : loaded.errors) err << "skipped " << e << '\n';
      data = std::move(loaded.images);
    }
    if (data.empty()) throw DatasetError("empty evaluation set");
    const auto r = Trainer<float>::evaluate_model(model, data, cfg.trainer.batch);
    char buf[256];
    std::snprintf(buf, sizeof buf, "acc=%.6f prr=%.6f n_images=%zu n_patients=%zu", r.acc, r.prr, r.n_images, r.n_patients);
    out << buf << '\n';
    return 0;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

// Burns a one-pixel rectangle outline (clipped to the image) into img.
inline void draw_rectangle(Image& img, long top, long left, long size, const float rgb[3]) {
  const long h = static_cast<long>(img.height), w = static_cast<long>(img.width);
  auto put = [&](long r, long c) {
    if (r < 0 || c < 0 || r >= h || c >= w) return;
    for (std::size_t k = 0; k < img.channels && k < 3; ++k) img.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c), k) = rgb[k];
  };
  for (long i = 0; i < size; ++i) {
    put(top, left + i);
    put(top + size - 1, left + i);
    put(top + i, left);
    put(top + i, left + size - 1);
  }
}

inline int cmd_trace(const TraceOptions& opt, std::ostream& err = std::cerr) {
  try {
    const auto ck = load_checkpoint(opt.checkpoint);
    const RunConfig cfg = detail::config_from_checkpoint(ck);
    Model<float> model(cfg.model, cfg.seed);
    restore_model(ck, model);
    const Image image = read_png(opt.image);
    Rng rng(cfg.seed);
    const auto trace = rollout_episode(model, image, 0, rng, Mode::eval);

    std::ofstream out(opt.out, std::ios::trunc);
    if (!out) throw ImageIOError("cannot write trace " + opt.out);
    CoverageMap coverage(image.height, image.width);
    const long g = static_cast<long>(cfg.model.glimpse), half = g / 2;
    Image overlay = image;
    const float colour[3] = {1.0f, 0.0f, 0.0f};
    for (const auto& s : trace.steps) {
      const long top = s.center_row - half, left = s.center_col - half;
      for (long r = std::max(top, 0L); r < std::min(top + g, static_cast<long>(image.height)); ++r) {
        for (long c = std::max(left, 0L); c < std::min(left + g, static_cast<long>(image.width)); ++c) {
          coverage.mark(static_cast<std::size_t>(r), static_cast<std::size_t>(c));
        }
      }
      draw_rectangle(overlay, top, left, g, colour);
      nlohmann::ordered_json rec{{"t", s.t},
                         {"l_prev", {s.prev_location.row, s.prev_location.col}},
                         {"center_px", {s.center_row, s.center_col}},
                         {"pixel_fraction_cumulative", coverage.fraction()}};
      if (s.t == trace.steps.size()) rec["pred_probs"] = s.class_probs;
      out << rec.dump() << '\n';
    }
    if (opt.overlay) write_png(*opt.overlay, overlay);
    return 0;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace dhan
