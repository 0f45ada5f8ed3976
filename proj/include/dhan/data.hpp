#pragma once

// Labeled images, patient-level splits, augmentation, the patient recognition
// rate, the synthetic cross/ring task, and the on-disk dataset loader.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "dhan/glimpse.hpp"
#include "dhan/png_io.hpp"

namespace dhan {

inline constexpr std::size_t kBenign = 0;
inline constexpr std::size_t kMalignant = 1;

struct LabeledImage {
  Image image;
  std::size_t label = 0;
  std::string patient;
  int magnification = 0;  // 0 when untagged (synthetic data)
};

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Patient split

struct SplitManifest {
  std::vector<std::string> train, test;
  std::uint64_t seed = 0;
};

inline void to_json(nlohmann::json& j, const SplitManifest& m) {
  j = nlohmann::json{{"train", m.train}, {"test", m.test}, {"seed", m.seed}};
}
inline void from_json(const nlohmann::json& j, SplitManifest& m) {
  j.at("train").get_to(m.train);
  j.at("test").get_to(m.test);
  j.at("seed").get_to(m.seed);
}

inline std::size_t round_half_up(double x) { return static_cast<std::size_t>(std::floor(x + 0.5 + 1e-9)); }

// Stratified by class: each class sends round_half_up(ratio * n) of its
// patients to training, at least one and at most n - 1. Every label below
// `classes` must be present.
inline SplitManifest split_by_patient(const std::vector<std::pair<std::string, std::size_t>>& patients, double ratio,
                                      std::uint64_t seed, std::size_t classes = 2) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw std::invalid_argument("split_by_patient: ratio must lie in (0, 1)");
  std::map<std::size_t, std::set<std::string>> by_class;
  std::map<std::string, std::size_t> seen;
  for (const auto& [id, label] : patients) {
    auto [it, fresh] = seen.emplace(id, label);
    if (!fresh && it->second != label) throw DatasetError("split_by_patient: patient " + id + " carries two labels");
    by_class[label].insert(id);
  }
  for (std::size_t label = 0; label < classes; ++label) by_class[label];
  SplitManifest m;
  m.seed = seed;
  std::mt19937_64 rng(seed);
  for (auto& [label, ids] : by_class) {
    if (ids.size() < 2) {
      throw DatasetError("split_by_patient: class " + std::to_string(label) + " has " + std::to_string(ids.size()) +
                         " patient(s), need at least 2");
    }
    std::vector<std::string> order(ids.begin(), ids.end());
    std::shuffle(order.begin(), order.end(), rng);
    const std::size_t n_train = std::clamp<std::size_t>(round_half_up(ratio * static_cast<double>(order.size())), 1, order.size() - 1);
    m.train.insert(m.train.end(), order.begin(), order.begin() + static_cast<long>(n_train));
    m.test.insert(m.test.end(), order.begin() + static_cast<long>(n_train), order.end());
  }
  std::sort(m.train.begin(), m.train.end());
  std::sort(m.test.begin(), m.test.end());
  return m;
}

inline std::vector<std::pair<std::string, std::size_t>> patient_labels(std::span<const LabeledImage> images) {
  std::map<std::string, std::size_t> labels;
  for (const auto& im : images) labels.emplace(im.patient, im.label);
  return {labels.begin(), labels.end()};
}

inline std::vector<LabeledImage> select_patients(std::span<const LabeledImage> images, const std::vector<std::string>& ids) {
  std::set<std::string> keep(ids.begin(), ids.end());
  std::vector<LabeledImage> out;
  for (const auto& im : images) {
    if (keep.count(im.patient)) out.push_back(im);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation

enum class Transform { rotate180, hflip, vflip, rotate90 };

inline std::string to_string(Transform t) {
  switch (t) {
    case Transform::rotate180: return "rot180";
    case Transform::hflip: return "hflip";
    case Transform::vflip: return "vflip";
    case Transform::rotate90: return "rot90";
  }
  return "?";
}

inline std::optional<Transform> parse_transform(const std::string& s) {
  for (auto t : {Transform::rotate180, Transform::hflip, Transform::vflip, Transform::rotate90}) {
    if (to_string(t) == s) return t;
  }
  return std::nullopt;
}

inline const std::vector<Transform>& default_transforms() {
  static const std::vector<Transform> v{Transform::rotate180, Transform::hflip, Transform::vflip};
  return v;
}

inline Image apply_transform(const Image& src, Transform t) {
  const std::size_t h = src.height, w = src.width, ch = src.channels;
  if (t == Transform::rotate90 && h != w) {
    throw std::invalid_argument("augment: 90 degree rotation needs a square image, got " + std::to_string(h) + "x" +
                                std::to_string(w));
  }
  Image out(h, w, ch);
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      std::size_t sr = r, sc = c;
      switch (t) {
        case Transform::rotate180: sr = h - 1 - r; sc = w - 1 - c; break;
        case Transform::hflip: sc = w - 1 - c; break;
        case Transform::vflip: sr = h - 1 - r; break;
        case Transform::rotate90: sr = w - 1 - c; sc = r; break;  // clockwise
      }
      for (std::size_t k = 0; k < ch; ++k) out.at(r, c, k) = src.at(sr, sc, k);
    }
  }
  return out;
}

// The original followed by one copy per transform.
inline std::vector<LabeledImage> augment(const LabeledImage& item, std::span<const Transform> transforms) {
  std::vector<LabeledImage> out{item};
  for (auto t : transforms) {
    LabeledImage copy{apply_transform(item.image, t), item.label, item.patient, item.magnification};
    out.push_back(std::move(copy));
  }
  return out;
}

inline std::vector<LabeledImage> augment_all(std::span<const LabeledImage> items, std::span<const Transform> transforms) {
  std::vector<LabeledImage> out;
  out.reserve(items.size() * (transforms.size() + 1));
  for (const auto& it : items) {
    auto copies = augment(it, transforms);
    std::move(copies.begin(), copies.end(), std::back_inserter(out));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Patient recognition rate

struct PrrResult {
  double prr = 0.0;
  std::map<std::string, double> per_patient;  // patient -> image accuracy
};

// Mean over patients of the per-patient fraction of correct images. Every
// patient in `roster` must own at least one image.
inline PrrResult compute_prr(std::span<const std::string> patients, std::span<const std::uint8_t> correct,
                             std::span<const std::string> roster = {}) {
  if (patients.size() != correct.size()) throw std::invalid_argument("compute_prr: patients and outcomes differ in length");
  if (patients.empty()) throw std::invalid_argument("compute_prr: no predictions");
  std::map<std::string, std::pair<std::size_t, std::size_t>> tally;  // correct, total
  for (const auto& p : roster) tally.emplace(p, std::pair<std::size_t, std::size_t>{0, 0});
  for (std::size_t i = 0; i < patients.size(); ++i) {
    auto& t = tally[patients[i]];
    t.first += correct[i] ? 1 : 0;
    t.second += 1;
  }
  PrrResult r;
  double total = 0.0;
  for (const auto& [id, t] : tally) {
    if (t.second == 0) throw std::invalid_argument("compute_prr: patient " + id + " has no images");
    const double acc = static_cast<double>(t.first) / static_cast<double>(t.second);
    r.per_patient[id] = acc;
    total += acc;
  }
  r.prr = total / static_cast<double>(tally.size());
  return r;
}

// ---------------------------------------------------------------------------
// Synthetic cross/ring task

struct SyntheticConfig {
  std::size_t canvas = 100;
  std::size_t pattern = 12;
  std::size_t distractors = 8;
  std::size_t distractor_size = 8;
  double noise = 0.2;
  std::size_t train_count = 8000;
  std::size_t test_count = 2000;
  std::size_t patient_size = 100;  // images per pseudo-patient
  std::uint64_t seed = 7;
};

inline constexpr std::size_t kCross = 0;
inline constexpr std::size_t kRing = 1;

// Binary 12x12-style stencil for a class, scaled to `size`.
inline std::vector<std::uint8_t> pattern_mask(std::size_t cls, std::size_t size) {
  std::vector<std::uint8_t> m(size * size, 0);
  const double c = (static_cast<double>(size) - 1.0) / 2.0;
  const double bar = std::max(1.0, static_cast<double>(size) / 6.0);  // half-width of a cross bar
  const double outer = static_cast<double>(size) / 2.0, inner = outer - std::max(1.5, static_cast<double>(size) / 6.0);
  for (std::size_t r = 0; r < size; ++r) {
    for (std::size_t col = 0; col < size; ++col) {
      const double dr = static_cast<double>(r) - c, dc = static_cast<double>(col) - c;
      bool on;
      if (cls == kCross) {
        on = std::abs(dr) < bar || std::abs(dc) < bar;
      } else {
        const double d = std::sqrt(dr * dr + dc * dc);
        on = d <= outer && d >= inner;
      }
      m[r * size + col] = on ? 1 : 0;
    }
  }
  return m;
}

struct SyntheticSample {
  LabeledImage item;
  std::size_t pattern_row = 0, pattern_col = 0;  // top-left of the pattern box
};

// Draw order per sample: label, background noise, distractor discs, then the
// pattern over its whole box (noise in the unlit cells). Hands each sample to
// `visit` as it is produced, so large sets need not be held in memory.
template <class Visit>
void for_each_synthetic(const SyntheticConfig& cfg, std::size_t count, Visit&& visit) {
  if (cfg.pattern > cfg.canvas || cfg.distractor_size > cfg.canvas || cfg.pattern == 0) {
    throw std::invalid_argument("generate_synthetic: pattern and distractors must fit the canvas");
  }
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::bernoulli_distribution coin(0.5);
  std::uniform_int_distribution<std::size_t> pat_pos(0, cfg.canvas - cfg.pattern);
  std::uniform_int_distribution<std::size_t> dis_pos(0, cfg.canvas - cfg.distractor_size);
  std::uniform_real_distribution<double> dis_level(0.6, 1.0);
  const auto cross = pattern_mask(kCross, cfg.pattern), ring = pattern_mask(kRing, cfg.pattern);
  const std::size_t n = cfg.canvas;
  const double rad = static_cast<double>(cfg.distractor_size) / 2.0, mid = rad - 0.5;

  std::vector<float> gray(n * n);
  for (std::size_t s = 0; s < count; ++s) {
    SyntheticSample sample;
    const std::size_t label = coin(rng) ? kRing : kCross;
    for (auto& v : gray) v = static_cast<float>(cfg.noise * unit(rng));
    for (std::size_t d = 0; d < cfg.distractors; ++d) {
      const std::size_t r0 = dis_pos(rng), c0 = dis_pos(rng);
      const float level = static_cast<float>(dis_level(rng));
      for (std::size_t r = 0; r < cfg.distractor_size; ++r) {
        for (std::size_t c = 0; c < cfg.distractor_size; ++c) {
          const double dr = static_cast<double>(r) - mid, dc = static_cast<double>(c) - mid;
          if (dr * dr + dc * dc <= rad * rad) gray[(r0 + r) * n + c0 + c] = level;
        }
      }
    }
    sample.pattern_row = pat_pos(rng);
    sample.pattern_col = pat_pos(rng);
    const auto& mask = label == kCross ? cross : ring;
    for (std::size_t r = 0; r < cfg.pattern; ++r) {
      for (std::size_t c = 0; c < cfg.pattern; ++c) {
        const double fresh = cfg.noise * unit(rng);
        gray[(sample.pattern_row + r) * n + sample.pattern_col + c] = mask[r * cfg.pattern + c] ? 1.0f : static_cast<float>(fresh);
      }
    }
    auto& item = sample.item;
    item.image = Image(n, n, 3);
    for (std::size_t i = 0; i < n * n; ++i) {
      for (std::size_t k = 0; k < 3; ++k) item.image.pixels[i * 3 + k] = gray[i];
    }
    item.label = label;
    item.patient = "S" + std::to_string(s / cfg.patient_size);
    visit(std::move(sample));
  }
}

inline std::vector<SyntheticSample> generate_synthetic_samples(const SyntheticConfig& cfg, std::size_t count) {
  std::vector<SyntheticSample> out;
  out.reserve(count);
  for_each_synthetic(cfg, count, [&](SyntheticSample&& s) { out.push_back(std::move(s)); });
  return out;
}

inline std::vector<LabeledImage> generate_synthetic(const SyntheticConfig& cfg, std::size_t count) {
  auto samples = generate_synthetic_samples(cfg, count);
  std::vector<LabeledImage> out;
  out.reserve(samples.size());
  for (auto& s : samples) out.push_back(std::move(s.item));
  return out;
}

// First train_count samples for training, the remaining test_count for testing.
inline std::pair<std::vector<LabeledImage>, std::vector<LabeledImage>> synthetic_split(const SyntheticConfig& cfg) {
  auto all = generate_synthetic(cfg, cfg.train_count + cfg.test_count);
  std::vector<LabeledImage> test(std::make_move_iterator(all.begin() + static_cast<long>(cfg.train_count)),
                                 std::make_move_iterator(all.end()));
  all.resize(cfg.train_count);
  return {std::move(all), std::move(test)};
}

// ---------------------------------------------------------------------------
// Directory loader: root/<benign|malignant>/<patient>/<magnification>/<file>.png

struct LoadResult {
  std::vector<LabeledImage> images;
  std::vector<std::string> errors;  // one line per rejected file
  std::size_t filtered_out = 0;     // valid files skipped by the magnification filter
};

inline bool valid_magnification(int m) { return m == 40 || m == 100 || m == 200 || m == 400; }

inline LoadResult load_dataset(const std::filesystem::path& root, std::optional<int> magnification = std::nullopt) {
  namespace fs = std::filesystem;
  LoadResult res;
  std::error_code ec;
  if (!fs::is_directory(root, ec)) throw DatasetError("dataset root " + root.string() + " is not a directory");
  std::vector<fs::path> files;
  for (auto it = fs::recursive_directory_iterator(root, ec); !ec && it != fs::recursive_directory_iterator(); it.increment(ec)) {
    if (it->is_regular_file(ec)) files.push_back(it->path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& file : files) {
    const auto rel = fs::relative(file, root, ec);
    std::vector<std::string> parts;
    for (const auto& p : rel) parts.push_back(p.string());
    const std::string where = rel.generic_string();
    if (parts.size() != 4) {
      res.errors.push_back(where + ": expected <class>/<patient>/<magnification>/<file>");
      continue;
    }
    std::size_t label;
    if (parts[0] == "benign") label = kBenign;
    else if (parts[0] == "malignant") label = kMalignant;
    else {
      res.errors.push_back(where + ": unknown class directory '" + parts[0] + "'");
      continue;
    }
    int mag = 0;
    try {
      std::size_t used = 0;
      mag = std::stoi(parts[2], &used);
      if (used != parts[2].size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      mag = -1;
    }
    if (!valid_magnification(mag)) {
      res.errors.push_back(where + ": magnification '" + parts[2] + "' is not one of 40, 100, 200, 400");
      continue;
    }
    if (magnification && *magnification != mag) {
      ++res.filtered_out;
      continue;
    }
    try {
      LabeledImage li{read_png(file.string()), label, parts[1], mag};
      res.images.push_back(std::move(li));
    } catch (const std::exception& e) {
      res.errors.push_back(where + ": " + e.what());
    }
  }
  // An empty result caused only by the filter is left to the caller.
  if (res.images.empty() && res.filtered_out == 0) throw DatasetError("no images found under " + root.string());
  return res;
}

}  // namespace dhan
