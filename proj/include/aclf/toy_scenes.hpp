#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "aclf/rng.hpp"
#include "aclf/tensor.hpp"
#include "aclf/training.hpp"

// Deterministic synthetic scenes: a grid with 1-3 non-overlapping colored
// rectangular blobs, captioned by a fixed template grammar over a closed
// 21-token vocabulary. The blobs give the 2-D clustering matrix genuine
// region structure to discover; the phrase template does the same for the
// decoder.

namespace aclf {

inline const std::vector<std::string>& vocabulary() {
  static const std::vector<std::string> v = {
      "<bos>",  "<eos>",   "<pad>", "a",    "small",  "big",   "red",
      "green",  "blue",    "yellow", "white", "black", "block", "at",
      "top",    "middle",  "bottom", "left", "center", "right", "and"};
  return v;
}

inline int token_id(const std::string& word) {
  const auto& v = vocabulary();
  for (std::size_t i = 0; i < v.size(); ++i)
    if (v[i] == word) return static_cast<int>(i);
  throw std::invalid_argument("unknown word: " + word);
}

inline const std::string& token_word(int id) {
  const auto& v = vocabulary();
  detail::require(id >= 0 && static_cast<std::size_t>(id) < v.size(),
                  "token id out of range: " + std::to_string(id));
  return v[static_cast<std::size_t>(id)];
}

inline constexpr std::size_t kSceneFeatureDim = 8;  // 6 colors + 2 coords
inline constexpr std::array<const char*, 6> kColorNames = {
    "red", "green", "blue", "yellow", "white", "black"};

struct Blob {
  int color = 0;  // index into kColorNames
  int top = 0;
  int left = 0;
  int height = 1;
  int width = 1;

  bool operator==(const Blob&) const = default;

  bool contains(int r, int c) const {
    return r >= top && r < top + height && c >= left && c < left + width;
  }
  bool overlaps(const Blob& o) const {
    return top < o.top + o.height && o.top < top + height &&
           left < o.left + o.width && o.left < left + width;
  }
};

struct Scene {
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;
  std::vector<Blob> blobs;

  bool operator==(const Scene&) const = default;
};

// Seeded scene. Blob count 1-3; each blob draws color, size (up to half the
// grid per axis) and position, rejection-sampled against overlap for at most
// 100 attempts; an unplaceable blob is dropped rather than failing.
inline Scene generate_scene(std::uint64_t seed, std::size_t grid_h,
                            std::size_t grid_w) {
  detail::require(grid_h >= 4 && grid_w >= 4,
                  "generate_scene: grid must be at least 4x4");
  SplitMix64 rng(seed);
  Scene scene;
  scene.grid_h = grid_h;
  scene.grid_w = grid_w;
  const std::size_t want = 1 + rng.next_below(3);
  for (std::size_t b = 0; b < want; ++b) {
    for (int attempt = 0; attempt < 100; ++attempt) {
      Blob blob;
      blob.color = static_cast<int>(rng.next_below(kColorNames.size()));
      blob.height = 1 + static_cast<int>(rng.next_below(grid_h / 2));
      blob.width = 1 + static_cast<int>(rng.next_below(grid_w / 2));
      blob.top = static_cast<int>(rng.next_below(grid_h - blob.height + 1));
      blob.left = static_cast<int>(rng.next_below(grid_w - blob.width + 1));
      bool clash = false;
      for (const Blob& other : scene.blobs) clash = clash || blob.overlaps(other);
      if (!clash) {
        scene.blobs.push_back(blob);
        break;
      }
    }
  }
  return scene;
}

// Per-cell features: one-hot color block for cells inside a blob (zero block
// elsewhere) plus the cell's normalized center coordinates.
inline Tensor scene_to_features(const Scene& scene) {
  const std::size_t h = scene.grid_h, w = scene.grid_w;
  Tensor f({h * w, kSceneFeatureDim});
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) {
      double* row = f.data() + (r * w + c) * kSceneFeatureDim;
      for (const Blob& b : scene.blobs)
        if (b.contains(static_cast<int>(r), static_cast<int>(c)))
          row[b.color] = 1.0;
      row[6] = (static_cast<double>(r) + 0.5) / static_cast<double>(h);
      row[7] = (static_cast<double>(c) + 0.5) / static_cast<double>(w);
    }
  return f;
}

namespace detail {

// Thirds banding on the blob center, kept in integers: 3*(2*center) vs 2n
// and 4n where 2*center = 2*lo + (extent-1)*... using doubled coordinates.
inline int band_of(int lo, int extent, std::size_t n) {
  const long twice_center = 2L * lo + (extent - 1);  // 2 * center index
  const long lhs = 3L * twice_center;
  if (lhs < 2L * static_cast<long>(n)) return 0;
  if (lhs < 4L * static_cast<long>(n)) return 1;
  return 2;
}

}  // namespace detail

// Caption words for one scene: blobs sorted by (top, left), each rendered as
// "a <size> <color> block at <row-band> <col-band>", joined with "and".
inline std::vector<std::string> caption_words(const Scene& scene) {
  std::vector<Blob> blobs = scene.blobs;
  std::sort(blobs.begin(), blobs.end(), [](const Blob& a, const Blob& b) {
    return std::pair(a.top, a.left) < std::pair(b.top, b.left);
  });
  static const std::array<const char*, 3> kRowBand = {"top", "middle",
                                                      "bottom"};
  static const std::array<const char*, 3> kColBand = {"left", "center",
                                                      "right"};
  std::vector<std::string> words;
  for (std::size_t i = 0; i < blobs.size(); ++i) {
    const Blob& b = blobs[i];
    if (i > 0) words.push_back("and");
    words.push_back("a");
    words.push_back(b.height * b.width <= 2 ? "small" : "big");
    words.push_back(kColorNames[static_cast<std::size_t>(b.color)]);
    words.push_back("block");
    words.push_back("at");
    words.push_back(kRowBand[static_cast<std::size_t>(
        detail::band_of(b.top, b.height, scene.grid_h))]);
    words.push_back(kColBand[static_cast<std::size_t>(
        detail::band_of(b.left, b.width, scene.grid_w))]);
  }
  return words;
}

// Token ids, BOS/EOS wrapped.
inline std::vector<int> generate_caption(const Scene& scene) {
  std::vector<int> ids = {kBosId};
  for (const std::string& w : caption_words(scene)) ids.push_back(token_id(w));
  ids.push_back(kEosId);
  return ids;
}

inline std::vector<std::string> detokenize(const std::vector<int>& ids) {
  std::vector<std::string> words;
  for (int id : ids) {
    if (id == kBosId || id == kEosId || id == kPadId) continue;
    words.push_back(token_word(id));
  }
  return words;
}

struct ToySample {
  std::uint64_t seed = 0;
  Scene scene;
  std::vector<int> caption;  // BOS/EOS wrapped
};

inline ToySample make_sample(std::uint64_t seed, std::size_t grid_h,
                             std::size_t grid_w) {
  ToySample s;
  s.seed = seed;
  s.scene = generate_scene(seed, grid_h, grid_w);
  s.caption = generate_caption(s.scene);
  return s;
}

inline nlohmann::json sample_to_json(const ToySample& s) {
  nlohmann::json blobs = nlohmann::json::array();
  for (const Blob& b : s.scene.blobs)
    blobs.push_back({b.color, b.top, b.left, b.height, b.width});
  return nlohmann::json{{"schema", 1},
                        {"grid", {s.scene.grid_h, s.scene.grid_w}},
                        {"blobs", blobs},
                        {"caption", caption_words(s.scene)},
                        {"seed", s.seed}};
}

inline ToySample sample_from_json(const nlohmann::json& j) {
  detail::require(j.at("schema").get<int>() == 1,
                  "dataset: unsupported schema version");
  ToySample s;
  s.seed = j.at("seed").get<std::uint64_t>();
  s.scene.grid_h = j.at("grid").at(0).get<std::size_t>();
  s.scene.grid_w = j.at("grid").at(1).get<std::size_t>();
  for (const auto& b : j.at("blobs")) {
    Blob blob;
    blob.color = b.at(0).get<int>();
    blob.top = b.at(1).get<int>();
    blob.left = b.at(2).get<int>();
    blob.height = b.at(3).get<int>();
    blob.width = b.at(4).get<int>();
    s.scene.blobs.push_back(blob);
  }
  s.caption.push_back(kBosId);
  for (const auto& w : j.at("caption"))
    s.caption.push_back(token_id(w.get<std::string>()));
  s.caption.push_back(kEosId);
  return s;
}

struct DatasetFiles {
  std::string train, val, test;
  std::array<std::size_t, 3> counts{};
};

// Deterministic split: target counts come from the ratios (largest-remainder
// rounding), assignment follows the hash order of each sample's seed, so the
// partition is a pure function of (seed, count, ratios) and splits stay
// disjoint.
inline DatasetFiles build_dataset(std::uint64_t seed, std::size_t count,
                                  std::array<double, 3> ratios,
                                  std::size_t grid_h, std::size_t grid_w,
                                  const std::string& out_dir) {
  detail::require(count >= 1, "build_dataset: empty dataset");
  const double ratio_sum = ratios[0] + ratios[1] + ratios[2];
  detail::require(std::abs(ratio_sum - 1.0) <= 1e-9,
                  "build_dataset: split ratios must sum to 1");

  std::array<std::size_t, 3> target{};
  std::array<double, 3> frac{};
  std::size_t assigned = 0;
  for (int s = 0; s < 3; ++s) {
    const double exact = ratios[static_cast<std::size_t>(s)] * static_cast<double>(count);
    target[static_cast<std::size_t>(s)] = static_cast<std::size_t>(exact);
    frac[static_cast<std::size_t>(s)] = exact - std::floor(exact);
    assigned += target[static_cast<std::size_t>(s)];
  }
  while (assigned < count) {
    int best = 0;
    for (int s = 1; s < 3; ++s)
      if (frac[static_cast<std::size_t>(s)] > frac[static_cast<std::size_t>(best)]) best = s;
    ++target[static_cast<std::size_t>(best)];
    frac[static_cast<std::size_t>(best)] = -1.0;
    ++assigned;
  }

  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), 0);
  std::vector<std::uint64_t> hash(count);
  for (std::size_t i = 0; i < count; ++i) hash[i] = SplitMix64(seed + i).next();
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return std::pair(hash[a], a) < std::pair(hash[b], b);
  });

  DatasetFiles files;
  files.train = out_dir + "/train.jsonl";
  files.val = out_dir + "/val.jsonl";
  files.test = out_dir + "/test.jsonl";
  std::ofstream out[3] = {std::ofstream(files.train), std::ofstream(files.val),
                          std::ofstream(files.test)};
  for (int s = 0; s < 3; ++s)
    if (!out[s])
      throw IoError("build_dataset: cannot write into " + out_dir);

  std::vector<int> split_of(count);
  for (std::size_t pos = 0; pos < count; ++pos) {
    int split = pos < target[0] ? 0 : (pos < target[0] + target[1] ? 1 : 2);
    split_of[order[pos]] = split;
  }
  for (std::size_t i = 0; i < count; ++i) {
    const ToySample sample = make_sample(seed + i, grid_h, grid_w);
    out[split_of[i]] << sample_to_json(sample).dump() << "\n";
    ++files.counts[static_cast<std::size_t>(split_of[i])];
  }
  for (int s = 0; s < 3; ++s)
    if (!out[s]) throw IoError("build_dataset: write failed in " + out_dir);
  return files;
}

inline std::vector<ToySample> load_dataset(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("dataset: cannot open " + path);
  std::vector<ToySample> samples;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    samples.push_back(sample_from_json(nlohmann::json::parse(line)));
  }
  return samples;
}

inline TrainSample to_train_sample(const ToySample& s) {
  return TrainSample{scene_to_features(s.scene), s.caption};
}

}  // namespace aclf
