#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "rescan/checkpoint.hpp"
#include "rescan/image.hpp"

namespace rescan {

/// One layer of similar streaks.
struct RainLayerSpec {
  double angle = 0.0;      // degrees from vertical
  double length = 9.0;     // pixels
  double thickness = 1.0;  // pixels
  double density = 3.0;    // streaks per 1000 px^2
  double brightness = 0.5; // alpha_i
  std::uint64_t seed = 0;
};

inline void validate(const RainLayerSpec& s) {
  if (!(s.brightness >= 0.0)) throw ConfigError("rain layer: brightness alpha_i must be >= 0");
  if (!(s.density > 0.0)) throw ConfigError("rain layer: density must be > 0");
  if (!(s.length >= 1.0)) throw ConfigError("rain layer: length must be >= 1");
  if (!(s.thickness > 0.0)) throw ConfigError("rain layer: thickness must be > 0");
}

// splitmix64 finaliser; derives independent child seeds.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

namespace detail {

// Separable Gaussian blur with zero boundary, radius ceil(3 sigma).
inline void gaussian_blur(std::vector<float>& img, int h, int w, double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> kernel(2 * radius + 1);
  double total = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    kernel[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
    total += kernel[i + radius];
  }
  for (auto& k : kernel) k /= total;
  std::vector<float> tmp(img.size(), 0.0f);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i) {
        const int xx = x + i;
        if (xx >= 0 && xx < w) acc += kernel[i + radius] * img[static_cast<std::size_t>(y) * w + xx];
      }
      tmp[static_cast<std::size_t>(y) * w + x] = static_cast<float>(acc);
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i) {
        const int yy = y + i;
        if (yy >= 0 && yy < h) acc += kernel[i + radius] * tmp[static_cast<std::size_t>(yy) * w + x];
      }
      img[static_cast<std::size_t>(y) * w + x] = static_cast<float>(acc);
    }
}

}  // namespace detail

/// Renders one single-channel streak layer in [0, 1].
///
/// round(density * H * W / 1000) seed points are placed uniformly, each
/// swept along `angle` over `length` pixels with a disc of diameter
/// `thickness`, then the map is Gaussian-smoothed (sigma 0.5) and
/// peak-normalised. Streak intensities vary in [0.6, 1].
inline Image gen_streak_layer(const RainLayerSpec& spec, int height, int width) {
  validate(spec);
  if (height <= 0 || width <= 0) throw ConfigError("streak layer: degenerate image size");
  Image layer(1, height, width);
  const auto count = static_cast<long>(std::llround(spec.density * height * width / 1000.0));
  if (count == 0) return layer;

  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> ux(0.0, width);
  std::uniform_real_distribution<double> uy(0.0, height);
  std::uniform_real_distribution<double> intensity(0.6, 1.0);
  const double theta = spec.angle * std::numbers::pi / 180.0;
  const double dx = std::sin(theta);
  const double dy = std::cos(theta);
  const double radius = 0.5 * spec.thickness;
  const int reach = static_cast<int>(std::ceil(radius));
  for (long s = 0; s < count; ++s) {
    const double cx = ux(rng);
    const double cy = uy(rng);
    const float level = static_cast<float>(intensity(rng));
    const int steps = static_cast<int>(std::ceil(spec.length * 4.0));
    for (int t = 0; t <= steps; ++t) {
      const double along = -0.5 * spec.length + spec.length * t / steps;
      const double px = cx + along * dx;
      const double py = cy + along * dy;
      const int ix = static_cast<int>(std::floor(px));
      const int iy = static_cast<int>(std::floor(py));
      for (int oy = -reach; oy <= reach; ++oy)
        for (int ox = -reach; ox <= reach; ++ox) {
          const int x = ix + ox;
          const int y = iy + oy;
          if (x < 0 || x >= width || y < 0 || y >= height) continue;
          const double ddx = (x + 0.5) - px;
          const double ddy = (y + 0.5) - py;
          if (ddx * ddx + ddy * ddy > std::max(radius * radius, 0.5)) continue;
          float& v = layer.at(0, y, x);
          v = std::max(v, level);
        }
    }
  }
  detail::gaussian_blur(layer.values, height, width, 0.5);
  const float peak = *std::max_element(layer.values.begin(), layer.values.end());
  if (peak > 0.0f) {
    for (auto& v : layer.values) v = std::min(1.0f, v / peak);
  }
  return layer;
}

/// Repeats a single-channel map across `channels`.
inline Image broadcast_channels(const Image& gray, int channels) {
  if (gray.channels != 1) throw ConfigError("broadcast_channels: expected one channel");
  Image out(channels, gray.height, gray.width);
  for (int c = 0; c < channels; ++c)
    std::copy(gray.values.begin(), gray.values.end(), out.values.begin() + c * gray.plane());
  return out;
}

namespace detail {

inline void require_same(const Image& a, const Image& b, const char* what) {
  if (!a.same_size(b)) {
    std::ostringstream os;
    os << what << ": shape mismatch (" << a.channels << "x" << a.height << "x" << a.width
       << ") vs (" << b.channels << "x" << b.height << "x" << b.width << ")";
    throw ConfigError(os.str());
  }
}

}  // namespace detail

/// O = B + R (raw, unclipped).
inline Image compose_eq1(const Image& background, const Image& streaks) {
  detail::require_same(background, streaks, "compose_eq1");
  Image out = background;
  for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] += streaks.values[i];
  return out;
}

/// O = B + sum_i R^i (raw, unclipped).
inline Image compose_eq2(const Image& background, const std::vector<Image>& layers) {
  Image out = background;
  for (const auto& layer : layers) {
    detail::require_same(background, layer, "compose_eq2");
    for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] += layer.values[i];
  }
  return out;
}

/// Generalised scene: O = (1 - sum_{i=0..n} a_i) B + a_0 A + sum_{i=1..n} a_i R^i,
/// with alpha_i >= 0 and the sum of all alphas <= 1.
struct RainSceneSpec {
  Image background;
  double atmospheric_light = 1.0;  // A, gray
  double alpha0 = 0.0;             // scene transmission coefficient
  std::vector<RainLayerSpec> layers;
};

struct SynthPair {
  Image rainy;               // O
  Image clean;               // B
  Image residual;            // O - B
  std::vector<Image> layers; // R^i as rendered, one channel each, in [0, 1]
};

inline void validate(const RainSceneSpec& scene) {
  if (!(scene.alpha0 >= 0.0)) {
    throw ConfigError("scene constraint violated: alpha_0 = " + format_double(scene.alpha0) +
                      " < 0");
  }
  double total = scene.alpha0;
  for (std::size_t i = 0; i < scene.layers.size(); ++i) {
    const double a = scene.layers[i].brightness;
    if (!(a >= 0.0)) {
      throw ConfigError("scene constraint violated: alpha_" + std::to_string(i + 1) + " = " +
                        format_double(a) + " < 0");
    }
    total += a;
  }
  if (total > 1.0) {
    throw ConfigError("scene constraint violated: sum of alpha_i = " + format_double(total) +
                      " > 1");
  }
  for (float v : scene.background.values) {
    if (!(v >= 0.0f && v <= 1.0f)) throw ConfigError("scene background values must lie in [0, 1]");
  }
  for (const auto& layer : scene.layers) validate(layer);
}

inline SynthPair compose_eq3(const RainSceneSpec& scene) {
  validate(scene);
  const Image& b = scene.background;
  SynthPair pair;
  pair.clean = b;
  double total = scene.alpha0;
  for (const auto& layer : scene.layers) total += layer.brightness;
  pair.rainy = b;
  const auto keep = static_cast<float>(1.0 - total);
  const auto haze = static_cast<float>(scene.alpha0 * scene.atmospheric_light);
  for (auto& v : pair.rainy.values) v = keep * v + haze;
  for (const auto& spec : scene.layers) {
    Image layer = gen_streak_layer(spec, b.height, b.width);
    const auto a = static_cast<float>(spec.brightness);
    for (int c = 0; c < b.channels; ++c)
      for (std::size_t i = 0; i < b.plane(); ++i) pair.rainy.values[c * b.plane() + i] += a * layer.values[i];
    pair.layers.push_back(std::move(layer));
  }
  pair.residual = pair.rainy;
  for (std::size_t i = 0; i < b.values.size(); ++i) pair.residual.values[i] -= b.values[i];
  return pair;
}

/// Procedural clean image: smooth colour gradient, a few low-frequency waves,
/// and several flat rectangles and discs. Values in [0.05, 0.85].
inline Image generate_background(int channels, int height, int width, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Image img(channels, height, width);
  for (int c = 0; c < channels; ++c) {
    const double base = 0.2 + 0.4 * unit(rng);
    const double gx = 0.3 * (unit(rng) - 0.5);
    const double gy = 0.3 * (unit(rng) - 0.5);
    const double fx = 1.0 + 3.0 * unit(rng), fy = 1.0 + 3.0 * unit(rng), ph = 6.283 * unit(rng);
    const double amp = 0.1 * unit(rng);
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) {
        const double u = static_cast<double>(x) / width;
        const double v = static_cast<double>(y) / height;
        img.at(c, y, x) = static_cast<float>(base + gx * (u - 0.5) + gy * (v - 0.5) +
                                             amp * std::sin(6.283 * (fx * u + fy * v) + ph));
      }
  }
  const int shapes = 3 + static_cast<int>(unit(rng) * 4);
  for (int s = 0; s < shapes; ++s) {
    const bool disc = unit(rng) < 0.5;
    const double cx = unit(rng) * width, cy = unit(rng) * height;
    const double rx = (0.08 + 0.2 * unit(rng)) * width, ry = (0.08 + 0.2 * unit(rng)) * height;
    std::vector<double> colour(channels);
    for (auto& col : colour) col = 0.05 + 0.8 * unit(rng);
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) {
        const double ux = (x + 0.5 - cx) / rx, uy = (y + 0.5 - cy) / ry;
        const bool inside = disc ? (ux * ux + uy * uy <= 1.0) : (std::abs(ux) <= 1.0 && std::abs(uy) <= 1.0);
        if (!inside) continue;
        for (int c = 0; c < channels; ++c) img.at(c, y, x) = static_cast<float>(colour[c]);
      }
  }
  for (auto& v : img.values) v = std::clamp(v, 0.05f, 0.85f);
  return img;
}

// ---------------------------------------------------------------------------
// Datasets

enum class RainModel { kEq1, kEq2, kEq3 };

inline std::string rain_model_name(RainModel m) {
  switch (m) {
    case RainModel::kEq1: return "eq1";
    case RainModel::kEq2: return "eq2";
    case RainModel::kEq3: return "eq3";
  }
  return "eq2";
}

inline RainModel parse_rain_model(const std::string& s) {
  if (s == "eq1") return RainModel::kEq1;
  if (s == "eq2") return RainModel::kEq2;
  if (s == "eq3") return RainModel::kEq3;
  throw ConfigError("unknown rain model '" + s + "' (expected eq1|eq2|eq3)");
}

struct Range {
  double lo = 0.0;
  double hi = 0.0;
};

/// Sampling ranges for synthetic pairs.
struct DatasetSpec {
  RainModel model = RainModel::kEq2;
  int size = 64;
  int channels = 3;
  int layers = 3;  // forced to 1 for eq1
  std::vector<double> angles = {-30.0, -15.0, 0.0, 15.0, 30.0};
  Range length{8.0, 20.0};
  Range thickness{1.0, 2.0};
  Range density{2.0, 5.0};
  Range brightness{0.3, 0.7};
  Range alpha0{0.0, 0.1};         // eq3 only
  Range atmospheric{0.7, 1.0};    // eq3 only
  Range eq3_brightness{0.1, 0.3}; // eq3 layer alphas
  int test_pairs = 5;
};

/// Everything needed to re-render one pair bit-for-bit.
struct PairRecord {
  int index = 0;
  std::string split = "train";
  std::uint64_t seed = 0;  // drives the background
  RainModel model = RainModel::kEq2;
  int size = 64;
  int channels = 3;
  double alpha0 = 0.0;
  double atmospheric_light = 1.0;
  std::vector<RainLayerSpec> layers;

  std::string stem() const {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "pair_%04d", index);
    return buf;
  }
};

inline void validate(const DatasetSpec& spec) {
  if (spec.size <= 0) throw ConfigError("dataset: size must be positive");
  if (spec.channels != 1 && spec.channels != 3) throw ConfigError("dataset: channels must be 1 or 3");
  if (spec.layers < 1) throw ConfigError("dataset: need at least one streak layer");
  if (spec.angles.empty()) throw ConfigError("dataset: angle list is empty");
  if (spec.model == RainModel::kEq3) {
    const double worst = spec.alpha0.hi + spec.layers * spec.eq3_brightness.hi;
    if (worst > 1.0) {
      throw ConfigError("dataset: eq3 ranges allow sum of alpha_i = " + format_double(worst) + " > 1");
    }
  }
}

inline PairRecord sample_pair(const DatasetSpec& spec, std::uint64_t master_seed, int index,
                              int count) {
  PairRecord rec;
  rec.index = index;
  rec.split = index >= count - spec.test_pairs ? "test" : "train";
  rec.model = spec.model;
  rec.size = spec.size;
  rec.channels = spec.channels;
  const std::uint64_t pair_seed = mix_seed(master_seed, static_cast<std::uint64_t>(index));
  rec.seed = pair_seed;
  std::mt19937_64 rng(mix_seed(pair_seed, 0xA11CE));
  auto draw = [&rng](const Range& r) {
    return r.lo + (r.hi - r.lo) * std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  };
  std::uniform_int_distribution<std::size_t> pick(0, spec.angles.size() - 1);
  const int layer_count = spec.model == RainModel::kEq1 ? 1 : spec.layers;
  if (spec.model == RainModel::kEq3) {
    rec.alpha0 = draw(spec.alpha0);
    rec.atmospheric_light = draw(spec.atmospheric);
  }
  for (int i = 0; i < layer_count; ++i) {
    RainLayerSpec layer;
    layer.angle = spec.angles[pick(rng)];
    layer.length = draw(spec.length);
    layer.thickness = draw(spec.thickness);
    layer.density = draw(spec.density);
    layer.brightness = spec.model == RainModel::kEq3 ? draw(spec.eq3_brightness) : draw(spec.brightness);
    layer.seed = mix_seed(pair_seed, static_cast<std::uint64_t>(i + 1));
    rec.layers.push_back(layer);
  }
  return rec;
}

/// Renders a pair in raw floats according to its model.
inline SynthPair synthesize(const PairRecord& rec) {
  const Image background = generate_background(rec.channels, rec.size, rec.size, rec.seed);
  if (rec.model == RainModel::kEq3) {
    RainSceneSpec scene;
    scene.background = background;
    scene.alpha0 = rec.alpha0;
    scene.atmospheric_light = rec.atmospheric_light;
    scene.layers = rec.layers;
    return compose_eq3(scene);
  }
  SynthPair pair;
  pair.clean = background;
  std::vector<Image> components;
  for (const auto& spec : rec.layers) {
    Image layer = gen_streak_layer(spec, rec.size, rec.size);
    Image comp = broadcast_channels(layer, rec.channels);
    for (auto& v : comp.values) v *= static_cast<float>(spec.brightness);
    components.push_back(std::move(comp));
    pair.layers.push_back(std::move(layer));
  }
  pair.rainy = rec.model == RainModel::kEq1 ? compose_eq1(background, components.front())
                                            : compose_eq2(background, components);
  pair.residual = pair.rainy;
  for (std::size_t i = 0; i < background.values.size(); ++i) pair.residual.values[i] -= background.values[i];
  return pair;
}

/// Training sample after the export convention: rainy and clean clamped and
/// quantised to 8 bits, residual = rainy - clean on the quantised values.
struct Sample {
  std::string name;
  Image rainy;
  Image clean;
  Image residual;
};

inline Sample make_sample(const std::string& name, const Image& rainy_raw, const Image& clean_raw) {
  Sample s;
  s.name = name;
  s.rainy = quantized(rainy_raw);
  s.clean = quantized(clean_raw);
  s.residual = s.rainy;
  for (std::size_t i = 0; i < s.residual.values.size(); ++i) s.residual.values[i] -= s.clean.values[i];
  return s;
}

struct Dataset {
  std::vector<Sample> train;
  std::vector<Sample> test;
};

inline int default_thread_count() {
  if (const char* env = std::getenv("RESCAN_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) return n;
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

/// Runs body(i) for i in [0, count) on up to `threads` workers. Each index is
/// handled independently so results do not depend on scheduling.
template <typename Body>
void parallel_for(int count, int threads, Body body) {
  threads = std::max(1, std::min(threads, count));
  if (threads <= 1) {
    for (int i = 0; i < count; ++i) body(i);
    return;
  }
  std::vector<std::exception_ptr> errors(threads);
  {
    std::vector<std::jthread> workers;
    for (int t = 0; t < threads; ++t) {
      workers.emplace_back([&, t] {
        try {
          for (int i = t; i < count; i += threads) body(i);
        } catch (...) {
          errors[t] = std::current_exception();
        }
      });
    }
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

/// In-memory dataset identical to what make_dataset writes and load_dataset
/// reads back.
inline Dataset synthesize_dataset(int count, const DatasetSpec& spec, std::uint64_t seed) {
  validate(spec);
  std::vector<Sample> samples(count);
  std::vector<std::string> splits(count);
  parallel_for(count, default_thread_count(), [&](int i) {
    const PairRecord rec = sample_pair(spec, seed, i, count);
    const SynthPair pair = synthesize(rec);
    samples[i] = make_sample(rec.stem(), pair.rainy, pair.clean);
    splits[i] = rec.split;
  });
  Dataset ds;
  for (int i = 0; i < count; ++i) (splits[i] == "test" ? ds.test : ds.train).push_back(std::move(samples[i]));
  return ds;
}

// Manifest: '#' header lines, then one "key=value ..." record per pair.

inline std::string manifest_line(const PairRecord& rec) {
  std::ostringstream os;
  const std::string stem = rec.stem();
  os << "pair=" << rec.index << " split=" << rec.split << " rainy=" << stem << "_rainy.png"
     << " clean=" << stem << "_clean.png" << " residual=" << stem << "_residual.png"
     << " seed=" << rec.seed << " model=" << rain_model_name(rec.model) << " size=" << rec.size
     << " channels=" << rec.channels << " alpha0=" << format_double(rec.alpha0)
     << " A=" << format_double(rec.atmospheric_light) << " layers=" << rec.layers.size();
  for (std::size_t i = 0; i < rec.layers.size(); ++i) {
    const auto& l = rec.layers[i];
    os << " angle" << i << "=" << format_double(l.angle) << " length" << i << "="
       << format_double(l.length) << " thickness" << i << "=" << format_double(l.thickness)
       << " density" << i << "=" << format_double(l.density) << " alpha" << i + 1 << "="
       << format_double(l.brightness) << " seed" << i << "=" << l.seed;
  }
  return os.str();
}

struct ManifestEntry {
  PairRecord record;
  std::string rainy_file;
  std::string clean_file;
  std::string residual_file;
};

inline ManifestEntry parse_manifest_line(const std::string& line) {
  KeyValues kv;
  std::istringstream is(line);
  std::string token;
  while (is >> token) {
    const auto eq = token.find('=');
    if (eq == std::string::npos) throw ConfigError("manifest: malformed token '" + token + "'");
    kv[token.substr(0, eq)] = token.substr(eq + 1);
  }
  auto need = [&kv](const std::string& key) -> const std::string& {
    const auto it = kv.find(key);
    if (it == kv.end()) throw ConfigError("manifest: record lacks '" + key + "'");
    return it->second;
  };
  ManifestEntry e;
  auto& r = e.record;
  r.index = detail::parse_int("pair", need("pair"));
  r.split = need("split");
  r.seed = std::stoull(need("seed"));
  r.model = parse_rain_model(need("model"));
  r.size = detail::parse_int("size", need("size"));
  r.channels = detail::parse_int("channels", need("channels"));
  r.alpha0 = detail::parse_double("alpha0", need("alpha0"));
  r.atmospheric_light = detail::parse_double("A", need("A"));
  const int layers = detail::parse_int("layers", need("layers"));
  for (int i = 0; i < layers; ++i) {
    const std::string k = std::to_string(i);
    RainLayerSpec l;
    l.angle = detail::parse_double("angle", need("angle" + k));
    l.length = detail::parse_double("length", need("length" + k));
    l.thickness = detail::parse_double("thickness", need("thickness" + k));
    l.density = detail::parse_double("density", need("density" + k));
    l.brightness = detail::parse_double("alpha", need("alpha" + std::to_string(i + 1)));
    l.seed = std::stoull(need("seed" + k));
    r.layers.push_back(l);
  }
  e.rainy_file = need("rainy");
  e.clean_file = need("clean");
  e.residual_file = need("residual");
  return e;
}

inline std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open manifest: " + path.string());
  std::vector<ManifestEntry> entries;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    entries.push_back(parse_manifest_line(line));
  }
  return entries;
}

inline void write_pair_files(const std::filesystem::path& dir, const PairRecord& rec) {
  const SynthPair pair = synthesize(rec);
  const Sample s = make_sample(rec.stem(), pair.rainy, pair.clean);
  const std::string stem = rec.stem();
  write_png(dir / (stem + "_rainy.png"), s.rainy);
  write_png(dir / (stem + "_clean.png"), s.clean);
  write_residual_png(dir / (stem + "_residual.png"), s.residual);
}

inline void write_manifest(const std::filesystem::path& path, const std::vector<PairRecord>& records,
                           std::uint64_t seed) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write manifest: " + path.string());
  os << "# rescan synthetic rain dataset\n";
  os << "# master_seed=" << seed << " pairs=" << records.size() << "\n";
  os << "# rainy/clean: 8-bit PNG after clamping to [0,1]; residual = rainy - clean,\n";
  os << "# stored as round((r + 1) / 2 * 255). eq3 residuals include the haze term.\n";
  for (const auto& rec : records) os << manifest_line(rec) << "\n";
  if (!os) throw IoError("failed writing manifest: " + path.string());
}

/// Writes `count` PNG triples plus manifest.txt into `out_dir`.
inline std::vector<PairRecord> make_dataset(int count, const DatasetSpec& spec,
                                            const std::filesystem::path& out_dir, std::uint64_t seed) {
  validate(spec);
  if (count < 0) throw ConfigError("dataset: negative pair count");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create directory " + out_dir.string() + ": " + ec.message());
  std::vector<PairRecord> records;
  for (int i = 0; i < count; ++i) records.push_back(sample_pair(spec, seed, i, count));
  parallel_for(count, default_thread_count(), [&](int i) { write_pair_files(out_dir, records[i]); });
  write_manifest(out_dir / "manifest.txt", records, seed);
  return records;
}

/// Re-renders every pair listed in a manifest into `out_dir`.
inline void regenerate_from_manifest(const std::filesystem::path& manifest,
                                     const std::filesystem::path& out_dir) {
  const auto entries = read_manifest(manifest);
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create directory " + out_dir.string() + ": " + ec.message());
  parallel_for(static_cast<int>(entries.size()), default_thread_count(),
               [&](int i) { write_pair_files(out_dir, entries[i].record); });
  std::filesystem::copy_file(manifest, out_dir / "manifest.txt",
                             std::filesystem::copy_options::overwrite_existing, ec);
  if (ec) throw IoError("cannot copy manifest into " + out_dir.string() + ": " + ec.message());
}

/// Loads a dataset directory written by make_dataset. The residual used for
/// training is recomputed as rainy - clean from the decoded PNGs.
inline Dataset load_dataset(const std::filesystem::path& dir) {
  Dataset ds;
  for (const auto& e : read_manifest(dir / "manifest.txt")) {
    Sample s;
    s.name = e.record.stem();
    s.rainy = read_png(dir / e.rainy_file);
    s.clean = read_png(dir / e.clean_file);
    if (!s.rainy.same_size(s.clean)) throw IoError("size mismatch between " + e.rainy_file + " and " + e.clean_file);
    s.residual = s.rainy;
    for (std::size_t i = 0; i < s.residual.values.size(); ++i) s.residual.values[i] -= s.clean.values[i];
    (e.record.split == "test" ? ds.test : ds.train).push_back(std::move(s));
  }
  return ds;
}

}  // namespace rescan
