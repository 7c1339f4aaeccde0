#pragma once

// Datasets on disk (manifest of image/annotation pairs), per-channel centering,
// rigid augmentation, and a generator of gland-like synthetic images.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dmcs/core.hpp"
#include "dmcs/image_io.hpp"

namespace dmcs {

namespace fs = std::filesystem;

enum class Split { train, testA, testB, synthetic };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::testA: return "testA";
    case Split::testB: return "testB";
    case Split::synthetic: return "synthetic";
  }
  return "?";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "testA") return Split::testA;
  if (s == "testB") return Split::testB;
  if (s == "synthetic") return Split::synthetic;
  throw UsageError("unknown split '" + s + "'");
}

struct ManifestEntry {
  std::string id;
  fs::path image;
  fs::path annotation;  // pixel value = instance id
};

struct DatasetManifest {
  fs::path root;  // relative entry paths are resolved against this
  Split split = Split::synthetic;
  std::vector<ManifestEntry> entries;
};

/// One record per line: id <TAB> image path <TAB> annotation path. Blank lines and
/// lines starting with '#' are skipped.
inline DatasetManifest read_manifest(const fs::path& path, Split split = Split::synthetic) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest " + path.string());
  DatasetManifest m;
  m.root = path.parent_path();
  m.split = split;
  std::string line;
  int lineno = 0;
  std::set<std::string> ids;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, '\t')) f.push_back(cell);
    if (f.size() != 3)
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": expected 3 tab-separated fields, got " +
                      std::to_string(f.size()));
    if (!ids.insert(f[0]).second)
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": duplicate id '" + f[0] + "'");
    m.entries.push_back({f[0], f[1], f[2]});
  }
  return m;
}

inline void write_manifest(const fs::path& path, const std::vector<ManifestEntry>& entries) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write manifest " + path.string());
  for (const auto& e : entries) out << e.id << '\t' << e.image.string() << '\t' << e.annotation.string() << '\n';
  if (!out) throw DataError("failed writing manifest " + path.string());
}

inline fs::path resolve(const DatasetManifest& m, const fs::path& p) { return p.is_absolute() ? p : m.root / p; }

inline std::vector<TrainingSample> load_dataset(const DatasetManifest& m, int edge_thickness = 2) {
  auto entries = m.entries;
  std::sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  std::vector<TrainingSample> out;
  out.reserve(entries.size());
  for (const auto& e : entries) {
    const auto ip = resolve(m, e.image), ap = resolve(m, e.annotation);
    for (const auto& p : {ip, ap})
      if (!fs::exists(p)) throw DataError("entry '" + e.id + "': missing file " + p.string());
    ImageTensor img;
    InstanceMap inst;
    try {
      img = io::read_image(ip.string());
      inst = io::read_instances(ap.string());
    } catch (const ShapeError&) {
      throw;
    } catch (const DataError& err) {
      throw DataError("entry '" + e.id + "': " + err.what());
    }
    out.push_back(make_sample(std::move(img), inst, e.id, edge_thickness));
  }
  return out;
}

// ---------------------------------------------------------------- centering

using ChannelMeans = std::vector<double>;

inline ChannelMeans compute_channel_means(const std::vector<TrainingSample>& samples) {
  if (samples.empty()) throw DataError("cannot compute channel means of an empty set");
  const int c = samples.front().image.channels();
  ChannelMeans sum(c, 0.0);
  double n = 0;
  for (const auto& s : samples) {
    if (s.image.channels() != c) throw ShapeError("mixed channel counts in dataset");
    for (int k = 0; k < c; ++k)
      for (std::size_t i = 0; i < s.image.plane(); ++i) sum[k] += s.image.channel(k)[i];
    n += static_cast<double>(s.image.plane());
  }
  for (auto& v : sum) v /= n;
  return sum;
}

inline ImageTensor zero_mean(const ImageTensor& img, const ChannelMeans& means) {
  if (static_cast<int>(means.size()) != img.channels())
    throw ShapeError("zero_mean: " + std::to_string(means.size()) + " means for " +
                     std::to_string(img.channels()) + " channels");
  ImageTensor out = img;
  for (int k = 0; k < img.channels(); ++k) {
    float* p = out.channel(k);
    for (std::size_t i = 0; i < out.plane(); ++i) p[i] = static_cast<float>(p[i] - means[k]);
  }
  return out;
}

inline ImageTensor restore_mean(const ImageTensor& img, const ChannelMeans& means) {
  ChannelMeans neg(means.size());
  std::transform(means.begin(), means.end(), neg.begin(), [](double v) { return -v; });
  return zero_mean(img, neg);
}

inline void write_means(const fs::path& path, const ChannelMeans& means) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write means file " + path.string());
  out.precision(17);
  for (std::size_t i = 0; i < means.size(); ++i) out << (i ? " " : "") << means[i];
  out << '\n';
}

inline ChannelMeans read_means(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open means file " + path.string());
  ChannelMeans m;
  double v;
  while (in >> v) m.push_back(v);
  if (!in.eof()) throw DataError("malformed means file " + path.string());
  if (m.empty()) throw DataError("empty means file " + path.string());
  return m;
}

// ---------------------------------------------------------------- augmentation

struct AugmentationConfig {
  bool hflip = true;
  std::vector<int> rotations = {0, 90, 180, 270};  // degrees, counter-clockwise
  std::vector<std::pair<int, int>> shifts;         // (dx, dy) pixels
  unsigned seed = 0;

  /// Four diagonal shifts of 10% of the side length.
  static std::vector<std::pair<int, int>> diagonal_shifts(int height, int width) {
    const int dx = static_cast<int>(std::lround(0.1 * width)), dy = static_cast<int>(std::lround(0.1 * height));
    return {{dx, dy}, {-dx, dy}, {dx, -dy}, {-dx, -dy}};
  }

  static AugmentationConfig none() { return {false, {0}, {}, 0}; }
};

namespace detail {

// Maps output (y, x) to source (sy, sx) for a right-angle rotation of an h x w source.
inline std::pair<int, int> rotated_size(int h, int w, int deg) { return deg % 180 ? std::pair{w, h} : std::pair{h, w}; }

inline std::pair<int, int> rotate_source(int y, int x, int h, int w, int deg) {
  switch (deg) {
    case 90: return {x, w - 1 - y};
    case 180: return {h - 1 - y, w - 1 - x};
    case 270: return {h - 1 - x, y};
    default: return {y, x};
  }
}

// Generic rigid transform: flip, then rotate, then shift (vacated pixels get `fill`).
template <typename Set>
void transform_plane(int h, int w, bool flip, int deg, int dx, int dy, Set set) {
  const auto [oh, ow] = rotated_size(h, w, deg);
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x) {
      const int ry = y - dy, rx = x - dx;
      if (ry < 0 || rx < 0 || ry >= oh || rx >= ow) {
        set(y, x, false, 0, 0);
        continue;
      }
      auto [sy, sx] = rotate_source(ry, rx, h, w, deg);
      if (flip) sx = w - 1 - sx;
      set(y, x, true, sy, sx);
    }
}

template <typename G>
G transform_grid(const G& g, bool flip, int deg, int dx, int dy) {
  const auto [oh, ow] = rotated_size(g.height, g.width, deg);
  G out = g;
  out.height = oh;
  out.width = ow;
  transform_plane(g.height, g.width, flip, deg, dx, dy, [&](int y, int x, bool inside, int sy, int sx) {
    out(y, x) = inside ? g(sy, sx) : typename decltype(g.values)::value_type{};
  });
  return out;
}

}  // namespace detail

/// Every combination of {identity, flip} x ({0} + rotations) x ({no shift} + shifts).
/// The original is always the first element. Vacated image pixels take `fill` (one
/// value per channel), or the sample's own channel means when `fill` is empty.
inline std::vector<TrainingSample> augment(const TrainingSample& s, const AugmentationConfig& cfg,
                                           const ChannelMeans& fill = {}) {
  const int h = s.image.height(), w = s.image.width();
  std::vector<int> rots{0};
  for (int r : cfg.rotations) {
    if (r != 0 && r != 90 && r != 180 && r != 270) throw UsageError("rotation must be 0, 90, 180 or 270 degrees");
    if (std::find(rots.begin(), rots.end(), r) == rots.end()) rots.push_back(r);
  }
  std::vector<std::pair<int, int>> shifts{{0, 0}};
  for (const auto& sh : cfg.shifts) {
    const int side = std::min(h, w);
    if (std::abs(sh.first) >= side || std::abs(sh.second) >= side)
      throw UsageError("shift (" + std::to_string(sh.first) + "," + std::to_string(sh.second) +
                       ") does not fit a " + std::to_string(h) + "x" + std::to_string(w) + " image");
    if (std::find(shifts.begin(), shifts.end(), sh) == shifts.end()) shifts.push_back(sh);
  }
  ChannelMeans means = fill;
  if (means.empty()) means = compute_channel_means({s});
  if (static_cast<int>(means.size()) != s.image.channels()) throw ShapeError("augment: fill/channel mismatch");

  std::vector<TrainingSample> out;
  for (bool flip : cfg.hflip ? std::vector<bool>{false, true} : std::vector<bool>{false})
    for (int deg : rots)
      for (const auto& [dx, dy] : shifts) {
        TrainingSample t;
        const auto [oh, ow] = detail::rotated_size(h, w, deg);
        t.image = ImageTensor(s.image.channels(), oh, ow);
        detail::transform_plane(h, w, flip, deg, dx, dy, [&](int y, int x, bool inside, int sy, int sx) {
          for (int k = 0; k < s.image.channels(); ++k)
            t.image(k, y, x) = inside ? s.image(k, sy, sx) : static_cast<float>(means[k]);
        });
        t.labels = detail::transform_grid(s.labels, flip, deg, dx, dy);
        t.edges = detail::transform_grid(s.edges, flip, deg, dx, dy);
        t.instances = canonicalize_instances(detail::transform_grid(s.instances, flip, deg, dx, dy));
        t.id = s.id;
        if (flip || deg || dx || dy)
          t.id += "~" + std::string(flip ? "f" : "") + "r" + std::to_string(deg) +
                  (dx || dy ? "s" + std::to_string(dx) + "," + std::to_string(dy) : "");
        out.push_back(std::move(t));
      }
  return out;
}

inline std::vector<TrainingSample> augment_all(const std::vector<TrainingSample>& samples,
                                               const AugmentationConfig& cfg, const ChannelMeans& fill = {}) {
  std::vector<TrainingSample> out;
  for (const auto& s : samples) {
    auto a = augment(s, cfg, fill);
    std::move(a.begin(), a.end(), std::back_inserter(out));
  }
  return out;
}

// ---------------------------------------------------------------- synthetic corpus

struct SynthConfig {
  int height = 64;
  int width = 64;
  int min_objects = 3;
  int max_objects = 6;
  double min_radius = 6;
  double max_radius = 11;
  double touching_probability = 0.5;
  double noise = 0.04;  // std of additive noise, fraction of full scale
  unsigned seed = 1;
  int max_attempts = 400;  // per object

  /// Blob radii scaled with the shorter side (defaults are for 64x64), never below 3 px.
  /// Below 32 px the object count shrinks too; under about 24 px placement may fail.
  static SynthConfig for_size(int height, int width) {
    SynthConfig c;
    c.height = height;
    c.width = width;
    const double s = std::min(height, width) / 64.0;
    c.min_radius = std::max(3.0, 6 * s);
    c.max_radius = std::max(c.min_radius, 11 * s);
    if (s < 0.5) {  // radii are at their floor; fewer objects instead
      c.min_objects = 1;
      c.max_objects = std::max(1, static_cast<int>(std::lround(12 * s)));
    }
    return c;
  }

  void validate() const {
    if (height < 8 || width < 8) throw UsageError("synthetic images must be at least 8x8");
    if (min_objects < 1 || max_objects < min_objects) throw UsageError("bad object count range");
    if (!(min_radius >= 3 && max_radius >= min_radius)) throw UsageError("bad blob radius range");
    if (!(touching_probability >= 0 && touching_probability <= 1))
      throw UsageError("touching probability must lie in [0, 1]");
    if (!(noise >= 0)) throw UsageError("noise must be non-negative");
    if (max_attempts < 1) throw UsageError("max_attempts must be positive");
  }
};

inline constexpr std::size_t kMinSynthArea = 20;

namespace detail {

struct Blob {
  double cy, cx, r;
  double a2, p2, a3, p3;  // radial wobble
  double aspect, theta;

  double normalized_distance(double y, double x) const {
    const double dy = y - cy, dx = x - cx;
    const double c = std::cos(theta), s = std::sin(theta);
    const double u = c * dx + s * dy, v = (-s * dx + c * dy) * aspect;
    const double ang = std::atan2(v, u);
    const double rr = r * (1 + a2 * std::cos(2 * ang + p2) + a3 * std::cos(3 * ang + p3));
    return std::hypot(u, v) / rr;
  }
};

}  // namespace detail

/// Image i is generated from seed + i alone.
inline TrainingSample generate_synthetic_one(const SynthConfig& cfg, std::size_t index, int edge_thickness = 2) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed + index);
  std::uniform_real_distribution<double> u01(0, 1);
  auto uni = [&](double a, double b) { return a + (b - a) * u01(rng); };
  const int h = cfg.height, w = cfg.width;
  const int target = cfg.min_objects + static_cast<int>(rng() % (cfg.max_objects - cfg.min_objects + 1));

  InstanceMap inst(h, w, 0);
  std::vector<detail::Blob> blobs;
  std::vector<int> placed_ids;
  auto adjacent_to_other = [&](int y, int x, int id, int reach) {
    for (int yy = std::max(0, y - reach); yy <= std::min(h - 1, y + reach); ++yy)
      for (int xx = std::max(0, x - reach); xx <= std::min(w - 1, x + reach); ++xx) {
        if (reach == 1 && yy != y && xx != x) continue;  // 4-neighbourhood
        const auto v = inst(yy, xx);
        if (v && v != id) return true;
      }
    return false;
  };

  for (int obj = 0; obj < target; ++obj) {
    const auto id = static_cast<std::uint16_t>(obj + 1);
    const bool touch = !blobs.empty() && u01(rng) < cfg.touching_probability;
    bool ok = false;
    for (int attempt = 0; attempt < cfg.max_attempts && !ok; ++attempt) {
      detail::Blob b{};
      b.r = uni(cfg.min_radius, cfg.max_radius);
      b.a2 = uni(0, 0.12);
      b.p2 = uni(0, 6.283);
      b.a3 = uni(0, 0.08);
      b.p3 = uni(0, 6.283);
      b.aspect = uni(1.0, 1.5);
      b.theta = uni(0, 3.1416);
      if (touch) {
        const auto& o = blobs[rng() % blobs.size()];
        const double ang = uni(0, 6.283), d = 0.8 * (o.r + b.r);
        b.cy = o.cy + d * std::sin(ang);
        b.cx = o.cx + d * std::cos(ang);
      } else {
        b.cy = uni(0, h - 1);
        b.cx = uni(0, w - 1);
      }
      // Rasterize onto free pixels only.
      std::vector<std::size_t> pix;
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          if (!inst(y, x) && b.normalized_distance(y, x) <= 1.0) pix.push_back(static_cast<std::size_t>(y) * w + x);
      if (pix.size() < std::max<std::size_t>(kMinSynthArea, static_cast<std::size_t>(1.5 * b.r * b.r))) continue;
      for (auto i : pix) inst.values[i] = id;
      // The new object must be one 4-connected piece.
      std::vector<std::size_t> stack{pix.front()};
      std::vector<bool> seen(inst.size(), false);
      seen[pix.front()] = true;
      std::size_t reached = 0;
      while (!stack.empty()) {
        const auto i = stack.back();
        stack.pop_back();
        ++reached;
        const int y = static_cast<int>(i / w), x = static_cast<int>(i % w);
        const int ny[4] = {y - 1, y + 1, y, y}, nx[4] = {x, x, x - 1, x + 1};
        for (int k = 0; k < 4; ++k) {
          if (!inst.in_bounds(ny[k], nx[k])) continue;
          const auto j = static_cast<std::size_t>(ny[k]) * w + nx[k];
          if (!seen[j] && inst.values[j] == id) {
            seen[j] = true;
            stack.push_back(j);
          }
        }
      }
      bool good = reached == pix.size();
      if (good) {
        bool touches = false, near = false;
        for (auto i : pix) {
          const int y = static_cast<int>(i / w), x = static_cast<int>(i % w);
          touches = touches || adjacent_to_other(y, x, id, 1);
          near = near || adjacent_to_other(y, x, id, 3);
        }
        good = touch ? touches : !near;
      }
      if (good) {
        ok = true;
        blobs.push_back(b);
      } else {
        for (auto i : pix) inst.values[i] = 0;
      }
    }
    if (!ok)
      throw DataError("synthetic sample " + std::to_string(index) + ": could not place object " +
                      std::to_string(obj + 1) + " after " + std::to_string(cfg.max_attempts) + " attempts");
  }
  for (auto a : instance_areas(inst))
    if (a < kMinSynthArea) throw DataError("synthetic sample " + std::to_string(index) + ": object below 20 px");

  // Render: pink stroma, pale lumen, dark nuclear rim along every object boundary.
  const EdgeMap rim = instance_to_edges(inst, 2);
  ImageTensor img(3, h, w);
  const double jitter = uni(-12, 12);
  const double stroma[3] = {215, 160, 195}, lumen[3] = {245, 225, 240}, nuclei[3] = {110, 60, 150};
  std::vector<double> obj_shift(target + 1);
  for (auto& v : obj_shift) v = uni(-10, 10);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const auto id = inst(y, x);
      const double* base = !id ? stroma : (rim(y, x) ? nuclei : lumen);
      for (int k = 0; k < 3; ++k) img(k, y, x) = static_cast<float>(base[k] + jitter + (id ? obj_shift[id] : 0));
    }
  // Light 3x3 blur, then noise.
  ImageTensor blurred = img;
  for (int k = 0; k < 3; ++k)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double s = 0;
        int n = 0;
        for (int yy = std::max(0, y - 1); yy <= std::min(h - 1, y + 1); ++yy)
          for (int xx = std::max(0, x - 1); xx <= std::min(w - 1, x + 1); ++xx, ++n) s += img(k, yy, xx);
        blurred(k, y, x) = static_cast<float>(s / n);
      }
  std::normal_distribution<double> noise(0, cfg.noise * 255);
  for (auto& v : blurred.values()) v = static_cast<float>(std::clamp(std::round(v + noise(rng)), 0.0, 255.0));

  char name[32];
  std::snprintf(name, sizeof name, "syn%05zu", index);
  return make_sample(std::move(blurred), inst, name, edge_thickness);
}

inline std::vector<TrainingSample> generate_synthetic(const SynthConfig& cfg, std::size_t n, int edge_thickness = 2,
                                                      std::size_t first_index = 0) {
  if (n < 1) throw UsageError("synthetic corpus needs at least one sample");
  std::vector<TrainingSample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(generate_synthetic_one(cfg, first_index + i, edge_thickness));
  return out;
}

/// Writes images/<id>.png, annotations/<id>.png (16-bit ids) and manifest.tsv.
inline DatasetManifest write_corpus(const fs::path& dir, const std::vector<TrainingSample>& samples,
                                    Split split = Split::synthetic) {
  std::error_code ec;
  fs::create_directories(dir / "images", ec);
  fs::create_directories(dir / "annotations", ec);
  if (ec) throw DataError("cannot create corpus directory " + dir.string() + ": " + ec.message());
  DatasetManifest m{dir, split, {}};
  for (const auto& s : samples) {
    ManifestEntry e{s.id, fs::path("images") / (s.id + ".png"), fs::path("annotations") / (s.id + ".png")};
    io::write_image((dir / e.image).string(), s.image);
    io::write_instances((dir / e.annotation).string(), s.instances);
    m.entries.push_back(e);
  }
  write_manifest(dir / "manifest.tsv", m.entries);
  return m;
}

}  // namespace dmcs
