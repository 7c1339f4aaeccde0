#pragma once

// Reference implementations and generators shared by the tests. Everything here is
// written the slow, obvious way so it can serve as an oracle.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "dmcs/core.hpp"

namespace dmcs::testing {

/// BFS flood fill, 4-connected, ids in raster order of first pixel.
inline InstanceMap bfs_components(const Grid<std::uint8_t>& mask) {
  InstanceMap out(mask.height, mask.width, 0);
  std::uint16_t next = 0;
  for (int y = 0; y < mask.height; ++y)
    for (int x = 0; x < mask.width; ++x) {
      if (!mask(y, x) || out(y, x)) continue;
      ++next;
      std::vector<std::pair<int, int>> queue{{y, x}};
      out(y, x) = next;
      for (std::size_t q = 0; q < queue.size(); ++q) {
        const auto [cy, cx] = queue[q];
        const int ny[4] = {cy - 1, cy + 1, cy, cy}, nx[4] = {cx, cx, cx - 1, cx + 1};
        for (int k = 0; k < 4; ++k)
          if (mask.in_bounds(ny[k], nx[k]) && mask(ny[k], nx[k]) && !out(ny[k], nx[k])) {
            out(ny[k], nx[k]) = next;
            queue.push_back({ny[k], nx[k]});
          }
      }
    }
  return out;
}

/// True when the two maps induce the same partition of the pixels.
inline bool same_partition(const InstanceMap& a, const InstanceMap& b) {
  if (a.height != b.height || a.width != b.width) return false;
  std::map<std::uint16_t, std::uint16_t> ab, ba;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto x = a.values[i], y = b.values[i];
    if ((x == 0) != (y == 0)) return false;
    if (!x) continue;
    auto [it, ins] = ab.try_emplace(x, y);
    if (!ins && it->second != y) return false;
    auto [jt, jns] = ba.try_emplace(y, x);
    if (!jns && jt->second != x) return false;
  }
  return true;
}

/// Random map with up to `max_objects` rectangles-with-bites, ids shuffled (not canonical).
inline InstanceMap random_instances(std::mt19937_64& rng, int h, int w, int max_objects) {
  InstanceMap m(h, w, 0);
  std::uniform_int_distribution<int> count(0, max_objects);
  const int n = count(rng);
  std::vector<std::uint16_t> ids(n);
  for (int i = 0; i < n; ++i) ids[i] = static_cast<std::uint16_t>(1 + rng() % 60000);
  for (int i = 0; i < n; ++i) {
    const int y0 = static_cast<int>(rng() % h), x0 = static_cast<int>(rng() % w);
    const int hh = 1 + static_cast<int>(rng() % std::max(1, h / 2)), ww = 1 + static_cast<int>(rng() % std::max(1, w / 2));
    for (int y = y0; y < std::min(h, y0 + hh); ++y)
      for (int x = x0; x < std::min(w, x0 + ww); ++x)
        if (rng() % 8) m(y, x) = ids[i];
  }
  return m;
}

inline std::map<std::uint16_t, std::vector<std::pair<int, int>>> pixel_sets(const InstanceMap& m) {
  std::map<std::uint16_t, std::vector<std::pair<int, int>>> out;
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x)
      if (m(y, x)) out[m(y, x)].push_back({y, x});
  return out;
}

inline std::size_t intersection(const InstanceMap& a, std::uint16_t ia, const InstanceMap& b, std::uint16_t ib) {
  std::size_t n = 0;
  for (std::size_t i = 0; i < a.size(); ++i) n += a.values[i] == ia && b.values[i] == ib;
  return n;
}

/// Largest number of one-to-one (gt, pred) pairs with |p & g| >= |g| / 2, by exhaustive search.
inline int brute_force_tp(const InstanceMap& gt, const InstanceMap& pred) {
  const auto gs = pixel_sets(gt), ps = pixel_sets(pred);
  std::vector<std::uint16_t> gid, pid;
  for (const auto& [k, v] : gs) gid.push_back(k);
  for (const auto& [k, v] : ps) pid.push_back(k);
  std::vector<std::vector<bool>> ok(gid.size(), std::vector<bool>(pid.size()));
  for (std::size_t i = 0; i < gid.size(); ++i)
    for (std::size_t j = 0; j < pid.size(); ++j)
      ok[i][j] = 2 * intersection(gt, gid[i], pred, pid[j]) >= gs.at(gid[i]).size() &&
                 intersection(gt, gid[i], pred, pid[j]) > 0;
  std::vector<bool> used(pid.size(), false);
  std::function<int(std::size_t)> best = [&](std::size_t i) -> int {
    if (i == gid.size()) return 0;
    int b = best(i + 1);
    for (std::size_t j = 0; j < pid.size(); ++j)
      if (ok[i][j] && !used[j]) {
        used[j] = true;
        b = std::max(b, 1 + best(i + 1));
        used[j] = false;
      }
    return b;
  };
  return best(0);
}

/// All-pairs symmetric Hausdorff distance between two pixel lists.
inline double brute_hausdorff(const std::vector<std::pair<int, int>>& a, const std::vector<std::pair<int, int>>& b) {
  auto directed = [](const auto& p, const auto& q) {
    double worst = 0;
    for (const auto& [y, x] : p) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& [v, u] : q) best = std::min(best, std::hypot(double(y - v), double(x - u)));
      worst = std::max(worst, best);
    }
    return worst;
  };
  return std::max(directed(a, b), directed(b, a));
}

/// Object Dice / Hausdorff by the textbook definition, pixel lists and plain loops.
template <typename Measure>
double brute_object_measure(const InstanceMap& gt, const InstanceMap& pred, Measure measure, double unmatched_value,
                            bool hausdorff) {
  const auto gs = pixel_sets(gt), ps = pixel_sets(pred);
  const double diag = std::hypot(gt.height, gt.width);
  if (gs.empty() && ps.empty()) return hausdorff ? 0.0 : 1.0;
  if (gs.empty() || ps.empty()) return hausdorff ? diag : 0.0;
  auto side = [&](const InstanceMap& ma, const auto& sa, const InstanceMap& mb, const auto& sb) {
    double total = 0, acc = 0;
    for (const auto& [id, px] : sa) total += px.size();
    std::vector<std::pair<int, int>> all_b;
    for (const auto& [id, px] : sb) all_b.insert(all_b.end(), px.begin(), px.end());
    for (const auto& [id, px] : sa) {
      std::uint16_t best = 0;
      std::size_t best_n = 0;
      for (const auto& [jd, qx] : sb) {
        const auto n = intersection(ma, id, mb, jd);
        // ties: partner whose first pixel comes first in raster order (pixel lists are raster-sorted)
        if (n > best_n || (n == best_n && n > 0 && qx.front() < sb.at(best).front())) {
          best_n = n;
          best = jd;
        }
      }
      double v;
      if (best) v = measure(px, sb.at(best));
      else v = hausdorff ? brute_hausdorff(px, all_b) : unmatched_value;
      acc += px.size() / total * v;
    }
    return acc;
  };
  return 0.5 * (side(gt, gs, pred, ps) + side(pred, ps, gt, gs));
}

inline double brute_object_dice(const InstanceMap& gt, const InstanceMap& pred) {
  auto dice = [](const auto& a, const auto& b) {
    std::set<std::pair<int, int>> sb(b.begin(), b.end());
    std::size_t n = 0;
    for (const auto& p : a) n += sb.count(p);
    return 2.0 * n / (a.size() + b.size());
  };
  return brute_object_measure(gt, pred, dice, 0.0, false);
}

inline double brute_object_hausdorff(const InstanceMap& gt, const InstanceMap& pred) {
  return brute_object_measure(gt, pred, [](const auto& a, const auto& b) { return brute_hausdorff(a, b); }, 0.0,
                              true);
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("dmcs_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace dmcs::testing
