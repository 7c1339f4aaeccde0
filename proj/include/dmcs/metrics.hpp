#pragma once

// Object-level evaluation: detection F1, object Dice, object Hausdorff, and the
// rank-sum used to order methods over the six challenge scores.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dmcs/core.hpp"
#include "dmcs/image_io.hpp"

namespace dmcs {

struct ObjectOverlaps {
  std::map<std::uint16_t, std::size_t> gt_area, pred_area;
  std::map<std::pair<std::uint16_t, std::uint16_t>, std::size_t> inter;  // (gt, pred) -> pixels
  std::map<std::uint16_t, std::size_t> gt_first, pred_first;            // raster index of first pixel
};

inline ObjectOverlaps compute_overlaps(const InstanceMap& gt, const InstanceMap& pred) {
  require_same_size(gt, pred, "object overlaps");
  ObjectOverlaps o;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const auto g = gt.values[i], p = pred.values[i];
    if (g && !o.gt_area[g]++) o.gt_first[g] = i;
    if (p && !o.pred_area[p]++) o.pred_first[p] = i;
    if (g && p) ++o.inter[{g, p}];
  }
  return o;
}

struct MatchPair {
  std::uint16_t gt = 0, pred = 0;
  std::size_t intersection = 0;
};

struct MatchResult {
  std::vector<MatchPair> pairs;
  int tp = 0, fp = 0, fn = 0;
};

/// One-to-one matching. A pair qualifies when the prediction covers at least half
/// of the ground-truth object. The matching has maximum cardinality, so the counts
/// do not depend on how ids are numbered; each object prefers larger overlaps.
inline MatchResult match_objects(const InstanceMap& gt, const InstanceMap& pred) {
  const auto ov = compute_overlaps(gt, pred);
  std::vector<std::uint16_t> gids;
  for (const auto& [g, a] : ov.gt_area) gids.push_back(g);
  std::map<std::uint16_t, std::vector<std::pair<std::uint16_t, std::size_t>>> cand;
  for (const auto& [key, n] : ov.inter)
    if (2 * n >= ov.gt_area.at(key.first)) cand[key.first].push_back({key.second, n});
  for (auto& [g, c] : cand)
    std::sort(c.begin(), c.end(), [&](const auto& a, const auto& b) {
      if (a.second != b.second) return a.second > b.second;
      return ov.pred_first.at(a.first) < ov.pred_first.at(b.first);
    });

  std::map<std::uint16_t, std::uint16_t> owner;  // pred -> gt
  std::map<std::uint16_t, bool> seen;
  auto augment = [&](auto&& self, std::uint16_t g) -> bool {
    for (const auto& [p, n] : cand[g]) {
      if (seen[p]) continue;
      seen[p] = true;
      auto it = owner.find(p);
      if (it == owner.end() || self(self, it->second)) {
        owner[p] = g;
        return true;
      }
    }
    return false;
  };
  for (auto g : gids) {
    seen.clear();
    augment(augment, g);
  }

  MatchResult r;
  for (const auto& [p, g] : owner) r.pairs.push_back({g, p, ov.inter.at({g, p})});
  std::sort(r.pairs.begin(), r.pairs.end(), [](const auto& a, const auto& b) { return a.gt < b.gt; });
  r.tp = static_cast<int>(r.pairs.size());
  r.fn = static_cast<int>(ov.gt_area.size()) - r.tp;
  r.fp = static_cast<int>(ov.pred_area.size()) - r.tp;
  return r;
}

/// F1 from counts; 0 whenever precision or recall is undefined or zero.
inline double f1_from_counts(long tp, long fp, long fn) {
  if (tp == 0) return 0.0;
  return 2.0 * tp / (2.0 * tp + fp + fn);
}

inline double f1_score(const MatchResult& m) { return f1_from_counts(m.tp, m.fp, m.fn); }

namespace detail {

// For every object of `a`, the id in `b` with the largest overlap (lower id on ties), or 0.
inline std::map<std::uint16_t, std::uint16_t> best_partner(
    const std::map<std::uint16_t, std::size_t>& area_a,
    const std::map<std::pair<std::uint16_t, std::uint16_t>, std::size_t>& inter,
    const std::map<std::uint16_t, std::size_t>& first_b, bool a_is_gt) {
  // ties go to the partner that appears first in raster order, so ids don't matter
  std::map<std::uint16_t, std::pair<std::uint16_t, std::size_t>> best;
  for (const auto& [key, n] : inter) {
    const auto a = a_is_gt ? key.first : key.second;
    const auto b = a_is_gt ? key.second : key.first;
    auto& cur = best[a];
    if (n > cur.second || (n == cur.second && first_b.at(b) < first_b.at(cur.first))) cur = {b, n};
  }
  std::map<std::uint16_t, std::uint16_t> out;
  for (const auto& [a, area] : area_a) out[a] = best.count(a) ? best[a].first : 0;
  return out;
}

// Exact squared Euclidean distance transform of a point set (1D lower envelopes, per axis).
inline void edt_1d(const double* f, int n, double* d, std::vector<int>& v, std::vector<double>& z) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  v.assign(n, 0);
  z.assign(n + 1, 0);
  int k = 0;
  int first = 0;
  while (first < n && f[first] == inf) ++first;
  if (first == n) {
    std::fill(d, d + n, inf);
    return;
  }
  v[0] = first;
  z[0] = -inf;
  z[1] = inf;
  for (int q = first + 1; q < n; ++q) {
    if (f[q] == inf) continue;
    double s;
    while (true) {
      const int p = v[k];
      s = ((f[q] + double(q) * q) - (f[p] + double(p) * p)) / (2.0 * (q - p));
      if (s <= z[k] && k > 0) --k;
      else break;
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = inf;
  }
  k = 0;
  for (int q = 0; q < n; ++q) {
    while (z[k + 1] < q) ++k;
    const double dq = q - v[k];
    d[q] = dq * dq + f[v[k]];
  }
}

}  // namespace detail

/// Squared distance from every pixel to the nearest pixel where `in_set` is true.
template <typename Pred>
std::vector<double> squared_distance_transform(int h, int w, Pred in_set) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> grid(static_cast<std::size_t>(h) * w, inf);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (in_set(y, x)) grid[static_cast<std::size_t>(y) * w + x] = 0;
  std::vector<int> v;
  std::vector<double> z, f(std::max(h, w)), d(std::max(h, w));
  for (int x = 0; x < w; ++x) {
    for (int y = 0; y < h; ++y) f[y] = grid[static_cast<std::size_t>(y) * w + x];
    detail::edt_1d(f.data(), h, d.data(), v, z);
    for (int y = 0; y < h; ++y) grid[static_cast<std::size_t>(y) * w + x] = d[y];
  }
  for (int y = 0; y < h; ++y) {
    double* row = grid.data() + static_cast<std::size_t>(y) * w;
    std::copy(row, row + w, f.begin());
    detail::edt_1d(f.data(), w, d.data(), v, z);
    std::copy(d.begin(), d.begin() + w, row);
  }
  return grid;
}

/// Symmetric Hausdorff distance between two pixel sets given as predicates.
template <typename PA, typename PB>
double hausdorff_distance(int h, int w, PA in_a, PB in_b) {
  const auto da = squared_distance_transform(h, w, in_a);
  const auto db = squared_distance_transform(h, w, in_b);
  double worst = 0;
  bool any_a = false, any_b = false;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * w + x;
      if (in_a(y, x)) {
        any_a = true;
        worst = std::max(worst, db[i]);
      }
      if (in_b(y, x)) {
        any_b = true;
        worst = std::max(worst, da[i]);
      }
    }
  if (!any_a && !any_b) return 0;
  if (!any_a || !any_b) return std::hypot(h, w);
  return std::sqrt(worst);
}

/// Object-level Dice: each object is compared with its most-overlapping counterpart,
/// weighted by area, averaged over both directions.
inline double object_dice(const InstanceMap& gt, const InstanceMap& pred) {
  const auto ov = compute_overlaps(gt, pred);
  if (ov.gt_area.empty() && ov.pred_area.empty()) return 1.0;
  if (ov.gt_area.empty() || ov.pred_area.empty()) return 0.0;
  auto side = [&](bool a_is_gt) {
    const auto& area_a = a_is_gt ? ov.gt_area : ov.pred_area;
    const auto& area_b = a_is_gt ? ov.pred_area : ov.gt_area;
    const auto partner = detail::best_partner(area_a, ov.inter, a_is_gt ? ov.pred_first : ov.gt_first, a_is_gt);
    double total = 0, acc = 0;
    for (const auto& [a, n] : area_a) total += static_cast<double>(n);
    for (const auto& [a, n] : area_a) {
      const auto b = partner.at(a);
      if (!b) continue;
      const double i = static_cast<double>(ov.inter.at(a_is_gt ? std::pair{a, b} : std::pair{b, a}));
      acc += (n / total) * (2.0 * i / (static_cast<double>(n) + static_cast<double>(area_b.at(b))));
    }
    return acc;
  };
  return 0.5 * (side(true) + side(false));
}

/// Object-level Hausdorff distance. An object with no overlapping counterpart is
/// measured against the whole foreground of the other map; an empty map on one
/// side scores the image diagonal.
inline double object_hausdorff(const InstanceMap& gt, const InstanceMap& pred) {
  const auto ov = compute_overlaps(gt, pred);
  const int h = gt.height, w = gt.width;
  if (ov.gt_area.empty() && ov.pred_area.empty()) return 0.0;
  if (ov.gt_area.empty() || ov.pred_area.empty()) return std::hypot(h, w);
  auto side = [&](bool a_is_gt) {
    const InstanceMap& ma = a_is_gt ? gt : pred;
    const InstanceMap& mb = a_is_gt ? pred : gt;
    const auto& area_a = a_is_gt ? ov.gt_area : ov.pred_area;
    const auto partner = detail::best_partner(area_a, ov.inter, a_is_gt ? ov.pred_first : ov.gt_first, a_is_gt);
    double total = 0, acc = 0;
    for (const auto& [a, n] : area_a) total += static_cast<double>(n);
    for (const auto& [a, n] : area_a) {
      const auto b = partner.at(a);
      auto in_a = [&, a = a](int y, int x) { return ma(y, x) == a; };
      double d;
      if (b) d = hausdorff_distance(h, w, in_a, [&](int y, int x) { return mb(y, x) == b; });
      else d = hausdorff_distance(h, w, in_a, [&](int y, int x) { return mb(y, x) != 0; });
      acc += (n / total) * d;
    }
    return acc;
  };
  return 0.5 * (side(true) + side(false));
}

// ---------------------------------------------------------------- ranking

inline constexpr int kScoreColumns = 6;
inline const std::array<std::string, kScoreColumns> kScoreNames = {"F1_A",   "F1_B",          "Dice_A",
                                                                    "Dice_B", "Hausdorff_A", "Hausdorff_B"};
inline constexpr std::array<bool, kScoreColumns> kHigherIsBetter = {true, true, true, true, false, false};

struct ScoreRow {
  std::string method;
  std::array<double, kScoreColumns> scores{};
  std::optional<std::array<int, kScoreColumns>> published_ranks;
};

struct RankedRow {
  std::string method;
  std::array<double, kScoreColumns> scores{};
  std::array<int, kScoreColumns> ranks{};
  int rank_sum = 0;
};

/// Ranks every column within the given rows (1 is best; ties share the lower rank)
/// and sums them per method. Output is ordered by rank sum, then input order.
inline std::vector<RankedRow> rank_sum(const std::vector<ScoreRow>& rows) {
  if (rows.size() < 2) throw UsageError("ranking needs at least two methods");
  std::vector<RankedRow> out;
  for (const auto& r : rows) {
    for (double v : r.scores)
      if (!std::isfinite(v)) throw DataError("non-finite score for method '" + r.method + "'");
    out.push_back({r.method, r.scores, {}, 0});
  }
  for (int c = 0; c < kScoreColumns; ++c)
    for (auto& r : out) {
      int better = 0;
      for (const auto& o : out)
        if (kHigherIsBetter[c] ? o.scores[c] > r.scores[c] : o.scores[c] < r.scores[c]) ++better;
      r.ranks[c] = better + 1;
      r.rank_sum += r.ranks[c];
    }
  std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.rank_sum < b.rank_sum; });
  return out;
}

/// Sums ranks that were assigned externally (against a larger field of entrants).
inline std::vector<RankedRow> published_rank_sum(const std::vector<ScoreRow>& rows) {
  std::vector<RankedRow> out;
  for (const auto& r : rows) {
    if (!r.published_ranks) throw DataError("no rank columns for method '" + r.method + "'");
    RankedRow rr{r.method, r.scores, *r.published_ranks, 0};
    for (int v : rr.ranks) {
      if (v < 1) throw DataError("rank below 1 for method '" + r.method + "'");
      rr.rank_sum += v;
    }
    out.push_back(rr);
  }
  std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.rank_sum < b.rank_sum; });
  return out;
}

/// Reads a tab-separated score table. Required header columns: method and the six
/// score names; optional <name>_rank columns carry externally assigned ranks.
inline std::vector<ScoreRow> read_score_table(std::istream& in, const std::string& source = "score table") {
  std::string line;
  int lineno = 0;
  std::vector<std::string> header;
  auto split = [](const std::string& s) {
    std::vector<std::string> f;
    std::stringstream ss(s);
    std::string cell;
    while (std::getline(ss, cell, '\t')) f.push_back(cell);
    return f;
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    header = split(line);
    break;
  }
  if (header.empty()) throw DataError(source + ": empty table");
  auto col = [&](const std::string& name) -> int {
    auto it = std::find(header.begin(), header.end(), name);
    return it == header.end() ? -1 : static_cast<int>(it - header.begin());
  };
  const int mcol = col("method");
  if (mcol < 0) throw DataError(source + ": missing column 'method'");
  std::array<int, kScoreColumns> sc{}, rc{};
  bool all_ranks = true;
  for (int c = 0; c < kScoreColumns; ++c) {
    sc[c] = col(kScoreNames[c]);
    if (sc[c] < 0) throw DataError(source + ": missing column '" + kScoreNames[c] + "'");
    rc[c] = col(kScoreNames[c] + "_rank");
    all_ranks = all_ranks && rc[c] >= 0;
  }
  std::vector<ScoreRow> rows;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const auto f = split(line);
    if (f.size() != header.size())
      throw DataError(source + ":" + std::to_string(lineno) + ": expected " + std::to_string(header.size()) +
                      " fields, got " + std::to_string(f.size()));
    ScoreRow r;
    r.method = f[mcol];
    auto num = [&](int i, auto& out) {
      std::istringstream s(f[i]);
      if (!(s >> out) || !(s >> std::ws).eof())
        throw DataError(source + ":" + std::to_string(lineno) + ": bad number '" + f[i] + "'");
    };
    for (int c = 0; c < kScoreColumns; ++c) num(sc[c], r.scores[c]);
    if (all_ranks) {
      std::array<int, kScoreColumns> ranks{};
      for (int c = 0; c < kScoreColumns; ++c) num(rc[c], ranks[c]);
      r.published_ranks = ranks;
    }
    rows.push_back(r);
  }
  return rows;
}

inline std::vector<ScoreRow> read_score_table(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open score table " + path.string());
  return read_score_table(in, path.string());
}

// ---------------------------------------------------------------- per-split evaluation

struct ImageScore {
  std::string id;
  int tp = 0, fp = 0, fn = 0;
  double f1 = 0, dice = 0, hausdorff = 0;
  bool missing_prediction = false;
};

struct SplitScore {
  std::vector<ImageScore> images;
  long tp = 0, fp = 0, fn = 0;
  double f1 = 0;         // from pooled counts
  double dice = 0;       // mean over images
  double hausdorff = 0;  // mean over images
  int missing = 0;
};

inline ImageScore score_image(const std::string& id, const InstanceMap& gt, const InstanceMap* pred) {
  ImageScore s;
  s.id = id;
  InstanceMap empty(gt.height, gt.width, 0);
  const InstanceMap& p = pred ? *pred : empty;
  s.missing_prediction = pred == nullptr;
  const auto m = match_objects(gt, p);
  s.tp = m.tp;
  s.fp = m.fp;
  s.fn = m.fn;
  s.f1 = f1_score(m);
  s.dice = object_dice(gt, p);
  s.hausdorff = object_hausdorff(gt, p);
  return s;
}

inline SplitScore aggregate(std::vector<ImageScore> images) {
  SplitScore s;
  s.images = std::move(images);
  for (const auto& im : s.images) {
    s.tp += im.tp;
    s.fp += im.fp;
    s.fn += im.fn;
    s.dice += im.dice;
    s.hausdorff += im.hausdorff;
    s.missing += im.missing_prediction;
  }
  s.f1 = f1_from_counts(s.tp, s.fp, s.fn);
  if (!s.images.empty()) {
    s.dice /= static_cast<double>(s.images.size());
    s.hausdorff /= static_cast<double>(s.images.size());
  }
  return s;
}

inline void write_split_report(std::ostream& out, const SplitScore& s) {
  out << "image\ttp\tfp\tfn\tf1\tobject_dice\tobject_hausdorff\tnote\n";
  out.precision(6);
  for (const auto& im : s.images)
    out << im.id << '\t' << im.tp << '\t' << im.fp << '\t' << im.fn << '\t' << im.f1 << '\t' << im.dice << '\t'
        << im.hausdorff << '\t' << (im.missing_prediction ? "missing_prediction" : "") << '\n';
  out << "ALL\t" << s.tp << '\t' << s.fp << '\t' << s.fn << '\t' << s.f1 << '\t' << s.dice << '\t' << s.hausdorff
      << '\t' << (s.missing ? std::to_string(s.missing) + " missing" : "") << '\n';
}

/// Scores every ground-truth PNG in `gt_dir` against the same-named file in
/// `pred_dir`. A missing prediction scores as an empty map and is flagged.
inline SplitScore evaluate_split(const std::filesystem::path& pred_dir, const std::filesystem::path& gt_dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(gt_dir)) throw DataError("ground-truth directory " + gt_dir.string() + " does not exist");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(gt_dir))
    if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::vector<ImageScore> scores;
  for (const auto& f : files) {
    const auto gt = io::read_instances(f.string());
    const auto pp = pred_dir / f.filename();
    if (fs::exists(pp)) {
      const auto pred = io::read_instances(pp.string());
      scores.push_back(score_image(f.stem().string(), gt, &pred));
    } else {
      scores.push_back(score_image(f.stem().string(), gt, nullptr));
    }
  }
  return aggregate(std::move(scores));
}

}  // namespace dmcs
