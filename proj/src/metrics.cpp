#include "topicnet/metrics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>

#include "topicnet/netpbm.hpp"

namespace topicnet::metrics {

namespace fs = std::filesystem;

namespace {

constexpr double kEps = 1e-12;
constexpr double kMachineEps = std::numeric_limits<double>::epsilon();

struct Plane {
  std::size_t h = 0, w = 0;
};

Plane check_pair(const Tensor& map, const Tensor& mask, const char* who) {
  const Shape& a = map.shape();
  const Shape& b = mask.shape();
  if (a != b) throw ShapeError(std::string(who) + ": map " + to_string(a) + " vs mask " + to_string(b));
  if (a.size() == 2) return {a[0], a[1]};
  if (a.size() == 3 && a[0] == 1) return {a[1], a[2]};
  throw ShapeError(std::string(who) + ": expected [H,W] or [1,H,W], got " + to_string(a));
}

// Largest k with k/255 <= v, so the pixel belongs to B(k') for every k' <= k.
int level_of(double v) {
  if (v < 0.0) return -1;
  int k = std::min(255, static_cast<int>(std::floor(v * 255.0)));
  while (k < 255 && static_cast<double>(k + 1) / 255.0 <= v) ++k;
  while (k >= 0 && static_cast<double>(k) / 255.0 > v) --k;
  return k;
}

// Contingency counts of B(k) against T for every threshold.
struct Contingency {
  std::array<double, kThresholds> fg_on{}, bg_on{};  // B=1 & T=1, B=1 & T=0
  double fg = 0.0, n = 0.0;
};

Contingency contingency(const Tensor& map, const Tensor& mask) {
  std::array<double, kThresholds + 1> hf{}, hb{};
  Contingency c;
  for (std::size_t i = 0; i < map.size(); ++i) {
    const bool fg = mask[i] > 0.5;
    if (fg) c.fg += 1.0;
    if (const int k = level_of(map[i]); k >= 0) (fg ? hf : hb)[static_cast<std::size_t>(k)] += 1.0;
  }
  c.n = static_cast<double>(map.size());
  // Slot j holds threshold (j + 1) / 255: pixels whose level is at least j + 1.
  double af = 0.0, ab = 0.0;
  for (std::size_t j = kThresholds; j-- > 0;) {
    af += hf[j + 1];
    ab += hb[j + 1];
    c.fg_on[j] = af;
    c.bg_on[j] = ab;
  }
  return c;
}

double enhanced_alignment(double a, double b, double cnt_c, double d, double n) {
  // a: B1T1, b: B1T0, c: B0T1, d: B0T0.
  const double fg = a + cnt_c;
  if (fg == 0.0) return d / n + cnt_c / n;  // mean(1 - B)
  if (fg == n) return (a + b) / n;         // mean(B)
  const double mb = (a + b) / n, mt = fg / n;
  auto term = [&](double bv, double tv) {
    const double pb = bv - mb, pt = tv - mt;
    const double xi = 2.0 * pb * pt / (pb * pb + pt * pt + kEps);
    return (1.0 + xi) * (1.0 + xi) / 4.0;
  };
  return (a * term(1, 1) + b * term(1, 0) + cnt_c * term(0, 1) + d * term(0, 0)) / n;
}

// Object-level similarity D over the selected pixels, std with the N-1 normaliser.
double object_score(const std::vector<double>& values) {
  if (values.empty()) return 0.0;
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(values.size());
  double sigma = 0.0;
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - mean) * (v - mean);
    sigma = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return 2.0 * mean / (mean * mean + 1.0 + sigma + kEps);
}

double s_object(const Tensor& map, const Tensor& mask) {
  std::vector<double> fg, bg;
  for (std::size_t i = 0; i < map.size(); ++i) {
    if (mask[i] > 0.5) fg.push_back(map[i]);
    else bg.push_back(1.0 - map[i]);
  }
  const double u = static_cast<double>(fg.size()) / static_cast<double>(map.size());
  return u * object_score(fg) + (1.0 - u) * object_score(bg);
}

double region_ssim(const Tensor& map, const Tensor& mask, const Plane& p, std::size_t y0, std::size_t y1,
                   std::size_t x0, std::size_t x1) {
  const double n = static_cast<double>((y1 - y0) * (x1 - x0));
  double mx = 0.0, my = 0.0;
  for (std::size_t y = y0; y < y1; ++y)
    for (std::size_t x = x0; x < x1; ++x) {
      mx += map[y * p.w + x];
      my += mask[y * p.w + x];
    }
  mx /= n;
  my /= n;
  double sxx = 0.0, syy = 0.0, sxy = 0.0;
  for (std::size_t y = y0; y < y1; ++y)
    for (std::size_t x = x0; x < x1; ++x) {
      const double dx = map[y * p.w + x] - mx, dy = mask[y * p.w + x] - my;
      sxx += dx * dx;
      syy += dy * dy;
      sxy += dx * dy;
    }
  const double denom = n - 1.0 + kMachineEps;
  sxx /= denom;
  syy /= denom;
  sxy /= denom;
  const double alpha = 4.0 * mx * my * sxy;
  const double beta = (mx * mx + my * my) * (sxx + syy);
  if (alpha != 0.0) return alpha / (beta + kMachineEps);
  if (beta == 0.0) return 1.0;
  return 0.0;
}

double s_region(const Tensor& map, const Tensor& mask, const Plane& p) {
  // Integer centroid of the mask in 1-based coordinates, rounded; centre when empty.
  double total = 0.0, sx = 0.0, sy = 0.0;
  for (std::size_t y = 0; y < p.h; ++y)
    for (std::size_t x = 0; x < p.w; ++x) {
      const double v = mask[y * p.w + x];
      total += v;
      sx += v * static_cast<double>(x + 1);
      sy += v * static_cast<double>(y + 1);
    }
  std::size_t cx, cy;
  if (total == 0.0) {
    cx = static_cast<std::size_t>(std::round(static_cast<double>(p.w) / 2.0));
    cy = static_cast<std::size_t>(std::round(static_cast<double>(p.h) / 2.0));
  } else {
    cx = static_cast<std::size_t>(std::round(sx / total));
    cy = static_cast<std::size_t>(std::round(sy / total));
  }
  const double area = static_cast<double>(p.w * p.h);
  struct Quadrant {
    std::size_t y0, y1, x0, x1;
  };
  const Quadrant qs[4] = {{0, cy, 0, cx}, {0, cy, cx, p.w}, {cy, p.h, 0, cx}, {cy, p.h, cx, p.w}};
  double score = 0.0;
  for (const auto& q : qs) {
    const std::size_t pixels = (q.y1 - q.y0) * (q.x1 - q.x0);
    if (pixels == 0) continue;
    score += static_cast<double>(pixels) / area * region_ssim(map, mask, p, q.y0, q.y1, q.x0, q.x1);
  }
  return score;
}

std::string fixed6(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace

double mae(const Tensor& map, const Tensor& mask) {
  check_pair(map, mask, "mae");
  double acc = 0.0;
  for (std::size_t i = 0; i < map.size(); ++i) acc += std::abs(map[i] - mask[i]);
  return acc / static_cast<double>(map.size());
}

FMeasures f_measures(const Tensor& map, const Tensor& mask) {
  check_pair(map, mask, "f_measures");
  const Contingency c = contingency(map, mask);
  if (c.fg == 0.0) throw ConfigError("f_measures: mask has no foreground; recall is undefined");
  FMeasures out;
  double sum = 0.0;
  for (std::size_t k = 0; k < kThresholds; ++k) {
    const double tp = c.fg_on[k], on = c.fg_on[k] + c.bg_on[k];
    const double precision = on > 0.0 ? tp / on : 0.0;
    const double recall = tp / c.fg;
    const double denom = kBetaSquared * precision + recall;
    const double f = denom > 0.0 ? (1.0 + kBetaSquared) * precision * recall / denom : 0.0;
    out.f_mu = std::max(out.f_mu, f);
    sum += f;
  }
  out.f_gamma = sum / static_cast<double>(kThresholds);
  return out;
}

double e_measure_max(const Tensor& map, const Tensor& mask) {
  check_pair(map, mask, "e_measure_max");
  const Contingency c = contingency(map, mask);
  double best = 0.0;
  for (std::size_t k = 0; k < kThresholds; ++k) {
    const double a = c.fg_on[k], b = c.bg_on[k];
    const double cc = c.fg - a, d = c.n - c.fg - b;
    best = std::max(best, enhanced_alignment(a, b, cc, d, c.n));
  }
  return best;
}

double s_measure(const Tensor& map, const Tensor& mask) {
  const Plane p = check_pair(map, mask, "s_measure");
  double mean_t = 0.0, mean_m = 0.0;
  for (std::size_t i = 0; i < map.size(); ++i) {
    mean_t += mask[i];
    mean_m += map[i];
  }
  mean_t /= static_cast<double>(map.size());
  mean_m /= static_cast<double>(map.size());
  if (mean_t == 0.0) return 1.0 - mean_m;
  if (mean_t == 1.0) return mean_m;
  const double s = 0.5 * s_object(map, mask) + 0.5 * s_region(map, mask, p);
  return std::clamp(s, 0.0, 1.0);
}

ImageScores score_image(const Tensor& map, const Tensor& mask) {
  ImageScores r;
  r.scores.mae = mae(map, mask);
  r.scores.e_mu = e_measure_max(map, mask);
  r.scores.s_alpha = s_measure(map, mask);
  double fg = 0.0;
  for (double v : mask.data()) fg += v > 0.5;
  if (fg == 0.0) {
    r.has_f = false;
  } else {
    const FMeasures f = f_measures(map, mask);
    r.scores.f_mu = f.f_mu;
    r.scores.f_gamma = f.f_gamma;
  }
  return r;
}

MetricReport aggregate(const std::vector<std::string>& group_names,
                       const std::vector<std::vector<ImageScores>>& per_image) {
  if (group_names.size() != per_image.size()) throw ShapeError("aggregate: group name count mismatch");
  MetricReport report;
  Scores sum;
  std::size_t f_groups = 0, groups = 0;
  for (std::size_t g = 0; g < per_image.size(); ++g) {
    const auto& imgs = per_image[g];
    if (imgs.empty()) {
      report.warnings.push_back("group " + group_names[g] + " has no images; skipped");
      continue;
    }
    GroupScores gs;
    gs.name = group_names[g];
    gs.images = imgs.size();
    std::size_t with_f = 0;
    for (const auto& im : imgs) {
      gs.scores.mae += im.scores.mae;
      gs.scores.e_mu += im.scores.e_mu;
      gs.scores.s_alpha += im.scores.s_alpha;
      if (im.has_f) {
        gs.scores.f_mu += im.scores.f_mu;
        gs.scores.f_gamma += im.scores.f_gamma;
        ++with_f;
      }
    }
    const double n = static_cast<double>(imgs.size());
    gs.scores.mae /= n;
    gs.scores.e_mu /= n;
    gs.scores.s_alpha /= n;
    if (with_f < imgs.size())
      report.warnings.push_back("group " + gs.name + ": " + std::to_string(imgs.size() - with_f) +
                                " image(s) with empty ground truth excluded from F-measures");
    if (with_f > 0) {
      gs.scores.f_mu /= static_cast<double>(with_f);
      gs.scores.f_gamma /= static_cast<double>(with_f);
      sum.f_mu += gs.scores.f_mu;
      sum.f_gamma += gs.scores.f_gamma;
      ++f_groups;
    }
    sum.mae += gs.scores.mae;
    sum.e_mu += gs.scores.e_mu;
    sum.s_alpha += gs.scores.s_alpha;
    ++groups;
    report.groups.push_back(gs);
  }
  if (groups > 0) {
    report.overall.mae = sum.mae / static_cast<double>(groups);
    report.overall.e_mu = sum.e_mu / static_cast<double>(groups);
    report.overall.s_alpha = sum.s_alpha / static_cast<double>(groups);
  }
  if (f_groups > 0) {
    report.overall.f_mu = sum.f_mu / static_cast<double>(f_groups);
    report.overall.f_gamma = sum.f_gamma / static_cast<double>(f_groups);
  }
  return report;
}

std::string MetricReport::csv() const {
  std::string out = "group,F_mu,mae,F_gamma,E_mu,S_alpha\n";
  auto row = [&](const std::string& name, const Scores& s) {
    out += name + "," + fixed6(s.f_mu) + "," + fixed6(s.mae) + "," + fixed6(s.f_gamma) + "," + fixed6(s.e_mu) + "," +
           fixed6(s.s_alpha) + "\n";
  };
  for (const auto& g : groups) row(g.name, g.scores);
  row("overall", overall);
  return out;
}

MetricReport evaluate_dataset(const fs::path& pred_dir, const fs::path& gt_dir) {
  if (!fs::is_directory(gt_dir)) throw IoError("ground-truth directory not found: " + gt_dir.string());
  std::vector<fs::path> group_dirs;
  for (const auto& e : fs::directory_iterator(gt_dir))
    if (e.is_directory() && fs::is_directory(e.path() / "gt")) group_dirs.push_back(e.path());
  std::sort(group_dirs.begin(), group_dirs.end());
  if (group_dirs.empty()) throw IoError("no group directories with gt/ under " + gt_dir.string());
  std::vector<std::string> names;
  std::vector<std::vector<ImageScores>> scores;
  for (const auto& dir : group_dirs) {
    const std::string name = dir.filename().string();
    std::vector<fs::path> masks;
    for (const auto& e : fs::directory_iterator(dir / "gt"))
      if (e.path().extension() == ".pgm") masks.push_back(e.path());
    std::sort(masks.begin(), masks.end());
    std::vector<ImageScores> group;
    for (const auto& m : masks) {
      const fs::path pred = pred_dir / name / m.filename();
      if (!fs::exists(pred)) throw IoError("missing prediction " + pred.string() + " for " + m.string());
      group.push_back(score_image(netpbm::read(pred), netpbm::read(m)));
    }
    names.push_back(name);
    scores.push_back(std::move(group));
  }
  return aggregate(names, scores);
}

}  // namespace topicnet::metrics
