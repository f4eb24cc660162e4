#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "sdc/arch.hpp"
#include "sdc/common.hpp"
#include "sdc/data.hpp"
#include "sdc/matching.hpp"

namespace sdc {

// A patch descriptor with its distance, as used by the accuracy and ROC
// battery.
struct Descriptor {
  std::string name;
  std::function<std::vector<float>(const Tensor& patch)> describe;
  DistanceKind distance = DistanceKind::SquaredL2;
};

inline Descriptor net_descriptor(const NetworkSpec& spec, const Parameters& params, std::string name = "") {
  Descriptor d;
  d.name = name.empty() ? spec.name : std::move(name);
  d.distance = DistanceKind::SquaredL2;
  d.describe = [spec, params](const Tensor& patch) { return patch_descriptor(spec, params, patch); };
  return d;
}

// Census bits of the patch center as a 0/1 vector; squared L2 on such
// vectors equals the Hamming distance.
inline Descriptor census_patch_descriptor(int win_w = 9, int win_h = 7) {
  Descriptor d;
  d.name = "census";
  d.distance = DistanceKind::SquaredL2;
  d.describe = [win_w, win_h](const Tensor& patch) {
    Tensor gray = to_grayscale(patch);
    CensusMap m = census_transform(gray, win_w, win_h);
    const std::uint64_t bits = m.at(patch.dim(1) / 2, patch.dim(2) / 2);
    const int nbits = (win_w * win_h - 1) / 2;
    std::vector<float> v(static_cast<std::size_t>(nbits));
    for (int i = 0; i < nbits; ++i) v[std::size_t(i)] = (bits >> i) & 1 ? 1.0f : 0.0f;
    return v;
  };
  return d;
}

// Flattened center window with SSD distance. A weak baseline.
inline Descriptor raw_patch_descriptor(int size) {
  Descriptor d;
  d.name = "raw-patch";
  d.distance = DistanceKind::SquaredL2;
  d.describe = [size](const Tensor& patch) {
    Tensor crop = patch.dim(1) == size ? patch : crop_center(patch, size, size);
    return crop.vec();
  };
  return d;
}

inline Descriptor constant_descriptor(int dim = 8) {
  Descriptor d;
  d.name = "constant";
  d.distance = DistanceKind::SquaredL2;
  d.describe = [dim](const Tensor&) { return std::vector<float>(std::size_t(dim), 0.5f); };
  return d;
}

// Fraction of triplets with d(f(r),f(p)) < d(f(r),f(n)); ties count as
// failures.
inline double triplet_accuracy(const Descriptor& desc, const std::vector<PatchTriplet>& triplets) {
  require(!triplets.empty(), ErrorKind::argument, "triplet_accuracy: empty triplet set");
  std::size_t correct = 0;
  for (const auto& t : triplets) {
    auto fr = desc.describe(t.reference);
    auto fp = desc.describe(t.positive);
    auto fn = desc.describe(t.negative);
    if (vector_distance(fr, fp, desc.distance) < vector_distance(fr, fn, desc.distance)) ++correct;
  }
  return double(correct) / double(triplets.size());
}

// Positive/negative pair distances of a triplet set under a descriptor.
struct PairDistances {
  std::vector<double> pos, neg;
};

inline PairDistances pair_distances(const Descriptor& desc, const std::vector<PatchTriplet>& triplets) {
  require(!triplets.empty(), ErrorKind::argument, "pair_distances: empty triplet set");
  PairDistances out;
  out.pos.reserve(triplets.size());
  out.neg.reserve(triplets.size());
  for (const auto& t : triplets) {
    auto fr = desc.describe(t.reference);
    out.pos.push_back(vector_distance(fr, desc.describe(t.positive), desc.distance));
    out.neg.push_back(vector_distance(fr, desc.describe(t.negative), desc.distance));
  }
  return out;
}

// --- curves ---

enum class CurveKind { ROC, Robustness, Relative };

struct EvalCurve {
  CurveKind kind = CurveKind::ROC;
  std::vector<double> x, y;
  std::vector<std::uint8_t> defined;  // per point; only ratios can be undefined
  double summary = 0.0;               // AUC for ROC, value at max radius for robustness
};

// Threshold sweep over the sorted union of distances: TPR = P(pos <= t),
// FPR = P(neg <= t). AUC by the trapezoid rule; endpoints (0,0) and (1,1)
// are included.
inline EvalCurve roc_curve(const std::vector<double>& pos, const std::vector<double>& neg) {
  require(!pos.empty() && !neg.empty(), ErrorKind::argument, "roc_curve: empty distance list");
  std::vector<double> ps = pos, ns = neg, thresholds;
  std::sort(ps.begin(), ps.end());
  std::sort(ns.begin(), ns.end());
  thresholds.reserve(ps.size() + ns.size());
  thresholds.insert(thresholds.end(), ps.begin(), ps.end());
  thresholds.insert(thresholds.end(), ns.begin(), ns.end());
  std::sort(thresholds.begin(), thresholds.end());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());

  EvalCurve c;
  c.kind = CurveKind::ROC;
  c.x.push_back(0.0);
  c.y.push_back(0.0);
  std::size_t ip = 0, in = 0;
  for (double t : thresholds) {
    while (ip < ps.size() && ps[ip] <= t) ++ip;
    while (in < ns.size() && ns[in] <= t) ++in;
    c.x.push_back(double(in) / double(ns.size()));  // FPR
    c.y.push_back(double(ip) / double(ps.size()));  // TPR
  }
  if (c.x.back() != 1.0 || c.y.back() != 1.0) {
    c.x.push_back(1.0);
    c.y.push_back(1.0);
  }
  c.defined.assign(c.x.size(), 1);
  double auc = 0.0;
  for (std::size_t i = 1; i < c.x.size(); ++i) auc += (c.x[i] - c.x[i - 1]) * 0.5 * (c.y[i] + c.y[i - 1]);
  c.summary = auc;
  return c;
}

struct RobustnessConfig {
  std::vector<double> radii = {2, 4, 8, 16, 32, 64, 100};
  double exclusion = 2.0;
  std::size_t max_pixels = 2000;
  std::uint64_t seed = 42;
  DistanceKind distance = DistanceKind::SquaredL2;
};

// For each evaluated reference pixel, the true-match descriptor (bilinearly
// sampled at the sub-pixel ground truth position) must beat every target
// pixel within the competitor band (exclusion, R]: a 1-D interval on the
// same row for disparity ground truth, a disc for flow. The curve value at
// R is the fraction of pixels that survive; nested competitor sets make it
// non-increasing in R.
inline EvalCurve robustness_curve(const Tensor& feat_ref, const Tensor& feat_tgt, const GroundTruth& gt,
                                  const RobustnessConfig& cfg) {
  require(!cfg.radii.empty(), ErrorKind::argument, "robustness_curve: no radii");
  for (std::size_t i = 0; i < cfg.radii.size(); ++i) {
    require(cfg.radii[i] >= cfg.exclusion, ErrorKind::argument, "robustness_curve: radius below exclusion");
    if (i > 0)
      require(cfg.radii[i] > cfg.radii[i - 1], ErrorKind::argument, "robustness_curve: radii must increase");
  }
  require(feat_ref.dim(1) == gt.height() && feat_ref.dim(2) == gt.width(), ErrorKind::argument,
          "robustness_curve: feature map extents do not match ground truth");
  require(feat_ref.dim(0) == feat_tgt.dim(0), ErrorKind::argument, "robustness_curve: descriptor dims differ");

  auto eligible = eligible_reference_pixels(gt);
  if (eligible.empty()) fail_compute("robustness_curve: no eligible reference pixels");
  Rng rng = Rng(cfg.seed).substream("robustness");
  if (eligible.size() > cfg.max_pixels) {
    rng.shuffle(eligible);
    eligible.resize(cfg.max_pixels);
  }

  const double rmax = cfg.radii.back();
  const int h = gt.height(), w = gt.width();
  const int D = feat_ref.dim(0);
  std::vector<double> beaten_at(eligible.size(), std::numeric_limits<double>::infinity());

  std::vector<float> true_desc(static_cast<std::size_t>(D));
  for (std::size_t pi = 0; pi < eligible.size(); ++pi) {
    auto [y, x] = eligible[pi];
    auto [du, dv] = gt.displacement(y, x);
    const double ty = y + double(dv), tx = x + double(du);
    auto td = bilinear_sample(feat_tgt, ty, tx);
    for (int c = 0; c < D; ++c) true_desc[std::size_t(c)] = td[std::size_t(c)];

    Tensor ref_col({D, 1, 1});
    for (int c = 0; c < D; ++c) ref_col.at(c, 0, 0) = feat_ref.at(c, y, x);
    Tensor true_col({D, 1, 1}, std::vector<float>(true_desc));
    const double dist_true = feature_distance(ref_col, 0, 0, true_col, 0, 0, cfg.distance);

    double beaten = std::numeric_limits<double>::infinity();
    const int qy_lo = gt.kind == GtKind::Disparity ? int(std::lround(ty)) : std::max(0, int(std::ceil(ty - rmax)));
    const int qy_hi = gt.kind == GtKind::Disparity ? int(std::lround(ty))
                                                   : std::min(h - 1, int(std::floor(ty + rmax)));
    for (int qy = qy_lo; qy <= qy_hi; ++qy) {
      if (qy < 0 || qy >= h) continue;
      for (int qx = std::max(0, int(std::ceil(tx - rmax))); qx <= std::min(w - 1, int(std::floor(tx + rmax)));
           ++qx) {
        const double dist_px = gt.kind == GtKind::Disparity ? std::abs(qx - tx) : std::hypot(qy - ty, qx - tx);
        if (dist_px <= cfg.exclusion || dist_px > rmax) continue;
        if (dist_px >= beaten) continue;  // cannot improve the earliest defeat
        const double d = feature_distance(ref_col, 0, 0, feat_tgt, qy, qx, cfg.distance);
        if (d <= dist_true) beaten = dist_px;  // ties count against the descriptor
      }
    }
    beaten_at[pi] = beaten;
  }

  EvalCurve c;
  c.kind = CurveKind::Robustness;
  for (double r : cfg.radii) {
    std::size_t ok = 0;
    for (double b : beaten_at)
      if (b > r) ++ok;
    c.x.push_back(r);
    c.y.push_back(double(ok) / double(beaten_at.size()));
  }
  c.defined.assign(c.x.size(), 1);
  c.summary = c.y.back();
  return c;
}

// Point-wise ratio curve y_a / y_b on identical radii grids; zero
// denominators leave the point undefined.
inline EvalCurve relative_robustness(const EvalCurve& a, const EvalCurve& b) {
  require(a.x == b.x, ErrorKind::argument, "relative_robustness: radii grids differ");
  EvalCurve c;
  c.kind = CurveKind::Relative;
  c.x = a.x;
  c.y.resize(a.y.size(), 0.0);
  c.defined.assign(a.y.size(), 1);
  for (std::size_t i = 0; i < a.y.size(); ++i) {
    if (b.y[i] == 0.0) {
      c.defined[i] = 0;
      c.y[i] = std::numeric_limits<double>::quiet_NaN();
    } else {
      c.y[i] = a.y[i] / b.y[i];
    }
  }
  c.summary = c.defined.back() ? c.y.back() : std::numeric_limits<double>::quiet_NaN();
  return c;
}

inline std::string curve_kind_name(CurveKind k) {
  switch (k) {
    case CurveKind::ROC: return "roc";
    case CurveKind::Robustness: return "robustness";
    case CurveKind::Relative: return "relative";
  }
  return "?";
}

// CSV: one `kind,x,y` row per defined point, preceded by a comment line
// carrying the configuration.
inline std::string curve_to_csv(const EvalCurve& c, const std::string& config_comment) {
  std::ostringstream os;
  if (!config_comment.empty()) os << "# " << config_comment << "\n";
  os << "kind,x,y\n";
  os.precision(9);
  for (std::size_t i = 0; i < c.x.size(); ++i) {
    if (!c.defined.empty() && !c.defined[i]) continue;
    os << curve_kind_name(c.kind) << "," << c.x[i] << "," << c.y[i] << "\n";
  }
  return os.str();
}

}  // namespace sdc
