#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "sdc/arch.hpp"
#include "sdc/common.hpp"
#include "sdc/image_io.hpp"
#include "sdc/tensor.hpp"

namespace sdc {

enum class DistanceKind { SquaredL2, L2, L1 };

inline DistanceKind distance_from_name(const std::string& s) {
  if (s == "ssd" || s == "squared-l2") return DistanceKind::SquaredL2;
  if (s == "l2") return DistanceKind::L2;
  if (s == "l1" || s == "sad") return DistanceKind::L1;
  fail_argument("unknown distance '" + s + "' (known: ssd, l2, l1)");
}

// Dense full-resolution descriptors for a normalized image.
inline Tensor extract_features(const NetworkSpec& spec, const Parameters& params, const Tensor& img,
                               int threads = 1) {
  return forward(spec, params, img, threads, /*want_cache=*/false).features;
}

// --- feature map distances ---

inline double feature_distance(const Tensor& a, int ya, int xa, const Tensor& b, int yb, int xb, DistanceKind kind) {
  const int D = a.dim(0);
  const std::size_t pa = std::size_t(a.dim(1)) * a.dim(2), pb = std::size_t(b.dim(1)) * b.dim(2);
  const float* va = a.data() + std::size_t(ya) * a.dim(2) + xa;
  const float* vb = b.data() + std::size_t(yb) * b.dim(2) + xb;
  double s = 0.0;
  if (kind == DistanceKind::L1) {
    for (int c = 0; c < D; ++c) s += std::abs(double(va[c * pa]) - double(vb[c * pb]));
    return s;
  }
  for (int c = 0; c < D; ++c) {
    const double d = double(va[c * pa]) - double(vb[c * pb]);
    s += d * d;
  }
  return kind == DistanceKind::SquaredL2 ? s : std::sqrt(s);
}

inline double vector_distance(const std::vector<float>& a, const std::vector<float>& b, DistanceKind kind) {
  require(a.size() == b.size(), ErrorKind::argument, "vector_distance: dimension mismatch");
  double s = 0.0;
  if (kind == DistanceKind::L1) {
    for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(double(a[i]) - double(b[i]));
    return s;
  }
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = double(a[i]) - double(b[i]);
    s += d * d;
  }
  return kind == DistanceKind::SquaredL2 ? s : std::sqrt(s);
}

// --- CENSUS transform ---

// Symmetric census over a win_w x win_h window: one bit per offset pair
// (p, -p), set when I(center+p) < I(center-p). Borders use reflection.
// The default 9x7 window yields 31 bits.
struct CensusMap {
  int h = 0, w = 0;
  int win_w = 9, win_h = 7;
  std::vector<std::uint64_t> bits;

  std::uint64_t at(int y, int x) const { return bits[std::size_t(y) * w + std::size_t(x)]; }
};

inline int reflect_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i = i % period;
  if (i < 0) i += period;
  return i <= n - 1 ? i : period - i;
}

inline CensusMap census_transform(const Tensor& gray, int win_w = 9, int win_h = 7) {
  require(gray.rank() == 3 && gray.dim(0) == 1, ErrorKind::argument, "census_transform: input must be [1,H,W]");
  require(win_w % 2 == 1 && win_h % 2 == 1, ErrorKind::argument, "census_transform: window extents must be odd");
  require(win_w * win_h <= 129, ErrorKind::argument, "census_transform: window too large for 64 bits");
  CensusMap m;
  m.h = gray.dim(1);
  m.w = gray.dim(2);
  m.win_w = win_w;
  m.win_h = win_h;
  m.bits.assign(std::size_t(m.h) * m.w, 0);
  const int hw = win_w / 2, hh = win_h / 2;
  // first half of the window in scan order: these offsets pair with their negations
  std::vector<std::pair<int, int>> offsets;
  for (int dy = -hh; dy <= hh; ++dy)
    for (int dx = -hw; dx <= hw; ++dx)
      if (dy < 0 || (dy == 0 && dx < 0)) offsets.emplace_back(dy, dx);
  for (int y = 0; y < m.h; ++y)
    for (int x = 0; x < m.w; ++x) {
      std::uint64_t b = 0;
      for (std::size_t i = 0; i < offsets.size(); ++i) {
        auto [dy, dx] = offsets[i];
        const float va = gray.at(0, reflect_index(y + dy, m.h), reflect_index(x + dx, m.w));
        const float vb = gray.at(0, reflect_index(y - dy, m.h), reflect_index(x - dx, m.w));
        if (va < vb) b |= std::uint64_t(1) << i;
      }
      m.bits[std::size_t(y) * m.w + std::size_t(x)] = b;
    }
  return m;
}

inline int hamming_distance(std::uint64_t a, std::uint64_t b) { return std::popcount(a ^ b); }

inline Tensor to_grayscale(const Image& img) {
  require(img.rank() == 3, ErrorKind::argument, "to_grayscale: image must be [C,H,W]");
  if (img.dim(0) == 1) return img;
  Tensor g({1, img.dim(1), img.dim(2)});
  const std::size_t plane = std::size_t(img.dim(1)) * img.dim(2);
  for (std::size_t i = 0; i < plane; ++i) {
    float s = 0;
    for (int c = 0; c < img.dim(0); ++c) s += img[std::size_t(c) * plane + i];
    g[i] = s / float(img.dim(0));
  }
  return g;
}

// --- cost functors for the WTA engines ---

struct FeatureCost {
  const Tensor& a;
  const Tensor& b;
  DistanceKind kind = DistanceKind::SquaredL2;
  double operator()(int ya, int xa, int yb, int xb) const { return feature_distance(a, ya, xa, b, yb, xb, kind); }
};

struct CensusCost {
  const CensusMap& a;
  const CensusMap& b;
  double operator()(int ya, int xa, int yb, int xb) const {
    return double(hamming_distance(a.at(ya, xa), b.at(yb, xb)));
  }
};

// SSD between size x size reflected windows, computed on the fly.
struct RawPatchCost {
  const Tensor& a;
  const Tensor& b;
  int size = 9;
  double operator()(int ya, int xa, int yb, int xb) const {
    const int half = size / 2, C = a.dim(0);
    double s = 0.0;
    for (int c = 0; c < C; ++c)
      for (int dy = -half; dy <= half; ++dy)
        for (int dx = -half; dx <= half; ++dx) {
          const double va = a.at(c, reflect_index(ya + dy, a.dim(1)), reflect_index(xa + dx, a.dim(2)));
          const double vb = b.at(c, reflect_index(yb + dy, b.dim(1)), reflect_index(xb + dx, b.dim(2)));
          s += (va - vb) * (va - vb);
        }
    return s;
  }
};

// --- match results ---

struct MatchResult {
  GtKind kind = GtKind::Flow;
  Tensor field;                      // [2,H,W] displacement (u,v); disparity results have v == 0
  Tensor score;                      // [1,H,W] winning distance
  std::vector<std::uint8_t> valid;   // H*W
  double density = std::numeric_limits<double>::quiet_NaN();  // set by density(result, gt)

  int height() const { return field.dim(1); }
  int width() const { return field.dim(2); }
  bool is_valid(int y, int x) const { return valid[std::size_t(y) * std::size_t(width()) + std::size_t(x)] != 0; }
};

namespace detail {

// direction: candidate column = x + direction*d, d in [0, max_disp].
template <typename Cost>
MatchResult stereo_wta_engine(int h, int w, int max_disp, int direction, bool subpixel_refine, const Cost& cost) {
  require(max_disp >= 0, ErrorKind::argument, "stereo matching: max_disp must be >= 0");
  MatchResult r;
  r.kind = GtKind::Disparity;
  r.field = Tensor({2, h, w});
  r.score = Tensor({1, h, w});
  r.valid.assign(std::size_t(h) * w, 0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      int best_d = -1;
      double best = std::numeric_limits<double>::infinity();
      for (int d = 0; d <= max_disp; ++d) {
        const int xb = x + direction * d;
        if (xb < 0 || xb >= w) continue;
        const double c = cost(y, x, y, xb);
        if (c < best) {  // ties keep the smallest d
          best = c;
          best_d = d;
        }
      }
      if (best_d < 0) continue;  // no candidate inside the image
      double d_est = best_d;
      if (subpixel_refine && best_d > 0 && best_d < max_disp && x + direction * (best_d - 1) >= 0 &&
          x + direction * (best_d - 1) < w && x + direction * (best_d + 1) >= 0 &&
          x + direction * (best_d + 1) < w) {
        const double cm = cost(y, x, y, x + direction * (best_d - 1));
        const double cp = cost(y, x, y, x + direction * (best_d + 1));
        const double denom = cm - 2.0 * best + cp;
        if (denom > 1e-12) d_est += 0.5 * (cm - cp) / denom;
      }
      r.field.at(0, y, x) = float(direction * d_est);
      r.field.at(1, y, x) = 0.0f;
      r.score.at(0, y, x) = float(best);
      r.valid[std::size_t(y) * w + std::size_t(x)] = 1;
    }
  return r;
}

template <typename Cost>
MatchResult flow_wta_engine(int h, int w, int radius, const Cost& cost) {
  require(radius >= 0, ErrorKind::argument, "flow matching: radius must be >= 0");
  MatchResult r;
  r.kind = GtKind::Flow;
  r.field = Tensor({2, h, w});
  r.score = Tensor({1, h, w});
  r.valid.assign(std::size_t(h) * w, 1);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      int best_dy = 0, best_dx = 0;
      double best = std::numeric_limits<double>::infinity();
      bool any = false;
      for (int dy = -radius; dy <= radius; ++dy) {
        const int yb = y + dy;
        if (yb < 0 || yb >= h) continue;
        for (int dx = -radius; dx <= radius; ++dx) {
          const int xb = x + dx;
          if (xb < 0 || xb >= w) continue;
          const double c = cost(y, x, yb, xb);
          if (c < best) {  // scan order makes ties resolve to the smallest (dy,dx)
            best = c;
            best_dy = dy;
            best_dx = dx;
            any = true;
          }
        }
      }
      if (!any) {
        r.valid[std::size_t(y) * w + std::size_t(x)] = 0;
        continue;
      }
      r.field.at(0, y, x) = float(best_dx);
      r.field.at(1, y, x) = float(best_dy);
      r.score.at(0, y, x) = float(best);
    }
  return r;
}

}  // namespace detail

// disp(x,y) = argmin over d in [0, max_disp] of distance(featL[.,y,x], featR[.,y,x-d]);
// ties break to the smallest d. Displacement is stored as u = -d.
inline MatchResult stereo_wta(const Tensor& featL, const Tensor& featR, int max_disp,
                              DistanceKind kind = DistanceKind::SquaredL2, bool subpixel_refine = false) {
  require(featL.same_shape(featR), ErrorKind::argument, "stereo_wta: feature maps must have equal extents");
  FeatureCost cost{featL, featR, kind};
  return detail::stereo_wta_engine(featL.dim(1), featL.dim(2), max_disp, -1, subpixel_refine, cost);
}

// Directional variant; direction +1 searches x+d in the second map.
inline MatchResult stereo_wta_dir(const Tensor& featA, const Tensor& featB, int max_disp, int direction,
                                  DistanceKind kind = DistanceKind::SquaredL2, bool subpixel_refine = false) {
  require(featA.same_shape(featB), ErrorKind::argument, "stereo_wta: feature maps must have equal extents");
  require(direction == 1 || direction == -1, ErrorKind::argument, "stereo_wta: direction must be +-1");
  FeatureCost cost{featA, featB, kind};
  return detail::stereo_wta_engine(featA.dim(1), featA.dim(2), max_disp, direction, subpixel_refine, cost);
}

// flow(x,y) = argmin over the (2*radius+1)^2 window in feat2; ties break to
// the lexicographically smallest (dy,dx).
inline MatchResult flow_wta(const Tensor& feat1, const Tensor& feat2, int radius,
                            DistanceKind kind = DistanceKind::SquaredL2) {
  require(feat1.same_shape(feat2), ErrorKind::argument, "flow_wta: feature maps must have equal extents");
  FeatureCost cost{feat1, feat2, kind};
  return detail::flow_wta_engine(feat1.dim(1), feat1.dim(2), radius, cost);
}

// Generic entry points for non-feature descriptors.
template <typename Cost>
MatchResult stereo_wta_cost(int h, int w, int max_disp, int direction, const Cost& cost) {
  return detail::stereo_wta_engine(h, w, max_disp, direction, false, cost);
}

template <typename Cost>
MatchResult flow_wta_cost(int h, int w, int radius, const Cost& cost) {
  return detail::flow_wta_engine(h, w, radius, cost);
}

// Keep a pixel iff ||fwd(x) + bwd(x + fwd(x))|| <= thresh, with the backward
// field sampled at the rounded target position.
inline MatchResult consistency_filter(const MatchResult& fwd, const MatchResult& bwd, double thresh) {
  require(fwd.field.same_shape(bwd.field), ErrorKind::argument, "consistency_filter: result extents differ");
  require(thresh >= 0.0, ErrorKind::argument, "consistency_filter: threshold must be >= 0");
  MatchResult out = fwd;
  const int h = fwd.height(), w = fwd.width();
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (!fwd.is_valid(y, x)) continue;
      const double u = fwd.field.at(0, y, x), v = fwd.field.at(1, y, x);
      const int tx = int(std::lround(x + u)), ty = int(std::lround(y + v));
      bool keep = false;
      if (tx >= 0 && tx < w && ty >= 0 && ty < h && bwd.is_valid(ty, tx)) {
        const double bu = bwd.field.at(0, ty, tx), bv = bwd.field.at(1, ty, tx);
        keep = std::hypot(u + bu, v + bv) <= thresh;
      }
      if (!keep) out.valid[std::size_t(y) * w + std::size_t(x)] = 0;
    }
  return out;
}

// --- metrics ---

enum class Region { All, NonOccluded };

namespace detail {

template <typename Fn>
void for_each_evaluated_pixel(const MatchResult& est, const GroundTruth& gt, Region region, Fn&& fn) {
  require(est.height() == gt.height() && est.width() == gt.width(), ErrorKind::argument,
          "metric: estimate and ground truth extents differ");
  for (int y = 0; y < gt.height(); ++y)
    for (int x = 0; x < gt.width(); ++x) {
      if (!gt.is_valid(y, x) || !est.is_valid(y, x)) continue;
      if (region == Region::NonOccluded && gt.is_occluded(y, x)) continue;
      fn(y, x);
    }
}

}  // namespace detail

inline double endpoint_error(const MatchResult& est, const GroundTruth& gt, int y, int x) {
  auto [du, dv] = gt.displacement(y, x);
  return std::hypot(double(est.field.at(0, y, x)) - du, double(est.field.at(1, y, x)) - dv);
}

inline double epe(const MatchResult& est, const GroundTruth& gt, Region region = Region::All) {
  double sum = 0.0;
  std::size_t n = 0;
  detail::for_each_evaluated_pixel(est, gt, region, [&](int y, int x) {
    sum += endpoint_error(est, gt, y, x);
    ++n;
  });
  if (n == 0) fail_compute("epe: no pixels valid in both estimate and ground truth");
  return sum / double(n);
}

inline double outlier_rate(const MatchResult& est, const GroundTruth& gt, double thresh = 3.0,
                           Region region = Region::All) {
  std::size_t n = 0, bad = 0;
  detail::for_each_evaluated_pixel(est, gt, region, [&](int y, int x) {
    if (endpoint_error(est, gt, y, x) > thresh) ++bad;
    ++n;
  });
  if (n == 0) fail_compute("outlier_rate: no pixels valid in both estimate and ground truth");
  return double(bad) / double(n);
}

inline double density(const MatchResult& est, const GroundTruth& gt, Region region = Region::All) {
  std::size_t gt_valid = 0, covered = 0;
  for (int y = 0; y < gt.height(); ++y)
    for (int x = 0; x < gt.width(); ++x) {
      if (!gt.is_valid(y, x)) continue;
      if (region == Region::NonOccluded && gt.is_occluded(y, x)) continue;
      ++gt_valid;
      if (est.is_valid(y, x)) ++covered;
    }
  if (gt_valid == 0) fail_compute("density: ground truth has no valid pixels");
  return double(covered) / double(gt_valid);
}

// Export of match results: flow as .flo, disparity as PFM with magnitudes.
inline void write_match_result(const std::string& base_path, const MatchResult& r) {
  GroundTruth gt;
  gt.valid = r.valid;
  gt.occluded.assign(r.valid.size(), 0);
  if (r.kind == GtKind::Flow) {
    gt.kind = GtKind::Flow;
    gt.field = r.field;
    write_flo(base_path + ".flo", gt);
  } else {
    gt.kind = GtKind::Disparity;
    gt.field = Tensor({1, r.height(), r.width()});
    for (int y = 0; y < r.height(); ++y)
      for (int x = 0; x < r.width(); ++x) gt.field.at(0, y, x) = std::abs(r.field.at(0, y, x));
    write_pfm(base_path + ".pfm", gt);
  }
  write_mask_pgm(base_path + ".valid.pgm", r.valid, r.height(), r.width());
}

}  // namespace sdc
