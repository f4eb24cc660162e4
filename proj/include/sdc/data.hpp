#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "sdc/common.hpp"
#include "sdc/image_io.hpp"
#include "sdc/ops.hpp"
#include "sdc/tensor.hpp"

namespace sdc {

// Channel statistics of the training corpus (RGB).
inline constexpr std::array<float, 3> kImageMean = {0.3534f, 0.3448f, 0.3295f};
inline constexpr std::array<float, 3> kImageStd = {0.2492f, 0.2465f, 0.2446f};

// (x - mean[c]) / std[c], per channel.
inline Tensor normalize_image(const Image& img) {
  require(img.rank() == 3 && img.dim(0) == 3, ErrorKind::argument, "normalize_image: image must be [3,H,W]");
  Tensor out(img.shape());
  const std::size_t plane = std::size_t(img.dim(1)) * img.dim(2);
  for (int c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < plane; ++i)
      out[std::size_t(c) * plane + i] = (img[std::size_t(c) * plane + i] - kImageMean[std::size_t(c)]) /
                                        kImageStd[std::size_t(c)];
  return out;
}

inline Tensor denormalize_image(const Tensor& t) {
  require(t.rank() == 3 && t.dim(0) == 3, ErrorKind::argument, "denormalize_image: input must be [3,H,W]");
  Tensor out(t.shape());
  const std::size_t plane = std::size_t(t.dim(1)) * t.dim(2);
  for (int c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < plane; ++i)
      out[std::size_t(c) * plane + i] = t[std::size_t(c) * plane + i] * kImageStd[std::size_t(c)] +
                                        kImageMean[std::size_t(c)];
  return out;
}

// --- negative offset distribution ---

inline constexpr double kOffsetMin = 2.0;
inline constexpr double kOffsetClose = 10.0;
inline constexpr double kOffsetMax = 100.0;
inline constexpr double kCloseRangeProb = 0.75;  // close range drawn 3x more often

// Magnitude in [2,10] with probability 0.75, else (10,100]; uniform within
// the chosen range. Disparity offsets are horizontal with random sign, flow
// offsets have uniform random direction.
inline std::pair<float, float> sample_negative_offset(Rng& rng, GtKind kind) {
  const bool close = rng.uniform() < kCloseRangeProb;
  const double mag = close ? rng.uniform(kOffsetMin, kOffsetClose) : rng.uniform(kOffsetClose, kOffsetMax);
  if (kind == GtKind::Disparity) {
    const double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
    return {float(sign * mag), 0.0f};
  }
  const double a = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
  return {float(mag * std::cos(a)), float(mag * std::sin(a))};
}

// --- patch extraction ---

// size x size patch sampled bilinearly on the reflection-extended image;
// center may be anywhere, including sub-pixel and out of bounds.
inline Tensor extract_patch(const Tensor& img, double center_y, double center_x, int size) {
  require(size >= 1 && size % 2 == 1, ErrorKind::argument, "extract_patch: size must be odd");
  require(img.rank() == 3, ErrorKind::argument, "extract_patch: image must be [C,H,W]");
  const int C = img.dim(0), half = size / 2;
  Tensor patch({C, size, size});
  for (int py = 0; py < size; ++py)
    for (int px = 0; px < size; ++px) {
      auto v = bilinear_sample(img, center_y + py - half, center_x + px - half);
      for (int c = 0; c < C; ++c) patch.at(c, py, px) = v[std::size_t(c)];
    }
  return patch;
}

// --- triplets ---

struct TripletMeta {
  int ref_y = 0, ref_x = 0;       // reference center on the first image
  float disp_u = 0, disp_v = 0;   // ground truth displacement
  float off_u = 0, off_v = 0;     // negative offset relative to the true match
  GtKind kind = GtKind::Flow;
};

struct PatchTriplet {
  Tensor reference, positive, negative;  // normalized units, equal extents
  TripletMeta meta;
};

inline std::vector<std::pair<int, int>> eligible_reference_pixels(const GroundTruth& gt) {
  std::vector<std::pair<int, int>> out;
  const int h = gt.height(), w = gt.width();
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (!gt.is_valid(y, x) || gt.is_occluded(y, x)) continue;
      auto [du, dv] = gt.displacement(y, x);
      const double tx = x + du, ty = y + dv;
      if (tx < 0.0 || tx > w - 1.0 || ty < 0.0 || ty > h - 1.0) continue;
      out.emplace_back(y, x);
    }
  return out;
}

// Reference centers are drawn from valid, non-occluded pixels whose true
// match lies inside the second image. The positive patch sits at the ground
// truth correspondence, the negative at an extra random offset.
inline std::vector<PatchTriplet> sample_triplets(const Image& img1, const Image& img2, const GroundTruth& gt, int n,
                                                 int patch_size, Rng& rng) {
  require(n >= 1, ErrorKind::argument, "sample_triplets: n must be positive");
  require(img1.dim(1) == gt.height() && img1.dim(2) == gt.width(), ErrorKind::argument,
          "sample_triplets: ground truth extents do not match the image");
  auto eligible = eligible_reference_pixels(gt);
  if (eligible.empty()) fail_compute("sample_triplets: no valid non-occluded pixels with in-bounds matches");

  std::vector<PatchTriplet> out;
  out.reserve(std::size_t(n));
  for (int i = 0; i < n; ++i) {
    auto [y, x] = eligible[rng.uniform_int(eligible.size())];
    auto [du, dv] = gt.displacement(y, x);
    auto [ou, ov] = sample_negative_offset(rng, gt.kind);
    PatchTriplet t;
    t.meta = {y, x, du, dv, ou, ov, gt.kind};
    t.reference = normalize_image(extract_patch(img1, y, x, patch_size));
    t.positive = normalize_image(extract_patch(img2, y + dv, x + du, patch_size));
    t.negative = normalize_image(extract_patch(img2, y + dv + ov, x + du + ou, patch_size));
    out.push_back(std::move(t));
  }
  return out;
}

// --- dataset mixing ---

// Weighted source selection with per-source epoch permutations: no item
// repeats within a source until all of its items were used.
class DatasetMix {
 public:
  DatasetMix(std::vector<std::string> source_ids, std::vector<std::size_t> item_counts, std::vector<double> weights)
      : ids_(std::move(source_ids)) {
    require(!ids_.empty(), ErrorKind::argument, "dataset mix: no sources");
    require(ids_.size() == item_counts.size() && ids_.size() == weights.size(), ErrorKind::argument,
            "dataset mix: sources/counts/weights size mismatch");
    double total = 0.0;
    for (double w : weights) {
      require(w > 0.0, ErrorKind::argument, "dataset mix: weights must be positive");
      total += w;
    }
    for (std::size_t i = 0; i < ids_.size(); ++i) {
      require(item_counts[i] >= 1, ErrorKind::argument, "dataset mix: source '" + ids_[i] + "' is empty");
      Source s;
      s.weight = weights[i] / total;
      s.order.resize(item_counts[i]);
      for (std::size_t j = 0; j < item_counts[i]; ++j) s.order[j] = j;
      s.pos = item_counts[i];  // forces a shuffle on first use
      sources_.push_back(std::move(s));
    }
  }

  std::size_t source_count() const { return sources_.size(); }
  double weight(std::size_t i) const { return sources_[i].weight; }
  const std::string& id(std::size_t i) const { return ids_[i]; }

  // -> (source index, item index)
  std::pair<std::size_t, std::size_t> next(Rng& rng) {
    const double u = rng.uniform();
    double acc = 0.0;
    std::size_t pick = sources_.size() - 1;
    for (std::size_t i = 0; i < sources_.size(); ++i) {
      acc += sources_[i].weight;
      if (u < acc) {
        pick = i;
        break;
      }
    }
    Source& s = sources_[pick];
    if (s.pos >= s.order.size()) {
      rng.shuffle(s.order);
      s.pos = 0;
    }
    return {pick, s.order[s.pos++]};
  }

 private:
  struct Source {
    double weight = 0.0;
    std::vector<std::size_t> order;
    std::size_t pos = 0;
  };
  std::vector<std::string> ids_;
  std::vector<Source> sources_;
};

// --- chunk shuffling ---

// Buffers chunk_size upstream items, emits them in random order, repeats.
// The multiset of items is preserved.
template <typename T>
class ChunkShuffler {
 public:
  ChunkShuffler(std::function<std::optional<T>()> upstream, std::size_t chunk_size, Rng rng)
      : upstream_(std::move(upstream)), chunk_size_(chunk_size), rng_(rng) {
    require(chunk_size_ >= 1, ErrorKind::argument, "chunk_shuffle: chunk size must be positive");
  }

  std::optional<T> next() {
    if (pos_ >= buffer_.size()) {
      buffer_.clear();
      pos_ = 0;
      while (buffer_.size() < chunk_size_) {
        auto item = upstream_();
        if (!item) break;
        buffer_.push_back(std::move(*item));
      }
      if (buffer_.empty()) return std::nullopt;
      rng_.shuffle(buffer_);
    }
    return std::move(buffer_[pos_++]);
  }

 private:
  std::function<std::optional<T>()> upstream_;
  std::size_t chunk_size_;
  Rng rng_;
  std::vector<T> buffer_;
  std::size_t pos_ = 0;
};

// --- synthetic scenes ---

struct SceneConfig {
  int width = 128;
  int height = 96;
  GtKind kind = GtKind::Flow;
  double amplitude = 6.0;   // max displacement magnitude in pixels
  int octaves = 4;          // texture detail levels
  double base_spacing = 32; // lattice spacing of the coarsest texture octave
  double persistence = 0.5; // octave amplitude falloff
  double detail = 0.35;     // weight of the finest octaves vs the coarse base
};

namespace detail {

// Value-noise lattice evaluated with smoothstep blending; continuous and
// deterministic, so warped views can be synthesized exactly.
class NoiseLattice {
 public:
  NoiseLattice() = default;
  NoiseLattice(int cells_y, int cells_x, Rng& rng) : cy_(cells_y), cx_(cells_x) {
    values_.resize(std::size_t(cy_) * cx_);
    for (auto& v : values_) v = rng.uniform();
  }

  // grid coordinates in lattice units (clamped to the lattice interior)
  double eval(double gy, double gx) const {
    gy = std::min(std::max(gy, 0.0), double(cy_ - 1) - 1e-9);
    gx = std::min(std::max(gx, 0.0), double(cx_ - 1) - 1e-9);
    int y0 = int(gy), x0 = int(gx);
    double ty = smooth(gy - y0), tx = smooth(gx - x0);
    double v00 = at(y0, x0), v01 = at(y0, x0 + 1), v10 = at(y0 + 1, x0), v11 = at(y0 + 1, x0 + 1);
    return (1 - ty) * ((1 - tx) * v00 + tx * v01) + ty * ((1 - tx) * v10 + tx * v11);
  }

 private:
  static double smooth(double t) { return t * t * (3.0 - 2.0 * t); }
  double at(int y, int x) const { return values_[std::size_t(y) * cx_ + std::size_t(x)]; }
  int cy_ = 0, cx_ = 0;
  std::vector<double> values_;
};

// Multi-octave value noise over pixel coordinates, output roughly in [0,1].
class NoiseField {
 public:
  NoiseField() = default;
  NoiseField(int h, int w, int octaves, double base_spacing, double persistence, Rng& rng) {
    double spacing = base_spacing;
    double amp = 1.0;
    for (int o = 0; o < octaves; ++o) {
      spacing_.push_back(std::max(spacing, 2.0));
      amps_.push_back(amp);
      int cy = int(std::ceil(h / spacing_.back())) + 2;
      int cx = int(std::ceil(w / spacing_.back())) + 2;
      lattices_.emplace_back(cy, cx, rng);
      spacing /= 2.0;
      amp *= persistence;
    }
    norm_ = 0.0;
    for (double a : amps_) norm_ += a;
  }

  double eval(double y, double x) const {
    double s = 0.0;
    for (std::size_t o = 0; o < lattices_.size(); ++o)
      s += amps_[o] * lattices_[o].eval(y / spacing_[o], x / spacing_[o]);
    return s / norm_;
  }

 private:
  std::vector<NoiseLattice> lattices_;
  std::vector<double> spacing_;
  std::vector<double> amps_;
  double norm_ = 1.0;
};

}  // namespace detail

struct SyntheticScene {
  Image img1, img2;
  GroundTruth gt;
};

// First view is a procedural texture; the displacement field is smooth and
// low-frequency; the second view is synthesized by inverting the field per
// pixel (fixed point iteration) and evaluating the texture there, so
// img1(x) == img2(x + d(x)) holds up to resampling error. Occlusions are
// found by forward splatting: a pixel loses where another pixel maps within
// half a pixel of its target with higher priority (larger disparity, or
// larger displacement magnitude for flow).
inline SyntheticScene gen_synthetic_scene(const SceneConfig& cfg, std::uint64_t seed) {
  require(cfg.width >= 8 && cfg.height >= 8, ErrorKind::argument, "gen_synthetic_scene: extents too small");
  require(cfg.amplitude >= 0.0, ErrorKind::argument, "gen_synthetic_scene: amplitude must be non-negative");
  require(cfg.octaves >= 1, ErrorKind::argument, "gen_synthetic_scene: need at least one octave");
  const int H = cfg.height, W = cfg.width;
  Rng rng = Rng(seed).substream("scene");

  // texture: shared coarse base plus per-channel detail
  detail::NoiseField base(H, W, std::max(1, cfg.octaves - 1), cfg.base_spacing, cfg.persistence, rng);
  std::array<detail::NoiseField, 3> chroma;
  for (int c = 0; c < 3; ++c)
    chroma[std::size_t(c)] = detail::NoiseField(H, W, cfg.octaves, cfg.base_spacing / 2.0, cfg.persistence, rng);
  auto texture = [&](int c, double y, double x) {
    double v = (1.0 - cfg.detail) * base.eval(y, x) + cfg.detail * chroma[std::size_t(c)].eval(y, x);
    return 0.1 + 0.8 * v;
  };

  // displacement field, very low frequency
  const double dspacing = std::max(double(std::min(H, W)) / 3.0, 8.0);
  detail::NoiseField fu(H, W, 2, dspacing, 0.5, rng);
  detail::NoiseField fv(H, W, 2, dspacing, 0.5, rng);
  auto disp = [&](double y, double x) -> std::pair<double, double> {
    if (cfg.amplitude == 0.0) return {0.0, 0.0};
    if (cfg.kind == GtKind::Disparity) return {cfg.amplitude * fu.eval(y, x), 0.0};
    return {cfg.amplitude * (2.0 * fu.eval(y, x) - 1.0), cfg.amplitude * (2.0 * fv.eval(y, x) - 1.0)};
  };

  SyntheticScene s;
  s.img1 = Image({3, H, W});
  s.img2 = Image({3, H, W});
  s.gt.kind = cfg.kind;
  s.gt.field = Tensor(cfg.kind == GtKind::Disparity ? std::vector<int>{1, H, W} : std::vector<int>{2, H, W});
  s.gt.valid.assign(std::size_t(H) * W, 1);
  s.gt.occluded.assign(std::size_t(H) * W, 0);

  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      for (int c = 0; c < 3; ++c) s.img1.at(c, y, x) = float(texture(c, y, x));
      auto [du, dv] = disp(y, x);
      s.gt.field.at(0, y, x) = float(du);
      if (cfg.kind == GtKind::Flow) s.gt.field.at(1, y, x) = float(dv);
      // invert the field at (y,x): find src with src + d(src) == (y,x)
      double sy = y, sx = x;
      for (int it = 0; it < 12; ++it) {
        auto [iu, iv] = disp(sy, sx);
        sx = x - iu;
        sy = y - iv;
      }
      for (int c = 0; c < 3; ++c) s.img2.at(c, y, x) = float(texture(c, sy, sx));
    }

  // forward-splat visibility
  struct Splat {
    double ty, tx, priority;
  };
  std::vector<Splat> splats(std::size_t(H) * W);
  std::map<std::pair<int, int>, std::vector<std::size_t>> buckets;
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      auto [du, dv] = s.gt.displacement(y, x);
      const std::size_t idx = std::size_t(y) * W + std::size_t(x);
      const double prio = cfg.kind == GtKind::Disparity ? du : std::hypot(du, dv);
      splats[idx] = {y + double(dv), x + double(du), prio};
      buckets[{int(std::lround(y + double(dv))), int(std::lround(x + double(du)))}].push_back(idx);
    }
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const std::size_t idx = std::size_t(y) * W + std::size_t(x);
      const Splat& a = splats[idx];
      bool occ = false;
      for (int by = -1; by <= 1 && !occ; ++by)
        for (int bx = -1; bx <= 1 && !occ; ++bx) {
          auto it = buckets.find({int(std::lround(a.ty)) + by, int(std::lround(a.tx)) + bx});
          if (it == buckets.end()) continue;
          for (std::size_t other : it->second) {
            if (other == idx) continue;
            const Splat& b = splats[other];
            if (b.priority > a.priority && std::hypot(a.ty - b.ty, a.tx - b.tx) <= 0.5) {
              occ = true;
              break;
            }
          }
        }
      if (occ) s.gt.occluded[idx] = 1;
    }
  return s;
}

// --- manifests ---

// Plain text, one scene per line:
//   source_id weight path_img1 path_img2 path_gt kind
// with '#' comments; kind is "disparity" or "flow". Paths are resolved
// relative to the manifest location. An optional occlusion mask is picked
// up from "<gt-stem>.occ.pgm" next to the ground truth file.
struct ManifestEntry {
  std::string source_id;
  double weight = 1.0;
  std::string img1, img2, gt;
  GtKind kind = GtKind::Flow;
};

struct Manifest {
  std::vector<ManifestEntry> entries;
};

namespace detail {

inline std::string dir_of(const std::string& path) {
  auto pos = path.find_last_of('/');
  return pos == std::string::npos ? std::string(".") : path.substr(0, pos);
}

inline std::string join_path(const std::string& dir, const std::string& rel) {
  if (!rel.empty() && rel[0] == '/') return rel;
  return dir + "/" + rel;
}

inline std::string strip_extension(const std::string& path) {
  auto slash = path.find_last_of('/');
  auto dot = path.find_last_of('.');
  if (dot == std::string::npos || (slash != std::string::npos && dot < slash)) return path;
  return path.substr(0, dot);
}

}  // namespace detail

inline Manifest read_manifest(const std::string& path) {
  auto buf = detail::read_file(path);
  const std::string dir = detail::dir_of(path);
  Manifest m;
  std::istringstream in(std::string(buf.begin(), buf.end()));
  std::string line;
  int lineno = 0;
  std::map<std::string, double> source_weights;
  while (std::getline(in, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    std::istringstream ls(line);
    ManifestEntry e;
    std::string kind;
    if (!(ls >> e.source_id)) continue;  // blank line
    if (!(ls >> e.weight >> e.img1 >> e.img2 >> e.gt >> kind))
      fail_io("'" + path + "' line " + std::to_string(lineno) + ": expected 6 columns");
    require(e.weight > 0.0, ErrorKind::io, "'" + path + "' line " + std::to_string(lineno) + ": weight must be > 0");
    if (kind == "disparity")
      e.kind = GtKind::Disparity;
    else if (kind == "flow")
      e.kind = GtKind::Flow;
    else
      fail_io("'" + path + "' line " + std::to_string(lineno) + ": kind must be 'disparity' or 'flow'");
    auto it = source_weights.find(e.source_id);
    if (it == source_weights.end())
      source_weights[e.source_id] = e.weight;
    else if (it->second != e.weight)
      fail_io("'" + path + "' line " + std::to_string(lineno) + ": source '" + e.source_id +
              "' has inconsistent weights");
    e.img1 = detail::join_path(dir, e.img1);
    e.img2 = detail::join_path(dir, e.img2);
    e.gt = detail::join_path(dir, e.gt);
    m.entries.push_back(std::move(e));
  }
  if (m.entries.empty()) fail_io("'" + path + "': manifest has no entries");
  return m;
}

struct LoadedScene {
  Image img1, img2;
  GroundTruth gt;
};

inline std::string occlusion_sidecar_path(const std::string& gt_path) {
  return detail::strip_extension(gt_path) + ".occ.pgm";
}

inline LoadedScene load_scene(const ManifestEntry& e) {
  LoadedScene s;
  s.img1 = read_ppm(e.img1);
  s.img2 = read_ppm(e.img2);
  s.gt = e.kind == GtKind::Flow ? read_flo(e.gt) : read_pfm(e.gt);
  require(s.gt.height() == s.img1.dim(1) && s.gt.width() == s.img1.dim(2), ErrorKind::io,
          "ground truth '" + e.gt + "' extents do not match image");
  const std::string occ = occlusion_sidecar_path(e.gt);
  if (file_exists(occ)) s.gt.occluded = read_mask_pgm(occ, s.gt.height(), s.gt.width());
  return s;
}

// Deterministic train/validation split over manifest entries: with
// fraction f, every round(1/f)-th entry is held out.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_train_val(std::size_t n,
                                                                                     double val_fraction) {
  require(val_fraction >= 0.0 && val_fraction < 1.0, ErrorKind::argument, "val_fraction must be in [0,1)");
  std::vector<std::size_t> train_ids, val_ids;
  if (val_fraction <= 0.0) {
    for (std::size_t i = 0; i < n; ++i) train_ids.push_back(i);
    return {train_ids, val_ids};
  }
  const std::size_t k = std::max<std::size_t>(2, std::size_t(std::llround(1.0 / val_fraction)));
  for (std::size_t i = 0; i < n; ++i) {
    if (i % k == k - 1)
      val_ids.push_back(i);
    else
      train_ids.push_back(i);
  }
  if (train_ids.empty()) fail_argument("train/val split left no training scenes");
  return {train_ids, val_ids};
}

// --- training triplet stream ---

struct TripletSource {
  virtual ~TripletSource() = default;
  virtual PatchTriplet next() = 0;
};

// Full sampling pipeline: weighted source mixing with per-source epoch
// permutations, a fixed number of triplets per image visit, and chunk
// shuffling across visits.
class TripletStream : public TripletSource {
 public:
  TripletStream(std::vector<const LoadedScene*> scenes, std::vector<std::string> scene_source_ids,
                std::map<std::string, double> source_weights, int patch_size, int triplets_per_image,
                std::size_t chunk_size, Rng rng)
      : scenes_(std::move(scenes)),
        patch_size_(patch_size),
        triplets_per_image_(triplets_per_image),
        rng_(rng),
        shuffler_([this] { return produce(); }, chunk_size, rng.substream("chunk")) {
    require(!scenes_.empty(), ErrorKind::argument, "triplet stream: no scenes");
    require(scene_source_ids.size() == scenes_.size(), ErrorKind::argument, "triplet stream: source id mismatch");
    require(triplets_per_image_ >= 1, ErrorKind::argument, "triplet stream: triplets_per_image must be positive");
    for (const auto* s : scenes_)
      if (eligible_reference_pixels(s->gt).empty())
        fail_compute("triplet stream: a scene has no eligible reference pixels");

    std::vector<std::string> ids;
    std::vector<std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < scenes_.size(); ++i) {
      auto it = std::find(ids.begin(), ids.end(), scene_source_ids[i]);
      if (it == ids.end()) {
        ids.push_back(scene_source_ids[i]);
        groups.emplace_back();
        it = ids.end() - 1;
      }
      groups[std::size_t(it - ids.begin())].push_back(i);
    }
    std::vector<std::size_t> counts;
    std::vector<double> weights;
    for (std::size_t g = 0; g < ids.size(); ++g) {
      counts.push_back(groups[g].size());
      auto w = source_weights.find(ids[g]);
      weights.push_back(w == source_weights.end() ? 1.0 : w->second);
    }
    groups_ = std::move(groups);
    mix_.emplace(std::move(ids), std::move(counts), std::move(weights));
  }

  PatchTriplet next() override {
    auto t = shuffler_.next();
    if (!t) fail_compute("triplet stream: upstream ended");  // streams are infinite by construction
    return std::move(*t);
  }

 private:
  std::optional<PatchTriplet> produce() {
    if (pending_pos_ >= pending_.size()) {
      auto [src, item] = mix_->next(rng_);
      const LoadedScene& s = *scenes_[groups_[src][item]];
      pending_ = sample_triplets(s.img1, s.img2, s.gt, triplets_per_image_, patch_size_, rng_);
      pending_pos_ = 0;
    }
    return std::move(pending_[pending_pos_++]);
  }

  std::vector<const LoadedScene*> scenes_;
  std::vector<std::vector<std::size_t>> groups_;
  std::optional<DatasetMix> mix_;
  int patch_size_;
  int triplets_per_image_;
  Rng rng_;
  std::vector<PatchTriplet> pending_;
  std::size_t pending_pos_ = 0;
  ChunkShuffler<PatchTriplet> shuffler_;
};

}  // namespace sdc
