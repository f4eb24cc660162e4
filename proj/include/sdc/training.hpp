#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "sdc/arch.hpp"
#include "sdc/common.hpp"
#include "sdc/data.hpp"
#include "sdc/image_io.hpp"

namespace sdc {

struct TrainConfig {
  float tau = 0.2f;    // positive distance threshold
  float margin = 1.0f; // separation between matching and non-matching pairs
  float lr0 = 0.01f;
  float decay_base = 0.7f;
  long decay_every = 100000;
  int batch_size = 32;
  long total_iters = 0;
  std::uint64_t seed = 42;
  std::optional<Activation> activation_override;
  float adam_beta1 = 0.9f;
  float adam_beta2 = 0.999f;
  float adam_eps = 1e-8f;
  int report_every = 100;
  int val_every = 500;

  void validate() const {
    require(tau >= 0.0f, ErrorKind::argument, "train config: tau must be >= 0");
    require(margin > 0.0f, ErrorKind::argument, "train config: margin must be > 0");
    require(lr0 > 0.0f, ErrorKind::argument, "train config: lr0 must be > 0");
    require(decay_base > 0.0f && decay_base <= 1.0f, ErrorKind::argument, "train config: decay_base in (0,1]");
    require(decay_every >= 1, ErrorKind::argument, "train config: decay_every must be >= 1");
    require(batch_size >= 1, ErrorKind::argument, "train config: batch_size must be >= 1");
    require(total_iters >= 0, ErrorKind::argument, "train config: total_iters must be >= 0");
    require(report_every >= 1 && val_every >= 1, ErrorKind::argument, "train config: report cadences must be >= 1");
  }
};

// --- thresholded hinge embedding loss over a patch triplet ---

template <typename S>
struct TripletLossResultT {
  double loss = 0.0;
  double d_pos_sq = 0.0;
  double d_neg_sq = 0.0;
  bool pos_active = false;
  bool neg_active = false;
  std::vector<S> grad_ref, grad_pos, grad_neg;
};

// loss = max(0, ||fr-fp||^2 - tau) + max(0, margin + tau - ||fr-fn||^2)
// Gradients are exact subgradients, zero inside the clamped regions.
template <typename S>
TripletLossResultT<S> hinge_triplet_loss(const std::vector<S>& fr, const std::vector<S>& fp,
                                         const std::vector<S>& fn, double tau, double margin) {
  require(fr.size() == fp.size() && fr.size() == fn.size() && !fr.empty(), ErrorKind::argument,
          "hinge_triplet_loss: feature dimensions differ");
  TripletLossResultT<S> r;
  for (std::size_t i = 0; i < fr.size(); ++i) {
    const double dp = double(fr[i]) - double(fp[i]);
    const double dn = double(fr[i]) - double(fn[i]);
    if (!std::isfinite(dp) || !std::isfinite(dn)) fail_compute("hinge_triplet_loss: non-finite feature");
    r.d_pos_sq += dp * dp;
    r.d_neg_sq += dn * dn;
  }
  r.pos_active = r.d_pos_sq - tau > 0.0;
  r.neg_active = margin + tau - r.d_neg_sq > 0.0;
  r.loss = (r.pos_active ? r.d_pos_sq - tau : 0.0) + (r.neg_active ? margin + tau - r.d_neg_sq : 0.0);
  r.grad_ref.assign(fr.size(), S(0));
  r.grad_pos.assign(fr.size(), S(0));
  r.grad_neg.assign(fr.size(), S(0));
  for (std::size_t i = 0; i < fr.size(); ++i) {
    if (r.pos_active) {
      const S g = S(2) * (fr[i] - fp[i]);
      r.grad_ref[i] += g;
      r.grad_pos[i] -= g;
    }
    if (r.neg_active) {
      const S g = S(2) * (fr[i] - fn[i]);
      r.grad_ref[i] -= g;
      r.grad_neg[i] += g;
    }
  }
  return r;
}

// lr = lr0 * decay_base^(t / decay_every), continuous in t.
inline double lr_at(long t, const TrainConfig& cfg) {
  require(t >= 0, ErrorKind::argument, "lr_at: iteration must be >= 0");
  return double(cfg.lr0) * std::pow(double(cfg.decay_base), double(t) / double(cfg.decay_every));
}

// --- ADAM ---

template <typename S>
struct AdamStateT {
  ParametersT<S> m, v;
  long t = 0;
};

using AdamState = AdamStateT<float>;

template <typename S>
AdamStateT<S> init_adam(const ParametersT<S>& params) {
  return {zeros_like(params), zeros_like(params), 0};
}

// Standard bias-corrected update. Rejects non-finite gradients with the
// offending tensor named.
template <typename S>
void adam_step(ParametersT<S>& params, const ParametersT<S>& grads, AdamStateT<S>& state, double lr,
               const TrainConfig& cfg) {
  require(params.layers.size() == grads.layers.size() && params.layers.size() == state.m.layers.size(),
          ErrorKind::argument, "adam_step: parameter/gradient layout mismatch");
  state.t += 1;
  const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2, eps = cfg.adam_eps;
  const double bc1 = 1.0 - std::pow(b1, double(state.t));
  const double bc2 = 1.0 - std::pow(b2, double(state.t));
  for (std::size_t li = 0; li < params.layers.size(); ++li) {
    auto update = [&](TensorT<S>& p, const TensorT<S>& g, TensorT<S>& m, TensorT<S>& v, const char* what) {
      for (std::size_t i = 0; i < p.numel(); ++i) {
        const double gi = double(g[i]);
        if (!std::isfinite(gi))
          fail_compute("adam_step: non-finite gradient in layer " + std::to_string(li) + " " + what);
        const double mi = b1 * double(m[i]) + (1.0 - b1) * gi;
        const double vi = b2 * double(v[i]) + (1.0 - b2) * gi * gi;
        m[i] = S(mi);
        v[i] = S(vi);
        p[i] = S(double(p[i]) - lr * (mi / bc1) / (std::sqrt(vi / bc2) + eps));
      }
    };
    for (std::size_t b = 0; b < params.layers[li].weights.size(); ++b) {
      update(params.layers[li].weights[b], grads.layers[li].weights[b], state.m.layers[li].weights[b],
             state.v.layers[li].weights[b], "weights");
      update(params.layers[li].biases[b], grads.layers[li].biases[b], state.m.layers[li].biases[b],
             state.v.layers[li].biases[b], "bias");
    }
  }
}

// --- checkpoints ---

struct Checkpoint {
  std::string arch_name;
  std::uint64_t spec_id = 0;
  std::uint64_t iteration = 0;
  float tau = 0.0f;
  float margin = 0.0f;
  Parameters params;
};

enum class CheckpointErrorCode { bad_magic, bad_version, truncated, spec_hash_mismatch, bad_layout };

class CheckpointFormatError : public Error {
 public:
  CheckpointFormatError(CheckpointErrorCode code, const std::string& msg) : Error(ErrorKind::io, msg), code_(code) {}
  CheckpointErrorCode code() const { return code_; }

 private:
  CheckpointErrorCode code_;
};

inline constexpr char kCheckpointMagic[4] = {'S', 'D', 'C', 'D'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  detail::ByteWriter out;
  out.raw(kCheckpointMagic, 4);
  out.u32(kCheckpointVersion);
  out.u32(std::uint32_t(ckpt.arch_name.size()));
  out.text(ckpt.arch_name);
  out.u64(ckpt.spec_id);
  out.u64(ckpt.iteration);
  out.f32(ckpt.tau);
  out.f32(ckpt.margin);
  std::uint32_t count = 0;
  for_each_tensor(ckpt.params, [&](const std::string&, const Tensor&) { ++count; });
  out.u32(count);
  for_each_tensor(ckpt.params, [&](const std::string& name, const Tensor& t) {
    out.u32(std::uint32_t(name.size()));
    out.text(name);
    unsigned char rank = (unsigned char)t.rank();
    out.raw(&rank, 1);
    for (int i = 0; i < t.rank(); ++i) out.u32(std::uint32_t(t.dim(i)));
    for (std::size_t i = 0; i < t.numel(); ++i) out.f32(t[i]);
  });
  detail::write_file(path, out.bytes().data(), out.bytes().size());
}

// Loads and validates magic, version and spec hash. The architecture must be
// one of the registry names; parameter layout is rebuilt from its spec.
inline Checkpoint load_checkpoint(const std::string& path) {
  auto buf = detail::read_file(path);
  detail::ByteReader r(buf, path);
  auto truncated = [&](const char* what) {
    throw CheckpointFormatError(CheckpointErrorCode::truncated,
                                "'" + path + "': truncated checkpoint while reading " + std::string(what));
  };
  char magic[4];
  if (r.remaining() < 4) truncated("magic");
  r.raw(magic, 4, "magic");
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw CheckpointFormatError(CheckpointErrorCode::bad_magic, "'" + path + "': not a checkpoint file");
  if (r.remaining() < 4) truncated("version");
  std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion)
    throw CheckpointFormatError(CheckpointErrorCode::bad_version,
                                "'" + path + "': unsupported checkpoint version " + std::to_string(version));

  Checkpoint ckpt;
  try {
    std::uint32_t name_len = r.u32("name length");
    std::vector<char> name(name_len);
    r.raw(name.data(), name_len, "architecture name");
    ckpt.arch_name.assign(name.begin(), name.end());
    ckpt.spec_id = r.u64("spec hash");
    ckpt.iteration = r.u64("iteration");
    ckpt.tau = r.f32("tau");
    ckpt.margin = r.f32("margin");
  } catch (const Error& e) {
    truncated("header");
  }

  NetworkSpec spec;
  try {
    spec = registry(ckpt.arch_name);
  } catch (const Error&) {
    throw CheckpointFormatError(CheckpointErrorCode::bad_layout,
                                "'" + path + "': unknown architecture '" + ckpt.arch_name + "'");
  }
  if (spec_hash(spec) != ckpt.spec_id)
    throw CheckpointFormatError(CheckpointErrorCode::spec_hash_mismatch,
                                "'" + path + "': spec hash does not match architecture '" + ckpt.arch_name + "'");

  ckpt.params = zeros_like(init<float>(spec, 0));
  std::uint32_t count = 0;
  try {
    count = r.u32("tensor count");
  } catch (const Error&) {
    truncated("tensor count");
  }
  std::uint32_t expected = 0;
  for_each_tensor(ckpt.params, [&](const std::string&, const Tensor&) { ++expected; });
  if (count != expected)
    throw CheckpointFormatError(CheckpointErrorCode::bad_layout,
                                "'" + path + "': tensor count does not match architecture");
  try {
    for_each_tensor(ckpt.params, [&](const std::string& name, Tensor& t) {
      std::uint32_t nl = r.u32("tensor name length");
      std::vector<char> nm(nl);
      r.raw(nm.data(), nl, "tensor name");
      if (std::string(nm.begin(), nm.end()) != name)
        throw CheckpointFormatError(CheckpointErrorCode::bad_layout,
                                    "'" + path + "': unexpected tensor '" + std::string(nm.begin(), nm.end()) + "'");
      unsigned char rank = 0;
      r.raw(&rank, 1, "tensor rank");
      if (int(rank) != t.rank())
        throw CheckpointFormatError(CheckpointErrorCode::bad_layout, "'" + path + "': tensor rank mismatch");
      for (int i = 0; i < t.rank(); ++i)
        if (int(r.u32("tensor dims")) != t.dim(i))
          throw CheckpointFormatError(CheckpointErrorCode::bad_layout, "'" + path + "': tensor shape mismatch");
      for (std::size_t i = 0; i < t.numel(); ++i) t[i] = r.f32("tensor data");
    });
  } catch (const CheckpointFormatError&) {
    throw;
  } catch (const Error&) {
    truncated("tensor data");
  }
  return ckpt;
}

// --- training loop ---

struct TrainLogRow {
  long iter = 0;
  double lr = 0.0;
  double loss = 0.0;          // mean training loss since the previous row (validation loss at iter 0)
  double val_accuracy = 0.0;  // accuracy on the held-out triplets at the last validation point
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<TrainLogRow> rows;
  std::vector<double> iter_losses;  // per-iteration batch means
  bool aborted = false;
  bool interrupted = false;
  std::string abort_reason;
};

namespace detail {

template <typename S>
double validation_stats(const NetworkSpec& spec, const ParametersT<S>& params,
                        const std::vector<PatchTriplet>& val, double tau, double margin, double* mean_loss) {
  if (val.empty()) {
    if (mean_loss) *mean_loss = 0.0;
    return 0.0;
  }
  std::size_t correct = 0;
  double loss_sum = 0.0;
  for (const auto& t : val) {
    auto fr = patch_descriptor(spec, params, t.reference.cast<S>());
    auto fp = patch_descriptor(spec, params, t.positive.cast<S>());
    auto fn = patch_descriptor(spec, params, t.negative.cast<S>());
    auto l = hinge_triplet_loss(fr, fp, fn, tau, margin);
    loss_sum += l.loss;
    if (l.d_pos_sq < l.d_neg_sq) ++correct;  // ties count as failures
  }
  if (mean_loss) *mean_loss = loss_sum / double(val.size());
  return double(correct) / double(val.size());
}

}  // namespace detail

// One iteration: batch_size triplets through three shared-weight passes,
// mean loss over the batch, exact backprop, ADAM with the scheduled rate.
// Deterministic for a fixed seed, config and source.
inline TrainResult train(const NetworkSpec& spec_in, const TrainConfig& cfg, TripletSource& source,
                         const std::vector<PatchTriplet>& val_triplets,
                         const std::atomic<bool>* stop_requested = nullptr) {
  cfg.validate();
  NetworkSpec spec = spec_in;
  if (cfg.activation_override) spec.activation = *cfg.activation_override;
  spec.validate();

  TrainResult res;
  Parameters params = init<float>(spec, cfg.seed);
  AdamState adam = init_adam(params);

  auto make_checkpoint = [&](std::uint64_t iter) {
    return Checkpoint{spec.name, spec_hash(spec), iter, cfg.tau, cfg.margin, params};
  };

  double last_val_acc;
  {
    double val_loss = 0.0;
    last_val_acc = detail::validation_stats(spec, params, val_triplets, cfg.tau, cfg.margin, &val_loss);
    res.rows.push_back({0, lr_at(0, cfg), val_loss, last_val_acc});
  }

  double window_loss = 0.0;
  long window_count = 0;
  res.iter_losses.reserve(std::size_t(cfg.total_iters));
  for (long it = 0; it < cfg.total_iters; ++it) {
    if (stop_requested && stop_requested->load()) {
      res.interrupted = true;
      res.checkpoint = make_checkpoint(std::uint64_t(it));
      return res;
    }
    try {
      Parameters grads = zeros_like(params);
      double batch_loss = 0.0;
      for (int b = 0; b < cfg.batch_size; ++b) {
        PatchTriplet t = source.next();
        auto fr = forward_patch(spec, params, t.reference);
        auto fp = forward_patch(spec, params, t.positive);
        auto fn = forward_patch(spec, params, t.negative);
        auto l = hinge_triplet_loss(fr.feature, fp.feature, fn.feature, cfg.tau, cfg.margin);
        if (!std::isfinite(l.loss)) fail_compute("training loss is non-finite");
        batch_loss += l.loss;
        const float inv_batch = 1.0f / float(cfg.batch_size);
        auto accumulate = [&](const PatchCacheT<float>& cache, std::vector<float>& g) {
          bool nonzero = false;
          for (float v : g) nonzero = nonzero || v != 0.0f;
          if (!nonzero) return;  // clamped hinge: exact zero gradient, skip the pass
          for (auto& v : g) v *= inv_batch;
          Parameters pg = backward_patch(spec, params, cache, g);
          for (std::size_t li = 0; li < grads.layers.size(); ++li)
            for (std::size_t w = 0; w < grads.layers[li].weights.size(); ++w) {
              auto& gw = grads.layers[li].weights[w];
              auto& gb = grads.layers[li].biases[w];
              const auto& sw = pg.layers[li].weights[w];
              const auto& sb = pg.layers[li].biases[w];
              for (std::size_t i = 0; i < gw.numel(); ++i) gw[i] += sw[i];
              for (std::size_t i = 0; i < gb.numel(); ++i) gb[i] += sb[i];
            }
        };
        accumulate(fr.cache, l.grad_ref);
        accumulate(fp.cache, l.grad_pos);
        accumulate(fn.cache, l.grad_neg);
      }
      batch_loss /= double(cfg.batch_size);
      res.iter_losses.push_back(batch_loss);
      window_loss += batch_loss;
      window_count += 1;
      adam_step(params, grads, adam, lr_at(it, cfg), cfg);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::compute) throw;
      res.aborted = true;
      res.abort_reason = e.what();
      res.checkpoint = make_checkpoint(std::uint64_t(it));
      return res;
    }

    const long done = it + 1;
    if (done % cfg.val_every == 0 || done == cfg.total_iters)
      last_val_acc = detail::validation_stats<float>(spec, params, val_triplets, cfg.tau, cfg.margin, nullptr);
    if (done % cfg.report_every == 0 || done == cfg.total_iters) {
      res.rows.push_back({done, lr_at(done, cfg), window_count ? window_loss / double(window_count) : 0.0,
                          last_val_acc});
      window_loss = 0.0;
      window_count = 0;
    }
  }
  res.checkpoint = make_checkpoint(std::uint64_t(cfg.total_iters));
  return res;
}

// --- end-to-end finite difference gradient check ---

namespace detail {

// Re-runs the patch pyramid from `from_layer`, reusing the cached crop of
// that layer's input. Used to make finite differences affordable.
template <typename S>
std::vector<S> resume_patch_forward(const NetworkSpec& spec, const ParametersT<S>& params,
                                    const PatchCacheT<S>& cache, std::size_t from_layer) {
  TensorT<S> cur = cache.branch_inputs[from_layer].back();  // largest crop == full layer input
  for (std::size_t li = from_layer; li < spec.layers.size(); ++li) {
    const std::size_t nb = layer_branch_count(spec.layers[li]);
    std::vector<TensorT<S>> parts;
    parts.reserve(nb);
    const int out_extent = cur.dim(1) - layer_rf_growth(spec.layers[li]);
    for (std::size_t b = 0; b < nb; ++b) {
      ConvParamsT<S> cp = branch_conv(spec, params, li, b, Padding::Valid);
      const int in_extent = out_extent + cp.dilation * (cp.kernel() - 1);
      TensorT<S> cropped = cur.dim(1) == in_extent ? cur : crop_center(cur, in_extent, in_extent);
      parts.push_back(conv2d_forward_impl(cropped, cp, layer_mask(spec.layers[li]), 1));
    }
    TensorT<S> preact = nb == 1 ? std::move(parts[0]) : concat_channels(parts);
    cur = apply_activation(spec, li, preact);
  }
  TensorT<S> out = spec.final_normalization ? linf_normalize(cur, S(kFeatureNormEps)) : cur;
  std::vector<S> f(static_cast<std::size_t>(out.dim(0)));
  for (int c = 0; c < out.dim(0); ++c) f[std::size_t(c)] = out.at(c, 0, 0);
  return f;
}

}  // namespace detail

struct GradientCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

// Compares analytic parameter gradients of the full pipeline (network,
// normalization, loss) against central finite differences on a random
// subsample of parameters.
template <typename S>
GradientCheckResult gradient_check(const NetworkSpec& spec_in, const TrainConfig& cfg, const PatchTriplet& triplet,
                                   double eps, double sample_fraction = 0.01, std::uint64_t sample_seed = 17) {
  cfg.validate();
  NetworkSpec spec = spec_in;
  if (cfg.activation_override) spec.activation = *cfg.activation_override;

  ParametersT<S> params = init<S>(spec, cfg.seed);
  const TensorT<S> pr = triplet.reference.cast<S>();
  const TensorT<S> pp = triplet.positive.cast<S>();
  const TensorT<S> pn = triplet.negative.cast<S>();

  auto fr = forward_patch(spec, params, pr);
  auto fp = forward_patch(spec, params, pp);
  auto fn = forward_patch(spec, params, pn);
  auto l = hinge_triplet_loss(fr.feature, fp.feature, fn.feature, double(cfg.tau), double(cfg.margin));

  ParametersT<S> analytic = zeros_like(params);
  auto accumulate = [&](const PatchCacheT<S>& cache, const std::vector<S>& g) {
    bool nonzero = false;
    for (S v : g) nonzero = nonzero || v != S(0);
    if (!nonzero) return;
    ParametersT<S> pg = backward_patch(spec, params, cache, g);
    for (std::size_t li = 0; li < analytic.layers.size(); ++li)
      for (std::size_t w = 0; w < analytic.layers[li].weights.size(); ++w) {
        for (std::size_t i = 0; i < analytic.layers[li].weights[w].numel(); ++i)
          analytic.layers[li].weights[w][i] += pg.layers[li].weights[w][i];
        for (std::size_t i = 0; i < analytic.layers[li].biases[w].numel(); ++i)
          analytic.layers[li].biases[w][i] += pg.layers[li].biases[w][i];
      }
  };
  accumulate(fr.cache, l.grad_ref);
  accumulate(fp.cache, l.grad_pos);
  accumulate(fn.cache, l.grad_neg);

  auto loss_from_layer = [&](std::size_t li) {
    auto vr = detail::resume_patch_forward(spec, params, fr.cache, li);
    auto vp = detail::resume_patch_forward(spec, params, fp.cache, li);
    auto vn = detail::resume_patch_forward(spec, params, fn.cache, li);
    return hinge_triplet_loss(vr, vp, vn, double(cfg.tau), double(cfg.margin)).loss;
  };

  Rng rng(sample_seed);
  GradientCheckResult out;
  const double floor = sizeof(S) == 4 ? 1e-4 : 1e-8;
  for (std::size_t li = 0; li < params.layers.size(); ++li) {
    auto check_tensor = [&](TensorT<S>& p, const TensorT<S>& a) {
      for (std::size_t i = 0; i < p.numel(); ++i) {
        if (rng.uniform() >= sample_fraction) continue;
        const S saved = p[i];
        p[i] = S(double(saved) + eps);
        const double lp = loss_from_layer(li);
        p[i] = S(double(saved) - eps);
        const double lm = loss_from_layer(li);
        p[i] = saved;
        const double numeric = (lp - lm) / (2.0 * eps);
        const double ana = double(a[i]);
        const double denom = std::max(std::abs(numeric), std::abs(ana));
        const double err = denom < floor ? (std::abs(numeric - ana) > floor ? 1.0 : 0.0)
                                         : std::abs(numeric - ana) / denom;
        out.max_rel_error = std::max(out.max_rel_error, err);
        ++out.checked;
      }
    };
    for (std::size_t w = 0; w < params.layers[li].weights.size(); ++w) {
      check_tensor(params.layers[li].weights[w], analytic.layers[li].weights[w]);
      check_tensor(params.layers[li].biases[w], analytic.layers[li].biases[w]);
    }
  }
  return out;
}

}  // namespace sdc
