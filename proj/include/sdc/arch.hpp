#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "sdc/common.hpp"
#include "sdc/ops.hpp"
#include "sdc/tensor.hpp"

namespace sdc {

struct SdcBranch {
  int kernel = 3;
  int dilation = 1;
};

// One block of parallel dilated convolutions whose outputs are stacked
// along the channel dimension.
struct SdcBlockSpec {
  std::vector<SdcBranch> branches;  // dilations strictly increasing
  int branch_out_channels = 0;
  bool share_weights = false;

  int out_channels() const { return int(branches.size()) * branch_out_channels; }

  void validate() const {
    require(!branches.empty(), ErrorKind::argument, "sdc block needs at least one branch");
    require(branch_out_channels >= 1, ErrorKind::argument, "sdc block branch_out_channels must be positive");
    for (std::size_t i = 0; i < branches.size(); ++i) {
      require(branches[i].kernel >= 1 && branches[i].kernel % 2 == 1, ErrorKind::argument,
              "sdc branch kernels must be odd");
      require(branches[i].dilation >= 1, ErrorKind::argument, "sdc branch dilation must be positive");
      if (i > 0)
        require(branches[i].dilation > branches[i - 1].dilation, ErrorKind::argument,
                "sdc branch dilations must be strictly increasing");
      if (share_weights)
        require(branches[i].kernel == branches[0].kernel, ErrorKind::argument,
                "shared-weight branches must have equal kernel sizes");
    }
  }
};

struct PlainConvSpec {
  int kernel = 3;
  int out_channels = 0;
  int stride = 1;
  int dilation = 1;
};

struct SparseConvSpec {
  int kernel = 17;
  int out_channels = 0;
  SparseMask mask;
};

using LayerSpec = std::variant<SdcBlockSpec, PlainConvSpec, SparseConvSpec>;

enum class Activation { ELU, ReLU, ReLULinearLast };

inline std::string activation_name(Activation a) {
  switch (a) {
    case Activation::ELU: return "elu";
    case Activation::ReLU: return "relu";
    case Activation::ReLULinearLast: return "relu-linear-last";
  }
  return "?";
}

struct NetworkSpec {
  std::string name;
  int input_channels = 3;
  std::vector<LayerSpec> layers;
  Activation activation = Activation::ELU;
  bool final_normalization = true;

  void validate() const {
    require(!layers.empty(), ErrorKind::argument, "network needs at least one layer");
    require(input_channels >= 1, ErrorKind::argument, "input_channels must be positive");
    for (const auto& l : layers)
      if (const auto* b = std::get_if<SdcBlockSpec>(&l)) b->validate();
  }
};

inline int layer_out_channels(const LayerSpec& l) {
  if (const auto* b = std::get_if<SdcBlockSpec>(&l)) return b->out_channels();
  if (const auto* p = std::get_if<PlainConvSpec>(&l)) return p->out_channels;
  return std::get<SparseConvSpec>(l).out_channels;
}

// How much one layer grows the receptive field: max over branches of d*(k-1).
inline int layer_rf_growth(const LayerSpec& l) {
  if (const auto* b = std::get_if<SdcBlockSpec>(&l)) {
    int g = 0;
    for (const auto& br : b->branches) g = std::max(g, br.dilation * (br.kernel - 1));
    return g;
  }
  if (const auto* p = std::get_if<PlainConvSpec>(&l)) return p->dilation * (p->kernel - 1);
  const auto& s = std::get<SparseConvSpec>(l);
  return s.kernel - 1;
}

inline int layer_in_channels(const NetworkSpec& spec, std::size_t layer_index) {
  return layer_index == 0 ? spec.input_channels : layer_out_channels(spec.layers[layer_index - 1]);
}

// RF = 1 + sum over layers of max-branch d*(k-1). Requires stride 1 throughout.
inline int receptive_field(const NetworkSpec& spec) {
  spec.validate();
  int rf = 1;
  for (const auto& l : spec.layers) {
    if (const auto* p = std::get_if<PlainConvSpec>(&l))
      require(p->stride == 1, ErrorKind::argument, "receptive_field requires stride 1 layers");
    rf += layer_rf_growth(l);
  }
  return rf;
}

struct ParamCount {
  std::uint64_t weights = 0;
  std::uint64_t biases = 0;
  std::uint64_t total() const { return weights + biases; }
};

// Weight-sharing blocks count one kernel; sparse convs count only unmasked cells.
inline ParamCount param_count(const NetworkSpec& spec) {
  spec.validate();
  ParamCount n;
  for (std::size_t li = 0; li < spec.layers.size(); ++li) {
    const std::uint64_t cin = std::uint64_t(layer_in_channels(spec, li));
    const LayerSpec& l = spec.layers[li];
    if (const auto* b = std::get_if<SdcBlockSpec>(&l)) {
      const std::uint64_t per_branch = std::uint64_t(b->branches[0].kernel) * b->branches[0].kernel * cin *
                                       std::uint64_t(b->branch_out_channels);
      const std::uint64_t copies = b->share_weights ? 1 : b->branches.size();
      n.weights += per_branch * copies;
      n.biases += std::uint64_t(b->branch_out_channels) * copies;
    } else if (const auto* p = std::get_if<PlainConvSpec>(&l)) {
      n.weights += std::uint64_t(p->kernel) * p->kernel * cin * std::uint64_t(p->out_channels);
      n.biases += std::uint64_t(p->out_channels);
    } else {
      const auto& s = std::get<SparseConvSpec>(l);
      n.weights += std::uint64_t(s.mask.nonzero_count) * cin * std::uint64_t(s.out_channels);
      n.biases += std::uint64_t(s.out_channels);
    }
  }
  return n;
}

// Union of the dilated tap grids of all branches, scattered into one
// kernel_size x kernel_size mask.
inline SparseMask merged_sparse_mask(int kernel_size, int branch_k, const std::vector<int>& dilations) {
  require(!dilations.empty(), ErrorKind::argument, "merged_sparse_mask: no dilations");
  int dmax = 0;
  for (int d : dilations) {
    require(d >= 1, ErrorKind::argument, "merged_sparse_mask: dilation must be positive");
    dmax = std::max(dmax, d);
  }
  require(branch_k >= 1 && branch_k % 2 == 1, ErrorKind::argument, "merged_sparse_mask: branch kernel must be odd");
  require(kernel_size == dmax * (branch_k - 1) + 1, ErrorKind::argument,
          "merged_sparse_mask: kernel_size must equal max_dilation*(branch_k-1)+1");
  SparseMask m = SparseMask::empty_grid(kernel_size);
  const int c = kernel_size / 2, half = branch_k / 2;
  for (int d : dilations)
    for (int i = 0; i < branch_k; ++i)
      for (int j = 0; j < branch_k; ++j) m.set(c + d * (i - half), c + d * (j - half), true);
  return m;
}

// --- published architecture zoo ---

namespace detail {

inline SdcBlockSpec sdc_block(int branch_out, std::vector<int> dilations, int kernel, bool shared) {
  SdcBlockSpec b;
  for (int d : dilations) b.branches.push_back({kernel, d});
  b.branch_out_channels = branch_out;
  b.share_weights = shared;
  return b;
}

}  // namespace detail

inline const std::vector<std::string>& registry_names() {
  static const std::vector<std::string> names = {"sdc", "tiny", "dilnet", "largenet", "fake-big", "fake-small"};
  return names;
}

inline NetworkSpec registry(const std::string& name) {
  NetworkSpec s;
  s.name = name;
  s.input_channels = 3;
  s.activation = Activation::ELU;
  s.final_normalization = true;
  if (name == "sdc") {
    for (int bo : {16, 16, 32, 64, 32}) s.layers.push_back(detail::sdc_block(bo, {1, 2, 3, 4}, 5, false));
  } else if (name == "tiny") {
    for (int bo : {32, 32, 64, 24}) s.layers.push_back(detail::sdc_block(bo, {1, 2, 3}, 3, true));
  } else if (name == "dilnet") {
    const int outs[] = {64, 64, 128, 128, 128, 256, 128};
    const int dils[] = {1, 2, 3, 4, 3, 2, 1};
    for (int i = 0; i < 7; ++i) s.layers.push_back(PlainConvSpec{7, outs[i], 1, dils[i]});
  } else if (name == "largenet") {
    for (int out : {64, 64, 128, 256, 128}) s.layers.push_back(PlainConvSpec{17, out, 1, 1});
  } else if (name == "fake-big" || name == "fake-small") {
    const SparseMask m = merged_sparse_mask(17, 5, {1, 2, 3, 4});
    std::vector<int> outs = name == "fake-big" ? std::vector<int>{64, 64, 128, 256, 128}
                                               : std::vector<int>{16, 16, 32, 64, 32};
    for (int out : outs) s.layers.push_back(SparseConvSpec{17, out, m});
  } else {
    std::string known;
    for (const auto& n : registry_names()) known += (known.empty() ? "" : ", ") + n;
    fail_argument("unknown architecture '" + name + "' (known: " + known + ")");
  }
  s.validate();
  return s;
}

// Stable identity of a NetworkSpec, stored in checkpoints.
inline std::uint64_t spec_hash(const NetworkSpec& spec) {
  std::ostringstream os;
  os << spec.name << "|in=" << spec.input_channels << "|act=" << activation_name(spec.activation)
     << "|norm=" << (spec.final_normalization ? 1 : 0);
  for (const auto& l : spec.layers) {
    if (const auto* b = std::get_if<SdcBlockSpec>(&l)) {
      os << "|sdc(k=" << b->branches[0].kernel << ",bo=" << b->branch_out_channels
         << ",shared=" << (b->share_weights ? 1 : 0) << ",d=";
      for (std::size_t i = 0; i < b->branches.size(); ++i) os << (i ? "," : "") << b->branches[i].dilation;
      os << ")";
    } else if (const auto* p = std::get_if<PlainConvSpec>(&l)) {
      os << "|conv(k=" << p->kernel << ",out=" << p->out_channels << ",s=" << p->stride << ",d=" << p->dilation
         << ")";
    } else {
      const auto& sp = std::get<SparseConvSpec>(l);
      os << "|sparse(k=" << sp.kernel << ",out=" << sp.out_channels << ",cells=";
      for (auto c : sp.mask.cells) os << (c ? '1' : '0');
      os << ")";
    }
  }
  return fnv1a(os.str());
}

// --- parameters ---

// One entry per layer. Non-shared SDC blocks hold one kernel per branch;
// shared blocks, plain and sparse convolutions hold exactly one.
template <typename S>
struct LayerParamsT {
  std::vector<TensorT<S>> weights;
  std::vector<TensorT<S>> biases;
};

template <typename S>
struct ParametersT {
  std::vector<LayerParamsT<S>> layers;

  bool all_finite() const {
    for (const auto& l : layers) {
      for (const auto& w : l.weights)
        if (!w.all_finite()) return false;
      for (const auto& b : l.biases)
        if (!b.all_finite()) return false;
    }
    return true;
  }

  template <typename T>
  ParametersT<T> cast() const {
    ParametersT<T> out;
    out.layers.resize(layers.size());
    for (std::size_t i = 0; i < layers.size(); ++i) {
      for (const auto& w : layers[i].weights) out.layers[i].weights.push_back(w.template cast<T>());
      for (const auto& b : layers[i].biases) out.layers[i].biases.push_back(b.template cast<T>());
    }
    return out;
  }
};

using Parameters = ParametersT<float>;

template <typename S, typename Fn>
void for_each_tensor(ParametersT<S>& params, Fn&& fn) {
  for (std::size_t li = 0; li < params.layers.size(); ++li) {
    auto& lp = params.layers[li];
    for (std::size_t b = 0; b < lp.weights.size(); ++b) {
      std::string base = "layer" + std::to_string(li) + (lp.weights.size() > 1 ? ".branch" + std::to_string(b) : "");
      fn(base + ".weight", lp.weights[b]);
      fn(base + ".bias", lp.biases[b]);
    }
  }
}

template <typename S, typename Fn>
void for_each_tensor(const ParametersT<S>& params, Fn&& fn) {
  for_each_tensor(const_cast<ParametersT<S>&>(params), [&](const std::string& n, TensorT<S>& t) {
    fn(n, static_cast<const TensorT<S>&>(t));
  });
}

template <typename S>
std::uint64_t params_hash(const ParametersT<S>& params) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for_each_tensor(params, [&](const std::string& name, const TensorT<S>& t) {
    h = fnv1a(name, h);
    h = fnv1a(t.data(), t.numel() * sizeof(S), h);
  });
  return h;
}

// Gradients share the parameter layout.
template <typename S>
ParametersT<S> zeros_like(const ParametersT<S>& p) {
  ParametersT<S> z;
  z.layers.resize(p.layers.size());
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    for (const auto& w : p.layers[i].weights) z.layers[i].weights.emplace_back(w.shape());
    for (const auto& b : p.layers[i].biases) z.layers[i].biases.emplace_back(b.shape());
  }
  return z;
}

// Fan-in scaled init: std = sqrt(2 / (k^2 * C_in)), biases zero. For sparse
// layers the masked cells are zeroed after drawing so the draw sequence does
// not depend on the mask.
template <typename S>
ParametersT<S> init(const NetworkSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng = Rng(seed).substream("init");
  ParametersT<S> params;
  params.layers.resize(spec.layers.size());
  for (std::size_t li = 0; li < spec.layers.size(); ++li) {
    const int cin = layer_in_channels(spec, li);
    const LayerSpec& l = spec.layers[li];
    auto draw_kernel = [&](int out, int k, const SparseMask* mask) {
      TensorT<S> w({out, cin, k, k});
      const double std_dev = std::sqrt(2.0 / (double(k) * k * cin));
      for (std::size_t i = 0; i < w.numel(); ++i) w[i] = S(rng.normal() * std_dev);
      if (mask) {
        for (int o = 0; o < out; ++o)
          for (int c = 0; c < cin; ++c)
            for (int i = 0; i < k; ++i)
              for (int j = 0; j < k; ++j)
                if (!mask->at(i, j)) w.at4(o, c, i, j) = S(0);
      }
      return w;
    };
    if (const auto* b = std::get_if<SdcBlockSpec>(&l)) {
      const std::size_t copies = b->share_weights ? 1 : b->branches.size();
      for (std::size_t i = 0; i < copies; ++i) {
        params.layers[li].weights.push_back(draw_kernel(b->branch_out_channels, b->branches[0].kernel, nullptr));
        params.layers[li].biases.emplace_back(std::vector<int>{b->branch_out_channels});
      }
    } else if (const auto* p = std::get_if<PlainConvSpec>(&l)) {
      params.layers[li].weights.push_back(draw_kernel(p->out_channels, p->kernel, nullptr));
      params.layers[li].biases.emplace_back(std::vector<int>{p->out_channels});
    } else {
      const auto& sp = std::get<SparseConvSpec>(l);
      params.layers[li].weights.push_back(draw_kernel(sp.out_channels, sp.kernel, &sp.mask));
      params.layers[li].biases.emplace_back(std::vector<int>{sp.out_channels});
    }
  }
  return params;
}

namespace detail {

template <typename S>
void check_params_shape(const NetworkSpec& spec, const ParametersT<S>& params) {
  require(params.layers.size() == spec.layers.size(), ErrorKind::argument,
          "parameters do not match spec layer count");
}

// Convolution parameters for one branch of one layer.
template <typename S>
ConvParamsT<S> branch_conv(const NetworkSpec& spec, const ParametersT<S>& params, std::size_t li, std::size_t branch,
                           Padding pad) {
  const LayerSpec& l = spec.layers[li];
  const auto& lp = params.layers[li];
  ConvParamsT<S> cp;
  cp.padding = pad;
  cp.stride = 1;
  if (const auto* b = std::get_if<SdcBlockSpec>(&l)) {
    const std::size_t wi = b->share_weights ? 0 : branch;
    cp.weights = lp.weights[wi];
    cp.bias = lp.biases[wi];
    cp.dilation = b->branches[branch].dilation;
  } else if (const auto* p = std::get_if<PlainConvSpec>(&l)) {
    cp.weights = lp.weights[0];
    cp.bias = lp.biases[0];
    cp.stride = p->stride;
    cp.dilation = p->dilation;
  } else {
    cp.weights = lp.weights[0];
    cp.bias = lp.biases[0];
    cp.dilation = 1;
  }
  return cp;
}

inline std::size_t layer_branch_count(const LayerSpec& l) {
  if (const auto* b = std::get_if<SdcBlockSpec>(&l)) return b->branches.size();
  return 1;
}

inline const SparseMask* layer_mask(const LayerSpec& l) {
  if (const auto* s = std::get_if<SparseConvSpec>(&l)) return &s->mask;
  return nullptr;
}

inline bool layer_is_linear(const NetworkSpec& spec, std::size_t li) {
  return spec.activation == Activation::ReLULinearLast && li + 1 == spec.layers.size();
}

template <typename S>
TensorT<S> apply_activation(const NetworkSpec& spec, std::size_t li, const TensorT<S>& preact) {
  if (layer_is_linear(spec, li)) return preact;
  if (spec.activation == Activation::ELU) return elu(preact, S(1));
  return relu(preact);
}

template <typename S>
TensorT<S> activation_backward(const NetworkSpec& spec, std::size_t li, const TensorT<S>& preact,
                               const TensorT<S>& grad) {
  if (layer_is_linear(spec, li)) return grad;
  if (spec.activation == Activation::ELU) return elu_backward(preact, grad, S(1));
  return relu_backward(preact, grad);
}

}  // namespace detail

inline constexpr double kFeatureNormEps = 1e-8;

template <typename S>
struct LayerCacheT {
  TensorT<S> input;    // input seen by this layer (full map or pyramid crop)
  TensorT<S> preact;   // stacked branch outputs before activation
};

template <typename S>
struct ForwardCacheT {
  std::uint64_t spec_id = 0;
  bool patch_mode = false;
  std::vector<LayerCacheT<S>> layers;
  TensorT<S> final_act;  // activated output of the last layer, before normalization
};

template <typename S>
struct ForwardResultT {
  TensorT<S> features;
  ForwardCacheT<S> cache;
};

// Dense forward with Same padding everywhere; spatial extents are preserved.
template <typename S>
ForwardResultT<S> forward(const NetworkSpec& spec, const ParametersT<S>& params, const TensorT<S>& input,
                          int threads = 1, bool want_cache = true) {
  spec.validate();
  detail::check_params_shape(spec, params);
  require(input.rank() == 3 && input.dim(0) == spec.input_channels, ErrorKind::argument,
          "network input must be [" + std::to_string(spec.input_channels) + ",H,W]");
  if (!params.all_finite()) fail_compute("forward: parameters contain non-finite values");

  ForwardResultT<S> res;
  res.cache.spec_id = spec_hash(spec);
  res.cache.patch_mode = false;
  TensorT<S> cur = input;
  for (std::size_t li = 0; li < spec.layers.size(); ++li) {
    const std::size_t nb = detail::layer_branch_count(spec.layers[li]);
    std::vector<TensorT<S>> parts;
    parts.reserve(nb);
    for (std::size_t b = 0; b < nb; ++b) {
      ConvParamsT<S> cp = detail::branch_conv(spec, params, li, b, Padding::Same);
      const SparseMask* mask = detail::layer_mask(spec.layers[li]);
      parts.push_back(conv2d_forward_impl(cur, cp, mask, threads));
    }
    TensorT<S> preact = nb == 1 ? std::move(parts[0]) : concat_channels(parts);
    TensorT<S> act = detail::apply_activation(spec, li, preact);
    if (want_cache) res.cache.layers.push_back({std::move(cur), std::move(preact)});
    cur = std::move(act);
  }
  if (spec.final_normalization) {
    if (want_cache) res.cache.final_act = cur;
    res.features = linf_normalize(cur, S(kFeatureNormEps));
  } else {
    if (want_cache) res.cache.final_act = cur;
    res.features = std::move(cur);
  }
  return res;
}

// Backward through the dense path. Returns parameter gradients in the
// Parameters layout; shared blocks accumulate all branch contributions
// into their single kernel.
template <typename S>
ParametersT<S> backward(const NetworkSpec& spec, const ParametersT<S>& params, const ForwardCacheT<S>& cache,
                        const TensorT<S>& grad_features) {
  detail::check_params_shape(spec, params);
  require(cache.spec_id == spec_hash(spec) && cache.layers.size() == spec.layers.size() && !cache.patch_mode,
          ErrorKind::argument, "backward: cache does not match spec/forward mode");

  ParametersT<S> grads = zeros_like(params);
  TensorT<S> grad = spec.final_normalization
                        ? linf_normalize_backward(cache.final_act, S(kFeatureNormEps), grad_features)
                        : grad_features;
  for (std::size_t li = spec.layers.size(); li-- > 0;) {
    const auto& lc = cache.layers[li];
    require(grad.same_shape(lc.preact), ErrorKind::argument, "backward: gradient shape does not match cache");
    grad = detail::activation_backward(spec, li, lc.preact, grad);

    const std::size_t nb = detail::layer_branch_count(spec.layers[li]);
    std::vector<int> counts(nb, layer_out_channels(spec.layers[li]) / int(nb));
    std::vector<TensorT<S>> branch_grads =
        nb == 1 ? std::vector<TensorT<S>>{std::move(grad)} : split_channels_backward(grad, counts);

    TensorT<S> grad_in(lc.input.shape());
    const bool want_gi = li > 0;
    const auto* blk = std::get_if<SdcBlockSpec>(&spec.layers[li]);
    for (std::size_t b = 0; b < nb; ++b) {
      ConvParamsT<S> cp = detail::branch_conv(spec, params, li, b, Padding::Same);
      const SparseMask* mask = detail::layer_mask(spec.layers[li]);
      ConvGradsT<S> cg = conv2d_backward_impl(lc.input, cp, branch_grads[b], mask, want_gi);
      const std::size_t wi = (blk && blk->share_weights) ? 0 : b;
      auto& gw = grads.layers[li].weights[wi];
      auto& gb = grads.layers[li].biases[wi];
      for (std::size_t i = 0; i < gw.numel(); ++i) gw[i] += cg.weights[i];
      for (std::size_t i = 0; i < gb.numel(); ++i) gb[i] += cg.bias[i];
      if (want_gi)
        for (std::size_t i = 0; i < grad_in.numel(); ++i) grad_in[i] += cg.input[i];
    }
    grad = std::move(grad_in);
  }
  return grads;
}

// --- center-pixel patch path ---
//
// For a square patch whose size is at least the receptive field, only a
// shrinking pyramid of activations influences the center pixel. Each branch
// crops its input to the maximum extent required by its dilation rate and
// runs a Valid convolution; results are bit-identical to the dense path.

template <typename S>
struct PatchCacheT {
  std::uint64_t spec_id = 0;
  std::vector<std::vector<TensorT<S>>> branch_inputs;  // [layer][branch] cropped inputs
  std::vector<TensorT<S>> preacts;                     // [layer] stacked Valid outputs
  TensorT<S> final_act;                                // 1x1 spatial
};

template <typename S>
struct PatchForwardResultT {
  std::vector<S> feature;  // center descriptor
  PatchCacheT<S> cache;
};

template <typename S>
PatchForwardResultT<S> forward_patch(const NetworkSpec& spec, const ParametersT<S>& params, const TensorT<S>& patch) {
  spec.validate();
  detail::check_params_shape(spec, params);
  const int rf = receptive_field(spec);
  require(patch.rank() == 3 && patch.dim(0) == spec.input_channels, ErrorKind::argument,
          "patch must be [" + std::to_string(spec.input_channels) + ",S,S]");
  require(patch.dim(1) == patch.dim(2), ErrorKind::argument, "patch must be square");
  require(patch.dim(1) >= rf, ErrorKind::argument, "patch smaller than receptive field " + std::to_string(rf));
  require((patch.dim(1) - rf) % 2 == 0, ErrorKind::argument, "patch size must align with receptive field parity");
  if (!params.all_finite()) fail_compute("forward_patch: parameters contain non-finite values");

  const std::size_t L = spec.layers.size();
  // needed output extent per layer, walking back from a 1x1 center
  std::vector<int> need(L + 1);
  need[L] = 1;
  for (std::size_t li = L; li-- > 0;) need[li] = need[li + 1] + layer_rf_growth(spec.layers[li]);
  // need[0] == rf; larger patches start from a center crop

  PatchForwardResultT<S> res;
  res.cache.spec_id = spec_hash(spec);
  res.cache.branch_inputs.resize(L);
  res.cache.preacts.resize(L);

  TensorT<S> cur = patch.dim(1) == need[0] ? patch : crop_center(patch, need[0], need[0]);
  for (std::size_t li = 0; li < L; ++li) {
    const std::size_t nb = detail::layer_branch_count(spec.layers[li]);
    const int out_extent = need[li + 1];
    std::vector<TensorT<S>> parts;
    parts.reserve(nb);
    for (std::size_t b = 0; b < nb; ++b) {
      ConvParamsT<S> cp = detail::branch_conv(spec, params, li, b, Padding::Valid);
      const int in_extent = out_extent + cp.dilation * (cp.kernel() - 1);
      TensorT<S> cropped = cur.dim(1) == in_extent ? cur : crop_center(cur, in_extent, in_extent);
      const SparseMask* mask = detail::layer_mask(spec.layers[li]);
      parts.push_back(conv2d_forward_impl(cropped, cp, mask, 1));
      res.cache.branch_inputs[li].push_back(std::move(cropped));
    }
    TensorT<S> preact = nb == 1 ? std::move(parts[0]) : concat_channels(parts);
    TensorT<S> act = detail::apply_activation(spec, li, preact);
    res.cache.preacts[li] = std::move(preact);
    cur = std::move(act);
  }
  res.cache.final_act = cur;
  TensorT<S> out = spec.final_normalization ? linf_normalize(cur, S(kFeatureNormEps)) : cur;
  res.feature.resize(std::size_t(out.dim(0)));
  for (int c = 0; c < out.dim(0); ++c) res.feature[std::size_t(c)] = out.at(c, 0, 0);
  return res;
}

template <typename S>
ParametersT<S> backward_patch(const NetworkSpec& spec, const ParametersT<S>& params, const PatchCacheT<S>& cache,
                              const std::vector<S>& grad_feature) {
  detail::check_params_shape(spec, params);
  require(cache.spec_id == spec_hash(spec) && cache.preacts.size() == spec.layers.size(), ErrorKind::argument,
          "backward_patch: cache does not match spec");
  const int D = layer_out_channels(spec.layers.back());
  require(int(grad_feature.size()) == D, ErrorKind::argument, "backward_patch: grad dimension mismatch");

  ParametersT<S> grads = zeros_like(params);
  TensorT<S> grad({D, 1, 1}, std::vector<S>(grad_feature));
  if (spec.final_normalization) grad = linf_normalize_backward(cache.final_act, S(kFeatureNormEps), grad);

  for (std::size_t li = spec.layers.size(); li-- > 0;) {
    grad = detail::activation_backward(spec, li, cache.preacts[li], grad);
    const std::size_t nb = detail::layer_branch_count(spec.layers[li]);
    std::vector<int> counts(nb, layer_out_channels(spec.layers[li]) / int(nb));
    std::vector<TensorT<S>> branch_grads =
        nb == 1 ? std::vector<TensorT<S>>{std::move(grad)} : split_channels_backward(grad, counts);

    const bool want_gi = li > 0;
    TensorT<S> grad_in;
    if (want_gi) {
      // branch crops differ; the layer input extent is the largest of them
      int max_ext = 0;
      for (const auto& bi : cache.branch_inputs[li]) max_ext = std::max(max_ext, bi.dim(1));
      grad_in = TensorT<S>({cache.branch_inputs[li][0].dim(0), max_ext, max_ext});
    }
    const auto* blk = std::get_if<SdcBlockSpec>(&spec.layers[li]);
    for (std::size_t b = 0; b < nb; ++b) {
      ConvParamsT<S> cp = detail::branch_conv(spec, params, li, b, Padding::Valid);
      const SparseMask* mask = detail::layer_mask(spec.layers[li]);
      const TensorT<S>& bin = cache.branch_inputs[li][b];
      ConvGradsT<S> cg = conv2d_backward_impl(bin, cp, branch_grads[b], mask, want_gi);
      const std::size_t wi = (blk && blk->share_weights) ? 0 : b;
      auto& gw = grads.layers[li].weights[wi];
      auto& gb = grads.layers[li].biases[wi];
      for (std::size_t i = 0; i < gw.numel(); ++i) gw[i] += cg.weights[i];
      for (std::size_t i = 0; i < gb.numel(); ++i) gb[i] += cg.bias[i];
      if (want_gi) {
        // embed the branch's grad back into the center of the layer-input grad
        const int off = (grad_in.dim(1) - bin.dim(1)) / 2;
        for (int c = 0; c < grad_in.dim(0); ++c)
          for (int y = 0; y < bin.dim(1); ++y)
            for (int x = 0; x < bin.dim(2); ++x) grad_in.at(c, off + y, off + x) += cg.input.at(c, y, x);
      }
    }
    grad = std::move(grad_in);
  }
  return grads;
}

// Center descriptor of a patch, without keeping the cache.
template <typename S>
std::vector<S> patch_descriptor(const NetworkSpec& spec, const ParametersT<S>& params, const TensorT<S>& patch) {
  return forward_patch(spec, params, patch).feature;
}

}  // namespace sdc
