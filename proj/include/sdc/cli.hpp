#pragma once

#include <atomic>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include <CLI11.hpp>

#include "sdc/arch.hpp"
#include "sdc/common.hpp"
#include "sdc/config.hpp"
#include "sdc/data.hpp"
#include "sdc/evaluation.hpp"
#include "sdc/image_io.hpp"
#include "sdc/matching.hpp"
#include "sdc/training.hpp"

namespace sdc::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitCompute = 1;
inline constexpr int kExitArgument = 2;
inline constexpr int kExitIo = 3;

// Set from the SIGINT handler in main(); training checks it per iteration.
inline std::atomic<bool>& interrupt_flag() {
  static std::atomic<bool> flag{false};
  return flag;
}

struct GlobalOpts {
  std::string config_path;
  std::uint64_t seed = 42;
  int threads = 1;
  bool deterministic = false;

  int effective_threads() const { return deterministic ? 1 : std::max(1, threads); }
};

inline const std::map<std::string, std::set<std::string>>& config_schema() {
  static const std::map<std::string, std::set<std::string>> schema = {
      {"global", {"seed", "threads", "deterministic"}},
      {"data",
       {"scenes", "width", "height", "mode", "amplitude", "octaves", "base_spacing", "persistence", "detail",
        "triplets_per_image", "chunk_size", "patch_size", "val_fraction", "val_triplets"}},
      {"train",
       {"arch", "tau", "margin", "lr0", "decay_base", "decay_every", "batch_size", "iters", "report_every",
        "val_every", "activation"}},
      {"match",
       {"mode", "max_disp", "radius", "distance", "direction", "consistency", "consistency_thresh", "subpixel",
        "descriptor", "raw_size", "census_width", "census_height"}},
      {"eval", {"triplets", "radii", "exclusion", "max_pixels", "robust_pairs", "patch_size", "descriptor"}},
  };
  return schema;
}

struct DataOpts {
  long scenes = 20;
  int width = 128, height = 96;
  std::string mode = "mixed";  // flow | disparity | mixed
  double amplitude = 6.0;
  int octaves = 4;
  double base_spacing = 32.0;
  double persistence = 0.5;
  double detail = 0.35;
  int triplets_per_image = 100;
  long chunk_size = 3200;
  int patch_size = 0;  // 0 = network receptive field
  double val_fraction = 0.2;
  int val_triplets = 400;

  static DataOpts from(const Config& c) {
    DataOpts o;
    o.scenes = c.get_int("data", "scenes", o.scenes);
    o.width = int(c.get_int("data", "width", o.width));
    o.height = int(c.get_int("data", "height", o.height));
    o.mode = c.get("data", "mode", o.mode);
    o.amplitude = c.get_double("data", "amplitude", o.amplitude);
    o.octaves = int(c.get_int("data", "octaves", o.octaves));
    o.base_spacing = c.get_double("data", "base_spacing", o.base_spacing);
    o.persistence = c.get_double("data", "persistence", o.persistence);
    o.detail = c.get_double("data", "detail", o.detail);
    o.triplets_per_image = int(c.get_int("data", "triplets_per_image", o.triplets_per_image));
    o.chunk_size = c.get_int("data", "chunk_size", o.chunk_size);
    o.patch_size = int(c.get_int("data", "patch_size", o.patch_size));
    o.val_fraction = c.get_double("data", "val_fraction", o.val_fraction);
    o.val_triplets = int(c.get_int("data", "val_triplets", o.val_triplets));
    if (o.mode != "flow" && o.mode != "disparity" && o.mode != "mixed")
      fail_argument("config [data] mode must be flow, disparity or mixed");
    return o;
  }

  void dump(Config& c) const {
    c.set("data", "scenes", std::to_string(scenes));
    c.set("data", "width", std::to_string(width));
    c.set("data", "height", std::to_string(height));
    c.set("data", "mode", mode);
    c.set("data", "amplitude", std::to_string(amplitude));
    c.set("data", "octaves", std::to_string(octaves));
    c.set("data", "base_spacing", std::to_string(base_spacing));
    c.set("data", "persistence", std::to_string(persistence));
    c.set("data", "detail", std::to_string(detail));
    c.set("data", "triplets_per_image", std::to_string(triplets_per_image));
    c.set("data", "chunk_size", std::to_string(chunk_size));
    c.set("data", "patch_size", std::to_string(patch_size));
    c.set("data", "val_fraction", std::to_string(val_fraction));
    c.set("data", "val_triplets", std::to_string(val_triplets));
  }
};

struct TrainOpts {
  std::string arch = "tiny";
  TrainConfig cfg;
  std::string activation;  // empty = spec default

  static TrainOpts from(const Config& c) {
    TrainOpts o;
    o.arch = c.get("train", "arch", o.arch);
    o.cfg.tau = float(c.get_double("train", "tau", o.cfg.tau));
    o.cfg.margin = float(c.get_double("train", "margin", o.cfg.margin));
    o.cfg.lr0 = float(c.get_double("train", "lr0", o.cfg.lr0));
    o.cfg.decay_base = float(c.get_double("train", "decay_base", o.cfg.decay_base));
    o.cfg.decay_every = c.get_int("train", "decay_every", o.cfg.decay_every);
    o.cfg.batch_size = int(c.get_int("train", "batch_size", o.cfg.batch_size));
    o.cfg.total_iters = c.get_int("train", "iters", 2000);
    o.cfg.report_every = int(c.get_int("train", "report_every", o.cfg.report_every));
    o.cfg.val_every = int(c.get_int("train", "val_every", o.cfg.val_every));
    o.activation = c.get("train", "activation", "");
    if (!o.activation.empty()) {
      if (o.activation == "elu")
        o.cfg.activation_override = Activation::ELU;
      else if (o.activation == "relu")
        o.cfg.activation_override = Activation::ReLU;
      else if (o.activation == "relu-linear-last")
        o.cfg.activation_override = Activation::ReLULinearLast;
      else
        fail_argument("config [train] activation must be elu, relu or relu-linear-last");
    }
    return o;
  }

  void dump(Config& c) const {
    c.set("train", "arch", arch);
    c.set("train", "tau", std::to_string(cfg.tau));
    c.set("train", "margin", std::to_string(cfg.margin));
    c.set("train", "lr0", std::to_string(cfg.lr0));
    c.set("train", "decay_base", std::to_string(cfg.decay_base));
    c.set("train", "decay_every", std::to_string(cfg.decay_every));
    c.set("train", "batch_size", std::to_string(cfg.batch_size));
    c.set("train", "iters", std::to_string(cfg.total_iters));
    c.set("train", "report_every", std::to_string(cfg.report_every));
    c.set("train", "val_every", std::to_string(cfg.val_every));
    if (!activation.empty()) c.set("train", "activation", activation);
  }
};

struct MatchOpts {
  std::string mode = "flow";  // flow | disparity
  int max_disp = 24;
  int radius = 8;
  std::string distance = "ssd";
  int direction = 1;  // disparity search direction into the second image
  bool consistency = false;
  double consistency_thresh = 1.0;
  bool subpixel = false;
  std::string descriptor = "net";  // net | census | raw
  int raw_size = 9;
  int census_width = 9, census_height = 7;

  static MatchOpts from(const Config& c) {
    MatchOpts o;
    o.mode = c.get("match", "mode", o.mode);
    o.max_disp = int(c.get_int("match", "max_disp", o.max_disp));
    o.radius = int(c.get_int("match", "radius", o.radius));
    o.distance = c.get("match", "distance", o.distance);
    o.direction = int(c.get_int("match", "direction", o.direction));
    o.consistency = c.get_bool("match", "consistency", o.consistency);
    o.consistency_thresh = c.get_double("match", "consistency_thresh", o.consistency_thresh);
    o.subpixel = c.get_bool("match", "subpixel", o.subpixel);
    o.descriptor = c.get("match", "descriptor", o.descriptor);
    o.raw_size = int(c.get_int("match", "raw_size", o.raw_size));
    o.census_width = int(c.get_int("match", "census_width", o.census_width));
    o.census_height = int(c.get_int("match", "census_height", o.census_height));
    if (o.mode != "flow" && o.mode != "disparity") fail_argument("config [match] mode must be flow or disparity");
    if (o.direction != 1 && o.direction != -1) fail_argument("config [match] direction must be 1 or -1");
    distance_from_name(o.distance);
    return o;
  }

  void dump(Config& c) const {
    c.set("match", "mode", mode);
    c.set("match", "max_disp", std::to_string(max_disp));
    c.set("match", "radius", std::to_string(radius));
    c.set("match", "distance", distance);
    c.set("match", "direction", std::to_string(direction));
    c.set("match", "consistency", consistency ? "1" : "0");
    c.set("match", "consistency_thresh", std::to_string(consistency_thresh));
    c.set("match", "subpixel", subpixel ? "1" : "0");
    c.set("match", "descriptor", descriptor);
    c.set("match", "raw_size", std::to_string(raw_size));
    c.set("match", "census_width", std::to_string(census_width));
    c.set("match", "census_height", std::to_string(census_height));
  }
};

struct EvalOpts {
  int triplets = 400;
  std::vector<double> radii = {2, 4, 8, 16, 32, 64, 100};
  double exclusion = 2.0;
  long max_pixels = 2000;
  int robust_pairs = 1;
  int patch_size = 0;
  std::string descriptor;  // used when no checkpoint is given

  static EvalOpts from(const Config& c) {
    EvalOpts o;
    o.triplets = int(c.get_int("eval", "triplets", o.triplets));
    o.radii = c.get_double_list("eval", "radii", o.radii);
    o.exclusion = c.get_double("eval", "exclusion", o.exclusion);
    o.max_pixels = c.get_int("eval", "max_pixels", o.max_pixels);
    o.robust_pairs = int(c.get_int("eval", "robust_pairs", o.robust_pairs));
    o.patch_size = int(c.get_int("eval", "patch_size", o.patch_size));
    o.descriptor = c.get("eval", "descriptor", "");
    return o;
  }

  void dump(Config& c) const {
    c.set("eval", "triplets", std::to_string(triplets));
    std::ostringstream rs;
    for (std::size_t i = 0; i < radii.size(); ++i) rs << (i ? "," : "") << radii[i];
    c.set("eval", "radii", rs.str());
    c.set("eval", "exclusion", std::to_string(exclusion));
    c.set("eval", "max_pixels", std::to_string(max_pixels));
    c.set("eval", "robust_pairs", std::to_string(robust_pairs));
    c.set("eval", "patch_size", std::to_string(patch_size));
    if (!descriptor.empty()) c.set("eval", "descriptor", descriptor);
  }
};

// --- helpers ---

inline void write_text_file(const std::string& path, const std::string& text) {
  detail::write_file(path, text.data(), text.size());
}

inline void dump_global(Config& c, const GlobalOpts& g) {
  c.set("global", "seed", std::to_string(g.seed));
  c.set("global", "threads", std::to_string(g.effective_threads()));
  c.set("global", "deterministic", g.deterministic ? "1" : "0");
}

inline void write_effective_config(const std::string& out_dir, const Config& c, const std::string& command) {
  write_text_file(out_dir + "/effective-config.ini", "# command: " + command + "\n" + c.to_string());
}

inline void ensure_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) fail_io("cannot create directory '" + dir + "': " + ec.message());
}

inline std::uint64_t scene_seed(std::uint64_t master, long index) {
  return splitmix64(master + 0x51ce5e5e5ull * std::uint64_t(index + 1));
}

inline SceneConfig scene_config(const DataOpts& d, long index) {
  SceneConfig sc;
  sc.width = d.width;
  sc.height = d.height;
  sc.amplitude = d.amplitude;
  sc.octaves = d.octaves;
  sc.base_spacing = d.base_spacing;
  sc.persistence = d.persistence;
  sc.detail = d.detail;
  if (d.mode == "flow")
    sc.kind = GtKind::Flow;
  else if (d.mode == "disparity")
    sc.kind = GtKind::Disparity;
  else
    sc.kind = index % 2 == 0 ? GtKind::Flow : GtKind::Disparity;
  return sc;
}

struct LoadedManifest {
  Manifest manifest;
  std::vector<LoadedScene> scenes;
  std::map<std::string, double> source_weights;
};

inline LoadedManifest load_manifest_scenes(const std::string& path) {
  LoadedManifest lm;
  lm.manifest = read_manifest(path);
  for (const auto& e : lm.manifest.entries) {
    lm.scenes.push_back(load_scene(e));
    lm.source_weights[e.source_id] = e.weight;
  }
  return lm;
}

// Round-robin triplet sampling across a scene subset, used for validation
// and evaluation sets.
inline std::vector<PatchTriplet> sample_eval_triplets(const LoadedManifest& lm, const std::vector<std::size_t>& ids,
                                                      int count, int patch_size, Rng rng) {
  require(!ids.empty(), ErrorKind::argument, "no scenes available for evaluation triplets");
  std::vector<PatchTriplet> out;
  out.reserve(std::size_t(count));
  std::size_t si = 0;
  while (int(out.size()) < count) {
    const int want = std::min(count - int(out.size()), 16);
    const LoadedScene& s = lm.scenes[ids[si % ids.size()]];
    auto batch = sample_triplets(s.img1, s.img2, s.gt, want, patch_size, rng);
    for (auto& t : batch) out.push_back(std::move(t));
    ++si;
  }
  return out;
}

// --- info ---

inline int cmd_info(const std::string& arch) {
  NetworkSpec spec = registry(arch);
  ParamCount pc = param_count(spec);
  std::printf("architecture:     %s\n", spec.name.c_str());
  std::printf("receptive field:  %d px\n", receptive_field(spec));
  std::printf("resolution factor: 1\n");
  std::printf("weights:          %llu\n", (unsigned long long)pc.weights);
  std::printf("biases:           %llu\n", (unsigned long long)pc.biases);
  std::printf("parameters:       %llu\n", (unsigned long long)pc.total());
  std::printf("activation:       %s\n", activation_name(spec.activation).c_str());
  std::printf("final normalization: %s\n", spec.final_normalization ? "yes" : "no");
  std::printf("%-6s %-34s %-10s %-12s\n", "layer", "type", "in->out", "weights");
  for (std::size_t li = 0; li < spec.layers.size(); ++li) {
    const int cin = layer_in_channels(spec, li);
    const LayerSpec& l = spec.layers[li];
    std::ostringstream type;
    std::uint64_t weights = 0;
    if (const auto* b = std::get_if<SdcBlockSpec>(&l)) {
      type << "sdc " << b->branches.size() << "x conv" << b->branches[0].kernel << "x" << b->branches[0].kernel
           << " d=";
      for (std::size_t i = 0; i < b->branches.size(); ++i) type << (i ? "," : "") << b->branches[i].dilation;
      if (b->share_weights) type << " shared";
      weights = std::uint64_t(b->branches[0].kernel) * b->branches[0].kernel * cin * b->branch_out_channels *
                (b->share_weights ? 1 : b->branches.size());
    } else if (const auto* p = std::get_if<PlainConvSpec>(&l)) {
      type << "conv" << p->kernel << "x" << p->kernel << " s=" << p->stride << " d=" << p->dilation;
      weights = std::uint64_t(p->kernel) * p->kernel * cin * p->out_channels;
    } else {
      const auto& sp = std::get<SparseConvSpec>(l);
      type << "sparse conv" << sp.kernel << "x" << sp.kernel << " (" << sp.mask.nonzero_count << " cells)";
      weights = std::uint64_t(sp.mask.nonzero_count) * cin * sp.out_channels;
    }
    std::printf("%-6zu %-34s %3d->%-5d %-12llu\n", li, type.str().c_str(), cin, layer_out_channels(l),
                (unsigned long long)weights);
  }
  return kExitOk;
}

// --- gen-data ---

inline int cmd_gen_data(const GlobalOpts& g, const Config& file_cfg, const std::string& out_dir) {
  DataOpts d = DataOpts::from(file_cfg);
  ensure_dir(out_dir);
  std::ostringstream manifest;
  manifest << "# synthetic scenes\n";
  for (long i = 0; i < d.scenes; ++i) {
    SceneConfig sc = scene_config(d, i);
    SyntheticScene s = gen_synthetic_scene(sc, scene_seed(g.seed, i));
    char base[32];
    std::snprintf(base, sizeof(base), "scene%03ld", i);
    const std::string stem = out_dir + "/" + base;
    write_ppm(stem + ".img1.ppm", s.img1);
    write_ppm(stem + ".img2.ppm", s.img2);
    const std::string gt_name = sc.kind == GtKind::Flow ? std::string(base) + ".flo" : std::string(base) + ".pfm";
    if (sc.kind == GtKind::Flow)
      write_flo(out_dir + "/" + gt_name, s.gt);
    else
      write_pfm(out_dir + "/" + gt_name, s.gt);
    write_mask_pgm(occlusion_sidecar_path(out_dir + "/" + gt_name), s.gt.occluded, sc.height, sc.width);
    manifest << "synth 1.0 " << base << ".img1.ppm " << base << ".img2.ppm " << gt_name << " "
             << (sc.kind == GtKind::Flow ? "flow" : "disparity") << "\n";
  }
  write_text_file(out_dir + "/manifest.txt", manifest.str());
  Config eff;
  dump_global(eff, g);
  d.dump(eff);
  write_effective_config(out_dir, eff, "gen-data");
  std::printf("wrote %ld scenes to %s (manifest.txt)\n", d.scenes, out_dir.c_str());
  return kExitOk;
}

// --- sample ---

inline int cmd_sample(const GlobalOpts& g, const Config& file_cfg, const std::string& manifest_path,
                      const std::string& out_dir, long count, bool dump_patches) {
  DataOpts d = DataOpts::from(file_cfg);
  LoadedManifest lm = load_manifest_scenes(manifest_path);
  ensure_dir(out_dir);
  const int patch_size = d.patch_size > 0 ? d.patch_size : 25;

  std::vector<const LoadedScene*> scenes;
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < lm.scenes.size(); ++i) {
    scenes.push_back(&lm.scenes[i]);
    ids.push_back(lm.manifest.entries[i].source_id);
  }
  TripletStream stream(scenes, ids, lm.source_weights, patch_size, d.triplets_per_image,
                       std::size_t(d.chunk_size), Rng(g.seed).substream("data"));

  std::ostringstream csv;
  csv << "index,ref_y,ref_x,disp_u,disp_v,off_u,off_v,kind\n";
  for (long i = 0; i < count; ++i) {
    PatchTriplet t = stream.next();
    csv << i << "," << t.meta.ref_y << "," << t.meta.ref_x << "," << t.meta.disp_u << "," << t.meta.disp_v << ","
        << t.meta.off_u << "," << t.meta.off_v << "," << (t.meta.kind == GtKind::Flow ? "flow" : "disparity")
        << "\n";
    if (dump_patches && i < 8) {
      char base[48];
      std::snprintf(base, sizeof(base), "triplet%03ld", i);
      write_ppm(out_dir + "/" + base + ".ref.ppm", denormalize_image(t.reference));
      write_ppm(out_dir + "/" + base + ".pos.ppm", denormalize_image(t.positive));
      write_ppm(out_dir + "/" + base + ".neg.ppm", denormalize_image(t.negative));
    }
  }
  write_text_file(out_dir + "/triplets.csv", csv.str());
  Config eff;
  dump_global(eff, g);
  d.dump(eff);
  write_effective_config(out_dir, eff, "sample");
  std::printf("sampled %ld triplets (patch %d) to %s/triplets.csv\n", count, patch_size, out_dir.c_str());
  return kExitOk;
}

// --- train ---

inline int cmd_train(const GlobalOpts& g, const Config& file_cfg, const std::string& manifest_path,
                     const std::string& out_dir, const std::string& arch_flag) {
  DataOpts d = DataOpts::from(file_cfg);
  TrainOpts t = TrainOpts::from(file_cfg);
  if (!arch_flag.empty()) t.arch = arch_flag;
  t.cfg.seed = g.seed;
  t.cfg.validate();

  NetworkSpec spec = registry(t.arch);
  const int rf = receptive_field(spec);
  const int patch_size = d.patch_size > 0 ? d.patch_size : rf;
  require(patch_size >= rf, ErrorKind::argument,
          "patch size " + std::to_string(patch_size) + " is below the receptive field " + std::to_string(rf));

  LoadedManifest lm = load_manifest_scenes(manifest_path);
  auto [train_ids, val_ids] = split_train_val(lm.scenes.size(), d.val_fraction);

  std::vector<const LoadedScene*> train_scenes;
  std::vector<std::string> train_sources;
  for (std::size_t id : train_ids) {
    train_scenes.push_back(&lm.scenes[id]);
    train_sources.push_back(lm.manifest.entries[id].source_id);
  }
  TripletStream stream(train_scenes, train_sources, lm.source_weights, patch_size, d.triplets_per_image,
                       std::size_t(d.chunk_size), Rng(g.seed).substream("data"));

  std::vector<PatchTriplet> val;
  if (!val_ids.empty() && d.val_triplets > 0)
    val = sample_eval_triplets(lm, val_ids, d.val_triplets, patch_size, Rng(g.seed).substream("eval"));

  ensure_dir(out_dir);
  TrainResult res = train(spec, t.cfg, stream, val, &interrupt_flag());

  std::ostringstream log;
  log << "iter,lr,loss,val_accuracy\n";
  log.precision(9);
  for (const auto& row : res.rows)
    log << row.iter << "," << row.lr << "," << row.loss << "," << row.val_accuracy << "\n";
  write_text_file(out_dir + "/train-log.csv", log.str());

  Config eff;
  dump_global(eff, g);
  d.dump(eff);
  t.dump(eff);
  write_effective_config(out_dir, eff, "train");

  if (res.aborted) {
    save_checkpoint(out_dir + "/checkpoint-diagnostic.sdc", res.checkpoint);
    std::fprintf(stderr, "training aborted: %s (diagnostic checkpoint written)\n", res.abort_reason.c_str());
    return kExitCompute;
  }
  save_checkpoint(out_dir + "/checkpoint.sdc", res.checkpoint);
  if (res.interrupted)
    std::printf("interrupted at iteration %llu; checkpoint written to %s/checkpoint.sdc\n",
                (unsigned long long)res.checkpoint.iteration, out_dir.c_str());
  else
    std::printf("trained %s for %lld iterations; final val accuracy %.4f; checkpoint at %s/checkpoint.sdc\n",
                t.arch.c_str(), (long long)t.cfg.total_iters,
                res.rows.empty() ? 0.0 : res.rows.back().val_accuracy, out_dir.c_str());
  return kExitOk;
}

// --- eval ---

inline Tensor census_feature_planes(const Image& img, int win_w, int win_h) {
  CensusMap m = census_transform(to_grayscale(img), win_w, win_h);
  const int nbits = (win_w * win_h - 1) / 2;
  Tensor f({nbits, m.h, m.w});
  for (int y = 0; y < m.h; ++y)
    for (int x = 0; x < m.w; ++x) {
      const std::uint64_t bits = m.at(y, x);
      for (int b = 0; b < nbits; ++b) f.at(b, y, x) = (bits >> b) & 1 ? 1.0f : 0.0f;
    }
  return f;
}

inline int cmd_eval(const GlobalOpts& g, const Config& file_cfg, const std::string& checkpoint_path,
                    const std::string& manifest_path, const std::string& out_dir) {
  EvalOpts e = EvalOpts::from(file_cfg);
  LoadedManifest lm = load_manifest_scenes(manifest_path);
  ensure_dir(out_dir);

  Descriptor desc;
  NetworkSpec spec;
  Parameters params;
  bool have_net = false;
  if (!checkpoint_path.empty()) {
    Checkpoint ckpt = load_checkpoint(checkpoint_path);
    spec = registry(ckpt.arch_name);
    params = ckpt.params;
    desc = net_descriptor(spec, params);
    have_net = true;
  } else {
    const std::string name = e.descriptor.empty() ? "census" : e.descriptor;
    if (name == "census")
      desc = census_patch_descriptor();
    else if (name == "raw")
      desc = raw_patch_descriptor(9);
    else if (name == "constant")
      desc = constant_descriptor();
    else
      fail_argument("eval descriptor must be census, raw or constant (or give --checkpoint)");
  }
  const int patch_size = e.patch_size > 0 ? e.patch_size : (have_net ? receptive_field(spec) : 25);

  std::vector<std::size_t> ids(lm.scenes.size());
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = i;
  auto triplets = sample_eval_triplets(lm, ids, e.triplets, patch_size, Rng(g.seed).substream("eval"));

  const double acc = triplet_accuracy(desc, triplets);
  auto dists = pair_distances(desc, triplets);
  EvalCurve roc = roc_curve(dists.pos, dists.neg);
  write_text_file(out_dir + "/roc.csv",
                  curve_to_csv(roc, "descriptor=" + desc.name + " triplets=" + std::to_string(triplets.size()) +
                                        " seed=" + std::to_string(g.seed)));

  std::ostringstream summary;
  summary << "metric,value\n";
  summary.precision(9);
  summary << "triplet_accuracy," << acc << "\n";
  summary << "roc_auc," << roc.summary << "\n";
  std::printf("descriptor %s: triplet accuracy %.4f, ROC AUC %.4f\n", desc.name.c_str(), acc, roc.summary);

  const bool dense_capable = have_net || desc.name == "census";
  if (dense_capable) {
    RobustnessConfig rc;
    rc.radii = e.radii;
    rc.exclusion = e.exclusion;
    rc.max_pixels = std::size_t(e.max_pixels);
    rc.seed = g.seed;
    for (int p = 0; p < e.robust_pairs && p < int(lm.scenes.size()); ++p) {
      const LoadedScene& s = lm.scenes[std::size_t(p)];
      Tensor f1, f2;
      if (have_net) {
        f1 = extract_features(spec, params, normalize_image(s.img1), g.effective_threads());
        f2 = extract_features(spec, params, normalize_image(s.img2), g.effective_threads());
      } else {
        f1 = census_feature_planes(s.img1, 9, 7);
        f2 = census_feature_planes(s.img2, 9, 7);
      }
      EvalCurve rob = robustness_curve(f1, f2, s.gt, rc);
      std::ostringstream cfgline;
      cfgline << "descriptor=" << desc.name << " pair=" << p << " exclusion=" << rc.exclusion
              << " max_pixels=" << rc.max_pixels << " seed=" << g.seed;
      write_text_file(out_dir + "/robustness-pair" + std::to_string(p) + ".csv", curve_to_csv(rob, cfgline.str()));
      summary << "robustness_at_max_pair" << p << "," << rob.summary << "\n";
      std::printf("robustness pair %d at max radius: %.4f\n", p, rob.summary);
    }
  } else {
    std::printf("robustness curves skipped: descriptor '%s' has no dense feature map\n", desc.name.c_str());
  }
  write_text_file(out_dir + "/summary.csv", summary.str());

  Config eff;
  dump_global(eff, g);
  e.dump(eff);
  write_effective_config(out_dir, eff, "eval");
  return kExitOk;
}

// --- match ---

inline int cmd_match(const GlobalOpts& g, const Config& file_cfg, const std::string& checkpoint_path,
                     const std::string& img1_path, const std::string& img2_path, const std::string& gt_path,
                     const std::string& out_dir) {
  MatchOpts m = MatchOpts::from(file_cfg);
  Image img1 = read_ppm(img1_path);
  Image img2 = read_ppm(img2_path);
  require(img1.same_shape(img2), ErrorKind::argument, "match: image extents differ");
  const int h = img1.dim(1), w = img1.dim(2);
  ensure_dir(out_dir);

  // descriptor maps
  Tensor f1, f2;
  std::string desc_name = m.descriptor;
  CensusMap c1, c2;
  const DistanceKind dist = distance_from_name(m.distance);
  if (!checkpoint_path.empty()) {
    Checkpoint ckpt = load_checkpoint(checkpoint_path);
    NetworkSpec spec = registry(ckpt.arch_name);
    f1 = extract_features(spec, ckpt.params, normalize_image(img1), g.effective_threads());
    f2 = extract_features(spec, ckpt.params, normalize_image(img2), g.effective_threads());
    desc_name = "net:" + ckpt.arch_name;
  } else if (m.descriptor == "census") {
    c1 = census_transform(to_grayscale(img1), m.census_width, m.census_height);
    c2 = census_transform(to_grayscale(img2), m.census_width, m.census_height);
  } else if (m.descriptor == "raw") {
    f1 = img1;
    f2 = img2;
  } else {
    fail_argument("match needs --checkpoint or descriptor census/raw");
  }

  auto run = [&](bool forward_dir) {
    const Tensor& a = forward_dir ? f1 : f2;
    const Tensor& b = forward_dir ? f2 : f1;
    const int dir = forward_dir ? m.direction : -m.direction;
    if (!checkpoint_path.empty()) {
      FeatureCost cost{a, b, dist};
      return m.mode == "disparity" ? stereo_wta_cost(h, w, m.max_disp, dir, cost)
                                   : flow_wta_cost(h, w, m.radius, cost);
    }
    if (m.descriptor == "census") {
      CensusCost cost{forward_dir ? c1 : c2, forward_dir ? c2 : c1};
      return m.mode == "disparity" ? stereo_wta_cost(h, w, m.max_disp, dir, cost)
                                   : flow_wta_cost(h, w, m.radius, cost);
    }
    RawPatchCost cost{a, b, m.raw_size};
    return m.mode == "disparity" ? stereo_wta_cost(h, w, m.max_disp, dir, cost)
                                 : flow_wta_cost(h, w, m.radius, cost);
  };

  MatchResult fwd = run(true);
  if (m.mode == "disparity" && m.subpixel && !checkpoint_path.empty()) {
    // re-run with parabola refinement (feature path only)
    FeatureCost cost{f1, f2, dist};
    fwd = detail::stereo_wta_engine(h, w, m.max_disp, m.direction, true, cost);
  }
  MatchResult result = fwd;
  if (m.consistency) {
    MatchResult bwd = run(false);
    result = consistency_filter(fwd, bwd, m.consistency_thresh);
  }
  if (m.mode == "disparity") result.kind = GtKind::Disparity;
  write_match_result(out_dir + "/match", result);

  std::ostringstream metrics;
  metrics << "metric,region,value\n";
  metrics.precision(9);
  if (!gt_path.empty()) {
    GroundTruth gt = gt_path.size() > 4 && gt_path.substr(gt_path.size() - 4) == ".flo" ? read_flo(gt_path)
                                                                                        : read_pfm(gt_path);
    const std::string occ = occlusion_sidecar_path(gt_path);
    if (file_exists(occ)) gt.occluded = read_mask_pgm(occ, gt.height(), gt.width());
    result.density = density(result, gt);
    for (Region region : {Region::All, Region::NonOccluded}) {
      const std::string rn = region == Region::All ? "all" : "noc";
      metrics << "epe," << rn << "," << epe(result, gt, region) << "\n";
      metrics << "outlier_3px," << rn << "," << outlier_rate(result, gt, 3.0, region) << "\n";
      metrics << "density," << rn << "," << density(result, gt, region) << "\n";
    }
    std::printf("%s %s: epe(all) %.4f, >3px(all) %.4f, density(all) %.4f\n", desc_name.c_str(), m.mode.c_str(),
                epe(result, gt), outlier_rate(result, gt), result.density);
  } else {
    std::printf("%s %s: matched %dx%d (no ground truth given)\n", desc_name.c_str(), m.mode.c_str(), w, h);
  }
  write_text_file(out_dir + "/metrics.csv", metrics.str());

  Config eff;
  dump_global(eff, g);
  m.dump(eff);
  write_effective_config(out_dir, eff, "match");
  return kExitOk;
}

// --- bench ---

inline int cmd_bench(const GlobalOpts& g, const std::string& arch, int width, int height, int reps,
                     const std::string& out_path) {
  require(width >= 1 && height >= 1 && reps >= 1, ErrorKind::argument, "bench: bad size/reps");
  NetworkSpec spec = registry(arch);
  Parameters params = init<float>(spec, g.seed);
  Rng rng = Rng(g.seed).substream("bench");
  Tensor input({3, height, width});
  for (std::size_t i = 0; i < input.numel(); ++i) input[i] = float(rng.normal());

  std::ostringstream csv;
  csv << "arch,width,height,rep,seconds,mpix_per_s\n";
  for (int rep = 0; rep < reps; ++rep) {
    auto t0 = std::chrono::steady_clock::now();
    Tensor f = extract_features(spec, params, input, g.effective_threads());
    auto t1 = std::chrono::steady_clock::now();
    const double sec = std::chrono::duration<double>(t1 - t0).count();
    const double mpix = double(width) * height / 1e6 / sec;
    csv << arch << "," << width << "," << height << "," << rep << "," << sec << "," << mpix << "\n";
    require(f.dim(1) == height && f.dim(2) == width, ErrorKind::compute, "bench: unexpected output extents");
  }
  std::fputs(csv.str().c_str(), stdout);
  if (!out_path.empty()) write_text_file(out_path, csv.str());
  return kExitOk;
}

// --- entry point ---

inline int run_cli(const std::vector<std::string>& args) {
  GlobalOpts g;
  CLI::App app{"dense descriptor engine: stacked dilated convolution networks, triplet training, matching"};
  app.require_subcommand(1);
  app.add_option("--config", g.config_path, "INI configuration file");
  app.add_option("--seed", g.seed, "master random seed (default 42)");
  app.add_option("--threads", g.threads, "worker threads for dense extraction");
  app.add_flag("--deterministic", g.deterministic, "force serial reduction paths");

  std::string arch, manifest, out_dir, checkpoint, img1, img2, gt, bench_out;
  long sample_count = 100;
  bool dump_patches = false;
  int bench_w = 256, bench_h = 192, bench_reps = 3;

  auto* info = app.add_subcommand("info", "architecture calculators: receptive field, parameters, layers");
  info->add_option("arch", arch, "architecture name")->required();

  auto* gen = app.add_subcommand("gen-data", "generate synthetic scenes and a manifest");
  gen->add_option("--out", out_dir, "output directory")->required();

  auto* sample = app.add_subcommand("sample", "sample patch triplets from a manifest");
  sample->add_option("--manifest", manifest, "dataset manifest")->required();
  sample->add_option("--out", out_dir, "output directory")->required();
  sample->add_option("--count", sample_count, "number of triplets");
  sample->add_flag("--dump-patches", dump_patches, "write the first triplets as images");

  auto* train_cmd = app.add_subcommand("train", "train a descriptor network on a manifest");
  train_cmd->add_option("--manifest", manifest, "dataset manifest")->required();
  train_cmd->add_option("--out", out_dir, "output directory")->required();
  train_cmd->add_option("--arch", arch, "architecture override");

  auto* eval_cmd = app.add_subcommand("eval", "triplet accuracy, ROC and robustness curves");
  eval_cmd->add_option("--checkpoint", checkpoint, "trained checkpoint");
  eval_cmd->add_option("--manifest", manifest, "dataset manifest")->required();
  eval_cmd->add_option("--out", out_dir, "output directory")->required();

  auto* match_cmd = app.add_subcommand("match", "dense matching of an image pair");
  match_cmd->add_option("--checkpoint", checkpoint, "trained checkpoint (descriptor)");
  match_cmd->add_option("--image1", img1, "first image (PPM)")->required();
  match_cmd->add_option("--image2", img2, "second image (PPM)")->required();
  match_cmd->add_option("--gt", gt, "ground truth (.flo or .pfm) for metrics");
  match_cmd->add_option("--out", out_dir, "output directory")->required();

  auto* bench_cmd = app.add_subcommand("bench", "dense extraction throughput");
  bench_cmd->add_option("arch", arch, "architecture name")->required();
  bench_cmd->add_option("--width", bench_w, "input width");
  bench_cmd->add_option("--height", bench_h, "input height");
  bench_cmd->add_option("--reps", bench_reps, "repetitions");
  bench_cmd->add_option("--out", bench_out, "also write the CSV here");

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitArgument;
  }

  try {
    Config cfg;
    if (!g.config_path.empty()) {
      cfg = Config::parse_file(g.config_path);
      cfg.validate_known(config_schema());
      // global section may override flag defaults when flags were not given
      if (cfg.has("global", "seed") && g.seed == 42) g.seed = std::uint64_t(cfg.get_int("global", "seed", 42));
      if (cfg.has("global", "threads") && g.threads == 1) g.threads = int(cfg.get_int("global", "threads", 1));
      if (cfg.has("global", "deterministic") && !g.deterministic)
        g.deterministic = cfg.get_bool("global", "deterministic", false);
    }
    if (info->parsed()) return cmd_info(arch);
    if (gen->parsed()) return cmd_gen_data(g, cfg, out_dir);
    if (sample->parsed()) return cmd_sample(g, cfg, manifest, out_dir, sample_count, dump_patches);
    if (train_cmd->parsed()) return cmd_train(g, cfg, manifest, out_dir, arch);
    if (eval_cmd->parsed()) return cmd_eval(g, cfg, checkpoint, manifest, out_dir);
    if (match_cmd->parsed()) return cmd_match(g, cfg, checkpoint, img1, img2, gt, out_dir);
    if (bench_cmd->parsed()) return cmd_bench(g, arch, bench_w, bench_h, bench_reps, bench_out);
    std::fprintf(stderr, "error: no subcommand\n");
    return kExitArgument;
  } catch (const CheckpointFormatError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitIo;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    switch (e.kind()) {
      case ErrorKind::argument: return kExitArgument;
      case ErrorKind::io: return kExitIo;
      case ErrorKind::compute: return kExitCompute;
    }
    return kExitCompute;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitCompute;
  }
}

}  // namespace sdc::cli
