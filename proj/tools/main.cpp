#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "voxopt/checkpoint.hpp"
#include "voxopt/common.hpp"
#include "voxopt/mesh.hpp"
#include "voxopt/pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace voxopt;

namespace {

void print_json(const json& j) { std::printf("%s\n", j.dump(2).c_str()); }

void ensure_parent_dir(const std::string& path) {
  const fs::path parent = fs::path(path).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
}

std::string resolve_entry(const std::string& manifest, const std::string& entry) {
  fs::path p(entry);
  if (p.is_absolute()) return entry;
  return (fs::path(manifest).parent_path() / p).string();
}

void check_latent_hash(const LatentFile& latent, const std::string& gan_ckpt) {
  const std::string hash = file_fnv1a64_hex(gan_ckpt);
  if (latent.gan_checkpoint_hash != hash) {
    throw ValidationError("latent file was produced from a different generator checkpoint (" +
                          latent.gan_checkpoint_hash + " vs " + hash + ")");
  }
}

json inversion_json(const InversionResult& res, const VoxelGrid& target) {
  return {{"steps", static_cast<std::int64_t>(res.loss_curve.size())},
          {"best_step", res.best_step},
          {"best_loss", res.best_loss},
          {"iou", voxel_iou(binarize(signed_from_tensor(res.volume)), target)},
          {"diverged", res.diverged}};
}

// Mapper training manifest: newline-delimited "latent_path voxb_path" records,
// relative entries resolving against the manifest location.
struct MapperExamplePaths {
  std::string latent, grid;
};

std::vector<MapperExamplePaths> read_mapper_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open mapper manifest: " + path);
  std::vector<MapperExamplePaths> out;
  MapperExamplePaths rec;
  while (in >> rec.latent >> rec.grid) out.push_back(rec);
  if (out.empty()) throw ValidationError("mapper manifest is empty: " + path);
  return out;
}

struct InvertFlags {
  std::int64_t steps = InversionConfig{}.steps;
  double step_size = InversionConfig{}.step_size;
  std::int64_t mean_samples = InversionConfig{}.mean_samples;
  int class_id = -1;
  std::uint64_t seed = 1;

  void add_to(CLI::App& app) {
    app.add_option("--steps", steps, "inversion descent steps");
    app.add_option("--step-size", step_size, "inversion initial step size");
    app.add_option("--mean-samples", mean_samples, "samples for the mean latent init");
    app.add_option("--class-id", class_id, "class condition; -1 cycles all classes");
    app.add_option("--seed", seed, "random seed");
  }

  InversionConfig to_config() const {
    InversionConfig cfg;
    cfg.steps = steps;
    cfg.step_size = step_size;
    cfg.mean_samples = mean_samples;
    cfg.class_id = class_id;
    cfg.seed = seed;
    return cfg;
  }
};

int cmd_gen_data(const std::string& config_path, const std::string& out_dir) {
  const PipelineConfig cfg = PipelineConfig::from_config(Config::load(config_path));
  std::string screws_manifest, pairs_manifest;
  json out = stage_gen_data(cfg, out_dir, &screws_manifest, &pairs_manifest);
  out["screws_manifest"] = screws_manifest;
  out["pairs_manifest"] = pairs_manifest;
  print_json(out);
  return 0;
}

int cmd_train_gan(const std::string& config_path, const std::string& out_ckpt) {
  const PipelineConfig cfg = PipelineConfig::from_config(Config::load(config_path));
  if (cfg.screws_manifest.empty()) {
    throw ValidationError("train-gan: config must set data.screws_manifest");
  }
  const auto data = load_screw_manifest(cfg.screws_manifest, cfg.resolution);
  ensure_parent_dir(out_ckpt);
  print_json(stage_train_gan(cfg, data, out_ckpt));
  return 0;
}

int cmd_train_comparator(const std::string& config_path, const std::string& pairs_manifest,
                         const std::string& out_ckpt) {
  PipelineConfig cfg = PipelineConfig::from_config(Config::load(config_path));
  if (!pairs_manifest.empty()) cfg.pairs_manifest = pairs_manifest;
  if (cfg.pairs_manifest.empty()) {
    throw ValidationError("train-comparator: no pair manifest given (--pairs or data.pairs_manifest)");
  }
  const auto pairs = load_pair_manifest_grids(cfg.pairs_manifest, cfg.resolution);
  ensure_parent_dir(out_ckpt);
  print_json(stage_train_comparator(cfg, pairs, out_ckpt));
  return 0;
}

int cmd_invert(const std::string& gan_ckpt, const std::string& in_voxb,
               const std::string& out_latent, const InvertFlags& flags) {
  const auto gan = load_gan_checkpoint(gan_ckpt);
  const VoxelGrid target = read_voxb(in_voxb);
  InversionResult details;
  const LatentFile latent =
      invert_to_latent(gan.generator, target, flags.class_id, flags.to_config(),
                       file_fnv1a64_hex(gan_ckpt), &details);
  ensure_parent_dir(out_latent);
  save_latent_file(latent, out_latent);
  print_json(inversion_json(details, target));
  if (details.diverged) {
    throw std::runtime_error("inversion diverged (latent file retained at " + out_latent + ")");
  }
  return 0;
}

struct OptimizeFlags {
  double lambda1 = OptConfig{}.lambda1;
  double lambda2 = OptConfig{}.lambda2;
  double lambda3 = OptConfig{}.lambda3;
  bool squared_penalties = false;
  std::int64_t steps = OptConfig{}.steps;
  double step_size = OptConfig{}.step_size;

  void add_to(CLI::App& app) {
    app.add_option("--lambda1", lambda1, "latent distance weight");
    app.add_option("--lambda2", lambda2, "volume distance weight");
    app.add_option("--lambda3", lambda3, "masked protection weight");
    app.add_flag("--squared-penalties", squared_penalties, "square the penalty norms");
    app.add_option("--steps", steps, "optimization steps");
    app.add_option("--step-size", step_size, "initial step size");
  }

  OptConfig to_config() const {
    OptConfig cfg;
    cfg.lambda1 = lambda1;
    cfg.lambda2 = lambda2;
    cfg.lambda3 = lambda3;
    cfg.squared_penalties = squared_penalties;
    cfg.steps = steps;
    cfg.step_size = step_size;
    return cfg;
  }
};

int cmd_optimize_latent(const std::string& gan_ckpt, const std::string& comp_ckpt,
                        const std::string& in_voxb, const std::string& mask_path,
                        const std::string& latent_path, const std::string& out_voxb,
                        const std::string& out_latent, std::string trace_path,
                        const OptimizeFlags& opt_flags, const InvertFlags& inv_flags) {
  const auto gan = load_gan_checkpoint(gan_ckpt);
  const auto comp = load_comparator_checkpoint(comp_ckpt);
  const VoxelGrid target = read_voxb(in_voxb);
  VoxelGrid mask;
  if (!mask_path.empty()) mask = read_voxb(mask_path);
  if (trace_path.empty()) trace_path = out_voxb + ".trace.jsonl";

  json out;
  Tensor<float> w_s;
  int out_class = inv_flags.class_id;
  if (!latent_path.empty()) {
    const LatentFile latent = load_latent_file(latent_path);
    check_latent_hash(latent, gan_ckpt);
    w_s = latent.w;
    out_class = latent.class_id;
    out["latent"] = latent_path;
  } else {
    InversionConfig inv = inv_flags.to_config();
    InversionResult details = invert(gan.generator, target, inv);
    w_s = details.w;
    out["inversion"] = inversion_json(details, target);
    if (details.diverged) {
      throw std::runtime_error("inversion diverged before optimization");
    }
  }

  const LatentOptResult res =
      run_latent_optimization(gan.generator, comp.comparator, target, w_s,
                              opt_flags.to_config(), mask_path.empty() ? nullptr : &mask);
  ensure_parent_dir(out_voxb);
  ensure_parent_dir(trace_path);
  write_jsonl_trace(res.trace, trace_path);
  write_voxb(binarize(signed_from_tensor(res.volume)), out_voxb);
  if (!out_latent.empty()) {
    LatentFile moved;
    moved.d_w = gan.generator.config().d_w;
    moved.w = res.w;
    moved.class_id = out_class;
    moved.gan_checkpoint_hash = file_fnv1a64_hex(gan_ckpt);
    ensure_parent_dir(out_latent);
    save_latent_file(moved, out_latent);
  }
  out["best_step"] = res.best_step;
  out["initial"] = {{"total", res.trace.front().total},
                    {"comparator", res.trace.front().comparator}};
  const auto& best = res.trace[static_cast<std::size_t>(res.best_step)];
  out["best"] = {{"total", best.total}, {"comparator", best.comparator}};
  out["trace"] = trace_path;
  out["diverged"] = res.diverged;
  print_json(out);
  if (res.diverged) {
    throw std::runtime_error("latent optimization diverged (artifacts retained at " + out_voxb +
                             ")");
  }
  return 0;
}

int cmd_train_mapper(const std::string& gan_ckpt, const std::string& comp_ckpt,
                     const std::string& manifest, const std::string& out_ckpt,
                     const MapperTrainConfig& cfg_in, double lambda1, double lambda2,
                     bool squared) {
  const auto gan = load_gan_checkpoint(gan_ckpt);
  const auto comp = load_comparator_checkpoint(comp_ckpt);
  MapperTrainConfig cfg = cfg_in;
  cfg.loss.lambda1 = lambda1;
  cfg.loss.lambda2 = lambda2;
  cfg.loss.lambda3 = 0.0;
  cfg.loss.squared_penalties = squared;

  std::vector<LatentExample<float>> examples;
  for (const auto& rec : read_mapper_manifest(manifest)) {
    const LatentFile latent = load_latent_file(resolve_entry(manifest, rec.latent));
    check_latent_hash(latent, gan_ckpt);
    LatentExample<float> ex;
    ex.w = latent.w;
    ex.volume = to_signed(read_voxb(resolve_entry(manifest, rec.grid))).as_tensor();
    examples.push_back(std::move(ex));
  }

  Mapper<float> mapper(gan.generator.config().d_w, cfg.seed);
  const auto result = train_mapper(gan.generator, comp.comparator, mapper, examples, cfg);
  if (result.aborted) throw std::runtime_error("mapper training aborted: " + result.abort_reason);
  ensure_parent_dir(out_ckpt);
  save_mapper_checkpoint(mapper, cfg.epochs, cfg.seed, out_ckpt);
  print_json({{"epochs", cfg.epochs},
              {"examples", static_cast<std::int64_t>(examples.size())},
              {"first_comparator_term", result.log.front().comparator},
              {"last_comparator_term", result.log.back().comparator},
              {"checkpoint", out_ckpt},
              {"checkpoint_hash", file_fnv1a64_hex(out_ckpt)}});
  return 0;
}

int cmd_apply_mapper(const std::string& gan_ckpt, const std::string& mapper_ckpt,
                     const std::string& latent_path, const std::string& out_voxb,
                     const std::string& out_latent) {
  const auto gan = load_gan_checkpoint(gan_ckpt);
  const auto loaded = load_mapper_checkpoint(mapper_ckpt);
  const LatentFile latent = load_latent_file(latent_path);
  check_latent_hash(latent, gan_ckpt);
  const auto [w_moved, volume] = apply_mapper(gan.generator, loaded.mapper, latent.w);
  ensure_parent_dir(out_voxb);
  write_voxb(binarize(signed_from_tensor(volume)), out_voxb);
  if (!out_latent.empty()) {
    LatentFile moved = latent;
    moved.w = w_moved;
    ensure_parent_dir(out_latent);
    save_latent_file(moved, out_latent);
  }
  double shift = 0.0;
  for (std::int64_t i = 0; i < w_moved.numel(); ++i) {
    const double d = static_cast<double>(w_moved[i]) - static_cast<double>(latent.w[i]);
    shift += d * d;
  }
  print_json({{"out", out_voxb}, {"latent_shift_norm", std::sqrt(shift)}});
  return 0;
}

int cmd_eval_fid(const std::string& gan_ckpt, const std::string& manifest,
                 std::int64_t per_label, const std::string& out_report, std::uint64_t seed) {
  const auto gan = load_gan_checkpoint(gan_ckpt);
  const auto screws = load_screw_manifest(manifest, gan.generator.config().resolution);
  std::vector<VoxelGrid> grids;
  std::vector<int> labels;
  for (const auto& rec : screws) {
    grids.push_back(rec.grid);
    labels.push_back(rec.class_id);
  }
  RandomConvExtractor extractor(1234, 64);
  const FidReport report =
      slice_fid(gan.generator, grids, labels, per_label, extractor, seed);
  const json out = fid_report_json(report);
  ensure_parent_dir(out_report);
  const std::string text = out.dump(2) + "\n";
  write_file_bytes(out_report, text.data(), text.size());
  print_json(out);
  return 0;
}

int cmd_render(const std::string& in_voxb, const std::string& out_dir) {
  const VoxelGrid grid = read_voxb(in_voxb);
  render_grid_slices(grid, out_dir);
  print_json({{"out", out_dir},
              {"resolution", grid.resolution},
              {"images", {"axial.pgm", "coronal.pgm", "sagittal.pgm"}}});
  return 0;
}

int cmd_voxelize(const std::string& in_stl, std::int64_t resolution,
                 const std::string& out_voxb) {
  const TriangleMesh mesh = parse_stl(read_file_bytes(in_stl));
  const VoxelizeResult res = voxelize(mesh, resolution);
  ensure_parent_dir(out_voxb);
  write_voxb(res.grid, out_voxb);
  print_json({{"out", out_voxb},
              {"resolution", resolution},
              {"zero_volume", res.zero_volume},
              {"parity_mismatch", res.parity_mismatch}});
  return 0;
}

int cmd_pipeline(const std::string& config_path, const std::string& out_dir) {
  const PipelineConfig cfg = PipelineConfig::from_config(Config::load(config_path));
  std::string failed_stage;
  const int rc = run_pipeline(cfg, out_dir, &failed_stage);
  if (rc != 0) {
    throw std::runtime_error("failed at stage " + failed_stage + " (see " +
                             (fs::path(out_dir) / "summary.json").string() + ")");
  }
  const auto bytes = read_file_bytes((fs::path(out_dir) / "summary.json").string());
  std::fwrite(bytes.data(), 1, bytes.size(), stdout);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"latent-space optimization of voxelized components"};
  app.require_subcommand(1);

  std::string config_path, out_path, in_path, gan_ckpt, comp_ckpt, mapper_ckpt;
  std::string mask_path, latent_path, out_latent, trace_path, manifest;
  std::int64_t per_label = 2;
  std::int64_t resolution = 32;
  std::uint64_t seed = 1;
  InvertFlags inv_flags;
  OptimizeFlags opt_flags;
  MapperTrainConfig mapper_cfg;
  double m_lambda1 = OptConfig{}.lambda1;
  double m_lambda2 = OptConfig{}.lambda2;
  bool m_squared = false;

  auto* gen_data = app.add_subcommand("gen-data", "generate screw and pair datasets");
  gen_data->add_option("--config", config_path, "flat key=value config")->required();
  gen_data->add_option("--out", out_path, "output dataset directory")->required();

  auto* train_gan = app.add_subcommand("train-gan", "train the class-conditional generator");
  train_gan->add_option("--config", config_path, "flat key=value config")->required();
  train_gan->add_option("--out", out_path, "output checkpoint path")->required();

  auto* train_comp = app.add_subcommand("train-comparator", "train the pairwise comparator");
  train_comp->add_option("--config", config_path, "flat key=value config")->required();
  train_comp->add_option("--pairs", manifest, "pair manifest (overrides config)");
  train_comp->add_option("--out", out_path, "output checkpoint path")->required();

  auto* invert_cmd = app.add_subcommand("invert", "project a voxel grid into latent space");
  invert_cmd->add_option("--gan", gan_ckpt, "generator checkpoint")->required();
  invert_cmd->add_option("--in", in_path, "target VOXB file")->required();
  invert_cmd->add_option("--out", out_path, "output latent file")->required();
  inv_flags.add_to(*invert_cmd);

  auto* optimize = app.add_subcommand("optimize-latent", "optimize one component in latent space");
  optimize->add_option("--gan", gan_ckpt, "generator checkpoint")->required();
  optimize->add_option("--comparator", comp_ckpt, "comparator checkpoint")->required();
  optimize->add_option("--in", in_path, "target VOXB file")->required();
  optimize->add_option("--mask", mask_path, "protected-region VOXB mask");
  optimize->add_option("--latent", latent_path, "start latent (skips inversion)");
  optimize->add_option("--out", out_path, "output VOXB file")->required();
  optimize->add_option("--out-latent", out_latent, "also save the optimized latent");
  optimize->add_option("--trace", trace_path, "JSON-lines loss trace (default <out>.trace.jsonl)");
  opt_flags.add_to(*optimize);
  InvertFlags opt_inv_flags;
  optimize->add_option("--invert-steps", opt_inv_flags.steps, "inversion descent steps");
  optimize->add_option("--invert-step-size", opt_inv_flags.step_size,
                       "inversion initial step size");
  optimize->add_option("--mean-samples", opt_inv_flags.mean_samples,
                       "samples for the mean latent init");
  optimize->add_option("--class-id", opt_inv_flags.class_id,
                       "class condition; -1 cycles all classes");
  optimize->add_option("--seed", opt_inv_flags.seed, "inversion seed");

  auto* train_map = app.add_subcommand("train-mapper", "train the latent mapper network");
  train_map->add_option("--gan", gan_ckpt, "generator checkpoint")->required();
  train_map->add_option("--comparator", comp_ckpt, "comparator checkpoint")->required();
  train_map->add_option("--data", manifest, "manifest of latent/voxb example pairs")->required();
  train_map->add_option("--out", out_path, "output checkpoint path")->required();
  train_map->add_option("--epochs", mapper_cfg.epochs, "training epochs");
  train_map->add_option("--batch", mapper_cfg.batch_size, "batch size");
  train_map->add_option("--lr", mapper_cfg.learning_rate, "Adam learning rate");
  train_map->add_option("--lambda1", m_lambda1, "latent distance weight");
  train_map->add_option("--lambda2", m_lambda2, "volume distance weight");
  train_map->add_flag("--squared-penalties", m_squared, "square the penalty norms");
  train_map->add_option("--seed", mapper_cfg.seed, "random seed");

  auto* apply_map = app.add_subcommand("apply-mapper", "move one latent with a trained mapper");
  apply_map->add_option("--gan", gan_ckpt, "generator checkpoint")->required();
  apply_map->add_option("--mapper", mapper_ckpt, "mapper checkpoint")->required();
  apply_map->add_option("--latent", latent_path, "input latent file")->required();
  apply_map->add_option("--out", out_path, "output VOXB file")->required();
  apply_map->add_option("--out-latent", out_latent, "also save the moved latent");

  auto* eval_fid = app.add_subcommand("eval-fid", "slice-wise distribution distance report");
  eval_fid->add_option("--gan", gan_ckpt, "generator checkpoint")->required();
  eval_fid->add_option("--data", manifest, "screw manifest of real grids")->required();
  eval_fid->add_option("--per-label", per_label, "fakes per label present in the data");
  eval_fid->add_option("--out", out_path, "output report JSON")->required();
  eval_fid->add_option("--seed", seed, "synthesis seed");

  auto* render = app.add_subcommand("render", "write middle-slice PGM images");
  render->add_option("--in", in_path, "input VOXB file")->required();
  render->add_option("--out", out_path, "output directory")->required();

  auto* voxelize_cmd = app.add_subcommand("voxelize", "rasterize an STL mesh to a voxel grid");
  voxelize_cmd->add_option("--in", in_path, "input STL file")->required();
  voxelize_cmd->add_option("--resolution", resolution, "cubic grid resolution");
  voxelize_cmd->add_option("--out", out_path, "output VOXB file")->required();

  auto* pipeline = app.add_subcommand("pipeline", "run every stage end to end");
  pipeline->add_option("--config", config_path, "flat key=value config")->required();
  pipeline->add_option("--out", out_path, "artifact directory")->required();

  CLI11_PARSE(app, argc, argv);

  const std::string sub = app.get_subcommands().front()->get_name();
  try {
    if (gen_data->parsed()) return cmd_gen_data(config_path, out_path);
    if (train_gan->parsed()) return cmd_train_gan(config_path, out_path);
    if (train_comp->parsed()) return cmd_train_comparator(config_path, manifest, out_path);
    if (invert_cmd->parsed()) return cmd_invert(gan_ckpt, in_path, out_path, inv_flags);
    if (optimize->parsed()) {
      return cmd_optimize_latent(gan_ckpt, comp_ckpt, in_path, mask_path, latent_path, out_path,
                                 out_latent, trace_path, opt_flags, opt_inv_flags);
    }
    if (train_map->parsed()) {
      return cmd_train_mapper(gan_ckpt, comp_ckpt, manifest, out_path, mapper_cfg, m_lambda1,
                              m_lambda2, m_squared);
    }
    if (apply_map->parsed()) {
      return cmd_apply_mapper(gan_ckpt, mapper_ckpt, latent_path, out_path, out_latent);
    }
    if (eval_fid->parsed()) return cmd_eval_fid(gan_ckpt, manifest, per_label, out_path, seed);
    if (render->parsed()) return cmd_render(in_path, out_path);
    if (voxelize_cmd->parsed()) return cmd_voxelize(in_path, resolution, out_path);
    if (pipeline->parsed()) return cmd_pipeline(config_path, out_path);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "voxopt %s: %s\n", sub.c_str(), e.what());
    return 1;
  }
  std::fprintf(stderr, "voxopt: no subcommand handled\n");
  return 1;
}
