#include "voxopt/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "voxopt/common.hpp"

namespace voxopt {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Stage seed lanes derived from the master seed.
constexpr std::uint64_t kDataLane = 1;
constexpr std::uint64_t kGanLane = 2;
constexpr std::uint64_t kComparatorLane = 3;
constexpr std::uint64_t kInvertLane = 4;
constexpr std::uint64_t kEvalInvertLane = 5;
constexpr std::uint64_t kFidLane = 7;
constexpr std::uint64_t kGenInitLane = 20;
constexpr std::uint64_t kDiscInitLane = 21;
constexpr std::uint64_t kCompInitLane = 22;
constexpr std::uint64_t kMapperInitLane = 23;
constexpr std::uint64_t kEvalDataLane = 100;

class StageTimer {
 public:
  StageTimer() : start_(std::chrono::steady_clock::now()) {}
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

std::string numbered(const char* prefix, std::size_t i, const char* suffix) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%s%04zu%s", prefix, i, suffix);
  return buf;
}

std::string resolve_entry(const std::string& manifest, const std::string& entry) {
  fs::path p(entry);
  if (p.is_absolute()) return entry;
  return (fs::path(manifest).parent_path() / p).string();
}

double median(std::vector<double> values) {
  if (values.empty()) throw ValidationError("median of an empty set");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  if (n % 2 == 1) return values[n / 2];
  return 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

json opt_parts_json(std::int64_t step, const OptLossParts& p) {
  return {{"step", step},          {"total", p.total},   {"comparator", p.comparator},
          {"latent_l2", p.latent_l2}, {"data_l2", p.data_l2}, {"mask_l2", p.mask_l2}};
}

json config_echo(const PipelineConfig& c) {
  return {{"resolution", c.resolution},
          {"seed", c.seed},
          {"mode", c.mode},
          {"screw_count", c.screw_count},
          {"pair_count", c.pair_count},
          {"gan",
           {{"d_z", c.gen.d_z},
            {"d_w", c.gen.d_w},
            {"mapping_layers", c.gen.mapping_layers},
            {"widths", c.gen.widths},
            {"disc_widths", c.disc.widths},
            {"steps", c.gan_train.steps},
            {"batch_size", c.gan_train.batch_size},
            {"learning_rate", c.gan_train.learning_rate},
            {"r1_gamma", c.gan_train.r1_gamma},
            {"apa_enabled", c.gan_train.apa_enabled}}},
          {"comparator",
           {{"widths", c.comp.widths},
            {"epochs", c.comp_train.epochs},
            {"batch_size", c.comp_train.batch_size},
            {"learning_rate", c.comp_train.learning_rate},
            {"val_fraction", c.comp_train.val_fraction}}},
          {"invert",
           {{"steps", c.invert.steps},
            {"step_size", c.invert.step_size},
            {"mean_samples", c.invert.mean_samples},
            {"count", c.invert_count}}},
          {"optimize",
           {{"lambda1", c.opt.lambda1},
            {"lambda2", c.opt.lambda2},
            {"lambda3", c.opt.lambda3},
            {"squared_penalties", c.opt.squared_penalties},
            {"steps", c.opt.steps},
            {"step_size", c.opt.step_size},
            {"mask", c.mask_path}}},
          {"eval_count", c.eval_count},
          {"mapper",
           {{"epochs", c.mapper_train.epochs},
            {"batch_size", c.mapper_train.batch_size},
            {"learning_rate", c.mapper_train.learning_rate}}},
          {"fid_per_label", c.fid_per_label}};
}

void write_text(const std::string& path, const std::string& text) {
  write_file_bytes(path, text.data(), text.size());
}

}  // namespace

void PipelineConfig::validate() const {
  if (resolution < 4) throw ValidationError("pipeline: resolution too small");
  if (screw_count < 2) throw ValidationError("pipeline: need at least 2 screws");
  if (pair_count < 2) throw ValidationError("pipeline: need at least 2 pairs");
  if (invert_count < 1) throw ValidationError("pipeline: invert count must be positive");
  if (eval_count < 1) throw ValidationError("pipeline: eval count must be positive");
  if (fid_per_label < 1) throw ValidationError("pipeline: fid per_label must be positive");
  if (mode != "both" && mode != "optimize" && mode != "mapper") {
    throw ValidationError("pipeline: mode must be both, optimize, or mapper");
  }
  gen.validate();
  disc.validate();
  comp.validate();
  gan_train.validate();
  comp_train.validate();
  invert.validate();
  opt.validate();
  mapper_train.validate();
  if (gen.resolution != resolution || disc.resolution != resolution ||
      comp.resolution != resolution) {
    throw ValidationError("pipeline: model resolutions must match the pipeline resolution");
  }
  if (opt.lambda3 > 0.0 && mask_path.empty()) {
    throw ValidationError("pipeline: lambda3 > 0 needs a mask path");
  }
  for (const std::string& path : {mask_path, screws_manifest, pairs_manifest}) {
    if (!path.empty() && !fs::exists(path)) {
      throw ValidationError("pipeline: referenced path does not exist: " + path);
    }
  }
}

PipelineConfig PipelineConfig::from_config(const Config& cfg) {
  PipelineConfig c;
  c.resolution = cfg.get_int("resolution", c.resolution);
  // An unseeded run must not fall back to a silent default.
  c.seed = static_cast<std::uint64_t>(cfg.get_int("seed"));
  c.screw_count = cfg.get_int("data.screws", c.screw_count);
  c.pair_count = cfg.get_int("data.pairs", c.pair_count);
  c.screws_manifest = cfg.get_string("data.screws_manifest", "");
  c.pairs_manifest = cfg.get_string("data.pairs_manifest", "");

  c.gen.resolution = c.resolution;
  c.gen.num_classes = kNumScrewClasses;
  c.gen.d_z = cfg.get_int("gan.d_z", 64);
  c.gen.d_w = cfg.get_int("gan.d_w", 64);
  c.gen.mapping_layers = cfg.get_int("gan.mapping_layers", 2);
  c.gen.widths = cfg.get_int_list("gan.widths", GeneratorConfig::desk_scale(c.resolution).widths);

  c.disc.resolution = c.resolution;
  c.disc.num_classes = kNumScrewClasses;
  c.disc.widths =
      cfg.get_int_list("gan.disc_widths", DiscriminatorConfig::desk_scale(c.resolution).widths);

  c.gan_train.steps = cfg.get_int("gan.steps", c.gan_train.steps);
  c.gan_train.batch_size = cfg.get_int("gan.batch", c.gan_train.batch_size);
  c.gan_train.learning_rate = cfg.get_double("gan.lr", c.gan_train.learning_rate);
  c.gan_train.r1_gamma = cfg.get_double("gan.r1_gamma", c.gan_train.r1_gamma);
  c.gan_train.r1_interval = cfg.get_int("gan.r1_interval", c.gan_train.r1_interval);
  c.gan_train.apa_enabled = cfg.get_bool("gan.apa", c.gan_train.apa_enabled);
  c.gan_train.apa_target = cfg.get_double("gan.apa_target", c.gan_train.apa_target);
  c.gan_train.apa_step = cfg.get_double("gan.apa_step", c.gan_train.apa_step);
  c.gan_train.apa_interval = cfg.get_int("gan.apa_interval", c.gan_train.apa_interval);
  c.gan_train.apa_max = cfg.get_double("gan.apa_max", c.gan_train.apa_max);
  c.gan_train.seed = derive_seed(c.seed, kGanLane);

  c.comp.resolution = c.resolution;
  c.comp.widths = cfg.get_int_list("comparator.widths", c.comp.widths);
  c.comp_train.epochs = cfg.get_int("comparator.epochs", c.comp_train.epochs);
  c.comp_train.batch_size = cfg.get_int("comparator.batch", c.comp_train.batch_size);
  c.comp_train.learning_rate = cfg.get_double("comparator.lr", c.comp_train.learning_rate);
  c.comp_train.val_fraction = cfg.get_double("comparator.val_fraction", c.comp_train.val_fraction);
  c.comp_train.seed = derive_seed(c.seed, kComparatorLane);

  c.invert.steps = cfg.get_int("invert.steps", c.invert.steps);
  c.invert.step_size = cfg.get_double("invert.step_size", c.invert.step_size);
  c.invert.mean_samples = cfg.get_int("invert.mean_samples", c.invert.mean_samples);
  c.invert_count = cfg.get_int("invert.count", c.invert_count);

  c.opt.lambda1 = cfg.get_double("optimize.lambda1", c.opt.lambda1);
  c.opt.lambda2 = cfg.get_double("optimize.lambda2", c.opt.lambda2);
  c.opt.lambda3 = cfg.get_double("optimize.lambda3", c.opt.lambda3);
  c.opt.squared_penalties = cfg.get_bool("optimize.squared_penalties", c.opt.squared_penalties);
  c.opt.steps = cfg.get_int("optimize.steps", c.opt.steps);
  c.opt.step_size = cfg.get_double("optimize.step_size", c.opt.step_size);
  c.mask_path = cfg.get_string("optimize.mask", "");
  c.eval_count = cfg.get_int("eval.count", c.eval_count);

  c.mapper_train.loss = c.opt;
  c.mapper_train.loss.lambda3 = 0.0;
  c.mapper_train.epochs = cfg.get_int("mapper.epochs", c.mapper_train.epochs);
  c.mapper_train.batch_size = cfg.get_int("mapper.batch", c.mapper_train.batch_size);
  c.mapper_train.learning_rate = cfg.get_double("mapper.lr", c.mapper_train.learning_rate);
  c.mapper_train.seed = derive_seed(c.seed, kMapperInitLane);

  c.fid_per_label = cfg.get_int("fid.per_label", c.fid_per_label);
  c.mode = cfg.get_string("pipeline.mode", c.mode);

  const auto unused = cfg.unused_keys();
  if (!unused.empty()) {
    std::string all;
    for (const auto& k : unused) all += (all.empty() ? "" : ", ") + k;
    throw ValidationError("unknown config keys: " + all);
  }
  c.validate();
  return c;
}

json stage_gen_data(const PipelineConfig& cfg, const std::string& dir,
                    std::string* screws_manifest, std::string* pairs_manifest) {
  fs::create_directories(fs::path(dir) / "screws");
  fs::create_directories(fs::path(dir) / "pairs");

  json out;
  if (cfg.screws_manifest.empty()) {
    const auto screws =
        make_screw_dataset(cfg.screw_count, derive_seed(cfg.seed, kDataLane), cfg.resolution);
    std::vector<GridPath> entries;
    for (std::size_t i = 0; i < screws.size(); ++i) {
      const std::string rel = numbered("screws/", i, ".voxb");
      write_voxb(screws[i].grid, (fs::path(dir) / rel).string());
      entries.push_back({rel, screws[i].class_id});
    }
    *screws_manifest = (fs::path(dir) / "screws.txt").string();
    write_grid_manifest(entries, *screws_manifest);
    out["screws"] = static_cast<std::int64_t>(screws.size());
  } else {
    *screws_manifest = cfg.screws_manifest;
    out["screws_manifest"] = cfg.screws_manifest;
  }

  if (cfg.pairs_manifest.empty()) {
    const auto pairs = make_pair_dataset(cfg.pair_count,
                                         derive_seed(derive_seed(cfg.seed, kDataLane), 1),
                                         cfg.resolution);
    std::vector<PairPaths> entries;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      const std::string rel_a = numbered("pairs/", i, "_a.voxb");
      const std::string rel_b = numbered("pairs/", i, "_b.voxb");
      write_voxb(pairs[i].first, (fs::path(dir) / rel_a).string());
      write_voxb(pairs[i].second, (fs::path(dir) / rel_b).string());
      entries.push_back({rel_a, rel_b, pairs[i].label});
    }
    *pairs_manifest = (fs::path(dir) / "pairs.txt").string();
    write_pair_manifest(entries, *pairs_manifest);
    out["pairs"] = static_cast<std::int64_t>(pairs.size());
  } else {
    *pairs_manifest = cfg.pairs_manifest;
    out["pairs_manifest"] = cfg.pairs_manifest;
  }
  return out;
}

std::vector<LabeledGrid> load_screw_manifest(const std::string& manifest,
                                             std::int64_t resolution) {
  std::vector<LabeledGrid> out;
  for (const auto& entry : read_grid_manifest(manifest)) {
    LabeledGrid rec;
    rec.grid = read_voxb(resolve_entry(manifest, entry.path));
    rec.class_id = entry.class_id;
    if (rec.grid.resolution != resolution) {
      throw ValidationError("screw grid resolution mismatch in " + entry.path);
    }
    out.push_back(std::move(rec));
  }
  if (out.empty()) throw ValidationError("screw manifest is empty: " + manifest);
  return out;
}

std::vector<PairSample> load_pair_manifest_grids(const std::string& manifest,
                                                 std::int64_t resolution) {
  std::vector<PairSample> out;
  for (const auto& entry : read_pair_manifest(manifest)) {
    PairSample rec;
    rec.first = read_voxb(resolve_entry(manifest, entry.first));
    rec.second = read_voxb(resolve_entry(manifest, entry.second));
    rec.label = entry.label;
    if (rec.first.resolution != resolution || rec.second.resolution != resolution) {
      throw ValidationError("pair grid resolution mismatch in " + entry.first);
    }
    out.push_back(std::move(rec));
  }
  if (out.empty()) throw ValidationError("pair manifest is empty: " + manifest);
  return out;
}

json stage_train_gan(const PipelineConfig& cfg, const std::vector<LabeledGrid>& data,
                     const std::string& out_ckpt) {
  Generator<float> gen(cfg.gen, derive_seed(cfg.seed, kGenInitLane));
  Discriminator<float> disc(cfg.disc, derive_seed(cfg.seed, kDiscInitLane));
  const auto result = train_gan(gen, disc, data, cfg.gan_train);
  if (result.aborted) {
    throw std::runtime_error("gan training aborted: " + result.abort_reason);
  }
  save_gan_checkpoint(gen, disc, cfg.gan_train.steps, cfg.gan_train.seed, out_ckpt);
  const auto& last = result.log.back();
  return {{"steps", cfg.gan_train.steps},
          {"generator_parameters", gen.params().parameter_count()},
          {"discriminator_parameters", disc.params().parameter_count()},
          {"final",
           {{"d_loss", last.d_loss},
            {"g_loss", last.g_loss},
            {"r1", last.r1},
            {"r_t", last.r_t},
            {"apa_p", last.apa_p}}},
          {"checkpoint", out_ckpt},
          {"checkpoint_hash", file_fnv1a64_hex(out_ckpt)}};
}

json stage_train_comparator(const PipelineConfig& cfg, const std::vector<PairSample>& pairs,
                            const std::string& out_ckpt) {
  Comparator<float> comp(cfg.comp, derive_seed(cfg.seed, kCompInitLane));
  const auto result = train_comparator(comp, pairs, cfg.comp_train);
  if (result.aborted) {
    throw std::runtime_error("comparator training aborted: " + result.abort_reason);
  }
  save_comparator_checkpoint(comp, cfg.comp_train.epochs, cfg.comp_train.seed, out_ckpt);
  const auto& last = result.log.back();
  return {{"epochs", cfg.comp_train.epochs},
          {"train_count", result.train_count},
          {"val_count", result.val_count},
          {"final",
           {{"train_loss", last.train_loss},
            {"train_accuracy", last.train_accuracy},
            {"val_loss", last.val_loss},
            {"val_accuracy", last.val_accuracy}}},
          {"checkpoint", out_ckpt},
          {"checkpoint_hash", file_fnv1a64_hex(out_ckpt)}};
}

LatentFile invert_to_latent(const Generator<float>& gen, const VoxelGrid& target, int class_id,
                            const InversionConfig& cfg, const std::string& gan_hash,
                            InversionResult* details) {
  InversionResult res = invert(gen, target, cfg);
  LatentFile latent;
  latent.d_w = gen.config().d_w;
  latent.w = res.w;
  latent.class_id = class_id;
  latent.gan_checkpoint_hash = gan_hash;
  if (details != nullptr) *details = std::move(res);
  return latent;
}

OptimizeRun optimize_component(const Generator<float>& gen, const Comparator<float>& comp,
                               const VoxelGrid& target, int class_id,
                               const InversionConfig& inv_cfg, const OptConfig& opt_cfg,
                               const VoxelGrid* mask) {
  OptimizeRun run;
  InversionConfig inv = inv_cfg;
  inv.class_id = class_id;
  run.inversion = invert(gen, target, inv);
  run.opt = run_latent_optimization(gen, comp, target, run.inversion.w, opt_cfg, mask);
  return run;
}

void write_jsonl_trace(const std::vector<OptLossParts>& trace, const std::string& path) {
  std::string text;
  for (std::size_t i = 0; i < trace.size(); ++i) {
    text += opt_parts_json(static_cast<std::int64_t>(i), trace[i]).dump();
    text += "\n";
  }
  write_text(path, text);
}

void render_grid_slices(const VoxelGrid& grid, const std::string& out_dir) {
  fs::create_directories(out_dir);
  const auto mids = middle_slices(grid);
  write_pgm(mids.axial, (fs::path(out_dir) / "axial.pgm").string());
  write_pgm(mids.coronal, (fs::path(out_dir) / "coronal.pgm").string());
  write_pgm(mids.sagittal, (fs::path(out_dir) / "sagittal.pgm").string());
}

json fid_report_json(const FidReport& report) {
  return {{"axial", report.axial},
          {"coronal", report.coronal},
          {"sagittal", report.sagittal},
          {"extractor_id", report.extractor_id},
          {"real_count", report.real_count},
          {"fake_count", report.fake_count},
          {"warnings", report.warnings}};
}

int run_pipeline(const PipelineConfig& cfg, const std::string& out_dir,
                 std::string* failed_stage) {
  cfg.validate();
  fs::create_directories(out_dir);
  fs::create_directories(fs::path(out_dir) / "ckpt");
  fs::create_directories(fs::path(out_dir) / "latents");
  fs::create_directories(fs::path(out_dir) / "eval");
  fs::create_directories(fs::path(out_dir) / "traces");

  json summary;
  summary["config"] = config_echo(cfg);
  json stages;
  json timing;

  const std::string gan_ckpt = (fs::path(out_dir) / "ckpt" / "gan.vxck").string();
  const std::string comp_ckpt = (fs::path(out_dir) / "ckpt" / "comparator.vxck").string();
  const std::string mapper_ckpt = (fs::path(out_dir) / "ckpt" / "mapper.vxck").string();

  const bool with_optimize = cfg.mode == "both" || cfg.mode == "optimize";
  const bool with_mapper = cfg.mode == "both" || cfg.mode == "mapper";

  std::string stage = "setup";
  const auto fail = [&](const std::exception& e) {
    summary["failed_stage"] = stage;
    summary["error"] = e.what();
    summary["stages"] = stages;
    summary["timing"] = timing;
    write_text((fs::path(out_dir) / "summary.json").string(), summary.dump(2) + "\n");
    if (failed_stage != nullptr) *failed_stage = stage;
    return 1;
  };

  try {
    stage = "gen-data";
    std::string screws_manifest;
    std::string pairs_manifest;
    {
      StageTimer t;
      stages["gen_data"] =
          stage_gen_data(cfg, (fs::path(out_dir) / "data").string(), &screws_manifest,
                         &pairs_manifest);
      timing["gen_data_seconds"] = t.seconds();
    }

    stage = "train-gan";
    {
      StageTimer t;
      const auto screws = load_screw_manifest(screws_manifest, cfg.resolution);
      stages["train_gan"] = stage_train_gan(cfg, screws, gan_ckpt);
      stages["train_gan"]["checkpoint"] = "ckpt/gan.vxck";
      timing["train_gan_seconds"] = t.seconds();
    }

    stage = "train-comparator";
    {
      StageTimer t;
      const auto pairs = load_pair_manifest_grids(pairs_manifest, cfg.resolution);
      stages["train_comparator"] = stage_train_comparator(cfg, pairs, comp_ckpt);
      stages["train_comparator"]["checkpoint"] = "ckpt/comparator.vxck";
      timing["train_comparator_seconds"] = t.seconds();
    }

    stage = "invert";
    const std::string gan_hash = file_fnv1a64_hex(gan_ckpt);
    const auto eval_screws =
        make_screw_dataset(cfg.eval_count, derive_seed(cfg.seed, kEvalDataLane), cfg.resolution);
    std::vector<LatentFile> eval_latents;
    std::vector<LatentFile> train_latents;
    std::vector<LabeledGrid> train_screws;
    {
      StageTimer t;
      const auto gan = load_gan_checkpoint(gan_ckpt);

      double loss_sum = 0.0;
      double iou_sum = 0.0;
      std::int64_t inverted = 0;
      const auto invert_one = [&](const LabeledGrid& rec, std::uint64_t lane, std::size_t index,
                                  const std::string& latent_path) {
        InversionConfig inv = cfg.invert;
        inv.class_id = rec.class_id;
        inv.seed = derive_seed(derive_seed(cfg.seed, lane), static_cast<std::uint64_t>(index));
        InversionResult details;
        LatentFile latent =
            invert_to_latent(gan.generator, rec.grid, rec.class_id, inv, gan_hash, &details);
        save_latent_file(latent, latent_path);
        if (details.diverged) {
          throw std::runtime_error("inversion diverged on " + latent_path +
                                   " (partial latent retained)");
        }
        loss_sum += details.best_loss;
        iou_sum += voxel_iou(binarize(signed_from_tensor(details.volume)), rec.grid);
        ++inverted;
        return latent;
      };

      for (std::size_t i = 0; i < eval_screws.size(); ++i) {
        const std::string path =
            (fs::path(out_dir) / "latents" / numbered("eval_", i, ".json")).string();
        eval_latents.push_back(invert_one(eval_screws[i], kEvalInvertLane, i, path));
        const std::string orig =
            (fs::path(out_dir) / "eval" / numbered("orig_", i, ".voxb")).string();
        write_voxb(eval_screws[i].grid, orig);
      }

      if (with_mapper) {
        const auto screws = load_screw_manifest(screws_manifest, cfg.resolution);
        const auto use = std::min<std::size_t>(screws.size(),
                                               static_cast<std::size_t>(cfg.invert_count));
        for (std::size_t i = 0; i < use; ++i) {
          const std::string path =
              (fs::path(out_dir) / "latents" / numbered("train_", i, ".json")).string();
          train_latents.push_back(invert_one(screws[i], kInvertLane, i, path));
          train_screws.push_back(screws[i]);
        }
      }

      stages["invert"] = {{"count", inverted},
                          {"mean_best_loss", loss_sum / static_cast<double>(inverted)},
                          {"mean_iou", iou_sum / static_cast<double>(inverted)}};
      timing["invert_seconds"] = t.seconds();
    }

    VoxelGrid mask;
    const bool has_mask = !cfg.mask_path.empty();
    if (has_mask) mask = read_voxb(cfg.mask_path);

    if (with_optimize) {
      stage = "optimize-latent";
      StageTimer t;
      const auto gan = load_gan_checkpoint(gan_ckpt);
      const auto comp = load_comparator_checkpoint(comp_ckpt);

      std::int64_t improved = 0;
      std::vector<double> orig_scores;
      std::vector<double> opt_scores;
      for (std::size_t i = 0; i < eval_screws.size(); ++i) {
        const auto res = run_latent_optimization(gan.generator, comp.comparator,
                                                 eval_screws[i].grid, eval_latents[i].w, cfg.opt,
                                                 has_mask ? &mask : nullptr);
        write_jsonl_trace(res.trace,
                          (fs::path(out_dir) / "traces" / numbered("optimize_", i, ".jsonl"))
                              .string());
        const VoxelGrid optimized = binarize(signed_from_tensor(res.volume));
        write_voxb(optimized, (fs::path(out_dir) / "eval" / numbered("opt_", i, ".voxb")).string());
        if (res.diverged) {
          throw std::runtime_error("latent optimization diverged on evaluation screw " +
                                   std::to_string(i) + " (partial artifacts retained)");
        }
        const auto& first = res.trace.front();
        const auto& best = res.trace[static_cast<std::size_t>(res.best_step)];
        if (best.comparator < first.comparator) ++improved;
        orig_scores.push_back(grabability_score(eval_screws[i].grid));
        opt_scores.push_back(grabability_score(optimized));
      }
      stages["optimize_latent"] = {
          {"runs", static_cast<std::int64_t>(eval_screws.size())},
          {"comparator_improved_fraction",
           static_cast<double>(improved) / static_cast<double>(eval_screws.size())},
          {"grabability",
           {{"median_original", median(orig_scores)}, {"median_optimized", median(opt_scores)}}}};
      timing["optimize_latent_seconds"] = t.seconds();
    }

    if (with_mapper) {
      stage = "train-mapper";
      {
        StageTimer t;
        const auto gan = load_gan_checkpoint(gan_ckpt);
        const auto comp = load_comparator_checkpoint(comp_ckpt);
        std::vector<LatentExample<float>> examples;
        for (std::size_t i = 0; i < train_latents.size(); ++i) {
          LatentExample<float> ex;
          ex.w = train_latents[i].w;
          ex.volume = to_signed(train_screws[i].grid).as_tensor();
          examples.push_back(std::move(ex));
        }
        Mapper<float> mapper(cfg.gen.d_w, derive_seed(cfg.seed, kMapperInitLane));
        const auto result = train_mapper(gan.generator, comp.comparator, mapper, examples,
                                         cfg.mapper_train);
        if (result.aborted) {
          throw std::runtime_error("mapper training aborted: " + result.abort_reason);
        }
        std::string trace_text;
        for (const auto& row : result.log) {
          trace_text += json{{"epoch", row.epoch},
                             {"total", row.total},
                             {"comparator", row.comparator},
                             {"latent_l2", row.latent_l2},
                             {"data_l2", row.data_l2}}
                            .dump();
          trace_text += "\n";
        }
        write_text((fs::path(out_dir) / "traces" / "mapper.jsonl").string(), trace_text);
        save_mapper_checkpoint(mapper, cfg.mapper_train.epochs, cfg.mapper_train.seed,
                               mapper_ckpt);
        stages["train_mapper"] = {
            {"epochs", cfg.mapper_train.epochs},
            {"examples", static_cast<std::int64_t>(examples.size())},
            {"first_comparator_term", result.log.front().comparator},
            {"last_comparator_term", result.log.back().comparator},
            {"checkpoint", "ckpt/mapper.vxck"},
            {"checkpoint_hash", file_fnv1a64_hex(mapper_ckpt)}};
        timing["train_mapper_seconds"] = t.seconds();
      }

      stage = "apply-mapper";
      {
        StageTimer t;
        const auto gan = load_gan_checkpoint(gan_ckpt);
        const auto comp = load_comparator_checkpoint(comp_ckpt);
        const auto loaded = load_mapper_checkpoint(mapper_ckpt);
        std::int64_t mapped_wins = 0;
        for (std::size_t i = 0; i < eval_screws.size(); ++i) {
          const auto [w_moved, volume] =
              apply_mapper(gan.generator, loaded.mapper, eval_latents[i].w);
          const VoxelGrid mapped = binarize(signed_from_tensor(volume));
          write_voxb(mapped,
                     (fs::path(out_dir) / "eval" / numbered("mapped_", i, ".voxb")).string());
          const float p_original =
              comp.comparator.compare(to_signed(eval_screws[i].grid).as_tensor(), volume);
          if (p_original < 0.5f) ++mapped_wins;
        }
        stages["apply_mapper"] = {
            {"held_out", static_cast<std::int64_t>(eval_screws.size())},
            {"fraction_mapped_preferred",
             static_cast<double>(mapped_wins) / static_cast<double>(eval_screws.size())}};
        timing["apply_mapper_seconds"] = t.seconds();
      }
    }

    stage = "eval-fid";
    {
      StageTimer t;
      const auto gan = load_gan_checkpoint(gan_ckpt);
      const auto screws = load_screw_manifest(screws_manifest, cfg.resolution);
      std::vector<VoxelGrid> grids;
      std::vector<int> labels;
      for (const auto& rec : screws) {
        grids.push_back(rec.grid);
        labels.push_back(rec.class_id);
      }
      RandomConvExtractor extractor(1234, 64);
      const auto report = slice_fid(gan.generator, grids, labels, cfg.fid_per_label, extractor,
                                    derive_seed(cfg.seed, kFidLane));
      const json report_json = fid_report_json(report);
      write_text((fs::path(out_dir) / "fid_report.json").string(), report_json.dump(2) + "\n");
      stages["eval_fid"] = report_json;
      timing["eval_fid_seconds"] = t.seconds();
    }
  } catch (const std::exception& e) {
    return fail(e);
  }

  summary["stages"] = stages;
  summary["timing"] = timing;
  write_text((fs::path(out_dir) / "summary.json").string(), summary.dump(2) + "\n");
  return 0;
}

}  // namespace voxopt
