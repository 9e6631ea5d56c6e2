#pragma once

#include <json.hpp>

#include <cstdint>
#include <string>
#include <vector>

#include "voxopt/checkpoint.hpp"
#include "voxopt/comparator_train.hpp"
#include "voxopt/config.hpp"
#include "voxopt/fid.hpp"
#include "voxopt/gan_train.hpp"
#include "voxopt/inversion.hpp"
#include "voxopt/optimize.hpp"
#include "voxopt/shapegen.hpp"

namespace voxopt {

/// Every knob of the end-to-end run, resolved from a flat key=value file.
/// The master seed is mandatory in config files; per-stage seeds derive from
/// it deterministically.
struct PipelineConfig {
  std::int64_t resolution = 32;
  std::uint64_t seed = 1;

  std::int64_t screw_count = 200;
  std::int64_t pair_count = 400;
  /// Optional pre-existing manifests; empty means generate into the run dir.
  std::string screws_manifest;
  std::string pairs_manifest;

  GeneratorConfig gen;
  DiscriminatorConfig disc;
  GanTrainConfig gan_train;

  ComparatorConfig comp;
  ComparatorTrainConfig comp_train;

  InversionConfig invert;
  std::int64_t invert_count = 40;

  OptConfig opt;
  std::string mask_path;
  std::int64_t eval_count = 20;

  MapperTrainConfig mapper_train;

  std::int64_t fid_per_label = 2;
  /// Which manipulation path the pipeline exercises after inversion:
  /// "optimize", "mapper", or "both".
  std::string mode = "both";

  void validate() const;
  /// Reads every known key, applies the defaults above for absent ones, and
  /// rejects unknown keys so typos cannot silently fall back.
  static PipelineConfig from_config(const Config& cfg);
};

/// Writes screw and pair datasets plus their manifests under `dir` and points
/// the two manifest outputs at them. Returns the stage summary.
nlohmann::json stage_gen_data(const PipelineConfig& cfg, const std::string& dir,
                              std::string* screws_manifest, std::string* pairs_manifest);

/// Manifest loaders; relative entries resolve against the manifest location.
std::vector<LabeledGrid> load_screw_manifest(const std::string& manifest,
                                             std::int64_t resolution);
std::vector<PairSample> load_pair_manifest_grids(const std::string& manifest,
                                                 std::int64_t resolution);

nlohmann::json stage_train_gan(const PipelineConfig& cfg, const std::vector<LabeledGrid>& data,
                               const std::string& out_ckpt);
nlohmann::json stage_train_comparator(const PipelineConfig& cfg,
                                      const std::vector<PairSample>& pairs,
                                      const std::string& out_ckpt);

/// Inverts one grid into a saveable latent record. `details` receives the
/// full optimization result when given (including the diverged flag, which
/// callers must map to a failure after retaining the artifact).
LatentFile invert_to_latent(const Generator<float>& gen, const VoxelGrid& target, int class_id,
                            const InversionConfig& cfg, const std::string& gan_hash,
                            InversionResult* details = nullptr);

/// Inversion followed by comparator-guided latent optimization of one
/// component, the shared core of the optimize-latent subcommand and the
/// pipeline's evaluation stage.
struct OptimizeRun {
  InversionResult inversion;
  LatentOptResult opt;
};
OptimizeRun optimize_component(const Generator<float>& gen, const Comparator<float>& comp,
                               const VoxelGrid& target, int class_id,
                               const InversionConfig& inv_cfg, const OptConfig& opt_cfg,
                               const VoxelGrid* mask);

void write_jsonl_trace(const std::vector<OptLossParts>& trace, const std::string& path);
void render_grid_slices(const VoxelGrid& grid, const std::string& out_dir);
nlohmann::json fid_report_json(const FidReport& report);

/// Runs every stage in order, writing artifacts and summary.json under
/// `out_dir`. Returns 0 on success; on a stage failure it names the stage,
/// keeps all partial artifacts, and returns nonzero.
int run_pipeline(const PipelineConfig& cfg, const std::string& out_dir,
                 std::string* failed_stage = nullptr);

}  // namespace voxopt
