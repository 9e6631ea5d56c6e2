#include "voxopt/checkpoint.hpp"

#include <json.hpp>

#include <cmath>
#include <cstring>
#include <vector>

#include "voxopt/common.hpp"

namespace voxopt {
namespace {

using nlohmann::json;

constexpr char kMagic[4] = {'V', 'X', 'C', 'K'};
constexpr unsigned char kVersion = 1;

json tensor_directory(const ParamStore<float>& store) {
  json dir = json::array();
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto& e = store.entry(i);
    dir.push_back({{"name", e.name}, {"shape", e.value.shape()}});
  }
  return dir;
}

void append_payload(std::vector<unsigned char>& out, const ParamStore<float>& store) {
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto& t = store.entry(i).value;
    const auto bytes = static_cast<std::size_t>(t.numel()) * sizeof(float);
    const std::size_t at = out.size();
    out.resize(at + bytes);
    std::memcpy(out.data() + at, t.data(), bytes);
  }
}

void write_checkpoint(const json& header, const std::vector<const ParamStore<float>*>& stores,
                      const std::string& path) {
  const std::string head = header.dump();
  std::vector<unsigned char> out;
  out.insert(out.end(), kMagic, kMagic + 4);
  out.push_back(kVersion);
  const auto len = static_cast<std::uint32_t>(head.size());
  out.push_back(static_cast<unsigned char>(len & 0xff));
  out.push_back(static_cast<unsigned char>((len >> 8) & 0xff));
  out.push_back(static_cast<unsigned char>((len >> 16) & 0xff));
  out.push_back(static_cast<unsigned char>((len >> 24) & 0xff));
  out.insert(out.end(), head.begin(), head.end());
  for (const auto* store : stores) append_payload(out, *store);
  write_file_bytes(path, out.data(), out.size());
}

struct RawCheckpoint {
  json header;
  std::vector<unsigned char> payload;
};

RawCheckpoint read_checkpoint(const std::string& path, const std::string& expected_kind) {
  const auto bytes = read_file_bytes(path);
  if (bytes.size() < 9) throw ParseError("checkpoint file too short", bytes.size());
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw ParseError("bad checkpoint magic", 0);
  if (bytes[4] != kVersion) throw ParseError("unsupported checkpoint version", 4);
  const std::uint32_t len = static_cast<std::uint32_t>(bytes[5]) |
                            (static_cast<std::uint32_t>(bytes[6]) << 8) |
                            (static_cast<std::uint32_t>(bytes[7]) << 16) |
                            (static_cast<std::uint32_t>(bytes[8]) << 24);
  if (bytes.size() < 9 + static_cast<std::size_t>(len)) {
    throw ParseError("checkpoint header truncated", bytes.size());
  }
  RawCheckpoint raw;
  try {
    raw.header = json::parse(bytes.begin() + 9, bytes.begin() + 9 + len);
  } catch (const json::exception& e) {
    throw ParseError(std::string("checkpoint header is not valid JSON: ") + e.what(), 9);
  }
  if (!raw.header.contains("kind") || !raw.header["kind"].is_string()) {
    throw ParseError("checkpoint header lacks a kind", 9);
  }
  const std::string kind = raw.header["kind"].get<std::string>();
  if (kind != expected_kind) {
    throw ValidationError("checkpoint holds a " + kind + ", expected a " + expected_kind);
  }
  raw.payload.assign(bytes.begin() + 9 + len, bytes.end());
  return raw;
}

/// Copies the payload into the rebuilt stores after checking that the saved
/// tensor directory matches the rebuilt parameters name-for-name.
void restore_payload(const RawCheckpoint& raw, const std::vector<ParamStore<float>*>& stores) {
  if (!raw.header.contains("tensors") || !raw.header["tensors"].is_array()) {
    throw ParseError("checkpoint header lacks a tensor directory", 9);
  }
  const json& dir = raw.header["tensors"];
  std::size_t entry_index = 0;
  std::size_t offset = 0;
  for (auto* store : stores) {
    for (std::size_t i = 0; i < store->size(); ++i, ++entry_index) {
      auto& t = store->entry(i).value;
      if (entry_index >= dir.size()) {
        throw ValidationError("checkpoint tensor directory is shorter than the architecture");
      }
      const json& d = dir[entry_index];
      if (d.value("name", std::string()) != store->entry(i).name ||
          d.value("shape", std::vector<std::int64_t>()) != t.shape()) {
        throw ValidationError("checkpoint tensor " + d.value("name", std::string("?")) +
                              " does not match the declared architecture");
      }
      const auto bytes = static_cast<std::size_t>(t.numel()) * sizeof(float);
      if (offset + bytes > raw.payload.size()) {
        throw ParseError("checkpoint payload truncated", offset);
      }
      std::memcpy(t.data(), raw.payload.data() + offset, bytes);
      offset += bytes;
    }
  }
  if (entry_index != dir.size()) {
    throw ValidationError("checkpoint tensor directory is longer than the architecture");
  }
  if (offset != raw.payload.size()) {
    throw ParseError("checkpoint payload has trailing bytes", offset);
  }
}

json generator_arch(const GeneratorConfig& c) {
  return {{"resolution", c.resolution},     {"d_z", c.d_z},
          {"d_w", c.d_w},                   {"num_classes", c.num_classes},
          {"mapping_layers", c.mapping_layers}, {"widths", c.widths}};
}

GeneratorConfig generator_arch_from(const json& j) {
  GeneratorConfig c;
  c.resolution = j.at("resolution").get<std::int64_t>();
  c.d_z = j.at("d_z").get<std::int64_t>();
  c.d_w = j.at("d_w").get<std::int64_t>();
  c.num_classes = j.at("num_classes").get<std::int64_t>();
  c.mapping_layers = j.at("mapping_layers").get<std::int64_t>();
  c.widths = j.at("widths").get<std::vector<std::int64_t>>();
  return c;
}

json discriminator_arch(const DiscriminatorConfig& c) {
  return {{"resolution", c.resolution}, {"num_classes", c.num_classes}, {"widths", c.widths}};
}

DiscriminatorConfig discriminator_arch_from(const json& j) {
  DiscriminatorConfig c;
  c.resolution = j.at("resolution").get<std::int64_t>();
  c.num_classes = j.at("num_classes").get<std::int64_t>();
  c.widths = j.at("widths").get<std::vector<std::int64_t>>();
  return c;
}

std::int64_t header_step(const json& h) { return h.value("step", std::int64_t{0}); }
std::uint64_t header_seed(const json& h) { return h.value("seed", std::uint64_t{0}); }

json arch_block(const RawCheckpoint& raw) {
  if (!raw.header.contains("arch")) throw ParseError("checkpoint header lacks an architecture", 9);
  return raw.header["arch"];
}

}  // namespace

void save_gan_checkpoint(const Generator<float>& gen, const Discriminator<float>& disc,
                         std::int64_t step, std::uint64_t seed, const std::string& path) {
  json dir = tensor_directory(gen.params());
  for (auto& e : tensor_directory(disc.params())) {
    e["name"] = "discriminator." + e["name"].get<std::string>();
    dir.push_back(e);
  }
  // Namespace the generator entries the same way, for an unambiguous directory.
  for (std::size_t i = 0; i < gen.params().size(); ++i) {
    dir[i]["name"] = "generator." + dir[i]["name"].get<std::string>();
  }
  const json header = {{"kind", "gan3d"},
                       {"arch",
                        {{"generator", generator_arch(gen.config())},
                         {"discriminator", discriminator_arch(disc.config())}}},
                       {"step", step},
                       {"seed", seed},
                       {"tensors", dir}};
  write_checkpoint(header, {&gen.params(), &disc.params()}, path);
}

GanCheckpoint load_gan_checkpoint(const std::string& path) {
  RawCheckpoint raw = read_checkpoint(path, "gan3d");
  const json arch = arch_block(raw);
  GanCheckpoint out{Generator<float>(generator_arch_from(arch.at("generator")), 0),
                    Discriminator<float>(discriminator_arch_from(arch.at("discriminator")), 0),
                    header_step(raw.header), header_seed(raw.header)};
  // The saved directory carries namespaced names; compare against them.
  ParamStore<float>& gp = out.generator.params();
  ParamStore<float>& dp = out.discriminator.params();
  std::vector<std::string> original_names;
  for (std::size_t i = 0; i < gp.size(); ++i) {
    original_names.push_back(gp.entry(i).name);
    gp.entry(i).name = "generator." + gp.entry(i).name;
  }
  for (std::size_t i = 0; i < dp.size(); ++i) {
    original_names.push_back(dp.entry(i).name);
    dp.entry(i).name = "discriminator." + dp.entry(i).name;
  }
  restore_payload(raw, {&gp, &dp});
  for (std::size_t i = 0; i < gp.size(); ++i) gp.entry(i).name = original_names[i];
  for (std::size_t i = 0; i < dp.size(); ++i) {
    dp.entry(i).name = original_names[gp.size() + i];
  }
  return out;
}

void save_comparator_checkpoint(const Comparator<float>& comp, std::int64_t step,
                                std::uint64_t seed, const std::string& path) {
  const json header = {{"kind", "comparator"},
                       {"arch",
                        {{"resolution", comp.config().resolution},
                         {"widths", comp.config().widths}}},
                       {"step", step},
                       {"seed", seed},
                       {"tensors", tensor_directory(comp.params())}};
  write_checkpoint(header, {&comp.params()}, path);
}

ComparatorCheckpoint load_comparator_checkpoint(const std::string& path) {
  RawCheckpoint raw = read_checkpoint(path, "comparator");
  const json arch = arch_block(raw);
  ComparatorConfig cfg;
  cfg.resolution = arch.at("resolution").get<std::int64_t>();
  cfg.widths = arch.at("widths").get<std::vector<std::int64_t>>();
  ComparatorCheckpoint out{Comparator<float>(cfg, 0), header_step(raw.header),
                           header_seed(raw.header)};
  restore_payload(raw, {&out.comparator.params()});
  return out;
}

void save_mapper_checkpoint(const Mapper<float>& mapper, std::int64_t step, std::uint64_t seed,
                            const std::string& path) {
  const json header = {{"kind", "mapper"},
                       {"arch", {{"d_w", mapper.d_w()}}},
                       {"step", step},
                       {"seed", seed},
                       {"tensors", tensor_directory(mapper.params())}};
  write_checkpoint(header, {&mapper.params()}, path);
}

MapperCheckpoint load_mapper_checkpoint(const std::string& path) {
  RawCheckpoint raw = read_checkpoint(path, "mapper");
  const json arch = arch_block(raw);
  MapperCheckpoint out{Mapper<float>(arch.at("d_w").get<std::int64_t>(), 0),
                       header_step(raw.header), header_seed(raw.header)};
  restore_payload(raw, {&out.mapper.params()});
  return out;
}

void save_latent_file(const LatentFile& latent, const std::string& path) {
  if (latent.d_w < 1 || latent.w.numel() != latent.d_w) {
    throw ValidationError("latent file values must match d_w");
  }
  std::vector<double> values;
  for (std::int64_t i = 0; i < latent.w.numel(); ++i) {
    values.push_back(static_cast<double>(latent.w[i]));
  }
  const json j = {{"d_w", latent.d_w},
                  {"values", values},
                  {"class_id", latent.class_id},
                  {"gan_checkpoint_hash", latent.gan_checkpoint_hash}};
  const std::string text = j.dump(2) + "\n";
  write_file_bytes(path, text.data(), text.size());
}

LatentFile load_latent_file(const std::string& path) {
  const auto bytes = read_file_bytes(path);
  json j;
  try {
    j = json::parse(bytes.begin(), bytes.end());
  } catch (const json::exception& e) {
    throw ParseError(std::string("latent file is not valid JSON: ") + e.what());
  }
  LatentFile out;
  try {
    out.d_w = j.at("d_w").get<std::int64_t>();
    const auto values = j.at("values").get<std::vector<double>>();
    if (out.d_w < 1 || static_cast<std::int64_t>(values.size()) != out.d_w) {
      throw ValidationError("latent file values do not match d_w");
    }
    out.w = Tensor<float>({1, out.d_w});
    for (std::int64_t i = 0; i < out.d_w; ++i) {
      out.w[i] = static_cast<float>(values[static_cast<std::size_t>(i)]);
    }
    out.class_id = j.value("class_id", -1);
    out.gan_checkpoint_hash = j.at("gan_checkpoint_hash").get<std::string>();
  } catch (const json::exception& e) {
    throw ParseError(std::string("latent file is missing fields: ") + e.what());
  }
  if (!out.w.all_finite()) throw ValidationError("latent file holds non-finite values");
  return out;
}

}  // namespace voxopt
