#include <doctest.h>

#include <cmath>
#include <cstring>

#include "voxopt/comparator.hpp"
#include "voxopt/discriminator.hpp"
#include "voxopt/generator.hpp"
#include "testutil.hpp"

using namespace voxopt;
using namespace voxopt::testutil;

namespace {

std::int64_t expected_generator_params(const GeneratorConfig& c) {
  std::int64_t n = c.num_classes * c.d_z;
  for (std::int64_t i = 0; i < c.mapping_layers; ++i) {
    const std::int64_t in = (i == 0) ? 2 * c.d_z : c.d_w;
    n += c.d_w * in + c.d_w;
  }
  n += c.widths[0] * 64;
  for (std::size_t i = 0; i < c.widths.size(); ++i) {
    const std::int64_t cin = c.widths[i == 0 ? 0 : i - 1];
    const std::int64_t cout = c.widths[i];
    n += cout * cin * 27 + cout + cin * c.d_w + cin;
  }
  const std::int64_t cl = c.widths.back();
  n += cl + 1 + cl * c.d_w + cl;  // output projection and its style affine
  n += 1;                         // output gain
  return n;
}

std::int64_t expected_discriminator_params(const DiscriminatorConfig& c) {
  std::int64_t n = c.widths[0] * 2;
  for (std::size_t i = 0; i + 1 < c.widths.size(); ++i) {
    n += c.widths[i + 1] * c.widths[i] * 27 + c.widths[i + 1];
  }
  const std::int64_t cl = c.widths.back();
  n += cl * (cl + 1) * 27 + cl;  // post-stddev convolution
  n += cl * cl + cl;             // fc
  n += cl + 1;                   // scalar head
  n += c.num_classes * cl;       // projection embeddings
  return n;
}

GeneratorConfig tiny_generator_config() {
  GeneratorConfig c;
  c.resolution = 8;
  c.d_z = 3;
  c.d_w = 4;
  c.num_classes = 3;
  c.mapping_layers = 2;
  c.widths = {5, 4};
  return c;
}

}  // namespace

TEST_CASE("generator parameter counts match the layer-by-layer closed form") {
  const GeneratorConfig desk;
  Generator<float> g(desk, 1);
  CHECK(g.params().parameter_count() == expected_generator_params(desk));
  CHECK(g.params().parameter_count() == 1161138);

  const auto paper = GeneratorConfig::paper_scale();
  Generator<float> gp(paper, 1);
  CHECK(gp.params().parameter_count() == expected_generator_params(paper));
  CHECK(gp.params().parameter_count() == 1949866);

  const auto tiny = tiny_generator_config();
  Generator<float> gt(tiny, 1);
  CHECK(gt.params().parameter_count() == expected_generator_params(tiny));
}

TEST_CASE("discriminator parameter counts match the closed form") {
  const DiscriminatorConfig desk;
  Discriminator<float> d(desk, 1);
  CHECK(d.params().parameter_count() == expected_discriminator_params(desk));
  CHECK(d.params().parameter_count() == 1030881);

  const auto paper = DiscriminatorConfig::paper_scale();
  Discriminator<float> dp(paper, 1);
  CHECK(dp.params().parameter_count() == expected_discriminator_params(paper));
  CHECK(dp.params().parameter_count() == 2157865);
}

TEST_CASE("full-scale presets land within 20 percent of the 2.1M budget") {
  Generator<float> g(GeneratorConfig::paper_scale(), 1);
  Discriminator<float> d(DiscriminatorConfig::paper_scale(), 1);
  const double budget = 2.1e6;
  CHECK(std::abs(static_cast<double>(g.params().parameter_count()) - budget) / budget < 0.20);
  CHECK(std::abs(static_cast<double>(d.params().parameter_count()) - budget) / budget < 0.20);
}

TEST_CASE("config validation rejects inconsistent shapes") {
  GeneratorConfig c = tiny_generator_config();
  c.resolution = 48;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c = tiny_generator_config();
  c.widths = {5, 4, 3};
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c = tiny_generator_config();
  c.mapping_layers = 0;  // pass-through needs d_w == 2*d_z
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c.d_w = 2 * c.d_z;
  CHECK_NOTHROW(c.validate());

  DiscriminatorConfig d;
  d.resolution = 32;
  CHECK_THROWS_AS(d.validate(), ValidationError);
}

TEST_CASE("synthesis output is a bounded signed volume and bitwise deterministic") {
  const auto cfg = tiny_generator_config();
  Generator<float> gen(cfg, 99);
  Rng rng(5);
  const auto z = Tensor<float>::randn({2, cfg.d_z}, rng);
  const auto w = gen.map_latent_eval(z, {0, 2});
  REQUIRE(w.shape() == std::vector<std::int64_t>{2, cfg.d_w});
  const auto v = gen.synthesize_eval(w);
  REQUIRE(v.shape() == std::vector<std::int64_t>{2, 1, 8, 8, 8});
  for (std::int64_t i = 0; i < v.numel(); ++i) {
    CHECK(v[i] <= 1.0f);
    CHECK(v[i] >= -1.0f);
  }

  Generator<float> twin(cfg, 99);
  CHECK(parameter_hash(twin.params()) == parameter_hash(gen.params()));
  const auto v2 = twin.synthesize_eval(twin.map_latent_eval(z, {0, 2}));
  CHECK(std::memcmp(v.data(), v2.data(), sizeof(float) * static_cast<std::size_t>(v.numel())) == 0);

  Generator<float> other(cfg, 100);
  CHECK(parameter_hash(other.params()) != parameter_hash(gen.params()));
}

TEST_CASE("distinct latents and classes produce distinct volumes") {
  const auto cfg = tiny_generator_config();
  Generator<float> gen(cfg, 7);
  Rng rng(11);
  const auto z = Tensor<float>::randn({1, cfg.d_z}, rng);

  const auto w0 = gen.map_latent_eval(z, {0});
  const auto w1 = gen.map_latent_eval(z, {1});
  float dw = 0;
  for (std::int64_t i = 0; i < w0.numel(); ++i) dw = std::max(dw, std::abs(w0[i] - w1[i]));
  CHECK(dw > 1e-4f);  // class conditioning reaches the latent

  const auto za = Tensor<float>::randn({1, cfg.d_z}, rng);
  const auto va = gen.synthesize_eval(gen.map_latent_eval(za, {0}));
  const auto vb = gen.synthesize_eval(w0);
  float dv = 0;
  for (std::int64_t i = 0; i < va.numel(); ++i) dv = std::max(dv, std::abs(va[i] - vb[i]));
  CHECK(dv > 1e-4f);
}

TEST_CASE("pass-through mapping concatenates the normalized latent and embedding") {
  GeneratorConfig cfg = tiny_generator_config();
  cfg.mapping_layers = 0;
  cfg.d_z = 2;
  cfg.d_w = 4;
  Generator<float> gen(cfg, 3);
  gen.params().at("embed.table").fill(0.0f);

  Tensor<float> z({1, 2});
  z[0] = 3.0f;
  z[1] = 4.0f;
  const auto w = gen.map_latent_eval(z, {0});
  const float rms = std::sqrt((9.0f + 16.0f) / 2.0f);
  CHECK(w[0] == doctest::Approx(3.0f / rms).epsilon(1e-5));
  CHECK(w[1] == doctest::Approx(4.0f / rms).epsilon(1e-5));
  CHECK(w[2] == 0.0f);  // zeroed embedding rows normalize to zero
  CHECK(w[3] == 0.0f);
}

TEST_CASE("every synthesis block consumes the same latent variable") {
  const auto cfg = tiny_generator_config();
  Generator<float> gen(cfg, 21);
  Tape<float> t;
  BoundParams<float> p(t, gen.params(), false);
  Rng rng(2);
  Var w = t.constant(Tensor<float>::randn({1, cfg.d_w}, rng));
  StyleTrace trace;
  (void)gen.synthesize(t, p, w, &trace);
  REQUIRE(trace.consumed.size() == cfg.widths.size() + 1);
  for (auto id : trace.consumed) CHECK(id == w.id);
}

TEST_CASE("discriminator scores are finite and class-sensitive") {
  DiscriminatorConfig cfg;
  cfg.resolution = 8;
  cfg.widths = {4, 6};
  cfg.num_classes = 4;
  Discriminator<float> disc(cfg, 17);

  Tensor<float> grid = Tensor<float>::full({2, 1, 8, 8, 8}, 1.0f);
  for (std::int64_t i = 0; i < grid.numel() / 2; ++i) grid[i] = -1.0f;
  const auto logits = disc.discriminate_eval(grid, {0, 1});
  REQUIRE(logits.shape() == std::vector<std::int64_t>{2});
  CHECK(logits.all_finite());

  const auto relabeled = disc.discriminate_eval(grid, {1, 0});
  CHECK(std::abs(logits[0] - relabeled[0]) > 1e-6f);

  CHECK_THROWS_AS(disc.discriminate_eval(Tensor<float>::zeros({1, 1, 4, 4, 4}), {0}),
                  ValidationError);
  CHECK_THROWS_AS(disc.discriminate_eval(Tensor<float>::zeros({2, 1, 8, 8, 8}), {0}),
                  ValidationError);
  CHECK_THROWS_AS(disc.discriminate_eval(grid, {0, 99}), ValidationError);
}

TEST_CASE("comparator with zero weights is exactly indifferent") {
  ComparatorConfig cfg;
  cfg.resolution = 8;
  cfg.widths = {3, 4, 5};
  Comparator<float> comp(cfg, 23);
  for (std::size_t i = 0; i < comp.params().size(); ++i) comp.params().entry(i).value.fill(0.0f);

  Rng rng(4);
  const auto v1 = Tensor<float>::uniform({1, 8, 8, 8}, rng, -1.0f, 1.0f);
  const auto v2 = Tensor<float>::uniform({1, 8, 8, 8}, rng, -1.0f, 1.0f);
  CHECK(comp.compare(v1, v2) == 0.5f);
}

TEST_CASE("comparator responds to its inputs and validates shapes") {
  ComparatorConfig cfg;
  cfg.resolution = 8;
  cfg.widths = {3, 4};
  Comparator<float> comp(cfg, 29);
  Rng rng(6);
  const auto v1 = Tensor<float>::uniform({8, 8, 8}, rng, -1.0f, 1.0f);
  const auto v2 = Tensor<float>::uniform({8, 8, 8}, rng, -1.0f, 1.0f);
  const float p12 = comp.compare(v1, v2);
  const float p21 = comp.compare(v2, v1);
  CHECK(p12 > 0.0f);
  CHECK(p12 < 1.0f);
  CHECK(p12 != p21);
  CHECK(comp.compare(v1, v2) == p12);  // deterministic

  const auto wrong = Tensor<float>::zeros({4, 4, 4});
  CHECK_THROWS_AS(comp.compare(v1, wrong), ValidationError);

  const auto pair = Comparator<float>::make_pair_volume(v1, v2);
  REQUIRE(pair.shape() == std::vector<std::int64_t>{1, 2, 8, 8, 8});
  CHECK(std::memcmp(pair.data(), v1.data(), sizeof(float) * 512) == 0);
  CHECK(std::memcmp(pair.data() + 512, v2.data(), sizeof(float) * 512) == 0);
}

TEST_CASE("comparator loss matches closed-form cross entropy") {
  CHECK(comparator_loss(0.5, 1) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(comparator_loss(0.5, 0) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(comparator_loss(0.9, 1) == doctest::Approx(-std::log(0.9)).epsilon(1e-12));
  CHECK(comparator_loss(0.9, 0) == doctest::Approx(-std::log(0.1)).epsilon(1e-12));
  // saturated predictions clamp to the 1e-7 floor instead of diverging
  CHECK(comparator_loss(1e-12, 1) == doctest::Approx(-std::log(1e-7)).epsilon(1e-9));
  CHECK(comparator_loss(1.0, 0) == doctest::Approx(-std::log(1e-7)).epsilon(1e-9));
  CHECK_THROWS_AS(comparator_loss(0.5, 2), ValidationError);
}

TEST_CASE("generator gradients" * doctest::test_suite("slow")) {
  GeneratorConfig cfg;
  cfg.resolution = 8;
  cfg.d_z = 2;
  cfg.d_w = 3;
  cfg.num_classes = 2;
  cfg.mapping_layers = 1;
  cfg.widths = {4, 3};
  Generator<double> gen(cfg, 31);

  std::vector<Tensor<double>> inputs;
  Rng rng(8);
  inputs.push_back(Tensor<double>::randn({2, cfg.d_z}, rng));
  for (std::size_t i = 0; i < gen.params().size(); ++i) {
    inputs.push_back(gen.params().entry(i).value);
  }

  const auto build = [&](Tape<double>& t, const std::vector<Var>& vars) {
    std::vector<Var> pvars(vars.begin() + 1, vars.end());
    BoundParams<double> p(gen.params(), pvars);
    Var w = gen.map_latent(t, p, vars[0], {0, 1});
    Var v = gen.synthesize(t, p, w);
    return weighted_sum(t, v);
  };
  const auto res = grad_check(inputs, build, 1e-5);
  CHECK(res.checked > 500);
  CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("discriminator gradients" * doctest::test_suite("slow")) {
  DiscriminatorConfig cfg;
  cfg.resolution = 8;
  cfg.widths = {3, 4};
  cfg.num_classes = 2;
  Discriminator<double> disc(cfg, 37);

  std::vector<Tensor<double>> inputs;
  Rng rng(9);
  inputs.push_back(Tensor<double>::uniform({2, 1, 8, 8, 8}, rng, -1.0, 1.0));
  for (std::size_t i = 0; i < disc.params().size(); ++i) {
    inputs.push_back(disc.params().entry(i).value);
  }

  const auto build = [&](Tape<double>& t, const std::vector<Var>& vars) {
    std::vector<Var> pvars(vars.begin() + 1, vars.end());
    BoundParams<double> p(disc.params(), pvars);
    Var logits = disc.discriminate(t, p, vars[0], {1, 0});
    return weighted_sum(t, logits);
  };
  const auto res = grad_check(inputs, build, 1e-5);
  CHECK(res.checked > 500);
  CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("comparator gradients" * doctest::test_suite("slow")) {
  ComparatorConfig cfg;
  cfg.resolution = 8;
  cfg.widths = {3, 4};
  Comparator<double> comp(cfg, 41);

  std::vector<Tensor<double>> inputs;
  Rng rng(10);
  inputs.push_back(Tensor<double>::uniform({2, 2, 8, 8, 8}, rng, -1.0, 1.0));
  for (std::size_t i = 0; i < comp.params().size(); ++i) {
    inputs.push_back(comp.params().entry(i).value);
  }

  const auto build = [&](Tape<double>& t, const std::vector<Var>& vars) {
    std::vector<Var> pvars(vars.begin() + 1, vars.end());
    BoundParams<double> p(comp.params(), pvars);
    Var logits = comp.logit(t, p, vars[0]);
    return ops::mean_all(t, ops::bce_with_logits(t, logits, {1.0, 0.0}));
  };
  const auto res = grad_check(inputs, build, 1e-5);
  CHECK(res.checked > 300);
  CHECK(res.max_rel_err < 1e-6);
}
