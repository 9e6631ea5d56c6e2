#include <doctest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "voxopt/comparator_train.hpp"
#include "voxopt/gan_train.hpp"
#include "voxopt/inversion.hpp"
#include "voxopt/optimize.hpp"
#include "voxopt/shapegen.hpp"

using namespace voxopt;

namespace {

template <typename T>
GeneratorConfig tiny_gen_config(std::int64_t num_classes = 2) {
  GeneratorConfig c;
  c.resolution = 8;
  c.d_z = 3;
  c.d_w = 4;
  c.num_classes = num_classes;
  c.mapping_layers = 1;
  c.widths = {4, 3};
  return c;
}

DiscriminatorConfig tiny_disc_config(std::int64_t num_classes = 2) {
  DiscriminatorConfig c;
  c.resolution = 8;
  c.num_classes = num_classes;
  c.widths = {3, 4};
  return c;
}

ComparatorConfig tiny_comp_config() {
  ComparatorConfig c;
  c.resolution = 8;
  c.widths = {3, 4};
  return c;
}

template <typename T>
void zero_params(ParamStore<T>& store) {
  for (std::size_t i = 0; i < store.size(); ++i) store.entry(i).value.fill(T(0));
}

VoxelGrid random_blob(std::int64_t r, std::uint64_t seed, double fill = 0.3) {
  Rng rng(seed);
  VoxelGrid g(r);
  for (auto& c : g.data) c = rng.uniform() < fill ? 1 : 0;
  return g;
}

std::vector<LabeledGrid> random_labeled(std::int64_t n, std::int64_t r, int num_classes,
                                        std::uint64_t seed) {
  std::vector<LabeledGrid> out;
  for (std::int64_t i = 0; i < n; ++i) {
    LabeledGrid lg;
    lg.grid = random_blob(r, seed + static_cast<std::uint64_t>(i));
    lg.class_id = static_cast<int>(i % num_classes);
    out.push_back(std::move(lg));
  }
  return out;
}

std::vector<PairSample> random_pairs(std::int64_t n, std::int64_t r, std::uint64_t seed) {
  std::vector<PairSample> out;
  for (std::int64_t i = 0; i < n; ++i) {
    PairSample p;
    p.first = random_blob(r, seed + 2 * static_cast<std::uint64_t>(i));
    p.second = random_blob(r, seed + 2 * static_cast<std::uint64_t>(i) + 1);
    p.label = static_cast<int>(i % 2);
    out.push_back(std::move(p));
  }
  return out;
}

double l2_distance(const Tensor<float>& a, const Tensor<float>& b) {
  double s = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    s += d * d;
  }
  return std::sqrt(s);
}

}  // namespace

TEST_CASE("r1 penalty is exactly zero for an all-zero discriminator") {
  Discriminator<float> disc(tiny_disc_config(), 5);
  zero_params(disc.params());
  Rng rng(11);
  Tensor<float> reals = Tensor<float>::uniform({2, 1, 8, 8, 8}, rng, -1.0f, 1.0f);
  CHECK(r1_penalty(disc, reals, {0, 1}, 1.0) == 0.0);
}

TEST_CASE("r1 penalty scales linearly in gamma and is non-negative") {
  Discriminator<float> disc(tiny_disc_config(), 6);
  Rng rng(12);
  Tensor<float> reals = Tensor<float>::uniform({2, 1, 8, 8, 8}, rng, -1.0f, 1.0f);
  const double r1 = r1_penalty(disc, reals, {0, 1}, 1.0);
  const double r2 = r1_penalty(disc, reals, {0, 1}, 2.0);
  CHECK(r1 > 0.0);
  CHECK(r2 == doctest::Approx(2.0 * r1).epsilon(1e-12));
}

TEST_CASE("r1 parameter gradients match finite differences of the penalty value") {
  // The training loop approximates the parameter gradient of the R1 penalty
  // with a symmetric difference along the input gradient; this checks that
  // shortcut against direct differentiation of the penalty value.
  DiscriminatorConfig dc = tiny_disc_config();
  Discriminator<double> disc(dc, 7);
  Rng rng(13);
  Tensor<double> reals = Tensor<double>::uniform({2, 1, 8, 8, 8}, rng, -0.9, 0.9);
  const std::vector<int> ids = {0, 1};
  const double gamma = 1.5;

  Tensor<double> input_grad;
  r1_penalty(disc, reals, ids, gamma, &input_grad);
  std::vector<Tensor<double>> grads;
  for (std::size_t i = 0; i < disc.params().size(); ++i) {
    grads.push_back(Tensor<double>::zeros(disc.params().entry(i).value.shape()));
  }
  detail::add_r1_param_grads(disc, reals, ids, gamma, input_grad, grads, 1e-4);

  // Spot-check a handful of weights in every parameter tensor.
  const double h = 1e-5;
  double max_rel = 0.0;
  for (std::size_t k = 0; k < disc.params().size(); ++k) {
    auto& value = disc.params().entry(k).value;
    Rng pick(100 + k);
    for (int probe = 0; probe < 3; ++probe) {
      const std::int64_t i = static_cast<std::int64_t>(pick.below(static_cast<std::uint64_t>(value.numel())));
      const double saved = value[i];
      value[i] = saved + h;
      const double fp = r1_penalty(disc, reals, ids, gamma);
      value[i] = saved - h;
      const double fm = r1_penalty(disc, reals, ids, gamma);
      value[i] = saved;
      const double numeric = (fp - fm) / (2.0 * h);
      const double denom = std::max({1.0, std::abs(numeric), std::abs(grads[k][i])});
      max_rel = std::max(max_rel, std::abs(grads[k][i] - numeric) / denom);
    }
  }
  CHECK(max_rel < 1e-4);
}

TEST_CASE("gan train config validation") {
  GanTrainConfig cfg;
  cfg.steps = 0;
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
  cfg = GanTrainConfig{};
  cfg.learning_rate = -1.0;
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
  cfg = GanTrainConfig{};
  cfg.r1_interval = 0;
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
  cfg = GanTrainConfig{};
  cfg.apa_max = 2.0;
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
}

TEST_CASE("gan training validates its dataset") {
  Generator<float> gen(tiny_gen_config<float>(), 1);
  Discriminator<float> disc(tiny_disc_config(), 2);
  GanTrainConfig cfg;
  cfg.steps = 1;
  cfg.batch_size = 2;

  std::vector<LabeledGrid> empty;
  CHECK_THROWS_AS(train_gan(gen, disc, empty, cfg), ValidationError);

  auto wrong_res = random_labeled(2, 16, 2, 3);
  CHECK_THROWS_AS(train_gan(gen, disc, wrong_res, cfg), ValidationError);

  auto bad_class = random_labeled(2, 8, 2, 4);
  bad_class[0].class_id = 5;
  CHECK_THROWS_AS(train_gan(gen, disc, bad_class, cfg), ValidationError);
}

TEST_CASE("gan training aborts on a poisoned generator") {
  Generator<float> gen(tiny_gen_config<float>(), 1);
  Discriminator<float> disc(tiny_disc_config(), 2);
  gen.params().at("const4")[0] = std::numeric_limits<float>::quiet_NaN();
  GanTrainConfig cfg;
  cfg.steps = 4;
  cfg.batch_size = 2;
  auto res = train_gan(gen, disc, random_labeled(4, 8, 2, 5), cfg);
  CHECK(res.aborted);
  CHECK(res.abort_reason.find("step 0") != std::string::npos);
  CHECK(res.log.size() == 1);
}

TEST_CASE("gan smoke training stays finite and is deterministic" * doctest::test_suite("slow")) {
  auto data = make_screw_dataset(10, 21, 8);
  GanTrainConfig cfg;
  cfg.steps = 10;
  cfg.batch_size = 4;
  cfg.learning_rate = 1e-3;

  Generator<float> gen_a(tiny_gen_config<float>(kNumScrewClasses), 31);
  Discriminator<float> disc_a(tiny_disc_config(kNumScrewClasses), 32);
  const std::uint64_t fresh_hash = parameter_hash(gen_a.params());
  auto a = train_gan(gen_a, disc_a, data, cfg);
  REQUIRE_FALSE(a.aborted);
  REQUIRE(a.log.size() == 10);
  for (const auto& row : a.log) {
    CHECK(std::isfinite(row.d_loss));
    CHECK(std::isfinite(row.g_loss));
    CHECK(std::isfinite(row.r1));
    CHECK(row.apa_p >= 0.0);
    CHECK(row.apa_p <= cfg.apa_max);
    CHECK(row.r_t >= -1.0);
    CHECK(row.r_t <= 1.0);
  }
  CHECK(a.log.front().r1 > 0.0);

  Generator<float> gen_b(tiny_gen_config<float>(kNumScrewClasses), 31);
  Discriminator<float> disc_b(tiny_disc_config(kNumScrewClasses), 32);
  auto b = train_gan(gen_b, disc_b, data, cfg);
  REQUIRE(b.log.size() == a.log.size());
  for (std::size_t i = 0; i < a.log.size(); ++i) {
    CHECK(a.log[i].d_loss == b.log[i].d_loss);
    CHECK(a.log[i].g_loss == b.log[i].g_loss);
  }

  // Training moved the generator, and the rerun landed on identical weights.
  CHECK(parameter_hash(gen_a.params()) != fresh_hash);
  CHECK(parameter_hash(gen_a.params()) == parameter_hash(gen_b.params()));
}

TEST_CASE("pseudo augmentation leaves the first step untouched and then diverges"
          * doctest::test_suite("slow")) {
  auto data = make_screw_dataset(10, 22, 8);
  GanTrainConfig base;
  base.steps = 6;
  base.batch_size = 4;
  base.learning_rate = 1e-3;
  base.apa_enabled = false;

  GanTrainConfig forced = base;
  forced.apa_enabled = true;
  // An unreachable target makes every adaptation raise p, and a full-size
  // first step pushes it straight to the cap.
  forced.apa_target = -2.0;
  forced.apa_step = 0.9;
  forced.apa_interval = 1;

  Generator<float> gen_a(tiny_gen_config<float>(kNumScrewClasses), 41);
  Discriminator<float> disc_a(tiny_disc_config(kNumScrewClasses), 42);
  auto off = train_gan(gen_a, disc_a, data, base);

  Generator<float> gen_b(tiny_gen_config<float>(kNumScrewClasses), 41);
  Discriminator<float> disc_b(tiny_disc_config(kNumScrewClasses), 42);
  auto on = train_gan(gen_b, disc_b, data, forced);

  REQUIRE_FALSE(off.aborted);
  REQUIRE_FALSE(on.aborted);
  // Replacement probability is zero during the first step, so the two runs
  // coincide there; the adapted probability then mixes fakes into the real
  // batch and the paths separate.
  CHECK(on.log[0].d_loss == off.log[0].d_loss);
  CHECK(on.log[0].g_loss == off.log[0].g_loss);
  CHECK(on.log[0].apa_p == doctest::Approx(0.9));
  bool differs = false;
  for (std::size_t i = 1; i < on.log.size(); ++i) {
    differs = differs || on.log[i].d_loss != off.log[i].d_loss;
  }
  CHECK(differs);
}

TEST_CASE("comparator train config validation") {
  ComparatorTrainConfig cfg;
  cfg.epochs = 0;
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
  cfg = ComparatorTrainConfig{};
  cfg.val_fraction = 1.0;
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
  cfg = ComparatorTrainConfig{};
  cfg.learning_rate = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
}

TEST_CASE("comparator evaluation bookkeeping on a zero-weight comparator") {
  Comparator<float> comp(tiny_comp_config(), 9);
  zero_params(comp.params());
  auto pairs = random_pairs(3, 8, 51);
  pairs[0].label = 0;
  pairs[1].label = 1;
  pairs[2].label = 0;
  auto [loss, acc] = evaluate_comparator(comp, pairs, {0, 1, 2});
  CHECK(loss == doctest::Approx(std::log(2.0)).epsilon(1e-6));
  // A zero logit reads as probability one half, which predicts "second wins".
  CHECK(acc == doctest::Approx(2.0 / 3.0));
  auto [eloss, eacc] = evaluate_comparator(comp, pairs, {});
  CHECK(eloss == 0.0);
  CHECK(eacc == 0.0);
}

TEST_CASE("comparator training splits, logs, and reruns deterministically") {
  auto pairs = random_pairs(10, 8, 61);
  ComparatorTrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 4;
  cfg.val_fraction = 0.2;
  cfg.seed = 3;

  auto run = [&] {
    Comparator<float> comp(tiny_comp_config(), 62);
    return train_comparator(comp, pairs, cfg);
  };
  auto a = run();
  REQUIRE_FALSE(a.aborted);
  CHECK(a.train_count == 8);
  CHECK(a.val_count == 2);
  REQUIRE(a.log.size() == 2);
  for (const auto& row : a.log) {
    CHECK(std::isfinite(row.train_loss));
    CHECK(std::isfinite(row.val_loss));
    CHECK(row.train_accuracy >= 0.0);
    CHECK(row.train_accuracy <= 1.0);
  }

  auto b = run();
  for (std::size_t i = 0; i < a.log.size(); ++i) {
    CHECK(a.log[i].train_loss == b.log[i].train_loss);
    CHECK(a.log[i].val_loss == b.log[i].val_loss);
  }

  ComparatorTrainConfig other = cfg;
  other.seed = 4;
  Comparator<float> comp_c(tiny_comp_config(), 62);
  auto c = train_comparator(comp_c, pairs, other);
  bool differs = false;
  for (std::size_t i = 0; i < a.log.size(); ++i) {
    differs = differs || a.log[i].train_loss != c.log[i].train_loss;
  }
  CHECK(differs);
}

TEST_CASE("comparator training validates labels and dataset") {
  Comparator<float> comp(tiny_comp_config(), 63);
  ComparatorTrainConfig cfg;
  cfg.epochs = 1;
  std::vector<PairSample> empty;
  CHECK_THROWS_AS(train_comparator(comp, empty, cfg), ValidationError);
  auto bad_label = random_pairs(2, 8, 64);
  bad_label[1].label = 2;
  CHECK_THROWS_AS(train_comparator(comp, bad_label, cfg), ValidationError);
  auto wrong_res = random_pairs(2, 16, 65);
  CHECK_THROWS_AS(train_comparator(comp, wrong_res, cfg), ValidationError);
}

TEST_CASE("comparator memorizes a repeated pair" * doctest::test_suite("slow")) {
  auto one = random_pairs(1, 8, 71);
  one[0].label = 1;
  std::vector<PairSample> pairs;
  for (int i = 0; i < 8; ++i) pairs.push_back(one[0]);

  Comparator<float> comp(tiny_comp_config(), 72);
  ComparatorTrainConfig cfg;
  cfg.epochs = 150;
  cfg.batch_size = 16;
  cfg.learning_rate = 1e-2;
  cfg.val_fraction = 0.0;
  auto res = train_comparator(comp, pairs, cfg);
  REQUIRE_FALSE(res.aborted);
  CHECK(res.train_count == 8);
  CHECK(res.val_count == 0);
  CHECK(res.log.back().train_loss < 0.01);
  CHECK(res.log.back().train_accuracy == 1.0);

  // Swap augmentation taught the mirrored ordering as well.
  const float p_forward = comp.compare(to_signed(one[0].first).as_tensor(),
                                       to_signed(one[0].second).as_tensor());
  const float p_backward = comp.compare(to_signed(one[0].second).as_tensor(),
                                        to_signed(one[0].first).as_tensor());
  CHECK(p_forward > 0.9f);
  CHECK(p_backward < 0.1f);

  // Scoring the memorized set against inverted labels collapses accuracy.
  auto flipped = pairs;
  for (auto& p : flipped) p.label = 0;
  std::vector<std::size_t> all;
  for (std::size_t i = 0; i < flipped.size(); ++i) all.push_back(i);
  auto [loss, acc] = evaluate_comparator(comp, flipped, all);
  CHECK(acc <= 0.1);
  CHECK(loss > 1.0);
}

TEST_CASE("mean latent matches a single mapped sample at n=1") {
  Generator<float> gen(tiny_gen_config<float>(), 81);
  const std::uint64_t seed = 17;
  Tensor<float> mean = mean_latent(gen, 1, seed, 1);
  Rng rng(seed);
  const auto z = Tensor<float>::randn({1, 3}, rng);
  const auto w = gen.map_latent_eval(z, {1});
  REQUIRE(mean.numel() == w.numel());
  for (std::int64_t i = 0; i < mean.numel(); ++i) CHECK(mean[i] == w[i]);
}

TEST_CASE("mean latent is deterministic and class-sensitive") {
  Generator<float> gen(tiny_gen_config<float>(), 82);
  auto a = mean_latent(gen, 100, 5, 0);
  auto b = mean_latent(gen, 100, 5, 0);
  for (std::int64_t i = 0; i < a.numel(); ++i) CHECK(a[i] == b[i]);
  auto c = mean_latent(gen, 100, 5, 1);
  double diff = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    diff += std::abs(static_cast<double>(a[i]) - static_cast<double>(c[i]));
  }
  CHECK(diff > 1e-4);
  CHECK_THROWS_AS(mean_latent(gen, 0, 5, 0), ValidationError);
  CHECK_THROWS_AS(mean_latent(gen, 4, 5, 7), ValidationError);
}

TEST_CASE("mean latent of a pass-through mapping with a silent class embed is near zero") {
  GeneratorConfig cfg = tiny_gen_config<float>();
  cfg.mapping_layers = 0;
  cfg.d_w = 2 * cfg.d_z;
  Generator<float> gen(cfg, 83);
  gen.params().at("embed.table").fill(0.0f);
  auto mean = mean_latent(gen, 800, 7, -1);
  double norm = 0.0;
  for (std::int64_t i = 0; i < mean.numel(); ++i) {
    norm += static_cast<double>(mean[i]) * static_cast<double>(mean[i]);
  }
  norm = std::sqrt(norm);
  CHECK(norm < 0.1 * std::sqrt(static_cast<double>(cfg.d_w)));
}

TEST_CASE("inversion recovers a biased generator's trivial optimum") {
  // A generator pushed to emit -1 everywhere already matches an empty target
  // at the mean latent, so inversion must stay put.
  Generator<float> gen(tiny_gen_config<float>(), 84);
  gen.params().at("tovoxel.conv.b").fill(-20.0f);
  VoxelGrid empty_target(8);
  InversionConfig cfg;
  cfg.steps = 20;
  cfg.mean_samples = 32;
  cfg.class_id = 0;
  cfg.seed = 9;
  auto res = invert(gen, empty_target, cfg);
  CHECK_FALSE(res.diverged);
  CHECK(res.best_loss < 1e-8);
  auto wbar = mean_latent(gen, 32, derive_seed(9, 0), 0);
  CHECK(l2_distance(res.w, wbar) < 1e-3);
}

TEST_CASE("inversion input validation") {
  Generator<float> gen(tiny_gen_config<float>(), 85);
  InversionConfig cfg;
  cfg.steps = 0;
  VoxelGrid target(8);
  CHECK_THROWS_AS(invert(gen, target, cfg), ValidationError);
  cfg = InversionConfig{};
  VoxelGrid wrong(16);
  CHECK_THROWS_AS(invert(gen, wrong, cfg), ValidationError);
  cfg.class_id = 99;
  CHECK_THROWS_AS(invert(gen, target, cfg), ValidationError);
}

TEST_CASE("inversion tracks its best iterate and reruns identically"
          * doctest::test_suite("slow")) {
  Generator<float> gen(tiny_gen_config<float>(), 86);
  Rng rng(87);
  const auto z = Tensor<float>::randn({1, 3}, rng);
  const auto w_star = gen.map_latent_eval(z, {0});
  const VoxelGrid target = binarize(signed_from_tensor(gen.synthesize_eval(w_star)));

  InversionConfig cfg;
  cfg.steps = 60;
  cfg.mean_samples = 50;
  cfg.class_id = 0;
  cfg.seed = 11;
  auto res = invert(gen, target, cfg);
  REQUIRE_FALSE(res.diverged);
  REQUIRE(res.loss_curve.size() == 60);
  double min_seen = res.loss_curve[0];
  for (double v : res.loss_curve) min_seen = std::min(min_seen, v);
  CHECK(res.best_loss == doctest::Approx(min_seen).epsilon(1e-12));
  CHECK(res.best_loss <= res.loss_curve.front());
  CHECK(res.loss_curve[static_cast<std::size_t>(res.best_step)] ==
        doctest::Approx(res.best_loss).epsilon(1e-12));

  auto rerun = invert(gen, target, cfg);
  REQUIRE(rerun.loss_curve.size() == res.loss_curve.size());
  for (std::size_t i = 0; i < res.loss_curve.size(); ++i) {
    CHECK(res.loss_curve[i] == rerun.loss_curve[i]);
  }
  for (std::int64_t i = 0; i < res.w.numel(); ++i) CHECK(res.w[i] == rerun.w[i]);

  // Inverting the generator's own output beats inverting an unrelated blob.
  auto blob = invert(gen, random_blob(8, 88), cfg);
  CHECK(res.best_loss < blob.best_loss);
}

TEST_CASE("self-inversion reaches high overlap" * doctest::test_suite("slow")) {
  Generator<float> gen(tiny_gen_config<float>(), 90);
  // A freshly seeded generator emits small tanh values, so a binary target
  // carries a large magnitude floor that swamps the shape signal. Raising the
  // output gain saturates the voxels toward the binary levels a converged
  // generator produces, which is the regime inversion is meant to run in.
  gen.params().at("output_gain")[0] = 8.0f;
  Rng rng(91);
  const auto z = Tensor<float>::randn({1, 3}, rng);
  const auto w_star = gen.map_latent_eval(z, {1});
  const VoxelGrid target = binarize(signed_from_tensor(gen.synthesize_eval(w_star)));

  InversionConfig cfg;
  cfg.steps = 300;
  cfg.step_size = 1.0;
  cfg.mean_samples = 100;
  cfg.class_id = 1;
  cfg.seed = 12;
  auto res = invert(gen, target, cfg);
  REQUIRE_FALSE(res.diverged);
  CHECK(res.best_loss < res.loss_curve.front());
  const VoxelGrid recovered = binarize(signed_from_tensor(res.volume));
  CHECK(voxel_iou(recovered, target) >= 0.9);
}
