#include <doctest.h>

#include <cstdio>
#include <fstream>

#include "voxopt/common.hpp"
#include "voxopt/config.hpp"

using namespace voxopt;

TEST_CASE("config parses key-value lines with comments and blanks") {
  const auto cfg = Config::from_text(
      "# header comment\n"
      "resolution = 32\n"
      "\n"
      "learning_rate=2.5e-3   # trailing comment\n"
      "name = desk run\n"
      "flag = true\n"
      "widths = 16, 32,64\n");
  CHECK(cfg.get_int("resolution") == 32);
  CHECK(cfg.get_double("learning_rate") == doctest::Approx(2.5e-3));
  CHECK(cfg.get_string("name") == "desk run");
  CHECK(cfg.get_bool("flag"));
  CHECK(cfg.get_int_list("widths") == std::vector<std::int64_t>{16, 32, 64});
  CHECK(cfg.has("resolution"));
  CHECK_FALSE(cfg.has("absent"));
}

TEST_CASE("later assignments override earlier ones") {
  const auto cfg = Config::from_text("steps = 10\nsteps = 20\n");
  CHECK(cfg.get_int("steps") == 20);
}

TEST_CASE("defaulted getters fall back only when the key is absent") {
  const auto cfg = Config::from_text("present = 5\n");
  CHECK(cfg.get_int("present", 9) == 5);
  CHECK(cfg.get_int("absent", 9) == 9);
  CHECK(cfg.get_double("absent", 1.5) == 1.5);
  CHECK(cfg.get_bool("absent", true));
  CHECK(cfg.get_string("absent", "x") == "x");
  CHECK(cfg.get_int_list("absent", {1, 2}) == std::vector<std::int64_t>{1, 2});
}

TEST_CASE("malformed lines and values raise parse errors") {
  CHECK_THROWS_AS(Config::from_text("just words\n"), ParseError);
  CHECK_THROWS_AS(Config::from_text("= value\n"), ParseError);
  const auto cfg = Config::from_text("n = 3x\nf = 1..2\nb = maybe\nl = 1,,2\n");
  CHECK_THROWS_AS(cfg.get_int("n"), ParseError);
  CHECK_THROWS_AS(cfg.get_double("f"), ParseError);
  CHECK_THROWS_AS(cfg.get_bool("b"), ParseError);
  CHECK_THROWS_AS(cfg.get_int_list("l"), ParseError);
  CHECK_THROWS_AS(cfg.get_int("missing"), ValidationError);
}

TEST_CASE("include splices another file relative to the including one") {
  const std::string base = "/tmp/voxopt_cfg_base.cfg";
  const std::string child = "/tmp/voxopt_cfg_child.cfg";
  {
    std::ofstream(child) << "steps = 100\nseed = 7\n";
    std::ofstream(base) << "include voxopt_cfg_child.cfg\nsteps = 250\n";
  }
  const auto cfg = Config::load(base);
  CHECK(cfg.get_int("steps") == 250);  // the including file overrides
  CHECK(cfg.get_int("seed") == 7);

  std::ofstream(base) << "include missing_file.cfg\n";
  CHECK_THROWS_AS(Config::load(base), IoError);

  std::ofstream(base) << "include voxopt_cfg_base.cfg\n";
  CHECK_THROWS_AS(Config::load(base), ParseError);  // cycle hits the depth cap

  std::remove(base.c_str());
  std::remove(child.c_str());
}

TEST_CASE("unused keys are reported for typo detection") {
  const auto cfg = Config::from_text("alpha = 1\nbeta = 2\ngamma = 3\n");
  (void)cfg.get_int("alpha");
  (void)cfg.get_int("gamma", 0);
  const auto unused = cfg.unused_keys();
  REQUIRE(unused.size() == 1);
  CHECK(unused[0] == "beta");
}
