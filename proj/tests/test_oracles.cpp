#include <doctest.h>

#include <cmath>

#include "gradshield/container.hpp"
#include "gradshield/oracles.hpp"

using namespace gradshield;

TEST_CASE("every oracle passes and matches the committed manifest") {
  const auto manifest = nlohmann::json::parse(io::read_bytes(GRADSHIELD_ORACLE_MANIFEST));
  const auto results = oracles::run_oracle_suite(manifest.at("seed"));
  REQUIRE(results.size() == manifest.at("oracles").size());
  for (const auto& r : results) {
    INFO(r.name << ": " << r.detail);
    CHECK(r.passed);
    CHECK(std::abs(r.actual - r.expected) <= r.tolerance);
  }
  CHECK(oracles::manifest_mismatches(manifest, results).empty());
}

TEST_CASE("a changed seed changes the recorded inputs") {
  const auto manifest = nlohmann::json::parse(io::read_bytes(GRADSHIELD_ORACLE_MANIFEST));
  const auto other = oracles::run_oracle_suite(manifest.at("seed").get<std::uint64_t>() + 1);
  CHECK_FALSE(oracles::manifest_mismatches(manifest, other).empty());
}

TEST_CASE("primitive gradient checks cover every primitive") {
  const auto checks = oracles::primitive_gradient_checks(3, 2);
  CHECK(checks.size() == 26);
  for (const auto& c : checks) {
    INFO(c.primitive);
    CHECK(c.rel_error < 1e-6);
  }
}

TEST_CASE("jacobi singular values of a diagonal matrix are its entries") {
  const std::vector<double> a{3, 0, 0, 0, -5, 0, 0, 0, 0, 0, 0, 2};
  const auto s = oracles::jacobi_singular_values(a, 4, 3);
  REQUIRE(s.size() == 3);
  CHECK(s[0] == doctest::Approx(5.0));
  CHECK(s[1] == doctest::Approx(3.0));
  CHECK(s[2] == doctest::Approx(2.0));
}
