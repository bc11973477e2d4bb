#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "depthdiff/depth_codec.hpp"
#include "depthdiff/errors.hpp"
#include "depthdiff/rng.hpp"

using namespace depthdiff;

TEST_CASE("normalize_clip maps the unit interval onto [-1, 1]") {
  CHECK(normalize_clip(0.5) == 0.0);
  CHECK(normalize_clip(0.0) == -1.0);
  CHECK(normalize_clip(1.0) == 1.0);
  CHECK(normalize_clip(2.0) == 1.0);
  CHECK(normalize_clip(-3.0) == -1.0);
  const Eigen::Array3d a(0.25, 0.5, 7.0);
  const Eigen::Array3d n = normalize_clip(a);
  CHECK(n(0) == -0.5);
  CHECK(n(1) == 0.0);
  CHECK(n(2) == 1.0);
}

TEST_CASE("linear encoding") {
  const DepthRange unit{0.0, 10.0};
  CHECK(linear_encode(5.0, unit) == 0.0);
  const DepthRange r;
  CHECK(linear_encode(r.d_min, r) == -1.0);
  CHECK(linear_encode(r.d_max, r) == 1.0);
  CHECK(linear_encode(200.0, r) == 1.0);
  const auto m = linear_encode(DepthMap::dense(Plane::Constant(2, 2, 40.25)), r);
  CHECK(m.encoding == DepthEncoding::linear);
  CHECK(m.values(1, 1) == doctest::Approx(0.0));
}

TEST_CASE("degenerate ranges are configuration errors") {
  const auto d = DepthMap::dense(Plane::Constant(1, 1, 1.0));
  CHECK_THROWS_AS(linear_encode(d, DepthRange{2.0, 2.0}), ConfigError);
  CHECK_THROWS_AS(log_encode(d, DepthRange{2.0, 2.0}), ConfigError);
  CHECK_THROWS_AS(DepthRange({5.0, 1.0}).validate(), ConfigError);
  CHECK_THROWS_AS(DepthRange({0.0, 1.0}).validate(), ConfigError);
}

TEST_CASE("log encoding endpoints, midpoint and base invariance") {
  const DepthRange r;
  CHECK(log_encode(r.d_min, r) == -1.0);
  CHECK(log_encode(r.d_max, r) == 1.0);
  CHECK(std::abs(log_encode(std::sqrt(0.5 * 80.0), r)) < 1e-12);
  CHECK(std::abs(log_encode(6.324555, r)) < 1e-6);
  Rng rng(17);
  for (int i = 0; i < 1000; ++i) {
    const double d = rng.uniform(r.d_min, r.d_max);
    const double base10 = normalize_clip(std::log10(d / r.d_min) / std::log10(r.d_max / r.d_min));
    const double base2 = normalize_clip(std::log2(d / r.d_min) / std::log2(r.d_max / r.d_min));
    CHECK(std::abs(log_encode(d, r) - base10) < 1e-12);
    CHECK(std::abs(log_encode(d, r) - base2) < 1e-12);
  }
}

TEST_CASE("log encoding rejects nonpositive valid depth with its pixel") {
  DepthMap d = DepthMap::dense(Plane::Constant(3, 4, 2.0));
  d.values(1, 2) = 0.0;
  try {
    (void)log_encode(d, DepthRange{});
    FAIL("expected DataError");
  } catch (const DataError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("row 1") != std::string::npos);
    CHECK(msg.find("col 2") != std::string::npos);
  }
  d.valid(1, 2) = false;
  const auto n = log_encode(d, DepthRange{});
  CHECK(n.values(1, 2) == -1.0);
  CHECK_FALSE(n.valid(1, 2));
}

TEST_CASE("log decoding inverts log encoding") {
  const DepthRange r;
  CHECK(log_decode(-1.0, r) == doctest::Approx(r.d_min).epsilon(1e-15));
  CHECK(log_decode(1.0, r) == doctest::Approx(r.d_max).epsilon(1e-15));
  CHECK(log_decode(0.0, r) == doctest::Approx(std::sqrt(r.d_min * r.d_max)).epsilon(1e-14));
  CHECK(log_decode(1.7, r) == doctest::Approx(r.d_max).epsilon(1e-15));
  Rng rng(23);
  Plane p(16, 16);
  for (Eigen::Index i = 0; i < p.size(); ++i) p.data()[i] = std::exp(rng.uniform(std::log(r.d_min), std::log(r.d_max)));
  const auto back = log_decode(log_encode(DepthMap::dense(p), r));
  CHECK(((back.values - p).abs() / p).maxCoeff() < 1e-12);
  CHECK_THROWS_AS(log_decode(linear_encode(DepthMap::dense(p), r)), UsageError);
}

TEST_CASE("encodings are strictly increasing and bounded") {
  const DepthRange r;
  double prev_lin = -2, prev_log = -2;
  for (double d = r.d_min; d <= r.d_max; d *= 1.01) {
    const double lin = linear_encode(d, r), lg = log_encode(d, r);
    CHECK(lin > prev_lin);
    CHECK(lg > prev_log);
    prev_lin = lin;
    prev_log = lg;
  }
  for (double d : {1e-9, 0.1, 1e3, 1e12}) {
    CHECK(std::abs(log_encode(d, r)) <= 1.0);
    CHECK(std::abs(linear_encode(d, r)) <= 1.0);
  }
}

TEST_CASE("indoor interval share under both encodings") {
  const DepthRange r;
  const double lg = encoded_interval_share(0.5, 10.0, r, DepthEncoding::log);
  const double lin = encoded_interval_share(0.5, 10.0, r, DepthEncoding::linear);
  CHECK(lg == doctest::Approx(std::log(20.0) / std::log(160.0)).epsilon(1e-12));
  CHECK(lin == doctest::Approx(9.5 / 79.5).epsilon(1e-12));
  CHECK(lg >= 0.55);
  CHECK(lin <= 0.12);
}

TEST_CASE("channel replication and averaging") {
  Rng rng(4);
  Plane n(5, 7);
  for (Eigen::Index i = 0; i < n.size(); ++i) n.data()[i] = rng.uniform(-1, 1);
  const auto rep = replicate_channels(n);
  CHECK(rep.size() == 3);
  for (const auto& c : rep) CHECK((c == n).all());
  CHECK((average_channels(rep) == n).all());

  std::vector<Plane> ch{Plane::Constant(1, 1, 1.0), Plane::Constant(1, 1, 2.0), Plane::Constant(1, 1, 3.0)};
  CHECK(average_channels(ch)(0, 0) == 2.0);
  std::swap(ch[0], ch[2]);
  CHECK(average_channels(ch)(0, 0) == 2.0);
  ch.pop_back();
  CHECK_THROWS_AS(average_channels(ch), DimensionError);
}

TEST_CASE("channel averaging is order independent bit for bit") {
  Rng rng(77);
  std::vector<Plane> ch(3, Plane(6, 6));
  for (auto& c : ch) {
    for (Eigen::Index i = 0; i < c.size(); ++i) c.data()[i] = rng.uniform(-1, 1);
  }
  const Plane ref = average_channels(ch);
  CHECK((ref - (ch[0] + ch[1] + ch[2]) / 3.0).abs().maxCoeff() < 1e-15);
  std::vector<Plane> perm{ch[2], ch[0], ch[1]};
  CHECK((average_channels(perm) == ref).all());
}
