#include "support.hpp"

#include <gtest/gtest.h>

#include <cstring>
#include <limits>
#include <set>

using namespace fedhte;
using namespace fedhte::testing;

namespace {

double random_real(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> mant(-1.0, 1.0);
  std::uniform_int_distribution<int> ex(-300, 300);
  switch (rng() % 5) {
    case 0: return 0.0;
    case 1: return -0.0;
    case 2: return std::ldexp(mant(rng), ex(rng));
    case 3: return std::numeric_limits<double>::denorm_min() * static_cast<double>(rng() % 1000);
    default: return mant(rng);
  }
}

Vector random_vector(std::mt19937_64& rng, Eigen::Index n) {
  Vector v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = random_real(rng);
  return v;
}

}  // namespace

TEST(Codec, RealsAreFixedWidthAndExact) {
  std::mt19937_64 rng(1);
  for (int k = 0; k < 5000; ++k) {
    const double v = random_real(rng);
    const std::string s = wire::format_real(v);
    ASSERT_EQ(s.size(), 24u) << s;
    const double back = wire::parse_real(nlohmann::json(s), "x");
    ASSERT_EQ(std::memcmp(&back, &v, sizeof v) == 0 || (v == 0 && back == 0), true) << s;
  }
  EXPECT_EQ(wire::format_real(1.0), "+1.0000000000000000e+000");
  EXPECT_THROW(wire::format_real(std::nan("")), ProtocolError);
  EXPECT_THROW(wire::parse_real(nlohmann::json("1.0"), "x"), ProtocolError);
  EXPECT_THROW(wire::parse_real(nlohmann::json(1.0), "x"), ProtocolError);
}

TEST(Codec, RequestRoundTripFuzz) {
  std::mt19937_64 rng(2);
  const WorkingDesign design = WorkingDesign::standard(LinkFunction(LinkKind::logit), {"X1"});
  for (int k = 0; k < 200; ++k) {
    const int B = static_cast<int>(rng() % 6);
    Matrix mm(B, 5);
    for (int b = 0; b < B; ++b) mm.row(b) = random_vector(rng, 5).transpose();
    const wire::MomentRequest r =
        wire::build_request(round_config(design, true, rng()), "site" + std::to_string(k), random_vector(rng, 5), mm);
    const std::string bytes = wire::encode(r);
    const auto back = wire::decode_as<wire::MomentRequest>(bytes);
    EXPECT_EQ(wire::encode(back), bytes);
    EXPECT_EQ(back.config_hash, wire::config_hash(back));
    EXPECT_EQ(back.base_seed, r.base_seed);
    EXPECT_EQ(back.B(), B);
  }
}

TEST(Codec, AugmentationRoundTripFuzz) {
  std::mt19937_64 rng(3);
  for (int k = 0; k < 200; ++k) {
    wire::Augmentation a;
    a.site_id = "s" + std::to_string(k);
    a.config_hash = "0123456789abcdef";
    a.n_m = static_cast<std::int64_t>(rng() % 100000);
    a.q = 1 + static_cast<int>(rng() % 6);
    auto rep = [&] {
      wire::ReplicateResult r;
      r.p = random_vector(rng, a.q);
      r.ess = std::abs(random_real(rng));
      r.max_weight = random_real(rng);
      r.nuisance_converged = rng() % 2;
      r.tilt_converged = rng() % 2;
      return r;
    };
    a.full = rep();
    for (int b = 0, B = static_cast<int>(rng() % 5); b < B; ++b) a.replicates.push_back(rep());
    const std::string bytes = wire::encode(a);
    const auto back = wire::decode_as<wire::Augmentation>(bytes);
    EXPECT_EQ(wire::encode(back), bytes);
    EXPECT_EQ(back.replicates.size(), a.replicates.size());
  }
}

TEST(Codec, RejectsMalformedMessages) {
  wire::Augmentation a;
  a.site_id = "s";
  a.config_hash = "h";
  a.n_m = 10;
  a.q = 2;
  a.full.p = Vector::Zero(2);
  auto j = nlohmann::json::parse(wire::encode(a));
  auto bad = [](nlohmann::json m) { return m.dump(); };

  auto extra = j;
  extra["rows"] = 1;
  EXPECT_THROW(wire::decode(bad(extra)), ProtocolError);
  auto missing = j;
  missing.erase("q");
  EXPECT_THROW(wire::decode(bad(missing)), ProtocolError);
  auto version = j;
  version["version"] = 2;
  EXPECT_THROW(wire::decode(bad(version)), ProtocolError);
  auto length = j;
  length["full"]["p"].push_back(wire::format_real(1.0));
  EXPECT_THROW(wire::decode(bad(length)), ProtocolError);
  auto flag = j;
  flag["full"]["tilt_converged"] = 2;
  EXPECT_THROW(wire::decode(bad(flag)), ProtocolError);
  auto kind = j;
  kind["kind"] = "raw_rows";
  EXPECT_THROW(wire::decode(bad(kind)), ProtocolError);
  EXPECT_THROW(wire::decode("{not json"), ProtocolError);
  EXPECT_THROW(wire::decode("[]"), ProtocolError);
}

TEST(Codec, ErrorAndAckMessages) {
  const auto e = std::get<wire::ErrorMessage>(wire::decode(wire::encode(wire::ErrorMessage{"s", "data", "bad"})));
  EXPECT_EQ(e.code, "data");
  EXPECT_EQ(std::get<wire::Ack>(wire::decode(wire::encode(wire::Ack{"s"}))).site_id, "s");
  EXPECT_THROW(wire::decode_as<wire::Augmentation>(wire::encode(wire::ErrorMessage{"s", "data", "bad"})),
               ProtocolError);
}

TEST(Codec, ConfigHashTracksEveryConfigField) {
  const WorkingDesign design = WorkingDesign::standard(LinkFunction(LinkKind::logit), {"X1"});
  const wire::RoundConfig base = round_config(design);
  std::set<std::string> hashes{base.hash()};
  wire::RoundConfig c = base;
  c.tilt.r_columns.pop_back();
  hashes.insert(c.hash());
  c = base;
  c.tilt_enabled = false;
  hashes.insert(c.hash());
  c = base;
  c.ps.predictor_columns = {"X1"};
  hashes.insert(c.hash());
  c = base;
  c.or_spec.include_intercept = false;
  hashes.insert(c.hash());
  c = base;
  c.design.link = LinkKind::identity;
  hashes.insert(c.hash());
  EXPECT_EQ(hashes.size(), 6u);
  c = base;
  c.base_seed = 99;
  EXPECT_EQ(c.hash(), base.hash());
}
