#include <cmath>
#include <cstring>
#include <random>
#include <set>

#include <Eigen/Eigenvalues>
#include <gtest/gtest.h>

#include "qdwi/error.hpp"
#include "qdwi/phantom.hpp"
#include "qdwi/rng.hpp"
#include "qdwi/training.hpp"

using namespace qdwi;

namespace {

PhantomSpec small_spec(double noise = 0.02) {
  PhantomSpec s;
  s.dims = {16, 16, 16};
  s.train_subjects = 2;
  s.val_subjects = 1;
  s.test_subjects = 1;
  s.noise_sigma = noise;
  return s;
}

GradientTable small_table() { return make_multishell_table({1000, 2000}, 6); }

BVector random_unit(std::mt19937_64& rng) {
  std::normal_distribution<double> n;
  double x = n(rng), y = n(rng), z = n(rng);
  const double r = std::sqrt(x * x + y * y + z * z);
  return {x / r, y / r, z / r};
}

}  // namespace

TEST(SimulateDwiSignal, ZeroBReturnsS0) {
  const auto d = prolate_tensor({1, 0, 0}, 1.7e-3, 0.3e-3);
  EXPECT_EQ(simulate_dwi_signal(d, 0.83, {0, 0.6, 0.8}, 0), 0.83);
}

TEST(SimulateDwiSignal, IsotropicClosedForm) {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 10; ++i) {
    EXPECT_NEAR(simulate_dwi_signal(1e-3 * Eigen::Matrix3d::Identity(), 1.0, random_unit(rng), 1000), 0.367879,
                1e-6);
  }
}

TEST(SimulateDwiSignal, AntipodalSymmetry) {
  std::mt19937_64 rng(2);
  const auto d = prolate_tensor({0.3, -0.5, 0.8}, 1.7e-3, 0.3e-3);
  for (int i = 0; i < 100; ++i) {
    const auto t = random_unit(rng);
    EXPECT_EQ(simulate_dwi_signal(d, 1, t, 2000), simulate_dwi_signal(d, 1, -t, 2000));
  }
}

TEST(SimulateDwiSignal, AlongAxisAttenuatesMore) {
  const auto d = prolate_tensor({1, 0, 0}, 1.7e-3, 0.3e-3);
  EXPECT_LT(simulate_dwi_signal(d, 1, {1, 0, 0}, 1000), simulate_dwi_signal(d, 1, {0, 1, 0}, 1000));
  EXPECT_NEAR(simulate_dwi_signal(d, 1, {1, 0, 0}, 1000), std::exp(-1.7), 1e-12);
}

TEST(SimulateDwiSignal, MonotoneAndBounded) {
  std::mt19937_64 rng(3);
  const auto d = prolate_tensor({0, 0, 1}, 1.7e-3, 0.3e-3);
  for (int i = 0; i < 50; ++i) {
    const auto t = random_unit(rng);
    double prev = simulate_dwi_signal(d, 0.7, t, 0);
    for (double b = 250; b <= 5000; b += 250) {
      const double s = simulate_dwi_signal(d, 0.7, t, b);
      EXPECT_LT(s, prev);
      EXPECT_GT(s, 0);
      EXPECT_LE(s, 0.7);
      prev = s;
    }
  }
}

TEST(SimulateDwiSignal, RejectsInvalidTensor) {
  Eigen::Matrix3d d = Eigen::Matrix3d::Zero();
  d(0, 0) = -1e-3;
  EXPECT_THROW(simulate_dwi_signal(d, 1, {1, 0, 0}, 1000), FormatError);
  d(0, 0) = -1e-16;  // within round-off tolerance
  EXPECT_NO_THROW(simulate_dwi_signal(d, 1, {1, 0, 0}, 1000));
}

TEST(TensorField, Invariants) {
  const auto f = make_tensor_field(PhantomSpec{}, 5);
  std::set<Tissue> seen;
  for (std::size_t i = 0; i < f.s0.size(); ++i) {
    seen.insert(f.label[i]);
    EXPECT_GE(f.s0[i], 0);
    if (f.label[i] == Tissue::Background) EXPECT_EQ(f.s0[i], 0);
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(f.diffusion[i]);
    EXPECT_GE(es.eigenvalues().minCoeff(), -1e-15);
    EXPECT_TRUE(f.diffusion[i].isApprox(f.diffusion[i].transpose()));
  }
  EXPECT_TRUE(seen.count(Tissue::Bundle));
  EXPECT_TRUE(seen.count(Tissue::Crossing));
  EXPECT_TRUE(seen.count(Tissue::Csf));
  EXPECT_TRUE(seen.count(Tissue::Parenchyma));
}

TEST(Phantom, Deterministic) {
  const auto a = generate_phantom_dataset(small_spec(), small_table(), 9);
  const auto b = generate_phantom_dataset(small_spec(), small_table(), 9);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].structural, b[i].structural);
    EXPECT_EQ(a[i].dwis, b[i].dwis);
  }
  const auto c = generate_phantom_dataset(small_spec(), small_table(), 10);
  EXPECT_NE(a[0].dwis, c[0].dwis);
}

TEST(Phantom, SubjectsIndependentOfOrder) {
  const auto spec = small_spec();
  const auto all = generate_phantom_dataset(spec, small_table(), 4);
  const auto last = simulate_subject(spec, small_table(), derive_seed(4, {3}), 3, Split::Test);
  EXPECT_EQ(all[3].dwis, last.dwis);
}

TEST(Phantom, NoiselessRatioMatchesForwardModel) {
  const auto spec = small_spec(0.0);
  const auto table = small_table();
  const auto s = generate_phantom_dataset(spec, table, 1).front();
  const auto ratios = ratio_volume(s.structural, s.dwis, 1.5);
  for (std::size_t g = 0; g < table.size(); ++g)
    for (std::size_t i = 0; i < s.mask.size(); ++i) {
      if (!s.mask[i]) continue;
      const auto& th = table[g].direction;
      const Eigen::Vector3d t(th.x, th.y, th.z);
      const double expect = std::exp(-table[g].bvalue * t.dot(s.field.diffusion[i] * t));
      ASSERT_NEAR(ratios.channel(g)[i], expect, 1e-6 * std::max(1.0, expect));
    }
}

TEST(Phantom, NoiselessAntipodalVolumes) {
  auto spec = small_spec(0.0);
  std::vector<GradientEntry> e{{{0.6, 0.0, 0.8}, 1000}, {{-0.6, -0.0, -0.8}, 1000}};
  const auto s = simulate_subject(spec, GradientTable(e), 3, 0, Split::Train);
  EXPECT_EQ(s.dwis.channel(0), s.dwis.channel(1));
}

TEST(Phantom, SplitsDisjointAndStructuralDistinct) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto d = generate_phantom_dataset(small_spec(), small_table(), seed);
    std::set<int> ids[3];
    for (const auto& s : d) ids[static_cast<int>(s.split)].insert(s.id);
    EXPECT_EQ(ids[0].size(), 2u);
    EXPECT_EQ(ids[1].size(), 1u);
    EXPECT_EQ(ids[2].size(), 1u);
    for (int a = 0; a < 3; ++a)
      for (int b = a + 1; b < 3; ++b)
        for (int id : ids[a]) EXPECT_FALSE(ids[b].count(id));
    const auto& st = d[0].structural;
    EXPECT_EQ(st.names(), (std::vector<std::string>{"B0", "T2", "T1"}));
    EXPECT_NE(st.channel(0), st.channel(1));
    EXPECT_NE(st.channel(1), st.channel(2));
    for (const auto& ch : {st.channel(0), st.channel(1), st.channel(2)})
      for (float v : ch) ASSERT_TRUE(std::isfinite(v));
  }
}

TEST(Phantom, DegenerateSpecs) {
  auto s = small_spec();
  s.bundles = 0;
  EXPECT_THROW(validate(s), FormatError);
  s = small_spec();
  s.dims = {15, 16, 16};
  EXPECT_THROW(validate(s), FormatError);
  s = small_spec();
  s.s0_csf = s.s0_parenchyma = s.s0_bundle = 0;
  EXPECT_THROW(validate(s), FormatError);
  s = small_spec();
  s.train_subjects = s.val_subjects = s.test_subjects = 0;
  EXPECT_THROW(generate_phantom_dataset(s, small_table(), 1), FormatError);
}

TEST(PhantomSpecJson, RoundTripAndStrictKeys) {
  PhantomSpec s = small_spec();
  s.bundle_parallel = 1.9e-3;
  const auto back = parse_phantom_spec(phantom_spec_to_json(s));
  EXPECT_EQ(phantom_spec_to_json(back), phantom_spec_to_json(s));
  EXPECT_EQ(parse_phantom_spec("{}").dims, PhantomSpec{}.dims);
  EXPECT_THROW(parse_phantom_spec(R"({"bundels": 2})"), FormatError);
  EXPECT_THROW(parse_phantom_spec(R"({"bundles": "two"})"), FormatError);
  EXPECT_THROW(parse_phantom_spec("[1]"), FormatError);
  EXPECT_THROW(parse_phantom_spec("{"), FormatError);
}

TEST(Volume, RoundTripBitExact) {
  std::mt19937_64 rng(1);
  std::normal_distribution<float> n;
  VolumeStack v({5, 4, 3}, {1.5, 2.0, 2.5});
  for (const char* name : {"B0", "T2", "DWI:0"}) {
    std::vector<float> d(v.voxel_count());
    for (auto& x : d) x = n(rng);
    v.add_channel(name, d);
  }
  const auto bytes = encode_volume(v);
  const auto back = decode_volume(bytes);
  EXPECT_EQ(back, v);
  EXPECT_EQ(encode_volume(back), bytes);
  EXPECT_EQ(std::memcmp(bytes.data(), "QVOL0001", 8), 0);
}

TEST(Volume, FileRoundTrip) {
  VolumeStack v({2, 2, 2}, {1, 1, 1});
  v.add_channel("mask", std::vector<float>{0, 1, 1, 0, 1, 0, 0, 1});
  const auto path = std::filesystem::temp_directory_path() / "qdwi_volume_roundtrip.qvol";
  write_volume(v, path);
  EXPECT_EQ(read_volume(path), v);
  std::filesystem::remove(path);
}

TEST(Volume, BadMagic) {
  VolumeStack v({2, 2, 2}, {1, 1, 1});
  v.add_channel("B0");
  auto bytes = encode_volume(v);
  bytes[0] = 'X';
  try {
    decode_volume(bytes);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("bad magic"), std::string::npos);
  }
}

TEST(Volume, SizeMismatch) {
  const std::string header = R"({"dims":[8,8,8],"voxel_size":[1,1,1],"channels":["B0","T2"]})";
  std::vector<std::uint8_t> bytes{'Q', 'V', 'O', 'L', '0', '0', '0', '1'};
  const auto len = static_cast<std::uint32_t>(header.size());
  for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<std::uint8_t>(len >> (8 * i)));
  bytes.insert(bytes.end(), header.begin(), header.end());
  bytes.resize(bytes.size() + 1000 * 4, 0);
  try {
    decode_volume(bytes);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("size mismatch"), std::string::npos);
  }
  bytes.resize(bytes.size() - 2);
  EXPECT_THROW(decode_volume(bytes), FormatError);
}

TEST(Volume, RejectsNonFiniteAndWrongLength) {
  VolumeStack v({2, 2, 1}, {1, 1, 1});
  EXPECT_THROW(v.add_channel("B0", std::vector<float>(3)), FormatError);
  v.add_channel("B0", std::vector<float>{0, 1, NAN, 2});
  EXPECT_THROW(encode_volume(v), FormatError);
}
