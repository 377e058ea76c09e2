#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>

#include "network_grad_check.hpp"
#include "sensor3d/checkpoint.hpp"
#include "sensor3d/network.hpp"
#include "table_one.hpp"
#include "test_support.hpp"

using namespace sensor3d;
using sensor3d::testing::random_tensor;

namespace {

NetworkConfig tiny(std::size_t r = 16, Variant v = Variant::Full) {
  NetworkConfig c;
  c.resolution = r;
  c.capacity_divisor = 8;
  c.variant = v;
  return c;
}

template <typename T>
Tensor<T> random_context(std::size_t o, std::size_t r, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return random_tensor({o, 1, r, r}, rng).cast<T>();
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("sensor3d_test_" + name)).string();
}

}  // namespace

TEST(Build, DefaultConfigReproducesReferenceShapes) {
  Network<float> net = build<float>(NetworkConfig{});
  init(net, 1);
  ForwardTrace<float> trace;
  predict_context(net, random_context<float>(3, 128, 1), &trace);
  for (const auto& row : sensor3d::testing::reference_shapes()) {
    const Shape* s = trace.shape_of(row.layer);
    ASSERT_NE(s, nullptr) << row.layer;
    EXPECT_EQ(*s, row.output) << row.layer;
  }
  // conv_7 is wired to the 128-channel pool_2 output.
  EXPECT_EQ(net.params.at("conv_7.weight").shape(), (Shape{256, 128, 3, 3}));
}

TEST(Build, RejectsBadConfigs) {
  NetworkConfig c;
  c.resolution = 100;
  EXPECT_THROW(build<float>(c), InvalidArgument);
  c = {};
  c.sequence_length = 2;
  EXPECT_THROW(build<float>(c), InvalidArgument);
  c = {};
  c.capacity_divisor = 3;
  EXPECT_THROW(build<float>(c), InvalidArgument);
}

TEST(Build, EveryLayerHasOneParameterGroupOrNone) {
  Network<float> net = build<float>(NetworkConfig{});
  auto groups = net.params.groups();
  for (const auto& l : net.layers) {
    const bool has = std::find(groups.begin(), groups.end(), l.name) != groups.end();
    const bool parametric = l.kind == LayerKind::Conv || l.kind == LayerKind::FinalConv ||
                            l.kind == LayerKind::BidirClstm || l.kind == LayerKind::Clstm;
    EXPECT_EQ(has, parametric) << l.name;
  }
  EXPECT_EQ(groups.size(), 14u);
  for (const auto& e : net.params) EXPECT_EQ(e.name.find("W_c"), std::string::npos) << "peephole weight " << e.name;
}

TEST(Build, CapacityRatios) {
  std::size_t prev = 0;
  std::vector<std::size_t> counts;
  for (std::size_t d : {1, 2, 4, 8}) {
    NetworkConfig c;
    c.capacity_divisor = d;
    counts.push_back(build<float>(c).params.scalar_count());
  }
  for (std::size_t i = 0; i < counts.size(); ++i) {
    if (i) {
      EXPECT_LT(counts[i], prev);
      const double ratio = double(counts[i]) / double(counts[i - 1]);
      EXPECT_NEAR(ratio, 0.25, 0.025) << "divisor step " << i;
    }
    prev = counts[i];
  }
}

TEST(Build, Variants) {
  auto single = build<float>(tiny(32, Variant::SingleSlice2d));
  EXPECT_EQ(single.config.sequence_length, 1u);
  auto agg = build<float>(tiny(32, Variant::Aggregation2d));
  EXPECT_EQ(agg.find_layer("bidir_1"), nullptr);
  EXPECT_EQ(agg.find_layer("bidir_2"), nullptr);
  EXPECT_NE(agg.find_layer("aggregate"), nullptr);
  auto uni = build<float>(tiny(32, Variant::Unidirectional));
  EXPECT_TRUE(uni.params.contains("bidir_1.fwd.W_xi"));
  EXPECT_FALSE(uni.params.contains("bidir_1.bwd.W_xi"));
}

TEST(Forward, OutputShapeAndRange) {
  Network<float> net = build<float>(tiny(32));
  init(net, 3);
  Tensor<float> ctx = random_context<float>(3, 32, 4);
  Tensor<float> batch({2, 3, 1, 32, 32});
  std::copy(ctx.vec().begin(), ctx.vec().end(), batch.data());
  std::copy(ctx.vec().begin(), ctx.vec().end(), batch.data() + ctx.size());
  Tensor<float> out = forward(net, batch);
  ASSERT_EQ(out.shape(), (Shape{2, 1, 32, 32}));
  for (std::size_t i = 0; i < out.size(); ++i) {
    EXPECT_GT(out[i], 0.0f);
    EXPECT_LT(out[i], 1.0f);
  }
  for (std::size_t i = 0; i < 32 * 32; ++i) EXPECT_EQ(out[i], out[32 * 32 + i]);
  EXPECT_THROW(forward(net, Tensor<float>({1, 1, 1, 32, 32})), InvalidArgument);
  EXPECT_THROW(forward(net, Tensor<float>({1, 3, 1, 16, 16})), InvalidArgument);
}

TEST(Forward, SingleSliceVariantShape) {
  NetworkConfig c;
  c.variant = Variant::SingleSlice2d;
  c.capacity_divisor = 8;
  Network<float> net = build<float>(c);
  init(net, 5);
  EXPECT_EQ(forward(net, random_context<float>(1, 128, 6).reshaped({1, 1, 1, 128, 128})).shape(), (Shape{1, 1, 128, 128}));
}

TEST(Forward, AggregationIsSumOfSliceFeatures) {
  Network<double> net = build<double>(tiny(16, Variant::Aggregation2d));
  init(net, 7);
  Tensor<double> one = random_context<double>(1, 16, 8);
  Tensor<double> ctx({3, 1, 16, 16});
  for (int t = 0; t < 3; ++t) std::copy(one.vec().begin(), one.vec().end(), ctx.data() + t * one.size());
  ForwardTrace<double> trace;
  trace.capture_layer = "aggregate";
  predict_context(net, ctx, &trace);
  ForwardTrace<double> per_slice;
  per_slice.capture_layer = "conv_17";
  predict_context(net, ctx, &per_slice);
  ASSERT_EQ(trace.captured.size(), 1u);
  ASSERT_EQ(per_slice.captured.size(), 3u);
  for (std::size_t i = 0; i < trace.captured[0].size(); ++i)
    EXPECT_NEAR(trace.captured[0][i], 3.0 * per_slice.captured[0][i], 1e-12);
}

TEST(Init, OrthogonalRecurrentAndBoundedGlorot) {
  Network<float> net = build<float>(tiny(32));
  init(net, 11);
  for (const auto& e : net.params) {
    const Tensor<float>& t = e.value;
    if (e.name.find(".W_h") != std::string::npos) {
      const std::size_t rows = t.dim(0), cols = t.size() / rows;
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < rows; ++j) {
          double dot = 0;
          for (std::size_t k = 0; k < cols; ++k) dot += double(t[i * cols + k]) * t[j * cols + k];
          EXPECT_NEAR(dot, i == j ? 1.0 : 0.0, 1e-5) << e.name;
        }
    } else if (t.rank() == 4) {
      const double limit = std::sqrt(6.0 / double((t.dim(0) + t.dim(1)) * t.dim(2) * t.dim(3)));
      float lo = 0, hi = 0;
      for (std::size_t i = 0; i < t.size(); ++i) {
        EXPECT_LE(std::abs(t[i]), limit) << e.name;
        lo = std::min(lo, t[i]);
        hi = std::max(hi, t[i]);
      }
      EXPECT_LT(lo, 0.0f);
      EXPECT_GT(hi, 0.0f);
    } else {
      for (std::size_t i = 0; i < t.size(); ++i) EXPECT_EQ(t[i], 0.0f) << e.name;
    }
  }
  Network<float> again = build<float>(tiny(32));
  init(again, 11);
  EXPECT_TRUE(again.params == net.params);
  init(again, 12);
  EXPECT_FALSE(again.params == net.params);
}

TEST(GradientCheck, EndToEndReducedScale) {
  for (Variant v : {Variant::Full, Variant::Unidirectional, Variant::Aggregation2d}) {
    Network<double> net = build<double>(tiny(16, v));
    init(net, 13);
    std::mt19937_64 rng(14);
    std::vector<Tensor<double>> slices;
    for (int t = 0; t < 3; ++t) slices.push_back(random_tensor({1, 16, 16}, rng));
    auto report = sensor3d::testing::network_gradient_check(
        net, slices, [](const Var<double>& y) { return sensor3d::testing::weighted_sum(y); }, 2);
    EXPECT_LE(report.worst, 1e-4) << to_string(v) << " worst at " << report.worst_param;
  }
}

TEST(Checkpoint, RoundTripIsBitwise) {
  Network<float> net = build<float>(tiny(32));
  init(net, 21);
  const std::string path = temp_path("roundtrip.ckpt");
  save_checkpoint(net, path);
  Network<float> back = load_checkpoint<float>(path, net.config);
  EXPECT_TRUE(back.params == net.params);
  EXPECT_EQ(back.config, net.config);
  Tensor<float> ctx = random_context<float>(3, 32, 22);
  EXPECT_EQ(predict_context(back, ctx), predict_context(net, ctx));
  std::filesystem::remove(path);
}

TEST(Checkpoint, ConfigMismatchAndCorruption) {
  Network<float> net = build<float>(tiny(32));
  const std::string path = temp_path("mismatch.ckpt");
  save_checkpoint(net, path);
  NetworkConfig other = net.config;
  other.capacity_divisor = 4;
  EXPECT_THROW(load_checkpoint<float>(path, other), ConfigMismatch);

  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 16);
  EXPECT_THROW(load_checkpoint<float>(path), TruncatedFile);

  {
    std::ofstream out(path, std::ios::trunc);
    out << "not a checkpoint\n";
  }
  EXPECT_THROW(load_checkpoint<float>(path), MalformedFile);
  std::filesystem::remove(path);
}

TEST(Checkpoint, ManifestListsParameterGroups) {
  Network<float> net = build<float>(tiny(32));
  const std::string path = temp_path("manifest.ckpt");
  save_checkpoint(net, path);
  std::ifstream in(path, std::ios::binary);
  CheckpointHeader h = read_checkpoint_header(in);
  std::vector<std::string> groups;
  for (const auto& e : h.entries) {
    std::string g = e.name.substr(0, e.name.find('.'));
    if (std::find(groups.begin(), groups.end(), g) == groups.end()) groups.push_back(g);
  }
  const std::vector<std::string> expected = {"conv_1",  "conv_2",  "conv_4",  "conv_5",  "conv_7",  "conv_8",  "bidir_1",
                                             "conv_11", "conv_12", "conv_14", "conv_15", "conv_17", "bidir_2", "conv_18"};
  EXPECT_EQ(groups, expected);
  EXPECT_EQ(h.config, net.config);
  std::filesystem::remove(path);
}

TEST(ExportActivations, PenultimateUpsamplingMaps) {
  Network<float> net = build<float>(NetworkConfig{});
  init(net, 31);
  Tensor<float> one = random_context<float>(1, 128, 32);
  Tensor<float> ctx({3, 1, 128, 128});
  for (int t = 0; t < 3; ++t) std::copy(one.vec().begin(), one.vec().end(), ctx.data() + t * one.size());
  auto maps = export_activations(net, ctx, "up_3");
  ASSERT_EQ(maps.size(), 3u);
  for (const auto& m : maps) {
    EXPECT_EQ(m.shape(), (Shape{128, 128, 128}));
    for (std::size_t i = 0; i < m.size(); ++i) {
      ASSERT_GE(m[i], 0.0f);
      ASSERT_LE(m[i], 1.0f);
    }
  }
  // Repeated identical slices: report whether sequence position changes the
  // maps (it cannot before the first recurrent block merges information).
  double diff = 0;
  for (std::size_t i = 0; i < maps[0].size(); ++i) diff = std::max(diff, double(std::abs(maps[0][i] - maps[1][i])));
  std::printf("max |up_3[0] - up_3[1]| on repeated slice: %g\n", diff);
}

TEST(ExportActivations, ZeroInputZeroMaps) {
  Network<float> net = build<float>(tiny(32));
  init(net, 33);
  for (const auto& m : export_activations(net, Tensor<float>::zeros({3, 1, 32, 32}), "up_3"))
    for (std::size_t i = 0; i < m.size(); ++i) EXPECT_EQ(m[i], 0.0f);
}

TEST(ExportActivations, UnknownLayerListsValidNames) {
  Network<float> net = build<float>(tiny(32));
  try {
    export_activations(net, Tensor<float>::zeros({3, 1, 32, 32}), "conv_3");
    FAIL();
  } catch (const InvalidArgument& e) {
    EXPECT_NE(std::string(e.what()).find("up_3"), std::string::npos);
  }
}
