#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <unistd.h>

#include "tadt/errors.hpp"
#include "tadt/checkpoint.hpp"
#include "tadt/training.hpp"

using namespace tadt;

namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name) {
  return fs::temp_directory_path() / ("tadt_" + std::to_string(::getpid()) + "_" + name);
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST(TensorRecord, RoundTripBothDtypes) {
  std::stringstream ss;
  const Tensor<float> f({2, 3}, {1.5f, -2, 0, 3.25f, 1e-30f, -0.0f});
  const Tensor<double> d({4}, {0.1, 0.2, 1e300, -7});
  write_tensor(ss, f);
  write_tensor(ss, d);
  const auto f2 = read_tensor<float>(ss);
  const auto d2 = read_tensor<double>(ss);
  EXPECT_EQ(f2.shape(), f.shape());
  EXPECT_EQ(std::vector<float>(f2.data().begin(), f2.data().end()),
            std::vector<float>(f.data().begin(), f.data().end()));
  EXPECT_EQ(std::vector<double>(d2.data().begin(), d2.data().end()),
            std::vector<double>(d.data().begin(), d.data().end()));
}

TEST(TensorRecord, WrongDtypeAndTruncationThrow) {
  std::stringstream ss;
  write_tensor(ss, Tensor<double>({2}, {1, 2}));
  std::string bytes = ss.str();
  std::stringstream a(bytes);
  EXPECT_THROW(read_tensor<float>(a), IoError);
  std::stringstream b(bytes.substr(0, bytes.size() - 3));
  EXPECT_THROW(read_tensor<double>(b), IoError);
  std::stringstream c("XXXX");
  EXPECT_THROW(read_tensor<double>(c), IoError);
}

TEST(Checkpoint, RoundTripIsBitwise) {
  RunConfig c = tiny_config();
  c.train.seed = 3;
  Rng rng(3);
  const auto net = Network<float>::create(c, Stage::tadt, rng);
  Checkpoint ck;
  ck.stage = Stage::tadt;
  ck.step = 42;
  ck.config_text = c.to_text();
  ck.tensors = snapshot_parameters(net.parameters());
  ck.rng_state = rng.serialize();
  const auto path = temp_file("rt.ckpt");
  save_checkpoint(path.string(), ck);
  const Checkpoint back = load_checkpoint(path.string());
  EXPECT_EQ(back.stage, Stage::tadt);
  EXPECT_EQ(back.step, 42u);
  EXPECT_EQ(back.config(), c);
  EXPECT_FALSE(back.optimizer.has_value());
  ASSERT_EQ(back.tensors.size(), ck.tensors.size());
  for (std::size_t i = 0; i < ck.tensors.size(); ++i) {
    EXPECT_EQ(back.tensors[i].name, ck.tensors[i].name);
    for (std::size_t k = 0; k < ck.tensors[i].tensor.numel(); ++k) {
      ASSERT_EQ(back.tensors[i].tensor.data()[k], ck.tensors[i].tensor.data()[k]);
    }
  }
  Rng restored;
  restored.deserialize(back.rng_state);
  EXPECT_TRUE(restored == rng);

  // Saving what was loaded reproduces the file byte for byte.
  const auto again = temp_file("rt2.ckpt");
  save_checkpoint(again.string(), back);
  EXPECT_EQ(read_bytes(path), read_bytes(again));

  // The rebuilt network computes the same output.
  const auto rebuilt = network_from_checkpoint(back);
  Rng r1(0), r2(0);
  const auto img = Tensor<float>::full({1, 3, 8, 8}, 0.3f);
  const auto a = net.super_resolve(img, 2.0, RoutingMode::threshold, r1);
  const auto b = rebuilt.super_resolve(img, 2.0, RoutingMode::threshold, r2);
  for (std::size_t i = 0; i < a.numel(); ++i) ASSERT_EQ(a.data()[i], b.data()[i]);
  fs::remove(path);
  fs::remove(again);
}

TEST(Checkpoint, RejectsOtherVersionsAndGarbage) {
  Checkpoint ck;
  ck.config_text = tiny_config().to_text();
  const auto path = temp_file("ver.ckpt");
  save_checkpoint(path.string(), ck);
  std::string bytes = read_bytes(path);
  bytes[4] = static_cast<char>(kCheckpointVersion + 1);
  {
    std::ofstream out(path, std::ios::binary);
    out << bytes;
  }
  EXPECT_THROW(load_checkpoint(path.string()), IoError);
  {
    std::ofstream out(path, std::ios::binary);
    out << "not a checkpoint";
  }
  EXPECT_THROW(load_checkpoint(path.string()), IoError);
  EXPECT_THROW(load_checkpoint(temp_file("missing.ckpt").string()), IoError);
  fs::remove(path);
}

TEST(Checkpoint, LoadParametersChecksNamesAndShapes) {
  Rng rng(0);
  const auto net = Network<float>::create(tiny_config(), Stage::baseline, rng);
  auto stored = snapshot_parameters(net.parameters());
  stored.pop_back();
  EXPECT_THROW(load_parameters(net.parameters(), stored, true), IoError);
  EXPECT_NO_THROW(load_parameters(net.parameters(), stored, false));
  stored[0].tensor = Tensor<float>::zeros({1});
  EXPECT_THROW(load_parameters(net.parameters(), stored, false), DimensionError);
}

TEST(Config, TextRoundTrip) {
  RunConfig c = tiny_config();
  c.backbone.reduction = GsaReduction::random_matrix;
  c.backbone.relative_bias = true;
  c.train.lambda = 3e-4;
  c.train.data_dir = "/some/where";
  c.upsampler.feat_unfold = false;
  EXPECT_EQ(RunConfig::from_text(c.to_text()), c);
  EXPECT_EQ(RunConfig::from_text(RunConfig{}.to_text()), RunConfig{});
}

TEST(Config, DefaultsAreTheFullConfiguration) {
  const RunConfig c;
  EXPECT_EQ(c.backbone.groups, 8u);
  EXPECT_EQ(c.backbone.channels, 224u);
  EXPECT_EQ(c.backbone.global_window, 48u);
  EXPECT_EQ(c.backbone.local_windows, (std::array<std::size_t, 3>{4, 8, 16}));
  EXPECT_EQ(c.backbone.out_channels, 64u);
  EXPECT_EQ(c.train.lambda, 2e-4);
  EXPECT_EQ(c.train.alpha1, 0.25);
  EXPECT_EQ(c.train.alpha2, 0.25);
  EXPECT_EQ(c.train.alpha3, 0.5);
}

TEST(Config, CommentsPartialKeysAndErrors) {
  const auto c = RunConfig::from_text("# comment\n\ngroups = 3\nchannels = 32  # inline\n");
  EXPECT_EQ(c.backbone.groups, 3u);
  EXPECT_EQ(c.backbone.channels, 32u);
  EXPECT_EQ(c.backbone.heads, RunConfig{}.backbone.heads);
  EXPECT_THROW(RunConfig::from_text("no_such_key = 1\n"), ConfigError);
  EXPECT_THROW(RunConfig::from_text("groups = many\n"), ConfigError);
  EXPECT_THROW(RunConfig::from_text("channels = 30\n"), ConfigError);
  EXPECT_THROW(RunConfig::from_text("channels = 24\nheads = 4\n"), ConfigError);
  EXPECT_THROW(RunConfig::from_text("global_window = 48\npool_size = 7\n"), ConfigError);
  EXPECT_THROW(RunConfig::from_text("gsa_reduction = median\n"), ConfigError);
  EXPECT_THROW(RunConfig::load(temp_file("absent.cfg").string()), IoError);
}
