#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>

namespace tadt {

enum class GsaReduction { max_pool, avg_pool, random_matrix };

std::string to_string(GsaReduction kind);
GsaReduction parse_gsa_reduction(const std::string& text);

// Architecture of the feature-extraction backbone. Defaults are the full
// published configuration.
struct BackboneConfig {
  std::size_t groups = 8;  // MSTG count N
  std::size_t channels = 224;
  std::array<std::size_t, 3> local_windows{4, 8, 16};
  std::size_t global_window = 48;
  std::size_t pool_size = 8;  // d: GSA keys/values reduced to d x d per window
  std::size_t heads = 2;      // per branch
  std::size_t mlp_ratio = 2;
  std::size_t out_channels = 64;
  bool gsa_enabled = true;
  GsaReduction reduction = GsaReduction::max_pool;
  bool relative_bias = false;

  std::size_t branch_channels() const { return channels / 4; }
  std::size_t routing_length() const { return 4 * groups; }
  void validate() const;
};

struct RouterConfig {
  std::size_t hidden = 16;        // image-branch conv width
  std::size_t scale_hidden = 16;  // scale-branch linear width
  double eval_threshold = 0.5;
  void validate() const;
};

struct UpsamplerConfig {
  std::size_t hidden = 256;
  std::size_t layers = 5;  // linear layers, the last maps to RGB
  bool local_ensemble = true;
  bool feat_unfold = true;
  bool cell_decode = true;
  std::size_t query_chunk = 30000;
  void validate() const;
};

struct TrainConfig {
  double lambda = 2e-4;
  double alpha1 = 0.25;
  double alpha2 = 0.25;
  double alpha3 = 0.5;
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t steps = 5000;
  std::size_t batch_size = 4;
  std::size_t patch_size = 48;  // LR patch side; patch_size^2 query pixels per sample
  double scale_min = 1.0;
  double scale_max = 4.0;
  std::uint64_t seed = 0;
  std::string data_dir;  // empty: procedural toy dataset
  std::uint64_t data_seed = 2024;
  std::size_t toy_images = 64;
  std::size_t toy_min_size = 64;
  std::size_t toy_max_size = 128;
  std::size_t val_images = 8;
  std::size_t val_every = 0;  // 0 disables periodic validation
  double val_scale = 2.0;
  std::size_t checkpoint_every = 0;
  std::string metrics_log;
  std::string output = "tadt.ckpt";
  std::string baseline_checkpoint;
  void validate() const;
};

// Everything a run needs; serialized verbatim into checkpoints.
struct RunConfig {
  BackboneConfig backbone;
  RouterConfig router;
  UpsamplerConfig upsampler;
  TrainConfig train;

  void validate() const;

  // Flat `key = value` text, one entry per line in a fixed order.
  std::string to_text() const;
  // Accepts `#` comments and blank lines; keys not mentioned keep defaults.
  static RunConfig from_text(const std::string& text);
  static RunConfig load(const std::string& path);

  bool operator==(const RunConfig& other) const { return to_text() == other.to_text(); }
};

// Small configuration for gradient checks and tests (N=2, C=16).
RunConfig tiny_config();

}  // namespace tadt
