#pragma once

// Losses, the optimizer and the two-stage training loop.

#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "tadt/checkpoint.hpp"
#include "tadt/data.hpp"
#include "tadt/model.hpp"

namespace tadt {

// t(s) = alpha1 + alpha2 * s^alpha3
double intensity_threshold(double s, double alpha1 = 0.25, double alpha2 = 0.25, double alpha3 = 0.5);

template <typename T>
struct IntensityLoss {
  Tensor<T> value;  // beta * M, with M held constant
  bool mask = false;
};

template <typename T>
IntensityLoss<T> intensity_loss(const Tensor<T>& beta, double s, double alpha1 = 0.25, double alpha2 = 0.25,
                                double alpha3 = 0.5);

template <typename T>
struct LossBreakdown {
  Tensor<T> total;
  double l1 = 0.0;
  double l_beta = 0.0;
  bool mask = false;
};

// L1 = mean |pred - target|; total = L1 + lambda * beta * M. beta may be
// undefined (baseline), in which case total = L1.
template <typename T>
LossBreakdown<T> total_loss(const Tensor<T>& pred, const Tensor<T>& target, const Tensor<T>& beta, double s,
                            double lambda, double alpha1 = 0.25, double alpha2 = 0.25, double alpha3 = 0.5);

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam with bias correction. Parameters that received no gradient since the
// last zero_grad() are skipped entirely, moments included.
template <typename T>
class Adam {
 public:
  Adam(ParamList<T> params, AdamOptions options);

  void step(double lr);
  void zero_grad();

  std::uint64_t steps() const { return t_; }
  const ParamList<T>& params() const { return params_; }

  OptimizerSnapshot snapshot() const;
  void restore(const OptimizerSnapshot& snap);

 private:
  ParamList<T> params_;
  AdamOptions options_;
  std::vector<std::vector<T>> m_;
  std::vector<std::vector<T>> v_;
  std::uint64_t t_ = 0;
};

// lr halves after every quarter of the run.
double step_decay_lr(double base_lr, std::size_t step, std::size_t total_steps);

struct StepMetrics {
  std::size_t step = 0;
  double l1 = 0.0;
  double l_beta = 0.0;
  std::optional<double> beta;  // tadt stage only
  double active_branches = 0.0;
  std::optional<double> psnr;
  std::size_t skipped = 0;
};

std::string metrics_json(const StepMetrics& m);

struct ValidationResult {
  double psnr = 0.0;          // mean over images
  double bicubic_psnr = 0.0;  // bicubic interpolation of the same LR inputs
  double mean_beta = 0.0;
  double mean_active = 0.0;
  std::vector<RoutingVector> routes;
  std::vector<double> image_psnr, image_bicubic_psnr;
};

// Held-out evaluation at scale s: each HR image is cropped to a multiple of
// s, downsampled by bicubic, super-resolved and compared in RGB.
ValidationResult evaluate(const Network<float>& net, const std::vector<Image>& images, double s, RoutingMode mode,
                          Rng& rng);

struct Dataset {
  std::vector<Image> train;
  std::vector<Image> val;
};

// Toy images when data_dir is empty, otherwise the folder; the last
// val_images are held out.
Dataset load_dataset(const TrainConfig& config);

class Trainer {
 public:
  // Fresh run. The tadt stage loads backbone and upsampler weights from
  // config.train.baseline_checkpoint and adds a new routing controller.
  Trainer(const RunConfig& config, Stage stage, Dataset data);
  // Continues from a checkpoint that carries optimizer and rng state.
  static Trainer resume(const std::string& path, Dataset data);

  StepMetrics step();
  // Runs until config.train.steps, appending JSON lines to the metrics log
  // and writing checkpoints as configured. on_step, when given, sees every
  // step's metrics.
  void run(const std::function<void(const StepMetrics&)>& on_step = {});

  Checkpoint checkpoint() const;
  void save(const std::string& path) const;

  const Network<float>& network() const { return net_; }
  const RunConfig& config() const { return config_; }
  std::size_t steps_done() const { return step_; }
  const Rng& rng() const { return rng_; }
  const Dataset& data() const { return data_; }

 private:
  Trainer(const RunConfig& config, std::pair<Network<float>, Rng> init, Dataset data);

  RunConfig config_;
  Network<float> net_;
  Dataset data_;
  Adam<float> opt_;
  Rng rng_;
  std::size_t step_ = 0;
  std::size_t skipped_ = 0;
};

}  // namespace tadt
