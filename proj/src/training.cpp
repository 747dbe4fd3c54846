#include "tadt/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>

#include "json.hpp"

namespace tadt {

double intensity_threshold(double s, double alpha1, double alpha2, double alpha3) {
  return alpha1 + alpha2 * std::pow(s, alpha3);
}

template <typename T>
IntensityLoss<T> intensity_loss(const Tensor<T>& beta, double s, double alpha1, double alpha2, double alpha3) {
  if (beta.numel() != 1) throw DimensionError("beta must be a single value");
  if (!(s >= 1.0)) throw ContractError("scale must be >= 1");
  IntensityLoss<T> out;
  out.mask = static_cast<double>(beta.data()[0]) >= intensity_threshold(s, alpha1, alpha2, alpha3);
  // The mask is a constant factor: the gradient reaching beta is exactly M.
  out.value = reshape(scale(beta, out.mask ? T(1) : T(0)), {});
  return out;
}

template <typename T>
LossBreakdown<T> total_loss(const Tensor<T>& pred, const Tensor<T>& target, const Tensor<T>& beta, double s,
                            double lambda, double alpha1, double alpha2, double alpha3) {
  if (pred.shape() != target.shape()) {
    throw DimensionError("loss: prediction " + shape_to_string(pred.shape()) + " vs target " +
                         shape_to_string(target.shape()));
  }
  LossBreakdown<T> out;
  Tensor<T> l1 = mean(abs(sub(pred, target)));
  out.l1 = static_cast<double>(l1.item());
  out.total = l1;
  if (beta.defined()) {
    IntensityLoss<T> ib = intensity_loss(beta, s, alpha1, alpha2, alpha3);
    out.mask = ib.mask;
    out.l_beta = static_cast<double>(ib.value.item());
    if (lambda != 0.0) out.total = add(l1, scale(ib.value, static_cast<T>(lambda)));
  }
  return out;
}

template IntensityLoss<float> intensity_loss(const Tensor<float>&, double, double, double, double);
template IntensityLoss<double> intensity_loss(const Tensor<double>&, double, double, double, double);
template LossBreakdown<float> total_loss(const Tensor<float>&, const Tensor<float>&, const Tensor<float>&, double,
                                         double, double, double, double);
template LossBreakdown<double> total_loss(const Tensor<double>&, const Tensor<double>&, const Tensor<double>&, double,
                                          double, double, double, double);

template <typename T>
Adam<T>::Adam(ParamList<T> params, AdamOptions options) : params_(std::move(params)), options_(options) {
  for (const auto& p : params_) {
    m_.emplace_back(p.tensor.numel(), T(0));
    v_.emplace_back(p.tensor.numel(), T(0));
  }
}

template <typename T>
void Adam<T>::step(double lr) {
  ++t_;
  const double b1 = options_.beta1, b2 = options_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const Tensor<T>& p = params_[i].tensor;
    if (!p.requires_grad() || !p.has_grad()) continue;
    const auto g = p.grad();
    auto w = p.mutable_data();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double gk = static_cast<double>(g[k]);
      const double mk = b1 * static_cast<double>(m[k]) + (1.0 - b1) * gk;
      const double vk = b2 * static_cast<double>(v[k]) + (1.0 - b2) * gk * gk;
      m[k] = static_cast<T>(mk);
      v[k] = static_cast<T>(vk);
      const double update = lr * (mk / c1) / (std::sqrt(vk / c2) + options_.eps);
      w[k] = static_cast<T>(static_cast<double>(w[k]) - update);
    }
  }
}

template <typename T>
void Adam<T>::zero_grad() {
  for (const auto& p : params_) p.tensor.zero_grad();
}

template <typename T>
OptimizerSnapshot Adam<T>::snapshot() const {
  OptimizerSnapshot s;
  s.step = t_;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const Shape& shape = params_[i].tensor.shape();
    s.names.push_back(params_[i].name);
    s.first_moment.emplace_back(shape, std::vector<float>(m_[i].begin(), m_[i].end()));
    s.second_moment.emplace_back(shape, std::vector<float>(v_[i].begin(), v_[i].end()));
  }
  return s;
}

template <typename T>
void Adam<T>::restore(const OptimizerSnapshot& snap) {
  if (snap.names.size() != params_.size()) {
    throw IoError("optimizer state covers " + std::to_string(snap.names.size()) + " tensors, model has " +
                  std::to_string(params_.size()));
  }
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (snap.names[i] != params_[i].name || snap.first_moment[i].numel() != m_[i].size() ||
        snap.second_moment[i].numel() != v_[i].size()) {
      throw IoError("optimizer state does not match parameter " + params_[i].name);
    }
    const auto m = snap.first_moment[i].data(), v = snap.second_moment[i].data();
    std::transform(m.begin(), m.end(), m_[i].begin(), [](float x) { return static_cast<T>(x); });
    std::transform(v.begin(), v.end(), v_[i].begin(), [](float x) { return static_cast<T>(x); });
  }
  t_ = snap.step;
}

template class Adam<float>;
template class Adam<double>;

double step_decay_lr(double base_lr, std::size_t step, std::size_t total_steps) {
  const std::size_t quarter = std::max<std::size_t>(1, total_steps / 4);
  const auto halvings = std::min<std::size_t>(step / quarter, 3);
  return base_lr * std::ldexp(1.0, -static_cast<int>(halvings));
}

std::string metrics_json(const StepMetrics& m) {
  nlohmann::ordered_json j;
  j["step"] = m.step;
  j["l1"] = m.l1;
  j["l_beta"] = m.l_beta;
  j["beta"] = m.beta ? nlohmann::ordered_json(*m.beta) : nlohmann::ordered_json(nullptr);
  j["active_branches"] = m.active_branches;
  if (m.psnr) j["psnr"] = std::isinf(*m.psnr) ? nlohmann::ordered_json("inf") : nlohmann::ordered_json(*m.psnr);
  return j.dump();
}

ValidationResult evaluate(const Network<float>& net, const std::vector<Image>& images, double s, RoutingMode mode,
                          Rng& rng) {
  if (images.empty()) throw ContractError("evaluation needs at least one image");
  if (!(s >= 1.0)) throw ContractError("evaluation scale must be >= 1");
  ValidationResult r;
  double beta_sum = 0.0;
  std::size_t beta_count = 0;
  for (const Image& hr : images) {
    const auto lh = static_cast<std::size_t>(std::floor(static_cast<double>(hr.dim(1)) / s));
    const auto lw = static_cast<std::size_t>(std::floor(static_cast<double>(hr.dim(2)) / s));
    if (lh == 0 || lw == 0) throw ContractError("evaluation image too small for scale " + std::to_string(s));
    const std::size_t hh = upsampled_extent(lh, s), hw = upsampled_extent(lw, s);
    const Image ref = crop_image(hr, 0, 0, hh, hw);
    const Image lr = bicubic_resize(ref, lh, lw);
    std::vector<Routed<float>> routes;
    const Tensor<float> sr = net.super_resolve(reshape(lr, {1, 3, lh, lw}), s, mode, rng, &routes);
    std::vector<float> px(sr.data().begin(), sr.data().end());
    for (float& v : px) v = std::clamp(v, 0.0f, 1.0f);
    r.image_psnr.push_back(psnr(Image({3, hh, hw}, std::move(px)), ref));
    r.image_bicubic_psnr.push_back(psnr(bicubic_resize(lr, hh, hw), ref));
    r.psnr += r.image_psnr.back();
    r.bicubic_psnr += r.image_bicubic_psnr.back();
    r.mean_active += static_cast<double>(routes[0].bits.active_count());
    if (routes[0].dist) {
      beta_sum += static_cast<double>(routes[0].dist->beta.item());
      ++beta_count;
    }
    r.routes.push_back(routes[0].bits);
  }
  const auto n = static_cast<double>(images.size());
  r.psnr /= n;
  r.bicubic_psnr /= n;
  r.mean_active /= n;
  r.mean_beta = beta_count ? beta_sum / static_cast<double>(beta_count) : 0.0;
  return r;
}

Dataset load_dataset(const TrainConfig& config) {
  std::vector<Image> all = config.data_dir.empty()
                               ? make_toy_images(config.toy_images, config.toy_min_size, config.toy_max_size,
                                                 config.data_seed)
                               : load_image_folder(config.data_dir);
  if (config.val_images >= all.size()) {
    throw ConfigError("val_images = " + std::to_string(config.val_images) + " leaves no training images out of " +
                      std::to_string(all.size()));
  }
  Dataset d;
  const auto split = static_cast<std::ptrdiff_t>(all.size() - config.val_images);
  d.train.assign(all.begin(), all.begin() + split);
  d.val.assign(all.begin() + split, all.end());
  return d;
}

namespace {

// Initialization and training share one generator, seeded from the config.
std::pair<Network<float>, Rng> initial_network(const RunConfig& config, Stage stage) {
  Rng rng(config.train.seed);
  if (stage == Stage::baseline) {
    Network<float> net = Network<float>::create(config, Stage::baseline, rng);
    return {std::move(net), rng};
  }
  if (config.train.baseline_checkpoint.empty()) {
    throw ConfigError("the tadt stage needs baseline_checkpoint (a trained baseline)");
  }
  const Checkpoint base = load_checkpoint(config.train.baseline_checkpoint);
  if (base.stage != Stage::baseline) {
    throw ConfigError(config.train.baseline_checkpoint + " is not a baseline checkpoint");
  }
  Network<float> net = Network<float>::create(config, Stage::baseline, rng);
  load_parameters(net.parameters(), base.tensors, true);
  net.attach_router(rng);
  return {std::move(net), rng};
}

}  // namespace

Trainer::Trainer(const RunConfig& config, std::pair<Network<float>, Rng> init, Dataset data)
    : config_(config),
      net_(std::move(init.first)),
      data_(std::move(data)),
      opt_(net_.parameters(), AdamOptions{config.train.beta1, config.train.beta2, config.train.adam_eps}),
      rng_(init.second) {}

Trainer::Trainer(const RunConfig& config, Stage stage, Dataset data)
    : Trainer(config, initial_network(config, stage), std::move(data)) {}

Trainer Trainer::resume(const std::string& path, Dataset data) {
  const Checkpoint ckpt = load_checkpoint(path);
  if (!ckpt.optimizer) throw IoError(path + " carries no optimizer state; cannot resume");
  Trainer t(ckpt.config(), {network_from_checkpoint(ckpt), Rng()}, std::move(data));
  t.opt_.restore(*ckpt.optimizer);
  t.rng_.deserialize(ckpt.rng_state);
  t.step_ = ckpt.step;
  return t;
}

StepMetrics Trainer::step() {
  const TrainConfig& tc = config_.train;
  const double lr = step_decay_lr(tc.lr, step_, tc.steps);
  const bool tadt = net_.stage() == Stage::tadt;
  const double lambda = tadt ? tc.lambda : 0.0;
  const std::size_t batch = tc.batch_size;
  opt_.zero_grad();

  StepMetrics m;
  double beta_sum = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    const TrainSample s = draw_sample(data_.train, tc.patch_size, tc.scale_min, tc.scale_max, rng_, &skipped_);
    const Routed<float> routed = net_.route(s.lr, s.scale, RoutingMode::sample, rng_);
    const Tensor<float> feat = net_.features(s.lr, routed);
    const Tensor<float> pred = net_.upsampler.query_rgb(feat, s.coords, s.cells);
    const Tensor<float> beta = routed.dist ? routed.dist->beta : Tensor<float>();
    const LossBreakdown<float> loss = total_loss(pred, s.target, beta, s.scale, lambda, tc.alpha1, tc.alpha2, tc.alpha3);
    // Per-sample backward; leaf gradients accumulate to the batch mean.
    scale(loss.total, 1.0f / static_cast<float>(batch)).backward();
    m.l1 += loss.l1;
    m.l_beta += loss.l_beta;
    m.active_branches += static_cast<double>(routed.bits.active_count());
    if (beta.defined()) beta_sum += static_cast<double>(beta.item());
  }
  opt_.step(lr);
  ++step_;

  const auto n = static_cast<double>(batch);
  m.step = step_;
  m.l1 /= n;
  m.l_beta /= n;
  m.active_branches /= n;
  if (tadt) m.beta = beta_sum / n;
  m.skipped = skipped_;
  return m;
}

void Trainer::run(const std::function<void(const StepMetrics&)>& on_step) {
  const TrainConfig& tc = config_.train;
  std::ofstream log;
  if (!tc.metrics_log.empty()) {
    // A resumed run appends to the log of the run it continues.
    log.open(tc.metrics_log, step_ == 0 ? std::ios::trunc : std::ios::app);
    if (!log) throw IoError("cannot open metrics log " + tc.metrics_log);
  }
  std::size_t reported_skips = skipped_;
  while (step_ < tc.steps) {
    StepMetrics m = step();
    if (tc.val_every && (step_ % tc.val_every == 0 || step_ == tc.steps) && !data_.val.empty()) {
      Rng eval_rng(0);
      m.psnr = evaluate(net_, data_.val, tc.val_scale, RoutingMode::threshold, eval_rng).psnr;
    }
    if (m.skipped != reported_skips) {
      std::cerr << "step " << m.step << ": skipped " << (m.skipped - reported_skips)
                << " image draw(s) too small for the sampled crop\n";
      reported_skips = m.skipped;
    }
    if (log) log << metrics_json(m) << '\n' << std::flush;
    if (on_step) on_step(m);
    if (tc.checkpoint_every && step_ % tc.checkpoint_every == 0 && !tc.output.empty()) save(tc.output);
  }
  if (!tc.output.empty()) save(tc.output);
}

Checkpoint Trainer::checkpoint() const {
  Checkpoint c;
  c.stage = net_.stage();
  c.step = step_;
  c.config_text = config_.to_text();
  c.tensors = snapshot_parameters(net_.parameters());
  c.optimizer = opt_.snapshot();
  c.rng_state = rng_.serialize();
  return c;
}

void Trainer::save(const std::string& path) const { save_checkpoint(path, checkpoint()); }

}  // namespace tadt
