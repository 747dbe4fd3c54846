// Command-line front end: train, eval, infer, flops, gradcheck and
// inspect-routes.

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "tadt/checkpoint.hpp"
#include "tadt/flops.hpp"
#include "tadt/gradcheck.hpp"
#include "tadt/image.hpp"
#include "tadt/ops.hpp"
#include "tadt/training.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

using namespace tadt;

namespace {

// The autodiff graph allocates and frees many mid-sized buffers per step;
// keeping them on the heap instead of fresh mmaps saves about a quarter of
// the step time.
void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 << 20);
#endif
}

std::vector<double> parse_scales(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    std::size_t used = 0;
    double s = 0.0;
    try {
      s = std::stod(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != item.size()) throw ContractError("cannot parse scale '" + item + "'");
    if (!(s >= 1.0)) throw ContractError("scale must be >= 1, got " + item);
    out.push_back(s);
  }
  if (out.empty()) throw ContractError("no scale given");
  return out;
}

std::pair<std::size_t, std::size_t> parse_hw(const std::string& text) {
  const auto x = text.find('x');
  try {
    if (x != std::string::npos) {
      std::size_t a = 0, b = 0;
      const unsigned long h = std::stoul(text.substr(0, x), &a);
      const unsigned long w = std::stoul(text.substr(x + 1), &b);
      if (a == x && b == text.size() - x - 1 && h > 0 && w > 0) return {h, w};
    }
  } catch (const std::exception&) {
  }
  throw ContractError("--hw expects HxW with positive extents, got '" + text + "'");
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Tensor<float> as_batch(const Image& img) { return reshape(img, {1, 3, img.dim(1), img.dim(2)}); }

nlohmann::ordered_json number_or_inf(double v) {
  return std::isinf(v) ? nlohmann::ordered_json("inf") : nlohmann::ordered_json(v);
}

// --- train ---------------------------------------------------------------

struct TrainArgs {
  std::string config;
  std::string stage = "baseline";
  std::optional<std::uint64_t> seed;
  std::string resume;
  std::optional<std::size_t> steps;
  std::string output;
  std::string metrics;
  std::string baseline;
  std::string data;
  std::size_t print_every = 50;
};

int run_train(const TrainArgs& a) {
  std::optional<Trainer> trainer;
  if (!a.resume.empty()) {
    const Checkpoint ck = load_checkpoint(a.resume);
    trainer.emplace(Trainer::resume(a.resume, load_dataset(ck.config().train)));
  } else {
    RunConfig config = a.config.empty() ? RunConfig{} : RunConfig::load(a.config);
    if (a.seed) config.train.seed = *a.seed;
    if (a.steps) config.train.steps = *a.steps;
    if (!a.output.empty()) config.train.output = a.output;
    if (!a.metrics.empty()) config.train.metrics_log = a.metrics;
    if (!a.baseline.empty()) config.train.baseline_checkpoint = a.baseline;
    if (!a.data.empty()) config.train.data_dir = a.data == "toy" ? "" : a.data;
    config.validate();
    trainer.emplace(config, parse_stage(a.stage), load_dataset(config.train));
  }
  const std::size_t total = trainer->config().train.steps;
  trainer->run([&](const StepMetrics& m) {
    if (a.print_every && (m.step % a.print_every == 0 || m.step == total)) {
      std::cerr << "step " << m.step << "/" << total << "  l1 " << m.l1;
      if (m.beta) std::cerr << "  beta " << *m.beta << "  active " << m.active_branches;
      if (m.psnr) std::cerr << "  val psnr " << format_psnr(*m.psnr);
      std::cerr << "\n";
    }
  });
  std::cerr << "wrote " << trainer->config().train.output << "\n";
  return 0;
}

// --- eval ----------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint;
  std::string data = "toy";
  std::string scales = "2";
  std::string routing = "threshold";
  std::uint64_t seed = 0;
  bool json = false;
};

int run_eval(const EvalArgs& a) {
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  const Network<float> net = network_from_checkpoint(ck);
  const RunConfig config = ck.config();
  const std::vector<Image> images =
      a.data == "toy" ? load_dataset(config.train).val : load_image_folder(a.data);
  if (images.empty()) throw IoError("no images in " + a.data);
  const RoutingMode mode = parse_routing_mode(a.routing);
  nlohmann::ordered_json rows = nlohmann::ordered_json::array();
  if (!a.json) {
    std::cout << "scale   psnr      bicubic   active  beta    dynamic GFLOPs\n";
  }
  for (double s : parse_scales(a.scales)) {
    Rng rng(a.seed);
    const ValidationResult r = evaluate(net, images, s, mode, rng);
    // FLOPs for the mean image size under each image's own routing.
    double flops = 0.0;
    for (std::size_t i = 0; i < images.size(); ++i) {
      const std::size_t lh = static_cast<std::size_t>(std::floor(static_cast<double>(images[i].dim(1)) / s));
      const std::size_t lw = static_cast<std::size_t>(std::floor(static_cast<double>(images[i].dim(2)) / s));
      flops += static_cast<double>(count_flops(config, r.routes[i], lh, lw, s).dynamic_for_r);
    }
    flops /= static_cast<double>(images.size());
    if (a.json) {
      nlohmann::json per_image = nlohmann::json::array();
      for (std::size_t i = 0; i < images.size(); ++i) {
        per_image.push_back({{"psnr", number_or_inf(r.image_psnr[i])},
                             {"bicubic_psnr", number_or_inf(r.image_bicubic_psnr[i])},
                             {"routing", r.routes[i].to_string()}});
      }
      rows.push_back({{"scale", s},
                      {"psnr", number_or_inf(r.psnr)},
                      {"bicubic_psnr", number_or_inf(r.bicubic_psnr)},
                      {"mean_active", r.mean_active},
                      {"mean_beta", r.mean_beta},
                      {"mean_dynamic_flops", flops},
                      {"images", images.size()},
                      {"per_image", per_image}});
    } else {
      std::printf("%-7g %-9s %-9s %-7.2f %-7.4f %.4f\n", s, format_psnr(r.psnr).c_str(),
                  format_psnr(r.bicubic_psnr).c_str(), r.mean_active, r.mean_beta, flops / 1e9);
    }
  }
  if (a.json) std::cout << rows.dump(2) << "\n";
  return 0;
}

// --- infer ---------------------------------------------------------------

struct InferArgs {
  std::string checkpoint, input, output;
  double scale = 2.0;
  std::string routing = "threshold";
  std::uint64_t seed = 0;
};

int run_infer(const InferArgs& a) {
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  const Network<float> net = network_from_checkpoint(ck);
  const Image lr = read_image(a.input);
  Rng rng(a.seed);
  std::vector<Routed<float>> routes;
  const Tensor<float> sr = net.super_resolve(as_batch(lr), a.scale, parse_routing_mode(a.routing), rng, &routes);
  write_image(a.output, reshape(sr, {3, sr.dim(2), sr.dim(3)}));
  std::cerr << "wrote " << a.output << " (" << sr.dim(2) << "x" << sr.dim(3) << "), routing "
            << routes[0].bits.to_string() << "\n";
  return 0;
}

// --- flops ---------------------------------------------------------------

struct FlopsArgs {
  std::string config;
  double scale = 2.0;
  std::string hw = "48x48";
  std::string routing_file;
  bool json = false;
};

int run_flops(const FlopsArgs& a) {
  const RunConfig config = a.config.empty() ? RunConfig{} : RunConfig::load(a.config);
  const auto [h, w] = parse_hw(a.hw);
  const RoutingVector r = a.routing_file.empty() ? RoutingVector::all_on(config.backbone.groups)
                                                 : RoutingVector::parse(read_text_file(a.routing_file));
  const FlopsReport rep = count_flops(config, r, h, w, a.scale);
  std::cout << (a.json ? flops_json(rep) + "\n" : flops_text(rep));
  return 0;
}

// --- gradcheck -----------------------------------------------------------

struct GradcheckArgs {
  std::string config;
  bool tiny = false;
};

int run_gradcheck(const GradcheckArgs& a) {
  if (!a.tiny && a.config.empty()) throw ConfigError("gradcheck needs --tiny or --config");
  const RunConfig config = a.config.empty() ? tiny_config() : RunConfig::load(a.config);
  if (!a.tiny && config.backbone.channels > 32) {
    throw ConfigError("gradcheck runs finite differences over the whole network; use a tiny configuration");
  }
  std::size_t failed = 0;
  const auto checks = run_gradcheck_suite(config, &std::cout);
  for (const auto& c : checks) failed += !c.passed();
  std::cout << (failed ? std::to_string(failed) + " of " + std::to_string(checks.size()) + " checks failed\n"
                       : "all " + std::to_string(checks.size()) + " checks passed\n");
  return failed ? 1 : 0;
}

// --- inspect-routes ------------------------------------------------------

struct InspectArgs {
  std::string checkpoint, input;
  std::string scales = "2,3,4";
  std::string routing = "threshold";
  std::uint64_t seed = 0;
};

int run_inspect(const InspectArgs& a) {
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  const Network<float> net = network_from_checkpoint(ck);
  const RunConfig config = ck.config();
  const Image img = read_image(a.input);
  const Tensor<float> lr = as_batch(img);
  const RoutingMode mode = parse_routing_mode(a.routing);
  Rng rng(a.seed);
  for (double s : parse_scales(a.scales)) {
    const Routed<float> routed = [&] {
      NoGradGuard guard;
      return net.route(lr, s, mode, rng);
    }();
    nlohmann::ordered_json j;
    j["s"] = s;
    if (routed.dist) {
      j["beta"] = routed.dist->beta.item();
      std::vector<double> p(routed.dist->probs.data().begin(), routed.dist->probs.data().end());
      j["p"] = p;
    } else {
      j["beta"] = nullptr;
      j["p"] = nullptr;
    }
    j["r"] = routed.bits.to_string();
    j["dynamic_flops"] = count_flops(config, routed.bits, img.dim(1), img.dim(2), s).dynamic_for_r;
    std::cout << j.dump() << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Task-aware dynamic transformer for arbitrary-scale super-resolution"};
  app.require_subcommand(1);

  TrainArgs train;
  auto* t = app.add_subcommand("train", "train a baseline or tadt stage");
  t->add_option("--config", train.config, "run configuration file");
  t->add_option("--stage", train.stage, "baseline or tadt")->check(CLI::IsMember({"baseline", "tadt"}));
  t->add_option("--seed", train.seed, "override the configured seed");
  t->add_option("--resume", train.resume, "continue from a checkpoint");
  t->add_option("--steps", train.steps, "override the configured step count");
  t->add_option("--output", train.output, "checkpoint path");
  t->add_option("--metrics", train.metrics, "JSON-lines metrics log");
  t->add_option("--baseline", train.baseline, "baseline checkpoint for the tadt stage");
  t->add_option("--data", train.data, "image folder, or 'toy' for the procedural set");
  t->add_option("--print-every", train.print_every, "progress line interval (0: quiet)");

  EvalArgs eval;
  auto* e = app.add_subcommand("eval", "PSNR of a checkpoint over held-out images");
  e->add_option("--checkpoint", eval.checkpoint)->required();
  e->add_option("--data", eval.data, "image folder, or 'toy' for the checkpoint's held-out toy images");
  e->add_option("--scale", eval.scales, "scale or comma-separated scales");
  e->add_option("--routing", eval.routing)->check(CLI::IsMember({"sample", "threshold", "all-on"}));
  e->add_option("--seed", eval.seed, "seed for sampled routing");
  e->add_flag("--json", eval.json);

  InferArgs infer;
  auto* i = app.add_subcommand("infer", "super-resolve one image");
  i->add_option("--checkpoint", infer.checkpoint)->required();
  i->add_option("--input", infer.input)->required();
  i->add_option("--output", infer.output)->required();
  i->add_option("--scale", infer.scale)->required();
  i->add_option("--routing", infer.routing)->check(CLI::IsMember({"sample", "threshold", "all-on"}));
  i->add_option("--seed", infer.seed, "seed for sampled routing");

  FlopsArgs flops;
  auto* f = app.add_subcommand("flops", "analytic FLOP report");
  f->add_option("--config", flops.config, "run configuration file (default: full configuration)");
  f->add_option("--scale", flops.scale);
  f->add_option("--hw", flops.hw, "LR input extent as HxW");
  f->add_option("--routing-file", flops.routing_file, "file holding the routing bits, e.g. '1010 1111'");
  f->add_flag("--json", flops.json);

  GradcheckArgs grad;
  auto* g = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  g->add_option("--config", grad.config);
  g->add_flag("--tiny", grad.tiny, "use the built-in tiny configuration");

  InspectArgs inspect;
  auto* r = app.add_subcommand("inspect-routes", "routing decisions of a checkpoint per scale");
  r->add_option("--checkpoint", inspect.checkpoint)->required();
  r->add_option("--input", inspect.input)->required();
  r->add_option("--scales", inspect.scales);
  r->add_option("--routing", inspect.routing)->check(CLI::IsMember({"sample", "threshold", "all-on"}));
  r->add_option("--seed", inspect.seed);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& err) {
    return app.exit(err);
  } catch (const CLI::ParseError& err) {
    app.exit(err);
    std::cerr << app.help();
    return 2;
  }

  try {
    if (t->parsed()) return run_train(train);
    if (e->parsed()) return run_eval(eval);
    if (i->parsed()) return run_infer(infer);
    if (f->parsed()) return run_flops(flops);
    if (g->parsed()) return run_gradcheck(grad);
    if (r->parsed()) return run_inspect(inspect);
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 1;
  }
  return 1;
}
