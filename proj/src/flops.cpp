#include "tadt/flops.hpp"

#include <sstream>

#include "json.hpp"
#include "tadt/model.hpp"
#include "tadt/upsampler.hpp"

namespace tadt {

const char* const kFlopsConvention =
    "1 multiply-accumulate = 2 FLOPs; other tensor ops 1 FLOP per output scalar (reductions: per input scalar); "
    "per sample";

namespace {

using u64 = std::uint64_t;

FlopCount macs(u64 n) { return {2 * n, 0}; }
FlopCount elementwise(u64 n) { return {0, n}; }

// Same-padded k x k conv with bias on an h x w map.
FlopCount conv(u64 cin, u64 cout, u64 h, u64 w, u64 k = 3) {
  FlopCount f = macs(cout * cin * k * k * h * w);
  f.other += cout * h * w;
  return f;
}

// Linear over `rows` rows, bias optional.
FlopCount linear(u64 rows, u64 in, u64 out, bool bias) {
  FlopCount f = macs(rows * in * out);
  if (bias) f.other += rows * out;
  return f;
}

struct BranchShape {
  u64 windows = 0;  // padded window count
  u64 queries = 0;  // tokens per window
  u64 keys = 0;     // key/value tokens per window
};

BranchShape branch_shape(const BackboneConfig& cfg, std::size_t j, u64 h, u64 w) {
  const bool global = j == 3;
  const u64 m = global ? cfg.global_window : cfg.local_windows[j];
  const u64 ph = (h + m - 1) / m * m, pw = (w + m - 1) / m * m;
  BranchShape b;
  b.windows = (ph / m) * (pw / m);
  b.queries = m * m;
  b.keys = global ? static_cast<u64>(cfg.pool_size) * cfg.pool_size : m * m;
  return b;
}

MstgFlops count_group(const BackboneConfig& cfg, const std::array<bool, 4>& r, u64 h, u64 w) {
  const u64 c = cfg.channels, c4 = cfg.branch_channels(), hw = h * w, heads = cfg.heads;
  const u64 hidden = cfg.mlp_ratio * c;
  std::array<bool, 4> on{};
  u64 k = 0;
  for (std::size_t j = 0; j < 4; ++j) {
    on[j] = r[j] && (j < 3 || cfg.gsa_enabled);
    k += on[j];
  }

  MstgFlops block;
  if (k > 0) {
    block.norm = elementwise(hw * c);
    for (std::size_t j = 0; j < 4; ++j) {
      if (!on[j]) continue;
      const BranchShape b = branch_shape(cfg, j, h, w);
      block.qkv += linear(hw, c4, 3 * c4, false);
      FlopCount a;
      a += macs(b.windows * b.queries * b.keys * c4);  // Q K^T over all heads
      a += macs(b.windows * b.queries * b.keys * c4);  // weights V
      a.other += b.windows * b.queries * c4;           // query scaling
      a.other += b.windows * heads * b.queries * b.keys;  // softmax
      if (j < 3 && cfg.relative_bias) a.other += b.windows * heads * b.queries * b.keys;
      if (j == 3) {
        const u64 tokens = b.windows * b.queries * c4;  // per reduced tensor
        if (cfg.reduction == GsaReduction::random_matrix) {
          a += macs(2 * b.windows * b.keys * b.queries * c4);
        } else {
          a.other += 2 * tokens;
        }
      }
      block.attention += a;
    }
    block.projection = macs(hw * k * c4 * c);
    block.projection.other += hw * c;  // residual
  }
  block.mlp = elementwise(hw * c);  // norm2
  block.mlp += linear(hw, c, hidden, true);
  block.mlp.other += hw * hidden;   // GELU
  block.mlp += linear(hw, hidden, c, true);
  block.mlp.other += hw * c;        // residual

  MstgFlops g;
  for (FlopCount MstgFlops::*f : {&MstgFlops::qkv, &MstgFlops::attention, &MstgFlops::projection, &MstgFlops::mlp,
                                  &MstgFlops::norm}) {
    g.*f = block.*f;
    g.*f += block.*f;  // two blocks share the routing
  }
  g.conv = conv(c, c, h, w);
  g.conv.other += hw * c;
  return g;
}

FlopCount count_router(const RunConfig& config, u64 h, u64 w) {
  const u64 cr = config.router.hidden, hs = config.router.scale_hidden;
  const u64 n = config.backbone.routing_length();
  FlopCount f;
  f += conv(3, cr, h, w);
  f.other += cr * h * w;  // GELU
  f += conv(cr, cr, h, w);
  f.other += cr * h * w;  // GELU
  f.other += cr * h * w;  // spatial mean
  f += linear(1, cr, n, true);
  f += linear(1, 1, hs, true);
  f.other += hs;
  f += linear(1, hs, hs, true);
  f.other += hs;
  f += linear(1, hs, 1, true);
  f.other += 1;  // sigmoid on beta
  // Modulation: sigmoid, subtract, sum, scale, divide, multiply and clamp
  // over the 4N logits plus two scalar ops for the denominator.
  f.other += 7 * n + 2;
  return f;
}

FlopCount count_upsampler(const RunConfig& config, u64 queries) {
  const UpsamplerConfig& u = config.upsampler;
  const u64 shifts = u.local_ensemble ? 4 : 1;
  const u64 rows = shifts * queries;
  u64 in = static_cast<u64>(config.backbone.out_channels) * (u.feat_unfold ? 9 : 1) + 2 + (u.cell_decode ? 2 : 0);
  FlopCount f;
  for (std::size_t i = 0; i < u.layers; ++i) {
    const u64 out = i + 1 == u.layers ? 3 : u.hidden;
    f += linear(rows, in, out, true);
    if (i + 1 < u.layers) f.other += rows * out;  // GELU
    in = out;
  }
  if (shifts > 1) {
    f.other += rows * 3;                 // area weighting
    f.other += (shifts - 1) * queries * 3;  // sum over shifts
  }
  f.other += 2 * queries * 3;  // output affine
  return f;
}

FlopsReport count_impl(const RunConfig& config, const RoutingVector& r, std::size_t height, std::size_t width,
                       double s) {
  const BackboneConfig& cfg = config.backbone;
  const u64 h = height, w = width, c = cfg.channels;
  FlopsReport rep;
  rep.height = height;
  rep.width = width;
  rep.scale = s;
  rep.out_height = upsampled_extent(height, s);
  rep.out_width = upsampled_extent(width, s);
  rep.routing = r;
  rep.shallow = elementwise(2 * 3 * h * w);
  rep.shallow += conv(3, c, h, w);
  for (std::size_t i = 0; i < cfg.groups; ++i) rep.groups.push_back(count_group(cfg, r.group(i), h, w));
  rep.body = conv(c, c, h, w);
  rep.body.other += c * h * w;
  rep.head = conv(c, cfg.out_channels, h, w);
  rep.router = count_router(config, h, w);
  rep.upsampler = count_upsampler(config, static_cast<u64>(rep.out_height) * rep.out_width);
  rep.dynamic_for_r = rep.sum().total();
  return rep;
}

}  // namespace

FlopCount MstgFlops::sum() const {
  FlopCount f = qkv;
  f += attention;
  f += projection;
  f += mlp;
  f += norm;
  f += conv;
  return f;
}

FlopCount FlopsReport::backbone() const {
  FlopCount f = shallow;
  for (const auto& g : groups) f += g.sum();
  f += body;
  f += head;
  return f;
}

FlopCount FlopsReport::sum() const {
  FlopCount f = backbone();
  f += router;
  f += upsampler;
  return f;
}

FlopsReport count_flops(const RunConfig& config, const RoutingVector& r, std::size_t height, std::size_t width,
                        double s) {
  config.backbone.validate();
  if (r.size() != config.backbone.routing_length()) {
    throw ContractError("routing vector has length " + std::to_string(r.size()) + ", expected " +
                        std::to_string(config.backbone.routing_length()));
  }
  if (height == 0 || width == 0) throw ContractError("FLOP count needs a non-empty input");
  if (!(s >= 1.0)) throw ContractError("scale must be >= 1, got " + std::to_string(s));
  FlopsReport rep = count_impl(config, r, height, width, s);
  rep.static_all_on =
      count_impl(config, RoutingVector::all_on(config.backbone.groups), height, width, s).dynamic_for_r;
  return rep;
}

std::uint64_t measure_flops(const RunConfig& config, const RoutingVector& r, std::size_t height, std::size_t width,
                            double s, std::uint64_t max_flops) {
  const FlopsReport predicted = count_flops(config, r, height, width, s);
  if (predicted.sum().matmul > max_flops) {
    throw ConfigError("instrumented measurement refused: predicted " + std::to_string(predicted.sum().matmul) +
                      " matmul/conv FLOPs exceed the limit of " + std::to_string(max_flops) +
                      "; use a smaller configuration or input");
  }
  Rng rng(0);
  const Network<float> net = Network<float>::create(config, Stage::tadt, rng);
  std::vector<float> px(3 * height * width);
  for (auto& v : px) v = static_cast<float>(rng.uniform());
  const Tensor<float> image({1, 3, height, width}, std::move(px));
  NoGradGuard guard;
  MacCountScope scope;
  (void)net.router->forward(image, s);
  const Tensor<float> feat = net.backbone.forward(image, r);
  (void)net.upsampler.full_upsample(feat, s);
  return 2 * scope.count();
}

namespace {

nlohmann::ordered_json to_json(const FlopCount& f) {
  return {{"matmul", f.matmul}, {"other", f.other}, {"total", f.total()}};
}

}  // namespace

std::string flops_json(const FlopsReport& rep) {
  nlohmann::ordered_json j;
  j["input"] = {rep.height, rep.width};
  j["scale"] = rep.scale;
  j["output"] = {rep.out_height, rep.out_width};
  j["routing"] = rep.routing.to_string();
  j["shallow"] = to_json(rep.shallow);
  nlohmann::ordered_json groups = nlohmann::ordered_json::array();
  for (const auto& g : rep.groups) {
    groups.push_back({{"qkv", to_json(g.qkv)},
                      {"attention", to_json(g.attention)},
                      {"projection", to_json(g.projection)},
                      {"mlp", to_json(g.mlp)},
                      {"norm", to_json(g.norm)},
                      {"conv", to_json(g.conv)},
                      {"total", g.sum().total()}});
  }
  j["groups"] = groups;
  j["body"] = to_json(rep.body);
  j["head"] = to_json(rep.head);
  j["router"] = to_json(rep.router);
  j["upsampler"] = to_json(rep.upsampler);
  j["static_all_on"] = rep.static_all_on;
  j["dynamic_for_r"] = rep.dynamic_for_r;
  j["baseline_total"] = rep.baseline_total();
  j["convention"] = kFlopsConvention;
  return j.dump(2);
}

std::string flops_text(const FlopsReport& rep) {
  std::ostringstream os;
  auto g = [](u64 v) {
    std::ostringstream s;
    s.setf(std::ios::fixed);
    s.precision(4);
    s << static_cast<double>(v) / 1e9;
    return s.str();
  };
  auto row = [&](const std::string& name, const FlopCount& f) {
    os << "  " << name << std::string(name.size() < 14 ? 14 - name.size() : 1, ' ') << g(f.total()) << " G  (matmul "
       << g(f.matmul) << ", other " << g(f.other) << ")\n";
  };
  os << "input " << rep.height << "x" << rep.width << ", scale " << rep.scale << " -> " << rep.out_height << "x"
     << rep.out_width << "\n";
  os << "routing " << rep.routing.to_string() << "\n";
  row("shallow", rep.shallow);
  for (std::size_t i = 0; i < rep.groups.size(); ++i) row("group" + std::to_string(i + 1), rep.groups[i].sum());
  row("body", rep.body);
  row("head", rep.head);
  row("router", rep.router);
  row("upsampler", rep.upsampler);
  os << "static (all on)  " << g(rep.static_all_on) << " G\n";
  os << "dynamic          " << g(rep.dynamic_for_r) << " G\n";
  os << "without router   " << g(rep.baseline_total()) << " G\n";
  os << "convention: " << kFlopsConvention << "\n";
  return os.str();
}

}  // namespace tadt
