#include "tadt/config.hpp"

#include <charconv>
#include <fstream>
#include <map>
#include <sstream>
#include <type_traits>

#include "tadt/errors.hpp"

namespace tadt {

namespace {

static_assert(std::is_same_v<std::uint64_t, std::size_t>, "seed fields share the size_t visitor");

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

template <typename N>
N parse_number(const std::string& key, const std::string& text) {
  N value{};
  const char* end = text.data() + text.size();
  auto res = std::from_chars(text.data(), end, value);
  if (res.ec != std::errc() || res.ptr != end) {
    throw ConfigError("config key '" + key + "': cannot parse '" + text + "'");
  }
  return value;
}

struct Writer {
  std::ostringstream os;
  void operator()(const char* key, const std::size_t& v) { os << key << " = " << v << '\n'; }
  void operator()(const char* key, const double& v) { os << key << " = " << format_double(v) << '\n'; }
  void operator()(const char* key, const bool& v) { os << key << " = " << (v ? "true" : "false") << '\n'; }
  void operator()(const char* key, const std::string& v) { os << key << " = " << v << '\n'; }
  void operator()(const char* key, const GsaReduction& v) { os << key << " = " << to_string(v) << '\n'; }
  void operator()(const char* key, const std::array<std::size_t, 3>& v) {
    os << key << " = " << v[0] << ',' << v[1] << ',' << v[2] << '\n';
  }
};

struct Reader {
  std::map<std::string, std::string>& entries;
  void operator()(const char* key, std::size_t& v) {
    if (auto it = entries.find(key); it != entries.end()) {
      v = parse_number<std::size_t>(key, it->second);
      entries.erase(it);
    }
  }
  void operator()(const char* key, double& v) {
    if (auto it = entries.find(key); it != entries.end()) {
      v = parse_number<double>(key, it->second);
      entries.erase(it);
    }
  }
  void operator()(const char* key, bool& v) {
    if (auto it = entries.find(key); it != entries.end()) {
      if (it->second == "true" || it->second == "1") {
        v = true;
      } else if (it->second == "false" || it->second == "0") {
        v = false;
      } else {
        throw ConfigError(std::string("config key '") + key + "': expected true/false, got '" + it->second + "'");
      }
      entries.erase(it);
    }
  }
  void operator()(const char* key, std::string& v) {
    if (auto it = entries.find(key); it != entries.end()) {
      v = it->second;
      entries.erase(it);
    }
  }
  void operator()(const char* key, GsaReduction& v) {
    if (auto it = entries.find(key); it != entries.end()) {
      v = parse_gsa_reduction(it->second);
      entries.erase(it);
    }
  }
  void operator()(const char* key, std::array<std::size_t, 3>& v) {
    if (auto it = entries.find(key); it != entries.end()) {
      std::istringstream is(it->second);
      std::string part;
      std::size_t i = 0;
      while (std::getline(is, part, ',')) {
        if (i >= 3) throw ConfigError(std::string("config key '") + key + "': expected three values");
        v[i++] = parse_number<std::size_t>(key, trim(part));
      }
      if (i != 3) throw ConfigError(std::string("config key '") + key + "': expected three values");
      entries.erase(it);
    }
  }
};

template <typename Config, typename Visitor>
void visit_fields(Config& c, Visitor& v) {
  v("groups", c.backbone.groups);
  v("channels", c.backbone.channels);
  v("local_windows", c.backbone.local_windows);
  v("global_window", c.backbone.global_window);
  v("pool_size", c.backbone.pool_size);
  v("heads", c.backbone.heads);
  v("mlp_ratio", c.backbone.mlp_ratio);
  v("out_channels", c.backbone.out_channels);
  v("gsa_enabled", c.backbone.gsa_enabled);
  v("gsa_reduction", c.backbone.reduction);
  v("relative_bias", c.backbone.relative_bias);
  v("router_hidden", c.router.hidden);
  v("router_scale_hidden", c.router.scale_hidden);
  v("eval_threshold", c.router.eval_threshold);
  v("liif_hidden", c.upsampler.hidden);
  v("liif_layers", c.upsampler.layers);
  v("local_ensemble", c.upsampler.local_ensemble);
  v("feat_unfold", c.upsampler.feat_unfold);
  v("cell_decode", c.upsampler.cell_decode);
  v("query_chunk", c.upsampler.query_chunk);
  v("lambda", c.train.lambda);
  v("alpha1", c.train.alpha1);
  v("alpha2", c.train.alpha2);
  v("alpha3", c.train.alpha3);
  v("lr", c.train.lr);
  v("beta1", c.train.beta1);
  v("beta2", c.train.beta2);
  v("adam_eps", c.train.adam_eps);
  v("steps", c.train.steps);
  v("batch_size", c.train.batch_size);
  v("patch_size", c.train.patch_size);
  v("scale_min", c.train.scale_min);
  v("scale_max", c.train.scale_max);
  v("seed", c.train.seed);
  v("data_dir", c.train.data_dir);
  v("data_seed", c.train.data_seed);
  v("toy_images", c.train.toy_images);
  v("toy_min_size", c.train.toy_min_size);
  v("toy_max_size", c.train.toy_max_size);
  v("val_images", c.train.val_images);
  v("val_every", c.train.val_every);
  v("val_scale", c.train.val_scale);
  v("checkpoint_every", c.train.checkpoint_every);
  v("metrics_log", c.train.metrics_log);
  v("output", c.train.output);
  v("baseline_checkpoint", c.train.baseline_checkpoint);
}

}  // namespace

std::string to_string(GsaReduction kind) {
  switch (kind) {
    case GsaReduction::max_pool: return "max";
    case GsaReduction::avg_pool: return "avg";
    case GsaReduction::random_matrix: return "random_matrix";
  }
  return "max";
}

GsaReduction parse_gsa_reduction(const std::string& text) {
  if (text == "max") return GsaReduction::max_pool;
  if (text == "avg") return GsaReduction::avg_pool;
  if (text == "random_matrix") return GsaReduction::random_matrix;
  throw ConfigError("unknown GSA reduction '" + text + "' (expected max, avg or random_matrix)");
}

void BackboneConfig::validate() const {
  if (groups == 0) throw ConfigError("groups must be positive");
  if (channels == 0 || channels % 4 != 0) throw ConfigError("channels must be a positive multiple of 4");
  if (heads == 0 || branch_channels() % heads != 0) {
    throw ConfigError("channels/4 = " + std::to_string(branch_channels()) + " is not divisible by heads = " +
                      std::to_string(heads));
  }
  for (std::size_t m : local_windows) {
    if (m == 0) throw ConfigError("local window sizes must be positive");
  }
  if (global_window == 0 || pool_size == 0) throw ConfigError("global window and pool size must be positive");
  if (pool_size > global_window || global_window % pool_size != 0) {
    throw ConfigError("pool size d = " + std::to_string(pool_size) + " must not exceed and must divide m = " +
                      std::to_string(global_window));
  }
  if (mlp_ratio == 0 || out_channels == 0) throw ConfigError("mlp_ratio and out_channels must be positive");
}

void RouterConfig::validate() const {
  if (hidden == 0 || scale_hidden == 0) throw ConfigError("router widths must be positive");
  if (!(eval_threshold > 0.0 && eval_threshold <= 1.0)) throw ConfigError("eval_threshold must lie in (0, 1]");
}

void UpsamplerConfig::validate() const {
  if (hidden == 0 || layers == 0) throw ConfigError("upsampler hidden width and depth must be positive");
  if (query_chunk == 0) throw ConfigError("query_chunk must be positive");
}

void TrainConfig::validate() const {
  if (lambda < 0.0) throw ConfigError("lambda must be non-negative");
  if (!(lr > 0.0)) throw ConfigError("lr must be positive");
  if (batch_size == 0 || patch_size == 0) throw ConfigError("batch_size and patch_size must be positive");
  if (scale_min < 1.0 || scale_max < scale_min) throw ConfigError("scale range must satisfy 1 <= min <= max");
  if (toy_min_size == 0 || toy_max_size < toy_min_size) throw ConfigError("invalid toy image size range");
}

void RunConfig::validate() const {
  backbone.validate();
  router.validate();
  upsampler.validate();
  train.validate();
}

std::string RunConfig::to_text() const {
  Writer w;
  RunConfig copy = *this;
  visit_fields(copy, w);
  return w.os.str();
}

RunConfig RunConfig::from_text(const std::string& text) {
  std::map<std::string, std::string> entries;
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value'");
    }
    entries[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  RunConfig config;
  Reader r{entries};
  visit_fields(config, r);
  if (!entries.empty()) throw ConfigError("unknown config key '" + entries.begin()->first + "'");
  config.validate();
  return config;
}

RunConfig RunConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return from_text(ss.str());
}

RunConfig tiny_config() {
  RunConfig c;
  c.backbone.groups = 2;
  c.backbone.channels = 16;
  c.backbone.local_windows = {2, 4, 8};
  c.backbone.global_window = 8;
  c.backbone.pool_size = 4;
  c.backbone.heads = 2;
  c.backbone.mlp_ratio = 2;
  c.backbone.out_channels = 8;
  c.router.hidden = 4;
  c.router.scale_hidden = 4;
  c.upsampler.hidden = 16;
  c.upsampler.layers = 3;
  c.train.patch_size = 8;
  c.train.batch_size = 1;
  return c;
}

}  // namespace tadt
