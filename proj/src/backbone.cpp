#include "tadt/backbone.hpp"

#include <cctype>

namespace tadt {

RoutingVector::RoutingVector(const std::vector<int>& bits) {
  if (bits.size() % 4 != 0) {
    throw ContractError("routing vector length " + std::to_string(bits.size()) + " is not a multiple of 4");
  }
  bits_.reserve(bits.size());
  for (std::size_t i = 0; i < bits.size(); ++i) {
    if (bits[i] != 0 && bits[i] != 1) {
      throw ContractError("routing entry " + std::to_string(i) + " is " + std::to_string(bits[i]) +
                          ", expected 0 or 1");
    }
    bits_.push_back(static_cast<std::uint8_t>(bits[i]));
  }
}

RoutingVector RoutingVector::all_on(std::size_t groups) { return RoutingVector(std::vector<int>(4 * groups, 1)); }

RoutingVector RoutingVector::all_off(std::size_t groups) { return RoutingVector(std::vector<int>(4 * groups, 0)); }

RoutingVector RoutingVector::parse(const std::string& text) {
  std::vector<int> bits;
  for (char ch : text) {
    if (ch == '0' || ch == '1') {
      bits.push_back(ch - '0');
    } else if (!std::isspace(static_cast<unsigned char>(ch)) && ch != ',') {
      throw ContractError(std::string("invalid routing character '") + ch + "'");
    }
  }
  return RoutingVector(bits);
}

std::array<bool, 4> RoutingVector::group(std::size_t i) const {
  return {active(i, 0), active(i, 1), active(i, 2), active(i, 3)};
}

std::size_t RoutingVector::active_count() const {
  std::size_t n = 0;
  for (auto b : bits_) n += b;
  return n;
}

std::string RoutingVector::to_string() const {
  std::string s;
  for (std::size_t i = 0; i < bits_.size(); ++i) {
    if (i > 0 && i % 4 == 0) s += ' ';
    s += bits_[i] ? '1' : '0';
  }
  return s;
}

template <typename T>
Tensor<T> sliceable_projection(const std::array<Tensor<T>, 4>& blocks, const Tensor<T>& weight,
                               const std::array<bool, 4>& r) {
  if (weight.rank() != 2 || weight.dim(0) != weight.dim(1) || weight.dim(0) % 4 != 0) {
    throw DimensionError("projection weight must be [C,C] with C divisible by 4, got " +
                         shape_to_string(weight.shape()));
  }
  const std::size_t c = weight.dim(0), c4 = c / 4;
  std::vector<Tensor<T>> active_blocks;
  std::vector<Tensor<T>> active_rows;
  Shape lead;
  for (std::size_t j = 0; j < 4; ++j) {
    if (blocks[j].defined() != r[j]) {
      throw ContractError("projection block " + std::to_string(j) + (r[j] ? " is missing" : " is present") +
                          " but routing bit is " + (r[j] ? "1" : "0"));
    }
    if (!r[j]) continue;
    const Tensor<T>& b = blocks[j];
    if (b.rank() == 0 || b.dim(b.rank() - 1) != c4) {
      throw DimensionError("projection block " + shape_to_string(b.shape()) + " does not end in " + std::to_string(c4));
    }
    Shape l(b.shape().begin(), b.shape().end() - 1);
    if (active_blocks.empty()) {
      lead = l;
    } else if (l != lead) {
      throw DimensionError("projection blocks disagree on leading extents");
    }
    active_blocks.push_back(reshape(b, {b.numel() / c4, c4}));
    active_rows.push_back(slice(weight, 0, j * c4, c4));
  }
  if (active_blocks.empty()) return Tensor<T>();
  const std::size_t k = active_blocks.size();
  Tensor<T> o_cat = k == 1 ? active_blocks[0] : concat(active_blocks, 1);
  Tensor<T> w = k == 4 ? weight : (k == 1 ? active_rows[0] : concat(active_rows, 0));
  Tensor<T> out = matmul(o_cat, w);
  Shape out_shape = lead;
  out_shape.push_back(c);
  return reshape(out, out_shape);
}

template <typename T>
Mstb<T> Mstb<T>::create(const BackboneConfig& config, Rng& rng) {
  const std::size_t c = config.channels, c4 = config.branch_channels();
  Mstb b;
  b.norm1 = LayerNorm<T>::create(c);
  for (std::size_t m : config.local_windows) {
    b.branches.push_back(AttentionBranch<T>::make_local(c4, m, config.heads, config.relative_bias, rng));
  }
  if (config.gsa_enabled) {
    b.branches.push_back(AttentionBranch<T>::make_global(c4, config.global_window, config.pool_size, config.heads,
                                                         config.reduction, rng));
  }
  b.projection = init::trunc_normal<T>({c, c}, 0.02, rng);
  b.norm2 = LayerNorm<T>::create(c);
  b.fc1 = Linear<T>::create(c, config.mlp_ratio * c, true, LinearInit::trunc_normal, rng);
  b.fc2 = Linear<T>::create(config.mlp_ratio * c, c, true, LinearInit::trunc_normal, rng);
  return b;
}

template <typename T>
Tensor<T> Mstb<T>::forward(const Tensor<T>& f, const std::array<bool, 4>& r, const Tensor<T>& gates,
                           ExecMode mode) const {
  const std::size_t c = projection.dim(0), c4 = c / 4;
  if (f.rank() != 4 || f.dim(3) != c) {
    throw DimensionError("MSTB expects [B,H,W," + std::to_string(c) + "], got " + shape_to_string(f.shape()));
  }
  if (gates.defined() && gates.numel() != 4) throw DimensionError("MSTB gates must have 4 entries");
  std::array<bool, 4> on{};
  std::size_t k = 0;
  for (std::size_t j = 0; j < 4; ++j) {
    on[j] = r[j] && has_branch(j);
    k += on[j];
  }

  Tensor<T> x;
  if (mode == ExecMode::sliced && k == 0) {
    x = f;
  } else {
    auto parts = split(norm1(f), {c4, c4, c4, c4}, 3);
    std::array<Tensor<T>, 4> blocks;
    for (std::size_t j = 0; j < 4; ++j) {
      const bool run = on[j] || (mode == ExecMode::dense_reference && has_branch(j));
      if (!run) continue;
      Tensor<T> o = branches[j].forward(parts[j]);
      if (on[j] && gates.defined()) o = mul(o, slice(gates, 0, j, 1));
      blocks[j] = o;
    }
    Tensor<T> o;
    if (mode == ExecMode::sliced) {
      o = sliceable_projection(blocks, projection, on);
    } else {
      std::vector<Tensor<T>> cat;
      for (std::size_t j = 0; j < 4; ++j) {
        if (!blocks[j].defined()) {
          cat.push_back(Tensor<T>::zeros(parts[j].shape()));
        } else {
          cat.push_back(on[j] ? blocks[j] : scale(blocks[j], T(0)));
        }
      }
      Tensor<T> o_cat = concat(cat, 3);
      o = reshape(matmul(reshape(o_cat, {o_cat.numel() / c, c}), projection), f.shape());
    }
    x = add(o, f);
  }
  return add(x, fc2(gelu(fc1(norm2(x)))));
}

template <typename T>
void Mstb<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  norm1.collect(out, prefix + ".norm1");
  for (std::size_t j = 0; j < branches.size(); ++j) {
    branches[j].collect(out, prefix + ".branch" + std::to_string(j + 1));
  }
  out.push_back({prefix + ".projection", projection});
  norm2.collect(out, prefix + ".norm2");
  fc1.collect(out, prefix + ".fc1");
  fc2.collect(out, prefix + ".fc2");
}

template <typename T>
Mstg<T> Mstg<T>::create(const BackboneConfig& config, Rng& rng) {
  Mstg g;
  g.blocks[0] = Mstb<T>::create(config, rng);
  g.blocks[1] = Mstb<T>::create(config, rng);
  g.conv = Conv2d<T>::create(config.channels, config.channels, 3, rng);
  return g;
}

template <typename T>
Tensor<T> Mstg<T>::forward(const Tensor<T>& f, const std::array<bool, 4>& r, const Tensor<T>& gates,
                           ExecMode mode) const {
  Tensor<T> y = blocks[0].forward(f, r, gates, mode);
  y = blocks[1].forward(y, r, gates, mode);
  y = permute(conv(permute(y, {0, 3, 1, 2})), {0, 2, 3, 1});
  return add(y, f);
}

template <typename T>
void Mstg<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  blocks[0].collect(out, prefix + ".block1");
  blocks[1].collect(out, prefix + ".block2");
  conv.collect(out, prefix + ".conv");
}

template <typename T>
Backbone<T> Backbone<T>::create(const BackboneConfig& config, Rng& rng) {
  config.validate();
  Backbone b;
  b.config = config;
  b.shallow = Conv2d<T>::create(3, config.channels, 3, rng);
  for (std::size_t i = 0; i < config.groups; ++i) b.groups.push_back(Mstg<T>::create(config, rng));
  b.body = Conv2d<T>::create(config.channels, config.channels, 3, rng);
  b.head = Conv2d<T>::create(config.channels, config.out_channels, 3, rng);
  return b;
}

template <typename T>
Tensor<T> Backbone<T>::forward(const Tensor<T>& image, const RoutingVector& r, const Tensor<T>& gates,
                               ExecMode mode) const {
  if (r.size() != config.routing_length()) {
    throw ContractError("routing vector has length " + std::to_string(r.size()) + ", expected " +
                        std::to_string(config.routing_length()));
  }
  if (gates.defined() && gates.numel() != r.size()) {
    throw DimensionError("routing gates have " + std::to_string(gates.numel()) + " entries, expected " +
                         std::to_string(r.size()));
  }
  if (image.rank() != 4 || image.dim(1) != 3) {
    throw DimensionError("backbone expects [B,3,H,W], got " + shape_to_string(image.shape()));
  }
  // [0,1] images are centered to [-1,1] before the shallow conv.
  Tensor<T> x = add(scale(image, T(2)), Tensor<T>::scalar(T(-1)));
  Tensor<T> s = shallow(x);
  Tensor<T> t = permute(s, {0, 2, 3, 1});
  for (std::size_t i = 0; i < groups.size(); ++i) {
    Tensor<T> g = gates.defined() ? slice(gates, 0, 4 * i, 4) : Tensor<T>();
    t = groups[i].forward(t, r.group(i), g, mode);
  }
  Tensor<T> b = add(body(permute(t, {0, 3, 1, 2})), s);
  return head(b);
}

template <typename T>
Tensor<T> Backbone<T>::forward_baseline(const Tensor<T>& image) const {
  return forward(image, RoutingVector::all_on(config.groups));
}

template <typename T>
void Backbone<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  shallow.collect(out, prefix + ".shallow");
  for (std::size_t i = 0; i < groups.size(); ++i) groups[i].collect(out, prefix + ".group" + std::to_string(i + 1));
  body.collect(out, prefix + ".body");
  head.collect(out, prefix + ".head");
}

std::size_t param_count(const BackboneConfig& config) {
  config.validate();
  const std::size_t c = config.channels, c4 = config.branch_channels(), h = config.heads;
  const std::size_t hidden = config.mlp_ratio * c;
  auto conv = [](std::size_t in, std::size_t out) { return out * in * 9 + out; };

  const std::size_t branches = config.gsa_enabled ? 4 : 3;
  std::size_t block = 2 * c;                 // norm1
  block += branches * c4 * 3 * c4;           // qkv, no bias
  if (config.relative_bias) {
    for (std::size_t m : config.local_windows) block += (2 * m - 1) * (2 * m - 1) * h;
  }
  block += c * c;                            // projection
  block += 2 * c;                            // norm2
  block += c * hidden + hidden + hidden * c + c;

  const std::size_t group = 2 * block + conv(c, c);
  return conv(3, c) + config.groups * group + conv(c, c) + conv(c, config.out_channels);
}

#define TADT_INSTANTIATE_BACKBONE(T)                                                                            \
  template Tensor<T> sliceable_projection(const std::array<Tensor<T>, 4>&, const Tensor<T>&,                   \
                                          const std::array<bool, 4>&);                                         \
  template struct Mstb<T>;                                                                                     \
  template struct Mstg<T>;                                                                                     \
  template struct Backbone<T>;

TADT_INSTANTIATE_BACKBONE(float)
TADT_INSTANTIATE_BACKBONE(double)

#undef TADT_INSTANTIATE_BACKBONE

}  // namespace tadt
