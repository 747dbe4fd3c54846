#include "tadt/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>

namespace tadt {

static_assert(std::endian::native == std::endian::little, "serialization assumes a little-endian host");

namespace {

template <typename U>
void put(std::ostream& out, U v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(U));
}

template <typename U>
U get(std::istream& in, const char* what) {
  U v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(U));
  if (!in) throw IoError(std::string("truncated data while reading ") + what);
  return v;
}

void put_string(std::ostream& out, const std::string& s) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream& in, const char* what) {
  const auto n = get<std::uint32_t>(in, what);
  std::string s(n, '\0');
  in.read(s.data(), n);
  if (!in) throw IoError(std::string("truncated data while reading ") + what);
  return s;
}

}  // namespace

template <typename T>
void write_tensor(std::ostream& out, const Tensor<T>& t) {
  out.write("TNSR", 4);
  put<std::uint8_t>(out, static_cast<std::uint8_t>(DTypeOf<T>::value));
  put<std::uint8_t>(out, static_cast<std::uint8_t>(t.rank()));
  for (std::size_t d : t.shape()) put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
  const auto data = t.data();
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(T)));
}

template <typename T>
Tensor<T> read_tensor(std::istream& in) {
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "TNSR", 4) != 0) throw IoError("bad tensor record magic");
  const auto dtype = get<std::uint8_t>(in, "tensor dtype");
  if (dtype > 1) throw IoError("unknown tensor dtype code " + std::to_string(dtype));
  if (dtype != static_cast<std::uint8_t>(DTypeOf<T>::value)) {
    throw IoError(std::string("tensor dtype is ") + (dtype == 0 ? "f32" : "f64") + ", expected " +
                  (DTypeOf<T>::value == DType::f32 ? "f32" : "f64"));
  }
  const auto rank = get<std::uint8_t>(in, "tensor rank");
  if (rank > kMaxRank) throw IoError("tensor rank " + std::to_string(rank) + " exceeds " + std::to_string(kMaxRank));
  Shape shape(rank);
  for (auto& d : shape) d = get<std::uint32_t>(in, "tensor extent");
  std::vector<T> data(shape_numel(shape));
  in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(T)));
  if (!in) throw IoError("truncated tensor payload");
  return Tensor<T>(std::move(shape), std::move(data));
}

template void write_tensor(std::ostream&, const Tensor<float>&);
template void write_tensor(std::ostream&, const Tensor<double>&);
template Tensor<float> read_tensor(std::istream&);
template Tensor<double> read_tensor(std::istream&);

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  // Write to a sibling file first so an interrupted save never clobbers a
  // good checkpoint.
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint " + path);
    out.write("TADT", 4);
    put<std::uint16_t>(out, kCheckpointVersion);
    put<std::uint8_t>(out, ckpt.stage == Stage::baseline ? 0 : 1);
    put<std::uint64_t>(out, ckpt.step);
    put_string(out, ckpt.config_text);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
    for (const auto& p : ckpt.tensors) {
      put_string(out, p.name);
      write_tensor(out, p.tensor);
    }
    put<std::uint8_t>(out, ckpt.optimizer ? 1 : 0);
    if (ckpt.optimizer) {
      const OptimizerSnapshot& o = *ckpt.optimizer;
      put<std::uint64_t>(out, o.step);
      put<std::uint32_t>(out, static_cast<std::uint32_t>(o.names.size()));
      for (std::size_t i = 0; i < o.names.size(); ++i) {
        put_string(out, o.names[i]);
        write_tensor(out, o.first_moment[i]);
        write_tensor(out, o.second_moment[i]);
      }
    }
    put_string(out, ckpt.rng_state);
    if (!out) throw IoError("error while writing checkpoint " + path);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw IoError("cannot move checkpoint into place at " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path);
  try {
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "TADT", 4) != 0) throw IoError("not a checkpoint (bad magic)");
    const auto version = get<std::uint16_t>(in, "version");
    if (version != kCheckpointVersion) {
      throw IoError("unsupported checkpoint format version " + std::to_string(version) + " (this build reads " +
                    std::to_string(kCheckpointVersion) + ")");
    }
    Checkpoint c;
    const auto stage = get<std::uint8_t>(in, "stage");
    if (stage > 1) throw IoError("unknown stage code " + std::to_string(stage));
    c.stage = stage == 0 ? Stage::baseline : Stage::tadt;
    c.step = get<std::uint64_t>(in, "step");
    c.config_text = get_string(in, "config");
    const auto count = get<std::uint32_t>(in, "tensor count");
    for (std::uint32_t i = 0; i < count; ++i) {
      std::string name = get_string(in, "tensor name");
      c.tensors.push_back({std::move(name), read_tensor<float>(in)});
    }
    if (get<std::uint8_t>(in, "optimizer flag")) {
      OptimizerSnapshot o;
      o.step = get<std::uint64_t>(in, "optimizer step");
      const auto n = get<std::uint32_t>(in, "optimizer count");
      for (std::uint32_t i = 0; i < n; ++i) {
        o.names.push_back(get_string(in, "optimizer name"));
        o.first_moment.push_back(read_tensor<float>(in));
        o.second_moment.push_back(read_tensor<float>(in));
      }
      c.optimizer = std::move(o);
    }
    c.rng_state = get_string(in, "rng state");
    return c;
  } catch (const IoError& e) {
    throw IoError(path + ": " + e.what());
  }
}

void load_parameters(const ParamList<float>& params, const ParamList<float>& stored, bool require_all) {
  std::map<std::string, const Tensor<float>*> by_name;
  for (const auto& s : stored) by_name[s.name] = &s.tensor;
  for (const auto& p : params) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) {
      if (require_all) throw IoError("checkpoint has no tensor named " + p.name);
      continue;
    }
    const Tensor<float>& src = *it->second;
    if (src.shape() != p.tensor.shape()) {
      throw DimensionError("tensor " + p.name + " has shape " + shape_to_string(src.shape()) + " in the checkpoint, " +
                           shape_to_string(p.tensor.shape()) + " in the model");
    }
    std::copy(src.data().begin(), src.data().end(), p.tensor.mutable_data().begin());
  }
}

ParamList<float> snapshot_parameters(const ParamList<float>& params) {
  ParamList<float> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back({p.name, p.tensor.detach()});
  return out;
}

Network<float> network_from_checkpoint(const Checkpoint& ckpt) {
  Rng rng(0);
  Network<float> net = Network<float>::create(ckpt.config(), ckpt.stage, rng);
  load_parameters(net.parameters(), ckpt.tensors, true);
  return net;
}

}  // namespace tadt
