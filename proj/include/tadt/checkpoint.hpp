#pragma once

// Binary tensor records and the checkpoint container.
//
// Tensor record (little-endian): "TNSR", u8 dtype (0 f32, 1 f64), u8 rank,
// u32 extents, raw payload.
//
// Checkpoint: "TADT", u16 version, u8 stage, u64 step, u32-length config
// text, u32 tensor count then (u32-length name, tensor record) pairs, u8
// optimizer flag [u64 adam step, u32 count, (name, m record, v record)...],
// u32-length rng state.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "tadt/model.hpp"
#include "tadt/nn.hpp"

namespace tadt {

inline constexpr std::uint16_t kCheckpointVersion = 1;

template <typename T>
void write_tensor(std::ostream& out, const Tensor<T>& t);

// Throws IoError on a bad magic, truncated payload or dtype other than T.
template <typename T>
Tensor<T> read_tensor(std::istream& in);

struct OptimizerSnapshot {
  std::uint64_t step = 0;
  std::vector<std::string> names;
  std::vector<Tensor<float>> first_moment;
  std::vector<Tensor<float>> second_moment;
};

struct Checkpoint {
  Stage stage = Stage::baseline;
  std::uint64_t step = 0;
  std::string config_text;
  ParamList<float> tensors;
  std::optional<OptimizerSnapshot> optimizer;
  std::string rng_state;

  RunConfig config() const { return RunConfig::from_text(config_text); }
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

// Copies values of same-named tensors into params. With require_all, every
// param must be present in the checkpoint. Shape mismatches throw.
void load_parameters(const ParamList<float>& params, const ParamList<float>& stored, bool require_all);

// Snapshot of a network's parameters (deep copies).
ParamList<float> snapshot_parameters(const ParamList<float>& params);

// Rebuilds the network stored in a checkpoint.
Network<float> network_from_checkpoint(const Checkpoint& ckpt);

}  // namespace tadt
