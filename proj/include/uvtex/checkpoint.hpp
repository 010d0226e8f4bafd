#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "uvtex/tensor.hpp"

namespace uvtex {

uint64_t fnv1a64(std::string_view s);

struct CheckpointMeta {
  int64_t step = 0;
  uint64_t config_fingerprint = 0;
  std::string config_json;
};

// Binary weight file: magic "TXRF", version u32, then records of
// (name length u32, name bytes, dtype u8 = f32, rank u8, dims u32 x rank,
// little-endian f32 payload). Parameters, buffers, optimizer moments
// ("opt/m/<name>", "opt/v/<name>") and metadata (byte-valued "meta/*"
// records) all use the same record shape.
//
// Saving rounds every live tensor to f32 in place, so the in-memory model,
// the file, and any later load agree bitwise; save -> load -> save is
// byte-identical.
void save_checkpoint(const std::string& path, const std::vector<const ParamStore*>& stores,
                     Adam* optimizer, const CheckpointMeta& meta);

struct LoadedCheckpoint {
  CheckpointMeta meta;
  std::vector<std::pair<std::string, Tensor>> records;  // file order
  const Tensor* find(const std::string& name) const;
};

LoadedCheckpoint load_checkpoint(const std::string& path);

// Copies records into the store's params and buffers by name. Every entry
// of the store must be present in the checkpoint with a matching shape.
void restore_store(const LoadedCheckpoint& ck, ParamStore& store);

// Restores moment buffers and the step counter.
void restore_optimizer(const LoadedCheckpoint& ck, Adam& opt);

}  // namespace uvtex
