#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "irnet/model.hpp"
#include "irnet/tensor.hpp"

namespace irnet {

// Named-weight archive. Binary layout (little-endian, no padding):
//   magic "IRWT", version u32
//   metadata count u32, then per item: key len u16, key, value len u32, value
//   entry count u32, then per entry: name len u16, name, dtype u8 (0 = f32),
//   ndim u8, dims u32 x ndim, raw f32 data
struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

struct Checkpoint {
  uint32_t format_version = 1;
  std::vector<std::pair<std::string, std::string>> metadata;
  std::vector<CheckpointEntry> entries;

  const CheckpointEntry* find(const std::string& name) const {
    for (const auto& e : entries) {
      if (e.name == name) return &e;
    }
    return nullptr;
  }
};

// Model weights plus batchnorm running stats ("<layer>/moving_mean|moving_var"),
// in deterministic parameter order.
Checkpoint checkpoint_from_model(const ModelGraph& model,
                                 std::vector<std::pair<std::string, std::string>> metadata = {});

std::vector<uint8_t> serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint parse_checkpoint(const std::vector<uint8_t>& bytes);

void write_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint read_checkpoint(const std::string& path);

inline void save_checkpoint(const ModelGraph& model, const std::string& path,
                            std::vector<std::pair<std::string, std::string>> metadata = {}) {
  write_checkpoint(checkpoint_from_model(model, std::move(metadata)), path);
}

// FNV-1a 64 over the serialized bytes, rendered as 16 hex chars.
std::string checkpoint_digest(const Checkpoint& ckpt);

enum class LoadPolicy { Strict, SkipMissing, SkipMismatched };

struct LoadReport {
  std::vector<std::string> loaded;
  std::vector<std::pair<std::string, std::string>> skipped;  // name, reason

  int64_t loaded_count() const { return static_cast<int64_t>(loaded.size()); }
  int64_t skipped_count() const { return static_cast<int64_t>(skipped.size()); }
};

// Copies checkpoint entries that match a model tensor by name AND shape.
// Strict errors on any miss or mismatch (listing all of them) before touching
// the model; the skip policies record misses in the report instead.
LoadReport load_partial(ModelGraph& model, const Checkpoint& ckpt, LoadPolicy policy);

// Rebuilds the classifier layer for `num_classes` with fresh seeded weights;
// every other tensor is left untouched.
void reset_head(ModelGraph& model, int64_t num_classes, uint64_t seed);

}  // namespace irnet
