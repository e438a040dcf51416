#include "irnet/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

namespace irnet {

namespace {

constexpr char kMagic[4] = {'I', 'R', 'W', 'T'};

void put_u16(std::vector<uint8_t>& out, uint16_t v) {
  out.push_back(static_cast<uint8_t>(v & 0xff));
  out.push_back(static_cast<uint8_t>(v >> 8));
}

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>((v >> (8 * i)) & 0xff));
}

void put_bytes(std::vector<uint8_t>& out, const void* p, size_t n) {
  const uint8_t* b = static_cast<const uint8_t*>(p);
  out.insert(out.end(), b, b + n);
}

struct Reader {
  const std::vector<uint8_t>& bytes;
  size_t pos = 0;

  void need(size_t n, const char* what) {
    if (pos + n > bytes.size()) {
      throw format_error(std::string("truncated checkpoint while reading ") + what);
    }
  }
  uint16_t u16(const char* what) {
    need(2, what);
    uint16_t v = static_cast<uint16_t>(bytes[pos] | (bytes[pos + 1] << 8));
    pos += 2;
    return v;
  }
  uint32_t u32(const char* what) {
    need(4, what);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(bytes[pos + static_cast<size_t>(i)]) << (8 * i);
    pos += 4;
    return v;
  }
  uint8_t u8(const char* what) {
    need(1, what);
    return bytes[pos++];
  }
  std::string str(size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(bytes.data() + pos), n);
    pos += n;
    return s;
  }
};

}  // namespace

Checkpoint checkpoint_from_model(const ModelGraph& model,
                                 std::vector<std::pair<std::string, std::string>> metadata) {
  Checkpoint ckpt;
  ckpt.metadata = std::move(metadata);
  for (const auto& p : model.params) {
    ckpt.entries.push_back({p.name, p.value.shape(), p.value.vec()});
  }
  // Running stats follow their layer's parameters; owner name is the gamma
  // param's name minus the "/bn_gamma" suffix.
  for (const Node& n : model.nodes) {
    if (n.kind != NodeKind::BatchNorm) continue;
    const std::string& gamma_name = model.params[static_cast<size_t>(n.gamma_param)].name;
    const std::string owner = gamma_name.substr(0, gamma_name.size() - std::string("/bn_gamma").size());
    const auto& state = model.bn_states[static_cast<size_t>(n.bn_state)];
    ckpt.entries.push_back({owner + "/moving_mean", state.moving_mean.shape(), state.moving_mean.vec()});
    ckpt.entries.push_back({owner + "/moving_var", state.moving_var.shape(), state.moving_var.vec()});
  }
  return ckpt;
}

std::vector<uint8_t> serialize_checkpoint(const Checkpoint& ckpt) {
  std::vector<uint8_t> out;
  put_bytes(out, kMagic, 4);
  put_u32(out, ckpt.format_version);
  put_u32(out, static_cast<uint32_t>(ckpt.metadata.size()));
  for (const auto& [key, value] : ckpt.metadata) {
    put_u16(out, static_cast<uint16_t>(key.size()));
    put_bytes(out, key.data(), key.size());
    put_u32(out, static_cast<uint32_t>(value.size()));
    put_bytes(out, value.data(), value.size());
  }
  put_u32(out, static_cast<uint32_t>(ckpt.entries.size()));
  for (const auto& e : ckpt.entries) {
    put_u16(out, static_cast<uint16_t>(e.name.size()));
    put_bytes(out, e.name.data(), e.name.size());
    out.push_back(0);  // dtype: f32
    out.push_back(static_cast<uint8_t>(e.shape.size()));
    for (int64_t d : e.shape) put_u32(out, static_cast<uint32_t>(d));
    static_assert(sizeof(float) == 4);
    put_bytes(out, e.data.data(), e.data.size() * 4);
  }
  return out;
}

Checkpoint parse_checkpoint(const std::vector<uint8_t>& bytes) {
  Reader r{bytes};
  const std::string magic = r.str(4, "magic");
  if (std::memcmp(magic.data(), kMagic, 4) != 0) {
    throw format_error("not a checkpoint: bad magic (expected IRWT)");
  }
  Checkpoint ckpt;
  ckpt.format_version = r.u32("version");
  if (ckpt.format_version != 1) {
    throw format_error("unsupported checkpoint version " + std::to_string(ckpt.format_version));
  }
  const uint32_t meta_n = r.u32("metadata count");
  for (uint32_t i = 0; i < meta_n; ++i) {
    const uint16_t klen = r.u16("metadata key length");
    std::string key = r.str(klen, "metadata key");
    const uint32_t vlen = r.u32("metadata value length");
    std::string value = r.str(vlen, "metadata value");
    ckpt.metadata.emplace_back(std::move(key), std::move(value));
  }
  const uint32_t entry_n = r.u32("entry count");
  for (uint32_t i = 0; i < entry_n; ++i) {
    CheckpointEntry e;
    const uint16_t nlen = r.u16("entry name length");
    e.name = r.str(nlen, "entry name");
    const uint8_t dtype = r.u8("dtype");
    if (dtype != 0) {
      throw format_error("entry '" + e.name + "' has unsupported dtype " + std::to_string(dtype));
    }
    const uint8_t ndim = r.u8("ndim");
    int64_t numel = 1;
    for (uint8_t d = 0; d < ndim; ++d) {
      const uint32_t dim = r.u32("dim");
      e.shape.push_back(static_cast<int64_t>(dim));
      numel *= dim;
    }
    r.need(static_cast<size_t>(numel) * 4, "entry data");
    e.data.resize(static_cast<size_t>(numel));
    std::memcpy(e.data.data(), bytes.data() + r.pos, static_cast<size_t>(numel) * 4);
    r.pos += static_cast<size_t>(numel) * 4;
    for (const auto& prev : ckpt.entries) {
      if (prev.name == e.name) throw format_error("duplicate entry name '" + e.name + "'");
    }
    ckpt.entries.push_back(std::move(e));
  }
  if (r.pos != bytes.size()) {
    throw format_error("trailing bytes after checkpoint payload");
  }
  return ckpt;
}

void write_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  const std::vector<uint8_t> bytes = serialize_checkpoint(ckpt);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw io_error("cannot open checkpoint for writing: " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw io_error("write failed: " + path);
}

Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw io_error("cannot open checkpoint: " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return parse_checkpoint(bytes);
}

std::string checkpoint_digest(const Checkpoint& ckpt) {
  const std::vector<uint8_t> bytes = serialize_checkpoint(ckpt);
  uint64_t h = 0xcbf29ce484222325ULL;
  for (uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex;
  for (int i = 15; i >= 0; --i) os << ((h >> (4 * i)) & 0xf);
  return os.str();
}

namespace {

// Model-side view of every loadable tensor: parameters and running stats.
struct TargetTensor {
  std::string name;
  Shape shape;
  float* data;
  int64_t numel;
};

std::vector<TargetTensor> loadable_tensors(ModelGraph& model) {
  std::vector<TargetTensor> out;
  for (auto& p : model.params) {
    out.push_back({p.name, p.value.shape(), p.value.data(), p.value.size()});
  }
  for (const Node& n : model.nodes) {
    if (n.kind != NodeKind::BatchNorm) continue;
    const std::string& gamma_name = model.params[static_cast<size_t>(n.gamma_param)].name;
    const std::string owner = gamma_name.substr(0, gamma_name.size() - std::string("/bn_gamma").size());
    auto& state = model.bn_states[static_cast<size_t>(n.bn_state)];
    out.push_back({owner + "/moving_mean", state.moving_mean.shape(), state.moving_mean.data(),
                   state.moving_mean.size()});
    out.push_back({owner + "/moving_var", state.moving_var.shape(), state.moving_var.data(),
                   state.moving_var.size()});
  }
  return out;
}

}  // namespace

LoadReport load_partial(ModelGraph& model, const Checkpoint& ckpt, LoadPolicy policy) {
  std::vector<TargetTensor> targets = loadable_tensors(model);
  const auto find_target = [&](const std::string& name) -> TargetTensor* {
    for (auto& t : targets) {
      if (t.name == name) return &t;
    }
    return nullptr;
  };

  LoadReport report;
  std::vector<std::pair<const CheckpointEntry*, TargetTensor*>> planned;
  std::vector<std::string> problems;

  for (const auto& e : ckpt.entries) {
    TargetTensor* t = find_target(e.name);
    if (!t) {
      if (policy == LoadPolicy::Strict) {
        problems.push_back("checkpoint entry '" + e.name + "' has no model tensor");
      } else {
        report.skipped.emplace_back(e.name, "no matching model tensor");
      }
      continue;
    }
    if (t->shape != e.shape) {
      const std::string reason =
          "shape mismatch: checkpoint " + shape_str(e.shape) + " vs model " + shape_str(t->shape);
      if (policy == LoadPolicy::SkipMismatched) {
        report.skipped.emplace_back(e.name, reason);
      } else {
        problems.push_back("'" + e.name + "' " + reason);
      }
      continue;
    }
    planned.emplace_back(&e, t);
  }
  if (policy == LoadPolicy::Strict) {
    for (const auto& t : targets) {
      if (!ckpt.find(t.name)) problems.push_back("model tensor '" + t.name + "' missing from checkpoint");
    }
  }
  if (!problems.empty()) {
    std::string msg = "strict load failed with " + std::to_string(problems.size()) + " mismatches:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw invalid_error(msg);
  }
  // All checks passed; now copy.
  for (auto& [entry, target] : planned) {
    std::memcpy(target->data, entry->data.data(), static_cast<size_t>(target->numel) * sizeof(float));
    report.loaded.push_back(entry->name);
  }
  return report;
}

void reset_head(ModelGraph& model, int64_t num_classes, uint64_t seed) {
  if (num_classes < 2) throw invalid_error("reset_head needs num_classes >= 2");
  Node* dense_node = nullptr;
  for (auto& n : model.nodes) {
    if (n.kind == NodeKind::Dense) dense_node = &n;
  }
  if (!dense_node) throw invalid_error("model has no dense head");
  auto& kernel = model.params[static_cast<size_t>(dense_node->kernel_param)];
  auto& bias = model.params[static_cast<size_t>(dense_node->bias_param)];
  const int64_t in_dim = kernel.value.dim(0);

  kernel.value = Tensor({in_dim, num_classes});
  Rng rng = named_rng(seed, kernel.name);
  for (int64_t i = 0; i < kernel.value.size(); ++i) {
    kernel.value[i] = static_cast<float>(rng.truncated_normal(0.05, 2.0));
  }
  kernel.grad = Tensor({in_dim, num_classes});
  bias.value = Tensor({num_classes});
  bias.grad = Tensor({num_classes});
  dense_node->out_shape = {num_classes};
  model.cfg.num_classes = num_classes;
}

}  // namespace irnet
