#include "uvtex/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace uvtex {

static_assert(sizeof(float) == 4 && std::endian::native == std::endian::little,
              "checkpoint payloads are little-endian f32");

namespace {

constexpr uint32_t kVersion = 1;
constexpr uint8_t kDtypeF32 = 0;

void put_u32(std::ostream& os, uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }

uint32_t get_u32(std::istream& is) {
  uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 4);
  return v;
}

void write_record(std::ostream& os, const std::string& name, const Shape& shape,
                  const double* data, int64_t n) {
  put_u32(os, static_cast<uint32_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  const uint8_t dtype = kDtypeF32, rank = static_cast<uint8_t>(shape.rank);
  os.write(reinterpret_cast<const char*>(&dtype), 1);
  os.write(reinterpret_cast<const char*>(&rank), 1);
  for (int i = 0; i < shape.rank; ++i) put_u32(os, static_cast<uint32_t>(shape.d[i]));
  std::vector<float> payload(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) payload[static_cast<size_t>(i)] = static_cast<float>(data[i]);
  os.write(reinterpret_cast<const char*>(payload.data()),
           static_cast<std::streamsize>(payload.size() * 4));
}

// Rounds the live tensor to f32 and writes it.
void write_tensor(std::ostream& os, const std::string& name, Tensor t) {
  for (int64_t i = 0; i < t.numel(); ++i)
    t.ptr()[i] = static_cast<double>(static_cast<float>(t.ptr()[i]));
  write_record(os, name, t.shape(), t.ptr(), t.numel());
}

// Small scalars and strings ride along as byte-valued f32 records.
void write_bytes(std::ostream& os, const std::string& name, const uint8_t* bytes, int64_t n) {
  std::vector<double> vals(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) vals[static_cast<size_t>(i)] = bytes[i];
  write_record(os, name, Shape{static_cast<int>(n)}, vals.data(), n);
}

std::vector<uint8_t> read_bytes(const Tensor& t) {
  std::vector<uint8_t> out(static_cast<size_t>(t.numel()));
  for (int64_t i = 0; i < t.numel(); ++i) out[static_cast<size_t>(i)] = static_cast<uint8_t>(t.ptr()[i]);
  return out;
}

}  // namespace

uint64_t fnv1a64(std::string_view s) {
  uint64_t h = 14695981039346656037ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

void save_checkpoint(const std::string& path, const std::vector<const ParamStore*>& stores,
                     Adam* optimizer, const CheckpointMeta& meta) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  require(os.good(), "save_checkpoint: cannot open '" + path + "'");
  os.write("TXRF", 4);
  put_u32(os, kVersion);
  for (const ParamStore* store : stores) {
    for (const auto& [name, t] : store->params()) write_tensor(os, name, t);
    for (const auto& [name, t] : store->buffers()) write_tensor(os, name, t);
  }
  if (optimizer) {
    for (auto& [name, mv] : optimizer->moments()) {
      write_tensor(os, "opt/m/" + name, mv.first);
      write_tensor(os, "opt/v/" + name, mv.second);
    }
  }
  uint8_t step_bytes[8], fp_bytes[8];
  std::memcpy(step_bytes, &meta.step, 8);
  std::memcpy(fp_bytes, &meta.config_fingerprint, 8);
  write_bytes(os, "meta/step", step_bytes, 8);
  write_bytes(os, "meta/fingerprint", fp_bytes, 8);
  const std::string cfg = meta.config_json.empty() ? "{}" : meta.config_json;
  write_bytes(os, "meta/config", reinterpret_cast<const uint8_t*>(cfg.data()),
              static_cast<int64_t>(cfg.size()));
  require(os.good(), "save_checkpoint: write failed for '" + path + "'");
}

const Tensor* LoadedCheckpoint::find(const std::string& name) const {
  for (const auto& [n, t] : records)
    if (n == name) return &t;
  return nullptr;
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  require(is.good(), "load_checkpoint: cannot open '" + path + "'");
  char magic[4];
  is.read(magic, 4);
  require(is.good() && std::memcmp(magic, "TXRF", 4) == 0,
          "load_checkpoint: bad magic in '" + path + "'");
  require(get_u32(is) == kVersion, "load_checkpoint: unsupported version");

  LoadedCheckpoint ck;
  while (true) {
    uint32_t name_len = 0;
    is.read(reinterpret_cast<char*>(&name_len), 4);
    if (is.eof()) break;
    require(is.good() && name_len < (1u << 20), "load_checkpoint: corrupt record name");
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    uint8_t dtype = 0, rank = 0;
    is.read(reinterpret_cast<char*>(&dtype), 1);
    is.read(reinterpret_cast<char*>(&rank), 1);
    require(is.good() && dtype == kDtypeF32 && rank >= 1 && rank <= 4,
            "load_checkpoint: corrupt record header");
    Shape shape;
    shape.rank = rank;
    for (int i = 0; i < rank; ++i) shape.d[i] = static_cast<int>(get_u32(is));
    Tensor t = Tensor::zeros(shape);
    std::vector<float> payload(static_cast<size_t>(t.numel()));
    is.read(reinterpret_cast<char*>(payload.data()),
            static_cast<std::streamsize>(payload.size() * 4));
    require(is.good(), "load_checkpoint: truncated payload in '" + name + "'");
    for (int64_t i = 0; i < t.numel(); ++i) t.ptr()[i] = payload[static_cast<size_t>(i)];
    ck.records.emplace_back(std::move(name), std::move(t));
  }

  const Tensor* step = ck.find("meta/step");
  const Tensor* fp = ck.find("meta/fingerprint");
  const Tensor* cfg = ck.find("meta/config");
  require(step && step->numel() == 8 && fp && fp->numel() == 8 && cfg,
          "load_checkpoint: missing metadata");
  const auto sb = read_bytes(*step), fb = read_bytes(*fp), cb = read_bytes(*cfg);
  std::memcpy(&ck.meta.step, sb.data(), 8);
  std::memcpy(&ck.meta.config_fingerprint, fb.data(), 8);
  ck.meta.config_json.assign(cb.begin(), cb.end());
  return ck;
}

void restore_store(const LoadedCheckpoint& ck, ParamStore& store) {
  auto restore = [&](const std::vector<std::pair<std::string, Tensor>>& entries) {
    for (const auto& [name, t] : entries) {
      const Tensor* rec = ck.find(name);
      require(rec != nullptr, "restore_store: checkpoint lacks '" + name + "'");
      require(rec->shape() == t.shape(), "restore_store: shape mismatch for '" + name + "'");
      Tensor dst = t;
      dst.data() = rec->data();
    }
  };
  restore(store.params());
  restore(store.buffers());
}

void restore_optimizer(const LoadedCheckpoint& ck, Adam& opt) {
  for (auto& [name, mv] : opt.moments()) {
    const Tensor* m = ck.find("opt/m/" + name);
    const Tensor* v = ck.find("opt/v/" + name);
    require(m && v, "restore_optimizer: checkpoint lacks moments for '" + name + "'");
    require(m->shape() == mv.first.shape() && v->shape() == mv.second.shape(),
            "restore_optimizer: moment shape mismatch for '" + name + "'");
    mv.first.data() = m->data();
    mv.second.data() = v->data();
  }
  const Tensor* step = ck.find("meta/step");
  require(step && step->numel() == 8, "restore_optimizer: missing step");
  int64_t s = 0;
  uint8_t b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<uint8_t>(step->ptr()[i]);
  std::memcpy(&s, b, 8);
  opt.set_step_count(s);
}

}  // namespace uvtex
