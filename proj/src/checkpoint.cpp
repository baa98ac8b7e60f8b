#include "bimii/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace bimii {

namespace {

constexpr char kMagic[5] = {'B', 'I', 'M', 'K', '1'};

template <typename T>
void put(std::ostream& os, T v) {
  // Little-endian on every supported target.
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  T v;
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw IoError("checkpoint truncated");
  return v;
}

void put_tensor(std::ostream& os, const std::string& name, const Tensor& t) {
  if (name.size() > 0xffff) throw ContractError("checkpoint: name too long");
  put<uint16_t>(os, (uint16_t)name.size());
  os.write(name.data(), (std::streamsize)name.size());
  put<uint8_t>(os, (uint8_t)t.rank());
  for (int d : t.shape) put<uint32_t>(os, (uint32_t)d);
  os.write(reinterpret_cast<const char*>(t.data.data()),
           (std::streamsize)(t.numel() * (int64_t)sizeof(float)));
}

Tensor scalar_tensor(float v) { return Tensor({1}, {v}); }

Tensor text_tensor(const std::string& text) {
  Tensor t({std::max<int>(1, (int)text.size())});
  for (size_t i = 0; i < text.size(); ++i) t.data[i] = (float)(unsigned char)text[i];
  return t;
}

std::string tensor_text(const Tensor& t) {
  std::string s;
  for (float v : t.data) {
    int c = (int)v;
    if (c > 0 && c < 256) s.push_back((char)c);
  }
  return s;
}

}  // namespace

void save_checkpoint(const std::string& path, const ParamStoreT<float>& params,
                     const CheckpointMeta& meta) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write checkpoint: " + path);
  os.write(kMagic, 5);

  std::vector<std::pair<std::string, const Tensor*>> entries;
  for (const auto& p : params.all()) entries.emplace_back(p->name, &p->value);
  Tensor m_stage = scalar_tensor((float)meta.stage);
  Tensor m_epoch = scalar_tensor((float)meta.epoch);
  Tensor m_seed_lo = scalar_tensor((float)(meta.seed & 0xffffu));
  Tensor m_seed_hi = scalar_tensor((float)(meta.seed >> 16));
  Tensor m_config = text_tensor(meta.config_text);
  entries.emplace_back("__meta__.stage", &m_stage);
  entries.emplace_back("__meta__.epoch", &m_epoch);
  entries.emplace_back("__meta__.seed_lo", &m_seed_lo);
  entries.emplace_back("__meta__.seed_hi", &m_seed_hi);
  entries.emplace_back("__meta__.config", &m_config);

  put<uint32_t>(os, (uint32_t)entries.size());
  for (const auto& [name, t] : entries) put_tensor(os, name, *t);
  if (!os) throw IoError("short write on checkpoint: " + path);
}

LoadedCheckpoint read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint: " + path);
  char magic[5];
  is.read(magic, 5);
  if (!is || std::memcmp(magic, kMagic, 5) != 0)
    throw IoError("not a checkpoint (bad magic): " + path);
  uint32_t count = get<uint32_t>(is);
  LoadedCheckpoint out;
  std::map<std::string, Tensor> meta;
  for (uint32_t i = 0; i < count; ++i) {
    uint16_t nlen = get<uint16_t>(is);
    std::string name((size_t)nlen, '\0');
    is.read(name.data(), nlen);
    uint8_t rank = get<uint8_t>(is);
    Shape shape;
    int64_t numel = 1;
    for (int d = 0; d < rank; ++d) {
      uint32_t e = get<uint32_t>(is);
      shape.push_back((int)e);
      numel *= e;
    }
    Tensor t(shape);
    is.read(reinterpret_cast<char*>(t.data.data()), (std::streamsize)(numel * (int64_t)sizeof(float)));
    if (!is) throw IoError("checkpoint truncated in tensor " + name);
    if (name.rfind("__meta__", 0) == 0)
      meta[name] = std::move(t);
    else
      out.tensors[name] = std::move(t);
  }
  auto want = [&](const char* key) -> const Tensor& {
    auto it = meta.find(key);
    if (it == meta.end()) throw IoError(std::string("checkpoint missing ") + key);
    return it->second;
  };
  out.meta.stage = (int)want("__meta__.stage").data[0];
  out.meta.epoch = (int)want("__meta__.epoch").data[0];
  out.meta.seed = (uint32_t)want("__meta__.seed_lo").data[0] |
                  ((uint32_t)want("__meta__.seed_hi").data[0] << 16);
  out.meta.config_text = tensor_text(want("__meta__.config"));
  return out;
}

void load_into(ParamStoreT<float>& params, const LoadedCheckpoint& ckpt) {
  size_t used = 0;
  for (const auto& p : params.all()) {
    auto it = ckpt.tensors.find(p->name);
    if (it == ckpt.tensors.end())
      throw IoError("checkpoint has no tensor named " + p->name);
    if (it->second.shape != p->value.shape)
      throw ShapeError("checkpoint tensor " + p->name + " is " + shape_str(it->second.shape) +
                       ", expected " + shape_str(p->value.shape));
    p->value = it->second;
    ++used;
  }
  if (used != ckpt.tensors.size())
    throw IoError("checkpoint has " + std::to_string(ckpt.tensors.size() - used) +
                  " tensors the model does not define");
}

}  // namespace bimii
