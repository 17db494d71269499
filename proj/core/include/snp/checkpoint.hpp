#pragma once

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "snp/nn.hpp"
#include "snp/optim.hpp"

namespace snp {

/// Checkpoint: "SNPC" magic, version, model tag, iteration, then a named
/// tensor table (shape manifest followed by f32 little-endian data) and an
/// FNV-1a trailer checksum. Optimizer moments are stored as "adam.m.<name>" /
/// "adam.v.<name>" entries.
constexpr uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  std::vector<int> shape;
  std::vector<float> data;
};

namespace ckpt_detail {

static_assert(std::endian::native == std::endian::little,
              "checkpoints are little-endian; big-endian hosts are unsupported");

inline void write_all(const std::string& path, const std::vector<uint8_t>& buf) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("checkpoint: cannot open for write: " + path);
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!out) throw std::runtime_error("checkpoint: write failed: " + path);
}

template <class T>
void put(std::vector<uint8_t>& buf, T v) {
  const auto* b = reinterpret_cast<const uint8_t*>(&v);
  buf.insert(buf.end(), b, b + sizeof(T));
}

}  // namespace ckpt_detail

inline void save_tensor_table(const std::string& path, const std::string& model_tag,
                              int64_t iteration, const std::vector<NamedTensor>& tensors) {
  std::vector<uint8_t> buf;
  buf.insert(buf.end(), {'S', 'N', 'P', 'C'});
  ckpt_detail::put<uint32_t>(buf, kCheckpointVersion);
  ckpt_detail::put<uint32_t>(buf, static_cast<uint32_t>(model_tag.size()));
  buf.insert(buf.end(), model_tag.begin(), model_tag.end());
  ckpt_detail::put<int64_t>(buf, iteration);
  ckpt_detail::put<uint32_t>(buf, static_cast<uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    ckpt_detail::put<uint32_t>(buf, static_cast<uint32_t>(t.name.size()));
    buf.insert(buf.end(), t.name.begin(), t.name.end());
    ckpt_detail::put<uint32_t>(buf, static_cast<uint32_t>(t.shape.size()));
    for (int d : t.shape) ckpt_detail::put<uint32_t>(buf, static_cast<uint32_t>(d));
  }
  for (const auto& t : tensors) {
    const auto* b = reinterpret_cast<const uint8_t*>(t.data.data());
    buf.insert(buf.end(), b, b + t.data.size() * sizeof(float));
  }
  uint64_t h = 14695981039346656037ull;
  for (uint8_t b : buf) h = (h ^ b) * 1099511628211ull;
  ckpt_detail::put<uint64_t>(buf, h);
  ckpt_detail::write_all(path, buf);
}

struct TensorTable {
  std::string model_tag;
  int64_t iteration = 0;
  std::vector<NamedTensor> tensors;

  const NamedTensor* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }
};

inline TensorTable load_tensor_table(const std::string& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw std::runtime_error("checkpoint: cannot open: " + path);
  std::vector<uint8_t> buf(static_cast<size_t>(in.tellg()));
  in.seekg(0);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!in) throw std::runtime_error("checkpoint: read failed: " + path);
  if (buf.size() < 12 + sizeof(uint64_t)) throw std::runtime_error("checkpoint: truncated");
  uint64_t h = 14695981039346656037ull;
  for (size_t i = 0; i + sizeof(uint64_t) < buf.size(); ++i) h = (h ^ buf[i]) * 1099511628211ull;
  uint64_t stored;
  std::memcpy(&stored, buf.data() + buf.size() - sizeof(uint64_t), sizeof(uint64_t));
  if (h != stored) throw std::runtime_error("checkpoint: checksum mismatch: " + path);

  size_t pos = 0;
  auto need = [&](size_t n) {
    if (pos + n > buf.size() - sizeof(uint64_t))
      throw std::runtime_error("checkpoint: truncated payload");
  };
  auto get_u32 = [&]() {
    need(4);
    uint32_t v;
    std::memcpy(&v, buf.data() + pos, 4);
    pos += 4;
    return v;
  };
  need(4);
  if (std::memcmp(buf.data(), "SNPC", 4) != 0)
    throw std::runtime_error("checkpoint: bad magic: " + path);
  pos = 4;
  const uint32_t version = get_u32();
  if (version != kCheckpointVersion)
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  TensorTable table;
  const uint32_t tag_len = get_u32();
  need(tag_len);
  table.model_tag.assign(reinterpret_cast<const char*>(buf.data() + pos), tag_len);
  pos += tag_len;
  need(8);
  std::memcpy(&table.iteration, buf.data() + pos, 8);
  pos += 8;
  const uint32_t n = get_u32();
  table.tensors.resize(n);
  for (auto& t : table.tensors) {
    const uint32_t name_len = get_u32();
    need(name_len);
    t.name.assign(reinterpret_cast<const char*>(buf.data() + pos), name_len);
    pos += name_len;
    const uint32_t rank = get_u32();
    t.shape.resize(rank);
    size_t count = 1;
    for (auto& d : t.shape) {
      d = static_cast<int>(get_u32());
      count *= static_cast<size_t>(d);
    }
    t.data.resize(count);
  }
  for (auto& t : table.tensors) {
    need(t.data.size() * sizeof(float));
    std::memcpy(t.data.data(), buf.data() + pos, t.data.size() * sizeof(float));
    pos += t.data.size() * sizeof(float);
  }
  return table;
}

template <class T>
std::vector<NamedTensor> snapshot_params(ParamStore<T>& ps, Adam<T>* opt = nullptr) {
  std::vector<NamedTensor> out;
  for (auto& p : ps) {
    NamedTensor t;
    t.name = p.name;
    t.shape = p.value.shape;
    t.data.resize(p.value.data.size());
    for (size_t i = 0; i < t.data.size(); ++i) t.data[i] = static_cast<float>(p.value.data[i]);
    out.push_back(std::move(t));
  }
  if (opt) {
    for (auto& p : ps) {
      auto* st = opt->state_of(p.name);
      if (!st) continue;
      NamedTensor m{("adam.m." + p.name), p.value.shape, {}};
      NamedTensor v{("adam.v." + p.name), p.value.shape, {}};
      m.data.resize(st->m.data.size());
      v.data.resize(st->v.data.size());
      for (size_t i = 0; i < m.data.size(); ++i) {
        m.data[i] = static_cast<float>(st->m.data[i]);
        v.data[i] = static_cast<float>(st->v.data[i]);
      }
      out.push_back(std::move(m));
      out.push_back(std::move(v));
    }
  }
  return out;
}

template <class T>
void save_checkpoint(const std::string& path, const std::string& model_tag, int64_t iteration,
                     ParamStore<T>& ps, Adam<T>* opt = nullptr) {
  save_tensor_table(path, model_tag, iteration, snapshot_params(ps, opt));
}

/// Loads matching tensors (by name; shapes must agree). Returns the stored
/// iteration. Missing parameters are an error; extra tensors (optimizer
/// state) are ignored unless `opt` is given.
template <class T>
int64_t load_checkpoint(const std::string& path, const std::string& expect_tag, ParamStore<T>& ps,
                        Adam<T>* opt = nullptr) {
  const TensorTable table = load_tensor_table(path);
  if (!expect_tag.empty() && table.model_tag != expect_tag)
    throw std::runtime_error("checkpoint: model tag '" + table.model_tag + "' != expected '" +
                             expect_tag + "'");
  for (auto& p : ps) {
    const NamedTensor* t = table.find(p.name);
    if (!t) throw std::runtime_error("checkpoint: missing tensor '" + p.name + "'");
    if (t->shape != p.value.shape)
      throw std::runtime_error("checkpoint: shape mismatch for '" + p.name + "'");
    for (size_t i = 0; i < t->data.size(); ++i) p.value.data[i] = static_cast<T>(t->data[i]);
    if (opt) {
      const NamedTensor* m = table.find("adam.m." + p.name);
      const NamedTensor* v = table.find("adam.v." + p.name);
      if (m && v) {
        auto* st = opt->state_of(p.name);
        for (size_t i = 0; i < m->data.size(); ++i) {
          st->m.data[i] = static_cast<T>(m->data[i]);
          st->v.data[i] = static_cast<T>(v->data[i]);
        }
      }
    }
  }
  if (opt) opt->set_iteration(table.iteration);
  return table.iteration;
}

}  // namespace snp
