#include "snp/episode_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <vector>

static_assert(std::endian::native == std::endian::little,
              "episode records are little-endian; big-endian hosts are unsupported");

namespace snp {

namespace {

constexpr char kMagic[4] = {'S', 'N', 'P', 'E'};

class Writer {
 public:
  void raw(const void* p, size_t n) {
    const auto* b = static_cast<const uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  template <class T>
  void put(T v) {
    raw(&v, sizeof(T));
  }
  void finish(const std::string& path) {
    uint64_t h = 14695981039346656037ull;
    for (uint8_t b : buf_) h = (h ^ b) * 1099511628211ull;
    put(h);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("episode_io: cannot open for write: " + path);
    out.write(reinterpret_cast<const char*>(buf_.data()), static_cast<std::streamsize>(buf_.size()));
    if (!out) throw std::runtime_error("episode_io: write failed: " + path);
  }

 private:
  std::vector<uint8_t> buf_;
};

class Reader {
 public:
  explicit Reader(const std::string& path) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in) throw std::runtime_error("episode_io: cannot open: " + path);
    const auto size = in.tellg();
    in.seekg(0);
    buf_.resize(static_cast<size_t>(size));
    in.read(reinterpret_cast<char*>(buf_.data()), size);
    if (!in) throw std::runtime_error("episode_io: read failed: " + path);
    if (buf_.size() < sizeof(uint64_t) + 4)
      throw std::runtime_error("episode_io: truncated file: " + path);
    uint64_t h = 14695981039346656037ull;
    for (size_t i = 0; i + sizeof(uint64_t) < buf_.size(); ++i)
      h = (h ^ buf_[i]) * 1099511628211ull;
    uint64_t stored;
    std::memcpy(&stored, buf_.data() + buf_.size() - sizeof(uint64_t), sizeof(uint64_t));
    if (h != stored) throw std::runtime_error("episode_io: checksum mismatch: " + path);
    end_ = buf_.size() - sizeof(uint64_t);
  }

  void raw(void* p, size_t n) {
    if (pos_ + n > end_) throw std::runtime_error("episode_io: truncated payload");
    std::memcpy(p, buf_.data() + pos_, n);
    pos_ += n;
  }
  template <class T>
  T get() {
    T v;
    raw(&v, sizeof(T));
    return v;
  }

 private:
  std::vector<uint8_t> buf_;
  size_t pos_ = 0;
  size_t end_ = 0;
};

void write_header(Writer& w, EpisodeKind kind, uint8_t tag, uint32_t T, uint32_t qdim,
                  uint32_t odim, uint64_t seed) {
  w.raw(kMagic, 4);
  w.put<uint32_t>(kEpisodeFormatVersion);
  w.put<uint8_t>(static_cast<uint8_t>(kind));
  w.put<uint8_t>(tag);
  w.put<uint16_t>(0);
  w.put<uint32_t>(T);
  w.put<uint32_t>(qdim);
  w.put<uint32_t>(odim);
  w.put<uint64_t>(seed);
}

}  // namespace

void serialize_episode(const Episode1D& ep, const std::string& path) {
  Writer w;
  write_header(w, EpisodeKind::one_d, static_cast<uint8_t>(ep.task), ep.T, 1, 1, ep.seed);
  for (const auto& st : ep.steps) {
    const uint32_t n = static_cast<uint32_t>(st.x.size());
    w.put<uint32_t>(n);
    if (n) {
      w.raw(st.x.data(), n * sizeof(float));
      w.raw(st.y.data(), n * sizeof(float));
      w.raw(st.ctx_mask.data(), n);
      w.raw(st.tgt_mask.data(), n);
    }
  }
  w.finish(path);
}

void serialize_episode(const Episode2D& ep, const std::string& path) {
  Writer w;
  const uint32_t odim = kPatchSize * kPatchSize * 3;
  write_header(w, EpisodeKind::two_d, static_cast<uint8_t>(ep.regime), ep.T, 2, odim, ep.seed);
  for (const auto& st : ep.steps) {
    const uint32_t n = static_cast<uint32_t>(st.obs.size());
    w.put<uint32_t>(n);
    for (const auto& o : st.obs) {
      w.put<float>(o.view_row);
      w.put<float>(o.view_col);
    }
    for (const auto& o : st.obs) {
      if (o.patch.size() != odim) throw std::runtime_error("episode_io: bad patch size");
      w.raw(o.patch.data(), odim * sizeof(float));
    }
    if (n) {
      w.raw(st.ctx_mask.data(), n);
      w.raw(st.tgt_mask.data(), n);
    }
  }
  w.finish(path);
}

AnyEpisode deserialize_episode(const std::string& path) {
  Reader r(path);
  char magic[4];
  r.raw(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("episode_io: bad magic (not an episode record): " + path);
  const uint32_t version = r.get<uint32_t>();
  if (version != kEpisodeFormatVersion)
    throw std::runtime_error("episode_io: unsupported record version " + std::to_string(version) +
                             " (expected " + std::to_string(kEpisodeFormatVersion) + "): " + path);
  const uint8_t kind = r.get<uint8_t>();
  const uint8_t tag = r.get<uint8_t>();
  r.get<uint16_t>();
  const uint32_t T = r.get<uint32_t>();
  const uint32_t qdim = r.get<uint32_t>();
  const uint32_t odim = r.get<uint32_t>();
  const uint64_t seed = r.get<uint64_t>();

  AnyEpisode out;
  if (kind == static_cast<uint8_t>(EpisodeKind::one_d)) {
    if (qdim != 1 || odim != 1) throw std::runtime_error("episode_io: bad 1D dims");
    out.kind = EpisodeKind::one_d;
    auto& ep = out.e1;
    ep.task = static_cast<char>(tag);
    ep.T = static_cast<int>(T);
    ep.seed = seed;
    ep.steps.resize(T);
    for (auto& st : ep.steps) {
      const uint32_t n = r.get<uint32_t>();
      st.x.resize(n);
      st.y.resize(n);
      st.ctx_mask.resize(n);
      st.tgt_mask.resize(n);
      if (n) {
        r.raw(st.x.data(), n * sizeof(float));
        r.raw(st.y.data(), n * sizeof(float));
        r.raw(st.ctx_mask.data(), n);
        r.raw(st.tgt_mask.data(), n);
      }
    }
  } else if (kind == static_cast<uint8_t>(EpisodeKind::two_d)) {
    if (qdim != 2 || odim != kPatchSize * kPatchSize * 3)
      throw std::runtime_error("episode_io: bad 2D dims");
    out.kind = EpisodeKind::two_d;
    auto& ep = out.e2;
    ep.regime = static_cast<Regime2D>(tag);
    ep.T = static_cast<int>(T);
    ep.seed = seed;
    ep.steps.resize(T);
    for (auto& st : ep.steps) {
      const uint32_t n = r.get<uint32_t>();
      st.obs.resize(n);
      for (auto& o : st.obs) {
        o.view_row = r.get<float>();
        o.view_col = r.get<float>();
      }
      for (auto& o : st.obs) {
        o.patch.resize(odim);
        r.raw(o.patch.data(), odim * sizeof(float));
      }
      st.ctx_mask.resize(n);
      st.tgt_mask.resize(n);
      if (n) {
        r.raw(st.ctx_mask.data(), n);
        r.raw(st.tgt_mask.data(), n);
      }
    }
  } else {
    throw std::runtime_error("episode_io: unknown episode kind");
  }
  return out;
}

Episode1D load_episode1d(const std::string& path) {
  auto any = deserialize_episode(path);
  if (any.kind != EpisodeKind::one_d)
    throw std::runtime_error("episode_io: expected a 1D episode: " + path);
  return std::move(any.e1);
}

Episode2D load_episode2d(const std::string& path) {
  auto any = deserialize_episode(path);
  if (any.kind != EpisodeKind::two_d)
    throw std::runtime_error("episode_io: expected a 2D episode: " + path);
  return std::move(any.e2);
}

}  // namespace snp
