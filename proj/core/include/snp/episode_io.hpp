#pragma once

#include <string>

#include "snp/episode.hpp"

namespace snp {

/// On-disk episode record: "SNPE" magic, version, kind, task/regime byte,
/// T, query/output dims, seed, then per-step arrays (f32 little-endian
/// queries and outputs, u8 context/target masks), an FNV-1a trailer checksum.
/// The payload round-trips bitwise. Ground-truth diagnostics (kernel traces,
/// canvases) are not part of the record.
constexpr uint32_t kEpisodeFormatVersion = 1;

void serialize_episode(const Episode1D& ep, const std::string& path);
void serialize_episode(const Episode2D& ep, const std::string& path);

enum class EpisodeKind : uint8_t { one_d = 1, two_d = 2 };

struct AnyEpisode {
  EpisodeKind kind = EpisodeKind::one_d;
  Episode1D e1;
  Episode2D e2;
};

/// Throws std::runtime_error on bad magic, unknown (future) version,
/// truncated payload, or checksum mismatch.
AnyEpisode deserialize_episode(const std::string& path);

Episode1D load_episode1d(const std::string& path);
Episode2D load_episode2d(const std::string& path);

}  // namespace snp
