#pragma once

// Trajectory cache file (bit-exact round-trip):
//   magic "LATTETRJ" | u32 version=1 | u32 d
//   per user, until EOF:
//     user id (u32 length + bytes) | u64 state count
//     count*d f32 state rows | count f32 residual norms | count i64 timestamps
//
// States are stored in f32; peer counts and weight entropies are build-time
// metadata and are not persisted (loaded states carry peer_count = 0).

#include "latte/anchor.hpp"
#include "latte/core.hpp"
#include "latte/io_util.hpp"

#include <string>
#include <vector>

namespace latte {

inline constexpr char kTrajectoryMagic[8] = {'L', 'A', 'T', 'T', 'E', 'T', 'R', 'J'};

inline void save_trajectories(const std::vector<Trajectory>& trajectories,
                              std::uint32_t d, const std::string& path) {
  auto out = open_out(path);
  write_bytes(out, kTrajectoryMagic, sizeof(kTrajectoryMagic));
  write_pod<std::uint32_t>(out, 1);
  write_pod<std::uint32_t>(out, d);
  for (const auto& traj : trajectories) {
    write_string(out, traj.user_id);
    write_pod<std::uint64_t>(out, traj.states.size());
    for (const auto& state : traj.states) {
      if (state.vector.size() != static_cast<Eigen::Index>(d))
        throw Error::internal("trajectory state dim mismatch for " + traj.user_id);
      for (Eigen::Index i = 0; i < state.vector.size(); ++i)
        write_pod<float>(out, static_cast<float>(state.vector[i]));
    }
    for (const auto& state : traj.states)
      write_pod<float>(out, static_cast<float>(state.residual_norm));
    for (const auto& state : traj.states)
      write_pod<std::int64_t>(out, state.timestamp);
  }
  if (!out) throw Error::internal("write failed: " + path);
}

inline std::vector<Trajectory> load_trajectories(const std::string& path,
                                                 std::uint32_t* d_out = nullptr) {
  auto in = open_in(path);
  char magic[8];
  read_bytes(in, magic, sizeof(magic), "trajectory magic");
  if (std::memcmp(magic, kTrajectoryMagic, sizeof(magic)) != 0)
    throw Error::validation("not a trajectory cache (bad magic): " + path);
  const auto version = read_pod<std::uint32_t>(in, "trajectory version");
  if (version != 1)
    throw Error::validation("unsupported trajectory version " + std::to_string(version));
  const auto d = read_pod<std::uint32_t>(in, "trajectory dim");
  if (d_out != nullptr) *d_out = d;

  std::vector<Trajectory> out;
  for (;;) {
    // Records run to EOF; probe for the next user id.
    std::uint32_t name_len = 0;
    in.read(reinterpret_cast<char*>(&name_len), sizeof(name_len));
    if (in.gcount() == 0) break;
    if (in.gcount() != static_cast<std::streamsize>(sizeof(name_len)))
      throw Error::validation("truncated trajectory record header");
    std::string user(name_len, '\0');
    if (name_len > 0) read_bytes(in, user.data(), name_len, "trajectory user id");

    Trajectory traj;
    traj.user_id = std::move(user);
    const auto count = read_pod<std::uint64_t>(in, "trajectory state count");
    traj.states.resize(count);
    for (auto& state : traj.states) {
      state.vector.resize(d);
      for (std::uint32_t i = 0; i < d; ++i)
        state.vector[i] = static_cast<double>(read_pod<float>(in, "state row"));
    }
    for (auto& state : traj.states)
      state.residual_norm = static_cast<double>(read_pod<float>(in, "residual norm"));
    for (std::size_t i = 0; i < count; ++i) {
      traj.states[i].timestamp = read_pod<std::int64_t>(in, "state timestamp");
      traj.states[i].session_pos = i;
    }
    out.push_back(std::move(traj));
  }
  return out;
}

}  // namespace latte
