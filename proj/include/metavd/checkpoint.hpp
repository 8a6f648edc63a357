#ifndef METAVD_CHECKPOINT_HPP
#define METAVD_CHECKPOINT_HPP

#include <string>
#include <utility>
#include <vector>

#include "metavd/engine.hpp"

namespace metavd {

struct CheckpointError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Versioned "MVD1" container: magic, u32 version, u32 entry count, then
// length-prefixed named f64 arrays (u32 name length, name bytes, u32 rank,
// u64 dims, row-major payload). Everything is little-endian.
struct CheckpointEntry {
    std::string name;
    Tensor data;
};

void write_entries(const std::string& path, const std::vector<CheckpointEntry>& entries);
std::vector<CheckpointEntry> read_entries(const std::string& path);

void save_checkpoint(const std::string& path, const ServerState& state, const AlgoConfig& cfg);
std::pair<ServerState, AlgoConfig> load_checkpoint(const std::string& path);

} // namespace metavd

#endif
