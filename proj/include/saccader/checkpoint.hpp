#pragma once

#include <string>

#include "saccader/params.hpp"

namespace saccader {

// Checkpoint container: magic, version, then a named tensor table of
// (name length, name bytes, dtype tag, rank, dims, little-endian float32
// data). Captures trainable parameters and BN running-stat buffers alike.
void save_checkpoint(const std::string& path, const ParameterSet<float>& ps);

// Strict load into an already-built parameter set: every tensor in the file
// must exist with a matching shape, and vice versa.
void load_checkpoint(const std::string& path, ParameterSet<float>& ps);

bool file_exists(const std::string& path);

// FNV-1a 64 content hash of a file, as hex.
std::string file_content_hash(const std::string& path);

}  // namespace saccader
