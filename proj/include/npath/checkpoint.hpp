#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "npath/vit.hpp"

namespace npath {

// Layout: 8-byte magic "NPVITCK1", little-endian u32 header length H, H bytes
// of UTF-8 JSON {format_version, config, layer_norm_eps, tensors: {name:
// {dtype, shape, byte_offset, byte_len}}}, then one little-endian f64 blob.
// Offsets are relative to the start of the blob.
inline constexpr char kCheckpointMagic[8] = {'N', 'P', 'V', 'I', 'T', 'C', 'K', '1'};
inline constexpr int kCheckpointVersion = 1;

std::vector<std::uint8_t> encode_checkpoint(const VitModel& model);
// Throws BadMagicError, VersionMismatchError, ShapeMismatchError,
// TruncatedError (naming the first incomplete tensor) or FormatError.
VitModel decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const VitModel& model, const std::string& path);
VitModel load_checkpoint(const std::string& path);

std::vector<std::uint8_t> read_file_bytes(const std::string& path);

}  // namespace npath
