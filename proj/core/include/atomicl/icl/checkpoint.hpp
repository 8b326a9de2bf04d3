#pragma once

// Checkpoint layout:
//   u64 little-endian   header length in bytes
//   header              UTF-8 JSON: format name/version, dtype, model
//                       config, and an array manifest (name, shape, dtype,
//                       byte offset, byte length)
//   payload             raw little-endian IEEE-754 arrays in manifest order
//
// Writing the same parameters twice produces identical bytes.

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "atomicl/icl/config.hpp"
#include "atomicl/icl/model.hpp"

namespace atomicl::icl {

inline constexpr std::string_view kCheckpointFormat = "atomicl-checkpoint";
inline constexpr int kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename T>
struct Checkpoint {
  ModelConfig config;
  ModelParams<T> params;
};

template <typename T>
std::vector<std::uint8_t> serialize_checkpoint(const ModelParams<T>& params, const ModelConfig& cfg);

/// Throws CheckpointError on truncation, a foreign format, a version or dtype
/// mismatch, or manifest shapes that disagree with the stored config.
template <typename T>
Checkpoint<T> deserialize_checkpoint(const std::vector<std::uint8_t>& bytes);

template <typename T>
void save_checkpoint(const ModelParams<T>& params, const ModelConfig& cfg, const std::filesystem::path& path);

template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path);

/// "f32" or "f64", read from the header only.
std::string checkpoint_dtype(const std::filesystem::path& path);

}  // namespace atomicl::icl
