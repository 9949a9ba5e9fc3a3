#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "gues/vae.hpp"

namespace gues {

inline constexpr std::string_view kGuesMagic = "GUES1";
inline constexpr std::string_view kClassifierMagic = "CLSF1";

class CheckpointError : public Error {
 public:
  using Error::Error;
};

/// Flat binary layout: the 5-byte magic, then per tensor in order
///   u32 name length | name bytes | u32 rank | u64 extents[rank] | f64 payload
/// with every integer and float little-endian.
void write_checkpoint(const std::filesystem::path& path, std::string_view magic,
                      const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> read_checkpoint(const std::filesystem::path& path, std::string_view magic);

/// Copies loaded values into `targets`, matching by position, name and shape.
void load_into(const std::vector<NamedTensor>& loaded, const std::vector<NamedTensor>& targets);

void save_gues_model(const std::filesystem::path& path, const GuesModel& model);
void load_gues_model(const std::filesystem::path& path, GuesModel& model);

}  // namespace gues
