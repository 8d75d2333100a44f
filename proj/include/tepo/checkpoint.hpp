#pragma once

// Binary checkpoint, little-endian:
//   "TEPOCKPT" | u32 format_version | u32 kind | u32 vocab_size | u32 context_order
//   | u64 param_count | u64 step | f64 best_eval | i64 steps_to_threshold
//   | [tabular: u64 row_count, u64 key x row_count] | f64 x param_count

#include <filesystem>
#include <stdexcept>
#include <string>

#include "tepo/trainer.hpp"

namespace tepo {

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void save_checkpoint(const TrainerState& state, const std::filesystem::path& path);
TrainerState load_checkpoint(const std::filesystem::path& path);

std::string encode_checkpoint(const TrainerState& state);
TrainerState decode_checkpoint(const std::string& bytes);

/// Human-readable rendering of the same content.
std::string checkpoint_text_dump(const TrainerState& state);

}  // namespace tepo
