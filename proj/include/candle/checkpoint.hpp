#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include "candle/model.hpp"

namespace candle {

/// Everything needed to run inference: weights, architecture switches,
/// prototypes and the class vocabulary.
struct HeadModel {
  ModelParams params;
  HeadOptions options;
  PrototypeSet prototypes;
  std::vector<std::string> class_names;
};

inline constexpr char kModelMagic[4] = {'C', 'N', 'D', 'M'};
inline constexpr std::uint32_t kModelVersion = 1;

/// "CNDM", u32 version, u32 header length, JSON header, then f32 LE blobs:
/// W_PI, W_PT, W_Q, W_K, W_V, W_O, visual, textual, virtual prototypes.
std::vector<std::uint8_t> encode_checkpoint(const HeadModel& model);
HeadModel decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const HeadModel& model, const std::filesystem::path& path);
HeadModel load_checkpoint(const std::filesystem::path& path);

/// Model as it would be after a save/load round trip (weights rounded to f32).
HeadModel round_to_f32(const HeadModel& model);

}  // namespace candle
