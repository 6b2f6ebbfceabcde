#pragma once
// Single-file checkpoint container: a JSON manifest followed by named
// little-endian float64 arrays. Reloading reproduces forward passes
// bit-identically.

#include <filesystem>
#include <map>
#include <string>

#include <json.hpp>

#include "pointseg/optimizer.hpp"

namespace pointseg::train {

struct CheckpointMeta {
  std::string stage;  // "tracker" | "segmenter"
  std::int64_t epoch = 0;
  double best_metric = 0.0;
  nlohmann::json config;      // full resolved config echo
  nlohmann::json rng;         // seed / epoch / step bookkeeping
};

void save_checkpoint(const std::filesystem::path& path, const CheckpointMeta& meta,
                     const nn::ParamStore& store, const AdamW* optimizer);

struct LoadedCheckpoint {
  CheckpointMeta meta;
  std::int64_t adam_step = 0;
  std::map<std::string, Tensor> params;
  std::map<std::string, Tensor> adam_m, adam_v;
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

// Copies arrays into an existing store; every store parameter must be
// present with a matching shape. `prefix` restricts which store entries
// are restored (e.g. only "tracker").
void restore_params(const LoadedCheckpoint& ck, nn::ParamStore& store,
                    const std::string& prefix = "");
void restore_optimizer(const LoadedCheckpoint& ck, AdamW& opt);

}  // namespace pointseg::train
