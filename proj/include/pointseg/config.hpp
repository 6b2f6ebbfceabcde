#pragma once
// Resolved run configuration: defaults, optional config file, and
// dotted-key overrides. Unknown keys are rejected with the list of valid
// keys. The resolved tree is echoed into every checkpoint and report.

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "pointseg/encoder.hpp"
#include "pointseg/losses.hpp"
#include "pointseg/optimizer.hpp"
#include "pointseg/segmenter.hpp"
#include "pointseg/tracker.hpp"

namespace pointseg::config {

nlohmann::json defaults();

// defaults <- file (if any) <- overrides ("a.b.c=value"), validating every
// key against the default tree.
nlohmann::json resolve(const std::filesystem::path& config_file,
                       const std::vector<std::string>& overrides);

// Strict merge/override helpers (exposed for tests).
void apply_override(nlohmann::json& tree, const std::string& dotted_key,
                    const std::string& value);
void merge_strict(nlohmann::json& base, const nlohmann::json& patch,
                  const std::string& path = "");

// Typed views of the resolved tree.
encoder::EncoderConfig encoder_config(const nlohmann::json& cfg, const std::string& which);
tracker::TrackerConfig tracker_config(const nlohmann::json& cfg);
segmenter::FusionConfig fusion_config(const nlohmann::json& cfg);
losses::LossWeights loss_weights(const nlohmann::json& cfg);
train::AdamWConfig adamw_config(const nlohmann::json& cfg);

std::uint64_t config_hash(const nlohmann::json& cfg);

}  // namespace pointseg::config
