#pragma once
// On-disk clip format, dataset splits, and the core video/trajectory
// value types. The directory layout is the repo's interchange format:
//
//   <clip dir>/
//     meta.json        dims, spacing, ids, tags, byte order, dtype codes
//     frames.bin       float32 little-endian, row-major T,H,W
//     masks.bin        uint8 {0,1}, same order (optional)
//     tracks.bin       float32 N,T,2 with x before y (optional)
//     visibility.bin   uint8 N,T (optional)
//
// Coordinates: top-left origin, x rightward, y downward, x before y.

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "pointseg/tensor.hpp"

namespace pointseg::data {

enum class Quality { good_medium, poor };

const char* quality_name(Quality q);
Quality quality_from_name(const std::string& s);

struct VideoClip {
  Tensor frames;  // [T,H,W], values in [0,1]
  double pixel_spacing = 1.0;
  std::string id;
  Quality quality = Quality::good_medium;

  std::int64_t t() const { return frames.dim(0); }
  std::int64_t h() const { return frames.dim(1); }
  std::int64_t w() const { return frames.dim(2); }
  void validate() const;
};

struct TrajectorySet {
  Tensor positions;   // [N,T,2] sub-pixel (x,y)
  Tensor visibility;  // [N,T] in {0,1}
  std::vector<int> point_ids;

  std::int64_t n() const { return positions.dim(0); }
  std::int64_t t() const { return positions.dim(1); }
  void validate() const;
};

struct ClipRecord {
  VideoClip clip;
  Tensor masks;           // [T,H,W] {0,1}; undefined when absent
  TrajectorySet tracks;   // positions undefined when absent
  std::string split;      // optional tag

  bool has_masks() const { return masks.defined(); }
  bool has_tracks() const { return tracks.positions.defined(); }
  void validate() const;
};

void write_clip(const ClipRecord& record, const std::filesystem::path& dir);
ClipRecord read_clip(const std::filesystem::path& dir);

struct Splits {
  std::vector<std::string> train, val, test;
};

// Deterministic shuffle by seed; disjoint and exhaustive.
Splits make_splits(std::vector<std::string> ids, std::array<double, 3> ratios,
                   std::uint64_t seed);

void write_splits(const Splits& s, const std::filesystem::path& dataset_dir);
Splits read_splits(const std::filesystem::path& dataset_dir);

// Sorted ids of clip subdirectories (those containing meta.json).
std::vector<std::string> list_clips(const std::filesystem::path& dataset_dir);

// Round a tensor through float32, so later float32 serialization is exact.
void quantize_f32(Tensor& t);

}  // namespace pointseg::data
