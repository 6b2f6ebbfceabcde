#include "pointseg/clip_io.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "pointseg/errors.hpp"
#include "pointseg/rng.hpp"

namespace pointseg::data {

namespace {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "on-disk format is little-endian; byte-swapped hosts are unsupported");

void write_file(const std::filesystem::path& p, const void* bytes, std::size_t n) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw IoError("cannot open for writing: " + p.string());
  f.write(static_cast<const char*>(bytes), static_cast<std::streamsize>(n));
  if (!f) throw IoError("write failed: " + p.string());
}

std::vector<char> read_file(const std::filesystem::path& p, std::size_t expected) {
  std::ifstream f(p, std::ios::binary | std::ios::ate);
  if (!f) throw FormatError("missing file: " + p.string());
  const auto size = static_cast<std::size_t>(f.tellg());
  if (size != expected)
    throw FormatError(p.string() + ": size " + std::to_string(size) +
                      " does not match meta.json (expected " + std::to_string(expected) + ")");
  std::vector<char> buf(size);
  f.seekg(0);
  f.read(buf.data(), static_cast<std::streamsize>(size));
  if (!f) throw IoError("read failed: " + p.string());
  return buf;
}

std::vector<float> to_f32(const Tensor& t) {
  std::vector<float> out(static_cast<std::size_t>(t.numel()));
  for (std::int64_t i = 0; i < t.numel(); ++i) out[static_cast<std::size_t>(i)] = static_cast<float>(t[i]);
  return out;
}

std::vector<std::uint8_t> to_u8(const Tensor& t, const char* what) {
  std::vector<std::uint8_t> out(static_cast<std::size_t>(t.numel()));
  for (std::int64_t i = 0; i < t.numel(); ++i) {
    const double v = t[i];
    if (v != 0.0 && v != 1.0)
      throw FormatError(std::string(what) + ": value " + std::to_string(v) + " is not binary");
    out[static_cast<std::size_t>(i)] = v == 1.0 ? 1 : 0;
  }
  return out;
}

Tensor f32_to_tensor(const std::vector<char>& bytes, Shape shape) {
  Tensor t(shape);
  const float* p = reinterpret_cast<const float*>(bytes.data());
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<double>(p[i]);
  return t;
}

Tensor u8_to_tensor(const std::vector<char>& bytes, Shape shape, const char* what) {
  Tensor t(shape);
  for (std::int64_t i = 0; i < t.numel(); ++i) {
    const auto v = static_cast<std::uint8_t>(bytes[static_cast<std::size_t>(i)]);
    if (v > 1)
      throw FormatError(std::string(what) + ": byte " + std::to_string(static_cast<int>(v)) +
                        " is not binary");
    t[i] = static_cast<double>(v);
  }
  return t;
}

}  // namespace

const char* quality_name(Quality q) {
  return q == Quality::poor ? "poor" : "good_medium";
}

Quality quality_from_name(const std::string& s) {
  if (s == "poor") return Quality::poor;
  if (s == "good_medium") return Quality::good_medium;
  throw FormatError("unknown quality tag: " + s);
}

void VideoClip::validate() const {
  if (!frames.defined() || frames.ndim() != 3 || t() < 1)
    throw FormatError("clip '" + id + "': frames must be a nonempty T,H,W array");
  for (std::int64_t i = 0; i < frames.numel(); ++i) {
    const double v = frames[i];
    if (!std::isfinite(v) || v < 0.0 || v > 1.0)
      throw FormatError("clip '" + id + "': intensity outside [0,1]");
  }
  if (!(pixel_spacing > 0.0)) throw FormatError("clip '" + id + "': pixel spacing must be positive");
}

void TrajectorySet::validate() const {
  if (!positions.defined() || positions.ndim() != 3 || positions.dim(2) != 2 || n() < 1)
    throw FormatError("tracks: positions must be a nonempty N,T,2 array");
  if (!positions.all_finite()) throw FormatError("tracks: non-finite position");
  if (!visibility.defined() || visibility.shape() != Shape{n(), t()})
    throw FormatError("tracks: visibility must be N,T");
  for (std::int64_t i = 0; i < visibility.numel(); ++i)
    if (visibility[i] != 0.0 && visibility[i] != 1.0)
      throw FormatError("tracks: visibility must be binary");
}

void ClipRecord::validate() const {
  clip.validate();
  if (has_masks() && masks.shape() != clip.frames.shape())
    throw FormatError("clip '" + clip.id + "': mask dims disagree with frames");
  if (has_tracks()) {
    tracks.validate();
    if (tracks.t() != clip.t())
      throw FormatError("clip '" + clip.id + "': track frame count disagrees with clip");
  }
}

void write_clip(const ClipRecord& record, const std::filesystem::path& dir) {
  record.validate();
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());

  json meta;
  meta["clip_id"] = record.clip.id;
  meta["frames"] = record.clip.t();
  meta["height"] = record.clip.h();
  meta["width"] = record.clip.w();
  meta["pixel_spacing"] = record.clip.pixel_spacing;
  meta["quality"] = quality_name(record.clip.quality);
  meta["byte_order"] = "little";
  meta["dtypes"] = {{"frames", "f32"}, {"masks", "u8"}, {"tracks", "f32"}, {"visibility", "u8"}};
  meta["has_masks"] = record.has_masks();
  meta["has_tracks"] = record.has_tracks();
  if (!record.split.empty()) meta["split"] = record.split;
  if (record.has_tracks()) {
    meta["n_points"] = record.tracks.n();
    meta["point_ids"] = record.tracks.point_ids;
  }
  const std::string meta_text = meta.dump(2) + "\n";
  write_file(dir / "meta.json", meta_text.data(), meta_text.size());

  const auto f32 = to_f32(record.clip.frames);
  write_file(dir / "frames.bin", f32.data(), f32.size() * sizeof(float));
  if (record.has_masks()) {
    const auto u8 = to_u8(record.masks, "masks");
    write_file(dir / "masks.bin", u8.data(), u8.size());
  }
  if (record.has_tracks()) {
    const auto tf = to_f32(record.tracks.positions);
    write_file(dir / "tracks.bin", tf.data(), tf.size() * sizeof(float));
    const auto vu = to_u8(record.tracks.visibility, "visibility");
    write_file(dir / "visibility.bin", vu.data(), vu.size());
  }
}

ClipRecord read_clip(const std::filesystem::path& dir) {
  std::ifstream mf(dir / "meta.json");
  if (!mf) throw FormatError("missing file: " + (dir / "meta.json").string());
  json meta;
  try {
    mf >> meta;
  } catch (const json::exception& e) {
    throw FormatError("meta.json parse error in " + dir.string() + ": " + e.what());
  }
  try {
    ClipRecord rec;
    rec.clip.id = meta.at("clip_id").get<std::string>();
    const std::int64_t t = meta.at("frames").get<std::int64_t>();
    const std::int64_t h = meta.at("height").get<std::int64_t>();
    const std::int64_t w = meta.at("width").get<std::int64_t>();
    rec.clip.pixel_spacing = meta.at("pixel_spacing").get<double>();
    rec.clip.quality = quality_from_name(meta.at("quality").get<std::string>());
    if (meta.value("byte_order", "little") != "little")
      throw FormatError(dir.string() + ": unsupported byte order");
    rec.split = meta.value("split", "");

    const auto fb = read_file(dir / "frames.bin",
                              static_cast<std::size_t>(t * h * w) * sizeof(float));
    rec.clip.frames = f32_to_tensor(fb, Shape{t, h, w});
    if (meta.value("has_masks", false)) {
      const auto mb = read_file(dir / "masks.bin", static_cast<std::size_t>(t * h * w));
      rec.masks = u8_to_tensor(mb, Shape{t, h, w}, "masks");
    }
    if (meta.value("has_tracks", false)) {
      const std::int64_t n = meta.at("n_points").get<std::int64_t>();
      const auto tb = read_file(dir / "tracks.bin",
                                static_cast<std::size_t>(n * t * 2) * sizeof(float));
      rec.tracks.positions = f32_to_tensor(tb, Shape{n, t, 2});
      const auto vb = read_file(dir / "visibility.bin", static_cast<std::size_t>(n * t));
      rec.tracks.visibility = u8_to_tensor(vb, Shape{n, t}, "visibility");
      if (meta.contains("point_ids"))
        rec.tracks.point_ids = meta.at("point_ids").get<std::vector<int>>();
      else {
        rec.tracks.point_ids.resize(static_cast<std::size_t>(n));
        for (std::int64_t i = 0; i < n; ++i) rec.tracks.point_ids[static_cast<std::size_t>(i)] = static_cast<int>(i);
      }
    }
    rec.validate();
    return rec;
  } catch (const json::exception& e) {
    throw FormatError("meta.json in " + dir.string() + ": " + e.what());
  }
}

Splits make_splits(std::vector<std::string> ids, std::array<double, 3> ratios,
                   std::uint64_t seed) {
  if (ids.empty()) throw ConfigError("make_splits: empty id list");
  const double sum = ratios[0] + ratios[1] + ratios[2];
  if (std::fabs(sum - 1.0) > 1e-9)
    throw ConfigError("make_splits: ratios must sum to 1, got " + std::to_string(sum));
  std::sort(ids.begin(), ids.end());  // input order must not matter
  const auto perm = rng::permutation(rng::Stream(seed, "splits"), ids.size());
  const auto n = static_cast<double>(ids.size());
  const auto b1 = static_cast<std::size_t>(std::floor(n * ratios[0] + 1e-9));
  const auto b2 = static_cast<std::size_t>(std::floor(n * (ratios[0] + ratios[1]) + 1e-9));
  Splits s;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const std::string& id = ids[perm[i]];
    if (i < b1)
      s.train.push_back(id);
    else if (i < b2)
      s.val.push_back(id);
    else
      s.test.push_back(id);
  }
  return s;
}

void write_splits(const Splits& s, const std::filesystem::path& dataset_dir) {
  nlohmann::json j;
  j["train"] = s.train;
  j["val"] = s.val;
  j["test"] = s.test;
  std::ofstream f(dataset_dir / "splits.json");
  if (!f) throw IoError("cannot write " + (dataset_dir / "splits.json").string());
  f << j.dump(2) << "\n";
}

Splits read_splits(const std::filesystem::path& dataset_dir) {
  std::ifstream f(dataset_dir / "splits.json");
  if (!f) throw FormatError("missing file: " + (dataset_dir / "splits.json").string());
  nlohmann::json j;
  try {
    f >> j;
    Splits s;
    s.train = j.at("train").get<std::vector<std::string>>();
    s.val = j.at("val").get<std::vector<std::string>>();
    s.test = j.at("test").get<std::vector<std::string>>();
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("splits.json: " + std::string(e.what()));
  }
}

std::vector<std::string> list_clips(const std::filesystem::path& dataset_dir) {
  std::vector<std::string> ids;
  if (!std::filesystem::is_directory(dataset_dir))
    throw IoError("not a directory: " + dataset_dir.string());
  for (const auto& entry : std::filesystem::directory_iterator(dataset_dir))
    if (entry.is_directory() && std::filesystem::exists(entry.path() / "meta.json"))
      ids.push_back(entry.path().filename().string());
  std::sort(ids.begin(), ids.end());
  return ids;
}

void quantize_f32(Tensor& t) {
  for (std::int64_t i = 0; i < t.numel(); ++i)
    t[i] = static_cast<double>(static_cast<float>(t[i]));
}

}  // namespace pointseg::data
