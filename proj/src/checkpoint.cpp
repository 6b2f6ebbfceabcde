#include "pointseg/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "pointseg/errors.hpp"

namespace pointseg::train {

namespace {

using nlohmann::json;

constexpr char kMagic[8] = {'P', 'S', 'E', 'G', 'C', 'K', 'P', 'T'};

struct ArrayEntry {
  std::string name;
  std::string kind;  // "param" | "adam_m" | "adam_v"
  Shape shape;
  std::int64_t offset;
  std::int64_t count;
};

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const CheckpointMeta& meta,
                     const nn::ParamStore& store, const AdamW* optimizer) {
  json manifest;
  manifest["format"] = "pointseg-checkpoint-v1";
  manifest["stage"] = meta.stage;
  manifest["epoch"] = meta.epoch;
  manifest["best_metric"] = meta.best_metric;
  manifest["config"] = meta.config;
  manifest["rng"] = meta.rng;
  manifest["dtype"] = "f64le";
  manifest["adam_step"] = optimizer ? optimizer->step_count() : 0;

  std::vector<std::pair<std::string, const Tensor*>> arrays;
  std::vector<json> entries;
  std::int64_t offset = 0;
  auto push = [&](const std::string& name, const std::string& kind, const Tensor& t) {
    json e;
    e["name"] = name;
    e["kind"] = kind;
    e["shape"] = t.shape();
    e["offset"] = offset;
    e["count"] = t.numel();
    entries.push_back(e);
    arrays.emplace_back(name, &t);
    offset += t.numel();
  };
  store.for_each([&](const nn::Parameter& p) { push(p.name, "param", p.value); });
  if (optimizer) {
    for (const auto& [name, slot] : const_cast<AdamW*>(optimizer)->state()) {
      push(name, "adam_m", slot.m);
      push(name, "adam_v", slot.v);
    }
  }
  manifest["arrays"] = entries;

  const std::string text = manifest.dump();
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write checkpoint: " + path.string());
  f.write(kMagic, sizeof(kMagic));
  const std::uint64_t len = text.size();
  f.write(reinterpret_cast<const char*>(&len), sizeof(len));
  f.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, t] : arrays)
    f.write(reinterpret_cast<const char*>(t->data()),
            static_cast<std::streamsize>(t->numel()) * static_cast<std::streamsize>(sizeof(double)));
  if (!f) throw IoError("checkpoint write failed: " + path.string());
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint: " + path.string());
  char magic[8];
  f.read(magic, sizeof(magic));
  if (!f || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw FormatError("not a checkpoint file: " + path.string());
  std::uint64_t len = 0;
  f.read(reinterpret_cast<char*>(&len), sizeof(len));
  std::string text(len, '\0');
  f.read(text.data(), static_cast<std::streamsize>(len));
  if (!f) throw FormatError("truncated checkpoint manifest: " + path.string());

  json manifest;
  try {
    manifest = json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError("checkpoint manifest parse error: " + std::string(e.what()));
  }

  LoadedCheckpoint out;
  try {
    out.meta.stage = manifest.at("stage").get<std::string>();
    out.meta.epoch = manifest.at("epoch").get<std::int64_t>();
    out.meta.best_metric = manifest.value("best_metric", 0.0);
    out.meta.config = manifest.value("config", json::object());
    out.meta.rng = manifest.value("rng", json::object());
    out.adam_step = manifest.value("adam_step", static_cast<std::int64_t>(0));

    const std::streampos data_start = f.tellg();
    for (const auto& e : manifest.at("arrays")) {
      const std::string name = e.at("name").get<std::string>();
      const std::string kind = e.at("kind").get<std::string>();
      const Shape shape = e.at("shape").get<Shape>();
      const std::int64_t offset = e.at("offset").get<std::int64_t>();
      const std::int64_t count = e.at("count").get<std::int64_t>();
      Tensor t(shape);
      if (t.numel() != count) throw FormatError("checkpoint: array count mismatch for " + name);
      f.seekg(data_start + static_cast<std::streamoff>(offset * static_cast<std::int64_t>(sizeof(double))));
      f.read(reinterpret_cast<char*>(t.data()),
             static_cast<std::streamsize>(count) * static_cast<std::streamsize>(sizeof(double)));
      if (!f) throw FormatError("checkpoint: truncated array data for " + name);
      if (kind == "param")
        out.params.emplace(name, std::move(t));
      else if (kind == "adam_m")
        out.adam_m.emplace(name, std::move(t));
      else if (kind == "adam_v")
        out.adam_v.emplace(name, std::move(t));
    }
  } catch (const json::exception& e) {
    throw FormatError("checkpoint manifest: " + std::string(e.what()));
  }
  return out;
}

void restore_params(const LoadedCheckpoint& ck, nn::ParamStore& store,
                    const std::string& prefix) {
  store.for_each([&](nn::Parameter& p) {
    if (!prefix.empty() && p.name.rfind(prefix, 0) != 0) return;
    auto it = ck.params.find(p.name);
    if (it == ck.params.end())
      throw FormatError("checkpoint is missing parameter '" + p.name + "'");
    if (it->second.shape() != p.value.shape())
      throw FormatError("checkpoint shape mismatch for '" + p.name + "'");
    for (std::int64_t i = 0; i < p.value.numel(); ++i) p.value[i] = it->second[i];
  });
}

void restore_optimizer(const LoadedCheckpoint& ck, AdamW& opt) {
  opt.set_step_count(ck.adam_step);
  for (auto& [name, slot] : opt.state()) {
    const auto mi = ck.adam_m.find(name);
    const auto vi = ck.adam_v.find(name);
    if (mi == ck.adam_m.end() || vi == ck.adam_v.end())
      throw FormatError("checkpoint is missing optimizer state for '" + name + "'");
    for (std::int64_t i = 0; i < slot.m.numel(); ++i) {
      slot.m[i] = mi->second[i];
      slot.v[i] = vi->second[i];
    }
  }
}

}  // namespace pointseg::train
