#include "pointseg/trainer.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "pointseg/losses.hpp"
#include "pointseg/png_io.hpp"
#include "pointseg/rng.hpp"

namespace pointseg::train {

using nlohmann::json;

// ------------------------------------------------------------ datasets

json generate_dataset(const json& cfg, const std::filesystem::path& out_dir,
                      std::int64_t count_override) {
  const json& ph = cfg.at("phantom");
  const auto seed = cfg.at("seed").get<std::uint64_t>();
  const std::int64_t count =
      count_override > 0 ? count_override : ph.at("count").get<std::int64_t>();
  const std::int64_t n_points = ph.at("points").get<std::int64_t>();
  const std::int64_t T = ph.at("frames").get<std::int64_t>();

  std::filesystem::create_directories(out_dir);
  rng::Stream ds(seed, "dataset");

  std::vector<std::string> ids;
  for (std::int64_t i = 0; i < count; ++i) {
    const std::uint64_t c0 = static_cast<std::uint64_t>(i) * 32;
    phantom::PhantomSpec spec;
    spec.height = ph.at("height").get<std::int64_t>();
    spec.width = ph.at("width").get<std::int64_t>();
    spec.frames = T;
    const auto ar = ph.at("amplitude_range");
    spec.amplitude = ds.uniform(c0 + 0, ar[0].get<double>(), ar[1].get<double>());
    const auto cr = ph.at("cycle_range");
    spec.cycle_frames = cr[0].get<std::int64_t>() +
                        static_cast<std::int64_t>(ds.below(
                            c0 + 1, static_cast<std::uint64_t>(cr[1].get<std::int64_t>() -
                                                               cr[0].get<std::int64_t>() + 1)));
    spec.phase = ds.uniform(c0 + 2, 0.0, 2.0 * std::numbers::pi);
    const auto rin = ph.at("radius_in_range");
    spec.r_in0 = ds.uniform(c0 + 3, rin[0].get<double>(), rin[1].get<double>());
    const auto rout = ph.at("radius_out_range");
    spec.r_out0 = ds.uniform(c0 + 4, rout[0].get<double>(), rout[1].get<double>());
    const double jit = ph.at("center_jitter").get<double>();
    spec.cx = static_cast<double>(spec.width) / 2.0 + ds.uniform(c0 + 5, -jit, jit);
    spec.cy = static_cast<double>(spec.height) / 2.0 + ds.uniform(c0 + 6, -jit, jit);
    const auto sr = ph.at("speckle_range");
    spec.speckle_scale = ds.uniform(c0 + 7, sr[0].get<double>(), sr[1].get<double>());
    const auto br = ph.at("blur_range");
    spec.blur_sigma = ds.uniform(c0 + 8, br[0].get<double>(), br[1].get<double>());
    if (ds.uniform(c0 + 9) < ph.at("shadow_probability").get<double>()) {
      phantom::ShadowSpec sh;
      sh.angle_start = ds.uniform(c0 + 10, 0.0, 2.0 * std::numbers::pi);
      const auto span = ph.at("shadow_span_range");
      sh.angle_end = sh.angle_start + ds.uniform(c0 + 11, span[0].get<double>(), span[1].get<double>());
      sh.onset = 1 + static_cast<std::int64_t>(ds.below(c0 + 12, static_cast<std::uint64_t>(std::max<std::int64_t>(T - 2, 1))));
      const auto dur = ph.at("shadow_duration_range");
      const std::int64_t dmax = std::min(dur[1].get<std::int64_t>(), T - sh.onset);
      const std::int64_t dmin = std::min(dur[0].get<std::int64_t>(), dmax);
      sh.duration = dmin + static_cast<std::int64_t>(
                               ds.below(c0 + 13, static_cast<std::uint64_t>(dmax - dmin + 1)));
      spec.shadow = sh;
    }
    spec.pixel_spacing = ph.at("pixel_spacing").get<double>();
    spec.seed = rng::mix64(seed ^ static_cast<std::uint64_t>(0x70686172ULL + static_cast<std::uint64_t>(i)));

    phantom::GroundTruthClip gt = phantom::generate_clip(spec, n_points);
    std::ostringstream id;
    id << "clip_" << std::setw(6) << std::setfill('0') << i;
    gt.clip.id = id.str();
    data::ClipRecord rec = gt.to_record();
    rec.clip.id = id.str();
    data::write_clip(rec, out_dir / id.str());
    ids.push_back(id.str());
  }

  const auto ratios = cfg.at("splits").at("ratios").get<std::vector<double>>();
  const auto split_seed = cfg.at("splits").at("seed").get<std::uint64_t>();
  data::Splits splits =
      data::make_splits(ids, {ratios[0], ratios[1], ratios[2]}, split_seed);
  data::write_splits(splits, out_dir);

  json summary;
  summary["count"] = count;
  summary["train"] = splits.train.size();
  summary["val"] = splits.val.size();
  summary["test"] = splits.test.size();
  summary["config"] = cfg;
  std::ofstream f(out_dir / "dataset.json");
  f << summary.dump(2) << "\n";
  return summary;
}

std::vector<data::ClipRecord> load_clips(const std::filesystem::path& dataset_dir,
                                         const std::vector<std::string>& ids) {
  std::vector<data::ClipRecord> out;
  out.reserve(ids.size());
  for (const auto& id : ids) out.push_back(data::read_clip(dataset_dir / id));
  return out;
}

// ------------------------------------------------------------ models

std::unique_ptr<ModelBundle> build_tracker_model(const json& cfg) {
  const auto seed = cfg.at("seed").get<std::uint64_t>();
  auto bundle = std::make_unique<ModelBundle>(rng::mix64(seed ^ rng::stream_id("init")));
  bundle->trk = std::make_unique<tracker::Tracker>(
      bundle->store, "tracker", config::encoder_config(cfg, "tracker"),
      config::tracker_config(cfg));
  return bundle;
}

std::unique_ptr<ModelBundle> build_seg_model(const json& cfg, const json& tracker_cfg) {
  const auto seed = cfg.at("seed").get<std::uint64_t>();
  auto bundle = std::make_unique<ModelBundle>(rng::mix64(seed ^ rng::stream_id("init")));
  bundle->trk = std::make_unique<tracker::Tracker>(
      bundle->store, "tracker", config::encoder_config(tracker_cfg, "tracker"),
      config::tracker_config(tracker_cfg));
  bundle->seg = std::make_unique<segmenter::Segmenter>(
      bundle->store, "segmenter", config::encoder_config(cfg, "segmenter"),
      config::fusion_config(cfg), bundle->trk->dim());
  return bundle;
}

// ------------------------------------------------------------ helpers

namespace {

Tensor gt_seed_points(const data::ClipRecord& rec) {
  const std::int64_t n = rec.tracks.n();
  Tensor pts(Shape{n, 2});
  for (std::int64_t i = 0; i < n; ++i) {
    pts[i * 2 + 0] = rec.tracks.positions.at({i, 0, 0});
    pts[i * 2 + 1] = rec.tracks.positions.at({i, 0, 1});
  }
  return pts;
}

segmenter::PointInputs run_frozen_tracker(const ModelBundle& model,
                                          const data::ClipRecord& rec) {
  const Tensor seeds =
      tracker::seed_points(model.trk->config(), rec.clip.h(), rec.clip.w());
  tracker::TrackerOutput out = model.trk->track(rec.clip.frames, seeds);
  segmenter::PointInputs pi;
  pi.positions = out.layer_positions.back();
  pi.visibility = out.visibility_binary;
  pi.tokens = out.point_tokens;
  return pi;
}

Tensor binary_final_mask(const segmenter::SegmenterOutput& out) {
  const Tensor& m = out.final_mask();  // [T,K,H,W]
  const std::int64_t T = m.dim(0), H = m.dim(2), W = m.dim(3);
  Tensor bin(Shape{T, H, W});
  for (std::int64_t t = 0; t < T; ++t)
    for (std::int64_t i = 0; i < H * W; ++i)
      bin[t * H * W + i] = m[t * m.dim(1) * H * W + i] >= 0.5 ? 1.0 : 0.0;
  return bin;
}

double cosine_lr(double base, int epoch, int total) {
  if (total <= 1) return base;
  return base * 0.5 *
         (1.0 + std::cos(std::numbers::pi * static_cast<double>(epoch) /
                         static_cast<double>(total)));
}

struct EpochLogger {
  std::ofstream file;
  explicit EpochLogger(const std::filesystem::path& p) : file(p) {
    if (!file) throw IoError("cannot write training log: " + p.string());
  }
  // Log lines carry no wall-clock content, so deterministic runs produce
  // bit-identical logs.
  void write(const json& j) { file << j.dump() << "\n" << std::flush; }
};

}  // namespace

// ------------------------------------------------------------ evaluation

TrackEval evaluate_tracker(const ModelBundle& model,
                           const std::vector<data::ClipRecord>& clips,
                           const std::vector<double>& thresholds) {
  TrackEval ev;
  double aj = 0, da = 0, oa = 0;
  for (const auto& rec : clips) {
    if (!rec.has_tracks()) throw ConfigError("tracking evaluation needs ground-truth tracks");
    tracker::TrackerOutput out = model.trk->track(rec.clip.frames, gt_seed_points(rec));
    const metrics::TapResult r =
        metrics::tap_metrics(out.layer_positions.back(), out.visibility_binary,
                             rec.tracks.positions, rec.tracks.visibility, thresholds);
    ev.per_clip.push_back(r);
    ev.clip_ids.push_back(rec.clip.id);
    aj += r.aj;
    da += r.delta_avg;
    oa += r.oa;
  }
  const auto n = static_cast<double>(clips.size());
  ev.mean = {aj / n, da / n, oa / n};
  return ev;
}

SegEval evaluate_segmenter(const ModelBundle& model,
                           const std::vector<data::ClipRecord>& clips) {
  SegEval ev;
  std::vector<double> dices, hds, stabs;
  int hd_missing = 0;
  for (const auto& rec : clips) {
    segmenter::PointInputs pi;
    const bool use_points = model.seg->config().use_points;
    if (use_points) pi = run_frozen_tracker(model, rec);
    const segmenter::SegmenterOutput out =
        model.seg->infer(rec.clip.frames, use_points ? &pi : nullptr);
    const Tensor pred = binary_final_mask(out);

    metrics::ClipMetrics cm;
    cm.id = rec.clip.id;
    cm.quality = rec.clip.quality;
    const std::int64_t T = pred.dim(0), H = pred.dim(1), W = pred.dim(2);
    double dice_acc = 0.0, hd_acc = 0.0;
    int hd_n = 0;
    for (std::int64_t t = 0; t < T; ++t) {
      Tensor p(Shape{H, W}), g(Shape{H, W});
      for (std::int64_t i = 0; i < H * W; ++i) {
        p[i] = pred[t * H * W + i];
        g[i] = rec.masks[t * H * W + i];
      }
      dice_acc += metrics::dice_score(p, g);
      const metrics::Hd95 h = metrics::hd95(p, g, rec.clip.pixel_spacing);
      if (h.defined) {
        hd_acc += h.value;
        ++hd_n;
      }
    }
    cm.mdice = 100.0 * dice_acc / static_cast<double>(T);
    if (hd_n > 0) cm.hd95 = hd_acc / static_cast<double>(hd_n);
    cm.stability = metrics::temporal_stability(pred);
    ev.per_clip.push_back(cm);
    dices.push_back(cm.mdice);
    if (cm.hd95)
      hds.push_back(*cm.hd95);
    else
      ++hd_missing;
    stabs.push_back(cm.stability);
  }
  ev.mdice = metrics::aggregate(dices);
  ev.hd95 = metrics::aggregate(hds, hd_missing);
  ev.stability = metrics::aggregate(stabs);
  return ev;
}

// ------------------------------------------------------------ training

TrainOutcome train_tracker(const std::filesystem::path& dataset_dir, const json& cfg,
                           const std::filesystem::path& out_dir) {
  const auto seed = cfg.at("seed").get<std::uint64_t>();
  const json& tr = cfg.at("train");
  const int epochs = tr.at("epochs").get<int>();
  const int min_epochs = tr.at("min_epochs").get<int>();
  const int patience = tr.at("patience").get<int>();
  const int accumulation = tr.at("accumulation").get<int>();
  if (accumulation < 1) throw ConfigError("train.accumulation must be >= 1");
  const double grad_clip = tr.at("grad_clip").get<double>();
  const std::string schedule = tr.at("lr_schedule").get<std::string>();

  const data::Splits splits = data::read_splits(dataset_dir);
  auto train_clips = load_clips(dataset_dir, splits.train);
  auto val_clips = load_clips(dataset_dir, splits.val);
  for (const auto& rec : train_clips)
    if (!rec.has_tracks())
      throw ConfigError("stage-1 training requires tracks; clip '" + rec.clip.id +
                        "' has none");

  auto model = build_tracker_model(cfg);
  AdamW opt(model->store, config::adamw_config(cfg));

  tracker::TrackingLossWeights lw;
  lw.visibility = cfg.at("loss").at("tracking_visibility_weight").get<double>();
  lw.layer = cfg.at("loss").at("tracking_layer_weights").get<std::vector<double>>();
  lw.mask_by_gt_visibility = cfg.at("loss").at("tracking_mask_by_visibility").get<bool>();

  std::filesystem::create_directories(out_dir);
  EpochLogger log(out_dir / "train_log.jsonl");
  TrainOutcome outcome;
  outcome.log_path = out_dir / "train_log.jsonl";
  outcome.best_checkpoint = out_dir / "checkpoint_best.ckpt";
  outcome.last_checkpoint = out_dir / "checkpoint_last.ckpt";

  double best = -1.0;
  int since_best = 0;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    if (schedule == "cosine") opt.set_lr(cosine_lr(config::adamw_config(cfg).lr, epoch, epochs));
    const auto order = rng::permutation(rng::Stream(seed, "shuffle", static_cast<std::uint64_t>(epoch)),
                                        train_clips.size());
    model->store.zero_grad();
    int group = 0;
    double ep_loss = 0, ep_pos = 0, ep_vis = 0;
    for (std::size_t k = 0; k < order.size(); ++k) {
      const data::ClipRecord& rec = train_clips[order[k]];
      ag::Tape tape;
      tracker::TrackerForward fwd =
          model->trk->forward(tape, rec.clip.frames, gt_seed_points(rec));
      tracker::TrackingLoss loss = tracking_loss(fwd, rec.tracks, lw);
      tape.backward(loss.total);
      ep_loss += loss.total.val()[0];
      ep_pos += loss.position_term;
      ep_vis += loss.visibility_term;
      ++group;
      if (group == accumulation || k + 1 == order.size()) {
        opt.scale_grads(1.0 / static_cast<double>(group));
        opt.clip_global_norm(grad_clip);
        opt.step();
        model->store.zero_grad();
        group = 0;
      }
    }
    const auto n_train = static_cast<double>(train_clips.size());
    const TrackEval val = evaluate_tracker(*model, val_clips);

    json line;
    line["stage"] = "tracker";
    line["epoch"] = epoch;
    line["train"] = {{"loss", ep_loss / n_train},
                     {"position", ep_pos / n_train},
                     {"visibility", ep_vis / n_train}};
    line["val"] = {{"aj", val.mean.aj}, {"delta_avg", val.mean.delta_avg}, {"oa", val.mean.oa}};
    log.write(line);

    CheckpointMeta meta;
    meta.stage = "tracker";
    meta.epoch = epoch;
    meta.config = cfg;
    meta.rng = {{"seed", seed}, {"epoch", epoch}};
    if (val.mean.delta_avg > best) {
      best = val.mean.delta_avg;
      since_best = 0;
      meta.best_metric = best;
      save_checkpoint(outcome.best_checkpoint, meta, model->store, &opt);
    } else {
      ++since_best;
    }
    meta.best_metric = best;
    if ((epoch + 1) % tr.at("checkpoint_every").get<int>() == 0 || epoch + 1 == epochs)
      save_checkpoint(outcome.last_checkpoint, meta, model->store, &opt);
    outcome.epochs_run = epoch + 1;
    if (epoch + 1 >= min_epochs && since_best > patience) break;
  }
  outcome.best_metric = best;
  if (!std::filesystem::exists(outcome.last_checkpoint))
    std::filesystem::copy_file(outcome.best_checkpoint, outcome.last_checkpoint);
  return outcome;
}

TrainOutcome train_segmenter(const std::filesystem::path& dataset_dir,
                             const std::filesystem::path& tracker_checkpoint,
                             const json& cfg, const std::filesystem::path& out_dir) {
  const LoadedCheckpoint ck = load_checkpoint(tracker_checkpoint);
  if (ck.meta.stage != "tracker")
    throw StageError("stage-2 training requires a tracker checkpoint, got stage '" +
                     ck.meta.stage + "'");

  const auto seed = cfg.at("seed").get<std::uint64_t>();
  const json& tr = cfg.at("train");
  const int epochs = tr.at("epochs").get<int>();
  const int min_epochs = tr.at("min_epochs").get<int>();
  const int patience = tr.at("patience").get<int>();
  const int accumulation = tr.at("accumulation").get<int>();
  const double grad_clip = tr.at("grad_clip").get<double>();
  const std::string schedule = tr.at("lr_schedule").get<std::string>();
  const bool joint = tr.at("joint_tracking").get<bool>();
  const auto annotated = tr.at("annotated_frames").get<std::vector<std::int64_t>>();

  const data::Splits splits = data::read_splits(dataset_dir);
  auto train_clips = load_clips(dataset_dir, splits.train);
  auto val_clips = load_clips(dataset_dir, splits.val);
  for (const auto& rec : train_clips)
    if (!rec.has_masks())
      throw ConfigError("stage-2 training requires masks; clip '" + rec.clip.id + "' has none");

  auto model = build_seg_model(cfg, ck.meta.config);
  restore_params(ck, model->store, "tracker");
  if (!joint) model->store.set_trainable("tracker", false);

  TrainOutcome outcome;
  outcome.frozen_hash_before = model->store.content_hash("tracker");

  AdamW opt(model->store, config::adamw_config(cfg));
  const losses::LossWeights lw = config::loss_weights(cfg);
  if (static_cast<int>(lw.mask_layer.size()) != model->seg->config().layers)
    throw ConfigError("loss.mask_layer_weights count must equal fusion.layers");

  // The frozen tracker's outputs per clip are constants; compute them once.
  std::vector<segmenter::PointInputs> train_pts(train_clips.size());
  const bool use_points = model->seg->config().use_points;
  if (use_points && !joint)
    for (std::size_t i = 0; i < train_clips.size(); ++i)
      train_pts[i] = run_frozen_tracker(*model, train_clips[i]);

  std::filesystem::create_directories(out_dir);
  EpochLogger log(out_dir / "train_log.jsonl");
  outcome.log_path = out_dir / "train_log.jsonl";
  outcome.best_checkpoint = out_dir / "checkpoint_best.ckpt";
  outcome.last_checkpoint = out_dir / "checkpoint_last.ckpt";

  double best = -1.0;
  int since_best = 0;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    if (schedule == "cosine") opt.set_lr(cosine_lr(config::adamw_config(cfg).lr, epoch, epochs));
    const auto order = rng::permutation(rng::Stream(seed, "shuffle", static_cast<std::uint64_t>(epoch)),
                                        train_clips.size());
    model->store.zero_grad();
    int group = 0;
    double ep_mask = 0, ep_temp = 0;
    for (std::size_t k = 0; k < order.size(); ++k) {
      const std::size_t ci = order[k];
      const data::ClipRecord& rec = train_clips[ci];
      ag::Tape tape;
      ag::Var total;
      if (joint && use_points) {
        const Tensor seeds =
            tracker::seed_points(model->trk->config(), rec.clip.h(), rec.clip.w());
        tracker::TrackerForward tf = model->trk->forward(tape, rec.clip.frames, seeds);
        segmenter::PointInputs pi;
        pi.positions = tf.layer_positions.back().val().clone();
        pi.visibility = Tensor(Shape{pi.positions.dim(0), pi.positions.dim(1)});
        for (std::int64_t i = 0; i < pi.visibility.numel(); ++i)
          pi.visibility[i] =
              1.0 / (1.0 + std::exp(-tf.visibility_logits.val()[i])) >=
                      model->trk->config().vis_threshold
                  ? 1.0
                  : 0.0;
        pi.tokens = tf.point_tokens.val().clone();
        segmenter::SegmenterForward sf = model->seg->forward(tape, rec.clip.frames, &pi);
        losses::MaskLoss ml = losses::mask_loss(sf.layer_masks, rec.masks, annotated, lw);
        losses::TemporalLoss tl = losses::temporal_loss_joint(
            sf.layer_masks, tf.layer_positions, pi.visibility, lw,
            rng::mix64(seed ^ static_cast<std::uint64_t>(epoch * 100003 + static_cast<int>(ci))));
        total = tl.total.defined() ? ag::add(ml.total, tl.total) : ml.total;
        ep_mask += ml.total.val()[0];
        ep_temp += tl.value;
      } else {
        segmenter::SegmenterForward sf =
            model->seg->forward(tape, rec.clip.frames, use_points ? &train_pts[ci] : nullptr);
        losses::MaskLoss ml = losses::mask_loss(sf.layer_masks, rec.masks, annotated, lw);
        total = ml.total;
        ep_mask += ml.total.val()[0];
        if (use_points && lw.temporal > 0.0) {
          losses::TemporalLoss tl = losses::temporal_loss(
              sf.layer_masks, train_pts[ci].positions, train_pts[ci].visibility, lw,
              rng::mix64(seed ^ static_cast<std::uint64_t>(epoch * 100003 + static_cast<int>(ci))));
          if (tl.total.defined()) total = ag::add(total, tl.total);
          ep_temp += tl.value;
        }
      }
      tape.backward(total);
      ++group;
      if (group == accumulation || k + 1 == order.size()) {
        opt.scale_grads(1.0 / static_cast<double>(group));
        opt.clip_global_norm(grad_clip);
        opt.step();
        model->store.zero_grad();
        group = 0;
      }
    }
    const auto n_train = static_cast<double>(train_clips.size());
    const SegEval val = evaluate_segmenter(*model, val_clips);

    json line;
    line["stage"] = "segmenter";
    line["epoch"] = epoch;
    line["train"] = {{"mask_loss", ep_mask / n_train}, {"temporal_loss", ep_temp / n_train}};
    line["val"] = {{"mdice", val.mdice.mean},
                   {"hd95", val.hd95.count > 0 ? val.hd95.mean : -1.0},
                   {"stability", val.stability.mean}};
    log.write(line);

    CheckpointMeta meta;
    meta.stage = "segmenter";
    meta.epoch = epoch;
    meta.config = cfg;
    meta.rng = {{"seed", seed}, {"epoch", epoch}};
    if (val.mdice.mean > best) {
      best = val.mdice.mean;
      since_best = 0;
      meta.best_metric = best;
      save_checkpoint(outcome.best_checkpoint, meta, model->store, &opt);
    } else {
      ++since_best;
    }
    meta.best_metric = best;
    if ((epoch + 1) % tr.at("checkpoint_every").get<int>() == 0 || epoch + 1 == epochs)
      save_checkpoint(outcome.last_checkpoint, meta, model->store, &opt);
    outcome.epochs_run = epoch + 1;
    if (epoch + 1 >= min_epochs && since_best > patience) break;
  }
  outcome.best_metric = best;
  outcome.frozen_hash_after = model->store.content_hash("tracker");
  if (!joint && outcome.frozen_hash_before != outcome.frozen_hash_after)
    throw Error(ErrorCategory::numeric, "frozen tracker parameters changed during stage 2");
  if (!std::filesystem::exists(outcome.last_checkpoint))
    std::filesystem::copy_file(outcome.best_checkpoint, outcome.last_checkpoint);
  return outcome;
}

// ------------------------------------------------------------ reports

namespace {

json seg_report_json(const SegEval& ev, const json& cfg, const std::string& split) {
  json per_clip = json::array();
  for (const auto& cm : ev.per_clip) {
    json j;
    j["id"] = cm.id;
    j["quality"] = data::quality_name(cm.quality);
    j["mdice"] = cm.mdice;
    if (cm.hd95)
      j["hd95"] = *cm.hd95;
    else
      j["hd95"] = nullptr;
    j["stability"] = cm.stability;
    per_clip.push_back(j);
  }
  auto stratum = [&](data::Quality q) {
    std::vector<double> d, h;
    int miss = 0;
    for (const auto& cm : ev.per_clip) {
      if (cm.quality != q) continue;
      d.push_back(cm.mdice);
      if (cm.hd95)
        h.push_back(*cm.hd95);
      else
        ++miss;
    }
    const auto da = metrics::aggregate(d);
    const auto ha = metrics::aggregate(h, miss);
    json s;
    s["count"] = da.count;
    s["mdice_mean"] = da.mean;
    s["mdice_std"] = da.stddev;
    s["hd95_mean"] = ha.count ? ha.mean : -1.0;
    s["hd95_std"] = ha.stddev;
    s["hd95_missing"] = ha.missing;
    return s;
  };
  json rep;
  rep["stage"] = "segmenter";
  rep["split"] = split;
  rep["config"] = cfg;
  rep["per_clip"] = per_clip;
  rep["aggregate"] = {{"mdice_mean", ev.mdice.mean},
                      {"mdice_std", ev.mdice.stddev},
                      {"hd95_mean", ev.hd95.count ? ev.hd95.mean : -1.0},
                      {"hd95_std", ev.hd95.stddev},
                      {"hd95_missing", ev.hd95.missing},
                      {"stability_mean", ev.stability.mean},
                      {"clips", static_cast<int>(ev.per_clip.size())}};
  rep["stratified"] = {{"good_medium", stratum(data::Quality::good_medium)},
                       {"poor", stratum(data::Quality::poor)}};
  return rep;
}

// Per-stratum paired t-tests against a comparison report, matched by id.
json compare_p_values(const json& rep, const json& other) {
  auto collect = [](const json& r) {
    std::map<std::string, std::pair<double, double>> out;  // id -> (mdice, hd95)
    for (const auto& c : r.at("per_clip"))
      out[c.at("id").get<std::string>()] = {
          c.at("mdice").get<double>(),
          c.at("hd95").is_null() ? -1.0 : c.at("hd95").get<double>()};
    return out;
  };
  const auto a = collect(rep), b = collect(other);
  auto stratum_p = [&](const std::string& quality) {
    std::vector<double> da, db, ha, hb;
    for (const auto& c : rep.at("per_clip")) {
      const std::string id = c.at("id").get<std::string>();
      if (c.at("quality").get<std::string>() != quality) continue;
      const auto bi = b.find(id);
      if (bi == b.end()) continue;
      da.push_back(a.at(id).first);
      db.push_back(bi->second.first);
      if (a.at(id).second >= 0.0 && bi->second.second >= 0.0) {
        ha.push_back(a.at(id).second);
        hb.push_back(bi->second.second);
      }
    }
    json out;
    out["pairs"] = da.size();
    out["mdice_p"] = da.size() >= 2 ? metrics::paired_t_test(da, db) : -1.0;
    out["hd95_p"] = ha.size() >= 2 ? metrics::paired_t_test(ha, hb) : -1.0;
    return out;
  };
  return json{{"good_medium", stratum_p("good_medium")}, {"poor", stratum_p("poor")}};
}

std::string format_p(double p) {
  if (p < 0.0) return "-";
  return p < 0.05 ? "p<0.05" : "p>=0.05";
}

std::string seg_table(const json& rep, const json* pvals) {
  auto cell = [&](const json& s, const char* mkey, const char* skey, int prec) {
    metrics::Aggregate a;
    a.mean = s.at(mkey).get<double>();
    a.stddev = s.at(skey).get<double>();
    a.count = s.at("count").get<int>();
    if (a.mean < 0.0) return std::string("-");
    return metrics::mean_std(a, prec);
  };
  const json& gm = rep.at("stratified").at("good_medium");
  const json& po = rep.at("stratified").at("poor");
  std::ostringstream os;
  os << "                     Good/Medium Quality         Poor Quality\n";
  os << "Method           mDice^      HD95v         mDice^      HD95v\n";
  os << "---------------------------------------------------------------\n";
  os << "pointseg         " << std::setw(11) << std::left << cell(gm, "mdice_mean", "mdice_std", 1)
     << " " << std::setw(13) << std::left << cell(gm, "hd95_mean", "hd95_std", 1)
     << " " << std::setw(11) << std::left << cell(po, "mdice_mean", "mdice_std", 1)
     << " " << std::setw(10) << std::left << cell(po, "hd95_mean", "hd95_std", 1) << "\n";
  if (pvals) {
    os << "p-value          " << std::setw(11) << std::left
       << format_p(pvals->at("good_medium").at("mdice_p").get<double>()) << " " << std::setw(13)
       << std::left << format_p(pvals->at("good_medium").at("hd95_p").get<double>()) << " "
       << std::setw(11) << std::left << format_p(pvals->at("poor").at("mdice_p").get<double>())
       << " " << std::setw(10) << std::left
       << format_p(pvals->at("poor").at("hd95_p").get<double>()) << "\n";
  }
  return os.str();
}

}  // namespace

EvalReport evaluate_checkpoint(const std::filesystem::path& checkpoint,
                               const std::filesystem::path& dataset_dir,
                               const std::string& split,
                               const std::filesystem::path& compare_report) {
  const LoadedCheckpoint ck = load_checkpoint(checkpoint);
  const data::Splits splits = data::read_splits(dataset_dir);
  const std::vector<std::string>* ids = nullptr;
  if (split == "train")
    ids = &splits.train;
  else if (split == "val")
    ids = &splits.val;
  else if (split == "test")
    ids = &splits.test;
  else
    throw ConfigError("split must be train/val/test, got '" + split + "'");
  const auto clips = load_clips(dataset_dir, *ids);

  EvalReport out;
  if (ck.meta.stage == "tracker") {
    auto model = build_tracker_model(ck.meta.config);
    restore_params(ck, model->store);
    const TrackEval ev = evaluate_tracker(*model, clips);
    json per_clip = json::array();
    for (std::size_t i = 0; i < ev.per_clip.size(); ++i)
      per_clip.push_back({{"id", ev.clip_ids[i]},
                          {"aj", ev.per_clip[i].aj},
                          {"delta_avg", ev.per_clip[i].delta_avg},
                          {"oa", ev.per_clip[i].oa}});
    out.report = {{"stage", "tracker"},
                  {"split", split},
                  {"config", ck.meta.config},
                  {"per_clip", per_clip},
                  {"aggregate",
                   {{"aj", ev.mean.aj}, {"delta_avg", ev.mean.delta_avg}, {"oa", ev.mean.oa}}}};
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(3);
    os << "Method           AJ^     <d_avg^  OA^\n";
    os << "--------------------------------------\n";
    os << "pointseg         " << ev.mean.aj << "   " << ev.mean.delta_avg << "    " << ev.mean.oa
       << "\n";
    out.table = os.str();
    return out;
  }

  if (ck.meta.stage != "segmenter")
    throw StageError("cannot evaluate checkpoint of stage '" + ck.meta.stage + "'");
  auto model = build_seg_model(ck.meta.config, ck.meta.config);
  restore_params(ck, model->store);
  const SegEval ev = evaluate_segmenter(*model, clips);
  out.report = seg_report_json(ev, ck.meta.config, split);
  if (!compare_report.empty()) {
    std::ifstream cf(compare_report);
    if (!cf) throw IoError("cannot open comparison report: " + compare_report.string());
    json other;
    try {
      cf >> other;
    } catch (const json::exception& e) {
      throw FormatError("comparison report: " + std::string(e.what()));
    }
    const json p = compare_p_values(out.report, other);
    out.report["p_values_vs_compare"] = p;
    out.table = seg_table(out.report, &p);
  } else {
    out.table = seg_table(out.report, nullptr);
  }
  return out;
}

namespace {

const std::vector<std::string>* split_ids(const data::Splits& splits,
                                          const std::string& split) {
  if (split == "train") return &splits.train;
  if (split == "val") return &splits.val;
  if (split == "test") return &splits.test;
  throw ConfigError("split must be train/val/test, got '" + split + "'");
}

json maybe_compare(json& report, std::string& table,
                   const std::filesystem::path& compare_report) {
  if (compare_report.empty()) {
    table = seg_table(report, nullptr);
    return {};
  }
  std::ifstream cf(compare_report);
  if (!cf) throw IoError("cannot open comparison report: " + compare_report.string());
  json other;
  try {
    cf >> other;
  } catch (const json::exception& e) {
    throw FormatError("comparison report: " + std::string(e.what()));
  }
  const json p = compare_p_values(report, other);
  report["p_values_vs_compare"] = p;
  table = seg_table(report, &p);
  return p;
}

}  // namespace

EvalReport evaluate_predictions(const std::filesystem::path& predictions_dir,
                                const std::filesystem::path& dataset_dir,
                                const std::string& split,
                                const std::filesystem::path& compare_report) {
  const data::Splits splits = data::read_splits(dataset_dir);
  const auto* ids = split_ids(splits, split);

  SegEval ev;
  std::vector<double> dices, hds, stabs;
  int hd_missing = 0;
  for (const auto& id : *ids) {
    const data::ClipRecord gt = data::read_clip(dataset_dir / id);
    if (!gt.has_masks())
      throw ConfigError("ground-truth clip '" + id + "' carries no masks");
    const data::ClipRecord pred = data::read_clip(predictions_dir / id);
    if (!pred.has_masks())
      throw FormatError("prediction clip '" + id + "' carries no masks");
    if (pred.masks.shape() != gt.masks.shape())
      throw FormatError("prediction dims for '" + id + "' disagree with ground truth");

    metrics::ClipMetrics cm;
    cm.id = id;
    cm.quality = gt.clip.quality;
    const std::int64_t T = gt.masks.dim(0), H = gt.masks.dim(1), W = gt.masks.dim(2);
    double dice_acc = 0.0, hd_acc = 0.0;
    int hd_n = 0;
    for (std::int64_t t = 0; t < T; ++t) {
      Tensor p(Shape{H, W}), g(Shape{H, W});
      for (std::int64_t i = 0; i < H * W; ++i) {
        p[i] = pred.masks[t * H * W + i];
        g[i] = gt.masks[t * H * W + i];
      }
      dice_acc += metrics::dice_score(p, g);
      const metrics::Hd95 h = metrics::hd95(p, g, gt.clip.pixel_spacing);
      if (h.defined) {
        hd_acc += h.value;
        ++hd_n;
      }
    }
    cm.mdice = 100.0 * dice_acc / static_cast<double>(T);
    if (hd_n > 0) cm.hd95 = hd_acc / static_cast<double>(hd_n);
    cm.stability = T >= 2 ? metrics::temporal_stability(pred.masks) : 0.0;
    ev.per_clip.push_back(cm);
    dices.push_back(cm.mdice);
    if (cm.hd95)
      hds.push_back(*cm.hd95);
    else
      ++hd_missing;
    stabs.push_back(cm.stability);
  }
  ev.mdice = metrics::aggregate(dices);
  ev.hd95 = metrics::aggregate(hds, hd_missing);
  ev.stability = metrics::aggregate(stabs);

  EvalReport out;
  out.report = seg_report_json(ev, json{{"predictions", predictions_dir.string()}}, split);
  maybe_compare(out.report, out.table, compare_report);
  return out;
}

// ------------------------------------------------------------ ablation

AblationResult run_ablation(const std::filesystem::path& dataset_dir,
                            const std::filesystem::path& tracker_checkpoint,
                            const json& cfg, const std::filesystem::path& out_dir) {
  struct Row {
    bool points, mlp, sa, tsa;
  };
  // Toggle patterns in the published order; the last row is the reference.
  const std::vector<Row> rows = {
      {false, false, false, false},
      {true, false, false, false},
      {true, true, false, false},
      {true, true, true, false},
      {true, true, true, true},
  };

  const data::Splits splits = data::read_splits(dataset_dir);
  const auto test_clips = load_clips(dataset_dir, splits.test);

  json table = json::array();
  std::vector<std::vector<double>> per_row_dice;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    json row_cfg = cfg;
    row_cfg["fusion"]["use_points"] = rows[r].points;
    row_cfg["fusion"]["use_mlp"] = rows[r].mlp;
    row_cfg["fusion"]["use_point_sa"] = rows[r].sa;
    row_cfg["fusion"]["use_point_tsa"] = rows[r].tsa;
    const auto row_dir = out_dir / ("row" + std::to_string(r));
    const TrainOutcome t = train_segmenter(dataset_dir, tracker_checkpoint, row_cfg, row_dir);

    const LoadedCheckpoint ck = load_checkpoint(t.best_checkpoint);
    auto model = build_seg_model(ck.meta.config, ck.meta.config);
    restore_params(ck, model->store);
    const SegEval ev = evaluate_segmenter(*model, test_clips);

    std::vector<double> dices;
    for (const auto& cm : ev.per_clip) dices.push_back(cm.mdice);
    per_row_dice.push_back(dices);

    json jr;
    jr["points"] = rows[r].points;
    jr["point_to_patch_ca"] = true;  // present in every configuration
    jr["mlp"] = rows[r].mlp;
    jr["point_sa"] = rows[r].sa;
    jr["point_tsa"] = rows[r].tsa;
    jr["mdice"] = ev.mdice.mean;
    jr["hd95"] = ev.hd95.count ? ev.hd95.mean : -1.0;
    jr["reference"] = r + 1 == rows.size();
    jr["config_hash"] = config::config_hash(row_cfg);
    jr["checkpoint"] = t.best_checkpoint.string();
    table.push_back(jr);
  }
  // p-values vs the reference (last) row
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (r + 1 == rows.size()) {
      table[r]["p_value"] = nullptr;
      continue;
    }
    table[r]["p_value"] = metrics::paired_t_test(per_row_dice[r], per_row_dice.back());
  }

  std::ostringstream os;
  os << "Points  P2P-CA  MLP  PointSA  PointTSA |  mDice^   HD95v   p-value\n";
  os << "-------------------------------------------------------------------\n";
  auto mark = [](bool b) { return b ? "x" : "-"; };
  os.setf(std::ios::fixed);
  for (const auto& jr : table) {
    os.precision(2);
    os << "  " << mark(jr["points"]) << "       x     " << mark(jr["mlp"]) << "      "
       << mark(jr["point_sa"]) << "        " << mark(jr["point_tsa"]) << "    |  "
       << std::setw(6) << jr["mdice"].get<double>() << "  " << std::setw(6)
       << jr["hd95"].get<double>() << "   "
       << (jr["p_value"].is_null() ? std::string("-")
                                   : format_p(jr["p_value"].get<double>()))
       << (jr["reference"].get<bool>() ? "  (reference)" : "") << "\n";
  }

  AblationResult out;
  out.table = table;
  out.text = os.str();
  std::ofstream jf(out_dir / "ablation.json");
  jf << table.dump(2) << "\n";
  std::ofstream tf(out_dir / "ablation.txt");
  tf << os.str();
  return out;
}

// ------------------------------------------------------------ inference

void infer_clip(const std::filesystem::path& checkpoint,
                const std::filesystem::path& clip_dir,
                const std::filesystem::path& out_dir) {
  const LoadedCheckpoint ck = load_checkpoint(checkpoint);
  if (ck.meta.stage != "segmenter")
    throw StageError("inference requires a segmenter checkpoint, got stage '" +
                     ck.meta.stage + "'");
  auto model = build_seg_model(ck.meta.config, ck.meta.config);
  restore_params(ck, model->store);

  const data::ClipRecord rec = data::read_clip(clip_dir);
  segmenter::PointInputs pi;
  const bool use_points = model->seg->config().use_points;
  tracker::TrackerOutput trk_out;
  if (use_points) {
    const Tensor seeds =
        tracker::seed_points(model->trk->config(), rec.clip.h(), rec.clip.w());
    trk_out = model->trk->track(rec.clip.frames, seeds);
    pi.positions = trk_out.layer_positions.back();
    pi.visibility = trk_out.visibility_binary;
    pi.tokens = trk_out.point_tokens;
  }
  const segmenter::SegmenterOutput out =
      model->seg->infer(rec.clip.frames, use_points ? &pi : nullptr);
  const Tensor pred = binary_final_mask(out);

  std::filesystem::create_directories(out_dir);
  data::ClipRecord pred_rec;
  pred_rec.clip = rec.clip;
  pred_rec.masks = pred;
  if (use_points) {
    pred_rec.tracks.positions = pi.positions.clone();
    data::quantize_f32(pred_rec.tracks.positions);
    pred_rec.tracks.visibility = pi.visibility;
    pred_rec.tracks.point_ids.resize(static_cast<std::size_t>(pi.positions.dim(0)));
    for (std::size_t i = 0; i < pred_rec.tracks.point_ids.size(); ++i)
      pred_rec.tracks.point_ids[i] = static_cast<int>(i);
  }
  data::write_clip(pred_rec, out_dir / "prediction");

  const std::int64_t T = pred.dim(0), H = pred.dim(1), W = pred.dim(2);
  for (std::int64_t t = 0; t < T; ++t) {
    Tensor frame(Shape{H, W}), p(Shape{H, W}), g;
    for (std::int64_t i = 0; i < H * W; ++i) {
      frame[i] = rec.clip.frames[t * H * W + i];
      p[i] = pred[t * H * W + i];
    }
    if (rec.has_masks()) {
      g = Tensor(Shape{H, W});
      for (std::int64_t i = 0; i < H * W; ++i) g[i] = rec.masks[t * H * W + i];
    }
    const auto rgb = png::overlay_rgb(frame, p, g);
    std::ostringstream name;
    name << "overlay_" << std::setw(3) << std::setfill('0') << t << ".png";
    png::write_rgb(out_dir / name.str(), rgb, W, H);
  }
}

}  // namespace pointseg::train
