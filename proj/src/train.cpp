#include "bimii/train.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;

namespace bimii {

Optimizer::Optimizer(std::vector<ParamT<float>*> params, double lr_in, double weight_decay_in)
    : lr(lr_in), weight_decay(weight_decay_in), params_(std::move(params)) {
  for (ParamT<float>* p : params_) second_moment_.push_back(Tensor::zeros(p->value.shape));
}

void Optimizer::zero_grad() {
  for (ParamT<float>* p : params_) p->zero_grad();
}

double Optimizer::global_grad_norm() const {
  double acc = 0.0;
  for (const ParamT<float>* p : params_)
    for (float g : p->grad.data) acc += (double)g * g;
  return std::sqrt(acc);
}

void Optimizer::clip_global_norm(double max_norm) {
  double norm = global_grad_norm();
  if (norm <= max_norm || norm == 0.0) return;
  float scale = (float)(max_norm / norm);
  for (ParamT<float>* p : params_)
    for (float& g : p->grad.data) g *= scale;
}

void Optimizer::step() {
  ++t_;
  double bias = 1.0 - std::pow(beta2, (double)t_);
  for (size_t i = 0; i < params_.size(); ++i) {
    ParamT<float>* p = params_[i];
    Tensor& v = second_moment_[i];
    for (int64_t j = 0; j < p->value.numel(); ++j) {
      double g = p->grad.data[(size_t)j];
      double vj = beta2 * v.data[(size_t)j] + (1.0 - beta2) * g * g;
      v.data[(size_t)j] = (float)vj;
      double vhat = vj / bias;
      double update = g / (std::sqrt(vhat) + eps) + weight_decay * p->value.data[(size_t)j];
      p->value.data[(size_t)j] = (float)(p->value.data[(size_t)j] - lr * update);
    }
  }
}

namespace {

const char* kComponentNames[7] = {"bin1", "bin2", "bin3", "bou1", "bou2", "bou3", "se"};

struct Batch {
  Tensor rgb;      // B,3,H,W
  Tensor thermal;  // B,1,H,W
  SupervisionTargets targets;  // B,H,W maps
};

LabelMap resize_labels_nearest(const LabelMap& in, int th, int tw) {
  int H = in.shape[0], W = in.shape[1];
  LabelMap out({th, tw});
  for (int y = 0; y < th; ++y)
    for (int x = 0; x < tw; ++x) {
      int sy = std::min(H - 1, (int)(((double)y + 0.5) * H / th));
      int sx = std::min(W - 1, (int)(((double)x + 0.5) * W / tw));
      out.data[(size_t)(y * tw + x)] = in.data[(size_t)(sy * W + sx)];
    }
  return out;
}

Tensor resize_chw_bilinear(const Tensor& chw, int th, int tw) {
  Tape t;
  int x = t.leaf(Tensor({1, chw.dim(0), chw.dim(1), chw.dim(2)}, chw.data));
  int y = t.resize_bilinear(x, th, tw);
  return Tensor({chw.dim(0), th, tw}, t.val(y).data);
}

struct AugmentedSample {
  Tensor rgb, thermal;
  LabelMap labels;
};

// Random 0.75-side crop resized back, then an even-odds horizontal flip.
AugmentedSample augment(const SceneSample& s, std::mt19937& rng, bool crop, bool hflip) {
  AugmentedSample out{s.rgb, s.thermal, s.labels};
  int H = s.labels.shape[0], W = s.labels.shape[1];
  if (crop) {
    int ch = std::max(1, (int)std::lround(0.75 * H));
    int cw = std::max(1, (int)std::lround(0.75 * W));
    int oy = (int)(rng() % (uint32_t)(H - ch + 1));
    int ox = (int)(rng() % (uint32_t)(W - cw + 1));
    auto crop_chw = [&](const Tensor& t) {
      Tensor c({t.dim(0), ch, cw});
      for (int cc = 0; cc < t.dim(0); ++cc)
        for (int y = 0; y < ch; ++y)
          for (int x = 0; x < cw; ++x)
            c.data[(size_t)((cc * ch + y) * cw + x)] =
                t.data[(size_t)((cc * H + oy + y) * W + ox + x)];
      return c;
    };
    LabelMap lc({ch, cw});
    for (int y = 0; y < ch; ++y)
      for (int x = 0; x < cw; ++x)
        lc.data[(size_t)(y * cw + x)] = s.labels.data[(size_t)((oy + y) * W + ox + x)];
    out.rgb = resize_chw_bilinear(crop_chw(s.rgb), H, W);
    out.thermal = resize_chw_bilinear(crop_chw(s.thermal), H, W);
    out.labels = resize_labels_nearest(lc, H, W);
  }
  if (hflip && rng() % 2 == 0) {
    auto flip_chw = [&](Tensor& t) {
      for (int c = 0; c < t.dim(0); ++c)
        for (int y = 0; y < H; ++y)
          for (int x = 0; x < W / 2; ++x)
            std::swap(t.data[(size_t)((c * H + y) * W + x)],
                      t.data[(size_t)((c * H + y) * W + (W - 1 - x))]);
    };
    flip_chw(out.rgb);
    flip_chw(out.thermal);
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W / 2; ++x)
        std::swap(out.labels.data[(size_t)(y * W + x)],
                  out.labels.data[(size_t)(y * W + (W - 1 - x))]);
  }
  return out;
}

Batch make_batch(const std::vector<AugmentedSample>& samples) {
  int B = (int)samples.size();
  int H = samples[0].labels.shape[0], W = samples[0].labels.shape[1];
  Batch b;
  b.rgb = Tensor({B, 3, H, W});
  b.thermal = Tensor({B, 1, H, W});
  b.targets.semantic = LabelMap({B, H, W});
  b.targets.binary = LabelMap({B, H, W});
  b.targets.boundary = LabelMap({B, H, W});
  int64_t plane = (int64_t)H * W;
  for (int i = 0; i < B; ++i) {
    std::copy(samples[(size_t)i].rgb.data.begin(), samples[(size_t)i].rgb.data.end(),
              b.rgb.data.begin() + (int64_t)i * 3 * plane);
    std::copy(samples[(size_t)i].thermal.data.begin(), samples[(size_t)i].thermal.data.end(),
              b.thermal.data.begin() + (int64_t)i * plane);
    SupervisionTargets t = make_targets(samples[(size_t)i].labels);
    std::copy(t.semantic.data.begin(), t.semantic.data.end(),
              b.targets.semantic.data.begin() + (int64_t)i * plane);
    std::copy(t.binary.data.begin(), t.binary.data.end(),
              b.targets.binary.data.begin() + (int64_t)i * plane);
    std::copy(t.boundary.data.begin(), t.boundary.data.end(),
              b.targets.boundary.data.begin() + (int64_t)i * plane);
  }
  return b;
}

struct StepLosses {
  double total;
  std::array<double, 7> components;
};

StepLosses train_step(BimiiNet& model, Optimizer& opt, const Batch& batch, int t_steps,
                      double clip_norm, int stage, int epoch) {
  Tape tape;
  CtxT<float> ctx{&tape, true, true};
  auto fwd = model.forward(ctx, tape.leaf(batch.rgb), tape.leaf(batch.thermal), t_steps);
  LossIds ids = compute_losses(ctx, fwd.dec, model.heads(), batch.targets, model.awl(),
                               model.loss_options());
  StepLosses out{};
  for (int k = 0; k < 7; ++k) {
    out.components[(size_t)k] =
        ids.components[(size_t)k] >= 0 ? (double)tape.val(ids.components[(size_t)k]).data[0] : 0.0;
    if (!std::isfinite(out.components[(size_t)k]))
      throw NumericError("loss component " + std::string(kComponentNames[k]) +
                         " is non-finite at stage " + std::to_string(stage) + " epoch " +
                         std::to_string(epoch));
  }
  out.total = (double)tape.val(ids.total).data[0];
  if (!std::isfinite(out.total))
    throw NumericError("total loss is non-finite at stage " + std::to_string(stage) + " epoch " +
                       std::to_string(epoch));
  opt.zero_grad();
  tape.backward(ids.total);
  if (clip_norm > 0) opt.clip_global_norm(clip_norm);
  opt.step();
  return out;
}

std::vector<EpochLog> run_stage(BimiiNet& model, const RunConfig& cfg, const StageConfig& stage,
                                int stage_index, const Dataset& dataset, std::mt19937& rng) {
  const auto& train_names = dataset.split("train");
  if (train_names.empty()) throw ContractError("train split is empty");
  std::vector<ParamT<float>*> trainable = model.params().trainable();
  Optimizer opt(trainable, stage.lr, stage.weight_decay);
  std::vector<EpochLog> logs;
  for (int epoch = 1; epoch <= stage.epochs; ++epoch) {
    std::vector<std::string> order = train_names;
    std::shuffle(order.begin(), order.end(), rng);
    EpochLog log;
    log.stage = stage_index;
    log.epoch = epoch;
    int steps = 0;
    for (size_t i = 0; i < order.size(); i += (size_t)stage.batch) {
      std::vector<AugmentedSample> samples;
      for (size_t j = i; j < std::min(order.size(), i + (size_t)stage.batch); ++j)
        samples.push_back(augment(dataset.get(order[j]), rng, cfg.aug_crop, cfg.aug_hflip));
      Batch batch = make_batch(samples);
      StepLosses losses =
          train_step(model, opt, batch, stage.t_steps, stage.clip_norm, stage_index, epoch);
      log.total += losses.total;
      for (int k = 0; k < 7; ++k) log.components[(size_t)k] += losses.components[(size_t)k];
      ++steps;
    }
    log.total /= steps;
    for (auto& c : log.components) c /= steps;
    logs.push_back(log);
    std::cout << "[stage " << stage_index << "] epoch " << epoch << "/" << stage.epochs
              << " loss " << log.total << "\n"
              << std::flush;
  }
  return logs;
}

void append_log_csv(const std::string& path, const std::vector<EpochLog>& logs, bool truncate) {
  std::ofstream f(path, truncate ? std::ios::trunc : std::ios::app);
  if (truncate) f << "stage,epoch,total,bin1,bin2,bin3,bou1,bou2,bou3,se\n";
  f.precision(10);
  for (const auto& l : logs) {
    f << l.stage << "," << l.epoch << "," << l.total;
    for (double c : l.components) f << "," << c;
    f << "\n";
  }
}

}  // namespace

TrainResult train(const RunConfig& cfg, const Dataset& dataset, const std::string& resume) {
  fs::create_directories(cfg.out_dir);
  BimiiNet model(cfg.model);

  int start_stage = 1;
  if (!resume.empty()) {
    LoadedCheckpoint ckpt = read_checkpoint(resume);
    load_into(model.params(), ckpt);
    start_stage = ckpt.meta.stage + 1;
    if (start_stage > 2) throw ContractError("resume checkpoint already finished stage 2");
  }

  // One deterministic stream drives shuffling and augmentation; model init
  // used cfg.seed already via ModelConfig::init_seed.
  std::mt19937 rng(cfg.seed + 0x5bd1e995u);

  TrainResult result;
  std::string log_path = (fs::path(cfg.out_dir) / "train_log.csv").string();
  bool fresh_log = true;
  for (int stage_index = start_stage; stage_index <= 2; ++stage_index) {
    const StageConfig& sc = stage_index == 1 ? cfg.stage1 : cfg.stage2;
    std::vector<EpochLog> logs = run_stage(model, cfg, sc, stage_index, dataset, rng);
    append_log_csv(log_path, logs, fresh_log);
    fresh_log = false;
    for (auto& l : logs) result.log.push_back(l);
    CheckpointMeta meta;
    meta.stage = stage_index;
    meta.epoch = sc.epochs;
    meta.seed = cfg.seed;
    meta.config_text = cfg.serialize();
    std::string out = (fs::path(cfg.out_dir) / ("stage" + std::to_string(stage_index) + ".ckpt"))
                          .string();
    save_checkpoint(out, model.params(), meta);
    result.final_checkpoint = out;
  }
  if (!result.log.empty()) {
    result.epoch1_loss = result.log.front().total;
    result.final_loss = result.log.back().total;
  }
  return result;
}

LabelMap argmax_labels(const Tensor& logits, int b) {
  int K = logits.dim(1), H = logits.dim(2), W = logits.dim(3);
  int64_t plane = (int64_t)H * W;
  LabelMap out({H, W});
  const float* base = logits.data.data() + (int64_t)b * K * plane;
  for (int64_t i = 0; i < plane; ++i) {
    int best = 0;
    float bv = base[i];
    for (int k = 1; k < K; ++k) {
      float v = base[(int64_t)k * plane + i];
      if (v > bv) {
        bv = v;
        best = k;
      }
    }
    out.data[(size_t)i] = best;
  }
  return out;
}

MetricsReport evaluate_model(const BimiiNet& model, const Dataset& dataset,
                             const std::string& split, int t_steps, const EvalOptions& opts) {
  ConfusionCounts counts(model.config().n_classes);
  for (const auto& base : dataset.split(split)) {
    const SceneSample& s = dataset.get(base);
    Tensor rgb({1, 3, s.rgb.dim(1), s.rgb.dim(2)}, s.rgb.data);
    Tensor thermal({1, 1, s.thermal.dim(1), s.thermal.dim(2)}, s.thermal.data);
    if (opts.zero_thermal_on_night && dataset.is_night(base)) thermal.fill(0.0f);
    Tensor logits = model.infer_logits(rgb, thermal, t_steps);
    counts.add(argmax_labels(logits, 0), s.labels);
  }
  return metrics_from_counts(counts);
}

BimiiNet model_from_checkpoint(const LoadedCheckpoint& ckpt, int* t_steps_out) {
  RunConfig cfg = RunConfig::parse_text(ckpt.meta.config_text);
  BimiiNet model(cfg.model);
  load_into(model.params(), ckpt);
  if (t_steps_out)
    *t_steps_out = ckpt.meta.stage >= 2 ? cfg.stage2.t_steps : cfg.stage1.t_steps;
  return model;
}

MetricsReport evaluate_checkpoint(const std::string& checkpoint_path, const std::string& data_root,
                                  const std::string& split, const std::string& out_csv,
                                  const EvalOptions& opts) {
  LoadedCheckpoint ckpt = read_checkpoint(checkpoint_path);
  int t_steps = 1;
  BimiiNet model = model_from_checkpoint(ckpt, &t_steps);
  Dataset dataset = Dataset::load(data_root, model.config().n_classes);
  MetricsReport report = evaluate_model(model, dataset, split, t_steps, opts);
  if (!out_csv.empty()) {
    std::ofstream f(out_csv, std::ios::trunc | std::ios::binary);
    if (!f) throw IoError("cannot write csv: " + out_csv);
    f << metrics_csv(report);
  }
  return report;
}

void infer_to_png(const std::string& checkpoint_path, const std::string& rgb_path,
                  const std::string& thermal_path, const std::string& out_png) {
  LoadedCheckpoint ckpt = read_checkpoint(checkpoint_path);
  int t_steps = 1;
  BimiiNet model = model_from_checkpoint(ckpt, &t_steps);
  const auto& cfg = model.config();

  Tensor rgb = image_to_tensor(read_png(rgb_path));
  Tensor thermal = image_to_tensor(read_png(thermal_path));
  if (rgb.dim(0) != 3) throw IoError("rgb image must have 3 channels: " + rgb_path);
  if (thermal.dim(0) != 1) throw IoError("thermal image must be single-channel: " + thermal_path);
  if (rgb.dim(1) != cfg.in_h || rgb.dim(2) != cfg.in_w)
    rgb = resize_chw_bilinear(rgb, cfg.in_h, cfg.in_w);
  if (thermal.dim(1) != cfg.in_h || thermal.dim(2) != cfg.in_w)
    thermal = resize_chw_bilinear(thermal, cfg.in_h, cfg.in_w);

  Tensor logits = model.infer_logits(Tensor({1, 3, cfg.in_h, cfg.in_w}, rgb.data),
                                     Tensor({1, 1, cfg.in_h, cfg.in_w}, thermal.data), t_steps);
  LabelMap pred = argmax_labels(logits, 0);

  ImageU8 color;
  color.width = cfg.in_w;
  color.height = cfg.in_h;
  color.channels = 3;
  color.data.resize((size_t)cfg.in_w * cfg.in_h * 3);
  ImageU8 ids;
  ids.width = cfg.in_w;
  ids.height = cfg.in_h;
  ids.channels = 1;
  ids.data.resize((size_t)cfg.in_w * cfg.in_h);
  for (int64_t i = 0; i < pred.numel(); ++i) {
    const uint8_t* c = palette_color(pred.data[(size_t)i]);
    color.data[(size_t)(3 * i)] = c[0];
    color.data[(size_t)(3 * i + 1)] = c[1];
    color.data[(size_t)(3 * i + 2)] = c[2];
    ids.data[(size_t)i] = (uint8_t)pred.data[(size_t)i];
  }
  write_png(out_png, color);
  std::string ids_path = out_png;
  size_t dot = ids_path.rfind('.');
  ids_path.insert(dot == std::string::npos ? ids_path.size() : dot, "_ids");
  write_png(ids_path, ids);
}

std::string dynamics_csv(const CcnnHyper& hyper, double input, int t_steps) {
  if (t_steps < 1) throw ContractError("dynamics: t_steps must be >= 1");
  ParamStoreT<double> store;
  std::mt19937 rng(0);
  CcnnHyper hp = hyper;
  hp.kernel = 1;  // scalar neuron: synapses collapse to one tap, zeroed below
  auto layer = CcnnLayerT<double>::make(store, "dyn", 1, hp, rng);
  layer.conv_m->value.fill(0.0);
  layer.conv_w->value.fill(0.0);

  std::ostringstream os;
  os.precision(12);
  os << "n,f,l,u,e,y\n";
  Tape64 tape;
  CtxT<double> ctx{&tape, false, false};
  CcnnStateIds s = state_to_ids(tape, CcnnStateT<double>::zero({1, 1, 1, 1}));
  int in = tape.leaf(Tensor64::full({1, 1, 1, 1}, input));
  for (int n = 1; n <= t_steps; ++n) {
    int u = -1;
    s = layer.step(ctx, s, in, &u);
    os << n << "," << tape.val(s.f).data[0] << "," << tape.val(s.l).data[0] << ","
       << tape.val(u).data[0] << "," << tape.val(s.e).data[0] << "," << tape.val(s.y).data[0]
       << "\n";
  }
  return os.str();
}

}  // namespace bimii
