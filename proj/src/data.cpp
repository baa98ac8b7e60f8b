#include "bimii/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

namespace fs = std::filesystem;

namespace bimii {

namespace {

// Distinct base hues; classes beyond the table rotate through it.
const float kHues[][3] = {
    {0.45f, 0.45f, 0.45f},  // background gray
    {0.85f, 0.20f, 0.20f}, {0.20f, 0.80f, 0.25f}, {0.20f, 0.35f, 0.90f},
    {0.90f, 0.80f, 0.20f}, {0.75f, 0.25f, 0.80f}, {0.25f, 0.85f, 0.85f},
    {0.95f, 0.55f, 0.20f}, {0.55f, 0.30f, 0.15f},
};
constexpr int kHueCount = (int)(sizeof(kHues) / sizeof(kHues[0]));

const uint8_t kPalette[][3] = {
    {0, 0, 0},      {230, 25, 75},  {60, 180, 75},   {0, 130, 200},  {255, 225, 25},
    {145, 30, 180}, {70, 240, 240}, {240, 50, 230},  {210, 245, 60}, {250, 190, 190},
    {0, 128, 128},  {170, 110, 40}, {128, 0, 0},     {0, 0, 128},    {128, 128, 0},
    {255, 255, 255},
};
constexpr int kPaletteCount = (int)(sizeof(kPalette) / sizeof(kPalette[0]));

float thermal_level(int cls, int n_classes) {
  if (cls == 0) return 0.15f;
  if (n_classes <= 2) return 0.9f;
  return 0.45f + 0.45f * (float)(cls - 1) / (float)(n_classes - 2);
}

}  // namespace

const uint8_t* palette_color(int cls) { return kPalette[cls % kPaletteCount]; }

SceneSample gen_synthetic_scene(uint32_t seed, int h, int w, int n_classes, double night_prob) {
  if (n_classes < 3) throw ContractError("gen_synthetic_scene: need >= 3 classes");
  if (h % 32 != 0 || w % 32 != 0)
    throw ContractError("gen_synthetic_scene: extents must be divisible by 32");
  std::mt19937 rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);

  SceneSample s;
  s.night = unif(rng) < night_prob;
  s.labels = LabelMap({h, w});

  int k_obj = n_classes - 1;
  auto distinct_classes = [&]() {
    int32_t first = s.labels.data[0];
    for (int32_t v : s.labels.data)
      if (v != first) return true;
    return false;
  };
  // Every object class gets one shape (class-balanced); retry the whole
  // layout in the unlikely case later shapes bury all earlier ones.
  do {
    std::fill(s.labels.data.begin(), s.labels.data.end(), 0);
    std::vector<int> classes;
    for (int c = 1; c <= k_obj; ++c) classes.push_back(c);
    std::shuffle(classes.begin(), classes.end(), rng);
    if (unif(rng) < 0.5) classes.push_back(1 + (int)(rng() % (uint32_t)k_obj));
    for (int cls : classes) {
      bool ellipse = unif(rng) < 0.5;
      int min_half = std::max(4, h / 8), max_half = std::max(min_half + 1, h / 4);
      int rh = min_half + (int)(rng() % (uint32_t)(max_half - min_half));
      int rw = min_half + (int)(rng() % (uint32_t)(max_half - min_half));
      int cy = rh + (int)(rng() % (uint32_t)std::max(1, h - 2 * rh));
      int cx = rw + (int)(rng() % (uint32_t)std::max(1, w - 2 * rw));
      for (int y = std::max(0, cy - rh); y < std::min(h, cy + rh); ++y)
        for (int x = std::max(0, cx - rw); x < std::min(w, cx + rw); ++x) {
          if (ellipse) {
            double dy = (y - cy) / (double)rh, dx = (x - cx) / (double)rw;
            if (dy * dy + dx * dx > 1.0) continue;
          }
          s.labels.data[(size_t)(y * w + x)] = cls;
        }
    }
  } while (!distinct_classes());

  s.rgb = Tensor({3, h, w});
  s.thermal = Tensor({1, h, w});
  std::normal_distribution<double> rgb_noise(0.0, 0.05), th_noise(0.0, 0.03);
  float dim = s.night ? 0.2f : 1.0f;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      int cls = s.labels.data[(size_t)(y * w + x)];
      const float* hue = kHues[cls % kHueCount];
      for (int c = 0; c < 3; ++c) {
        float v = hue[c] * dim + (float)rgb_noise(rng);
        s.rgb.data[(size_t)((c * h + y) * w + x)] = std::clamp(v, 0.0f, 1.0f);
      }
      float tv = thermal_level(cls, n_classes) + (float)th_noise(rng);
      s.thermal.data[(size_t)(y * w + x)] = std::clamp(tv, 0.0f, 1.0f);
    }
  return s;
}

Tensor image_to_tensor(const ImageU8& img) {
  Tensor t({img.channels, img.height, img.width});
  for (int c = 0; c < img.channels; ++c)
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x)
        t.data[(size_t)((c * img.height + y) * img.width + x)] =
            (float)img.at(y, x, c) / 255.0f;
  return t;
}

ImageU8 tensor_to_image(const Tensor& chw) {
  if (chw.rank() != 3) throw ContractError("tensor_to_image: expected CHW");
  ImageU8 img;
  img.channels = chw.dim(0);
  img.height = chw.dim(1);
  img.width = chw.dim(2);
  img.data.resize((size_t)img.channels * img.height * img.width);
  for (int c = 0; c < img.channels; ++c)
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) {
        float v = std::clamp(chw.data[(size_t)((c * img.height + y) * img.width + x)], 0.0f, 1.0f);
        img.data[(size_t)((y * img.width + x) * img.channels + c)] =
            (uint8_t)std::lround(v * 255.0f);
      }
  return img;
}

void write_synthetic_dataset(const std::string& dir, const SynthSpec& spec) {
  fs::create_directories(fs::path(dir) / "rgb");
  fs::create_directories(fs::path(dir) / "thermal");
  fs::create_directories(fs::path(dir) / "labels");

  std::vector<std::string> names;
  std::vector<std::string> night_names;
  for (int i = 0; i < spec.count; ++i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "scene_%05d", i);
    std::string base = buf;
    SceneSample s = gen_synthetic_scene(spec.seed + (uint32_t)i, spec.height, spec.width,
                                        spec.n_classes, spec.night_prob);
    write_png((fs::path(dir) / "rgb" / (base + ".png")).string(), tensor_to_image(s.rgb));
    write_png((fs::path(dir) / "thermal" / (base + ".png")).string(), tensor_to_image(s.thermal));
    ImageU8 lab;
    lab.width = spec.width;
    lab.height = spec.height;
    lab.channels = 1;
    lab.data.resize((size_t)spec.width * spec.height);
    for (int64_t j = 0; j < s.labels.numel(); ++j) lab.data[(size_t)j] = (uint8_t)s.labels.data[(size_t)j];
    write_png((fs::path(dir) / "labels" / (base + ".png")).string(), lab);
    names.push_back(base);
    if (s.night) night_names.push_back(base);
  }

  int n_train = (int)std::lround(spec.train_frac * spec.count);
  int n_val = (int)std::lround(spec.val_frac * spec.count);
  n_train = std::min(n_train, spec.count);
  n_val = std::min(n_val, spec.count - n_train);
  auto dump = [&](const std::string& file, size_t lo, size_t hi) {
    std::ofstream f(fs::path(dir) / file);
    for (size_t i = lo; i < hi && i < names.size(); ++i) f << names[i] << "\n";
  };
  dump("train.txt", 0, (size_t)n_train);
  dump("val.txt", (size_t)n_train, (size_t)(n_train + n_val));
  dump("test.txt", (size_t)(n_train + n_val), names.size());
  {
    std::ofstream f(fs::path(dir) / "night.txt");
    for (const auto& n : night_names) f << n << "\n";
  }
}

Dataset Dataset::load(const std::string& root, int n_classes) {
  Dataset d;
  d.n_classes_ = n_classes;
  fs::path rp = fs::path(root) / "rgb";
  if (!fs::is_directory(rp)) throw IoError("no samples: missing rgb/ under " + root);
  for (const auto& e : fs::directory_iterator(rp)) {
    if (e.path().extension() == ".png") d.order_.push_back(e.path().stem().string());
  }
  std::sort(d.order_.begin(), d.order_.end());
  if (d.order_.empty()) throw IoError("no samples in " + root);

  for (const auto& base : d.order_) {
    fs::path tp = fs::path(root) / "thermal" / (base + ".png");
    fs::path lp = fs::path(root) / "labels" / (base + ".png");
    if (!fs::exists(tp)) throw IoError("missing thermal for " + base);
    if (!fs::exists(lp)) throw IoError("missing labels for " + base);
    SceneSample s;
    ImageU8 rgb = read_png((fs::path(root) / "rgb" / (base + ".png")).string());
    ImageU8 th = read_png(tp.string());
    ImageU8 lab = read_png(lp.string());
    if (rgb.channels != 3) throw IoError("rgb image for " + base + " is not 3-channel");
    if (th.channels != 1) throw IoError("thermal image for " + base + " is not single-channel");
    if (lab.channels != 1) throw IoError("label image for " + base + " is not single-channel");
    if (th.width != rgb.width || th.height != rgb.height || lab.width != rgb.width ||
        lab.height != rgb.height)
      throw IoError("misaligned extents for " + base);
    s.rgb = image_to_tensor(rgb);
    s.thermal = image_to_tensor(th);
    s.labels = LabelMap({lab.height, lab.width});
    for (int64_t i = 0; i < s.labels.numel(); ++i) {
      int32_t v = lab.data[(size_t)i];
      if (v >= n_classes)
        throw ContractError("label id " + std::to_string(v) + " >= data.classes in " + base);
      s.labels.data[(size_t)i] = v;
    }
    d.samples_[base] = std::move(s);
  }

  for (const char* split : {"train", "val", "test"}) {
    std::ifstream f(fs::path(root) / (std::string(split) + ".txt"));
    std::vector<std::string> names;
    std::string line;
    while (f && std::getline(f, line)) {
      if (line.empty()) continue;
      if (!d.samples_.count(line))
        throw IoError(std::string(split) + ".txt names unknown basename " + line);
      names.push_back(line);
    }
    std::sort(names.begin(), names.end());
    d.splits_[split] = std::move(names);
  }
  {
    std::ifstream f(fs::path(root) / "night.txt");
    std::string line;
    while (f && std::getline(f, line))
      if (!line.empty()) d.night_[line] = true;
  }
  return d;
}

const std::vector<std::string>& Dataset::split(const std::string& name) const {
  auto it = splits_.find(name);
  if (it == splits_.end()) throw ContractError("unknown split: " + name);
  return it->second;
}

const SceneSample& Dataset::get(const std::string& basename) const {
  auto it = samples_.find(basename);
  if (it == samples_.end()) throw ContractError("unknown basename: " + basename);
  return it->second;
}

}  // namespace bimii
