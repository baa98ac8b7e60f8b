#include "bimii/config.hpp"

#include <fstream>
#include <sstream>

namespace bimii {

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

double parse_real(const std::string& key, const std::string& v) {
  try {
    size_t used = 0;
    double x = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError("config: bad numeric value '" + v + "' for " + key);
  }
}

int parse_int(const std::string& key, const std::string& v) {
  double x = parse_real(key, v);
  int i = (int)x;
  if ((double)i != x) throw ConfigError("config: expected integer for " + key);
  return i;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw ConfigError("config: expected boolean for " + key + ", got '" + v + "'");
}

std::vector<std::string> split_commas(const std::string& v) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(v);
  while (std::getline(is, cur, ',')) out.push_back(trim(cur));
  return out;
}

CcnnMode parse_mode(const std::string& key, const std::string& v) {
  if (v == "full") return CcnnMode::Full;
  if (v == "nolinking") return CcnnMode::Nolinking;
  if (v == "identity_bypass" || v == "identity-bypass") return CcnnMode::IdentityBypass;
  throw ConfigError("config: bad mode '" + v + "' for " + key);
}

std::string mode_name(CcnnMode m) {
  switch (m) {
    case CcnnMode::Full: return "full";
    case CcnnMode::Nolinking: return "nolinking";
    case CcnnMode::IdentityBypass: return "identity_bypass";
  }
  return "full";
}

const char* kLossNames[7] = {"bin1", "bin2", "bin3", "bou1", "bou2", "bou3", "se"};

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) {
  auto& m = model;
  if (key == "encoder.channels") {
    auto parts = split_commas(value);
    if (parts.size() != 4) throw ConfigError("encoder.channels needs 4 comma-separated values");
    for (int i = 0; i < 4; ++i) m.encoder.channels[(size_t)i] = parse_int(key, parts[(size_t)i]);
  } else if (key == "encoder.blocks_per_stage") {
    m.encoder.blocks_per_stage = parse_int(key, value);
  } else if (key == "encoder.thermal_stem") {
    if (value == "dedicated") m.encoder.thermal_dedicated_stem = true;
    else if (value == "replicate") m.encoder.thermal_dedicated_stem = false;
    else throw ConfigError("encoder.thermal_stem must be dedicated or replicate");
  } else if (key == "ccnn.alpha_f") {
    m.ccnn.alpha_f = parse_real(key, value);
  } else if (key == "ccnn.alpha_l") {
    m.ccnn.alpha_l = parse_real(key, value);
  } else if (key == "ccnn.alpha_e") {
    m.ccnn.alpha_e = parse_real(key, value);
  } else if (key == "ccnn.v_e") {
    m.ccnn.v_e = parse_real(key, value);
  } else if (key == "ccnn.beta") {
    m.ccnn.beta = parse_real(key, value);
  } else if (key == "ccnn.kernel") {
    m.ccnn.kernel = parse_int(key, value);
  } else if (key == "ccnn.dilation") {
    m.ccnn.dilation = parse_int(key, value);
  } else if (key == "ccnn.mode") {
    CcnnMode mode = parse_mode(key, value);
    if (mode == CcnnMode::IdentityBypass)
      throw ConfigError("ccnn.mode supports full or nolinking; identity_bypass is an ablation");
    m.ccnn.mode = mode;
  } else if (key == "ccnn.t_steps_train") {
    stage1.t_steps = parse_int(key, value);
  } else if (key == "ccnn.t_steps_finetune") {
    stage2.t_steps = parse_int(key, value);
  } else if (key == "ceaef.reduction") {
    m.ceaef_reduction = parse_int(key, value);
  } else if (key == "decoder.width") {
    m.decoder_width = parse_int(key, value);
  } else if (key == "decoder.stages") {
    m.decoder_stages = parse_int(key, value);
  } else if (key == "data.root") {
    data_root = value;
  } else if (key == "data.classes") {
    m.n_classes = parse_int(key, value);
  } else if (key == "data.height") {
    m.in_h = parse_int(key, value);
  } else if (key == "data.width") {
    m.in_w = parse_int(key, value);
  } else if (key == "stage1.epochs") {
    stage1.epochs = parse_int(key, value);
  } else if (key == "stage1.batch") {
    stage1.batch = parse_int(key, value);
  } else if (key == "stage1.lr") {
    stage1.lr = parse_real(key, value);
  } else if (key == "stage1.weight_decay") {
    stage1.weight_decay = parse_real(key, value);
  } else if (key == "stage2.epochs") {
    stage2.epochs = parse_int(key, value);
  } else if (key == "stage2.batch") {
    stage2.batch = parse_int(key, value);
  } else if (key == "stage2.lr") {
    stage2.lr = parse_real(key, value);
  } else if (key == "stage2.weight_decay") {
    stage2.weight_decay = parse_real(key, value);
  } else if (key == "stage2.clip_norm") {
    stage2.clip_norm = parse_real(key, value);
  } else if (key == "run.seed") {
    seed = (uint32_t)parse_real(key, value);
  } else if (key == "run.out_dir") {
    out_dir = value;
  } else if (key == "aug.crop") {
    aug_crop = parse_bool(key, value);
  } else if (key == "aug.hflip") {
    aug_hflip = parse_bool(key, value);
  } else if (key == "ablation.disable_ceaef") {
    m.ablation.disable_ceaef = parse_bool(key, value);
  } else if (key == "ablation.disable_sfi") {
    m.ablation.disable_sfi = parse_bool(key, value);
  } else if (key == "ablation.disable_dfi") {
    m.ablation.disable_dfi = parse_bool(key, value);
  } else if (key == "ablation.disable_mfe") {
    m.ablation.disable_mfe = parse_bool(key, value);
  } else if (key == "ablation.ccnn_mode") {
    if (value == "default" || value.empty()) m.ablation.ccnn_mode.reset();
    else m.ablation.ccnn_mode = parse_mode(key, value);
  } else if (key == "ablation.loss_mask") {
    std::array<bool, 7> mask{};
    mask.fill(false);
    for (const auto& name : split_commas(value)) {
      bool found = false;
      for (int k = 0; k < 7; ++k)
        if (name == kLossNames[k]) {
          mask[(size_t)k] = true;
          found = true;
        }
      if (!found) throw ConfigError("ablation.loss_mask: unknown head '" + name + "'");
    }
    m.ablation.loss_mask = mask;
  } else if (key == "ablation.fixed_loss_weights") {
    if (value == "none" || value.empty()) {
      m.ablation.fixed_loss_weights.reset();
    } else {
      auto parts = split_commas(value);
      if (parts.size() != 7) throw ConfigError("ablation.fixed_loss_weights needs 7 values");
      std::array<double, 7> w{};
      for (int k = 0; k < 7; ++k) w[(size_t)k] = parse_real(key, parts[(size_t)k]);
      m.ablation.fixed_loss_weights = w;
    }
  } else {
    throw ConfigError("unknown config key: " + key);
  }
}

RunConfig RunConfig::parse_text(const std::string& text) {
  RunConfig cfg;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  cfg.model.init_seed = cfg.seed;
  cfg.validate();
  return cfg;
}

RunConfig RunConfig::parse_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config file: " + path);
  std::ostringstream os;
  os << f.rdbuf();
  return parse_text(os.str());
}

void RunConfig::validate() const {
  model.validate();
  for (const StageConfig* s : {&stage1, &stage2}) {
    if (s->epochs < 0) throw ConfigError("epochs must be non-negative");
    if (s->batch < 1) throw ConfigError("batch must be positive");
    if (s->lr <= 0) throw ConfigError("learning rate must be positive");
    if (s->weight_decay < 0) throw ConfigError("weight decay must be non-negative");
    if (s->clip_norm < 0) throw ConfigError("clip norm must be non-negative");
    if (s->t_steps < 1) throw ConfigError("t_steps must be >= 1");
  }
}

std::string RunConfig::serialize() const {
  std::ostringstream os;
  os.precision(17);
  const auto& m = model;
  os << "encoder.channels = " << m.encoder.channels[0] << "," << m.encoder.channels[1] << ","
     << m.encoder.channels[2] << "," << m.encoder.channels[3] << "\n";
  os << "encoder.blocks_per_stage = " << m.encoder.blocks_per_stage << "\n";
  os << "encoder.thermal_stem = " << (m.encoder.thermal_dedicated_stem ? "dedicated" : "replicate")
     << "\n";
  os << "ccnn.alpha_f = " << m.ccnn.alpha_f << "\n";
  os << "ccnn.alpha_l = " << m.ccnn.alpha_l << "\n";
  os << "ccnn.alpha_e = " << m.ccnn.alpha_e << "\n";
  os << "ccnn.v_e = " << m.ccnn.v_e << "\n";
  os << "ccnn.beta = " << m.ccnn.beta << "\n";
  os << "ccnn.kernel = " << m.ccnn.kernel << "\n";
  os << "ccnn.dilation = " << m.ccnn.dilation << "\n";
  os << "ccnn.mode = " << mode_name(m.ccnn.mode) << "\n";
  os << "ccnn.t_steps_train = " << stage1.t_steps << "\n";
  os << "ccnn.t_steps_finetune = " << stage2.t_steps << "\n";
  os << "ceaef.reduction = " << m.ceaef_reduction << "\n";
  os << "decoder.width = " << m.decoder_width << "\n";
  os << "decoder.stages = " << m.decoder_stages << "\n";
  os << "data.root = " << data_root << "\n";
  os << "data.classes = " << m.n_classes << "\n";
  os << "data.height = " << m.in_h << "\n";
  os << "data.width = " << m.in_w << "\n";
  os << "stage1.epochs = " << stage1.epochs << "\n";
  os << "stage1.batch = " << stage1.batch << "\n";
  os << "stage1.lr = " << stage1.lr << "\n";
  os << "stage1.weight_decay = " << stage1.weight_decay << "\n";
  os << "stage2.epochs = " << stage2.epochs << "\n";
  os << "stage2.batch = " << stage2.batch << "\n";
  os << "stage2.lr = " << stage2.lr << "\n";
  os << "stage2.weight_decay = " << stage2.weight_decay << "\n";
  os << "stage2.clip_norm = " << stage2.clip_norm << "\n";
  os << "run.seed = " << seed << "\n";
  os << "run.out_dir = " << out_dir << "\n";
  os << "aug.crop = " << (aug_crop ? "true" : "false") << "\n";
  os << "aug.hflip = " << (aug_hflip ? "true" : "false") << "\n";
  os << "ablation.disable_ceaef = " << (m.ablation.disable_ceaef ? "true" : "false") << "\n";
  os << "ablation.disable_sfi = " << (m.ablation.disable_sfi ? "true" : "false") << "\n";
  os << "ablation.disable_dfi = " << (m.ablation.disable_dfi ? "true" : "false") << "\n";
  os << "ablation.disable_mfe = " << (m.ablation.disable_mfe ? "true" : "false") << "\n";
  os << "ablation.ccnn_mode = "
     << (m.ablation.ccnn_mode ? mode_name(*m.ablation.ccnn_mode) : "default") << "\n";
  os << "ablation.loss_mask = ";
  bool first = true;
  for (int k = 0; k < 7; ++k)
    if (m.ablation.loss_mask[(size_t)k]) {
      os << (first ? "" : ",") << kLossNames[k];
      first = false;
    }
  os << "\n";
  os << "ablation.fixed_loss_weights = ";
  if (m.ablation.fixed_loss_weights) {
    for (int k = 0; k < 7; ++k) os << (k ? "," : "") << (*m.ablation.fixed_loss_weights)[(size_t)k];
  } else {
    os << "none";
  }
  os << "\n";
  return os.str();
}

}  // namespace bimii
