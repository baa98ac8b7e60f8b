#pragma once

#include <optional>

#include "bimii/ceaef.hpp"
#include "bimii/decoder.hpp"
#include "bimii/encoder.hpp"
#include "bimii/supervision.hpp"

namespace bimii {

// Structural toggles mirroring the ablation axes. At most one replacement per
// module; the CCNN mode override conflicts with a non-default base mode.
struct AblationConfig {
  bool disable_ceaef = false;  // fusion replaced by elementwise addition
  bool disable_sfi = false;
  bool disable_dfi = false;
  bool disable_mfe = false;
  std::optional<CcnnMode> ccnn_mode;
  std::array<bool, 7> loss_mask{true, true, true, true, true, true, true};
  std::optional<std::array<double, 7>> fixed_loss_weights;

  bool any_structural() const {
    return disable_ceaef || disable_sfi || disable_dfi || disable_mfe || ccnn_mode.has_value();
  }
};

struct ModelConfig {
  EncoderConfig encoder;
  CcnnHyper ccnn;
  int ceaef_reduction = 4;
  int decoder_width = 64;
  int decoder_stages = 3;
  int n_classes = 9;
  int in_h = 480, in_w = 640;
  uint32_t init_seed = 1234;
  AblationConfig ablation;

  void validate() const {
    encoder.validate();
    if (decoder_stages != 3) throw ConfigError("decoder.stages is fixed at 3");
    if (decoder_width < 2 || decoder_width % 2 != 0)
      throw ConfigError("decoder.width must be even and >= 2");
    if (n_classes < 2) throw ConfigError("data.classes must be >= 2");
    if (in_h % 32 != 0 || in_w % 32 != 0)
      throw ConfigError("input extents must be divisible by 32");
    if (ccnn.kernel % 2 == 0 || ccnn.kernel < 1) throw ConfigError("ccnn.kernel must be odd");
    if (ccnn.dilation < 1) throw ConfigError("ccnn.dilation must be >= 1");
    if (ccnn.alpha_f <= 0 || ccnn.alpha_l <= 0 || ccnn.alpha_e <= 0)
      throw ConfigError("ccnn decay exponents must be positive");
    if (ccnn.v_e < 0) throw ConfigError("ccnn.v_e must be non-negative");
  }
};

template <typename S>
class BimiiNetT {
 public:
  explicit BimiiNetT(const ModelConfig& cfg);

  struct Forward {
    BranchIds rgb, thermal;
    std::array<int, 4> fused{-1, -1, -1, -1};
    DecoderOutputIds dec;
  };

  Forward forward(CtxT<S>& ctx, int rgb_in, int thermal_in, int t_steps) const;

  // Convenience: run one eval-mode pass over plain tensors and return logits.
  TensorT<S> infer_logits(const TensorT<S>& rgb, const TensorT<S>& thermal, int t_steps) const;

  LossOptions loss_options() const {
    LossOptions o;
    o.mask = cfg_.ablation.loss_mask;
    o.fixed_weights = cfg_.ablation.fixed_loss_weights;
    return o;
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStoreT<S>& params() { return params_; }
  const ParamStoreT<S>& params() const { return params_; }
  ParamT<S>& awl() { return *awl_s_; }
  HeadsT<S>& heads() { return heads_; }
  const HeadsT<S>& heads() const { return heads_; }
  DecoderT<S>& decoder() { return decoder_; }
  EncoderT<S>& encoder() { return encoder_; }
  std::vector<CeaefModuleT<S>>& ceaef() { return ceaef_; }

  void set_ccnn_mode(CcnnMode mode);
  void set_ablation(const AblationConfig& abl);

 private:
  ModelConfig cfg_;
  ParamStoreT<S> params_;
  EncoderT<S> encoder_;
  std::vector<CeaefModuleT<S>> ceaef_;
  DecoderT<S> decoder_;
  HeadsT<S> heads_;
  ParamT<S>* awl_s_ = nullptr;
};

// Reconfigures the structural toggles in place; parameters are untouched.
template <typename S>
void apply_ablation(BimiiNetT<S>& model, const AblationConfig& abl);

using BimiiNet = BimiiNetT<float>;

}  // namespace bimii
