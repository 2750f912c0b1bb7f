#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

#include <torch/torch.h>

namespace pgdiffseg {

// Composition inside a conv block. `printed` is GroupNorm(SiLU(Conv(x)));
// `pre_activation` is Conv(SiLU(GroupNorm(x))), the usual DDPM ordering.
enum class ConvBlockOrder { printed, pre_activation };

// Where the per-level parameter-shared attention sits relative to the unit's
// downsampling. `pre_downsample` attends at the skip resolution; the
// `post_downsample` variant attends one level coarser (4x fewer positions).
enum class PsaPlacement { pre_downsample, post_downsample };

std::string to_string(ConvBlockOrder o);
std::string to_string(PsaPlacement p);
ConvBlockOrder conv_block_order_from_string(const std::string& s);
PsaPlacement psa_placement_from_string(const std::string& s);

struct ModelConfig {
  int image_channels = 1;
  int mask_channels = 1;
  int base_channels = 32;
  std::array<int, 4> level_channels{32, 64, 128, 256};
  int sdb_layers = 4;
  double sdb_scale = 0.2;
  int attention_reduction = 8;
  int time_embed_dim = 128;
  int image_size = 128;
  int res_blocks = 2;
  int group_norm_groups = 8;
  ConvBlockOrder conv_order = ConvBlockOrder::printed;
  PsaPlacement psa_placement = PsaPlacement::post_downsample;

  // Level widths are base_channels * {1, 2, 4, 8}.
  static ModelConfig with_base(int base_channels, int image_size);

  // Throws InvalidArgument on divisibility or range violations.
  void validate() const;
};

// Named intermediate activations captured during a forward pass.
struct ActivationTape {
  std::map<std::string, torch::Tensor> maps;
  void record(const std::string& name, const torch::Tensor& t) { maps[name] = t; }
};

// Sinusoidal embedding of integer timesteps, shape [B, dim], float64.
torch::Tensor time_embedding(const torch::Tensor& timesteps, int dim);
// Single-step convenience. Throws InvalidArgument unless 1 <= t <= max_t.
torch::Tensor time_embedding(int t, int dim, int max_t);

// Conv 3x3 + SiLU + GroupNorm in the configured order; shape preserving in HxW.
struct ConvBlockImpl : torch::nn::Module {
  ConvBlockImpl(int in_channels, int out_channels, int groups, ConvBlockOrder order);
  torch::Tensor forward(const torch::Tensor& x);

  int in_channels;
  ConvBlockOrder order;
  torch::nn::Conv2d conv{nullptr};
  torch::nn::GroupNorm norm{nullptr};
};
TORCH_MODULE(ConvBlock);

// Two conv blocks with an identity (or 1x1) shortcut. A time embedding, if
// given, is projected (bias-free) and added between the two blocks.
struct ResidualBlockImpl : torch::nn::Module {
  ResidualBlockImpl(int in_channels, int out_channels, int time_dim, const ModelConfig& cfg);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& t_embed = {});

  ConvBlock block1{nullptr}, block2{nullptr};
  torch::nn::Linear time_proj{nullptr};
  torch::nn::Conv2d shortcut{nullptr};
};
TORCH_MODULE(ResidualBlock);

// H(.) of the slim dense block: [3x3 conv, BatchNorm, LeakyReLU] x 2.
struct DenseLayerImpl : torch::nn::Module {
  explicit DenseLayerImpl(int channels);
  torch::Tensor forward(const torch::Tensor& x);
  torch::nn::Sequential body{nullptr};
};
TORCH_MODULE(DenseLayer);

// Dense block without growth rate: x_i = H_i(x_{i-1}) + scale * sum_{j<i} x_j.
struct SlimDenseBlockImpl : torch::nn::Module {
  SlimDenseBlockImpl(int channels, int layers, double scale);
  torch::Tensor forward(const torch::Tensor& x);

  double scale;
  torch::nn::ModuleList layers{nullptr};
};
TORCH_MODULE(SlimDenseBlock);

// Encoder unit shared by the condition and denoising flows:
// + projected time embedding -> residual blocks -> (skip, stride-2 conv).
struct EncoderUnitImpl : torch::nn::Module {
  EncoderUnitImpl(int in_channels, int out_channels, const ModelConfig& cfg);
  // Returns {pre-downsample features, downsampled features}.
  std::pair<torch::Tensor, torch::Tensor> forward(const torch::Tensor& x,
                                                  const torch::Tensor& t_embed);
  torch::Tensor features(const torch::Tensor& x, const torch::Tensor& t_embed);
  torch::Tensor downsample(const torch::Tensor& h);

  torch::nn::Linear time_proj{nullptr};
  torch::nn::ModuleList blocks{nullptr};
  torch::nn::Conv2d down{nullptr};
};
TORCH_MODULE(EncoderUnit);

// Attention core shared by PSA and the bottleneck: out[:, n] = sum_m v[:, m] *
// softmax_m(q[:, n] . k[:, m]). q, k: [B, C', N]; v: [B, C, N].
torch::Tensor attend(const torch::Tensor& q, const torch::Tensor& k, const torch::Tensor& v);
// Row-normalised attention weights [B, N, N] (row = query position).
torch::Tensor attention_weights(const torch::Tensor& q, const torch::Tensor& k);

// Parameter-shared cross-attention between the condition (x1) and
// denoising (x2) flows. Query/key projections are shared; values and gates
// are per branch. Gates start at zero so the block is the identity at init.
struct ParamSharedAttentionImpl : torch::nn::Module {
  ParamSharedAttentionImpl(int channels, int reduction);
  std::pair<torch::Tensor, torch::Tensor> forward(const torch::Tensor& x1,
                                                  const torch::Tensor& x2);
  // Ungated maps {X_s, X_d}, shaped like the inputs.
  std::pair<torch::Tensor, torch::Tensor> attention_maps(const torch::Tensor& x1,
                                                         const torch::Tensor& x2);

  int channels;
  int reduced;
  torch::nn::Conv2d query{nullptr}, key{nullptr}, value_cond{nullptr}, value_den{nullptr};
  torch::Tensor gate_cond, gate_den;
};
TORCH_MODULE(ParamSharedAttention);

// Gated spatial self-attention on a single map (bottleneck).
struct SelfAttentionImpl : torch::nn::Module {
  SelfAttentionImpl(int channels, int reduction);
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::Conv2d query{nullptr}, key{nullptr}, value{nullptr};
  torch::Tensor gate;
};
TORCH_MODULE(SelfAttention);

struct PriorOutput {
  torch::Tensor bottleneck_bias;  // [B, C4, S/16, S/16]
  torch::Tensor class_logit;      // [B]
  torch::Tensor loc_logit;        // [B, 1, S/8, S/8]
};

// Prior-supervision branch on the raw image: stem + four stride-2 supervised
// units, a linear tumour-presence head and a 1x1 localisation head on the
// penultimate unit.
struct PriorBranchImpl : torch::nn::Module {
  explicit PriorBranchImpl(const ModelConfig& cfg);
  PriorOutput forward(const torch::Tensor& image, ActivationTape* tape = nullptr);

  torch::nn::Sequential stem{nullptr};
  torch::nn::ModuleList units{nullptr};
  torch::nn::Linear classifier{nullptr};
  torch::nn::Conv2d loc_head{nullptr};
};
TORCH_MODULE(PriorBranch);

// (x + bias) -> residual block -> self-attention -> residual block.
struct BottleneckImpl : torch::nn::Module {
  BottleneckImpl(int channels, const ModelConfig& cfg);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& bias,
                        const torch::Tensor& t_embed);

  ResidualBlock res1{nullptr}, res2{nullptr};
  SelfAttention attn{nullptr};
};
TORCH_MODULE(Bottleneck);

// + time embedding -> 2x nearest upsample + 3x3 conv -> concat skip -> 1x1
// projection -> residual blocks.
struct UpUnitImpl : torch::nn::Module {
  UpUnitImpl(int in_channels, int skip_channels, int out_channels, const ModelConfig& cfg);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& skip,
                        const torch::Tensor& t_embed);

  torch::nn::Linear time_proj{nullptr};
  torch::nn::Conv2d up_conv{nullptr}, merge{nullptr};
  torch::nn::ModuleList blocks{nullptr};
};
TORCH_MODULE(UpUnit);

struct DecoderImpl : torch::nn::Module {
  explicit DecoderImpl(const ModelConfig& cfg);
  // skips are deepest first.
  torch::Tensor forward(const torch::Tensor& x, const std::vector<torch::Tensor>& skips,
                        const torch::Tensor& t_embed, ActivationTape* tape = nullptr);

  torch::nn::ModuleList ups{nullptr};
  torch::nn::Sequential head{nullptr};
  std::vector<std::vector<int64_t>> skip_channels;
};
TORCH_MODULE(Decoder);

struct ModelOutput {
  torch::Tensor eps_hat;
  PriorOutput prior;
};

// Full denoiser: SDB pre-extraction on both inputs, two encoder flows fused
// by PSA at every level, prior bias injected at the bottleneck, and a
// skip-connected decoder predicting the noise of x_t.
struct PGDiffSegImpl : torch::nn::Module {
  explicit PGDiffSegImpl(ModelConfig cfg);

  ModelOutput forward(const torch::Tensor& x_t, const torch::Tensor& image,
                      const torch::Tensor& timesteps, ActivationTape* tape = nullptr);
  torch::Tensor predict_eps(const torch::Tensor& x_t, const torch::Tensor& image, int t);

  // Activation names recorded on the tape, in forward order.
  std::vector<std::string> layer_names() const;
  const ModelConfig& config() const noexcept { return cfg; }

  ModelConfig cfg;
  torch::nn::Conv2d image_stem{nullptr}, mask_stem{nullptr};
  SlimDenseBlock image_sdb{nullptr}, mask_sdb{nullptr};
  torch::nn::Sequential time_mlp{nullptr};
  torch::nn::ModuleList cond_units{nullptr}, den_units{nullptr}, psa{nullptr};
  PriorBranch prior{nullptr};
  Bottleneck bottleneck{nullptr};
  Decoder decoder{nullptr};
};
TORCH_MODULE(PGDiffSeg);

// Deep copy (parameters and buffers) into a new model with the same config.
PGDiffSeg clone_model(PGDiffSeg& model);

}  // namespace pgdiffseg
