#include "pgdiffseg/network.hpp"

#include <cmath>
#include <numeric>

#include "pgdiffseg/errors.hpp"

namespace pgdiffseg {

namespace nn = torch::nn;
namespace F = torch::nn::functional;

std::string to_string(ConvBlockOrder o) {
  return o == ConvBlockOrder::printed ? "printed" : "pre_activation";
}

std::string to_string(PsaPlacement p) {
  return p == PsaPlacement::pre_downsample ? "pre_downsample" : "post_downsample";
}

ConvBlockOrder conv_block_order_from_string(const std::string& s) {
  if (s == "printed") return ConvBlockOrder::printed;
  if (s == "pre_activation") return ConvBlockOrder::pre_activation;
  throw InvalidArgument("unknown conv block order '" + s + "'");
}

PsaPlacement psa_placement_from_string(const std::string& s) {
  if (s == "pre_downsample") return PsaPlacement::pre_downsample;
  if (s == "post_downsample") return PsaPlacement::post_downsample;
  throw InvalidArgument("unknown psa placement '" + s + "'");
}

ModelConfig ModelConfig::with_base(int base_channels, int image_size) {
  ModelConfig cfg;
  cfg.base_channels = base_channels;
  cfg.level_channels = {base_channels, base_channels * 2, base_channels * 4, base_channels * 8};
  cfg.image_size = image_size;
  return cfg;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw InvalidArgument("model config: " + m); };
  if (image_channels < 1 || mask_channels < 1) fail("channel counts must be positive");
  if (base_channels < 1) fail("base_channels must be positive");
  if (attention_reduction < 1) fail("attention_reduction must be positive");
  for (int c : level_channels) {
    if (c < 1) fail("level channels must be positive");
    if (c % attention_reduction != 0) {
      fail("level channel " + std::to_string(c) + " not divisible by attention_reduction " +
           std::to_string(attention_reduction));
    }
  }
  if (image_size < 16 || image_size % 16 != 0) fail("image_size must be a positive multiple of 16");
  if (sdb_layers < 1) fail("sdb_layers must be >= 1");
  if (res_blocks < 1) fail("res_blocks must be >= 1");
  if (time_embed_dim < 2 || time_embed_dim % 2 != 0) fail("time_embed_dim must be even and >= 2");
  if (group_norm_groups < 1) fail("group_norm_groups must be positive");
}

torch::Tensor time_embedding(const torch::Tensor& timesteps, int dim) {
  const int half = dim / 2;
  auto opts = torch::TensorOptions().dtype(torch::kFloat64);
  auto freqs = torch::exp(-std::log(10000.0) * torch::arange(half, opts) / static_cast<double>(half));
  auto args = timesteps.to(torch::kFloat64).view({-1, 1}) * freqs.view({1, -1});
  auto emb = torch::cat({torch::sin(args), torch::cos(args)}, 1);
  if (dim % 2 == 1) emb = F::pad(emb, F::PadFuncOptions({0, 1}));
  return emb;
}

torch::Tensor time_embedding(int t, int dim, int max_t) {
  if (t < 1 || t > max_t) {
    throw InvalidArgument("timestep " + std::to_string(t) + " outside 1.." + std::to_string(max_t));
  }
  if (dim < 1) throw InvalidArgument("embedding dim must be positive");
  return time_embedding(torch::tensor({static_cast<int64_t>(t)}), dim).squeeze(0);
}

namespace {

int norm_groups(int requested, int channels) { return std::gcd(requested, channels); }

nn::Conv2d conv3x3(int in, int out, int stride = 1) {
  return nn::Conv2d(nn::Conv2dOptions(in, out, 3).stride(stride).padding(1));
}

nn::Conv2d conv1x1(int in, int out, bool bias = true) {
  return nn::Conv2d(nn::Conv2dOptions(in, out, 1).bias(bias));
}

torch::Tensor add_time(const torch::Tensor& x, nn::Linear& proj, const torch::Tensor& t_embed) {
  if (!t_embed.defined()) return x;
  return x + proj(t_embed.to(x.dtype())).unsqueeze(-1).unsqueeze(-1);
}

}  // namespace

ConvBlockImpl::ConvBlockImpl(int in_channels_, int out_channels, int groups, ConvBlockOrder order_)
    : in_channels(in_channels_), order(order_) {
  conv = register_module("conv", conv3x3(in_channels, out_channels));
  const int normed = order == ConvBlockOrder::printed ? out_channels : in_channels;
  norm = register_module(
      "norm", nn::GroupNorm(nn::GroupNormOptions(norm_groups(groups, normed), normed)));
}

torch::Tensor ConvBlockImpl::forward(const torch::Tensor& x) {
  if (x.dim() != 4 || x.size(1) != in_channels) {
    throw InvalidArgument("conv block expects " + std::to_string(in_channels) + " channels");
  }
  if (order == ConvBlockOrder::printed) return norm(F::silu(conv(x)));
  return conv(F::silu(norm(x)));
}

ResidualBlockImpl::ResidualBlockImpl(int in_channels, int out_channels, int time_dim,
                                     const ModelConfig& cfg) {
  block1 = register_module(
      "block1", ConvBlock(in_channels, out_channels, cfg.group_norm_groups, cfg.conv_order));
  block2 = register_module(
      "block2", ConvBlock(out_channels, out_channels, cfg.group_norm_groups, cfg.conv_order));
  if (time_dim > 0) {
    time_proj = register_module(
        "time_proj", nn::Linear(nn::LinearOptions(time_dim, out_channels).bias(false)));
  }
  if (in_channels != out_channels) {
    shortcut = register_module("shortcut", conv1x1(in_channels, out_channels));
  }
}

torch::Tensor ResidualBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& t_embed) {
  auto h = block1(x);
  if (time_proj) h = add_time(h, time_proj, t_embed);
  h = block2(h);
  return h + (shortcut ? shortcut(x) : x);
}

DenseLayerImpl::DenseLayerImpl(int channels) {
  body = register_module(
      "body", nn::Sequential(conv3x3(channels, channels), nn::BatchNorm2d(channels),
                             nn::LeakyReLU(), conv3x3(channels, channels),
                             nn::BatchNorm2d(channels), nn::LeakyReLU()));
}

torch::Tensor DenseLayerImpl::forward(const torch::Tensor& x) { return body->forward(x); }

SlimDenseBlockImpl::SlimDenseBlockImpl(int channels, int n_layers, double scale_)
    : scale(scale_) {
  layers = register_module("layers", nn::ModuleList());
  for (int i = 0; i < n_layers; ++i) layers->push_back(DenseLayer(channels));
}

torch::Tensor SlimDenseBlockImpl::forward(const torch::Tensor& x) {
  torch::Tensor prev = x;
  torch::Tensor dense_sum;  // sum of x_1..x_{i-1}
  for (const auto& layer : *layers) {
    auto out = layer->as<DenseLayer>()->forward(prev);
    if (dense_sum.defined()) {
      out = out + dense_sum * scale;
      dense_sum = dense_sum + out;
    } else {
      dense_sum = out;
    }
    prev = out;
  }
  return prev;
}

EncoderUnitImpl::EncoderUnitImpl(int in_channels, int out_channels, const ModelConfig& cfg) {
  time_proj = register_module(
      "time_proj", nn::Linear(nn::LinearOptions(cfg.time_embed_dim, in_channels).bias(false)));
  blocks = register_module("blocks", nn::ModuleList());
  for (int i = 0; i < cfg.res_blocks; ++i) {
    blocks->push_back(ResidualBlock(i == 0 ? in_channels : out_channels, out_channels, 0, cfg));
  }
  down = register_module("down", conv3x3(out_channels, out_channels, 2));
}

torch::Tensor EncoderUnitImpl::features(const torch::Tensor& x, const torch::Tensor& t_embed) {
  auto h = add_time(x, time_proj, t_embed);
  for (const auto& b : *blocks) h = b->as<ResidualBlock>()->forward(h);
  return h;
}

torch::Tensor EncoderUnitImpl::downsample(const torch::Tensor& h) { return down(h); }

std::pair<torch::Tensor, torch::Tensor> EncoderUnitImpl::forward(const torch::Tensor& x,
                                                                 const torch::Tensor& t_embed) {
  auto h = features(x, t_embed);
  return {h, down(h)};
}

torch::Tensor attention_weights(const torch::Tensor& q, const torch::Tensor& k) {
  return torch::softmax(torch::bmm(q.transpose(1, 2), k), -1);
}

torch::Tensor attend(const torch::Tensor& q, const torch::Tensor& k, const torch::Tensor& v) {
  return torch::bmm(v, attention_weights(q, k).transpose(1, 2));
}

ParamSharedAttentionImpl::ParamSharedAttentionImpl(int channels_, int reduction)
    : channels(channels_) {
  if (reduction < 1 || channels % reduction != 0) {
    throw InvalidArgument("PSA channels " + std::to_string(channels) +
                          " not divisible by reduction " + std::to_string(reduction));
  }
  reduced = channels / reduction;
  query = register_module("query", conv1x1(channels, reduced));
  key = register_module("key", conv1x1(channels, reduced));
  value_cond = register_module("value_cond", conv1x1(channels, channels));
  value_den = register_module("value_den", conv1x1(channels, channels));
  gate_cond = register_parameter("gate_cond", torch::zeros({1}));
  gate_den = register_parameter("gate_den", torch::zeros({1}));
}

std::pair<torch::Tensor, torch::Tensor> ParamSharedAttentionImpl::attention_maps(
    const torch::Tensor& x1, const torch::Tensor& x2) {
  if (x1.dim() != 4 || !x1.sizes().equals(x2.sizes())) {
    throw InvalidArgument("PSA inputs must share a [B, C, H, W] shape");
  }
  if (x1.size(1) != channels) {
    throw InvalidArgument("PSA expects " + std::to_string(channels) + " channels");
  }
  const auto b = x1.size(0), h = x1.size(2), w = x1.size(3);
  auto branch = [&](const torch::Tensor& x, nn::Conv2d& value) {
    auto q = query(x).view({b, reduced, h * w});
    auto k = key(x).view({b, reduced, h * w});
    auto v = value(x).view({b, channels, h * w});
    return attend(q, k, v).view({b, channels, h, w});
  };
  return {branch(x1, value_cond), branch(x2, value_den)};
}

std::pair<torch::Tensor, torch::Tensor> ParamSharedAttentionImpl::forward(const torch::Tensor& x1,
                                                                          const torch::Tensor& x2) {
  auto [xs, xd] = attention_maps(x1, x2);
  return {gate_cond * xs + x1, gate_den * xd + x2};
}

SelfAttentionImpl::SelfAttentionImpl(int channels, int reduction) {
  if (reduction < 1 || channels % reduction != 0) {
    throw InvalidArgument("self-attention channels not divisible by reduction");
  }
  query = register_module("query", conv1x1(channels, channels / reduction));
  key = register_module("key", conv1x1(channels, channels / reduction));
  value = register_module("value", conv1x1(channels, channels));
  gate = register_parameter("gate", torch::zeros({1}));
}

torch::Tensor SelfAttentionImpl::forward(const torch::Tensor& x) {
  const auto b = x.size(0), c = x.size(1), h = x.size(2), w = x.size(3);
  auto q = query(x).view({b, -1, h * w});
  auto k = key(x).view({b, -1, h * w});
  auto v = value(x).view({b, c, h * w});
  return gate * attend(q, k, v).view({b, c, h, w}) + x;
}

namespace {

void append_conv_bn_relu(nn::Sequential& seq, int in, int out, int stride) {
  seq->push_back(conv3x3(in, out, stride));
  seq->push_back(nn::BatchNorm2d(out));
  seq->push_back(nn::ReLU());
}

}  // namespace

PriorBranchImpl::PriorBranchImpl(const ModelConfig& cfg) {
  nn::Sequential stem_seq;
  append_conv_bn_relu(stem_seq, cfg.image_channels, cfg.base_channels, 1);
  stem = register_module("stem", stem_seq);
  units = register_module("units", nn::ModuleList());
  int in = cfg.base_channels;
  for (int out : cfg.level_channels) {
    nn::Sequential unit;
    append_conv_bn_relu(unit, in, out, 2);
    append_conv_bn_relu(unit, out, out, 1);
    units->push_back(unit);
    in = out;
  }
  classifier = register_module("classifier", nn::Linear(cfg.level_channels[3], 1));
  loc_head = register_module("loc_head", conv1x1(cfg.level_channels[2], 1));
}

PriorOutput PriorBranchImpl::forward(const torch::Tensor& image, ActivationTape* tape) {
  auto h = stem->forward(image);
  if (tape) tape->record("prior.stem", h);
  torch::Tensor penultimate;
  for (std::size_t i = 0; i < units->size(); ++i) {
    h = units[i]->as<nn::Sequential>()->forward(h);
    if (tape) tape->record("prior.unit" + std::to_string(i + 1), h);
    if (i + 2 == units->size()) penultimate = h;
  }
  PriorOutput out;
  out.bottleneck_bias = h;
  out.class_logit = classifier(h.mean({2, 3})).squeeze(1);
  out.loc_logit = loc_head(penultimate);
  return out;
}

BottleneckImpl::BottleneckImpl(int channels, const ModelConfig& cfg) {
  res1 = register_module("res1", ResidualBlock(channels, channels, cfg.time_embed_dim, cfg));
  attn = register_module("attn", SelfAttention(channels, cfg.attention_reduction));
  res2 = register_module("res2", ResidualBlock(channels, channels, cfg.time_embed_dim, cfg));
}

torch::Tensor BottleneckImpl::forward(const torch::Tensor& x, const torch::Tensor& bias,
                                      const torch::Tensor& t_embed) {
  auto h = bias.defined() ? x + bias : x;
  h = res1(h, t_embed);
  h = attn(h);
  return res2(h, t_embed);
}

UpUnitImpl::UpUnitImpl(int in_channels, int skip_channels, int out_channels,
                       const ModelConfig& cfg) {
  time_proj = register_module(
      "time_proj", nn::Linear(nn::LinearOptions(cfg.time_embed_dim, in_channels).bias(false)));
  up_conv = register_module("up_conv", conv3x3(in_channels, in_channels));
  merge = register_module("merge", conv1x1(in_channels + skip_channels, out_channels));
  blocks = register_module("blocks", nn::ModuleList());
  for (int i = 0; i < cfg.res_blocks; ++i) {
    blocks->push_back(ResidualBlock(out_channels, out_channels, 0, cfg));
  }
}

torch::Tensor UpUnitImpl::forward(const torch::Tensor& x, const torch::Tensor& skip,
                                  const torch::Tensor& t_embed) {
  auto h = add_time(x, time_proj, t_embed);
  h = F::interpolate(h, F::InterpolateFuncOptions()
                            .scale_factor(std::vector<double>{2.0, 2.0})
                            .mode(torch::kNearest));
  h = up_conv(h);
  if (skip.dim() != 4 || skip.size(0) != h.size(0) || skip.size(2) != h.size(2) ||
      skip.size(3) != h.size(3)) {
    throw InvalidArgument("decoder skip shape mismatch");
  }
  h = merge(torch::cat({h, skip}, 1));
  for (const auto& b : *blocks) h = b->as<ResidualBlock>()->forward(h);
  return h;
}

DecoderImpl::DecoderImpl(const ModelConfig& cfg) {
  ups = register_module("ups", nn::ModuleList());
  const auto& lc = cfg.level_channels;
  int in = lc[3];
  for (int i = 3; i >= 0; --i) {
    ups->push_back(UpUnit(in, lc[i], lc[i], cfg));
    skip_channels.push_back({lc[i]});
    in = lc[i];
  }
  head = register_module("head", nn::Sequential(conv3x3(lc[0], cfg.mask_channels)));
}

torch::Tensor DecoderImpl::forward(const torch::Tensor& x, const std::vector<torch::Tensor>& skips,
                                   const torch::Tensor& t_embed, ActivationTape* tape) {
  if (skips.size() != ups->size()) {
    throw InvalidArgument("decoder expects " + std::to_string(ups->size()) + " skips");
  }
  auto h = x;
  for (std::size_t i = 0; i < ups->size(); ++i) {
    if (skips[i].dim() != 4 || skips[i].size(1) != skip_channels[i][0]) {
      throw InvalidArgument("decoder skip " + std::to_string(i) + " has wrong channel count");
    }
    h = ups[i]->as<UpUnit>()->forward(h, skips[i], t_embed);
    if (tape) tape->record("decoder.up" + std::to_string(i + 1), h);
  }
  return head->forward(h);
}

PGDiffSegImpl::PGDiffSegImpl(ModelConfig config) : cfg(std::move(config)) {
  cfg.validate();
  const auto& lc = cfg.level_channels;
  image_stem = register_module("image_stem", conv3x3(cfg.image_channels, cfg.base_channels));
  mask_stem = register_module("mask_stem", conv3x3(cfg.mask_channels, cfg.base_channels));
  image_sdb = register_module("image_sdb",
                              SlimDenseBlock(cfg.base_channels, cfg.sdb_layers, cfg.sdb_scale));
  mask_sdb = register_module("mask_sdb",
                             SlimDenseBlock(cfg.base_channels, cfg.sdb_layers, cfg.sdb_scale));
  time_mlp = register_module(
      "time_mlp", nn::Sequential(nn::Linear(cfg.time_embed_dim, cfg.time_embed_dim), nn::SiLU(),
                                 nn::Linear(cfg.time_embed_dim, cfg.time_embed_dim)));
  cond_units = register_module("cond_units", nn::ModuleList());
  den_units = register_module("den_units", nn::ModuleList());
  psa = register_module("psa", nn::ModuleList());
  int in = cfg.base_channels;
  for (int out : lc) {
    cond_units->push_back(EncoderUnit(in, out, cfg));
    den_units->push_back(EncoderUnit(in, out, cfg));
    psa->push_back(ParamSharedAttention(out, cfg.attention_reduction));
    in = out;
  }
  prior = register_module("prior", PriorBranch(cfg));
  bottleneck = register_module("bottleneck", Bottleneck(lc[3], cfg));
  decoder = register_module("decoder", Decoder(cfg));
}

ModelOutput PGDiffSegImpl::forward(const torch::Tensor& x_t, const torch::Tensor& image,
                                   const torch::Tensor& timesteps, ActivationTape* tape) {
  if (x_t.dim() != 4 || image.dim() != 4 || x_t.size(0) != image.size(0) ||
      x_t.size(2) != image.size(2) || x_t.size(3) != image.size(3)) {
    throw InvalidArgument("x_t and image must be [B, C, H, W] with matching B, H, W");
  }
  if (x_t.size(1) != cfg.mask_channels || image.size(1) != cfg.image_channels) {
    throw InvalidArgument("unexpected input channel count");
  }
  if (x_t.size(2) % 16 != 0 || x_t.size(3) % 16 != 0) {
    throw InvalidArgument("spatial size must be a multiple of 16");
  }
  if (timesteps.numel() != x_t.size(0)) {
    throw InvalidArgument("one timestep per batch item required");
  }
  auto rec = [&](const std::string& n, const torch::Tensor& t) {
    if (tape) tape->record(n, t);
  };

  auto t_embed = time_mlp->forward(time_embedding(timesteps, cfg.time_embed_dim).to(x_t.dtype()));

  auto c = image_sdb(image_stem(image));
  auto d = mask_sdb(mask_stem(x_t));
  rec("cond.sdb", c);
  rec("den.sdb", d);

  std::vector<torch::Tensor> skips;
  for (std::size_t i = 0; i < psa->size(); ++i) {
    auto cu = cond_units[i]->as<EncoderUnit>();
    auto du = den_units[i]->as<EncoderUnit>();
    auto attn = psa[i]->as<ParamSharedAttention>();
    const auto lvl = std::to_string(i + 1);
    auto hc = cu->features(c, t_embed);
    auto hd = du->features(d, t_embed);
    if (cfg.psa_placement == PsaPlacement::pre_downsample) {
      rec("cond.unit" + lvl, hc);
      rec("den.unit" + lvl, hd);
      std::tie(hc, hd) = attn->forward(hc, hd);
      rec("cond.psa" + lvl, hc);
      rec("den.psa" + lvl, hd);
      skips.push_back(hd);
      c = cu->downsample(hc);
      d = du->downsample(hd);
    } else {
      skips.push_back(hd);
      c = cu->downsample(hc);
      d = du->downsample(hd);
      rec("cond.unit" + lvl, c);
      rec("den.unit" + lvl, d);
      std::tie(c, d) = attn->forward(c, d);
      rec("cond.psa" + lvl, c);
      rec("den.psa" + lvl, d);
    }
  }

  auto fused = c + d;
  rec("fused", fused);
  ModelOutput out;
  out.prior = prior(image, tape);
  auto h = bottleneck(fused, out.prior.bottleneck_bias, t_embed);
  rec("bottleneck", h);
  std::reverse(skips.begin(), skips.end());
  out.eps_hat = decoder(h, skips, t_embed, tape);
  return out;
}

torch::Tensor PGDiffSegImpl::predict_eps(const torch::Tensor& x_t, const torch::Tensor& image,
                                         int t) {
  auto ts = torch::full({x_t.size(0)}, static_cast<int64_t>(t), torch::kInt64);
  return forward(x_t, image, ts).eps_hat;
}

std::vector<std::string> PGDiffSegImpl::layer_names() const {
  std::vector<std::string> names{"cond.sdb", "den.sdb"};
  for (int i = 1; i <= 4; ++i) {
    const auto l = std::to_string(i);
    for (const char* flow : {"cond", "den"}) {
      names.push_back(std::string(flow) + ".unit" + l);
      names.push_back(std::string(flow) + ".psa" + l);
    }
  }
  names.push_back("fused");
  names.push_back("prior.stem");
  for (int i = 1; i <= 4; ++i) names.push_back("prior.unit" + std::to_string(i));
  names.push_back("bottleneck");
  for (int i = 1; i <= 4; ++i) names.push_back("decoder.up" + std::to_string(i));
  return names;
}

PGDiffSeg clone_model(PGDiffSeg& model) {
  PGDiffSeg copy(model->config());
  copy->to(model->parameters().front().scalar_type());
  torch::NoGradGuard no_grad;
  auto src = model->named_parameters();
  for (auto& p : copy->named_parameters()) p.value().copy_(src[p.key()]);
  auto src_buf = model->named_buffers();
  for (auto& b : copy->named_buffers()) b.value().copy_(src_buf[b.key()]);
  copy->train(model->is_training());
  return copy;
}

}  // namespace pgdiffseg
