#include "pgdiffseg/config.hpp"

#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include <yaml-cpp/yaml.h>

#include "pgdiffseg/errors.hpp"

namespace pgdiffseg {

std::string to_string(Modality m) { return m == Modality::mri ? "mri" : "ultrasound"; }

Modality modality_from_string(const std::string& s) {
  if (s == "mri") return Modality::mri;
  if (s == "ultrasound") return Modality::ultrasound;
  throw InvalidArgument("unknown modality '" + s + "' (mri, ultrasound)");
}

namespace {

std::string rescale_name(IntensityRescale r) {
  return r == IntensityRescale::per_item ? "per_item" : "none";
}

IntensityRescale rescale_from(const std::string& s) {
  if (s == "per_item") return IntensityRescale::per_item;
  if (s == "none") return IntensityRescale::none;
  throw InvalidArgument("unknown rescale '" + s + "' (none, per_item)");
}

nlohmann::json optional_json(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

std::optional<double> optional_from(const nlohmann::json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<double>();
}

}  // namespace

nlohmann::json to_json(const ModelConfig& c) {
  return {{"image_channels", c.image_channels},
          {"mask_channels", c.mask_channels},
          {"base_channels", c.base_channels},
          {"level_channels", c.level_channels},
          {"sdb_layers", c.sdb_layers},
          {"sdb_scale", c.sdb_scale},
          {"attention_reduction", c.attention_reduction},
          {"time_embed_dim", c.time_embed_dim},
          {"image_size", c.image_size},
          {"res_blocks", c.res_blocks},
          {"group_norm_groups", c.group_norm_groups},
          {"conv_order", to_string(c.conv_order)},
          {"psa_placement", to_string(c.psa_placement)}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.image_channels = j.at("image_channels");
  c.mask_channels = j.at("mask_channels");
  c.base_channels = j.at("base_channels");
  c.level_channels = j.at("level_channels").get<std::array<int, 4>>();
  c.sdb_layers = j.at("sdb_layers");
  c.sdb_scale = j.at("sdb_scale");
  c.attention_reduction = j.at("attention_reduction");
  c.time_embed_dim = j.at("time_embed_dim");
  c.image_size = j.at("image_size");
  c.res_blocks = j.at("res_blocks");
  c.group_norm_groups = j.at("group_norm_groups");
  c.conv_order = conv_block_order_from_string(j.at("conv_order"));
  c.psa_placement = psa_placement_from_string(j.at("psa_placement"));
  return c;
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"learning_rate", c.learning_rate},
          {"optimizer", to_string(c.optimizer)},
          {"weight_decay", c.weight_decay},
          {"ema_decay", optional_json(c.ema_decay)},
          {"grad_clip", optional_json(c.grad_clip)},
          {"seed", c.seed},
          {"max_steps", c.max_steps},
          {"checkpoint_interval", c.checkpoint_interval},
          {"validation_interval", c.validation_interval},
          {"validation_images", c.validation_images},
          {"validation_nfe", c.validation_nfe},
          {"log_interval", c.log_interval},
          {"prior_pretrain_steps", c.prior_pretrain_steps},
          {"augment", c.augment},
          {"loss",
           {{"lambda1", c.loss.lambda1},
            {"lambda2", c.loss.lambda2},
            {"dice_epsilon", c.loss.dice_epsilon}}},
          {"diffusion_steps", c.diffusion_steps},
          {"variance", to_string(c.variance)}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.epochs = j.at("epochs");
  c.batch_size = j.at("batch_size");
  c.learning_rate = j.at("learning_rate");
  c.optimizer = optimizer_kind_from_string(j.at("optimizer"));
  c.weight_decay = j.at("weight_decay");
  c.ema_decay = optional_from(j.at("ema_decay"));
  c.grad_clip = optional_from(j.at("grad_clip"));
  c.seed = j.at("seed");
  c.max_steps = j.at("max_steps");
  c.checkpoint_interval = j.at("checkpoint_interval");
  c.validation_interval = j.at("validation_interval");
  c.validation_images = j.at("validation_images");
  c.validation_nfe = j.at("validation_nfe");
  c.log_interval = j.at("log_interval");
  c.prior_pretrain_steps = j.at("prior_pretrain_steps");
  c.augment = j.at("augment");
  c.loss.lambda1 = j.at("loss").at("lambda1");
  c.loss.lambda2 = j.at("loss").at("lambda2");
  c.loss.dice_epsilon = j.at("loss").at("dice_epsilon");
  c.diffusion_steps = j.at("diffusion_steps");
  c.variance = variance_choice_from_string(j.at("variance"));
  return c;
}

void RunConfig::validate() const {
  model.validate();
  train.validate();
  if (data.preprocess.target_size != model.image_size) {
    throw InvalidArgument("data target size must equal model.image_size");
  }
  data.preprocess.validate();
  if (eval.options.repeats < 1) throw InvalidArgument("eval.repeats must be >= 1");
}

namespace {

using Setter = std::function<void(RunConfig&, const YAML::Node&, const std::string&)>;

int line_of(const YAML::Node& n) { return n.Mark().line >= 0 ? n.Mark().line + 1 : 0; }

template <class T>
T value(const YAML::Node& n, const std::string& key) {
  try {
    return n.as<T>();
  } catch (const YAML::Exception&) {
    throw ConfigError(key, line_of(n), "invalid value for '" + key + "' at line " +
                                           std::to_string(line_of(n)));
  }
}

template <class F>
auto guarded(const YAML::Node& n, const std::string& key, F&& parse) {
  try {
    return parse(value<std::string>(n, key));
  } catch (const InvalidArgument& e) {
    throw ConfigError(key, line_of(n), key + " (line " + std::to_string(line_of(n)) + "): " +
                                           e.what());
  }
}

std::optional<double> optional_value(const YAML::Node& n, const std::string& key) {
  if (n.IsNull()) return std::nullopt;
  const auto s = value<std::string>(n, key);
  if (s == "none" || s == "null" || s == "~") return std::nullopt;
  return value<double>(n, key);
}

#define PGDS_SETTER [](RunConfig & c, const YAML::Node& n, const std::string& k)

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      {"model.image_channels", PGDS_SETTER { c.model.image_channels = value<int>(n, k); }},
      {"model.mask_channels", PGDS_SETTER { c.model.mask_channels = value<int>(n, k); }},
      {"model.base_channels", PGDS_SETTER {
        const int base = value<int>(n, k);
        c.model.base_channels = base;
        c.model.level_channels = {base, 2 * base, 4 * base, 8 * base};
      }},
      {"model.level_channels", PGDS_SETTER { c.model.level_channels = value<std::array<int, 4>>(n, k); }},
      {"model.sdb_layers", PGDS_SETTER { c.model.sdb_layers = value<int>(n, k); }},
      {"model.sdb_scale", PGDS_SETTER { c.model.sdb_scale = value<double>(n, k); }},
      {"model.attention_reduction", PGDS_SETTER { c.model.attention_reduction = value<int>(n, k); }},
      {"model.time_embed_dim", PGDS_SETTER { c.model.time_embed_dim = value<int>(n, k); }},
      {"model.image_size", PGDS_SETTER { c.model.image_size = value<int>(n, k); }},
      {"model.res_blocks", PGDS_SETTER { c.model.res_blocks = value<int>(n, k); }},
      {"model.group_norm_groups", PGDS_SETTER { c.model.group_norm_groups = value<int>(n, k); }},
      {"model.conv_order", PGDS_SETTER { c.model.conv_order = guarded(n, k, conv_block_order_from_string); }},
      {"model.psa_placement", PGDS_SETTER { c.model.psa_placement = guarded(n, k, psa_placement_from_string); }},

      {"schedule.steps", PGDS_SETTER { c.train.diffusion_steps = value<int>(n, k); }},
      {"schedule.variance", PGDS_SETTER { c.train.variance = guarded(n, k, variance_choice_from_string); }},

      {"train.epochs", PGDS_SETTER { c.train.epochs = value<int>(n, k); }},
      {"train.batch_size", PGDS_SETTER { c.train.batch_size = value<int>(n, k); }},
      {"train.learning_rate", PGDS_SETTER { c.train.learning_rate = value<double>(n, k); }},
      {"train.optimizer", PGDS_SETTER { c.train.optimizer = guarded(n, k, optimizer_kind_from_string); }},
      {"train.weight_decay", PGDS_SETTER { c.train.weight_decay = value<double>(n, k); }},
      {"train.ema_decay", PGDS_SETTER { c.train.ema_decay = optional_value(n, k); }},
      {"train.grad_clip", PGDS_SETTER { c.train.grad_clip = optional_value(n, k); }},
      {"train.seed", PGDS_SETTER { c.train.seed = value<std::uint64_t>(n, k); }},
      {"train.max_steps", PGDS_SETTER { c.train.max_steps = value<std::int64_t>(n, k); }},
      {"train.checkpoint_interval", PGDS_SETTER { c.train.checkpoint_interval = value<int>(n, k); }},
      {"train.validation_interval", PGDS_SETTER { c.train.validation_interval = value<int>(n, k); }},
      {"train.validation_images", PGDS_SETTER { c.train.validation_images = value<int>(n, k); }},
      {"train.validation_nfe", PGDS_SETTER { c.train.validation_nfe = value<int>(n, k); }},
      {"train.log_interval", PGDS_SETTER { c.train.log_interval = value<int>(n, k); }},
      {"train.prior_pretrain_steps", PGDS_SETTER { c.train.prior_pretrain_steps = value<std::int64_t>(n, k); }},
      {"train.augment", PGDS_SETTER { c.train.augment = value<bool>(n, k); }},

      {"loss.lambda1", PGDS_SETTER { c.train.loss.lambda1 = value<double>(n, k); }},
      {"loss.lambda2", PGDS_SETTER { c.train.loss.lambda2 = value<double>(n, k); }},
      {"loss.dice_epsilon", PGDS_SETTER { c.train.loss.dice_epsilon = value<double>(n, k); }},

      {"sampler.kind", PGDS_SETTER { c.sampler.kind = guarded(n, k, sampler_kind_from_string); }},
      {"sampler.nfe", PGDS_SETTER { c.sampler.nfe = value<int>(n, k); }},
      {"sampler.eta", PGDS_SETTER { c.sampler.eta = value<double>(n, k); }},
      {"sampler.seed", PGDS_SETTER { c.sampler.seed = value<std::uint64_t>(n, k); }},
      {"sampler.binarize_threshold", PGDS_SETTER { c.sampler.binarize_threshold = value<double>(n, k); }},

      {"data.path", PGDS_SETTER { c.data.path = value<std::string>(n, k); }},
      {"data.synthetic", PGDS_SETTER { c.data.synthetic = value<std::size_t>(n, k); }},
      {"data.modality", PGDS_SETTER {
        c.data.modality = guarded(n, k, modality_from_string);
        const int size = c.data.preprocess.target_size;
        c.data.preprocess = c.data.modality == Modality::mri ? PreprocessConfig::mri(size)
                                                             : PreprocessConfig::ultrasound(size);
      }},
      {"data.window", PGDS_SETTER {
        const auto w = value<std::array<double, 2>>(n, k);
        c.data.preprocess.window_lo = w[0];
        c.data.preprocess.window_hi = w[1];
      }},
      {"data.rescale", PGDS_SETTER { c.data.preprocess.rescale = guarded(n, k, rescale_from); }},
      {"data.train_fraction", PGDS_SETTER { c.data.fractions.train = value<double>(n, k); }},
      {"data.val_fraction", PGDS_SETTER { c.data.fractions.val = value<double>(n, k); }},
      {"data.cache", PGDS_SETTER { c.data.cache = value<std::string>(n, k); }},

      {"eval.repeats", PGDS_SETTER { c.eval.options.repeats = c.eval.sweep.repeats = value<int>(n, k); }},
      {"eval.batch_size", PGDS_SETTER { c.eval.options.batch_size = c.eval.sweep.batch_size = value<int>(n, k); }},
      {"eval.sweep_nfe", PGDS_SETTER { c.eval.sweep.nfes = value<std::vector<int>>(n, k); }},
      {"eval.sweep_kinds", PGDS_SETTER {
        c.eval.sweep.kinds.clear();
        for (const auto& item : n) {
          c.eval.sweep.kinds.push_back(guarded(item, k, sampler_kind_from_string));
        }
      }},
  };
  return table;
}

#undef PGDS_SETTER

// Keys whose effect depends on others; applied first within their section.
bool applied_early(const std::string& path) {
  return path == "data.modality" || path == "model.base_channels";
}

}  // namespace

RunConfig parse_run_config(const std::string& yaml_text, RunConfig base) {
  YAML::Node root;
  try {
    root = YAML::Load(yaml_text);
  } catch (const YAML::ParserException& e) {
    throw ConfigError("", e.mark.line + 1, std::string("config parse error: ") + e.what());
  }
  if (root.IsNull()) return base;
  if (!root.IsMap()) throw ConfigError("", line_of(root), "config root must be a mapping");

  std::vector<std::pair<std::string, YAML::Node>> early, late;
  for (const auto& section : root) {
    const auto name = section.first.as<std::string>();
    if (!section.second.IsMap()) {
      throw ConfigError(name, line_of(section.first),
                        "section '" + name + "' (line " + std::to_string(line_of(section.first)) +
                            ") must be a mapping");
    }
    for (const auto& entry : section.second) {
      const auto key = name + "." + entry.first.as<std::string>();
      if (!setters().count(key)) {
        throw ConfigError(key, line_of(entry.first),
                          "unknown config key '" + key + "' at line " +
                              std::to_string(line_of(entry.first)));
      }
      (applied_early(key) ? early : late).emplace_back(key, entry.second);
    }
  }
  for (auto* list : {&early, &late}) {
    for (const auto& [key, node] : *list) setters().at(key)(base, node, key);
  }
  base.data.preprocess.target_size = base.model.image_size;
  return base;
}

RunConfig load_run_config(const std::filesystem::path& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str(), std::move(base));
}

namespace {

nlohmann::json run_json(const RunConfig& c) {
  auto model = to_json(c.model);
  auto train = to_json(c.train);
  nlohmann::json loss = train["loss"];
  nlohmann::json schedule = {{"steps", c.train.diffusion_steps},
                             {"variance", to_string(c.train.variance)}};
  for (const char* k : {"loss", "diffusion_steps", "variance"}) train.erase(k);
  std::vector<std::string> kinds;
  for (auto k : c.eval.sweep.kinds) kinds.push_back(to_string(k));
  return {{"model", model},
          {"schedule", schedule},
          {"train", train},
          {"loss", loss},
          {"sampler",
           {{"kind", to_string(c.sampler.kind)},
            {"nfe", c.sampler.nfe},
            {"eta", c.sampler.eta},
            {"seed", c.sampler.seed},
            {"binarize_threshold", c.sampler.binarize_threshold}}},
          {"data",
           {{"path", c.data.path.string()},
            {"synthetic", c.data.synthetic},
            {"modality", to_string(c.data.modality)},
            {"window", {c.data.preprocess.window_lo, c.data.preprocess.window_hi}},
            {"rescale", rescale_name(c.data.preprocess.rescale)},
            {"train_fraction", c.data.fractions.train},
            {"val_fraction", c.data.fractions.val},
            {"cache", c.data.cache.string()}}},
          {"eval",
           {{"repeats", c.eval.options.repeats},
            {"batch_size", c.eval.options.batch_size},
            {"sweep_nfe", c.eval.sweep.nfes},
            {"sweep_kinds", kinds}}}};
}

void emit(YAML::Emitter& out, const nlohmann::json& j) {
  if (j.is_object()) {
    out << YAML::BeginMap;
    for (const auto& [k, v] : j.items()) {
      out << YAML::Key << k << YAML::Value;
      emit(out, v);
    }
    out << YAML::EndMap;
  } else if (j.is_array()) {
    out << YAML::Flow << YAML::BeginSeq;
    for (const auto& v : j) emit(out, v);
    out << YAML::EndSeq;
  } else if (j.is_null()) {
    out << YAML::Null;
  } else if (j.is_string()) {
    out << YAML::DoubleQuoted << j.get<std::string>();
  } else if (j.is_boolean()) {
    out << j.get<bool>();
  } else if (j.is_number_unsigned()) {
    out << j.get<std::uint64_t>();
  } else if (j.is_number_integer()) {
    out << j.get<std::int64_t>();
  } else {
    out << YAML::Precision(17) << j.get<double>();
  }
}

}  // namespace

std::string dump_run_config(const RunConfig& cfg) {
  YAML::Emitter out;
  emit(out, run_json(cfg));
  return std::string(out.c_str()) + "\n";
}

std::string config_hash(const RunConfig& cfg) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : run_json(cfg).dump()) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf, 10);
}

}  // namespace pgdiffseg
