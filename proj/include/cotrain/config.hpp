#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "cotrain/data.hpp"
#include "cotrain/errors.hpp"
#include "cotrain/trainer.hpp"

namespace cotrain {

// Full experiment description, read from a line-oriented "key = value" file
// with [section] headers. Unknown sections or keys are rejected with the
// offending line number; serialization is canonical so parse -> serialize ->
// parse is a fixpoint.
struct ExperimentConfig {
  CoTrainConfig train;
  std::string out_dir = "runs/exp";
  std::string data_dir = "data/synth";
  double labeled_ratio = 0.2;
  SynthSpec synth;  // synth.seed is the data seed; also seeds the split
  std::vector<double> probe_eps{1e-4, 1e-3, 1e-2};
  int probe_epochs = 40;
  std::string probe_reference_ckpt;
  std::vector<Method> ablate_methods{Method::kDct, Method::kIndependent, Method::kJsdOnly};
  std::vector<std::uint64_t> ablate_seeds{1, 2, 3};
  std::vector<int> ablate_views;  // empty: use the experiment's view count

  void validate() const {
    train.validate();
    synth.validate();
    if (labeled_ratio <= 0 || labeled_ratio > 1)
      throw ConfigError("labeled_ratio must be in (0,1]");
    if (probe_epochs < 1) throw ConfigError("probe epochs must be >= 1");
  }
};

namespace cfgio {

inline std::string fmt_double(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  (void)ec;
  return std::string(buf, p);
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline double parse_double(const std::string& v, int line) {
  try {
    std::size_t pos = 0;
    const double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("expected a number, got '" + v + "'", line);
  }
}

inline long parse_int(const std::string& v, int line) {
  try {
    std::size_t pos = 0;
    const long d = std::stol(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("expected an integer, got '" + v + "'", line);
  }
}

inline bool parse_bool(const std::string& v, int line) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("expected true/false, got '" + v + "'", line);
}

inline std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream is(v);
  while (std::getline(is, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

}  // namespace cfgio

inline ExperimentConfig parse_config(const std::string& text) {
  ExperimentConfig cfg;
  std::istringstream is(text);
  std::string raw;
  std::string section;
  int line_no = 0;

  auto apply = [&](const std::string& key, const std::string& value, int line) {
    using namespace cfgio;
    auto& t = cfg.train;
    if (section == "experiment") {
      if (key == "method") t.method = parse_method(value);
      else if (key == "seed") t.seed = static_cast<std::uint64_t>(parse_int(value, line));
      else if (key == "views") t.views = static_cast<int>(parse_int(value, line));
      else if (key == "epochs") t.epochs = static_cast<int>(parse_int(value, line));
      else if (key == "iters_per_epoch") t.iters_per_epoch = static_cast<int>(parse_int(value, line));
      else if (key == "batch_size") t.batch_size = static_cast<int>(parse_int(value, line));
      else if (key == "checkpoint_interval") t.checkpoint_interval = static_cast<int>(parse_int(value, line));
      else if (key == "out_dir") cfg.out_dir = value;
      else throw ConfigError("unknown key '" + key + "' in [experiment]", line);
    } else if (section == "data") {
      if (key == "data_dir") cfg.data_dir = value;
      else if (key == "labeled_ratio") cfg.labeled_ratio = parse_double(value, line);
      else if (key == "image_size") cfg.synth.image_size = static_cast<int>(parse_int(value, line));
      else if (key == "num_classes") cfg.synth.num_classes = static_cast<int>(parse_int(value, line));
      else if (key == "num_train") cfg.synth.num_train = static_cast<int>(parse_int(value, line));
      else if (key == "num_val") cfg.synth.num_val = static_cast<int>(parse_int(value, line));
      else if (key == "noise_sigma") cfg.synth.noise_sigma = parse_double(value, line);
      else if (key == "seed") cfg.synth.seed = static_cast<std::uint64_t>(parse_int(value, line));
      else throw ConfigError("unknown key '" + key + "' in [data]", line);
    } else if (section == "model") {
      if (key == "base_width") t.model.base_width = static_cast<int>(parse_int(value, line));
      else if (key == "depth") t.model.depth = static_cast<int>(parse_int(value, line));
      else if (key == "dropout_rate") t.model.dropout_rate = parse_double(value, line);
      else throw ConfigError("unknown key '" + key + "' in [model]", line);
    } else if (section == "optim") {
      if (key == "lr") t.optim.lr = parse_double(value, line);
      else if (key == "weight_decay") t.optim.weight_decay = parse_double(value, line);
      else if (key == "beta1") t.optim.beta1 = parse_double(value, line);
      else if (key == "beta2") t.optim.beta2 = parse_double(value, line);
      else if (key == "epsilon") t.optim.epsilon = parse_double(value, line);
      else if (key == "lr_decay_every") t.lr_decay_every = static_cast<int>(parse_int(value, line));
      else if (key == "lr_decay_factor") t.lr_decay_factor = parse_double(value, line);
      else throw ConfigError("unknown key '" + key + "' in [optim]", line);
    } else if (section == "ramp_cot" || section == "ramp_div") {
      RampConfig& r = section == "ramp_cot" ? t.ramp_cot : t.ramp_div;
      if (key == "lambda_max") r.lambda_max = parse_double(value, line);
      else if (key == "t_ini") r.t_ini = static_cast<int>(parse_int(value, line));
      else if (key == "t_end") r.t_end = static_cast<int>(parse_int(value, line));
      else throw ConfigError("unknown key '" + key + "' in [" + section + "]", line);
    } else if (section == "adv") {
      if (key == "eps_fgsm") t.adv.eps_fgsm = parse_double(value, line);
      else if (key == "eps_vat") t.adv.eps_vat = parse_double(value, line);
      else if (key == "xi") t.adv.xi = parse_double(value, line);
      else if (key == "n_power") t.adv.n_power = static_cast<int>(parse_int(value, line));
      else throw ConfigError("unknown key '" + key + "' in [adv]", line);
    } else if (section == "augment") {
      if (key == "enabled") t.augment.enabled = parse_bool(value, line);
      else if (key == "rotation_deg") t.augment.rotation_deg = parse_double(value, line);
      else if (key == "flip_prob") t.augment.flip_prob = parse_double(value, line);
      else if (key == "crop_min") t.augment.crop_min = parse_double(value, line);
      else if (key == "crop_max") t.augment.crop_max = parse_double(value, line);
      else throw ConfigError("unknown key '" + key + "' in [augment]", line);
    } else if (section == "pseudo_label") {
      if (key == "alpha_start") t.pl_alpha_start = parse_double(value, line);
      else if (key == "alpha_end") t.pl_alpha_end = parse_double(value, line);
      else throw ConfigError("unknown key '" + key + "' in [pseudo_label]", line);
    } else if (section == "mean_teacher") {
      if (key == "ema_alpha") t.mt_ema_alpha = parse_double(value, line);
      else throw ConfigError("unknown key '" + key + "' in [mean_teacher]", line);
    } else if (section == "probe") {
      if (key == "eps_list") {
        cfg.probe_eps.clear();
        for (const auto& s : split_list(value)) cfg.probe_eps.push_back(parse_double(s, line));
      } else if (key == "epochs") {
        cfg.probe_epochs = static_cast<int>(parse_int(value, line));
      } else if (key == "reference_ckpt") {
        cfg.probe_reference_ckpt = value;
      } else {
        throw ConfigError("unknown key '" + key + "' in [probe]", line);
      }
    } else if (section == "ablate") {
      if (key == "methods") {
        cfg.ablate_methods.clear();
        for (const auto& s : split_list(value)) cfg.ablate_methods.push_back(parse_method(s));
      } else if (key == "seeds") {
        cfg.ablate_seeds.clear();
        for (const auto& s : split_list(value))
          cfg.ablate_seeds.push_back(static_cast<std::uint64_t>(parse_int(s, line)));
      } else if (key == "views") {
        cfg.ablate_views.clear();
        for (const auto& s : split_list(value))
          cfg.ablate_views.push_back(static_cast<int>(parse_int(s, line)));
      } else {
        throw ConfigError("unknown key '" + key + "' in [ablate]", line);
      }
    } else {
      throw ConfigError("key outside of any known section", line);
    }
  };

  while (std::getline(is, raw)) {
    ++line_no;
    std::string line = raw;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = cfgio::trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("malformed section header '" + raw + "'", line_no);
      section = line.substr(1, line.size() - 2);
      static const char* known[] = {"experiment", "data", "model", "optim", "ramp_cot",
                                    "ramp_div", "adv", "augment", "pseudo_label", "mean_teacher",
                                    "probe", "ablate"};
      bool ok = false;
      for (const char* k : known) ok = ok || section == k;
      if (!ok) throw ConfigError("unknown section [" + section + "]", line_no);
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("expected 'key = value', got '" + raw + "'", line_no);
    const std::string key = cfgio::trim(line.substr(0, eq));
    const std::string value = cfgio::trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("empty key", line_no);
    apply(key, value, line_no);
  }
  cfg.validate();
  return cfg;
}

inline ExperimentConfig parse_config_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config file " + path);
  std::ostringstream buf;
  buf << is.rdbuf();
  return parse_config(buf.str());
}

inline std::string serialize_config(const ExperimentConfig& cfg) {
  using cfgio::fmt_double;
  const auto& t = cfg.train;
  std::ostringstream os;
  os << "[experiment]\n";
  os << "method = " << method_name(t.method) << '\n';
  os << "seed = " << t.seed << '\n';
  os << "views = " << t.views << '\n';
  os << "epochs = " << t.epochs << '\n';
  os << "iters_per_epoch = " << t.iters_per_epoch << '\n';
  os << "batch_size = " << t.batch_size << '\n';
  os << "checkpoint_interval = " << t.checkpoint_interval << '\n';
  os << "out_dir = " << cfg.out_dir << '\n';
  os << "\n[data]\n";
  os << "data_dir = " << cfg.data_dir << '\n';
  os << "labeled_ratio = " << fmt_double(cfg.labeled_ratio) << '\n';
  os << "image_size = " << cfg.synth.image_size << '\n';
  os << "num_classes = " << cfg.synth.num_classes << '\n';
  os << "num_train = " << cfg.synth.num_train << '\n';
  os << "num_val = " << cfg.synth.num_val << '\n';
  os << "noise_sigma = " << fmt_double(cfg.synth.noise_sigma) << '\n';
  os << "seed = " << cfg.synth.seed << '\n';
  os << "\n[model]\n";
  os << "base_width = " << t.model.base_width << '\n';
  os << "depth = " << t.model.depth << '\n';
  os << "dropout_rate = " << fmt_double(t.model.dropout_rate) << '\n';
  os << "\n[optim]\n";
  os << "lr = " << fmt_double(t.optim.lr) << '\n';
  os << "weight_decay = " << fmt_double(t.optim.weight_decay) << '\n';
  os << "beta1 = " << fmt_double(t.optim.beta1) << '\n';
  os << "beta2 = " << fmt_double(t.optim.beta2) << '\n';
  os << "epsilon = " << fmt_double(t.optim.epsilon) << '\n';
  os << "lr_decay_every = " << t.lr_decay_every << '\n';
  os << "lr_decay_factor = " << fmt_double(t.lr_decay_factor) << '\n';
  os << "\n[ramp_cot]\n";
  os << "lambda_max = " << fmt_double(t.ramp_cot.lambda_max) << '\n';
  os << "t_ini = " << t.ramp_cot.t_ini << '\n';
  os << "t_end = " << t.ramp_cot.t_end << '\n';
  os << "\n[ramp_div]\n";
  os << "lambda_max = " << fmt_double(t.ramp_div.lambda_max) << '\n';
  os << "t_ini = " << t.ramp_div.t_ini << '\n';
  os << "t_end = " << t.ramp_div.t_end << '\n';
  os << "\n[adv]\n";
  os << "eps_fgsm = " << fmt_double(t.adv.eps_fgsm) << '\n';
  os << "eps_vat = " << fmt_double(t.adv.eps_vat) << '\n';
  os << "xi = " << fmt_double(t.adv.xi) << '\n';
  os << "n_power = " << t.adv.n_power << '\n';
  os << "\n[augment]\n";
  os << "enabled = " << (t.augment.enabled ? "true" : "false") << '\n';
  os << "rotation_deg = " << fmt_double(t.augment.rotation_deg) << '\n';
  os << "flip_prob = " << fmt_double(t.augment.flip_prob) << '\n';
  os << "crop_min = " << fmt_double(t.augment.crop_min) << '\n';
  os << "crop_max = " << fmt_double(t.augment.crop_max) << '\n';
  os << "\n[pseudo_label]\n";
  os << "alpha_start = " << fmt_double(t.pl_alpha_start) << '\n';
  os << "alpha_end = " << fmt_double(t.pl_alpha_end) << '\n';
  os << "\n[mean_teacher]\n";
  os << "ema_alpha = " << fmt_double(t.mt_ema_alpha) << '\n';
  os << "\n[probe]\n";
  os << "eps_list = ";
  for (std::size_t i = 0; i < cfg.probe_eps.size(); ++i)
    os << (i ? "," : "") << fmt_double(cfg.probe_eps[i]);
  os << '\n';
  os << "epochs = " << cfg.probe_epochs << '\n';
  os << "reference_ckpt = " << cfg.probe_reference_ckpt << '\n';
  os << "\n[ablate]\n";
  os << "methods = ";
  for (std::size_t i = 0; i < cfg.ablate_methods.size(); ++i)
    os << (i ? "," : "") << method_name(cfg.ablate_methods[i]);
  os << '\n';
  os << "seeds = ";
  for (std::size_t i = 0; i < cfg.ablate_seeds.size(); ++i)
    os << (i ? "," : "") << cfg.ablate_seeds[i];
  os << '\n';
  os << "views = ";
  for (std::size_t i = 0; i < cfg.ablate_views.size(); ++i)
    os << (i ? "," : "") << cfg.ablate_views[i];
  os << '\n';
  return os.str();
}

// FNV-1a of the canonical serialization.
inline std::uint64_t config_hash(const ExperimentConfig& cfg) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : serialize_config(cfg)) h = (h ^ ch) * 1099511628211ULL;
  return h;
}

}  // namespace cotrain
