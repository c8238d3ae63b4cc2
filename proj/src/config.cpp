#include "amr/config.hpp"

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iomanip>
#include <sstream>

#include "amr/errors.hpp"

namespace amr {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string fmt_double(double v) {
  std::ostringstream out;
  out << std::setprecision(17) << v;
  // Shortest text that round-trips.
  for (int p = 1; p <= 17; ++p) {
    std::ostringstream s;
    s << std::setprecision(p) << v;
    if (std::stod(s.str()) == v) return s.str();
  }
  return out.str();
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw UsageError("config key '" + key + "': expected a number, got '" + v + "'");
  }
}

std::int64_t parse_int(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const long long i = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return i;
  } catch (const std::exception&) {
    throw UsageError("config key '" + key + "': expected an integer, got '" + v + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw UsageError("config key '" + key + "': expected true/false, got '" + v + "'");
}

struct Field {
  std::string key;
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

template <typename T>
Field int_field(std::string key, T ExperimentConfig::*member) {
  return {key,
          [key, member](ExperimentConfig& c, const std::string& v) { c.*member = static_cast<T>(parse_int(key, v)); },
          [member](const ExperimentConfig& c) { return std::to_string(c.*member); }};
}

Field seed_field(std::string key, std::uint64_t ExperimentConfig::*member) {
  auto parse = [key](const std::string& v) {
    try {
      std::size_t pos = 0;
      if (v.empty() || v[0] == '-') throw std::invalid_argument(v);
      const unsigned long long u = std::stoull(v, &pos);
      if (pos != v.size()) throw std::invalid_argument(v);
      return static_cast<std::uint64_t>(u);
    } catch (const std::exception&) {
      throw UsageError("config key '" + key + "': expected a non-negative integer, got '" + v + "'");
    }
  };
  return {key, [parse, member](ExperimentConfig& c, const std::string& v) { c.*member = parse(v); },
          [member](const ExperimentConfig& c) { return std::to_string(c.*member); }};
}

Field double_field(std::string key, double ExperimentConfig::*member) {
  return {key, [key, member](ExperimentConfig& c, const std::string& v) { c.*member = parse_double(key, v); },
          [member](const ExperimentConfig& c) { return fmt_double(c.*member); }};
}

Field optim_field(std::string key, double OptimizerConfig::*member) {
  return {key, [key, member](ExperimentConfig& c, const std::string& v) { c.optim.*member = parse_double(key, v); },
          [member](const ExperimentConfig& c) { return fmt_double(c.optim.*member); }};
}

Field bool_field(std::string key, bool ExperimentConfig::*member) {
  return {key, [key, member](ExperimentConfig& c, const std::string& v) { c.*member = parse_bool(key, v); },
          [member](const ExperimentConfig& c) { return std::string(c.*member ? "true" : "false"); }};
}

Field string_field(std::string key, std::string ExperimentConfig::*member) {
  return {key, [member](ExperimentConfig& c, const std::string& v) { c.*member = v; },
          [member](const ExperimentConfig& c) { return c.*member; }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    f.push_back(string_field("dataset", &ExperimentConfig::dataset));
    f.push_back(string_field("data_root", &ExperimentConfig::data_root));
    f.push_back({"mix",
                 [](ExperimentConfig& c, const std::string& v) {
                   try {
                     c.mix = parse_mix_mode(v);
                   } catch (const std::invalid_argument&) {
                     throw UsageError("config key 'mix': unknown mode '" + v +
                                      "' (none, mixup, bern, mixup_k, bern_k, sup_bern, acai)");
                   }
                 },
                 [](const ExperimentConfig& c) { return to_string(c.mix); }});
    f.push_back(int_field("k", &ExperimentConfig::k));
    f.push_back(double_field("lambda", &ExperimentConfig::lambda));
    f.push_back(double_field("beta", &ExperimentConfig::beta));
    f.push_back(int_field("d_h", &ExperimentConfig::d_h));
    f.push_back(optim_field("lr", &OptimizerConfig::lr));
    f.push_back(optim_field("b1", &OptimizerConfig::b1));
    f.push_back(optim_field("b2", &OptimizerConfig::b2));
    f.push_back(optim_field("weight_decay", &OptimizerConfig::weight_decay));
    f.push_back(double_field("probe_lr", &ExperimentConfig::probe_lr));
    f.push_back(int_field("epochs", &ExperimentConfig::epochs));
    f.push_back(int_field("batch_size", &ExperimentConfig::batch_size));
    f.push_back(seed_field("seed", &ExperimentConfig::seed));
    f.push_back(int_field("n_keep", &ExperimentConfig::n_keep));
    f.push_back(int_field("val_size", &ExperimentConfig::val_size));
    f.push_back(bool_field("validate_on_test", &ExperimentConfig::validate_on_test));
    f.push_back(string_field("output", &ExperimentConfig::output));
    f.push_back(string_field("resume", &ExperimentConfig::resume));
    f.push_back(int_field("width", &ExperimentConfig::width));
    f.push_back(int_field("mlp_layers", &ExperimentConfig::mlp_layers));
    f.push_back(int_field("sn_iters", &ExperimentConfig::sn_iters));
    f.push_back({"mask_gradient",
                 [](ExperimentConfig& c, const std::string& v) {
                   if (v == "straight_through") {
                     c.mask_gradient = MaskGradient::StraightThrough;
                   } else if (v == "relaxed") {
                     c.mask_gradient = MaskGradient::Relaxed;
                   } else {
                     throw UsageError("config key 'mask_gradient': expected straight_through or relaxed, got '" + v +
                                      "'");
                   }
                 },
                 [](const ExperimentConfig& c) {
                   return std::string(c.mask_gradient == MaskGradient::Relaxed ? "relaxed" : "straight_through");
                 }});
    f.push_back(double_field("temperature", &ExperimentConfig::temperature));
    f.push_back(bool_field("cls_on_real", &ExperimentConfig::cls_on_real));
    f.push_back(double_field("acai_gamma", &ExperimentConfig::acai_gamma));
    f.push_back(int_field("spiral_n", &ExperimentConfig::spiral_n));
    f.push_back(double_field("noise_sd", &ExperimentConfig::noise_sd));
    f.push_back(bool_field("eval_probe", &ExperimentConfig::eval_probe));
    f.push_back(bool_field("eval_disentanglement", &ExperimentConfig::eval_disentanglement));
    f.push_back(bool_field("eval_grids", &ExperimentConfig::eval_grids));
    f.push_back(bool_field("eval_spiral", &ExperimentConfig::eval_spiral));
    f.push_back(int_field("dis_votes", &ExperimentConfig::dis_votes));
    f.push_back(int_field("dis_batch", &ExperimentConfig::dis_batch));
    f.push_back(int_field("grid_steps", &ExperimentConfig::grid_steps));
    f.push_back(int_field("grid_rows", &ExperimentConfig::grid_rows));
    f.push_back(int_field("spiral_mixes", &ExperimentConfig::spiral_mixes));
    f.push_back(bool_field("log_wall_time", &ExperimentConfig::log_wall_time));
    return f;
  }();
  return table;
}

const Field& find_field(const std::string& key) {
  for (const auto& f : fields()) {
    if (f.key == key) return f;
  }
  throw UsageError("unknown config key '" + key + "'");
}

}  // namespace

void OptimizerConfig::validate() const {
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw UsageError("config key 'lr': must be >= 0");
  if (!(b1 >= 0.0 && b1 < 1.0)) throw UsageError("config key 'b1': must lie in [0, 1)");
  if (!(b2 >= 0.0 && b2 < 1.0)) throw UsageError("config key 'b2': must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) throw UsageError("config key 'weight_decay': must be >= 0");
}

void ExperimentConfig::validate() const {
  if (dataset.empty()) throw UsageError("config key 'dataset' is required");
  const bool k_mode = mix == MixMode::MixupK || mix == MixMode::BernK;
  if (k_mode && k < 2) throw UsageError("config key 'k': must be >= 2 for mix = " + to_string(mix));
  if (!k_mode && k != 2) throw UsageError("config key 'k': only mixup_k / bern_k take k != 2");
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw UsageError("config key 'lambda': must be finite and >= 0");
  if (!(beta >= 0.0) || !std::isfinite(beta)) throw UsageError("config key 'beta': must be finite and >= 0");
  if (d_h != 32 && d_h != 256 && d_h != 1024) throw UsageError("config key 'd_h': must be 32, 256 or 1024");
  optim.validate();
  if (!(probe_lr >= 0.0)) throw UsageError("config key 'probe_lr': must be >= 0");
  if (epochs < 0) throw UsageError("config key 'epochs': must be >= 0");
  if (batch_size < 2) throw UsageError("config key 'batch_size': must be >= 2");
  if (batch_size < k) throw UsageError("config key 'batch_size': must be >= k");
  if (n_keep < 0) throw UsageError("config key 'n_keep': must be >= 0");
  if (val_size < 0) throw UsageError("config key 'val_size': must be >= 0");
  if (output.empty()) throw UsageError("config key 'output' must not be empty");
  if (width < 1) throw UsageError("config key 'width': must be >= 1");
  if (mlp_layers < 1) throw UsageError("config key 'mlp_layers': must be >= 1");
  if (sn_iters < 1) throw UsageError("config key 'sn_iters': must be >= 1");
  if (!(temperature > 0.0)) throw UsageError("config key 'temperature': must be > 0");
  if (!(acai_gamma >= 0.0 && acai_gamma <= 1.0)) throw UsageError("config key 'acai_gamma': must lie in [0, 1]");
  if (spiral_n < 2) throw UsageError("config key 'spiral_n': must be >= 2");
  if (!(noise_sd >= 0.0)) throw UsageError("config key 'noise_sd': must be >= 0");
  if (dis_votes < 5) throw UsageError("config key 'dis_votes': must be >= 5");
  if (dis_batch < 2) throw UsageError("config key 'dis_batch': must be >= 2");
  if (grid_steps < 2) throw UsageError("config key 'grid_steps': must be >= 2");
  if (grid_rows < 1) throw UsageError("config key 'grid_rows': must be >= 1");
  if (spiral_mixes < 1) throw UsageError("config key 'spiral_mixes': must be >= 1");
}

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k;
    for (const auto& f : fields()) k.push_back(f.key);
    return k;
  }();
  return keys;
}

void set_config_value(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
  find_field(key).set(cfg, value);
}

std::string get_config_value(const ExperimentConfig& cfg, const std::string& key) { return find_field(key).get(cfg); }

std::string ExperimentConfig::to_text() const {
  std::string out;
  for (const auto& f : fields()) out += f.key + " = " + f.get(*this) + "\n";
  return out;
}

std::string fnv1a_hex(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream out;
  out << std::hex << std::setw(16) << std::setfill('0') << h;
  return out.str();
}

std::string ExperimentConfig::digest() const { return fnv1a_hex(to_text()); }

std::vector<std::pair<std::string, std::string>> parse_config_text(const std::string& text) {
  std::vector<std::pair<std::string, std::string>> out;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw UsageError("config line " + std::to_string(lineno) + ": expected 'key = value'");
    }
    out.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return out;
}

ExperimentConfig config_from_text(const std::string& text) {
  ExperimentConfig cfg;
  for (const auto& [k, v] : parse_config_text(text)) set_config_value(cfg, k, v);
  cfg.validate();
  return cfg;
}

ExperimentConfig parse_config(const std::filesystem::path& file, const std::map<std::string, std::string>& overrides,
                              const std::string& preset, const std::string& default_data_root) {
  ExperimentConfig cfg;
  if (const char* env = std::getenv("AMR_DATA_ROOT"); env != nullptr && *env != '\0') {
    cfg.data_root = env;
  } else {
    cfg.data_root = default_data_root;
  }
  if (!preset.empty()) {
    auto it = presets().find(preset);
    if (it == presets().end()) throw UsageError("unknown preset '" + preset + "'");
    for (const auto& [k, v] : it->second) set_config_value(cfg, k, v);
  }
  if (!file.empty()) {
    std::ifstream in(file);
    if (!in) throw UsageError("cannot read config file " + file.string());
    std::stringstream buf;
    buf << in.rdbuf();
    for (const auto& [k, v] : parse_config_text(buf.str())) set_config_value(cfg, k, v);
  }
  for (const auto& [k, v] : overrides) set_config_value(cfg, k, v);
  cfg.validate();
  return cfg;
}

const std::map<std::string, std::map<std::string, std::string>>& presets() {
  static const std::map<std::string, std::map<std::string, std::string>> table = {
      {"mnist_table1", {{"dataset", "mnist"}, {"d_h", "32"}, {"epochs", "2000"}, {"lambda", "10"}}},
      {"kmnist_table1", {{"dataset", "kmnist"}, {"d_h", "32"}, {"epochs", "2000"}, {"lambda", "10"}}},
      {"svhn_table1", {{"dataset", "svhn"}, {"d_h", "32"}, {"epochs", "3500"}, {"lambda", "10"}}},
      {"svhn_ablation", {{"dataset", "svhn"}, {"d_h", "32"}, {"epochs", "4000"}, {"lambda", "10"}}},
      {"svhn_highdim", {{"dataset", "svhn"}, {"d_h", "256"}, {"lambda", "5"}}},
      {"dsprites_table4",
       {{"dataset", "dsprites"}, {"lambda", "1"}, {"eval_probe", "false"}, {"eval_disentanglement", "true"}}},
      {"spiral_consistency",
       {{"dataset", "spiral"}, {"mix", "mixup"}, {"lambda", "10"}, {"epochs", "100"}, {"eval_probe", "false"},
        {"eval_spiral", "true"}}},
  };
  return table;
}

const std::vector<double>& lambda_sweep() {
  static const std::vector<double> values{2, 5, 10, 20, 50};
  return values;
}

}  // namespace amr
