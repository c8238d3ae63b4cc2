#include "amr/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <set>

#include "amr/errors.hpp"

namespace amr {

namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'A', 'M', 'R', 'C', 'K', 'P', 'T', '1'};

std::uint8_t dtype_code(torch::ScalarType t) {
  switch (t) {
    case torch::kFloat32: return 1;
    case torch::kFloat64: return 2;
    case torch::kInt64: return 3;
    case torch::kUInt8: return 4;
    default: throw std::invalid_argument("checkpoint: unsupported dtype");
  }
}

torch::ScalarType dtype_of(std::uint8_t code) {
  switch (code) {
    case 1: return torch::kFloat32;
    case 2: return torch::kFloat64;
    case 3: return torch::kInt64;
    case 4: return torch::kUInt8;
    default: throw ConfigError("checkpoint: unknown dtype code " + std::to_string(code));
  }
}

void put_u64(std::ostream& out, std::uint64_t v) { out.write(reinterpret_cast<const char*>(&v), sizeof v); }

void put_str(std::ostream& out, const std::string& s) {
  put_u64(out, s.size());
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

class Reader {
 public:
  explicit Reader(const fs::path& path) : in_(path, std::ios::binary), path_(path) {
    if (!in_) throw ConfigError("cannot open checkpoint " + path.string());
  }
  void raw(void* dst, std::size_t n) {
    in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) throw ConfigError("truncated checkpoint " + path_.string());
  }
  std::uint64_t u64() {
    std::uint64_t v;
    raw(&v, sizeof v);
    return v;
  }
  std::string str() {
    const auto n = u64();
    if (n > (1ULL << 32)) throw ConfigError("corrupt checkpoint " + path_.string());
    std::string s(n, '\0');
    raw(s.data(), n);
    return s;
  }

 private:
  std::ifstream in_;
  fs::path path_;
};

void add_prefixed(std::map<std::string, torch::Tensor>& dst, const std::string& prefix,
                  const std::map<std::string, torch::Tensor>& src) {
  for (const auto& [k, v] : src) dst[prefix + k] = v;
}

std::map<std::string, torch::Tensor> strip_prefix(const std::map<std::string, torch::Tensor>& src,
                                                  const std::string& prefix) {
  std::map<std::string, torch::Tensor> out;
  for (const auto& [k, v] : src) {
    if (k.rfind(prefix, 0) == 0) out[k.substr(prefix.size())] = v;
  }
  return out;
}

}  // namespace

void write_checkpoint(const fs::path& path, const CheckpointData& data) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const auto tmp = fs::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write checkpoint " + tmp.string());
    out.write(kMagic, sizeof kMagic);
    put_str(out, data.config_text);
    put_str(out, data.rng_state);
    put_str(out, data.meta.dump());
    put_u64(out, data.tensors.size());
    for (const auto& [key, tensor] : data.tensors) {
      const auto t = tensor.detach().cpu().contiguous();
      put_str(out, key);
      const std::uint8_t header[2] = {dtype_code(t.scalar_type()), static_cast<std::uint8_t>(t.dim())};
      out.write(reinterpret_cast<const char*>(header), 2);
      for (auto d : t.sizes()) {
        const std::int64_t dim = d;
        out.write(reinterpret_cast<const char*>(&dim), sizeof dim);
      }
      out.write(static_cast<const char*>(t.data_ptr()), static_cast<std::streamsize>(t.nbytes()));
    }
    if (!out) throw std::runtime_error("failed writing checkpoint " + tmp.string());
  }
  fs::rename(tmp, path);
}

CheckpointData read_checkpoint(const fs::path& path) {
  Reader r(path);
  char magic[8];
  r.raw(magic, sizeof magic);
  if (std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw ConfigError(path.string() + " is not a checkpoint");
  CheckpointData d;
  d.config_text = r.str();
  d.rng_state = r.str();
  try {
    d.meta = nlohmann::json::parse(r.str());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("corrupt checkpoint metadata in " + path.string() + ": " + e.what());
  }
  const auto count = r.u64();
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto key = r.str();
    std::uint8_t header[2];
    r.raw(header, 2);
    std::vector<std::int64_t> dims(header[1]);
    for (auto& dim : dims) r.raw(&dim, sizeof dim);
    auto t = torch::empty(dims, torch::TensorOptions().dtype(dtype_of(header[0])));
    r.raw(t.data_ptr(), t.nbytes());
    d.tensors.emplace(key, std::move(t));
  }
  return d;
}

CheckpointData capture(const TrainState& state) {
  CheckpointData d;
  d.config_text = state.config.to_text();
  d.rng_state = state.rng.serialize();
  d.meta = {{"epoch", state.epoch},
            {"step", state.step},
            {"best_val_acc", state.best_val_acc},
            {"optimizer_steps",
             {{"generator", state.gen_opt.steps()},
              {"discriminator", state.disc_opt.steps()},
              {"probe", state.probe_opt.steps()}}}};
  auto nets = state.nets;
  add_prefixed(d.tensors, "net.", nets->state());
  add_prefixed(d.tensors, "optim.generator.", state.gen_opt.state());
  add_prefixed(d.tensors, "optim.discriminator.", state.disc_opt.state());
  add_prefixed(d.tensors, "optim.probe.", state.probe_opt.state());
  return d;
}

bool resume_may_differ(const std::string& key) {
  static const std::set<std::string> free_keys = {
      "data_root",   "epochs",       "output",     "resume",    "eval_probe", "eval_disentanglement",
      "eval_grids",  "eval_spiral",  "dis_votes",  "dis_batch", "grid_steps", "grid_rows",
      "spiral_mixes"};
  return free_keys.count(key) != 0;
}

std::vector<std::string> config_mismatches(const ExperimentConfig& a, const ExperimentConfig& b) {
  std::vector<std::string> out;
  for (const auto& key : config_keys()) {
    if (!resume_may_differ(key) && get_config_value(a, key) != get_config_value(b, key)) out.push_back(key);
  }
  return out;
}

TrainState restore(const CheckpointData& data, const ExperimentConfig& cfg, const AutoencoderSpec& spec) {
  ExperimentConfig saved;
  try {
    for (const auto& [k, v] : parse_config_text(data.config_text)) set_config_value(saved, k, v);
  } catch (const UsageError& e) {
    throw ConfigError(std::string("checkpoint config is unreadable: ") + e.what());
  }
  const auto diff = config_mismatches(saved, cfg);
  if (!diff.empty()) {
    std::string msg = "checkpoint does not match the config; differing keys:";
    for (const auto& k : diff) {
      msg += " " + k + " (" + get_config_value(saved, k) + " vs " + get_config_value(cfg, k) + ")";
    }
    throw ConfigError(msg);
  }

  auto state = TrainState::create(cfg, spec, 0, Rng());
  const auto net_tensors = strip_prefix(data.tensors, "net.");
  auto current = state.nets->state();
  for (const auto& [k, v] : net_tensors) {
    if (current.count(k) == 0) throw ConfigError("checkpoint tensor 'net." + k + "' has no counterpart");
  }
  {
    torch::NoGradGuard no_grad;
    for (auto& [k, t] : current) {
      auto it = net_tensors.find(k);
      if (it == net_tensors.end()) throw ConfigError("checkpoint lacks tensor 'net." + k + "'");
      if (it->second.sizes() != t.sizes() || it->second.scalar_type() != t.scalar_type()) {
        throw ConfigError("checkpoint tensor 'net." + k + "' does not match the architecture");
      }
      t.copy_(it->second);
    }
  }
  try {
    const auto& steps = data.meta.at("optimizer_steps");
    state.gen_opt.load_state(strip_prefix(data.tensors, "optim.generator."), steps.at("generator").get<std::int64_t>());
    state.disc_opt.load_state(strip_prefix(data.tensors, "optim.discriminator."),
                              steps.at("discriminator").get<std::int64_t>());
    state.probe_opt.load_state(strip_prefix(data.tensors, "optim.probe."), steps.at("probe").get<std::int64_t>());
    state.epoch = data.meta.at("epoch").get<std::int64_t>();
    state.step = data.meta.at("step").get<std::int64_t>();
    state.best_val_acc = data.meta.at("best_val_acc").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("checkpoint metadata incomplete: ") + e.what());
  }
  state.rng = Rng::deserialize(data.rng_state);
  return state;
}

void save_state(const fs::path& path, const TrainState& state) { write_checkpoint(path, capture(state)); }

TrainState load_state(const fs::path& path, const ExperimentConfig& cfg, const AutoencoderSpec& spec) {
  return restore(read_checkpoint(path), cfg, spec);
}

}  // namespace amr
