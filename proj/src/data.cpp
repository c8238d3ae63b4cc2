#include "amr/data.hpp"

#include <array>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>

#include <nlohmann/json.hpp>

#include "amr/errors.hpp"

namespace amr {

namespace fs = std::filesystem;

namespace {

std::uint32_t read_be32(std::istream& in) {
  std::array<unsigned char, 4> b{};
  in.read(reinterpret_cast<char*>(b.data()), 4);
  return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) | (std::uint32_t{b[2]} << 8) | b[3];
}

void write_be32(std::ostream& out, std::uint32_t v) {
  const std::array<char, 4> b{static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                              static_cast<char>(v)};
  out.write(b.data(), 4);
}

// Carves `val_size` examples out of train with a fixed-seed permutation.
void carve_validation(Dataset& ds, const LoadOptions& opt) {
  if (opt.val_size <= 0 || ds.train.empty()) return;
  if (opt.val_size >= ds.train.size()) throw DataError("val_size exceeds the training split of " + ds.name);
  Rng rng(opt.split_seed);
  auto perm = rng.permutation(ds.train.size());
  auto all = torch::tensor(perm, torch::kInt64);
  auto val_idx = std::get<0>(all.slice(0, 0, opt.val_size).sort());
  auto train_idx = std::get<0>(all.slice(0, opt.val_size).sort());
  ds.val = ds.train.select(val_idx);
  ds.train = ds.train.select(train_idx);
}

Split load_idx_split(const fs::path& dir, const nlohmann::json& entry, const Dataset& ds) {
  Split split;
  const auto images_file = dir / entry.at("images").get<std::string>();
  auto raw = read_idx(images_file);
  if (raw.dim() == 3) raw = raw.unsqueeze(3);
  if (raw.dim() != 4 || raw.size(1) != ds.height || raw.size(2) != ds.width || raw.size(3) != ds.channels) {
    throw DataError(images_file.string() + ": image dimensions disagree with the manifest");
  }
  split.images = normalize_pixels(raw.permute({0, 3, 1, 2}).contiguous());
  if (entry.contains("labels")) {
    const auto labels_file = dir / entry.at("labels").get<std::string>();
    auto labels = read_idx(labels_file);
    if (labels.dim() != 1 || labels.size(0) != split.images.size(0)) {
      throw DataError(labels_file.string() + ": label count does not match image count");
    }
    split.labels = labels.to(torch::kInt64);
  }
  if (entry.contains("count") && entry.at("count").get<std::int64_t>() != split.size()) {
    throw DataError(images_file.string() + ": record count disagrees with the manifest");
  }
  return split;
}

Dataset load_idx_dataset(const std::string& name, const fs::path& root, const LoadOptions& opt) {
  const auto dir = root / name;
  const auto manifest_path = dir / "manifest.json";
  std::ifstream in(manifest_path);
  if (!in) {
    throw DataError("dataset '" + name + "' not found: missing " + manifest_path.string() +
                    " (run `amr fetch-data --dataset " + name + "`)");
  }
  nlohmann::json m;
  try {
    in >> m;
  } catch (const std::exception& e) {
    throw DataError(manifest_path.string() + ": malformed manifest: " + e.what());
  }
  Dataset ds;
  try {
    ds.name = name;
    ds.channels = m.at("channels").get<std::int64_t>();
    ds.height = m.at("height").get<std::int64_t>();
    ds.width = m.at("width").get<std::int64_t>();
    ds.num_classes = m.value("num_classes", std::int64_t{0});
    if (m.contains("checksums")) {
      for (const auto& [file, digest] : m.at("checksums").items()) {
        const auto path = dir / file;
        if (!fs::exists(path)) throw DataError("dataset '" + name + "': missing file " + path.string());
        if (file_checksum(path) != digest.get<std::string>()) {
          throw DataError("dataset '" + name + "': checksum mismatch for " + path.string());
        }
      }
    }
    const auto& splits = m.at("splits");
    ds.train = load_idx_split(dir, splits.at("train"), ds);
    if (splits.contains("test")) ds.test = load_idx_split(dir, splits.at("test"), ds);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(manifest_path.string() + ": " + e.what());
  }
  carve_validation(ds, opt);
  return ds;
}

// Tags each digit with two binary attributes and applies the transforms.
void tag_attributes(Split& split, std::uint64_t seed) {
  if (split.empty()) return;
  Rng rng(seed);
  const auto n = split.size();
  auto attrs = torch::zeros({n, 2}, torch::kFloat32);
  auto acc = attrs.accessor<float, 2>();
  for (std::int64_t i = 0; i < n; ++i) {
    acc[i][0] = rng.bernoulli(0.5) ? 1.0F : 0.0F;
    acc[i][1] = rng.bernoulli(0.5) ? 1.0F : 0.0F;
  }
  auto x = split.images;
  const auto thick = torch::max_pool2d(x, {3, 3}, {1, 1}, {1, 1});
  const auto is_thick = attrs.select(1, 0).view({n, 1, 1, 1}).gt(0.5);
  const auto is_inv = attrs.select(1, 1).view({n, 1, 1, 1}).gt(0.5);
  x = torch::where(is_thick, thick, x);
  x = torch::where(is_inv, -x, x);
  split.images = x.contiguous();
  split.attributes = attrs;
}

}  // namespace

Split Split::select(const torch::Tensor& index) const {
  Split s;
  if (images.defined()) s.images = images.index_select(0, index);
  if (labels.defined()) s.labels = labels.index_select(0, index);
  if (attributes.defined()) s.attributes = attributes.index_select(0, index);
  if (factors.defined()) s.factors = factors.index_select(0, index);
  return s;
}

std::int64_t FactorSpec::size() const {
  std::int64_t p = 1;
  for (auto c : cardinalities) p *= c;
  return p;
}

std::vector<int> FactorSpec::varying_factors() const {
  std::vector<int> out;
  for (std::size_t i = 0; i < cardinalities.size(); ++i) {
    if (cardinalities[i] >= 2) out.push_back(static_cast<int>(i));
  }
  return out;
}

FactorSpec FactorSpec::dsprites() {
  return {{"color", "shape", "scale", "orientation", "pos_x", "pos_y"}, {1, 3, 6, 40, 32, 32}};
}

torch::Tensor normalize_pixels(const torch::Tensor& pixels) { return pixels.to(torch::kFloat32) / 127.5 - 1.0; }

torch::Tensor denormalize_pixels(const torch::Tensor& x) { return (x + 1.0) * 127.5; }

torch::Tensor to_uint8(const torch::Tensor& x) {
  return denormalize_pixels(x.detach().to(torch::kFloat32)).round().clamp(0, 255).to(torch::kUInt8);
}

Dataset load_dataset(const std::string& name, const fs::path& root, const LoadOptions& options) {
  if (name == "spiral") {
    Rng rng(options.spiral_seed);
    auto ds = make_spiral(options.spiral_n, options.noise_sd, rng);
    return ds;
  }
  if (name == "dsprites") {
    Dataset ds;
    ds.name = name;
    ds.channels = 1;
    ds.height = ds.width = 64;
    ds.factors = FactorSpec::dsprites();
    const auto& spec = *ds.factors;
    Rng rng(options.split_seed + 17);
    auto draw = [&](std::int64_t n) {
      Split s;
      s.factors = torch::empty({n, static_cast<std::int64_t>(spec.num_factors())}, torch::kInt64);
      auto acc = s.factors.accessor<std::int64_t, 2>();
      for (std::int64_t i = 0; i < n; ++i) {
        for (std::size_t f = 0; f < spec.num_factors(); ++f) {
          acc[i][static_cast<std::int64_t>(f)] = rng.index(spec.cardinalities[f]);
        }
      }
      s.images = render_dsprites(s.factors);
      return s;
    };
    ds.train = draw(options.dsprites_n);
    if (options.val_size > 0) ds.val = draw(options.val_size);
    return ds;
  }
  if (name == "mnist_attr") {
    auto ds = load_idx_dataset("mnist", root, options);
    ds.name = name;
    ds.attribute_names = {"thick", "inverted"};
    tag_attributes(ds.train, 101);
    tag_attributes(ds.val, 102);
    tag_attributes(ds.test, 103);
    return ds;
  }
  return load_idx_dataset(name, root, options);
}

Dataset ablate(const Dataset& dataset, std::int64_t n_keep, Rng& rng) {
  if (n_keep <= 0) throw std::invalid_argument("ablate: n_keep must be positive");
  if (n_keep > dataset.train.size()) throw std::invalid_argument("ablate: n_keep exceeds the training split");
  Dataset out = dataset;
  if (n_keep == dataset.train.size()) return out;
  auto perm = rng.permutation(dataset.train.size());
  perm.resize(static_cast<std::size_t>(n_keep));
  auto idx = std::get<0>(torch::tensor(perm, torch::kInt64).sort());
  out.train = dataset.train.select(idx);
  return out;
}

std::pair<double, double> spiral_point(double theta) {
  const double r = theta / (2.0 * std::numbers::pi * kSpiralTurns);
  return {r * std::cos(theta), r * std::sin(theta)};
}

Dataset make_spiral(std::int64_t n, double noise_sd, Rng& rng) {
  if (n < 1) throw std::invalid_argument("make_spiral: n must be >= 1");
  if (!(noise_sd >= 0.0)) throw std::invalid_argument("make_spiral: noise_sd must be >= 0");
  Dataset ds;
  ds.name = "spiral";
  ds.channels = 2;
  auto pts = torch::empty({n, 2}, torch::kFloat64);
  auto acc = pts.accessor<double, 2>();
  const double max_theta = 2.0 * std::numbers::pi * kSpiralTurns;
  for (std::int64_t i = 0; i < n; ++i) {
    const double theta = rng.uniform(0.0, max_theta);
    const auto [x, y] = spiral_point(theta);
    // The standard-normal draws are made even when noise_sd = 0, so a seed
    // yields the same angles at every noise level.
    acc[i][0] = x + noise_sd * rng.normal(0.0, 1.0);
    acc[i][1] = y + noise_sd * rng.normal(0.0, 1.0);
  }
  ds.train.images = pts.to(torch::kFloat32).view({n, 2, 1, 1});
  return ds;
}

void write_points_table(const fs::path& path, const torch::Tensor& points) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  const auto p = points.detach().reshape({-1, 2}).to(torch::kFloat64).contiguous();
  auto acc = p.accessor<double, 2>();
  out << std::setprecision(17);
  for (std::int64_t i = 0; i < p.size(0); ++i) out << acc[i][0] << ' ' << acc[i][1] << '\n';
}

torch::Tensor read_points_table(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read points table " + path.string());
  std::vector<double> values;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    double x = 0, y = 0;
    if (!(row >> x >> y)) throw DataError(path.string() + ": malformed row '" + line + "'");
    values.push_back(x);
    values.push_back(y);
  }
  const auto n = static_cast<std::int64_t>(values.size() / 2);
  return torch::tensor(values, torch::kFloat64).view({n, 2});
}

FactorBatch fixed_factor_batch(const FactorSpec& spec, int factor_index, std::int64_t batch_size, Rng& rng,
                               std::optional<std::int64_t> value) {
  if (factor_index < 0 || static_cast<std::size_t>(factor_index) >= spec.num_factors()) {
    throw std::invalid_argument("fixed_factor_batch: factor index out of range");
  }
  if (batch_size < 1) throw std::invalid_argument("fixed_factor_batch: batch_size must be >= 1");
  const auto card = spec.cardinalities[static_cast<std::size_t>(factor_index)];
  FactorBatch b;
  b.factor = factor_index;
  b.value = value ? *value : rng.index(card);
  if (b.value < 0 || b.value >= card) throw std::invalid_argument("fixed_factor_batch: value out of range");
  const auto nf = static_cast<std::int64_t>(spec.num_factors());
  b.factors = torch::empty({batch_size, nf}, torch::kInt64);
  auto acc = b.factors.accessor<std::int64_t, 2>();
  for (std::int64_t i = 0; i < batch_size; ++i) {
    for (std::int64_t f = 0; f < nf; ++f) {
      acc[i][f] = f == factor_index ? b.value : rng.index(spec.cardinalities[static_cast<std::size_t>(f)]);
    }
  }
  return b;
}

FactorBatch dsprites_fixed_factor_batch(const Dataset& dataset, int factor_index, std::int64_t batch_size, Rng& rng,
                                        std::optional<std::int64_t> value) {
  if (!dataset.factors) throw std::invalid_argument("dataset '" + dataset.name + "' has no factor annotations");
  return fixed_factor_batch(*dataset.factors, factor_index, batch_size, rng, value);
}

torch::Tensor render_dsprites(const torch::Tensor& factors) {
  constexpr int kSize = 64;
  const auto n = factors.size(0);
  auto img = torch::full({n, 1, kSize, kSize}, -1.0F, torch::kFloat32);
  auto out = img.accessor<float, 4>();
  auto f = factors.accessor<std::int64_t, 2>();
  for (std::int64_t i = 0; i < n; ++i) {
    const auto shape = f[i][1];
    const double scale = 0.5 + 0.1 * static_cast<double>(f[i][2]);
    const double angle = 2.0 * std::numbers::pi * static_cast<double>(f[i][3]) / 40.0;
    const double cx = 10.0 + 43.0 * static_cast<double>(f[i][4]) / 31.0;
    const double cy = 10.0 + 43.0 * static_cast<double>(f[i][5]) / 31.0;
    const double radius = 9.0 * scale;
    const double c = std::cos(angle), s = std::sin(angle);
    for (int py = 0; py < kSize; ++py) {
      for (int px = 0; px < kSize; ++px) {
        const double dx = (px + 0.5 - cx) / radius, dy = (py + 0.5 - cy) / radius;
        const double u = c * dx + s * dy, v = -s * dx + c * dy;
        bool inside = false;
        if (shape == 0) {
          inside = std::abs(u) <= 0.8 && std::abs(v) <= 0.8;
        } else if (shape == 1) {
          inside = u * u + 4.0 * v * v <= 1.0;
        } else {
          const double hx = u * 1.2, hy = -v * 1.2 + 0.2;
          const double q = hx * hx + hy * hy - 1.0;
          inside = q * q * q - hx * hx * hy * hy * hy <= 0.0;
        }
        if (inside) out[i][0][py][px] = 1.0F;
      }
    }
  }
  return img;
}

std::string file_checksum(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  std::uint64_t h = 0xcbf29ce484222325ULL;
  std::array<char, 1 << 16> buf{};
  while (in) {
    in.read(buf.data(), buf.size());
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[static_cast<std::size_t>(i)]);
      h *= 0x100000001b3ULL;
    }
  }
  std::ostringstream out;
  out << "fnv1a64:" << std::hex << std::setw(16) << std::setfill('0') << h;
  return out.str();
}

void write_idx(const fs::path& path, const torch::Tensor& pixels) {
  const auto t = pixels.to(torch::kUInt8).contiguous();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  write_be32(out, 0x0800U | static_cast<std::uint32_t>(t.dim()));
  for (auto d : t.sizes()) write_be32(out, static_cast<std::uint32_t>(d));
  out.write(reinterpret_cast<const char*>(t.data_ptr<std::uint8_t>()), t.numel());
}

torch::Tensor read_idx(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("missing file " + path.string());
  const auto magic = read_be32(in);
  const auto ndim = magic & 0xFFU;
  if ((magic >> 8) != 0x08U || ndim < 1 || ndim > 4) throw DataError(path.string() + ": not a uint8 IDX file");
  std::vector<std::int64_t> dims;
  std::int64_t count = 1;
  for (std::uint32_t i = 0; i < ndim; ++i) {
    dims.push_back(read_be32(in));
    count *= dims.back();
  }
  if (!in) throw DataError(path.string() + ": truncated header");
  auto t = torch::empty(dims, torch::kUInt8);
  in.read(reinterpret_cast<char*>(t.data_ptr<std::uint8_t>()), count);
  if (in.gcount() != count) throw DataError(path.string() + ": truncated payload");
  return t;
}

}  // namespace amr
