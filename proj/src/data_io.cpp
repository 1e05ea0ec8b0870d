// Copyright 2026 The gramnet Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "gramnet/data_io.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numbers>
#include <sstream>

namespace gramnet {

void Dataset::validate() const {
  if (inputs.rows() != shape.rows())
    throw ShapeMismatch("dataset: input rows do not match spatial shape");
  if (static_cast<index_t>(labels.size()) != shape.images)
    throw ShapeMismatch("dataset: one label per image required");
  if (inputs.cols() != channels)
    throw ShapeMismatch("dataset: channel count mismatch");
  for (int y : labels)
    if (y < 0 || y >= classes)
      throw ShapeMismatch("dataset: label out of range");
  if (!inputs.all_finite()) throw NonFiniteValue("dataset: non-finite input");
}

Dataset gen_toy_binary(index_t n, std::uint64_t seed) {
  if (n < 4) throw ConfigError("gen_toy_binary: n must be >= 4");
  RngState rng(seed);
  Dataset d;
  d.inputs = DenseMatrix(n, 2, Precision::kDouble);
  d.labels.resize(static_cast<std::size_t>(n));
  constexpr double kNoise = 0.1;
  for (index_t k = 0; k < n; ++k) {
    const int cls = static_cast<int>(k % 2);
    const double t = std::numbers::pi * rng.uniform();
    double x, y;
    if (cls == 0) {
      x = std::cos(t);
      y = std::sin(t);
    } else {
      x = 1.0 - std::cos(t);
      y = 0.5 - std::sin(t);
    }
    d.inputs.set(k, 0, x + kNoise * rng.normal());
    d.inputs.set(k, 1, y + kNoise * rng.normal());
    d.labels[static_cast<std::size_t>(k)] = cls;
  }
  d.shape = {1, 1, n};
  d.channels = 2;
  d.classes = 2;
  d.validate();
  return d;
}

Dataset gen_image_blobs(index_t n, index_t side, int classes,
                        std::uint64_t seed) {
  if (n < classes || side < 4 || classes < 2)
    throw ConfigError("gen_image_blobs: need n >= classes, side >= 4");
  RngState rng(seed);

  // Periodic low-frequency class templates.
  struct Wave {
    double fx, fy, phase, amp;
  };
  std::vector<std::vector<Wave>> templates(static_cast<std::size_t>(classes));
  for (auto& waves : templates) {
    for (int w = 0; w < 3; ++w) {
      waves.push_back({1.0 + static_cast<double>(rng.next_u64() % 2),
                       1.0 + static_cast<double>(rng.next_u64() % 2),
                       2.0 * std::numbers::pi * rng.uniform(), rng.normal()});
    }
  }
  const auto template_value = [&](int cls, index_t x, index_t y) {
    double v = 0.0;
    for (const Wave& w : templates[static_cast<std::size_t>(cls)]) {
      v += w.amp * std::sin(2.0 * std::numbers::pi *
                                (w.fx * x + w.fy * y) / side +
                            w.phase);
    }
    return v;
  };

  Dataset d;
  const index_t s = side * side;
  d.inputs = DenseMatrix(n * s, 1, Precision::kDouble);
  d.labels.resize(static_cast<std::size_t>(n));
  for (index_t k = 0; k < n; ++k) {
    const int cls = static_cast<int>(k % classes);
    const index_t dx = static_cast<index_t>(rng.next_u64() % 5) - 2;
    const index_t dy = static_cast<index_t>(rng.next_u64() % 5) - 2;
    for (index_t y = 0; y < side; ++y) {
      for (index_t x = 0; x < side; ++x) {
        const index_t sx = ((x + dx) % side + side) % side;
        const index_t sy = ((y + dy) % side + side) % side;
        double v = 0.5 + 0.22 * template_value(cls, sx, sy) +
                   0.18 * rng.normal();
        v = std::clamp(v, 0.0, 1.0);
        // Quantise as the raw-u8 container would, so files round-trip.
        v = std::round(v * 255.0) / 255.0;
        d.inputs.set(k * s + y * side + x, 0, v);
      }
    }
    d.labels[static_cast<std::size_t>(k)] = cls;
  }
  d.shape = {side, side, n};
  d.channels = 1;
  d.classes = classes;
  d.validate();
  return d;
}

NormStats compute_norm_stats(const Dataset& train) {
  NormStats stats;
  const index_t c_count = train.channels;
  stats.mean.assign(static_cast<std::size_t>(c_count), 0.0);
  stats.std_dev.assign(static_cast<std::size_t>(c_count), 0.0);
  const index_t rows = train.inputs.rows();
  if (rows == 0) throw ShapeMismatch("compute_norm_stats: empty dataset");
  for (index_t c = 0; c < c_count; ++c) {
    double sum = 0.0;
    for (index_t r = 0; r < rows; ++r) sum += train.inputs.at(r, c);
    const double mean = sum / static_cast<double>(rows);
    double ss = 0.0;
    for (index_t r = 0; r < rows; ++r) {
      const double dv = train.inputs.at(r, c) - mean;
      ss += dv * dv;
    }
    const double var = ss / static_cast<double>(rows);
    stats.mean[static_cast<std::size_t>(c)] = mean;
    stats.std_dev[static_cast<std::size_t>(c)] =
        var > 1e-24 ? std::sqrt(var) : 1.0;
  }
  return stats;
}

void apply_norm_stats(Dataset& data, const NormStats& stats) {
  if (static_cast<index_t>(stats.mean.size()) != data.channels)
    throw ShapeMismatch("apply_norm_stats: channel count mismatch");
  for (index_t r = 0; r < data.inputs.rows(); ++r)
    for (index_t c = 0; c < data.channels; ++c) {
      const std::size_t ci = static_cast<std::size_t>(c);
      data.inputs.set(
          r, c, (data.inputs.at(r, c) - stats.mean[ci]) / stats.std_dev[ci]);
    }
}

namespace {

constexpr char kImageMagic[4] = {'G', 'N', 'D', 'S'};
constexpr std::uint32_t kImageVersion = 1;

void append_u32(std::string& out, std::uint32_t v) {
  out.append(reinterpret_cast<const char*>(&v), 4);
}

}  // namespace

void write_image_dataset(const std::string& path, const Dataset& data) {
  data.validate();
  std::string body;
  body.append(kImageMagic, 4);
  append_u32(body, kImageVersion);
  append_u32(body, static_cast<std::uint32_t>(data.shape.images));
  append_u32(body, static_cast<std::uint32_t>(data.channels));
  append_u32(body, static_cast<std::uint32_t>(data.shape.width));
  append_u32(body, static_cast<std::uint32_t>(data.shape.height));
  const index_t s = data.shape.locations();
  for (index_t n = 0; n < data.shape.images; ++n)
    for (index_t c = 0; c < data.channels; ++c)
      for (index_t y = 0; y < data.shape.height; ++y)
        for (index_t x = 0; x < data.shape.width; ++x) {
          const double v = data.inputs.at(n * s + y * data.shape.width + x, c);
          const long q = std::lround(std::clamp(v, 0.0, 1.0) * 255.0);
          body.push_back(static_cast<char>(static_cast<unsigned char>(q)));
        }
  for (int y : data.labels)
    body.push_back(static_cast<char>(static_cast<unsigned char>(y)));
  const std::uint32_t crc = static_cast<std::uint32_t>(
      crc32(0, reinterpret_cast<const Bytef*>(body.data()),
            static_cast<uInt>(body.size())));
  append_u32(body, crc);

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open dataset for writing: " + path);
  out.write(body.data(), static_cast<std::streamsize>(body.size()));
  if (!out) throw IoError("short write to dataset: " + path);
}

Dataset load_image_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open dataset: " + path);
  std::string data((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());

  constexpr std::size_t header = 4 + 4 * 5;
  if (data.size() < header)
    throw FormatError(data.size(), "image dataset: truncated header");
  if (std::memcmp(data.data(), kImageMagic, 4) != 0)
    throw FormatError(0, "image dataset: bad magic");
  const auto u32_at = [&](std::size_t off) {
    std::uint32_t v;
    std::memcpy(&v, data.data() + off, 4);
    return v;
  };
  if (u32_at(4) != kImageVersion)
    throw FormatError(4, "image dataset: unsupported version");
  const index_t n = u32_at(8);
  const index_t c_count = u32_at(12);
  const index_t w = u32_at(16);
  const index_t h = u32_at(20);
  if (n < 1 || c_count < 1 || w < 1 || h < 1)
    throw FormatError(8, "image dataset: degenerate dimensions");

  const std::size_t pixel_bytes = static_cast<std::size_t>(n * c_count * w * h);
  const std::size_t expected = header + pixel_bytes +
                               static_cast<std::size_t>(n) + 4;
  if (data.size() != expected)
    throw FormatError(std::min(data.size(), expected),
                      "image dataset: payload is " +
                          std::to_string(data.size()) + " bytes, expected " +
                          std::to_string(expected));

  std::uint32_t stored_crc;
  std::memcpy(&stored_crc, data.data() + data.size() - 4, 4);
  const std::uint32_t computed = static_cast<std::uint32_t>(
      crc32(0, reinterpret_cast<const Bytef*>(data.data()),
            static_cast<uInt>(data.size() - 4)));
  if (stored_crc != computed)
    throw ChecksumMismatch("image dataset: CRC32 mismatch in " + path);

  Dataset d;
  d.shape = {w, h, n};
  d.channels = c_count;
  d.inputs = DenseMatrix(n * w * h, c_count, Precision::kDouble);
  const index_t s = w * h;
  std::size_t pos = header;
  for (index_t img = 0; img < n; ++img)
    for (index_t c = 0; c < c_count; ++c)
      for (index_t y = 0; y < h; ++y)
        for (index_t x = 0; x < w; ++x) {
          const auto byte = static_cast<unsigned char>(data[pos++]);
          d.inputs.set(img * s + y * w + x, c,
                       static_cast<double>(byte) / 255.0);
        }
  int max_label = 0;
  d.labels.resize(static_cast<std::size_t>(n));
  for (index_t img = 0; img < n; ++img) {
    const auto byte = static_cast<unsigned char>(data[pos++]);
    d.labels[static_cast<std::size_t>(img)] = byte;
    max_label = std::max(max_label, static_cast<int>(byte));
  }
  d.classes = max_label + 1;
  d.validate();
  return d;
}

namespace {

std::string fmt_value(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double parse_value(const std::string& s) {
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  std::size_t used = 0;
  const double v = std::stod(s, &used);
  if (used != s.size()) throw FormatError(0, "metrics: bad number '" + s + "'");
  return v;
}

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace

std::string metric_header(std::size_t layer_count) {
  std::string h = "epoch,step,objective,train_ll,train_acc,eval_ll,eval_acc";
  for (std::size_t l = 0; l < layer_count; ++l)
    h += ",cond_g_ii_" + std::to_string(l);
  h += ",lr,wall_seconds,status";
  return h;
}

std::string metric_line(const MetricRow& row, std::size_t layer_count) {
  if (row.cond_g_ii.size() != layer_count)
    throw ShapeMismatch("metrics: condition-number column count mismatch");
  std::string s = std::to_string(row.epoch) + "," + std::to_string(row.step) +
                  "," + fmt_value(row.objective) + "," +
                  fmt_value(row.train_ll) + "," + fmt_value(row.train_acc) +
                  "," + fmt_value(row.eval_ll) + "," + fmt_value(row.eval_acc);
  for (double c : row.cond_g_ii) s += "," + fmt_value(c);
  s += "," + fmt_value(row.lr) + "," + fmt_value(row.wall_seconds) + "," +
       row.status;
  return s;
}

void write_metrics(const std::vector<MetricRow>& rows,
                   const std::string& path) {
  const std::size_t layers = rows.empty() ? 0 : rows.front().cond_g_ii.size();
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open metrics for writing: " + path);
  out << metric_header(layers) << "\n";
  for (const MetricRow& r : rows) out << metric_line(r, layers) << "\n";
  if (!out) throw IoError("short write to metrics: " + path);
}

std::vector<MetricRow> read_metrics(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open metrics: " + path);
  std::string line;
  if (!std::getline(in, line))
    throw FormatError(0, "metrics: missing header");
  const std::vector<std::string> cols = split(line, ',');
  std::size_t layer_count = 0;
  for (const std::string& c : cols)
    if (c.rfind("cond_g_ii_", 0) == 0) ++layer_count;
  if (line != metric_header(layer_count))
    throw FormatError(0, "metrics: unexpected header");

  std::vector<MetricRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const std::vector<std::string> f = split(line, ',');
    if (f.size() != 10 + layer_count)
      throw FormatError(0, "metrics: wrong field count");
    MetricRow r;
    std::size_t i = 0;
    r.epoch = std::stol(f[i++]);
    r.step = std::stol(f[i++]);
    r.objective = parse_value(f[i++]);
    r.train_ll = parse_value(f[i++]);
    r.train_acc = parse_value(f[i++]);
    r.eval_ll = parse_value(f[i++]);
    r.eval_acc = parse_value(f[i++]);
    for (std::size_t l = 0; l < layer_count; ++l)
      r.cond_g_ii.push_back(parse_value(f[i++]));
    r.lr = parse_value(f[i++]);
    r.wall_seconds = parse_value(f[i++]);
    r.status = f[i++];
    if (r.status != "ok" && r.status != "failed")
      throw FormatError(0, "metrics: bad status '" + r.status + "'");
    rows.push_back(std::move(r));
  }
  return rows;
}

MetricsWriter::MetricsWriter(std::string path, std::size_t layer_count)
    : path_(std::move(path)), layer_count_(layer_count) {}

void MetricsWriter::append(const MetricRow& row) {
  std::ofstream out(path_, header_written_ ? std::ios::app : std::ios::trunc);
  if (!out) throw IoError("cannot open metrics for append: " + path_);
  if (!header_written_) {
    out << metric_header(layer_count_) << "\n";
    header_written_ = true;
  }
  out << metric_line(row, layer_count_) << "\n";
}

namespace {

std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

}  // namespace

const std::map<std::string, std::string>& config_schema() {
  static const std::map<std::string, std::string> schema = {
      {"run.precision", "double"},
      {"data.kind", "toy"},
      {"data.toy.n", "512"},
      {"data.toy.eval_n", "0"},
      {"data.path", ""},
      {"data.eval_path", ""},
      {"model.kernel", "sq_exp"},
      {"model.lengthscale", "1.0"},
      {"model.inducing_inputs", "100"},
      {"model.layers", "fc:100"},
      {"model.kii_jitter", "1e-8"},
      {"reg.enabled", "true"},
      {"reg.gamma", "25"},
      {"reg.lambda", "0.1"},
      {"obj.nu", "0.001"},
      {"obj.kl_mode", "taylor"},
      {"obj.mc_train", "1"},
      {"train.lr", "0.01"},
      {"train.decay_epochs", ""},
      {"train.decay_factor", "0.1"},
      {"train.epochs", "100"},
      {"train.batch", "0"},
      {"train.beta1", "0.8"},
      {"train.beta2", "0.9"},
      {"train.eps", "1e-8"},
      {"train.mc_eval", "64"},
      {"train.eval_every", "0"},
      {"train.checkpoint_every", "0"},
      {"train.seed", "0"},
      {"study.gammas", "off,400,100,25"},
      {"study.nus", "0.001"},
      {"study.kl_modes", "taylor"},
      {"study.epochs", "2000"},
      {"gradcheck.step", "1e-5"},
      {"gradcheck.threshold", "1e-4"},
      {"gradcheck.max_coords", "0"},
      {"eval.checkpoint", ""},
  };
  return schema;
}

RunConfig RunConfig::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_string(ss.str());
}

RunConfig RunConfig::from_string(const std::string& text) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line has no '=': " + line);
    cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return cfg;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  if (config_schema().find(key) == config_schema().end())
    throw ConfigError("unknown config key: " + key);
  kv_[key] = value;
}

bool RunConfig::has(const std::string& key) const {
  return kv_.find(key) != kv_.end();
}

std::string RunConfig::get_string(const std::string& key) const {
  const auto it = kv_.find(key);
  if (it != kv_.end()) return it->second;
  const auto def = config_schema().find(key);
  if (def == config_schema().end())
    throw ConfigError("unknown config key: " + key);
  return def->second;
}

double RunConfig::get_double(const std::string& key) const {
  const std::string s = get_string(key);
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config key " + key + " is not a number: '" + s + "'");
  }
}

long RunConfig::get_long(const std::string& key) const {
  const double v = get_double(key);
  const long l = static_cast<long>(v);
  if (static_cast<double>(l) != v)
    throw ConfigError("config key " + key + " is not an integer");
  return l;
}

bool RunConfig::get_bool(const std::string& key) const {
  const std::string s = get_string(key);
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw ConfigError("config key " + key + " is not a boolean: '" + s + "'");
}

std::vector<double> RunConfig::get_double_list(const std::string& key) const {
  std::vector<double> out;
  for (const std::string& item : get_string_list(key)) {
    try {
      out.push_back(std::stod(item));
    } catch (const std::exception&) {
      throw ConfigError("config key " + key + " has a bad list entry: '" +
                        item + "'");
    }
  }
  return out;
}

std::vector<std::string> RunConfig::get_string_list(
    const std::string& key) const {
  const std::string s = get_string(key);
  std::vector<std::string> out;
  if (trim(s).empty()) return out;
  for (const std::string& item : split(s, ',')) out.push_back(trim(item));
  return out;
}

std::string RunConfig::to_string() const {
  std::map<std::string, std::string> merged = config_schema();
  for (const auto& [k, v] : kv_) merged[k] = v;
  std::string out;
  for (const auto& [k, v] : merged) out += k + " = " + v + "\n";
  return out;
}

std::uint64_t RunConfig::model_hash() const {
  std::map<std::string, std::string> merged = config_schema();
  for (const auto& [k, v] : kv_) merged[k] = v;
  std::uint64_t h = 1469598103934665603ull;  // FNV-1a
  const auto mix = [&h](const std::string& s) {
    for (unsigned char ch : s) {
      h ^= ch;
      h *= 1099511628211ull;
    }
  };
  for (const auto& [k, v] : merged) {
    if (k.rfind("model.", 0) == 0 || k.rfind("reg.", 0) == 0) {
      mix(k);
      mix("=");
      mix(v);
      mix(";");
    }
  }
  return h;
}

namespace {

LayerConfig parse_layer_spec(std::string spec) {
  LayerConfig lc;
  spec = trim(spec);
  const std::string skip_suffix = "+skip";
  if (spec.size() > skip_suffix.size() &&
      spec.compare(spec.size() - skip_suffix.size(), skip_suffix.size(),
                   skip_suffix) == 0) {
    lc.skip_with_prev = true;
    spec = spec.substr(0, spec.size() - skip_suffix.size());
  }
  const std::vector<std::string> parts = split(spec, ':');
  if (parts.empty()) throw ConfigError("empty layer spec");
  std::string kind = parts[0];
  if (kind == "fc" || kind == "fcm") {
    if (parts.size() != 2)
      throw ConfigError("fc layer spec must be fc:<inducing>: " + spec);
    lc.kind = LayerConfig::Kind::kFc;
    lc.learn_mixup = kind == "fcm";  // fcm: fc with a learned mixup map
    lc.inducing = std::stol(parts[1]);
  } else if (kind == "conv") {
    if (parts.size() < 3 || parts.size() > 4)
      throw ConfigError("conv layer spec must be conv:<inducing>:<patch>[:<stride>]: " +
                        spec);
    lc.kind = LayerConfig::Kind::kConv;
    lc.inducing = std::stol(parts[1]);
    lc.patch_side = std::stol(parts[2]);
    lc.stride = parts.size() == 4 ? std::stol(parts[3]) : 1;
  } else {
    throw ConfigError("unknown layer kind: " + kind);
  }
  return lc;
}

}  // namespace

ModelConfig model_config_from_run(const RunConfig& cfg, index_t input_channels,
                                  int classes) {
  ModelConfig mc;
  mc.kernel.kind = kernel_kind_from_name(cfg.get_string("model.kernel"));
  mc.kernel.lengthscale = cfg.get_double("model.lengthscale");
  mc.inducing_inputs = cfg.get_long("model.inducing_inputs");
  mc.input_channels = input_channels;
  mc.classes = classes;
  mc.kii_jitter = cfg.get_double("model.kii_jitter");
  mc.reg.enabled = cfg.get_bool("reg.enabled");
  mc.reg.gamma = static_cast<int>(cfg.get_long("reg.gamma"));
  mc.reg.lambda = cfg.get_double("reg.lambda");
  const std::string prec = cfg.get_string("run.precision");
  if (prec == "double") {
    mc.precision = Precision::kDouble;
  } else if (prec == "single") {
    mc.precision = Precision::kSingle;
  } else {
    throw ConfigError("run.precision must be single or double");
  }
  for (const std::string& spec : cfg.get_string_list("model.layers"))
    mc.layers.push_back(parse_layer_spec(spec));
  mc.validate();
  return mc;
}

}  // namespace gramnet
