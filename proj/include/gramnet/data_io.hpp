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

#ifndef GRAMNET_DATA_IO_HPP
#define GRAMNET_DATA_IO_HPP

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "gramnet/net.hpp"
#include "gramnet/skr.hpp"

namespace gramnet {

/// A labelled dataset: inputs are (P*S) x channels rows in raster order with
/// spatial metadata (S = 1 for vector data), labels one per image.
struct Dataset {
  DenseMatrix inputs;  // double precision at rest
  std::vector<int> labels;
  SpatialShape shape;  // images = labels.size()
  index_t channels = 0;
  int classes = 0;
  std::string split = "train";

  void validate() const;
};

/// Two interleaved noisy arcs ("two moons"), sigma = 0.1, labels 0/1,
/// deterministic under seed, not linearly separable.
Dataset gen_toy_binary(index_t n, std::uint64_t seed);

/// Synthetic image task: `classes` low-frequency class templates with
/// per-sample translation jitter and pixel noise, quantised to u8 levels.
Dataset gen_image_blobs(index_t n, index_t side, int classes,
                        std::uint64_t seed);

/// Per-channel normalisation statistics, computed on the train split only.
struct NormStats {
  std::vector<double> mean;
  std::vector<double> std_dev;
};
NormStats compute_norm_stats(const Dataset& train);
void apply_norm_stats(Dataset& data, const NormStats& stats);

// Raw u8 image container ("GNDS"): little-endian header
// {magic "GNDS", version u32, N u32, C u32, W u32, H u32}, then N*C*W*H
// pixel bytes (image-major, then channel, row, column), N label bytes, and a
// CRC32 of all preceding bytes. Pixels load scaled to [0, 1].
void write_image_dataset(const std::string& path, const Dataset& data);
Dataset load_image_dataset(const std::string& path);

/// One metrics row per epoch plus a terminal row.
struct MetricRow {
  long epoch = 0;
  long step = 0;
  double objective = 0.0;
  double train_ll = 0.0;
  double train_acc = 0.0;
  double eval_ll = 0.0;
  double eval_acc = 0.0;
  std::vector<double> cond_g_ii;
  double lr = 0.0;
  double wall_seconds = 0.0;
  std::string status = "ok";  // ok | failed
};

void write_metrics(const std::vector<MetricRow>& rows, const std::string& path);
std::vector<MetricRow> read_metrics(const std::string& path);

/// Streaming writer used by the training loop (appends row by row).
class MetricsWriter {
 public:
  MetricsWriter(std::string path, std::size_t layer_count);
  void append(const MetricRow& row);
  const std::string& path() const { return path_; }

 private:
  std::string path_;
  std::size_t layer_count_;
  bool header_written_ = false;
};

std::string metric_header(std::size_t layer_count);
std::string metric_line(const MetricRow& row, std::size_t layer_count);

/// Flat "key = value" configuration with '#' comments and dotted key
/// namespaces. Unknown keys are rejected against the run-config schema.
class RunConfig {
 public:
  static RunConfig from_file(const std::string& path);
  static RunConfig from_string(const std::string& text);

  void set(const std::string& key, const std::string& value);  // validated
  bool has(const std::string& key) const;

  std::string get_string(const std::string& key) const;
  double get_double(const std::string& key) const;
  long get_long(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  std::vector<double> get_double_list(const std::string& key) const;
  std::vector<std::string> get_string_list(const std::string& key) const;

  /// Serialise (sorted keys) for resolved-config snapshots.
  std::string to_string() const;
  /// FNV-1a over the model-defining keys (model.*, reg.*, data.channels,
  /// data.classes); the checkpoint compatibility hash.
  std::uint64_t model_hash() const;

  const std::map<std::string, std::string>& entries() const { return kv_; }

 private:
  std::map<std::string, std::string> kv_;
};

/// Known config keys with their defaults; unknown keys throw ConfigError.
const std::map<std::string, std::string>& config_schema();

// Model/run assembly from a validated config.
ModelConfig model_config_from_run(const RunConfig& cfg, index_t input_channels,
                                  int classes);

}  // namespace gramnet

#endif  // GRAMNET_DATA_IO_HPP
