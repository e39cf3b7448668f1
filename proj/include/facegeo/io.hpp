// Copyright 2026 The facegeo Authors
// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

// On-disk formats. Every array-valued artifact is a JSON header plus a
// sibling blob of little-endian f64 values; the header names the blob and
// its length so truncation is detected on load.

#include <json.hpp>

#include <bit>
#include <charconv>
#include <cstring>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "facegeo/dataset.hpp"
#include "facegeo/errors.hpp"
#include "facegeo/metrics.hpp"
#include "facegeo/morphable.hpp"
#include "facegeo/networks.hpp"
#include "facegeo/training.hpp"

namespace facegeo::io {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

static_assert(std::endian::native == std::endian::little, "blob layout assumes a little-endian host");

// ----------------------------------------------------------------------------
// Primitive helpers

inline std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out << text;
  if (!out) throw FormatError("write failed: " + path.string());
}

inline void write_blob(const fs::path& path, const std::vector<double>& values) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(double)));
  if (!out) throw FormatError("write failed: " + path.string());
}

inline std::vector<double> read_blob(const fs::path& path, std::size_t expected) {
  const std::string bytes = read_text(path);
  if (bytes.size() != expected * sizeof(double))
    throw FormatError("shape mismatch: blob " + path.filename().string() + " holds " + std::to_string(bytes.size()) +
                      " bytes, header expects " + std::to_string(expected) + " f64 values");
  std::vector<double> out(expected);
  std::memcpy(out.data(), bytes.data(), bytes.size());
  return out;
}

inline json parse_json(const fs::path& path) {
  try {
    return json::parse(read_text(path));
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

/// Shortest decimal form that parses back to the same double.
inline std::string format_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return {buf, r.ptr};
}

/// FNV-1a, 64-bit.
inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string checksum_hex(const fs::path& path) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(read_text(path))));
  return buf;
}

/// "x.json" -> "x.bin".
inline fs::path blob_path(const fs::path& header) {
  fs::path p = header;
  return p.replace_extension(".bin");
}

template <class T>
T get(const json& j, const char* key, const std::string& what) {
  if (!j.contains(key)) throw FormatError(what + ": missing key \"" + key + "\"");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw FormatError(what + ": bad value for \"" + key + "\": " + e.what());
  }
}

inline void check_format(const json& j, const std::string& expected, const fs::path& path) {
  if (!j.is_object() || j.value("format", "") != expected)
    throw FormatError(path.string() + " is not a " + expected + " file");
  if (j.value("version", 0) != 1) throw FormatError(path.string() + ": unsupported version");
}

// ----------------------------------------------------------------------------
// Basis

inline void save_basis(const BasisSet& b, const fs::path& header) {
  b.validate();
  std::vector<double> values(b.mean.data(), b.mean.data() + b.mean.size());
  const auto append_rows = [&](const Eigen::MatrixXd& m) {
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) values.push_back(m(r, c));
  };
  append_rows(b.shape_basis);
  append_rows(b.expr_basis);
  json j;
  j["format"] = "facegeo.basis";
  j["version"] = 1;
  j["n_vertices"] = b.n_vertices;
  j["seed"] = b.seed;
  j["basis_scale"] = b.basis_scale;
  j["n_shape"] = b.shape_basis.cols();
  j["n_expr"] = b.expr_basis.cols();
  j["landmark_indices"] = b.landmark_indices;
  j["faces"] = b.faces;
  j["blob"] = blob_path(header).filename().string();
  j["blob_values"] = values.size();
  write_text(header, j.dump(1) + "\n");
  write_blob(blob_path(header), values);
}

inline BasisSet load_basis(const fs::path& header) {
  const json j = parse_json(header);
  check_format(j, "facegeo.basis", header);
  const std::string what = header.string();
  BasisSet b;
  b.n_vertices = get<std::size_t>(j, "n_vertices", what);
  b.seed = get<std::uint64_t>(j, "seed", what);
  b.basis_scale = get<double>(j, "basis_scale", what);
  const auto ns = get<Eigen::Index>(j, "n_shape", what);
  const auto ne = get<Eigen::Index>(j, "n_expr", what);
  b.landmark_indices = get<std::vector<int>>(j, "landmark_indices", what);
  b.faces = get<std::vector<Face>>(j, "faces", what);
  const auto rows = static_cast<Eigen::Index>(3 * b.n_vertices);
  const std::size_t count = static_cast<std::size_t>(rows * (1 + ns + ne));
  if (get<std::size_t>(j, "blob_values", what) != count)
    throw FormatError(what + ": blob_values disagrees with n_vertices and basis sizes");
  const auto v = read_blob(header.parent_path() / get<std::string>(j, "blob", what), count);
  b.mean = Eigen::Map<const Eigen::VectorXd>(v.data(), rows);
  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  b.shape_basis = Eigen::Map<const RowMat>(v.data() + rows, rows, ns);
  b.expr_basis = Eigen::Map<const RowMat>(v.data() + rows * (1 + ns), rows, ne);
  b.validate();
  return b;
}

// ----------------------------------------------------------------------------
// Dataset

struct DatasetFile {
  fs::path basis_path;
  BasisSet basis;
  std::uint64_t seed = 0;
  std::vector<TrainingSample> samples;
};

/// Writes the samples next to an existing basis header (stored relative).
inline void save_dataset(const std::vector<TrainingSample>& samples, std::uint64_t seed, const fs::path& header,
                         const fs::path& basis_header) {
  if (samples.empty()) throw ContractError("save_dataset: no samples");
  const std::size_t pixels = samples[0].observation.size();
  const std::size_t nl = samples[0].gt_landmarks.size();
  std::vector<double> values;
  values.reserve(samples.size() * (pixels + kParamDim + 3 * nl));
  json list = json::array();
  for (const auto& s : samples) {
    if (s.observation.size() != pixels || s.gt_landmarks.size() != nl)
      throw ContractError("save_dataset: samples disagree on observation or landmark size");
    values.insert(values.end(), s.observation.data.begin(), s.observation.data.end());
    const auto flat = s.gt_params.flat();
    values.insert(values.end(), flat.begin(), flat.end());
    values.insert(values.end(), s.gt_landmarks.points.data(), s.gt_landmarks.points.data() + 3 * nl);
    list.push_back({{"id", s.id}, {"gt_yaw", s.gt_yaw}});
  }
  json j;
  j["format"] = "facegeo.dataset";
  j["version"] = 1;
  j["basis"] = fs::relative(basis_header, header.parent_path().empty() ? fs::path(".") : header.parent_path()).generic_string();
  j["seed"] = seed;
  j["count"] = samples.size();
  j["image_side"] = samples[0].observation.rows();
  j["n_landmarks"] = nl;
  j["samples"] = list;
  j["blob"] = blob_path(header).filename().string();
  j["blob_values"] = values.size();
  write_text(header, j.dump(1) + "\n");
  write_blob(blob_path(header), values);
}

inline DatasetFile load_dataset(const fs::path& header) {
  const json j = parse_json(header);
  check_format(j, "facegeo.dataset", header);
  const std::string what = header.string();
  DatasetFile d;
  d.basis_path = header.parent_path() / get<std::string>(j, "basis", what);
  d.basis = load_basis(d.basis_path);
  d.seed = get<std::uint64_t>(j, "seed", what);
  const auto count = get<std::size_t>(j, "count", what);
  const auto side = get<std::size_t>(j, "image_side", what);
  const auto nl = get<std::size_t>(j, "n_landmarks", what);
  const auto& list = j.at("samples");
  if (!list.is_array() || list.size() != count) throw FormatError(what + ": sample list length != count");
  const std::size_t per = side * side + kParamDim + 3 * nl;
  if (get<std::size_t>(j, "blob_values", what) != count * per)
    throw FormatError(what + ": blob_values disagrees with count and sizes");
  const auto v = read_blob(header.parent_path() / get<std::string>(j, "blob", what), count * per);
  d.samples.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const double* p = v.data() + i * per;
    TrainingSample s;
    s.id = get<std::string>(list[i], "id", what);
    s.gt_yaw = get<double>(list[i], "gt_yaw", what);
    s.observation = Tensor({side, side}, std::vector<double>(p, p + side * side));
    s.gt_params = MorphParams::from_flat(std::span<const double>(p + side * side, kParamDim));
    s.gt_landmarks.points = Eigen::Map<const Points>(p + side * side + kParamDim, static_cast<Eigen::Index>(nl), 3);
    d.samples.push_back(std::move(s));
  }
  return d;
}

// ----------------------------------------------------------------------------
// Checkpoint

inline json ledger_json(const DimensionLedger& l) {
  return {{"image_side", l.image_side},
          {"encoder_hidden", l.encoder_hidden},
          {"z_dim", l.z_dim},
          {"point_low_dim", l.point_low_dim},
          {"point_global_dim", l.point_global_dim},
          {"shape_adapt_dim", l.shape_adapt_dim},
          {"expr_adapt_dim", l.expr_adapt_dim},
          {"n_landmarks", l.n_landmarks},
          {"m2fa_low_channels", l.m2fa_low_channels},
          {"m2fa_high_channels", l.m2fa_high_channels},
          {"decoder_channels", l.decoder_channels},
          {"lgs_channels", l.lgs_channels},
          {"fusion_dim", l.fusion_dim()},
          {"mmpf_dim", l.mmpf_dim()}};
}

inline DimensionLedger ledger_from_json(const json& j) {
  const std::string what = "ledger";
  DimensionLedger l;
  l.image_side = get<std::size_t>(j, "image_side", what);
  l.encoder_hidden = get<std::size_t>(j, "encoder_hidden", what);
  l.z_dim = get<std::size_t>(j, "z_dim", what);
  l.point_low_dim = get<std::size_t>(j, "point_low_dim", what);
  l.point_global_dim = get<std::size_t>(j, "point_global_dim", what);
  l.shape_adapt_dim = get<std::size_t>(j, "shape_adapt_dim", what);
  l.expr_adapt_dim = get<std::size_t>(j, "expr_adapt_dim", what);
  l.n_landmarks = get<std::size_t>(j, "n_landmarks", what);
  l.m2fa_low_channels = get<std::vector<std::size_t>>(j, "m2fa_low_channels", what);
  l.m2fa_high_channels = get<std::vector<std::size_t>>(j, "m2fa_high_channels", what);
  l.decoder_channels = get<std::vector<std::size_t>>(j, "decoder_channels", what);
  l.lgs_channels = get<std::vector<std::size_t>>(j, "lgs_channels", what);
  return l;
}

inline json variant_json(const ModelVariant& v) {
  return {{"image_feature", v.image_feature}, {"param_features", v.param_features}, {"lgs", v.lgs}};
}

inline ModelVariant variant_from_json(const json& j) {
  return {get<bool>(j, "image_feature", "variant"), get<bool>(j, "param_features", "variant"),
          get<bool>(j, "lgs", "variant")};
}

struct Checkpoint {
  NetworkParams params;
  std::size_t n_vertices = 0;
};

/// Serialized header and blob, kept in memory so callers can compare bytes.
struct CheckpointBytes {
  std::string header;
  std::vector<double> blob;
};

inline CheckpointBytes encode_checkpoint(NetworkParams& p, std::size_t n_vertices, const std::string& blob_name) {
  CheckpointBytes out;
  json tensors = json::array();
  for (const auto& s : p.slots()) {
    tensors.push_back({{"name", s.name},
                       {"group", s.group},
                       {"shape", s.tensor->shape},
                       {"offset", out.blob.size()},
                       {"count", s.tensor->size()}});
    out.blob.insert(out.blob.end(), s.tensor->data.begin(), s.tensor->data.end());
  }
  json j;
  j["format"] = "facegeo.checkpoint";
  j["version"] = 1;
  j["seed"] = p.seed;
  j["n_vertices"] = n_vertices;
  j["ledger"] = ledger_json(p.ledger);
  j["variant"] = variant_json(p.variant);
  j["tensors"] = tensors;
  j["blob"] = blob_name;
  j["blob_values"] = out.blob.size();
  out.header = j.dump(1) + "\n";
  return out;
}

inline void save_checkpoint(NetworkParams& p, std::size_t n_vertices, const fs::path& header) {
  const auto bytes = encode_checkpoint(p, n_vertices, blob_path(header).filename().string());
  write_text(header, bytes.header);
  write_blob(blob_path(header), bytes.blob);
}

inline Checkpoint load_checkpoint(const fs::path& header) {
  const json j = parse_json(header);
  check_format(j, "facegeo.checkpoint", header);
  const std::string what = header.string();
  const DimensionLedger ledger = ledger_from_json(j.at("ledger"));
  if (auto err = ledger.check()) throw FormatError("ledger invariant violated: " + *err);
  if (get<std::size_t>(j.at("ledger"), "fusion_dim", what) != ledger.fusion_dim() ||
      get<std::size_t>(j.at("ledger"), "mmpf_dim", what) != ledger.mmpf_dim())
    throw FormatError("ledger invariant violated: stored fusion/mmpf widths disagree with the channel plan");
  Checkpoint c;
  c.params = init_params(get<std::uint64_t>(j, "seed", what), ledger, variant_from_json(j.at("variant")));
  c.n_vertices = get<std::size_t>(j, "n_vertices", what);
  const auto total = get<std::size_t>(j, "blob_values", what);
  const auto blob = read_blob(header.parent_path() / get<std::string>(j, "blob", what), total);
  const auto slots = c.params.slots();
  const auto& tensors = j.at("tensors");
  if (!tensors.is_array() || tensors.size() != slots.size())
    throw FormatError("shape mismatch: checkpoint lists " + std::to_string(tensors.size()) + " tensors, model has " +
                      std::to_string(slots.size()));
  for (std::size_t k = 0; k < slots.size(); ++k) {
    const auto& t = tensors[k];
    const auto name = get<std::string>(t, "name", what);
    const auto shape = get<Shape>(t, "shape", what);
    const auto offset = get<std::size_t>(t, "offset", what);
    const auto count = get<std::size_t>(t, "count", what);
    if (name != slots[k].name) throw FormatError("tensor order mismatch: expected " + slots[k].name + ", found " + name);
    if (shape != slots[k].tensor->shape || count != slots[k].tensor->size())
      throw FormatError("shape mismatch for " + name + ": stored " + to_string(shape) + ", model expects " +
                        to_string(slots[k].tensor->shape));
    if (offset + count > blob.size()) throw FormatError("shape mismatch: tensor " + name + " runs past the blob");
    std::copy_n(blob.begin() + static_cast<std::ptrdiff_t>(offset), count, slots[k].tensor->data.begin());
  }
  return c;
}

// ----------------------------------------------------------------------------
// OBJ

inline std::string obj_string(const PointSet& mesh) {
  std::string out;
  for (Eigen::Index i = 0; i < mesh.points.rows(); ++i)
    out += "v " + format_double(mesh.points(i, 0)) + " " + format_double(mesh.points(i, 1)) + " " +
           format_double(mesh.points(i, 2)) + "\n";
  for (const auto& f : mesh.faces)
    out += "f " + std::to_string(f[0] + 1) + " " + std::to_string(f[1] + 1) + " " + std::to_string(f[2] + 1) + "\n";
  return out;
}

/// Reads "v" and triangular "f" records (1-based, "a/b/c" forms accepted);
/// everything else is ignored.
inline PointSet parse_obj(const std::string& text) {
  std::vector<double> xyz;
  PointSet out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag == "v") {
      double x, y, z;
      if (!(ls >> x >> y >> z)) throw FormatError("obj line " + std::to_string(lineno) + ": bad vertex");
      xyz.insert(xyz.end(), {x, y, z});
    } else if (tag == "f") {
      Face f{};
      std::string tok;
      int k = 0;
      while (ls >> tok) {
        if (k == 3) throw FormatError("obj line " + std::to_string(lineno) + ": only triangles are supported");
        f[static_cast<std::size_t>(k++)] = std::stoi(tok.substr(0, tok.find('/'))) - 1;
      }
      if (k != 3) throw FormatError("obj line " + std::to_string(lineno) + ": face needs three vertices");
      out.faces.push_back(f);
    }
  }
  out.points = Eigen::Map<const Points>(xyz.data(), static_cast<Eigen::Index>(xyz.size() / 3), 3);
  out.validate();
  return out;
}

// ----------------------------------------------------------------------------
// Training config and loss history

/// Flat "key = value" file; '#' starts a comment.
struct RunConfig {
  TrainConfig train;
  DimensionLedger ledger;
  ModelVariant variant;
};

inline RunConfig parse_config(const std::string& text) {
  RunConfig c;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  const auto number = [&](const std::string& key, const std::string& v) {
    std::size_t used = 0;
    double x = 0.0;
    try {
      x = std::stod(v, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != v.size() || !std::isfinite(x))
      throw ContractError("config line " + std::to_string(lineno) + ": " + key + " needs a number, got \"" + v + "\"");
    return x;
  };
  const auto count = [&](const std::string& key, const std::string& v) {
    const double x = number(key, v);
    if (x < 0 || x != std::floor(x))
      throw ContractError("config line " + std::to_string(lineno) + ": " + key + " needs a non-negative integer");
    return static_cast<std::size_t>(x);
  };
  const auto flag = [&](const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ContractError("config line " + std::to_string(lineno) + ": " + key + " needs true or false");
  };
  const auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    const auto e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line.substr(0, line.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ContractError("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string v = trim(line.substr(eq + 1));
    auto& t = c.train;
    if (key == "seed") t.seed = count(key, v);
    else if (key == "epochs") t.epochs = count(key, v);
    else if (key == "batch") t.batch = count(key, v);
    else if (key == "lr") t.lr = number(key, v);
    else if (key == "momentum") t.momentum = number(key, v);
    else if (key == "lambda1") t.lambdas.coefficient = number(key, v);
    else if (key == "lambda2") t.lambdas.landmark = number(key, v);
    else if (key == "lambda3") t.lambdas.landmark_coefficient = number(key, v);
    else if (key == "lambda4") t.lambdas.consistency = number(key, v);
    else if (key == "lambdas") {
      std::vector<double> l;
      std::istringstream ls(v);
      for (std::string part; std::getline(ls, part, ',');) l.push_back(number(key, trim(part)));
      if (l.size() != 4) throw ContractError("config line " + std::to_string(lineno) + ": lambdas needs four values");
      t.lambdas = {l[0], l[1], l[2], l[3]};
    } else if (key == "z_dim") t.z_dim = count(key, v);
    else if (key == "n_vertices") t.n_vertices = count(key, v);
    else if (key == "encoder_hidden") c.ledger.encoder_hidden = count(key, v);
    else if (key == "point_global_dim") c.ledger.point_global_dim = count(key, v);
    else if (key == "image_feature") c.variant.image_feature = flag(key, v);
    else if (key == "param_features") c.variant.param_features = flag(key, v);
    else if (key == "lgs") c.variant.lgs = flag(key, v);
    else throw ContractError("config line " + std::to_string(lineno) + ": unknown key \"" + key + "\"");
  }
  c.ledger.z_dim = c.train.z_dim;
  const auto& l = c.train.lambdas;
  if (l.coefficient < 0 || l.landmark < 0 || l.landmark_coefficient < 0 || l.consistency < 0)
    throw ContractError("config: loss weights must be non-negative");
  if (c.train.lr < 0) throw ContractError("config: lr must be non-negative");
  if (auto err = c.ledger.check()) throw ContractError("config: " + *err);
  return c;
}

inline json config_json(const RunConfig& c) {
  const auto& t = c.train;
  return {{"seed", t.seed},
          {"epochs", t.epochs},
          {"batch", t.batch},
          {"lr", t.lr},
          {"momentum", t.momentum},
          {"lambdas", {t.lambdas.coefficient, t.lambdas.landmark, t.lambdas.landmark_coefficient, t.lambdas.consistency}},
          {"z_dim", t.z_dim},
          {"n_vertices", t.n_vertices},
          {"ledger", ledger_json(c.ledger)},
          {"variant", variant_json(c.variant)}};
}

inline std::string loss_csv(const std::vector<EpochLoss>& history) {
  std::string out = "epoch,L_3DMM,L_lmk,L_3DMM_lmk,L_g,total\n";
  for (const auto& e : history)
    out += std::to_string(e.epoch) + "," + format_double(e.components.coefficient) + "," +
           format_double(e.components.landmark) + "," + format_double(e.components.landmark_coefficient) + "," +
           format_double(e.components.consistency) + "," + format_double(e.total) + "\n";
  return out;
}

// ----------------------------------------------------------------------------
// Predictions, reports and manifests

/// Per-sample inference record: {"id", "coarse", "refined", "euler_deg"}.
inline json landmark_json(const std::string& id, const PointSet& coarse, const PointSet& refined,
                          const EulerAngles& e) {
  const auto rows = [](const PointSet& ps) {
    json a = json::array();
    for (Eigen::Index i = 0; i < ps.points.rows(); ++i) a.push_back({ps.points(i, 0), ps.points(i, 1), ps.points(i, 2)});
    return a;
  };
  return {{"id", id}, {"coarse", rows(coarse)}, {"refined", rows(refined)},
          {"euler_deg", {{"yaw", e.yaw}, {"pitch", e.pitch}, {"roll", e.roll}}}};
}

struct LandmarkRecord {
  std::string id;
  PointSet coarse, refined;
  EulerAngles euler;
};

inline LandmarkRecord landmark_from_json(const json& j, const std::string& what) {
  const auto rows = [&](const char* key) {
    const auto v = get<std::vector<std::array<double, 3>>>(j, key, what);
    PointSet ps;
    ps.points.resize(static_cast<Eigen::Index>(v.size()), 3);
    for (std::size_t i = 0; i < v.size(); ++i)
      for (int k = 0; k < 3; ++k) ps.points(static_cast<Eigen::Index>(i), k) = v[i][static_cast<std::size_t>(k)];
    return ps;
  };
  LandmarkRecord r;
  r.id = get<std::string>(j, "id", what);
  r.coarse = rows("coarse");
  r.refined = rows("refined");
  const json& e = j.at("euler_deg");
  r.euler = {get<double>(e, "yaw", what), get<double>(e, "pitch", what), get<double>(e, "roll", what)};
  return r;
}

inline json report_json(const MetricsReport& r) {
  const auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  json buckets = json::object();
  for (const auto& name : kBucketNames)
    if (auto it = r.nme_by_bucket.find(name); it != r.nme_by_bucket.end()) buckets[name] = it->second;
  json mae = nullptr;
  if (r.mae) mae = {{"yaw", r.mae->yaw}, {"pitch", r.mae->pitch}, {"roll", r.mae->roll}, {"mean", r.mae->mean}};
  return {{"nme_by_bucket", buckets},
          {"mae", mae},
          {"recon",
           {{"protocol1_nme", opt(r.recon.protocol1_nme)},
            {"protocol2_nme", opt(r.recon.protocol2_nme)},
            {"p2plane_rmse", opt(r.recon.p2plane_rmse)}}}};
}

/// "out/ckpt.json" -> "out/ckpt.manifest.json".
inline fs::path manifest_path_for(const fs::path& artifact) {
  fs::path p = artifact;
  return p.replace_extension(".manifest.json");
}

/// One manifest per run: command, configuration, inputs and checksums of
/// every output file. Paths are stored relative to the manifest, so nothing
/// in it depends on time, host or working directory.
inline void write_manifest(const fs::path& path, const std::string& command, const json& config,
                           const std::map<std::string, std::uint64_t>& seeds, const std::vector<fs::path>& inputs,
                           const std::vector<fs::path>& outputs) {
  const fs::path base = path.parent_path().empty() ? fs::path(".") : path.parent_path();
  const auto rel = [&](const fs::path& p) { return fs::proximate(p, base).generic_string(); };
  json j;
  j["format"] = "facegeo.manifest";
  j["version"] = 1;
  j["command"] = command;
  j["config"] = config;
  j["seeds"] = seeds;
  json in = json::array();
  for (const auto& p : inputs) in.push_back(rel(p));
  j["inputs"] = in;
  json out = json::array();
  for (const auto& p : outputs) out.push_back({{"path", rel(p)}, {"fnv1a64", checksum_hex(p)}});
  j["outputs"] = out;
  write_text(path, j.dump(1) + "\n");
}

}  // namespace facegeo::io
