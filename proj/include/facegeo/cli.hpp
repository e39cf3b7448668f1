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

// The facegeo command line: synth, train, infer, eval, verify.
// Exit codes: 0 success, 1 invariant or evaluation failure, 2 usage,
// 3 data mismatch.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "facegeo/dataset.hpp"
#include "facegeo/errors.hpp"
#include "facegeo/io.hpp"
#include "facegeo/metrics.hpp"
#include "facegeo/morphable.hpp"
#include "facegeo/networks.hpp"
#include "facegeo/training.hpp"

namespace facegeo::cli {

namespace fs = std::filesystem;
using io::json;

enum ExitCode : int { kOk = 0, kFailure = 1, kUsage = 2, kMismatch = 3 };

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class MismatchError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Crop radius around the nose tip for the point-to-plane protocol, in model
/// units (the synthetic face is about two units wide).
inline constexpr double kFlorenceCropRadius = 0.95;

/// Dataset coefficients come from a stream distinct from the basis stream.
inline std::uint64_t dataset_seed(std::uint64_t seed) { return seed ^ 0x9E3779B97F4A7C15ULL; }

struct SynthData {
  BasisSet basis;
  std::vector<TrainingSample> samples;
};

inline SynthData synthesize(std::uint64_t seed, std::size_t n_vertices, std::size_t count) {
  SynthData d;
  d.basis = generate_synthetic_basis(seed, n_vertices);
  d.samples = generate_dataset(d.basis, dataset_seed(seed), count);
  return d;
}

/// Posed dense mesh of a coefficient vector (raw affine pose block).
inline PointSet posed_mesh(const BasisSet& basis, const MorphParams& alpha) {
  PointSet mesh = apply_affine(reconstruct_frontal(basis, alpha), std::span<const double, kPoseDim>(alpha.pose));
  mesh.faces = basis.faces;
  return mesh;
}

// ----------------------------------------------------------------------------
// Evaluation shared by the eval command and library-level checks

enum class Protocol { kNme, kMae, kP1, kP2, kFlorence };

inline std::optional<Protocol> parse_protocol(const std::string& s) {
  if (s == "nme") return Protocol::kNme;
  if (s == "mae") return Protocol::kMae;
  if (s == "p1") return Protocol::kP1;
  if (s == "p2") return Protocol::kP2;
  if (s == "florence") return Protocol::kFlorence;
  return std::nullopt;
}

inline std::string protocol_name(Protocol p) {
  switch (p) {
    case Protocol::kNme: return "nme";
    case Protocol::kMae: return "mae";
    case Protocol::kP1: return "p1";
    case Protocol::kP2: return "p2";
    case Protocol::kFlorence: return "florence";
  }
  return "?";
}

/// Predictions keyed by sample id; meshes are only needed by the dense
/// protocols.
struct PredictionSet {
  std::map<std::string, io::LandmarkRecord> landmarks;
  std::map<std::string, PointSet> meshes;
};

inline bool needs_mesh(Protocol p) { return p == Protocol::kP1 || p == Protocol::kP2 || p == Protocol::kFlorence; }

/// Point-to-plane RMSE of one sample. The groundtruth is cropped around its
/// nose-tip vertex; the prediction keeps the same vertex indices (shared
/// topology) and is registered onto the crop.
inline double florence_rmse(const PointSet& pred_mesh, const PointSet& gt_mesh, const BasisSet& basis) {
  const std::size_t tip = nose_tip_vertex(basis);
  const auto kept = crop_indices(gt_mesh, gt_mesh.point(tip), kFlorenceCropRadius);
  return point_to_plane_rmse(select_vertices(pred_mesh, kept), select_vertices(gt_mesh, kept), true);
}

inline MetricsReport evaluate(Protocol protocol, const io::DatasetFile& gt, const PredictionSet& pred) {
  MetricsReport report;
  switch (protocol) {
    case Protocol::kNme: {
      std::vector<EvalRecord> records;
      for (const auto& s : gt.samples) {
        EvalRecord r;
        r.pred_landmarks = pred.landmarks.at(s.id).refined;
        r.gt_landmarks = s.gt_landmarks;
        r.gt_params = s.gt_params;
        r.gt_yaw = s.gt_yaw;
        records.push_back(std::move(r));
      }
      report.nme_by_bucket = nme_report(records);
      break;
    }
    case Protocol::kMae: {
      std::vector<AnglePair> pairs;
      for (const auto& s : gt.samples) {
        if (!(s.gt_yaw >= -99.0 && s.gt_yaw <= 99.0)) continue;
        pairs.push_back({pred.landmarks.at(s.id).euler, pose_euler(s.gt_params), s.gt_yaw});
      }
      report.mae = mae_euler(pairs);
      break;
    }
    case Protocol::kP1:
    case Protocol::kP2:
    case Protocol::kFlorence: {
      double sum = 0.0;
      for (const auto& s : gt.samples) {
        const PointSet gt_mesh = posed_mesh(gt.basis, s.gt_params);
        const PointSet& p = pred.meshes.at(s.id);
        if (protocol == Protocol::kP1) sum += protocol1_nme(p, gt_mesh, interocular_distance(gt_mesh, gt.basis));
        else if (protocol == Protocol::kP2) sum += protocol2_nme(p, gt_mesh, bbox_norm(s.gt_landmarks));
        else sum += florence_rmse(p, gt_mesh, gt.basis);
      }
      if (gt.samples.empty()) throw EmptyEvaluationError("no groundtruth samples");
      const double mean = sum / static_cast<double>(gt.samples.size());
      if (protocol == Protocol::kP1) report.recon.protocol1_nme = mean;
      else if (protocol == Protocol::kP2) report.recon.protocol2_nme = mean;
      else report.recon.p2plane_rmse = mean;
      break;
    }
  }
  return report;
}

/// Loads `<id>.json` (and `<id>.obj` when needed) for every groundtruth id.
/// Throws MismatchError listing the ids without predictions.
inline PredictionSet load_predictions(const fs::path& dir, const io::DatasetFile& gt, bool with_mesh) {
  PredictionSet out;
  std::vector<std::string> missing;
  for (const auto& s : gt.samples) {
    const fs::path js = dir / (s.id + ".json");
    const fs::path obj = dir / (s.id + ".obj");
    if (!fs::exists(js) || (with_mesh && !fs::exists(obj))) {
      missing.push_back(s.id);
      continue;
    }
    auto rec = io::landmark_from_json(io::parse_json(js), js.string());
    if (rec.id != s.id) throw MismatchError(js.string() + " holds id " + rec.id + ", expected " + s.id);
    if (rec.refined.size() != s.gt_landmarks.size())
      throw MismatchError(s.id + ": " + std::to_string(rec.refined.size()) + " predicted landmarks vs " +
                          std::to_string(s.gt_landmarks.size()));
    out.landmarks.emplace(s.id, std::move(rec));
    if (with_mesh) {
      PointSet mesh = io::parse_obj(io::read_text(obj));
      if (mesh.size() != gt.basis.n_vertices)
        throw MismatchError(s.id + ".obj has " + std::to_string(mesh.size()) + " vertices, basis has " +
                            std::to_string(gt.basis.n_vertices));
      out.meshes.emplace(s.id, std::move(mesh));
    }
  }
  if (!missing.empty()) {
    std::string msg = "no prediction for " + std::to_string(missing.size()) + " groundtruth id(s):";
    for (const auto& id : missing) msg += " " + id;
    throw MismatchError(msg);
  }
  return out;
}

// ----------------------------------------------------------------------------
// Commands

inline void require_file(const fs::path& p, const std::string& flag) {
  if (!fs::is_regular_file(p)) throw UsageError(flag + ": no such file: " + p.string());
}

inline void ensure_dir(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec || !fs::is_directory(p)) throw UsageError("cannot create directory " + p.string());
}

struct SynthArgs {
  std::uint64_t seed = 7;
  std::size_t n_vertices = 2048;
  std::size_t count = 0;
  fs::path out;
};

inline int cmd_synth(const SynthArgs& a, std::ostream& out) {
  ensure_dir(a.out);
  const SynthData d = synthesize(a.seed, a.n_vertices, a.count);
  const fs::path basis = a.out / "basis.json";
  const fs::path data = a.out / "dataset.json";
  io::save_basis(d.basis, basis);
  io::save_dataset(d.samples, dataset_seed(a.seed), data, basis);
  io::write_manifest(a.out / "manifest.json", "synth",
                     {{"seed", a.seed}, {"n_vertices", a.n_vertices}, {"count", a.count}},
                     {{"basis", a.seed}, {"dataset", dataset_seed(a.seed)}}, {},
                     {basis, io::blob_path(basis), data, io::blob_path(data)});
  out << "wrote " << d.samples.size() << " samples to " << data.string() << "\n";
  return kOk;
}

struct TrainArgs {
  fs::path data, config, out_checkpoint, loss_csv;
};

inline int cmd_train(const TrainArgs& a, std::ostream& out) {
  require_file(a.data, "--data");
  require_file(a.config, "--config");
  io::RunConfig cfg;
  try {
    cfg = io::parse_config(io::read_text(a.config));
  } catch (const ContractError& e) {
    throw UsageError(e.what());
  }
  const auto data = io::load_dataset(a.data);
  if (cfg.train.n_vertices != data.basis.n_vertices)
    throw MismatchError("config n_vertices = " + std::to_string(cfg.train.n_vertices) + " but the dataset basis has " +
                        std::to_string(data.basis.n_vertices));
  NetworkParams params = init_params(cfg.train.seed, cfg.ledger, cfg.variant);
  const auto history = train(cfg.train, data.samples, landmark_basis(data.basis), params);
  io::save_checkpoint(params, data.basis.n_vertices, a.out_checkpoint);
  io::write_text(a.loss_csv, io::loss_csv(history));
  io::write_manifest(io::manifest_path_for(a.out_checkpoint), "train", io::config_json(cfg),
                     {{"init", cfg.train.seed}, {"shuffle", cfg.train.seed}}, {a.data, a.config},
                     {a.out_checkpoint, io::blob_path(a.out_checkpoint), a.loss_csv});
  out << "epoch 1 total " << io::format_double(history.front().total) << ", epoch " << history.back().epoch
      << " total " << io::format_double(history.back().total) << "\n";
  return kOk;
}

/// Ledger facts a dataset imposes on a checkpoint.
inline json data_ledger_json(const io::DatasetFile& d) {
  return {{"n_vertices", d.basis.n_vertices},
          {"n_landmarks", d.basis.n_landmarks()},
          {"image_side", d.samples.empty() ? 0 : d.samples.front().observation.rows()}};
}

inline json checkpoint_ledger_json(const io::Checkpoint& c) {
  return {{"n_vertices", c.n_vertices},
          {"n_landmarks", c.params.ledger.n_landmarks},
          {"image_side", c.params.ledger.image_side}};
}

struct InferArgs {
  fs::path checkpoint, input, out_dir;
  std::string emit = "both";
};

inline int cmd_infer(const InferArgs& a, std::ostream& out) {
  require_file(a.checkpoint, "--checkpoint");
  require_file(a.input, "--input");
  auto ckpt = io::load_checkpoint(a.checkpoint);
  const auto data = io::load_dataset(a.input);
  if (checkpoint_ledger_json(ckpt) != data_ledger_json(data))
    throw MismatchError("ledger mismatch\n  checkpoint: " + checkpoint_ledger_json(ckpt).dump() +
                        "\n  data:       " + data_ledger_json(data).dump());
  ensure_dir(a.out_dir);
  const bool want_json = a.emit != "obj";
  const bool want_obj = a.emit != "json";
  std::vector<fs::path> written;
  for (const auto& p : predict(ckpt.params, landmark_basis(data.basis), data.samples, false)) {
    if (want_json) {
      const fs::path js = a.out_dir / (p.id + ".json");
      io::write_text(js, io::landmark_json(p.id, p.coarse, p.refined, pose_euler(p.alpha)).dump() + "\n");
      written.push_back(js);
    }
    if (want_obj) {
      const fs::path obj = a.out_dir / (p.id + ".obj");
      io::write_text(obj, io::obj_string(posed_mesh(data.basis, p.alpha)));
      written.push_back(obj);
    }
  }
  io::write_manifest(a.out_dir / "manifest.json", "infer", {{"emit", a.emit}}, {{"checkpoint", ckpt.params.seed}},
                     {a.checkpoint, a.input}, written);
  out << "wrote predictions for " << data.samples.size() << " samples to " << a.out_dir.string() << "\n";
  return kOk;
}

struct EvalArgs {
  fs::path pred_dir, gt_data, out_report;
  std::string protocol;
};

inline int cmd_eval(const EvalArgs& a, std::ostream& out) {
  const auto protocol = parse_protocol(a.protocol);
  if (!protocol) throw UsageError("--protocol must be one of nme, mae, p1, p2, florence");
  if (!fs::is_directory(a.pred_dir)) throw UsageError("--pred-dir: no such directory: " + a.pred_dir.string());
  require_file(a.gt_data, "--gt-data");
  const auto gt = io::load_dataset(a.gt_data);
  const auto pred = load_predictions(a.pred_dir, gt, needs_mesh(*protocol));
  json report = io::report_json(evaluate(*protocol, gt, pred));
  report["protocol"] = protocol_name(*protocol);
  report["n_samples"] = gt.samples.size();
  io::write_text(a.out_report, report.dump(1) + "\n");
  io::write_manifest(io::manifest_path_for(a.out_report), "eval", {{"protocol", protocol_name(*protocol)}}, {},
                     {a.pred_dir, a.gt_data}, {a.out_report});
  out << report.dump() << "\n";
  return kOk;
}

/// Thrown by verify with the name of the first failing invariant.
class InvariantFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void verify_basis(const BasisSet& b) {
  try {
    b.validate();
  } catch (const std::exception& e) {
    throw InvariantFailure(std::string("basis structure: ") + e.what());
  }
  const auto check_cols = [&](const Eigen::MatrixXd& m, const char* name) {
    const Eigen::MatrixXd gram = m.transpose() * m / (b.basis_scale * b.basis_scale);
    const double dev = (gram - Eigen::MatrixXd::Identity(m.cols(), m.cols())).cwiseAbs().maxCoeff();
    if (!(dev < 1e-9)) throw InvariantFailure(std::string("orthonormality of ") + name + " basis: deviation " + io::format_double(dev));
  };
  check_cols(b.shape_basis, "shape");
  check_cols(b.expr_basis, "expression");
  const Eigen::MatrixXd cross = b.shape_basis.transpose() * b.expr_basis / (b.basis_scale * b.basis_scale);
  if (!(cross.cwiseAbs().maxCoeff() < 1e-9)) throw InvariantFailure("orthogonality of shape and expression bases");
}

inline void verify_dataset(const io::DatasetFile& d, std::ostream& out) {
  verify_basis(d.basis);
  out << "ok: basis orthonormality (" << d.basis.shape_basis.cols() << " shape, " << d.basis.expr_basis.cols()
      << " expression columns)\n";
  double worst = 0.0;
  for (const auto& s : d.samples) {
    if (s.gt_landmarks.size() != d.basis.n_landmarks())
      throw InvariantFailure("landmark count of sample " + s.id);
    if (!s.observation.all_finite() || !s.gt_params.all_finite() || !s.gt_landmarks.points.allFinite())
      throw InvariantFailure("finite values in sample " + s.id);
    Pose pose;
    try {
      pose = decompose_pose(std::span<const double, kPoseDim>(s.gt_params.pose));
    } catch (const DegeneratePoseError&) {
      throw InvariantFailure("pose of sample " + s.id + " is degenerate");
    }
    const auto back = compose_pose(pose);
    for (std::size_t k = 0; k < kPoseDim; ++k)
      if (!(std::abs(back[k] - s.gt_params.pose[k]) < 1e-9))
        throw InvariantFailure("pose of sample " + s.id + " is not a similarity transform");
    const double err = self_consistency_error(d.basis, s);
    if (!(err < 1e-10))
      throw InvariantFailure("self-consistency of sample " + s.id + ": landmark deviation " + io::format_double(err));
    worst = std::max(worst, err);
  }
  out << "ok: " << d.samples.size() << " samples self-consistent (max deviation " << io::format_double(worst) << ")\n";
}

inline void verify_checkpoint(io::Checkpoint& c, std::ostream& out) {
  const auto& l = c.params.ledger;
  if (auto err = l.check()) throw InvariantFailure("ledger arithmetic: " + *err);
  if (l.fusion_dim() != l.z_dim + l.point_global_dim + l.shape_adapt_dim + l.expr_adapt_dim ||
      l.mmpf_dim() != l.fusion_dim() + l.point_low_dim)
    throw InvariantFailure("ledger arithmetic: fusion/mmpf widths");
  out << "ok: fusion_dim = " << l.fusion_dim() << ", mmpf_dim = " << l.mmpf_dim() << "\n";
  if (l == DimensionLedger{}) {
    if (l.fusion_dim() != 2354 || l.mmpf_dim() != 2418) throw InvariantFailure("default ledger widths 2354 / 2418");
    out << "ok: default ledger reproduces 2354 / 2418\n";
  }
  const auto& first = c.params.m2fa_decoder.layers.front();
  if (first.weight.rows() != c.params.mmpf_width())
    throw InvariantFailure("shape mismatch: refiner input width " + std::to_string(first.weight.rows()) +
                           " vs mmpf width " + std::to_string(c.params.mmpf_width()));
  for (auto& s : c.params.slots()) {
    if (!s.tensor->all_finite()) throw InvariantFailure("finite weights: " + s.name);
    if (s.name.ends_with("running_var"))
      for (double v : s.tensor->data)
        if (!(v >= 0.0)) throw InvariantFailure("non-negative running variance: " + s.name);
  }
  out << "ok: " << c.params.slots().size() << " tensors finite\n";
}

struct VerifyArgs {
  fs::path data, checkpoint;
};

inline int cmd_verify(const VerifyArgs& a, std::ostream& out) {
  if (a.data.empty() == a.checkpoint.empty()) throw UsageError("verify needs exactly one of --data or --checkpoint");
  const fs::path target = a.data.empty() ? a.checkpoint : a.data;
  require_file(target, a.data.empty() ? "--checkpoint" : "--data");
  try {
    if (!a.data.empty()) {
      const auto d = io::load_dataset(a.data);
      verify_dataset(d, out);
    } else {
      auto c = io::load_checkpoint(a.checkpoint);
      verify_checkpoint(c, out);
    }
  } catch (const FormatError& e) {
    throw InvariantFailure(e.what());
  } catch (const ContractError& e) {
    throw InvariantFailure(e.what());
  }
  out << "verify: all invariants hold\n";
  return kOk;
}

// ----------------------------------------------------------------------------
// Entry point

inline int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"facegeo: synthetic face geometry pipeline", "facegeo"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Generate a synthetic basis and dataset");
  s->add_option("--seed", synth.seed, "Random seed")->capture_default_str();
  // 137 is the smallest mesh with 68 front-facing vertices.
  s->add_option("--n-vertices", synth.n_vertices, "Mesh vertex count")
      ->capture_default_str()
      ->check(CLI::Range(137, 1 << 22));
  s->add_option("--count", synth.count, "Number of samples")->required()->check(CLI::Range(1, 1 << 24));
  s->add_option("--out", synth.out, "Output directory")->required();

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train the pipeline");
  t->add_option("--data", tr.data, "dataset.json")->required();
  t->add_option("--config", tr.config, "key = value config file")->required();
  t->add_option("--out-checkpoint", tr.out_checkpoint, "checkpoint header path (.json)")->required();
  t->add_option("--loss-csv", tr.loss_csv, "per-epoch loss CSV")->required();

  InferArgs inf;
  auto* i = app.add_subcommand("infer", "Run inference and export landmarks and meshes");
  i->add_option("--checkpoint", inf.checkpoint)->required();
  i->add_option("--input", inf.input, "dataset.json")->required();
  i->add_option("--out-dir", inf.out_dir)->required();
  i->add_option("--emit", inf.emit)->capture_default_str()->check(CLI::IsMember({"obj", "json", "both"}));

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Score predictions against groundtruth");
  e->add_option("--pred-dir", ev.pred_dir)->required();
  e->add_option("--gt-data", ev.gt_data)->required();
  e->add_option("--protocol", ev.protocol)->required()->check(CLI::IsMember({"nme", "mae", "p1", "p2", "florence"}));
  e->add_option("--out-report", ev.out_report)->required();

  VerifyArgs ver;
  auto* v = app.add_subcommand("verify", "Check every invariant of a dataset or checkpoint");
  auto* vd = v->add_option("--data", ver.data);
  auto* vc = v->add_option("--checkpoint", ver.checkpoint);
  vd->excludes(vc);

  std::vector<const char*> argv;
  argv.push_back("facegeo");
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& pe) {
    const int code = app.exit(pe, out, err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (s->parsed()) return cmd_synth(synth, out);
    if (t->parsed()) return cmd_train(tr, out);
    if (i->parsed()) return cmd_infer(inf, out);
    if (e->parsed()) return cmd_eval(ev, out);
    if (v->parsed()) return cmd_verify(ver, out);
  } catch (const UsageError& x) {
    err << "usage error: " << x.what() << "\n";
    return kUsage;
  } catch (const MismatchError& x) {
    err << "data mismatch: " << x.what() << "\n";
    return kMismatch;
  } catch (const InvariantFailure& x) {
    err << "invariant failed: " << x.what() << "\n";
    return kFailure;
  } catch (const std::exception& x) {
    err << "error: " << x.what() << "\n";
    return kFailure;
  }
  return kUsage;
}

}  // namespace facegeo::cli
