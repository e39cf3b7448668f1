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

#include <gtest/gtest.h>

#include <sstream>

#include "facegeo/cli.hpp"
#include "facegeo/io.hpp"
#include "oracles.hpp"
#include "support.hpp"

namespace facegeo {
namespace {

namespace fs = std::filesystem;
using testing::TempDir;

struct CliResult {
  int code;
  std::string out, err;
};

CliResult run_cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string bytes(const fs::path& p) { return io::read_text(p); }

constexpr const char* kSmallConfig = "n_vertices = 256\nepochs = 1\nbatch = 8\n";

/// synth + train once, shared by the CLI tests below.
class CliFixture : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir("cli");
    const auto& d = *dir_;
    ASSERT_EQ(run_cli({"synth", "--seed", "3", "--n-vertices", "256", "--count", "24", "--out", (d / "data").string()}).code, 0);
    io::write_text(d / "small.cfg", kSmallConfig);
    const auto r = run_cli({"train", "--data", (d / "data/dataset.json").string(), "--config", (d / "small.cfg").string(),
                            "--out-checkpoint", (d / "ckpt.json").string(), "--loss-csv", (d / "loss.csv").string()});
    ASSERT_EQ(r.code, 0) << r.err;
  }
  static void TearDownTestSuite() {
    delete dir_;
    dir_ = nullptr;
  }
  static fs::path at(const std::string& leaf) { return *dir_ / leaf; }

  static TempDir* dir_;
};
TempDir* CliFixture::dir_ = nullptr;

// ----------------------------------------------------------------------------
// Formats

TEST(IoTest, BasisRoundtrip) {
  TempDir dir("basis");
  const BasisSet b = generate_synthetic_basis(5, 300);
  io::save_basis(b, dir / "b.json");
  const BasisSet c = io::load_basis(dir / "b.json");
  EXPECT_EQ(c.n_vertices, b.n_vertices);
  EXPECT_EQ(c.seed, b.seed);
  EXPECT_EQ(c.basis_scale, b.basis_scale);
  EXPECT_TRUE(c.mean == b.mean);
  EXPECT_TRUE(c.shape_basis == b.shape_basis);
  EXPECT_TRUE(c.expr_basis == b.expr_basis);
  EXPECT_EQ(c.faces, b.faces);
  EXPECT_EQ(c.landmark_indices, b.landmark_indices);
}

TEST(IoTest, DatasetRoundtripAndTruncation) {
  TempDir dir("dataset");
  const auto d = cli::synthesize(9, 200, 5);
  io::save_basis(d.basis, dir / "basis.json");
  io::save_dataset(d.samples, 99, dir / "data.json", dir / "basis.json");
  const auto back = io::load_dataset(dir / "data.json");
  ASSERT_EQ(back.samples.size(), 5u);
  EXPECT_EQ(back.seed, 99u);
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(back.samples[i].id, d.samples[i].id);
    EXPECT_EQ(back.samples[i].gt_yaw, d.samples[i].gt_yaw);
    EXPECT_EQ(back.samples[i].gt_params, d.samples[i].gt_params);
    EXPECT_EQ(back.samples[i].observation.data, d.samples[i].observation.data);
    EXPECT_TRUE(back.samples[i].gt_landmarks.points == d.samples[i].gt_landmarks.points);
  }
  const std::string blob = bytes(dir / "data.bin");
  io::write_text(dir / "data.bin", blob.substr(0, blob.size() - 8));
  try {
    io::load_dataset(dir / "data.json");
    FAIL() << "truncated blob accepted";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("shape mismatch"), std::string::npos);
  }
}

TEST(IoTest, CheckpointRoundtripIsExact) {
  TempDir dir("ckpt");
  NetworkParams p = init_params(4, DimensionLedger{}, ModelVariant{true, false, true});
  for (auto& s : p.slots())
    if (s.name.ends_with("running_var")) s.tensor->data[0] = 2.5;
  io::save_checkpoint(p, 2048, dir / "c.json");
  auto c = io::load_checkpoint(dir / "c.json");
  EXPECT_EQ(c.n_vertices, 2048u);
  EXPECT_EQ(c.params.variant, p.variant);
  const auto a = p.slots(), b = c.params.slots();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t k = 0; k < a.size(); ++k) {
    EXPECT_EQ(a[k].name, b[k].name);
    EXPECT_EQ(a[k].tensor->data, b[k].tensor->data) << a[k].name;
  }
  io::save_checkpoint(c.params, 2048, dir / "d.json");
  EXPECT_EQ(bytes(dir / "c.bin"), bytes(dir / "d.bin"));
}

TEST(IoTest, ObjRoundtripIsByteIdentical) {
  const BasisSet b = generate_synthetic_basis(2, 256);
  Rng rng(1);
  const PointSet mesh = cli::posed_mesh(b, oracle::random_posed_params(rng, 60));
  const std::string first = io::obj_string(mesh);
  const PointSet back = io::parse_obj(first);
  EXPECT_EQ(back.size(), 256u);
  EXPECT_EQ(back.faces.size(), mesh.faces.size());
  EXPECT_TRUE(back.points == mesh.points);
  EXPECT_EQ(io::obj_string(back), first);
  EXPECT_EQ(io::parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nvn 0 0 1\nf 1//1 2//1 3//1\n").faces.size(), 1u);
  EXPECT_THROW(io::parse_obj("v 0 0 0\nf 1 2 3 4\n"), FormatError);
}

TEST(IoTest, ConfigParsing) {
  const auto c = io::parse_config("# comment\nseed = 3\nepochs=5 # trailing\nlambdas = 1, 0.5, 0.25, 2\nz_dim = 64\nlgs = false\n");
  EXPECT_EQ(c.train.seed, 3u);
  EXPECT_EQ(c.train.epochs, 5u);
  EXPECT_EQ(c.train.lambdas.landmark, 0.5);
  EXPECT_EQ(c.train.lambdas.consistency, 2.0);
  EXPECT_EQ(c.ledger.z_dim, 64u);
  EXPECT_EQ(c.ledger.fusion_dim(), 64u + 1024 + 40 + 10);
  EXPECT_FALSE(c.variant.lgs);
  EXPECT_THROW(io::parse_config("learning_rate = 1\n"), ContractError);
  EXPECT_THROW(io::parse_config("epochs = two\n"), ContractError);
  EXPECT_THROW(io::parse_config("epochs = 1.5\n"), ContractError);
  EXPECT_THROW(io::parse_config("lambda2 = -1\n"), ContractError);
  EXPECT_THROW(io::parse_config("lambdas = 1,2\n"), ContractError);
  EXPECT_THROW(io::parse_config("seed\n"), ContractError);
}

TEST(IoTest, LossCsvLayout) {
  std::vector<EpochLoss> h(2);
  h[0].epoch = 1;
  h[0].components = {0.5, 0.25, 0.125, 1.0};
  h[0].total = 1.875;
  h[1].epoch = 2;
  EXPECT_EQ(io::loss_csv(h), "epoch,L_3DMM,L_lmk,L_3DMM_lmk,L_g,total\n1,0.5,0.25,0.125,1,1.875\n2,0,0,0,0,0\n");
}

TEST(IoTest, FormatDoubleRoundtrips) {
  Rng rng(0);
  for (int i = 0; i < 1000; ++i) {
    const double v = rng.normal(0.0, 1e3) * std::pow(10.0, rng.uniform(-20, 20));
    EXPECT_EQ(std::stod(io::format_double(v)), v);
  }
}

// ----------------------------------------------------------------------------
// CLI

TEST(CliTest, UsageErrors) {
  TempDir dir("usage");
  EXPECT_EQ(run_cli({"synth", "--count", "0", "--out", dir.path().string()}).code, 2);
  EXPECT_EQ(run_cli({}).code, 2);
  EXPECT_EQ(run_cli({"frobnicate"}).code, 2);
  EXPECT_EQ(run_cli({"eval", "--pred-dir", "x", "--gt-data", "y", "--protocol", "bogus", "--out-report", "z"}).code, 2);
  EXPECT_EQ(run_cli({"train", "--data", (dir / "none.json").string(), "--config", "c", "--out-checkpoint", "o",
                     "--loss-csv", "l"}).code,
            2);
  EXPECT_EQ(run_cli({"verify"}).code, 2);
}

TEST_F(CliFixture, SynthIsDeterministicAndVerifies) {
  TempDir again("synth2");
  ASSERT_EQ(run_cli({"synth", "--seed", "3", "--n-vertices", "256", "--count", "24", "--out", again.path().string()}).code, 0);
  for (const char* f : {"basis.json", "basis.bin", "dataset.json", "dataset.bin", "manifest.json"})
    EXPECT_EQ(bytes(at("data") / f), bytes(again / f)) << f;
  const auto r = run_cli({"verify", "--data", (again / "dataset.json").string()});
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("self-consistent"), std::string::npos);
}

TEST_F(CliFixture, TrainWritesOneCsvRowPerEpoch) {
  std::istringstream csv(bytes(at("loss.csv")));
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(csv, line)) lines.push_back(line);
  ASSERT_EQ(lines.size(), 2u);
  EXPECT_EQ(lines[0], "epoch,L_3DMM,L_lmk,L_3DMM_lmk,L_g,total");
  EXPECT_EQ(lines[1].rfind("1,", 0), 0u);
  EXPECT_TRUE(fs::exists(at("ckpt.manifest.json")));
  const auto r = run_cli({"verify", "--checkpoint", at("ckpt.json").string()});
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("mmpf_dim = 2418"), std::string::npos);
}

TEST_F(CliFixture, ZeroLearningRateKeepsInitialWeights) {
  io::write_text(at("lr0.cfg"), std::string(kSmallConfig) + "lr = 0\nseed = 5\n");
  ASSERT_EQ(run_cli({"train", "--data", at("data/dataset.json").string(), "--config", at("lr0.cfg").string(),
                     "--out-checkpoint", at("lr0.json").string(), "--loss-csv", at("lr0.csv").string()})
                .code,
            0);
  auto c = io::load_checkpoint(at("lr0.json"));
  NetworkParams init = init_params(5);
  const auto a = init.learnable(), b = c.params.learnable();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t k = 0; k < a.size(); ++k) EXPECT_EQ(a[k].tensor->data, b[k].tensor->data) << a[k].name;
}

TEST_F(CliFixture, TrainRejectsBadInputs) {
  io::write_text(at("bad.cfg"), "bogus = 1\n");
  EXPECT_EQ(run_cli({"train", "--data", at("data/dataset.json").string(), "--config", at("bad.cfg").string(),
                     "--out-checkpoint", at("x.json").string(), "--loss-csv", at("x.csv").string()})
                .code,
            2);
  io::write_text(at("nv.cfg"), "n_vertices = 512\nepochs = 1\n");
  EXPECT_EQ(run_cli({"train", "--data", at("data/dataset.json").string(), "--config", at("nv.cfg").string(),
                     "--out-checkpoint", at("x.json").string(), "--loss-csv", at("x.csv").string()})
                .code,
            3);
}

TEST_F(CliFixture, InferWithZeroRefinerGivesCoarseLandmarks) {
  NetworkParams p = init_params(2);
  zero_refiner_output(p);
  io::save_checkpoint(p, 256, at("zero.json"));
  const auto r = run_cli({"infer", "--checkpoint", at("zero.json").string(), "--input", at("data/dataset.json").string(),
                          "--out-dir", at("zero_pred").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto data = io::load_dataset(at("data/dataset.json"));
  for (const auto& s : data.samples) {
    const auto j = io::parse_json(at("zero_pred") / (s.id + ".json"));
    EXPECT_EQ(j.at("coarse"), j.at("refined")) << s.id;
    EXPECT_EQ(j.at("coarse").size(), kNumLandmarks);
    const PointSet mesh = io::parse_obj(bytes(at("zero_pred") / (s.id + ".obj")));
    EXPECT_EQ(mesh.size(), 256u);
    EXPECT_EQ(mesh.faces.size(), data.basis.faces.size());
  }
}

TEST_F(CliFixture, InferRejectsLedgerMismatch) {
  TempDir other("other");
  ASSERT_EQ(run_cli({"synth", "--seed", "3", "--n-vertices", "300", "--count", "2", "--out", other.path().string()}).code, 0);
  const auto r = run_cli({"infer", "--checkpoint", at("ckpt.json").string(), "--input", (other / "dataset.json").string(),
                          "--out-dir", (other / "pred").string()});
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("checkpoint"), std::string::npos);
  EXPECT_NE(r.err.find("\"n_vertices\":300"), std::string::npos);
  EXPECT_NE(r.err.find("\"n_vertices\":256"), std::string::npos);
}

TEST_F(CliFixture, VerifyNamesShapeMismatchOnCorruptBlob) {
  fs::copy_file(at("ckpt.json"), at("corrupt.json"), fs::copy_options::overwrite_existing);
  auto header = io::parse_json(at("corrupt.json"));
  header["blob"] = "corrupt.bin";
  io::write_text(at("corrupt.json"), header.dump(1));
  const std::string blob = bytes(at("ckpt.bin"));
  io::write_text(at("corrupt.bin"), blob.substr(0, blob.size() - 16));
  const auto r = run_cli({"verify", "--checkpoint", at("corrupt.json").string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("shape mismatch"), std::string::npos) << r.err;
}

/// Writes landmark JSON and OBJ predictions that copy the groundtruth.
void write_gt_predictions(const io::DatasetFile& d, const fs::path& dir) {
  fs::create_directories(dir);
  for (const auto& s : d.samples) {
    io::write_text(dir / (s.id + ".json"),
                   io::landmark_json(s.id, s.gt_landmarks, s.gt_landmarks, pose_euler(s.gt_params)).dump());
    io::write_text(dir / (s.id + ".obj"), io::obj_string(cli::posed_mesh(d.basis, s.gt_params)));
  }
}

TEST_F(CliFixture, EvalOfGroundtruthCopiesIsZero) {
  const auto data = io::load_dataset(at("data/dataset.json"));
  write_gt_predictions(data, at("gtpred"));
  for (const char* proto : {"nme", "mae", "p1", "p2", "florence"}) {
    const fs::path rep = at(std::string("rep_") + proto + ".json");
    const auto r = run_cli({"eval", "--pred-dir", at("gtpred").string(), "--gt-data", at("data/dataset.json").string(),
                            "--protocol", proto, "--out-report", rep.string()});
    ASSERT_EQ(r.code, 0) << proto << ": " << r.err;
    const auto j = io::parse_json(rep);
    for (const auto& [k, v] : j.at("nme_by_bucket").items()) EXPECT_EQ(v.get<double>(), 0.0) << proto << " " << k;
    if (!j.at("mae").is_null())
      for (const auto& [k, v] : j.at("mae").items()) EXPECT_NEAR(v.get<double>(), 0.0, 1e-9) << k;
    for (const auto& [k, v] : j.at("recon").items())
      if (!v.is_null()) EXPECT_NEAR(v.get<double>(), 0.0, 1e-9) << proto << " " << k;
  }
}

TEST_F(CliFixture, EvalMatchesLibraryBitExactly) {
  const auto r0 = run_cli({"infer", "--checkpoint", at("ckpt.json").string(), "--input", at("data/dataset.json").string(),
                           "--out-dir", at("pred").string()});
  ASSERT_EQ(r0.code, 0) << r0.err;
  const auto gt = io::load_dataset(at("data/dataset.json"));
  for (const char* proto : {"nme", "mae", "p1", "p2", "florence"}) {
    const fs::path rep = at(std::string("lib_") + proto + ".json");
    const auto r = run_cli({"eval", "--pred-dir", at("pred").string(), "--gt-data", at("data/dataset.json").string(),
                            "--protocol", proto, "--out-report", rep.string()});
    ASSERT_EQ(r.code, 0) << proto << ": " << r.err;
    const auto protocol = *cli::parse_protocol(proto);
    const auto lib = cli::evaluate(protocol, gt, cli::load_predictions(at("pred"), gt, cli::needs_mesh(protocol)));
    auto expected = io::report_json(lib);
    const auto got = io::parse_json(rep);
    EXPECT_EQ(got.at("nme_by_bucket"), expected.at("nme_by_bucket")) << proto;
    EXPECT_EQ(got.at("mae"), expected.at("mae")) << proto;
    EXPECT_EQ(got.at("recon"), expected.at("recon")) << proto;
  }
  // Spot-check against direct metric calls for the first sample.
  const auto& s = gt.samples.front();
  const auto rec = io::landmark_from_json(io::parse_json(at("pred") / (s.id + ".json")), s.id);
  const PointSet pred_mesh = io::parse_obj(bytes(at("pred") / (s.id + ".obj")));
  const PointSet gt_mesh = cli::posed_mesh(gt.basis, s.gt_params);
  const double p2 = protocol2_nme(pred_mesh, gt_mesh, bbox_norm(s.gt_landmarks));
  EvalRecord one{rec.refined, s.gt_landmarks, {}, s.gt_params, s.gt_yaw};
  EXPECT_TRUE(std::isfinite(p2));
  EXPECT_TRUE(std::isfinite(nme_report({one}).at("all")));
}

TEST_F(CliFixture, EvalErrors) {
  auto data = io::load_dataset(at("data/dataset.json"));
  // Every yaw outside [-99, 99]: MAE has nothing to average.
  TempDir wide("wide");
  for (std::size_t i = 0; i < data.samples.size(); ++i) data.samples[i].gt_yaw = i % 2 ? 120.0 : -120.0;
  io::save_basis(data.basis, wide / "basis.json");
  io::save_dataset(data.samples, data.seed, wide / "dataset.json", wide / "basis.json");
  write_gt_predictions(data, wide / "pred");
  auto r = run_cli({"eval", "--pred-dir", (wide / "pred").string(), "--gt-data", (wide / "dataset.json").string(),
                    "--protocol", "mae", "--out-report", (wide / "r.json").string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("yaw"), std::string::npos) << r.err;

  fs::remove(wide / "pred" / (data.samples[3].id + ".json"));
  r = run_cli({"eval", "--pred-dir", (wide / "pred").string(), "--gt-data", (wide / "dataset.json").string(),
               "--protocol", "nme", "--out-report", (wide / "r.json").string()});
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find(data.samples[3].id), std::string::npos) << r.err;
}

TEST_F(CliFixture, ManifestsRecordOutputChecksums) {
  const auto m = io::parse_json(at("ckpt.manifest.json"));
  EXPECT_EQ(m.at("command"), "train");
  for (const auto& o : m.at("outputs")) EXPECT_EQ(o.at("fnv1a64"), io::checksum_hex(at(o.at("path").get<std::string>())));
  EXPECT_EQ(io::fnv1a64(""), 0xcbf29ce484222325ULL);
  EXPECT_EQ(io::fnv1a64("a"), 0xaf63dc4c8601ec8cULL);
}

}  // namespace
}  // namespace facegeo
