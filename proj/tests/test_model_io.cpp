#include <doctest.h>

#include "sbc/model_io.hpp"
#include "sbc/metrics.hpp"
#include "sbc/quant.hpp"

#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

using namespace sbc;

namespace {

Matrix random_matrix(Rng& rng, int r, int c, double scale = 1.0) {
  Matrix m(r, c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) m(i, j) = rng.normal() * scale;
  return m;
}

Vector random_vector(Rng& rng, int n, double scale = 1.0) {
  Vector v(n);
  for (int i = 0; i < n; ++i) v[i] = rng.normal() * scale;
  return v;
}

Matrix random_spikes(Rng& rng, int t_steps, int features, double p = 0.4) {
  Matrix m(t_steps, features);
  for (int t = 0; t < t_steps; ++t)
    for (int f = 0; f < features; ++f) m(t, f) = rng.bernoulli(p);
  return m;
}

std::vector<char> slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  REQUIRE(f.good());
  return std::vector<char>(std::istreambuf_iterator<char>(f),
                           std::istreambuf_iterator<char>());
}

void spit(const std::string& path, const std::vector<char>& bytes) {
  std::ofstream f(path, std::ios::binary);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

std::string tmp_path(const char* name) {
  return std::string("/tmp/sbc_io_") + name;
}

NetworkSpec mixed_net(Rng& rng) {
  NetworkSpec net;
  net.input_shape = TensorShape{2, 5, 5};
  net.push(make_conv(2, 3, 3, 3, 1, 1, random_matrix(rng, 18, 3, 0.4),
                     random_vector(rng, 3, 0.1)));
  net.push(make_batchnorm(random_vector(rng, 3).cwiseAbs() +
                              Vector::Ones(3) * 0.3,
                          random_vector(rng, 3), random_vector(rng, 3),
                          random_vector(rng, 3).cwiseAbs(), 1e-5));
  net.push(make_lif(2.5, 1.0));
  net.push(make_pool(2, 2));
  net.push(make_flatten());
  net.push(make_linear(random_matrix(rng, 12, 6, 0.5)));
  net.push(make_lif(kIfTau, 0.8));
  net.push(make_linear(random_matrix(rng, 6, 6, 0.5), Vector(), 6));
  net.push(make_add(7, 6, ShortcutMode::Concat));
  net.push(make_lif(2.0, 1.0, 8));
  return net;
}

void check_same_net(const NetworkSpec& a, const NetworkSpec& b) {
  REQUIRE(a.layers.size() == b.layers.size());
  CHECK(a.input_shape == b.input_shape);
  for (std::size_t i = 0; i < a.layers.size(); ++i) {
    CHECK(a.layers[i].kind == b.layers[i].kind);
    CHECK(a.layers[i].input == b.layers[i].input);
  }
}

}  // namespace

TEST_CASE("model round trip preserves every layer kind through float32") {
  Rng rng(131);
  NetworkSpec net = mixed_net(rng);
  std::string p = tmp_path("model.snnm");
  save_model(p, net);
  NetworkSpec back = load_model(p);
  check_same_net(net, back);

  // float32 storage: reloaded weights match to single precision
  const auto& cv0 = net.layers[0].as<Conv2dLayer>();
  const auto& cv1 = back.layers[0].as<Conv2dLayer>();
  CHECK((cv0.weight - cv1.weight).cwiseAbs().maxCoeff() < 1e-6);
  CHECK(cv1.stride == 1);
  CHECK(cv1.pad == 1);
  const auto& bn = back.layers[1].as<BatchNormLayer>();
  CHECK((bn.gamma - net.layers[1].as<BatchNormLayer>().gamma)
            .cwiseAbs()
            .maxCoeff() < 1e-6);
  CHECK(back.layers[6].as<LIFLayer>().params.tau_m == kIfTau);
  CHECK(back.layers[6].as<LIFLayer>().params.v_th == doctest::Approx(0.8));
  CHECK(back.layers[9].as<LIFLayer>().params.tau_m == 2.0);

  // a second save of the loaded net is byte-identical
  std::string p2 = tmp_path("model2.snnm");
  save_model(p2, back);
  NetworkSpec back2 = load_model(p2);
  save_model(p, back2);
  CHECK(slurp(p) == slurp(p2));
  std::remove(p.c_str());
  std::remove(p2.c_str());
}

TEST_CASE("quantized layers persist codes and scales exactly") {
  Rng rng(132);
  NetworkSpec net = make_mlp({6, 5, 4}, 2.0, 1.0);
  for (int idx : {0, 2}) {
    auto& lin = net.layers[idx].as<LinearLayer>();
    lin.weight = random_matrix(rng, static_cast<int>(lin.weight.rows()),
                               static_cast<int>(lin.weight.cols()), 0.5);
  }
  auto& lin0 = net.layers[0].as<LinearLayer>();
  QuantGrid g = build_grid(lin0.weight, 4);
  QuantizedModule q = rtn(lin0.weight, g);
  lin0.weight = q.reconstruct();
  lin0.quant = QuantInfo{4, q.codes, g.delta};

  std::string p = tmp_path("quant.snnm");
  save_model(p, net);
  NetworkSpec back = load_model(p);
  const auto& lb = back.layers[0].as<LinearLayer>();
  REQUIRE(lb.quant.has_value());
  CHECK(lb.quant->bits == 4);
  for (int i = 0; i < 6; ++i)
    for (int j = 0; j < 5; ++j)
      CHECK(lb.quant->codes(i, j) == q.codes(i, j));
  // weights are reconstructed from codes x float32 scales
  for (int i = 0; i < 6; ++i)
    for (int j = 0; j < 5; ++j)
      CHECK(lb.weight(i, j) ==
            static_cast<double>(lb.quant->codes(i, j)) * lb.quant->scales[j]);
  CHECK_FALSE(back.layers[2].as<LinearLayer>().quant.has_value());
  std::remove(p.c_str());
}

TEST_CASE("spike data round trips through bit packing") {
  Rng rng(133);
  CalibData d;
  d.timesteps = 9;
  d.shape = TensorShape{5, 1, 1};
  for (int i = 0; i < 7; ++i) d.samples.push_back(random_spikes(rng, 9, 5));
  d.labels = {0, 1, 2, 0, 1, 2, 0};
  std::string p = tmp_path("calib.snnc");
  save_calib(p, d);
  CalibData back = load_calib(p);
  CHECK(back.timesteps == 9);
  CHECK(back.shape == d.shape);
  CHECK_FALSE(back.real_encoding);
  REQUIRE(back.samples.size() == 7);
  for (int i = 0; i < 7; ++i)
    CHECK((back.samples[i] - d.samples[i]).cwiseAbs().maxCoeff() == 0.0);
  CHECK(back.labels == d.labels);
  std::remove(p.c_str());

  // unlabeled data stays unlabeled
  d.labels.clear();
  save_calib(p, d);
  CHECK(load_calib(p).labels.empty());
  std::remove(p.c_str());
}

TEST_CASE("real-valued data round trips through float32") {
  Rng rng(134);
  CalibData d;
  d.timesteps = 4;
  d.shape = TensorShape{3, 1, 1};
  d.real_encoding = true;
  for (int i = 0; i < 5; ++i) d.samples.push_back(random_matrix(rng, 4, 3));
  std::string p = tmp_path("real.snnc");
  save_calib(p, d);
  CalibData back = load_calib(p);
  CHECK(back.real_encoding);
  for (int i = 0; i < 5; ++i)
    CHECK((back.samples[i] - d.samples[i]).cwiseAbs().maxCoeff() < 1e-6);
  std::remove(p.c_str());
}

TEST_CASE("data validation rejects inconsistent content") {
  Rng rng(135);
  CalibData d;
  d.timesteps = 4;
  d.shape = TensorShape{3, 1, 1};
  d.samples.push_back(random_spikes(rng, 4, 3));
  CHECK_NOTHROW(d.validate());
  d.samples[0](2, 1) = 0.5;  // not a spike train
  CHECK_THROWS_AS(d.validate(), ShapeInconsistent);
  d.samples[0](2, 1) = 1.0;
  d.labels = {0, 1};  // label count mismatch
  CHECK_THROWS_AS(d.validate(), ShapeInconsistent);
  d.labels = {0};
  d.samples.push_back(random_spikes(rng, 3, 3));  // wrong timestep count
  CHECK_THROWS_AS(d.validate(), ShapeInconsistent);
}

TEST_CASE("corrupt containers raise specific failures") {
  Rng rng(136);
  NetworkSpec net = make_mlp({4, 3}, 2.0, 1.0);
  net.layers[0].as<LinearLayer>().weight = random_matrix(rng, 4, 3);
  std::string p = tmp_path("corrupt.snnm");
  save_model(p, net);
  std::vector<char> good = slurp(p);

  // magic
  std::vector<char> bad = good;
  bad[0] = 'X';
  spit(p, bad);
  CHECK_THROWS_AS(load_model(p), CorruptPayload);

  // version
  bad = good;
  bad[4] = 9;
  spit(p, bad);
  CHECK_THROWS_AS(load_model(p), VersionMismatch);

  // truncation
  bad = good;
  bad.resize(bad.size() - 5);
  spit(p, bad);
  CHECK_THROWS_AS(load_model(p), CorruptPayload);

  // trailing garbage
  bad = good;
  bad.push_back('\0');
  spit(p, bad);
  CHECK_THROWS_AS(load_model(p), CorruptPayload);

  CHECK_THROWS_AS(load_model("/tmp/sbc_io_missing.snnm"), CorruptPayload);
  std::remove(p.c_str());

  CalibData d;
  d.timesteps = 3;
  d.shape = TensorShape{5, 1, 1};
  d.samples.push_back(random_spikes(rng, 3, 5));
  std::string pc = tmp_path("corrupt.snnc");
  save_calib(pc, d);
  good = slurp(pc);
  // nonzero pad bit in the final packed byte
  bad = good;
  bad.back() = static_cast<char>(bad.back() | 0x80);
  spit(pc, bad);
  CHECK_THROWS_AS(load_calib(pc), CorruptPayload);
  bad = good;
  bad.resize(bad.size() - 1);
  spit(pc, bad);
  CHECK_THROWS_AS(load_calib(pc), CorruptPayload);
  std::remove(pc.c_str());
}

TEST_CASE("mask containers round trip") {
  std::vector<MaskMatrix> masks(2);
  masks[0] = MaskMatrix::Zero(4, 3);
  masks[0](1, 2) = 1;
  masks[0](3, 0) = 1;
  masks[1] = MaskMatrix::Zero(9, 2);
  masks[1](8, 1) = 1;
  std::string p = tmp_path("masks.snnk");
  save_masks(p, masks);
  auto back = load_masks(p);
  REQUIRE(back.size() == 2);
  for (int m = 0; m < 2; ++m) {
    CHECK(back[m].rows() == masks[m].rows());
    CHECK((back[m].cast<int>() - masks[m].cast<int>()).cwiseAbs().sum() == 0);
  }
  std::vector<char> good = slurp(p);
  good[0] = 'Z';
  spit(p, good);
  CHECK_THROWS_AS(load_masks(p), CorruptPayload);
  std::remove(p.c_str());
}

TEST_CASE("generated teacher tasks are deterministic and in the rate band") {
  TeacherOptions opt;
  opt.classes = 4;
  opt.timesteps = 8;
  opt.sizes = {12, 10};
  opt.calib_samples = 30;
  opt.test_samples = 20;
  opt.seed = 7;
  TeacherTask a = gen_teacher_task(opt);
  TeacherTask b = gen_teacher_task(opt);

  REQUIRE(a.model.layers.size() == 4);
  for (int idx : {0, 2}) {
    const Matrix& wa = a.model.layers[idx].as<LinearLayer>().weight;
    const Matrix& wb = b.model.layers[idx].as<LinearLayer>().weight;
    for (int i = 0; i < wa.rows(); ++i)
      for (int j = 0; j < wa.cols(); ++j) CHECK(wa(i, j) == wb(i, j));
  }
  REQUIRE(a.calib.samples.size() == 30);
  REQUIRE(a.test.samples.size() == 20);
  for (int i = 0; i < 30; ++i)
    CHECK((a.calib.samples[i] - b.calib.samples[i]).cwiseAbs().maxCoeff() ==
          0.0);
  CHECK(a.calib.labels == b.calib.labels);

  REQUIRE(a.layer_rates.size() == 2);
  for (double r : a.layer_rates) {
    CHECK(r >= 0.05);
    CHECK(r <= 0.5);
  }

  // labels agree with the teacher's own readout
  for (int i = 0; i < 20; ++i)
    CHECK(a.test.labels[i] ==
          predict_class(network_forward(a.model, a.test.samples[i])));

  TeacherOptions other = opt;
  other.seed = 8;
  TeacherTask c = gen_teacher_task(other);
  bool any_diff = false;
  for (int i = 0; i < 30 && !any_diff; ++i)
    any_diff = (a.calib.samples[i] - c.calib.samples[i]).cwiseAbs().sum() > 0;
  CHECK(any_diff);
}

TEST_CASE("unreachable firing bands are reported") {
  TeacherOptions opt;
  opt.classes = 3;
  opt.timesteps = 4;
  opt.sizes = {6, 5};
  opt.calib_samples = 5;
  opt.test_samples = 5;
  opt.rate = 1e-9;  // inputs almost never spike
  CHECK_THROWS_AS(gen_teacher_task(opt), RateUnattainable);

  TeacherOptions bad;
  bad.classes = 0;
  CHECK_THROWS_AS(gen_teacher_task(bad), InvalidArgument);
  TeacherOptions bad2;
  bad2.rate = 1.5;
  CHECK_THROWS_AS(gen_teacher_task(bad2), InvalidArgument);
}

TEST_CASE("teacher task files survive a save and reload") {
  TeacherOptions opt;
  opt.classes = 3;
  opt.timesteps = 6;
  opt.sizes = {8, 6};
  opt.calib_samples = 10;
  opt.test_samples = 5;
  TeacherTask t = gen_teacher_task(opt);
  std::string pm = tmp_path("teacher.snnm");
  std::string pc = tmp_path("teacher.snnc");
  save_model(pm, t.model);
  save_calib(pc, t.calib);
  NetworkSpec model = load_model(pm);
  CalibData calib = load_calib(pc);
  check_same_net(t.model, model);
  CHECK(calib.labels == t.calib.labels);
  // spike data is binary, so the round trip is exact and the reloaded pair
  // reproduces the original accuracy
  CHECK(accuracy(model, calib.samples, calib.labels) ==
        accuracy(t.model, t.calib.samples, t.calib.labels));
  std::remove(pm.c_str());
  std::remove(pc.c_str());
}
