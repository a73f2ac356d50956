#include "sbc/metrics.hpp"
#include "sbc/model_io.hpp"
#include "sbc/prune.hpp"
#include "sbc/quant.hpp"
#include "sbc/report.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdint>
#include <iostream>
#include <string>
#include <vector>

using nlohmann::json;

namespace {

void emit_report(const json& rep, const std::string& path) {
  if (path.empty()) {
    sbc::validate_report(rep);
    std::cout << rep.dump(2) << "\n";
  } else {
    sbc::write_report(path, rep);
  }
}

std::vector<sbc::Matrix> limited_samples(const sbc::CalibData& data,
                                         long limit) {
  if (limit <= 0 || limit >= static_cast<long>(data.samples.size()))
    return data.samples;
  return {data.samples.begin(), data.samples.begin() + limit};
}

sbc::PruneMethod parse_prune_method(const std::string& s) {
  if (s == "sbc") return sbc::PruneMethod::SBC;
  if (s == "exactobs") return sbc::PruneMethod::ExactOBS;
  if (s == "mbp") return sbc::PruneMethod::MBP;
  throw sbc::InvalidArgument("unknown pruning method " + s);
}

sbc::QuantMethod parse_quant_method(const std::string& s) {
  if (s == "sbc") return sbc::QuantMethod::SBC;
  if (s == "gptq-obc") return sbc::QuantMethod::GptqObc;
  if (s == "rtn") return sbc::QuantMethod::RTN;
  throw sbc::InvalidArgument("unknown quantization method " + s);
}

struct GenArgs {
  std::uint64_t seed = 1;
  int classes = 10;
  int timesteps = 20;
  std::vector<int> sizes = {64, 48};
  int calib_samples = 500;
  int test_samples = 500;
  double rate = 0.3;
  double tau = 3.0;
  double vth = 1.0;
  std::string out_model, out_calib, out_test, report;
};

int run_gen(const GenArgs& a) {
  sbc::TeacherOptions opt;
  opt.seed = a.seed;
  opt.classes = a.classes;
  opt.timesteps = a.timesteps;
  opt.sizes = a.sizes;
  opt.calib_samples = a.calib_samples;
  opt.test_samples = a.test_samples;
  opt.rate = a.rate;
  opt.tau_m = a.tau;
  opt.v_th = a.vth;
  sbc::TeacherTask task = sbc::gen_teacher_task(opt);
  sbc::save_model(a.out_model, task.model);
  sbc::save_calib(a.out_calib, task.calib);
  if (!a.out_test.empty()) sbc::save_calib(a.out_test, task.test);

  json cfg{{"seed", a.seed},
           {"classes", a.classes},
           {"timesteps", a.timesteps},
           {"sizes", a.sizes},
           {"calib_samples", a.calib_samples},
           {"test_samples", a.test_samples},
           {"rate", a.rate},
           {"tau_m", a.tau},
           {"v_th", a.vth}};
  json rep = sbc::make_report("gen", std::move(cfg));
  json outputs{{"model", a.out_model}, {"calib", a.out_calib}};
  if (!a.out_test.empty()) outputs["test"] = a.out_test;
  rep["teacher"] =
      json{{"layer_rates", task.layer_rates}, {"outputs", std::move(outputs)}};
  emit_report(rep, a.report);
  return 0;
}

struct CompressArgs {
  std::string model, calib, out, report, mask_out, hessian_dump;
  std::string method = "sbc";
  std::string capture = "sequential";
  double sparsity = 0.0;
  int bits = 4;
  int b_in = 16;
  int b_out = 32;
  double damp = 0.01;
  std::uint64_t seed = 1;
  long calib_limit = 0;
  int workers = 1;
};

int run_prune(const CompressArgs& a) {
  if (a.sparsity < 0.0 || a.sparsity >= 1.0)
    throw sbc::InvalidArgument("--sparsity must lie in [0, 1)");
  if (a.b_in < 1 || a.b_out < 1)
    throw sbc::InvalidArgument("batch sizes must be >= 1");
  if (a.damp < 0.0) throw sbc::InvalidArgument("--damp must be >= 0");

  sbc::PruneOptions opt;
  opt.sparsity = a.sparsity;
  opt.method = parse_prune_method(a.method);
  opt.b_in = a.b_in;
  opt.b_out = a.b_out;
  opt.damp = a.damp;
  opt.one_pass_capture = a.capture == "one-pass";
  opt.workers = sbc::resolve_workers(a.workers);
  opt.hessian_dump_dir = a.hessian_dump;

  sbc::NetworkSpec net = sbc::load_model(a.model);
  sbc::CalibData calib = sbc::load_calib(a.calib);
  sbc::PruneResult res =
      sbc::prune_network(net, limited_samples(calib, a.calib_limit), opt);
  sbc::save_model(a.out, res.net);
  if (!a.mask_out.empty()) sbc::save_masks(a.mask_out, res.masks);

  json cfg{{"model", a.model},
           {"calib", a.calib},
           {"calib_limit", a.calib_limit},
           {"method", a.method},
           {"sparsity", a.sparsity},
           {"b_in", a.b_in},
           {"b_out", a.b_out},
           {"damp", a.damp},
           {"capture", a.capture},
           {"seed", a.seed},
           {"out", a.out}};
  json rep = sbc::make_report("prune", std::move(cfg));
  rep.update(sbc::to_json(res.report));
  emit_report(rep, a.report);
  return 0;
}

int run_quantize(const CompressArgs& a) {
  if (a.bits < 2 || a.bits > 16)
    throw sbc::InvalidArgument("--bits must lie in [2, 16]");
  if (a.damp < 0.0) throw sbc::InvalidArgument("--damp must be >= 0");

  sbc::QuantOptions opt;
  opt.bits = a.bits;
  opt.method = parse_quant_method(a.method);
  opt.damp = a.damp;
  opt.one_pass_capture = a.capture == "one-pass";
  opt.workers = sbc::resolve_workers(a.workers);
  opt.hessian_dump_dir = a.hessian_dump;

  sbc::NetworkSpec net = sbc::load_model(a.model);
  sbc::CalibData calib = sbc::load_calib(a.calib);
  sbc::QuantResult res =
      sbc::quantize_network(net, limited_samples(calib, a.calib_limit), opt);
  sbc::save_model(a.out, res.net);

  json cfg{{"model", a.model},
           {"calib", a.calib},
           {"calib_limit", a.calib_limit},
           {"method", a.method},
           {"bits", a.bits},
           {"damp", a.damp},
           {"capture", a.capture},
           {"seed", a.seed},
           {"out", a.out}};
  json rep = sbc::make_report("quantize", std::move(cfg));
  rep.update(sbc::to_json(res.report));
  emit_report(rep, a.report);
  return 0;
}

struct EvalArgs {
  std::string model, data, ref, report;
  long calib_limit = 0;
  int workers = 1;
};

int run_eval(const EvalArgs& a) {
  sbc::NetworkSpec net = sbc::load_model(a.model);
  sbc::CalibData data = sbc::load_calib(a.data);
  std::vector<sbc::Matrix> samples = limited_samples(data, a.calib_limit);
  int workers = sbc::resolve_workers(a.workers);

  json cfg{{"model", a.model}, {"data", a.data}, {"calib_limit", a.calib_limit}};
  if (!a.ref.empty()) cfg["ref"] = a.ref;
  json rep = sbc::make_report("eval", std::move(cfg));

  if (!data.labels.empty()) {
    std::vector<int> labels(data.labels.begin(),
                            data.labels.begin() + samples.size());
    double top1 = sbc::accuracy(net, samples, labels, workers);
    rep["accuracy"] =
        json{{"top1", top1}, {"samples", static_cast<long>(samples.size())}};
  }
  if (!a.ref.empty()) {
    sbc::NetworkSpec ref = sbc::load_model(a.ref);
    rep["fidelity"] = sbc::to_json(sbc::fidelity(ref, net, samples, workers));
  }
  emit_report(rep, a.report);
  return 0;
}

struct SopsArgs {
  std::string model, data, report;
  long calib_limit = 0;
  int workers = 1;
};

int run_sops(const SopsArgs& a) {
  sbc::NetworkSpec net = sbc::load_model(a.model);
  sbc::CalibData data = sbc::load_calib(a.data);
  std::vector<sbc::Matrix> samples = limited_samples(data, a.calib_limit);
  int workers = sbc::resolve_workers(a.workers);

  json cfg{{"model", a.model}, {"data", a.data}, {"calib_limit", a.calib_limit}};
  json rep = sbc::make_report("sops", std::move(cfg));
  rep["sops"] =
      sbc::to_json(sbc::count_sops(net, samples, data.real_encoding, workers));
  emit_report(rep, a.report);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"one-shot post-training compression for spiking networks"};
  app.require_subcommand(1);

  GenArgs g;
  CLI::App* gen = app.add_subcommand("gen", "generate a teacher task");
  gen->add_option("--seed", g.seed, "RNG seed");
  gen->add_option("--classes", g.classes, "output classes")
      ->check(CLI::Range(2, 1024));
  gen->add_option("--timesteps", g.timesteps, "simulation steps")
      ->check(CLI::Range(1, 4096));
  gen->add_option("--sizes", g.sizes, "input and hidden widths");
  gen->add_option("--calib", g.calib_samples, "calibration sample count")
      ->check(CLI::Range(1, 1000000));
  gen->add_option("--test", g.test_samples, "test sample count")
      ->check(CLI::Range(0, 1000000));
  gen->add_option("--rate", g.rate, "input Bernoulli rate");
  gen->add_option("--tau", g.tau, "membrane time constant");
  gen->add_option("--vth", g.vth, "firing threshold");
  gen->add_option("--out-model", g.out_model, "model output path")->required();
  gen->add_option("--out-calib", g.out_calib, "calibration output path")
      ->required();
  gen->add_option("--out-test", g.out_test, "test set output path");
  gen->add_option("--report", g.report, "JSON report path");

  CompressArgs p;
  CLI::App* prune = app.add_subcommand("prune", "prune a model");
  prune->add_option("--model", p.model, "input model")->required();
  prune->add_option("--calib", p.calib, "calibration data")->required();
  prune->add_option("--sparsity", p.sparsity, "global sparsity in [0, 1)")
      ->required();
  prune->add_option("--method", p.method, "sbc | exactobs | mbp")
      ->check(CLI::IsMember({"sbc", "exactobs", "mbp"}));
  prune->add_option("--b-in", p.b_in, "weights retired per step");
  prune->add_option("--b-out", p.b_out, "neurons per parallel batch");
  prune->add_option("--damp", p.damp, "Hessian dampening fraction");
  prune->add_option("--capture", p.capture, "sequential | one-pass")
      ->check(CLI::IsMember({"sequential", "one-pass"}));
  prune->add_option("--workers", p.workers, "worker threads (0 = auto)");
  prune->add_option("--calib-limit", p.calib_limit,
                    "use only the first N samples");
  prune->add_option("--seed", p.seed, "RNG seed");
  prune->add_option("--hessian-dump", p.hessian_dump,
                    "directory for raw curvature dumps");
  prune->add_option("--out", p.out, "compressed model path")->required();
  prune->add_option("--mask-out", p.mask_out, "pruning mask path");
  prune->add_option("--report", p.report, "JSON report path");

  CompressArgs q;
  CLI::App* quant = app.add_subcommand("quantize", "quantize a model");
  quant->add_option("--model", q.model, "input model")->required();
  quant->add_option("--calib", q.calib, "calibration data")->required();
  quant->add_option("--bits", q.bits, "grid width in bits, [2, 16]")
      ->required();
  quant->add_option("--method", q.method, "sbc | gptq-obc | rtn")
      ->check(CLI::IsMember({"sbc", "gptq-obc", "rtn"}));
  quant->add_option("--damp", q.damp, "Hessian dampening fraction");
  quant->add_option("--capture", q.capture, "sequential | one-pass")
      ->check(CLI::IsMember({"sequential", "one-pass"}));
  quant->add_option("--workers", q.workers, "worker threads (0 = auto)");
  quant->add_option("--calib-limit", q.calib_limit,
                    "use only the first N samples");
  quant->add_option("--seed", q.seed, "RNG seed");
  quant->add_option("--hessian-dump", q.hessian_dump,
                    "directory for raw curvature dumps");
  quant->add_option("--out", q.out, "quantized model path")->required();
  quant->add_option("--report", q.report, "JSON report path");

  EvalArgs e;
  CLI::App* eval = app.add_subcommand("eval", "accuracy and spike fidelity");
  eval->add_option("--model", e.model, "model to evaluate")->required();
  eval->add_option("--data", e.data, "labeled dataset")->required();
  eval->add_option("--ref", e.ref, "reference model for fidelity");
  eval->add_option("--calib-limit", e.calib_limit,
                   "use only the first N samples");
  eval->add_option("--workers", e.workers, "worker threads (0 = auto)");
  eval->add_option("--report", e.report, "JSON report path");

  SopsArgs s;
  CLI::App* sops = app.add_subcommand("sops", "synaptic operation counts");
  sops->add_option("--model", s.model, "model to measure")->required();
  sops->add_option("--data", s.data, "input dataset")->required();
  sops->add_option("--calib-limit", s.calib_limit,
                   "use only the first N samples");
  sops->add_option("--workers", s.workers, "worker threads (0 = auto)");
  sops->add_option("--report", s.report, "JSON report path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    return app.exit(err);
  }

  try {
    if (gen->parsed()) return run_gen(g);
    if (prune->parsed()) return run_prune(p);
    if (quant->parsed()) return run_quantize(q);
    if (eval->parsed()) return run_eval(e);
    if (sops->parsed()) return run_sops(s);
  } catch (const sbc::Error& err) {
    std::cerr << json{{"error", {{"kind", err.kind()}, {"message", err.what()}}}}
                     .dump()
              << "\n";
    return 1;
  } catch (const std::exception& err) {
    std::cerr << json{{"error",
                       {{"kind", "Internal"}, {"message", err.what()}}}}
                     .dump()
              << "\n";
    return 1;
  }
  return 0;
}
