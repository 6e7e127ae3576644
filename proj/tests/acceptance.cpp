// Acceptance run: one PASS/FAIL line per criterion. The exit status is zero
// once every criterion has been evaluated; with --strict it is non-zero when
// any criterion fails.
#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>
#include <string>

#include "cli.hpp"
#include "fixtures.hpp"
#include "gradsuite.hpp"
#include "oracles.hpp"
#include "spanset/assignment.hpp"
#include "spanset/corpus.hpp"
#include "spanset/losses.hpp"
#include "spanset/metrics.hpp"
#include "spanset/model.hpp"
#include "spanset/trainer.hpp"

using namespace spanset;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

int failures = 0;
std::ofstream report_file;

void emit(const std::string& line) {
  std::printf("%s\n", line.c_str());
  std::fflush(stdout);
  if (report_file.is_open()) report_file << line << '\n' << std::flush;
}

void report(int id, const std::string& name, bool pass, const std::string& detail) {
  if (!pass) ++failures;
  char head[96];
  std::snprintf(head, sizeof head, "%s  criterion %d  %-34s ", pass ? "PASS" : "FAIL", id, name.c_str());
  emit(head + detail);
}

std::string fmt(const char* f, double a, double b = 0, double c = 0, double d = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c, d);
  return buf;
}

// -- 2 ---------------------------------------------------------------------

void assignment_oracle() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<std::size_t> un(1, 8);
  std::uniform_real_distribution<double> u(-5.0, 5.0);
  int mismatches = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = un(rng);
    const std::size_t k = std::uniform_int_distribution<std::size_t>(1, n)(rng);
    CostMatrix m(k, n);
    for (std::size_t i = 0; i < k; ++i) {
      for (std::size_t j = 0; j < n; ++j) m(i, j) = u(rng);
    }
    const Assignment h = hungarian(m);
    const Assignment b = brute_force_assign(m);
    const auto e = oracle::enumerate_assignments(m);
    if (h.total_cost != b.total_cost || h.pairs != b.pairs || h.prediction_for_target() != e.columns ||
        h.total_cost != e.cost) {
      ++mismatches;
    }
  }
  const double secs = seconds_since(t0);
  report(2, "assignment oracle", mismatches == 0 && secs < 10.0,
         fmt("1000 matrices, %.0f mismatches, %.2f s (limit 10 s)", mismatches, secs));
}

// -- 3 ---------------------------------------------------------------------

double span_loss_error() {
  std::mt19937_64 rng(31);
  std::uniform_real_distribution<double> u(0.02, 0.98);
  const LossWeights w{1, 3, 2};
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    // Endpoints at least 1e-3 apart keep the check off the kinks.
    std::vector<double> pts;
    while (pts.size() < 4) {
      const double v = u(rng);
      bool ok = true;
      for (double p : pts) ok = ok && std::abs(p - v) >= 1e-3;
      if (ok) pts.push_back(v);
    }
    const TimeSpan target(std::min(pts[0], pts[1]), std::max(pts[0], pts[1]));
    const double s0 = std::min(pts[2], pts[3]), e0 = std::max(pts[2], pts[3]);
    const Tensor s = Tensor::scalar(s0, true), e = Tensor::scalar(e0, true);
    backward(span_loss(s, e, target, w));
    auto f = [&](const std::vector<double>& x) {
      NoGradGuard g;
      return span_loss(Tensor::scalar(x[0]), Tensor::scalar(x[1]), target, w).item();
    };
    const auto fd = oracle::numeric_gradient(f, {s0, e0});
    worst = std::max({worst, oracle::relative_error(s.grad()[0], fd[0]), oracle::relative_error(e.grad()[0], fd[1])});
  }
  return worst;
}

double set_guidance_error() {
  std::mt19937_64 rng(32);
  std::uniform_real_distribution<double> u(0.05, 1.0);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> p(8 * 4);
    for (std::size_t i = 0; i < 8; ++i) {
      double z = 0;
      for (std::size_t j = 0; j < 4; ++j) z += p[i * 4 + j] = u(rng);
      for (std::size_t j = 0; j < 4; ++j) p[i * 4 + j] /= z;
    }
    const auto targets = guidance_targets(8, 4);
    const Tensor c = Tensor::from({8, 4}, p, true);
    backward(set_guidance_loss(c, targets));
    auto f = [&](const std::vector<double>& x) {
      NoGradGuard g;
      return set_guidance_loss(Tensor::from({8, 4}, x), targets).item();
    };
    const auto fd = oracle::numeric_gradient(f, p);
    for (std::size_t i = 0; i < fd.size(); ++i) worst = std::max(worst, oracle::relative_error(c.grad()[i], fd[i]));
  }
  return worst;
}

double end_to_end_error() {
  GroundingModel model(fixture::micro_config(), 7);
  const Corpus corpus = generate(fixture::micro_spec(1, 3));
  const GroundingSample& s = corpus[0];
  auto loss = [&] { return final_set_loss(model.forward(s), s.targets, LossWeights{}).loss; };
  model.parameters().zero_grad();
  backward(loss());
  double worst = 0.0;
  for (const auto& [name, t] : model.parameters()) {
    Tensor p = t;
    auto data = p.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double keep = data[i], h = 1e-5;
      NoGradGuard g;
      data[i] = keep + h;
      const double up = loss().item();
      data[i] = keep - h;
      const double down = loss().item();
      data[i] = keep;
      const double analytic = p.has_grad() ? p.grad()[i] : 0.0;
      worst = std::max(worst, oracle::relative_error(analytic, (up - down) / (2 * h)));
    }
  }
  return worst;
}

void gradient_suite() {
  const auto t0 = Clock::now();
  double op_worst = 0.0;
  std::string worst_op;
  for (const auto& op : gradsuite::op_cases()) {
    const double e = gradsuite::op_worst_error(op);
    if (e > op_worst) {
      op_worst = e;
      worst_op = op.name;
    }
  }
  op_worst = std::max({op_worst, span_loss_error(), set_guidance_error()});
  const double e2e = end_to_end_error();
  const double secs = seconds_since(t0);
  report(3, "gradient suite", op_worst < 1e-4 && e2e < 1e-3 && secs < 60.0,
         fmt("op max rel err %.2e (limit 1e-4), end-to-end %.2e (limit 1e-3), %.1f s (limit 60 s)", op_worst, e2e,
             secs));
}

// -- 4 ---------------------------------------------------------------------

void geometry_oracle() {
  std::mt19937_64 rng(4);
  double worst = 0.0, worst_cc_excess = -1.0;
  int giou_violations = 0, cc_violations = 0;
  for (int i = 0; i < 10000; ++i) {
    const TimeSpan a = oracle::random_span(rng), b = oracle::random_span(rng);
    const double io = iou(a, b), g = giou(a, b);
    worst = std::max(worst, std::abs(io - oracle::binned_iou(a, b, 100000)));
    const auto cc = oracle::center_count_iou(a, b, 100000);
    const double excess = std::abs(io - cc.iou) - cc.bound;
    worst_cc_excess = std::max(worst_cc_excess, excess);
    if (excess > 0) ++cc_violations;
    if (!(g >= -1.0 && g <= io)) ++giou_violations;
  }
  report(4, "geometry oracle", worst <= 2e-5 && giou_violations == 0 && cc_violations == 0,
         fmt("10^4 pairs, max |iou - binned| %.2e (limit 2e-5), giou outside [-1, iou]: %.0f, "
             "center-count outside resolution bound: %.0f",
             worst, giou_violations, cc_violations));
}

// -- 5 ---------------------------------------------------------------------

void metric_oracle() {
  std::mt19937_64 rng(5);
  int mismatches = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const auto c = oracle::random_metric_case(rng);
    const auto ranked = link_predictions(c.spans, c.corr, c.k);
    const auto n = oracle::naive_metrics(c.spans, c.corr, c.k, c.targets);
    const bool same = recall_at(ranked, c.targets, 1, 0.5) == n.r1_05 && recall_at(ranked, c.targets, 1, 0.7) == n.r1_07 &&
                      recall_at(ranked, c.targets, 5, 0.5) == n.r5_05 && recall_at(ranked, c.targets, 5, 0.7) == n.r5_07 &&
                      mean_iou(ranked, c.targets) == n.miou;
    if (!same) ++mismatches;
  }
  report(5, "metric oracle", mismatches == 0, fmt("200 cases (N <= 6, K <= 2), %.0f mismatches", mismatches));
}

// -- 6, 7, 8 ---------------------------------------------------------------

struct RunResult {
  MetricReport metrics;
  PhaseReport phases;
  double seconds = 0.0;
};

ModelConfig acceptance_model() {
  ModelConfig c;
  c.d_in = 32;
  c.d_model = 128;
  c.n_heads = 4;
  c.n_enc_layers = 2;
  c.n_dec_layers = 2;
  c.ffn_width = 256;
  c.proposals_per_query = 10;
  c.max_queries = 4;
  c.frame_count = 64;
  c.dropout = 0.1;
  return c;
}

RunResult train_and_evaluate(const std::string& label, const ModelConfig& mc, const TrainConfig& tc,
                             const Corpus& train_set, const Corpus& test_set, const fs::path& out_dir) {
  const auto t0 = Clock::now();
  GroundingModel model(mc, tc.seed);
  Trainer trainer(model, train_set, tc);
  trainer.run([&](const Trainer& t) {
    if (t.step() % 500 == 0) {
      const CurveRow& r = t.curve().back();
      std::fprintf(stderr, "[%s] step %zu  total %.4f  l1 %.4f  giou %.4f  sg %.4f\n", label.c_str(), t.step(), r.total,
                   r.l1, r.giou, r.set_guidance);
    }
  });
  RunResult r;
  r.seconds = seconds_since(t0);
  r.phases = analyze_phases(trainer.curve());
  r.metrics = evaluate(model, test_set);

  fs::create_directories(out_dir);
  std::ofstream(out_dir / "curves.csv") << curve_to_csv(trainer.curve());
  std::ofstream(out_dir / "phase.json") << r.phases.to_json() << '\n';
  std::ofstream(out_dir / "metrics.csv") << r.metrics.to_csv();
  std::fprintf(stderr, "%s", r.metrics.to_table(label).c_str());
  return r;
}

void training_criteria(const fs::path& artifacts) {
  CorpusSpec train_spec;
  train_spec.n_samples = 2000;
  train_spec.seed = 1;
  CorpusSpec test_spec = train_spec;
  test_spec.n_samples = 500;
  test_spec.seed = 2;
  test_spec.first_sample_id = 100000;
  const Corpus train_set = generate(train_spec);
  const Corpus test_set = generate(test_spec);

  const TrainConfig tc;  // 5000 steps, batch 16, lr 1e-4, weights 1:3:2
  const RunResult base = train_and_evaluate("default", acceptance_model(), tc, train_set, test_set, artifacts / "default");
  report(6, "synthetic end-to-end", base.metrics.r1_05() >= 0.80 && base.metrics.miou >= 0.60 && base.seconds <= 900.0,
         fmt("R1@0.5 %.4f (>= 0.80), mIoU %.4f (>= 0.60), %.0f s (<= 900 s)", base.metrics.r1_05(), base.metrics.miou,
             base.seconds));

  const PhaseReport& ph = base.phases;
  report(7, "explore-and-match phases", ph.sg_drop_fraction > 0.5 && ph.span_rebound,
         fmt("L_sg drop %.1f%% (> 50%%) over %.0f steps centred at step %.0f, span rebound +%.4f",
             100 * ph.sg_drop_fraction, static_cast<double>(ph.window), static_cast<double>(ph.sg_drop_step),
             ph.rebound_delta));

  TrainConfig no_giou = tc;
  no_giou.weights.lambda_iou = 0.0;
  const RunResult ablate_iou =
      train_and_evaluate("lambda_iou=0", acceptance_model(), no_giou, train_set, test_set, artifacts / "no_giou");
  ModelConfig one_proposal = acceptance_model();
  one_proposal.proposals_per_query = 1;
  const RunResult ablate_ppq =
      train_and_evaluate("ppq=1", one_proposal, tc, train_set, test_set, artifacts / "ppq1");
  report(8, "ablation directions",
         ablate_iou.metrics.miou < base.metrics.miou && ablate_ppq.metrics.r1_05() < base.metrics.r1_05(),
         fmt("mIoU default %.4f vs lambda_iou=0 %.4f; R1@0.5 default %.4f vs ppq=1 %.4f", base.metrics.miou,
             ablate_iou.metrics.miou, base.metrics.r1_05(), ablate_ppq.metrics.r1_05()));
}

// -- 9 ---------------------------------------------------------------------

void determinism(const fs::path& artifacts) {
  const fs::path dir = artifacts / "determinism";
  fs::create_directories(dir);
  std::ostringstream sink;
  const std::string corpus = (dir / "corpus.jsonl").string();
  int code = cli::run({"gen", "--out", corpus, "--seed", "9", "--n-samples", "64"}, sink, sink);
  std::vector<std::string> curves;
  for (const char* run : {"a", "b"}) {
    const fs::path out = dir / run;
    code |= cli::run({"train", "--corpus", corpus, "--out", out.string(), "--steps", "60", "--d-model", "32", "--heads",
                      "2", "--enc-layers", "1", "--dec-layers", "1", "--ffn", "64", "--seed", "3"},
                     sink, sink);
    std::ifstream in(out / "curves.csv", std::ios::binary);
    curves.emplace_back(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }
  const bool same = code == 0 && !curves[0].empty() && curves[0] == curves[1];
  std::string detail;
  if (code != 0) {
    detail = "cmd_train failed: " + sink.str();
  } else {
    detail = std::string("two cmd_train runs, curves.csv ") + (same ? "byte-identical" : "DIFFERENT") + " (" +
             std::to_string(curves[0].size()) + " bytes)";
  }
  report(9, "determinism", same, detail);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::string artifacts = "acceptance_artifacts";
  std::string report_path;
  bool skip_training = false;
  bool strict = false;
  app.add_option("--artifacts", artifacts, "Directory for run outputs");
  app.add_option("--report", report_path, "Also write the criterion lines to this file");
  app.add_flag("--skip-training", skip_training, "Skip the three 5000-step runs (criteria 6-8 report FAIL)");
  app.add_flag("--strict", strict, "Exit non-zero when any criterion fails");
  CLI11_PARSE(app, argc, argv);
  if (!report_path.empty()) {
    report_file.open(report_path);
    if (!report_file) {
      std::fprintf(stderr, "cannot write %s\n", report_path.c_str());
      return 2;
    }
  }

  emit("INFO  criterion 1  benchmark-scale results            "
       "not reproducible here: they need real video datasets and pretrained backbones; criteria 2-9 substitute");
  assignment_oracle();
  gradient_suite();
  geometry_oracle();
  metric_oracle();
  determinism(artifacts);
  if (skip_training) {
    for (int id : {6, 7, 8}) report(id, "training run", false, "skipped (--skip-training)");
  } else {
    training_criteria(artifacts);
  }
  emit(std::to_string(failures) + " criteria failed");
  return strict && failures != 0 ? 1 : 0;
}
