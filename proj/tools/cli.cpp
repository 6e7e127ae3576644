#include "cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "spanset/checkpoint.hpp"
#include "spanset/corpus.hpp"
#include "spanset/error.hpp"
#include "spanset/manifest.hpp"
#include "spanset/metrics.hpp"
#include "spanset/model.hpp"
#include "spanset/render.hpp"
#include "spanset/trainer.hpp"

namespace spanset::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
  if (!out) throw DataError("write failed for " + path.string());
}

fs::path parent_dir(const fs::path& file) {
  const fs::path p = file.parent_path();
  return p.empty() ? fs::path(".") : p;
}

std::optional<std::uint64_t> env_seed() {
  const char* v = std::getenv("SPANSET_SEED");
  if (!v || !*v) return std::nullopt;
  try {
    std::size_t used = 0;
    const unsigned long long s = std::stoull(v, &used);
    if (used != std::string(v).size()) throw std::invalid_argument(v);
    return s;
  } catch (const std::exception&) {
    throw UsageError(std::string("SPANSET_SEED is not an unsigned integer: ") + v);
  }
}

template <typename T>
void apply(std::optional<T>& flag, T& field) {
  if (flag) field = *flag;
}

class Clock {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

// ---------------------------------------------------------------------------
// gen

struct GenArgs {
  std::string spec_file, out;
  std::optional<std::uint64_t> seed, bank_seed, first_id;
  std::optional<std::size_t> n_samples, frame_count, feature_dim, min_queries, max_queries, bank_size;
  std::optional<double> noise_sigma;
};

void add_gen(CLI::App& app, GenArgs& a) {
  auto* c = app.add_subcommand("gen", "Generate a synthetic grounding corpus");
  c->add_option("--spec", a.spec_file, "Corpus spec JSON file");
  c->add_option("--out", a.out, "Corpus output path (JSON lines)")->required();
  c->add_option("--seed", a.seed, "Sample seed");
  c->add_option("--bank-seed", a.bank_seed, "Signature bank seed");
  c->add_option("--first-id", a.first_id, "Id of the first sample");
  c->add_option("--n-samples", a.n_samples, "Number of samples");
  c->add_option("--frame-count", a.frame_count, "Frames per sample (T)");
  c->add_option("--feature-dim", a.feature_dim, "Feature width (d_in)");
  c->add_option("--min-queries", a.min_queries, "Fewest queries per sample");
  c->add_option("--max-queries", a.max_queries, "Most queries per sample");
  c->add_option("--bank-size", a.bank_size, "Signature bank size");
  c->add_option("--noise-sigma", a.noise_sigma, "Feature noise standard deviation");
}

int cmd_gen(GenArgs& a, std::ostream& out) {
  Clock clock;
  CorpusSpec spec;
  if (!a.spec_file.empty()) spec = spec_from_json(read_file(a.spec_file));
  if (auto s = env_seed()) spec.seed = *s;
  apply(a.seed, spec.seed);
  apply(a.bank_seed, spec.bank_seed);
  apply(a.first_id, spec.first_sample_id);
  apply(a.n_samples, spec.n_samples);
  apply(a.frame_count, spec.frame_count);
  apply(a.feature_dim, spec.feature_dim);
  apply(a.min_queries, spec.min_queries);
  apply(a.max_queries, spec.max_queries);
  apply(a.bank_size, spec.signature_bank_size);
  apply(a.noise_sigma, spec.noise_sigma);
  if (spec.n_samples == 0) throw UsageError("gen: n_samples must be positive");
  spec.validate();

  const Corpus corpus = generate(spec);
  const fs::path path = a.out;
  fs::create_directories(parent_dir(path));
  save_corpus(path, spec, corpus);

  RunManifest m;
  m.command = "gen";
  m.config.emplace_back("corpus_spec", spec_to_json(spec));
  if (!a.spec_file.empty()) m.add_input(a.spec_file);
  m.add_output(path);
  m.add_output(corpus_header_path(path));
  m.seconds = clock.seconds();
  m.write(parent_dir(path));
  out << "wrote " << corpus.size() << " samples to " << path.string() << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string corpus, out_dir, config_file, resume, eval_corpus, schedule;
  std::optional<std::size_t> steps, batch_size, drop_step, checkpoint_every;
  std::optional<std::uint64_t> seed;
  std::optional<double> lr, weight_decay, clip, lambda_l1, lambda_iou, lambda_sg;
  std::optional<std::size_t> d_model, heads, enc_layers, dec_layers, ffn, ppq, max_queries;
  std::optional<double> dropout, temperature;
  std::string similarity;
};

void add_train(CLI::App& app, TrainArgs& a) {
  auto* c = app.add_subcommand("train", "Train a grounding model");
  c->add_option("--corpus", a.corpus, "Training corpus")->required();
  c->add_option("--out", a.out_dir, "Output directory")->required();
  c->add_option("--config", a.config_file, "JSON file with optional \"model\" and \"train\" objects");
  c->add_option("--resume", a.resume, "Continue from a training checkpoint");
  c->add_option("--eval-corpus", a.eval_corpus, "Evaluate on this corpus after training");
  c->add_option("--steps", a.steps, "Total optimizer steps");
  c->add_option("--batch-size", a.batch_size, "Samples per step");
  c->add_option("--lr", a.lr, "Initial learning rate");
  c->add_option("--lr-drop-step", a.drop_step, "Step at which the rate drops by 10x");
  c->add_option("--schedule", a.schedule, "step or linear")->check(CLI::IsMember({"step", "linear"}));
  c->add_option("--weight-decay", a.weight_decay, "Decoupled weight decay");
  c->add_option("--grad-clip", a.clip, "Global gradient norm limit");
  c->add_option("--lambda-l1", a.lambda_l1, "Span L1 weight");
  c->add_option("--lambda-iou", a.lambda_iou, "gIoU weight");
  c->add_option("--lambda-sg", a.lambda_sg, "Set guidance weight");
  c->add_option("--seed", a.seed, "Training and initialization seed");
  c->add_option("--checkpoint-every", a.checkpoint_every, "Write checkpoint.ckpt every N steps");
  c->add_option("--d-model", a.d_model, "Model width");
  c->add_option("--heads", a.heads, "Attention heads");
  c->add_option("--enc-layers", a.enc_layers, "Encoder layers");
  c->add_option("--dec-layers", a.dec_layers, "Decoder layers");
  c->add_option("--ffn", a.ffn, "Feed-forward width");
  c->add_option("--proposals-per-query", a.ppq, "Learnable proposals per query");
  c->add_option("--max-queries", a.max_queries, "Query slots of the model");
  c->add_option("--dropout", a.dropout, "Dropout rate");
  c->add_option("--temperature", a.temperature, "Correspondence softmax temperature");
  c->add_option("--similarity", a.similarity, "cosine or dot")->check(CLI::IsMember({"cosine", "dot"}));
}

std::size_t corpus_max_queries(const Corpus& corpus) {
  std::size_t k = 0;
  for (const auto& s : corpus) k = std::max(k, s.n_queries());
  return k;
}

void check_compatible(const ModelConfig& mc, const Corpus& corpus, const std::string& what) {
  for (const auto& s : corpus) {
    if (s.feature_dim != mc.d_in || s.frame_count != mc.frame_count || s.n_queries() > mc.max_queries) {
      throw DataError(what + ": sample " + std::to_string(s.sample_id) + " (T=" + std::to_string(s.frame_count) +
                      ", d_in=" + std::to_string(s.feature_dim) + ", K=" + std::to_string(s.n_queries()) +
                      ") does not fit the model (T=" + std::to_string(mc.frame_count) +
                      ", d_in=" + std::to_string(mc.d_in) + ", max K=" + std::to_string(mc.max_queries) + ")");
    }
  }
}

int cmd_train(TrainArgs& a, std::ostream& out, std::ostream& err) {
  Clock clock;
  ModelConfig mc;
  mc.max_queries = 0;
  TrainConfig tc;
  if (!a.config_file.empty()) {
    json j;
    try {
      j = json::parse(read_file(a.config_file));
    } catch (const json::parse_error& e) {
      throw DataError("config: " + std::string(e.what()));
    }
    if (!j.is_object()) throw DataError("config: expected an object");
    for (const auto& [key, value] : j.items()) {
      if (key == "model") mc = model_config_from_json(value.dump());
      else if (key == "train") tc = train_config_from_json(value.dump());
      else throw DataError("config: unknown section '" + key + "'");
    }
  }
  if (auto s = env_seed()) tc.seed = *s;
  apply(a.steps, tc.total_steps);
  apply(a.batch_size, tc.batch_size);
  apply(a.lr, tc.lr);
  if (a.drop_step) tc.lr_drop_step = *a.drop_step;
  if (!a.schedule.empty()) tc.schedule = a.schedule == "linear" ? LrSchedule::linear : LrSchedule::step;
  apply(a.weight_decay, tc.weight_decay);
  apply(a.clip, tc.grad_clip_norm);
  apply(a.lambda_l1, tc.weights.lambda_l1);
  apply(a.lambda_iou, tc.weights.lambda_iou);
  apply(a.lambda_sg, tc.weights.lambda_sg);
  apply(a.seed, tc.seed);
  apply(a.d_model, mc.d_model);
  apply(a.heads, mc.n_heads);
  apply(a.enc_layers, mc.n_enc_layers);
  apply(a.dec_layers, mc.n_dec_layers);
  apply(a.ffn, mc.ffn_width);
  apply(a.ppq, mc.proposals_per_query);
  apply(a.max_queries, mc.max_queries);
  apply(a.dropout, mc.dropout);
  apply(a.temperature, mc.temperature);
  if (!a.similarity.empty()) mc.similarity = a.similarity == "dot" ? Similarity::dot : Similarity::cosine;
  if (a.checkpoint_every && *a.checkpoint_every == 0) throw UsageError("train: --checkpoint-every must be positive");
  try {
    tc.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }

  CorpusSpec spec;
  const Corpus corpus = load_corpus(a.corpus, &spec);
  if (corpus.empty()) throw DataError("train: corpus " + a.corpus + " is empty");

  std::optional<Checkpoint> resume;
  if (!a.resume.empty()) resume = load_checkpoint(a.resume);

  std::optional<GroundingModel> model;
  if (resume) {
    model.emplace(GroundingModel::from_checkpoint(*resume));
  } else {
    mc.d_in = corpus.front().feature_dim;
    mc.frame_count = corpus.front().frame_count;
    mc.max_queries = std::max({mc.max_queries, spec.max_queries, corpus_max_queries(corpus)});
    try {
      mc.validate();
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
    model.emplace(mc, tc.seed);
  }
  check_compatible(model->config(), corpus, "train");

  const fs::path dir = a.out_dir;
  fs::create_directories(dir);
  Trainer trainer(*model, corpus, tc);
  if (resume) trainer.restore(*resume);

  const fs::path ckpt_path = dir / "model.ckpt";
  const fs::path curve_path = dir / "curves.csv";
  const fs::path phase_path = dir / "phase.json";
  int code = kOk;
  try {
    trainer.run([&](const Trainer& t) {
      if (a.checkpoint_every && t.step() % *a.checkpoint_every == 0) {
        save_checkpoint(dir / "checkpoint.ckpt", t.checkpoint());
      }
    });
  } catch (const DivergenceError& e) {
    err << "error: " << e.what() << '\n';
    code = kDivergence;
  }

  write_file(curve_path, curve_to_csv(trainer.curve()));
  const PhaseReport phases = analyze_phases(trainer.curve());
  write_file(phase_path, phases.to_json() + "\n");
  save_checkpoint(ckpt_path, trainer.checkpoint());

  RunManifest m;
  m.command = "train";
  m.config.emplace_back("corpus_spec", spec_to_json(spec));
  m.config.emplace_back("model_config", model_config_to_json(model->config()));
  m.config.emplace_back("train_config", train_config_to_json(tc));
  m.add_input(a.corpus);
  if (!a.config_file.empty()) m.add_input(a.config_file);
  if (resume) m.add_input(a.resume);
  m.add_output(ckpt_path);
  m.add_output(curve_path);
  m.add_output(phase_path);

  if (code == kOk && !a.eval_corpus.empty()) {
    const Corpus test = load_corpus(a.eval_corpus);
    check_compatible(model->config(), test, "eval");
    const MetricReport report = evaluate(*model, test);
    const fs::path metrics_path = dir / "metrics.csv";
    write_file(metrics_path, report.to_csv());
    m.add_input(a.eval_corpus);
    m.add_output(metrics_path);
    out << report.to_table();
  }
  m.seconds = clock.seconds();
  m.write(dir);
  out << "trained " << trainer.step() << " steps, sg_drop_step " << phases.sg_drop_step << " (L_sg -"
      << static_cast<int>(100 * phases.sg_drop_fraction) << "%)\n";
  return code;
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
  std::string checkpoint, corpus, out, label = "spanset";
  std::size_t batch_size = 32;
};

void add_eval(CLI::App& app, EvalArgs& a) {
  auto* c = app.add_subcommand("eval", "Evaluate a checkpoint on a corpus");
  c->add_option("--checkpoint", a.checkpoint, "Model checkpoint")->required();
  c->add_option("--corpus", a.corpus, "Evaluation corpus")->required();
  c->add_option("--out", a.out, "Metric CSV output path");
  c->add_option("--label", a.label, "Row label of the printed table");
  c->add_option("--batch-size", a.batch_size, "Samples per forward pass")->check(CLI::PositiveNumber);
}

int cmd_eval(EvalArgs& a, std::ostream& out) {
  Clock clock;
  GroundingModel model = GroundingModel::from_checkpoint(load_checkpoint(a.checkpoint));
  const Corpus corpus = load_corpus(a.corpus);
  if (corpus.empty()) throw DataError("eval: corpus " + a.corpus + " is empty");
  check_compatible(model.config(), corpus, "eval");
  const MetricReport report = evaluate(model, corpus, a.batch_size);
  out << report.to_table(a.label);
  if (!a.out.empty()) {
    const fs::path path = a.out;
    fs::create_directories(parent_dir(path));
    write_file(path, report.to_csv());
    RunManifest m;
    m.command = "eval";
    m.config.emplace_back("model_config", model_config_to_json(model.config()));
    m.add_input(a.checkpoint);
    m.add_input(a.corpus);
    m.add_output(path);
    m.seconds = clock.seconds();
    m.write(parent_dir(path));
  }
  return kOk;
}

// ---------------------------------------------------------------------------
// render

struct RenderArgs {
  std::string checkpoint, corpus, out;
  std::uint64_t sample_id = 0;
};

void add_render(CLI::App& app, RenderArgs& a) {
  auto* c = app.add_subcommand("render", "Render spans and attention of one sample as SVG");
  c->add_option("--checkpoint", a.checkpoint, "Model checkpoint")->required();
  c->add_option("--corpus", a.corpus, "Corpus holding the sample")->required();
  c->add_option("--sample-id", a.sample_id, "Sample to render")->required();
  c->add_option("--out", a.out, "SVG output path")->required();
}

int cmd_render(RenderArgs& a, std::ostream& out) {
  Clock clock;
  GroundingModel model = GroundingModel::from_checkpoint(load_checkpoint(a.checkpoint));
  const Corpus corpus = load_corpus(a.corpus);
  check_compatible(model.config(), corpus, "render");
  const GroundingSample* sample = nullptr;
  for (const auto& s : corpus) {
    if (s.sample_id == a.sample_id) sample = &s;
  }
  if (!sample) throw DataError("render: no sample with id " + std::to_string(a.sample_id) + " in " + a.corpus);

  model.set_training(false);
  ModelOutput output;
  {
    NoGradGuard no_grad;
    output = model.forward(*sample, true);
  }
  const fs::path svg_path = a.out;
  fs::create_directories(parent_dir(svg_path));
  fs::path att_path = svg_path, dist_path = svg_path;
  att_path.replace_extension(".attention.csv");
  dist_path.replace_extension(".pred_dist.svg");
  write_file(svg_path, render_sample_svg(*sample, output));
  write_file(att_path, attention_csv(*sample, output));
  write_file(dist_path, render_pred_dist_svg(collect_slot_points(model, corpus), model.config().max_proposals()));

  RunManifest m;
  m.command = "render";
  m.config.emplace_back("model_config", model_config_to_json(model.config()));
  m.add_input(a.checkpoint);
  m.add_input(a.corpus);
  m.add_output(svg_path);
  m.add_output(att_path);
  m.add_output(dist_path);
  m.seconds = clock.seconds();
  m.write(parent_dir(svg_path));
  out << "wrote " << svg_path.string() << ", " << att_path.string() << ", " << dist_path.string() << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------
// curves

struct CurvesArgs {
  std::string curves, out, phase_out;
};

void add_curves(CLI::App& app, CurvesArgs& a) {
  auto* c = app.add_subcommand("curves", "Plot a training curve log and locate the set-guidance cliff");
  c->add_option("--curves", a.curves, "curves.csv from a training run")->required();
  c->add_option("--out", a.out, "SVG output path")->required();
  c->add_option("--phase-out", a.phase_out, "Write the phase report JSON here");
}

int cmd_curves(CurvesArgs& a, std::ostream& out) {
  Clock clock;
  const auto curve = curve_from_csv(read_file(a.curves));
  const PhaseReport phases = analyze_phases(curve);
  const fs::path path = a.out;
  fs::create_directories(parent_dir(path));
  write_file(path, render_curves_svg(curve, phases));
  RunManifest m;
  m.command = "curves";
  m.add_input(a.curves);
  m.add_output(path);
  if (!a.phase_out.empty()) {
    write_file(a.phase_out, phases.to_json() + "\n");
    m.add_output(a.phase_out);
  }
  m.seconds = clock.seconds();
  m.write(parent_dir(path));
  out << phases.to_json() << '\n';
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Set-prediction video grounding on synthetic features"};
  app.name("spanset");
  app.require_subcommand(1);
  // A repeated flag takes its last value, so overrides can be appended.
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  GenArgs gen;
  TrainArgs train;
  EvalArgs eval;
  RenderArgs render;
  CurvesArgs curves;
  add_gen(app, gen);
  add_train(app, train);
  add_eval(app, eval);
  add_render(app, render);
  add_curves(app, curves);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? kOk : kUsage;
  }

  try {
    if (app.got_subcommand("gen")) return cmd_gen(gen, out);
    if (app.got_subcommand("train")) return cmd_train(train, out, err);
    if (app.got_subcommand("eval")) return cmd_eval(eval, out);
    if (app.got_subcommand("render")) return cmd_render(render, out);
    if (app.got_subcommand("curves")) return cmd_curves(curves, out);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return kUsage;
  } catch (const DivergenceError& e) {
    err << "error: " << e.what() << '\n';
    return kDivergence;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << '\n';
    return kData;
  } catch (const std::invalid_argument& e) {
    err << "usage error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kData;
  }
  return kUsage;
}

}  // namespace spanset::cli
