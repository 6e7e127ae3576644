#include "spanset/corpus.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "spanset/error.hpp"

namespace spanset {

using json = nlohmann::json;

namespace {

std::mt19937_64 sample_rng(std::uint64_t seed, std::uint64_t sample_id, std::uint32_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(sample_id), static_cast<std::uint32_t>(sample_id >> 32),
                    stream};
  return std::mt19937_64(seq);
}

// Event width mixture: short, medium and long spans.
double draw_width(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const double pick = u01(rng);
  if (pick < 0.5) return std::uniform_real_distribution<double>(0.05, 0.15)(rng);
  if (pick < 0.8) return std::uniform_real_distribution<double>(0.15, 0.40)(rng);
  return std::uniform_real_distribution<double>(0.40, 0.80)(rng);
}

double cosine(std::span<const double> a, std::span<const double> b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return dot / (std::sqrt(na) * std::sqrt(nb) + 1e-12);
}

}  // namespace

void CorpusSpec::validate() const {
  if (frame_count < 4) throw DataError("corpus spec: frame_count must be >= 4");
  if (feature_dim < 4) throw DataError("corpus spec: feature_dim must be >= 4");
  if (min_queries < 1 || min_queries > max_queries) {
    throw DataError("corpus spec: need 1 <= min_queries <= max_queries");
  }
  if (signature_bank_size < max_queries) {
    throw DataError("corpus spec: signature bank smaller than max_queries");
  }
  if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma)) {
    throw DataError("corpus spec: noise_sigma must be finite and non-negative");
  }
  // Distinct spans need room: with width >= 2 frames there are enough starts
  // for any query count allowed here once T >= 4 and K is small; guard the
  // pathological case anyway.
  if (max_queries > (frame_count - 1) * frame_count / 2) {
    throw DataError("corpus spec: too many queries for the frame count");
  }
}

std::vector<std::vector<double>> signature_bank(const CorpusSpec& spec) {
  std::mt19937_64 rng = sample_rng(spec.bank_seed, 0, 0xba4c);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto draw = [&] {
    std::vector<double> sig(spec.feature_dim);
    double norm = 0.0;
    do {
      norm = 0.0;
      for (double& v : sig) {
        v = normal(rng);
        norm += v * v;
      }
    } while (norm == 0.0);
    norm = std::sqrt(norm);
    for (double& v : sig) v /= norm;
    return sig;
  };
  // Signatures keep |cos| < 0.5 to each other so that two overlapping events
  // still read as both of their queries. Narrow features may not allow that
  // for a large bank; after a bounded number of draws the last one is kept.
  std::vector<std::vector<double>> bank;
  bank.reserve(spec.signature_bank_size);
  while (bank.size() < spec.signature_bank_size) {
    std::vector<double> sig;
    for (int attempt = 0; attempt < 1000; ++attempt) {
      sig = draw();
      const bool apart = std::all_of(bank.begin(), bank.end(),
                                     [&](const std::vector<double>& other) { return std::abs(cosine(sig, other)) < 0.5; });
      if (apart) break;
    }
    bank.push_back(std::move(sig));
  }
  return bank;
}

std::pair<std::size_t, std::size_t> frames_covered(const TimeSpan& span, std::size_t frame_count) {
  const double t = static_cast<double>(frame_count);
  const double first = std::ceil(span.s() * t - 0.5);
  const double last = std::floor(span.e() * t - 0.5);
  const auto lo = static_cast<std::size_t>(std::max(0.0, first));
  if (last < 0.0) return {1, 0};
  const auto hi = std::min(static_cast<std::size_t>(last), frame_count - 1);
  return {lo, hi};
}

GroundingSample generate_sample(const CorpusSpec& spec, const std::vector<std::vector<double>>& bank,
                                std::uint64_t sample_id) {
  std::mt19937_64 rng = sample_rng(spec.seed, sample_id, 0x5a3b);
  const std::size_t t = spec.frame_count;
  const std::size_t d = spec.feature_dim;
  GroundingSample s;
  s.sample_id = sample_id;
  s.frame_count = t;
  s.feature_dim = d;

  const std::size_t k = std::uniform_int_distribution<std::size_t>(spec.min_queries, spec.max_queries)(rng);

  std::vector<std::size_t> ids(bank.size());
  std::iota(ids.begin(), ids.end(), 0);
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = std::uniform_int_distribution<std::size_t>(i, ids.size() - 1)(rng);
    std::swap(ids[i], ids[j]);
  }

  // Spans snap to frame boundaries and are at least two frames wide. Two
  // spans may overlap by at most half of the shorter one. A set that keeps
  // failing is redrawn, and after many redraws only identical spans are
  // refused so that tiny frame counts still terminate.
  std::vector<std::pair<std::size_t, std::size_t>> frame_spans;
  std::size_t failures = 0, restarts = 0;
  while (frame_spans.size() < k) {
    const double w = draw_width(rng);
    const std::size_t width =
        std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(w * static_cast<double>(t))), 2, t);
    const std::size_t start = std::uniform_int_distribution<std::size_t>(0, t - width)(rng);
    const std::pair<std::size_t, std::size_t> cand{start, start + width};
    bool ok = std::find(frame_spans.begin(), frame_spans.end(), cand) == frame_spans.end();
    if (ok && restarts < 64) {
      for (const auto& [a, b] : frame_spans) {
        const std::size_t lo = std::max(a, cand.first), hi = std::min(b, cand.second);
        const std::size_t overlap = hi > lo ? hi - lo : 0;
        if (2 * overlap > std::min(b - a, width)) ok = false;
      }
    }
    if (ok) {
      frame_spans.push_back(cand);
    } else if (++failures == 256) {
      frame_spans.clear();
      failures = 0;
      ++restarts;
    }
  }

  std::normal_distribution<double> noise(0.0, 1.0);
  s.frames.resize(t * d);
  for (double& v : s.frames) v = spec.noise_sigma * noise(rng);
  s.queries.resize(k * d);
  for (std::size_t q = 0; q < k; ++q) {
    const auto& sig = bank[ids[q]];
    const auto [a, b] = frame_spans[q];
    for (std::size_t f = a; f < b; ++f) {
      for (std::size_t c = 0; c < d; ++c) s.frames[f * d + c] += sig[c];
    }
    for (std::size_t c = 0; c < d; ++c) s.queries[q * d + c] = sig[c] + spec.noise_sigma * noise(rng);
    s.targets.push_back(Target{TimeSpan(static_cast<double>(a) / static_cast<double>(t),
                                        static_cast<double>(b) / static_cast<double>(t)),
                               q});
  }
  return s;
}

Corpus generate(const CorpusSpec& spec) {
  spec.validate();
  const auto bank = signature_bank(spec);
  Corpus corpus;
  corpus.reserve(spec.n_samples);
  for (std::size_t i = 0; i < spec.n_samples; ++i) {
    corpus.push_back(generate_sample(spec, bank, spec.first_sample_id + i));
  }
  return corpus;
}

std::vector<TimeSpan> oracle_localize(const GroundingSample& sample) {
  const std::size_t t = sample.frame_count;
  const double tf = static_cast<double>(t);
  std::vector<TimeSpan> out;
  for (std::size_t q = 0; q < sample.n_queries(); ++q) {
    std::size_t best_start = 0, best_len = 0, run_start = 0, run_len = 0;
    std::size_t argmax = 0;
    double best_sim = -2.0;
    for (std::size_t f = 0; f < t; ++f) {
      const double sim = cosine(sample.query(q), sample.frame(f));
      if (sim > best_sim) {
        best_sim = sim;
        argmax = f;
      }
      if (sim > 0.5) {
        if (run_len == 0) run_start = f;
        ++run_len;
        if (run_len > best_len) {
          best_len = run_len;
          best_start = run_start;
        }
      } else {
        run_len = 0;
      }
    }
    if (best_len == 0) {
      out.emplace_back(static_cast<double>(argmax) / tf, static_cast<double>(argmax + 1) / tf);
    } else {
      out.emplace_back(static_cast<double>(best_start) / tf,
                       static_cast<double>(best_start + best_len) / tf);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Serialization

std::string spec_to_json(const CorpusSpec& s) {
  return json{{"n_samples", s.n_samples},
              {"frame_count", s.frame_count},
              {"feature_dim", s.feature_dim},
              {"min_queries", s.min_queries},
              {"max_queries", s.max_queries},
              {"noise_sigma", s.noise_sigma},
              {"signature_bank_size", s.signature_bank_size},
              {"bank_seed", s.bank_seed},
              {"seed", s.seed},
              {"first_sample_id", s.first_sample_id}}
      .dump();
}

CorpusSpec spec_from_json(const std::string& text) {
  CorpusSpec s;
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw DataError(std::string("corpus spec: ") + e.what());
  }
  if (!j.is_object()) throw DataError("corpus spec: expected an object");
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "n_samples") s.n_samples = value.get<std::size_t>();
      else if (key == "frame_count") s.frame_count = value.get<std::size_t>();
      else if (key == "feature_dim") s.feature_dim = value.get<std::size_t>();
      else if (key == "min_queries") s.min_queries = value.get<std::size_t>();
      else if (key == "max_queries") s.max_queries = value.get<std::size_t>();
      else if (key == "noise_sigma") s.noise_sigma = value.get<double>();
      else if (key == "signature_bank_size") s.signature_bank_size = value.get<std::size_t>();
      else if (key == "bank_seed") s.bank_seed = value.get<std::uint64_t>();
      else if (key == "seed") s.seed = value.get<std::uint64_t>();
      else if (key == "first_sample_id") s.first_sample_id = value.get<std::uint64_t>();
      else throw DataError("corpus spec: unknown key '" + key + "'");
    }
  } catch (const json::exception& e) {
    throw DataError(std::string("corpus spec: ") + e.what());
  }
  return s;
}

std::filesystem::path corpus_header_path(const std::filesystem::path& corpus_path) {
  return corpus_path.string() + ".header.json";
}

void save_corpus(const std::filesystem::path& path, const CorpusSpec& spec, const Corpus& corpus) {
  {
    std::ofstream header(corpus_header_path(path), std::ios::trunc);
    if (!header) throw DataError("cannot write " + corpus_header_path(path).string());
    header << json{{"format", "spanset-corpus"}, {"version", 1}, {"spec", json::parse(spec_to_json(spec))}}.dump(2)
           << '\n';
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  for (const GroundingSample& s : corpus) {
    json targets = json::array();
    for (const Target& t : s.targets) targets.push_back({t.span.s(), t.span.e(), t.query});
    out << json{{"sample_id", s.sample_id},
                {"T", s.frame_count},
                {"K", s.n_queries()},
                {"d_in", s.feature_dim},
                {"frames", s.frames},
                {"queries", s.queries},
                {"targets", targets}}
               .dump()
        << '\n';
  }
  if (!out) throw DataError("write failed for " + path.string());
}

Corpus load_corpus(const std::filesystem::path& path, CorpusSpec* spec) {
  std::ifstream header(corpus_header_path(path));
  if (!header) throw DataError("missing corpus header " + corpus_header_path(path).string());
  try {
    const json h = json::parse(header);
    if (h.value("format", "") != "spanset-corpus" || h.value("version", 0) != 1) {
      throw DataError("unsupported corpus header in " + corpus_header_path(path).string());
    }
    if (spec) *spec = spec_from_json(h.at("spec").dump());
  } catch (const json::exception& e) {
    throw DataError("corpus header: " + std::string(e.what()));
  }

  std::ifstream in(path);
  if (!in) throw DataError("cannot open corpus " + path.string());
  Corpus corpus;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::string where = path.string() + ":" + std::to_string(line_no);
    try {
      const json j = json::parse(line);
      GroundingSample s;
      s.sample_id = j.at("sample_id").get<std::uint64_t>();
      s.frame_count = j.at("T").get<std::size_t>();
      s.feature_dim = j.at("d_in").get<std::size_t>();
      const auto k = j.at("K").get<std::size_t>();
      s.frames = j.at("frames").get<std::vector<double>>();
      s.queries = j.at("queries").get<std::vector<double>>();
      if (s.frames.size() != s.frame_count * s.feature_dim || s.queries.size() != k * s.feature_dim) {
        throw DataError(where + ": feature array size does not match T, K and d_in");
      }
      const json& targets = j.at("targets");
      if (targets.size() != k) throw DataError(where + ": expected " + std::to_string(k) + " targets");
      for (const json& t : targets) {
        const auto query = t.at(2).get<std::size_t>();
        if (query != s.targets.size()) throw DataError(where + ": targets out of query order");
        s.targets.push_back(Target{TimeSpan(t.at(0).get<double>(), t.at(1).get<double>()), query});
      }
      corpus.push_back(std::move(s));
    } catch (const json::exception& e) {
      throw DataError(where + ": " + e.what());
    } catch (const std::invalid_argument& e) {
      throw DataError(where + ": " + e.what());
    }
  }
  return corpus;
}

}  // namespace spanset
