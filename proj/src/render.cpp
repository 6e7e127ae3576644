#include "spanset/render.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "spanset/error.hpp"

namespace spanset {

namespace {

constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                                    "#8c564b", "#e377c2", "#17becf", "#bcbd22", "#7f7f7f"};

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

double track_x(double t) { return kTrackLeft + t * kTrackWidth; }

// White to dark blue.
std::string heat(double w) {
  const double c = std::clamp(w, 0.0, 1.0);
  const int r = static_cast<int>(std::lround(255 * (1 - c)));
  const int g = static_cast<int>(std::lround(255 * (1 - 0.8 * c)));
  char buf[16];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", r, g, 255 - static_cast<int>(std::lround(105 * c)));
  return buf;
}

const AttentionMap& final_attention(const ModelOutput& output) {
  if (output.enc_dec_attention.empty()) {
    throw std::invalid_argument("render: model output has no recorded attention");
  }
  return output.enc_dec_attention.back();
}

}  // namespace

std::string query_color(std::size_t k) { return kPalette[k % std::size(kPalette)]; }

std::string render_sample_svg(const GroundingSample& sample, const ModelOutput& output) {
  const AttentionMap& att = final_attention(output);
  const RankedPredictions ranked = link_predictions(output);
  const std::size_t k = sample.n_queries();
  const std::size_t n = output.n_predictions();

  const double lane = 14.0;
  const double target_top = 40.0;
  const double pred_top = target_top + static_cast<double>(k) * (lane + 4) + 24;
  const double pred_lane = 6.0;
  const double grid_top = pred_top + static_cast<double>(n) * (pred_lane + 1) + 30;
  const double cell_w = kTrackWidth / static_cast<double>(att.cols);
  const double cell_h = std::max(2.0, std::min(8.0, 400.0 / static_cast<double>(std::max<std::size_t>(att.rows, 1))));
  const double height = grid_top + static_cast<double>(att.rows) * cell_h + 30;

  std::ostringstream svg;
  svg << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
      << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << fmt(kTrackLeft + kTrackWidth + 40) << "\" height=\""
      << fmt(height) << "\" font-family=\"sans-serif\" font-size=\"11\">\n"
      << "<title>sample " << sample.sample_id << "</title>\n"
      << "<text x=\"10\" y=\"20\" font-size=\"13\">sample " << sample.sample_id << ": " << k << " queries, " << n
      << " predictions</text>\n";

  svg << "<g id=\"targets\">\n";
  for (const Target& t : sample.targets) {
    const double y = target_top + static_cast<double>(t.query) * (lane + 4);
    svg << "<text x=\"10\" y=\"" << fmt(y + 11) << "\">query " << t.query << "</text>\n"
        << "<rect data-kind=\"target\" data-query=\"" << t.query << "\" x=\"" << fmt(track_x(t.span.s()))
        << "\" y=\"" << fmt(y) << "\" width=\"" << fmt(t.span.length() * kTrackWidth) << "\" height=\"" << fmt(lane)
        << "\" fill=\"none\" stroke=\"" << query_color(t.query) << "\" stroke-width=\"2\"/>\n";
  }
  svg << "</g>\n";

  svg << "<text x=\"10\" y=\"" << fmt(pred_top - 8) << "\">predictions (opacity = score)</text>\n<g id=\"predictions\">\n";
  std::size_t row = 0;
  for (std::size_t q = 0; q < ranked.size(); ++q) {
    for (std::size_t r = 0; r < ranked[q].size(); ++r) {
      const ScoredSpan& p = ranked[q][r];
      const double y = pred_top + static_cast<double>(row++) * (pred_lane + 1);
      svg << "<rect data-kind=\"prediction\" data-query=\"" << q << "\" data-rank=\"" << r << "\" data-slot=\""
          << p.prediction << "\" x=\"" << fmt(track_x(p.span.s())) << "\" y=\"" << fmt(y) << "\" width=\""
          << fmt(p.span.length() * kTrackWidth) << "\" height=\"" << fmt(pred_lane) << "\" fill=\"" << query_color(q)
          << "\" fill-opacity=\"" << fmt(0.25 + 0.75 * p.score) << "\"/>\n";
    }
  }
  svg << "</g>\n";

  svg << "<text x=\"10\" y=\"" << fmt(grid_top - 8) << "\">proposal-video attention (frames | queries)</text>\n"
      << "<g id=\"attention\" shape-rendering=\"crispEdges\">\n";
  for (std::size_t i = 0; i < att.rows; ++i) {
    for (std::size_t j = 0; j < att.cols; ++j) {
      svg << "<rect x=\"" << fmt(kTrackLeft + static_cast<double>(j) * cell_w) << "\" y=\""
          << fmt(grid_top + static_cast<double>(i) * cell_h) << "\" width=\"" << fmt(cell_w) << "\" height=\""
          << fmt(cell_h) << "\" fill=\"" << heat(att.weights[i * att.cols + j] * static_cast<double>(att.cols) / 8.0)
          << "\"/>\n";
    }
  }
  const double split = kTrackLeft + static_cast<double>(sample.frame_count) * cell_w;
  svg << "<line x1=\"" << fmt(split) << "\" y1=\"" << fmt(grid_top) << "\" x2=\"" << fmt(split) << "\" y2=\""
      << fmt(grid_top + static_cast<double>(att.rows) * cell_h) << "\" stroke=\"#000\"/>\n</g>\n</svg>\n";
  return svg.str();
}

std::string attention_csv(const GroundingSample& sample, const ModelOutput& output) {
  const AttentionMap& att = final_attention(output);
  if (att.cols != sample.frame_count + sample.n_queries()) {
    throw DimensionError("attention_csv: attention width does not match the sample");
  }
  std::ostringstream out;
  out << "proposal";
  for (std::size_t t = 0; t < sample.frame_count; ++t) out << ",f" << t;
  for (std::size_t q = 0; q < sample.n_queries(); ++q) out << ",q" << q;
  out << '\n';
  char buf[32];
  for (std::size_t i = 0; i < att.rows; ++i) {
    out << i;
    for (std::size_t j = 0; j < att.cols; ++j) {
      std::snprintf(buf, sizeof buf, ",%.17g", att.weights[i * att.cols + j]);
      out << buf;
    }
    out << '\n';
  }
  return out.str();
}

std::vector<SlotPoint> collect_slot_points(GroundingModel& model, const Corpus& corpus, std::size_t batch_size) {
  if (batch_size == 0) batch_size = 1;
  const bool was_training = model.training();
  model.set_training(false);
  NoGradGuard no_grad;
  std::vector<SlotPoint> points;
  for (std::size_t begin = 0; begin < corpus.size(); begin += batch_size) {
    std::vector<const GroundingSample*> members;
    for (std::size_t i = begin; i < std::min(corpus.size(), begin + batch_size); ++i) members.push_back(&corpus[i]);
    for (const ModelOutput& out : model.forward(Batch::from_samples(members))) {
      const auto spans = out.span_values();
      for (std::size_t i = 0; i < spans.size(); ++i) points.push_back({i, spans[i].center(), spans[i].length()});
    }
  }
  model.set_training(was_training);
  return points;
}

std::string render_pred_dist_svg(const std::vector<SlotPoint>& points, std::size_t n_slots) {
  const double size = 360.0, margin = 50.0, gap = 30.0;
  const std::size_t shown = std::max<std::size_t>(1, n_slots);
  const std::size_t per_row = std::min<std::size_t>(shown, 5);
  const std::size_t rows = (shown + per_row - 1) / per_row;
  const double cell = size / 2;
  std::ostringstream svg;
  svg << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" width=\""
      << fmt(2 * margin + static_cast<double>(per_row) * (cell + gap)) << "\" height=\""
      << fmt(2 * margin + static_cast<double>(rows) * (cell + gap)) << "\" font-family=\"sans-serif\" font-size=\"10\">\n"
      << "<title>predicted center vs width per proposal slot</title>\n";
  for (std::size_t s = 0; s < shown; ++s) {
    const double x0 = margin + static_cast<double>(s % per_row) * (cell + gap);
    const double y0 = margin + static_cast<double>(s / per_row) * (cell + gap);
    svg << "<g data-slot=\"" << s << "\">\n<rect x=\"" << fmt(x0) << "\" y=\"" << fmt(y0) << "\" width=\"" << fmt(cell)
        << "\" height=\"" << fmt(cell) << "\" fill=\"none\" stroke=\"#888\"/>\n"
        << "<text x=\"" << fmt(x0) << "\" y=\"" << fmt(y0 - 4) << "\">slot " << s << "</text>\n";
    for (const SlotPoint& p : points) {
      if (p.slot != s) continue;
      svg << "<circle cx=\"" << fmt(x0 + p.center * cell) << "\" cy=\"" << fmt(y0 + (1 - p.width) * cell)
          << "\" r=\"1.5\" fill=\"" << query_color(s) << "\" fill-opacity=\"0.5\"/>\n";
    }
    svg << "</g>\n";
  }
  svg << "<text x=\"" << fmt(margin) << "\" y=\"" << fmt(margin / 2)
      << "\">x: normalized center, y: normalized width</text>\n</svg>\n";
  return svg.str();
}

std::string render_curves_svg(const std::vector<CurveRow>& curve, const PhaseReport& phases) {
  struct Series {
    const char* name;
    double CurveRow::*field;
  };
  const Series series[] = {{"set_guidance", &CurveRow::set_guidance},
                           {"l1", &CurveRow::l1},
                           {"giou", &CurveRow::giou},
                           {"total", &CurveRow::total}};
  const double w = 720.0, h = 140.0, left = 70.0, top = 30.0, gap = 40.0;
  const std::size_t n = curve.size();
  std::ostringstream svg;
  svg << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" width=\""
      << fmt(left + w + 30) << "\" height=\"" << fmt(top + std::size(series) * (h + gap))
      << "\" font-family=\"sans-serif\" font-size=\"11\">\n<title>training curves</title>\n";
  for (std::size_t p = 0; p < std::size(series); ++p) {
    const double y0 = top + static_cast<double>(p) * (h + gap);
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (const CurveRow& r : curve) {
      const double v = r.*series[p].field;
      if (std::isfinite(v)) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
    }
    if (!std::isfinite(lo)) lo = 0, hi = 1;
    if (hi - lo < 1e-12) hi = lo + 1;
    svg << "<g data-series=\"" << series[p].name << "\">\n<rect x=\"" << fmt(left) << "\" y=\"" << fmt(y0)
        << "\" width=\"" << fmt(w) << "\" height=\"" << fmt(h) << "\" fill=\"none\" stroke=\"#888\"/>\n"
        << "<text x=\"" << fmt(left) << "\" y=\"" << fmt(y0 - 6) << "\">" << series[p].name << " [" << fmt(lo)
        << ", " << fmt(hi) << "]</text>\n";
    if (n > 0) {
      svg << "<polyline fill=\"none\" stroke=\"" << query_color(p) << "\" stroke-width=\"1\" points=\"";
      for (std::size_t i = 0; i < n; ++i) {
        const double v = curve[i].*series[p].field;
        if (!std::isfinite(v)) continue;
        const double x = left + (n > 1 ? static_cast<double>(i) / static_cast<double>(n - 1) : 0.0) * w;
        const double y = y0 + h - (v - lo) / (hi - lo) * h;
        svg << fmt(x) << ',' << fmt(y) << ' ';
      }
      svg << "\"/>\n";
      if (phases.total_steps == n && n > 1) {
        const double x = left + static_cast<double>(phases.sg_drop_step) / static_cast<double>(n - 1) * w;
        svg << "<line x1=\"" << fmt(x) << "\" y1=\"" << fmt(y0) << "\" x2=\"" << fmt(x) << "\" y2=\"" << fmt(y0 + h)
            << "\" stroke=\"#000\" stroke-dasharray=\"4 3\"/>\n";
      }
    }
    svg << "</g>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

}  // namespace spanset
