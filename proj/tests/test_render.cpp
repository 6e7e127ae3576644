#include <gtest/gtest.h>

#include <fstream>

#include "fixtures.hpp"
#include "spanset/error.hpp"
#include "spanset/manifest.hpp"
#include "spanset/render.hpp"

using namespace spanset;

TEST(Manifest, GitBlobIds) {
  EXPECT_EQ(git_blob_sha1(""), "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
  EXPECT_EQ(git_blob_sha1("hello\n"), "ce013625030ba8dba906f756967f9e9ca394464a");
}

TEST(Manifest, RecordsFilesAndWritesOnce) {
  fixture::TempDir dir("manifest");
  std::ofstream(dir / "in.txt") << "hello\n";
  RunManifest m;
  m.command = "gen";
  m.config.emplace_back("corpus_spec", spec_to_json(CorpusSpec{}));
  m.add_input(dir / "in.txt");
  const auto path = m.write(dir.path());
  EXPECT_EQ(path, dir / "manifest.json");
  std::ifstream in(path);
  const std::string text((std::istreambuf_iterator<char>(in)), {});
  EXPECT_NE(text.find("ce013625030ba8dba906f756967f9e9ca394464a"), std::string::npos);
  EXPECT_NE(text.find("\"corpus_spec\""), std::string::npos);
  EXPECT_THROW(m.add_input(dir / "missing.txt"), DataError);
}

TEST(Render, SampleSvgCarriesBarsAndNeedsAttention) {
  const Corpus corpus = generate(fixture::micro_spec(2));
  GroundingModel model(fixture::micro_config(), 1);
  const auto out = model.forward(corpus[0], true);
  const std::string svg = render_sample_svg(corpus[0], out);
  std::size_t targets = 0, preds = 0;
  for (std::size_t p = 0; (p = svg.find("data-kind=\"target\"", p)) != std::string::npos; ++p) ++targets;
  for (std::size_t p = 0; (p = svg.find("data-kind=\"prediction\"", p)) != std::string::npos; ++p) ++preds;
  EXPECT_EQ(targets, corpus[0].n_queries());
  EXPECT_EQ(preds, out.n_predictions());
  EXPECT_THROW(render_sample_svg(corpus[0], model.forward(corpus[0], false)), std::invalid_argument);
}

TEST(Render, AttentionCsvShape) {
  const Corpus corpus = generate(fixture::micro_spec(2));
  GroundingModel model(fixture::micro_config(), 1);
  const auto out = model.forward(corpus[1], true);
  const std::string csv = attention_csv(corpus[1], out);
  const std::size_t lines = static_cast<std::size_t>(std::count(csv.begin(), csv.end(), '\n'));
  EXPECT_EQ(lines, 1 + out.n_predictions());
  const std::string header = csv.substr(0, csv.find('\n'));
  EXPECT_EQ(static_cast<std::size_t>(std::count(header.begin(), header.end(), ',')), 8 + corpus[1].n_queries());
}

TEST(Render, SlotPointsAndCurves) {
  const Corpus corpus = generate(fixture::micro_spec(3));
  GroundingModel model(fixture::micro_config(), 1);
  const auto points = collect_slot_points(model, corpus);
  std::size_t expected = 0;
  for (const auto& s : corpus) expected += 3 * s.n_queries();
  EXPECT_EQ(points.size(), expected);
  for (const auto& p : points) {
    EXPECT_GE(p.center, 0.0);
    EXPECT_LE(p.center, 1.0);
    EXPECT_GE(p.width, 0.0);
    EXPECT_LT(p.slot, 6u);
  }
  EXPECT_NE(render_pred_dist_svg(points, 6).find("</svg>"), std::string::npos);
  std::vector<CurveRow> curve(50);
  for (std::size_t i = 0; i < 50; ++i) curve[i] = {i, 1e-4, 1.0, 1.0, 1.0 / (1 + i), 3.0, 0.5};
  const std::string svg = render_curves_svg(curve, analyze_phases(curve));
  EXPECT_NE(svg.find("set_guidance"), std::string::npos);
}
