#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>

#include "model_fixtures.hpp"
#include "mos/analysis.hpp"
#include "mos/errors.hpp"

namespace mos {
namespace {

namespace fs = std::filesystem;

// Consecutive blocks along orthogonal axes: block b is the unit vector e_b.
std::vector<Vector> blocks(const std::vector<std::size_t>& lengths, std::size_t dim) {
  std::vector<Vector> seq;
  for (std::size_t b = 0; b < lengths.size(); ++b) {
    Vector e(dim, 0.0);
    e[b % dim] = 1.0;
    seq.insert(seq.end(), lengths[b], e);
  }
  return seq;
}

std::string read_all(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

TEST(SelfSimilarity, IdenticalEmbeddingsGiveAllOnes) {
  const std::vector<Vector> seq(4, Vector{0.3, -1.2, 2.0});
  const SimilarityMatrix m = self_similarity(seq);
  for (double v : m.values.data()) EXPECT_NEAR(v, 1.0, 1e-12);
}

TEST(SelfSimilarity, OrthogonalBlocksGiveBlockStructure) {
  const SimilarityMatrix m = self_similarity(blocks({2, 3}, 4));
  for (std::size_t i = 0; i < 5; ++i) {
    for (std::size_t j = 0; j < 5; ++j) EXPECT_EQ(m.values(i, j), ((i < 2) == (j < 2)) ? 1.0 : 0.0);
  }
}

TEST(SelfSimilarity, SymmetricWithUnitDiagonal) {
  RngStream rng(1, 0);
  for (int trial = 0; trial < 20; ++trial) {
    const auto seq = testing::random_sequence(rng, 1 + rng.index(30), 6);
    const SimilarityMatrix m = self_similarity(seq);
    EXPECT_NO_THROW(check_similarity_invariants(m));
    for (std::size_t i = 0; i < seq.size(); ++i) {
      EXPECT_NEAR(m.values(i, i), 1.0, 1e-12);
      for (std::size_t j = 0; j < seq.size(); ++j) EXPECT_NEAR(m.values(i, j), m.values(j, i), 1e-12);
    }
  }
}

TEST(SelfSimilarity, ZeroEmbeddingIsADomainError) {
  const std::vector<Vector> seq{{1.0, 0.0}, {0.0, 0.0}};
  try {
    self_similarity(seq);
    FAIL() << "expected DomainError";
  } catch (const DomainError& e) {
    EXPECT_NE(std::string(e.what()).find('1'), std::string::npos);
  }
}

TEST(DetectSessions, TwoOrthogonalBlocks) {
  const SimilarityMatrix m = self_similarity(blocks({10, 10}, 2));
  EXPECT_EQ(detect_sessions(m, 3, 0.5), (std::vector<std::size_t>{10}));
}

TEST(DetectSessions, ConstantSequenceHasNoBoundaries) {
  const SimilarityMatrix m = self_similarity(std::vector<Vector>(20, Vector{1.0, 2.0}));
  EXPECT_TRUE(detect_sessions(m, 3, 0.5).empty());
}

TEST(DetectSessions, SeveralBlocks) {
  const SimilarityMatrix m = self_similarity(blocks({6, 8, 5, 7}, 4));
  EXPECT_EQ(detect_sessions(m), (std::vector<std::size_t>{6, 14, 19}));
}

TEST(DetectSessions, SessionAsLongAsTheWindowKeepsBothBoundaries) {
  const SimilarityMatrix m = self_similarity(blocks({6, 3, 6}, 3));
  EXPECT_EQ(detect_sessions(m, 3, 0.35), (std::vector<std::size_t>{6, 9}));
}

TEST(DetectSessions, ShortSequencesAndBadArguments) {
  const SimilarityMatrix m = self_similarity(blocks({2, 2}, 2));
  EXPECT_TRUE(detect_sessions(m, 3, 0.5).empty());  // no room for two windows of 3
  EXPECT_EQ(detect_sessions(m, 2, 0.5), (std::vector<std::size_t>{2}));
  EXPECT_THROW(detect_sessions(m, 0, 0.5), ArgumentError);
  EXPECT_THROW(detect_sessions(m, 2, 1.0), ArgumentError);
}

TEST(MatchBoundaries, CountsWithinTolerance) {
  const std::vector<std::size_t> detected{5, 11, 30};
  const std::vector<std::size_t> truth{4, 12, 20};
  const BoundaryMatch r = match_boundaries(detected, truth, 1);
  EXPECT_EQ(r.recovered, 2u);
  EXPECT_EQ(r.false_detections, 1u);
  EXPECT_NEAR(r.recall(), 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(r.false_rate(), 1.0 / 3.0, 1e-15);
  const BoundaryMatch exact = match_boundaries(detected, truth, 0);
  EXPECT_EQ(exact.recovered, 0u);
  EXPECT_EQ(match_boundaries({}, {}, 1).recall(), 1.0);
}

TEST(DetectSessions, RecoversGeneratedSessionsFromThemeVectors) {
  SyntheticConfig c;
  c.items_per_theme = 20;
  c.dim = 16;
  c.sigma = 0.0;
  c.mean_session_length = 12.0;
  c.max_sequence = 150;
  c.users = 10;
  c.impressions_per_user = 1;
  const LabeledDataset d = generate_synthetic(c);
  std::size_t truth_total = 0;
  std::size_t recovered = 0;
  for (std::size_t u = 0; u < c.users; ++u) {
    std::vector<Vector> seq;
    for (std::size_t p = 0; p < c.max_sequence; ++p) {
      seq.push_back(d.truth->item_vectors.row_vector(d.interactions[u * d.interactions.size() / c.users + p].item));
    }
    std::vector<std::size_t> truth;
    for (std::size_t b : d.truth->session_boundaries[u]) {
      if (b < c.max_sequence) truth.push_back(b);
    }
    const auto detected = detect_sessions(self_similarity(seq), 3, 0.5);
    const BoundaryMatch r = match_boundaries(detected, truth, 1);
    // Orthogonal themes: every detection sits at a real theme change.
    EXPECT_EQ(r.false_detections, 0u) << "user " << u;
    truth_total += r.truth;
    recovered += r.recovered;
  }
  // Runs shorter than the window merge with their neighbours and are missed.
  EXPECT_GE(static_cast<double>(recovered) / static_cast<double>(truth_total), 0.8);
}

TEST(Heatmap, IdentityGivesBrightDiagonal) {
  const fs::path dir = fs::temp_directory_path() / "mos_heatmap";
  fs::create_directories(dir);
  SimilarityMatrix m{Matrix(2, 2), {}};
  m.values(0, 0) = 1.0;
  m.values(1, 1) = 1.0;
  export_heatmap(m, dir / "id");
  const std::string pgm = read_all(dir / "id.pgm");
  const std::string header = "P5\n2 2\n255\n";
  ASSERT_EQ(pgm.size(), header.size() + 4);
  EXPECT_EQ(pgm.substr(0, header.size()), header);
  const auto px = [&](std::size_t i) { return static_cast<unsigned char>(pgm[header.size() + i]); };
  EXPECT_EQ(px(0), 255);
  EXPECT_EQ(px(3), 255);
  EXPECT_LT(px(1), 255);
  EXPECT_EQ(read_matrix_csv(dir / "id.csv").data(), m.values.data());
  fs::remove_all(dir);
}

TEST(Heatmap, AllOnesIsUniformAndBoundariesAddSeparators) {
  const fs::path dir = fs::temp_directory_path() / "mos_heatmap_ones";
  fs::create_directories(dir);
  SimilarityMatrix m = self_similarity(std::vector<Vector>(3, Vector{1.0}));
  export_heatmap(m, dir / "ones");
  const std::string header = "P5\n3 3\n255\n";
  EXPECT_EQ(read_all(dir / "ones.pgm"), header + std::string(9, static_cast<char>(255)));

  m.boundaries = {1};
  export_heatmap(m, dir / "split");
  const std::string pgm = read_all(dir / "split.pgm");
  ASSERT_EQ(pgm.size(), std::string("P5\n4 4\n255\n").size() + 16);
  const std::string px = pgm.substr(pgm.size() - 16);
  for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(px[4 + c], '\0');  // separator row
  EXPECT_EQ(static_cast<unsigned char>(px[0]), 255);
  EXPECT_THROW(export_heatmap(m, dir / "missing" / "x"), IoError);
  fs::remove_all(dir);
}

TEST(Heatmap, CsvRoundTripsRandomMatrices) {
  const fs::path dir = fs::temp_directory_path() / "mos_heatmap_rt";
  fs::create_directories(dir);
  RngStream rng(5, 0);
  const SimilarityMatrix m = self_similarity(testing::random_sequence(rng, 7, 3));
  export_heatmap(m, dir / "r");
  EXPECT_EQ(read_matrix_csv(dir / "r.csv").data(), m.values.data());
  fs::remove_all(dir);
}

LabeledDataset log_of(const std::vector<ItemId>& items) {
  LabeledDataset d;
  for (std::size_t i = 0; i < items.size(); ++i) {
    d.interactions.push_back({0, items[i], static_cast<std::int64_t>(i), kUnlabeled});
  }
  return d;
}

TEST(RoutingHistogram, CountsSumToOccurrencesTimesK) {
  for (std::size_t k : {1u, 2u}) {
    ModelConfig c = testing::tiny_config();
    c.experts = 3;
    c.k = k;
    RngStream rng(2, 0);
    const MosModel m = testing::random_model(c, rng);
    std::vector<ItemId> items;
    for (int r = 0; r < 10; ++r) {
      for (ItemId i = 0; i <= static_cast<ItemId>(r % 8); ++i) items.push_back(i);
    }
    const RoutingReport rep = routing_histogram(m, log_of(items), 8);
    ASSERT_FALSE(rep.items.empty());
    for (const RoutingHistogram& h : rep.items) {
      EXPECT_GE(h.occurrences, 8u);
      EXPECT_EQ(std::accumulate(h.dispatch.begin(), h.dispatch.end(), std::uint64_t{0}), h.occurrences * k);
      if (k == 1) EXPECT_EQ(h.modal_share(), 1.0);  // deterministic router
    }
    for (std::size_t i = 1; i < rep.items.size(); ++i) EXPECT_LT(rep.items[i - 1].item, rep.items[i].item);
    EXPECT_EQ(rep.items[*rep.most_frequent].item, 0u);
    EXPECT_EQ(rep.items[*rep.most_frequent].occurrences, 10u);
    EXPECT_EQ(rep.items[*rep.least_frequent].occurrences, 8u);
  }
}

TEST(RoutingHistogram, FiltersRareItems) {
  RngStream rng(2, 0);
  const MosModel m = testing::random_model(testing::tiny_config(), rng);
  const RoutingReport rep = routing_histogram(m, log_of({1, 1, 2}), 3);
  EXPECT_TRUE(rep.items.empty());
  EXPECT_FALSE(rep.most_frequent.has_value());
  EXPECT_EQ(routing_histogram(m, log_of({1, 1, 2}), 2).items.size(), 1u);
}

TEST(RoutingHistogram, ThemePurityOfAThemeAlignedRouter) {
  RngStream rng(4, 0);
  const MosModel m = testing::random_model(testing::tiny_config(), rng);
  // Each "theme" is the set of items the router sends to one expert, so
  // purity is exactly one.
  std::vector<std::uint32_t> theme(m.config.vocab_size);
  std::vector<ItemId> items;
  for (ItemId i = 0; i < m.config.vocab_size; ++i) {
    const ItemId ids[1] = {i};
    theme[i] = static_cast<std::uint32_t>(route(m.item.router, embed(m.embedding, ids)[0]).gate.support[0]);
    items.push_back(i);
  }
  EXPECT_EQ(theme_routing_purity(m, log_of(items), theme), 1.0);
}

}  // namespace
}  // namespace mos
