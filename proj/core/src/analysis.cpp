#include "mos/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "mos/errors.hpp"

namespace mos {

SimilarityMatrix self_similarity(std::span<const Vector> seq) {
  const std::size_t t = seq.size();
  std::vector<double> norms(t);
  for (std::size_t i = 0; i < t; ++i) {
    norms[i] = norm(seq[i]);
    if (!(norms[i] > 1e-12)) {
      throw DomainError("self_similarity: embedding at position " + std::to_string(i) + " has zero norm");
    }
  }
  SimilarityMatrix m;
  m.values = Matrix(t, t);
  for (std::size_t i = 0; i < t; ++i) {
    m.values(i, i) = 1.0;
    for (std::size_t j = i + 1; j < t; ++j) {
      const double c = std::clamp(dot(seq[i], seq[j]) / (norms[i] * norms[j]), -1.0, 1.0);
      m.values(i, j) = c;
      m.values(j, i) = c;
    }
  }
  return m;
}

void check_similarity_invariants(const SimilarityMatrix& m) {
  const std::size_t t = m.values.rows();
  if (m.values.cols() != t) throw DomainError("similarity matrix is not square");
  for (std::size_t i = 0; i < t; ++i) {
    if (std::abs(m.values(i, i) - 1.0) > 1e-12) {
      throw DomainError("similarity matrix diagonal differs from 1 at " + std::to_string(i));
    }
    for (std::size_t j = i + 1; j < t; ++j) {
      if (std::abs(m.values(i, j) - m.values(j, i)) > 1e-12) {
        throw DomainError("similarity matrix is not symmetric at (" + std::to_string(i) + ", " +
                          std::to_string(j) + ")");
      }
    }
  }
}

std::vector<std::size_t> detect_sessions(const SimilarityMatrix& m, std::size_t w, double tau) {
  if (w < 1) throw ArgumentError("detect_sessions: window must be >= 1");
  if (!(tau > -1.0 && tau < 1.0)) throw ArgumentError("detect_sessions: threshold must lie in (-1, 1)");
  const std::size_t t = m.values.rows();
  struct Candidate {
    std::size_t position;
    double contrast;
  };
  std::vector<Candidate> candidates;
  for (std::size_t p = w; p + w <= t; ++p) {
    double s = 0.0;
    for (std::size_t i = p - w; i < p; ++i) {
      for (std::size_t j = p; j < p + w; ++j) s += m.values(i, j);
    }
    const double mean = s / static_cast<double>(w * w);
    if (mean < tau) candidates.push_back({p, mean});
  }
  // Greedy suppression: keep the lowest-contrast candidate, drop candidates
  // closer than w to it, repeat. Boundaries exactly w apart both survive so a
  // session of length w stays resolvable.
  std::vector<Candidate> order = candidates;
  std::stable_sort(order.begin(), order.end(),
                   [](const Candidate& a, const Candidate& b) { return a.contrast < b.contrast; });
  std::vector<std::size_t> kept;
  for (const Candidate& c : order) {
    const bool near = std::any_of(kept.begin(), kept.end(), [&](std::size_t k) {
      return (k > c.position ? k - c.position : c.position - k) < w;
    });
    if (!near) kept.push_back(c.position);
  }
  std::sort(kept.begin(), kept.end());
  return kept;
}

BoundaryMatch match_boundaries(std::span<const std::size_t> detected, std::span<const std::size_t> truth,
                               std::size_t tolerance) {
  auto close = [&](std::size_t a, std::size_t b) { return (a > b ? a - b : b - a) <= tolerance; };
  BoundaryMatch r;
  r.truth = truth.size();
  r.detected = detected.size();
  for (std::size_t b : truth) {
    if (std::any_of(detected.begin(), detected.end(), [&](std::size_t d) { return close(b, d); })) ++r.recovered;
  }
  for (std::size_t d : detected) {
    if (std::none_of(truth.begin(), truth.end(), [&](std::size_t b) { return close(b, d); })) ++r.false_detections;
  }
  return r;
}

std::size_t RoutingHistogram::modal_expert() const {
  return static_cast<std::size_t>(std::max_element(dispatch.begin(), dispatch.end()) - dispatch.begin());
}

double RoutingHistogram::modal_share() const {
  if (occurrences == 0) return 0.0;
  return static_cast<double>(dispatch[modal_expert()]) / static_cast<double>(occurrences);
}

RoutingReport routing_histogram(const MosModel& model, const LabeledDataset& data,
                                std::uint64_t min_occurrences) {
  const std::size_t n = model.item.num_experts();
  std::map<ItemId, RoutingHistogram> tally;
  std::map<ItemId, GateVector> cache;
  for (const Interaction& row : data.interactions) {
    auto it = cache.find(row.item);
    if (it == cache.end()) {
      const ItemId ids[1] = {row.item};
      const Vector x = embed(model.embedding, ids)[0];
      it = cache.emplace(row.item, route(model.item.router, x).gate).first;
    }
    RoutingHistogram& h = tally[row.item];
    if (h.dispatch.empty()) {
      h.item = row.item;
      h.dispatch.assign(n, 0);
    }
    ++h.occurrences;
    for (std::size_t i : it->second.support) ++h.dispatch[i];
  }
  RoutingReport report;
  for (auto& [id, h] : tally) {
    if (h.occurrences >= min_occurrences) report.items.push_back(std::move(h));
  }
  for (std::size_t i = 0; i < report.items.size(); ++i) {
    const auto occ = report.items[i].occurrences;
    if (!report.most_frequent || occ > report.items[*report.most_frequent].occurrences) report.most_frequent = i;
    if (!report.least_frequent || occ < report.items[*report.least_frequent].occurrences) report.least_frequent = i;
  }
  return report;
}

double theme_routing_purity(const MosModel& model, const LabeledDataset& data,
                            std::span<const std::uint32_t> item_theme) {
  const std::size_t n = model.item.num_experts();
  const RoutingReport all = routing_histogram(model, data, 1);
  std::map<std::uint32_t, std::vector<std::uint64_t>> per_theme;
  for (const RoutingHistogram& h : all.items) {
    if (h.item >= item_theme.size()) throw LookupError("no theme recorded for item " + std::to_string(h.item));
    auto& counts = per_theme[item_theme[h.item]];
    if (counts.empty()) counts.assign(n, 0);
    for (std::size_t i = 0; i < n; ++i) counts[i] += h.dispatch[i];
  }
  if (per_theme.empty()) throw ArgumentError("theme_routing_purity: no interactions");
  double sum = 0.0;
  for (const auto& [theme, counts] : per_theme) {
    std::uint64_t total = 0;
    for (auto c : counts) total += c;
    sum += static_cast<double>(*std::max_element(counts.begin(), counts.end())) / static_cast<double>(total);
  }
  return sum / static_cast<double>(per_theme.size());
}

void export_heatmap(const SimilarityMatrix& m, const std::filesystem::path& stem) {
  const std::size_t t = m.values.rows();
  std::filesystem::path csv = stem;
  csv += ".csv";
  std::filesystem::path pgm = stem;
  pgm += ".pgm";
  {
    std::ofstream out(csv, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + csv.string());
    for (std::size_t i = 0; i < t; ++i) {
      for (std::size_t j = 0; j < t; ++j) out << (j ? "," : "") << format_real(m.values(i, j));
      out << '\n';
    }
    if (!out) throw IoError("write failed for " + csv.string());
  }
  // Raster coordinates: one extra black line before every boundary.
  std::vector<long> source;  // -1 marks a separator
  for (std::size_t i = 0; i < t; ++i) {
    if (std::find(m.boundaries.begin(), m.boundaries.end(), i) != m.boundaries.end()) source.push_back(-1);
    source.push_back(static_cast<long>(i));
  }
  const std::size_t side = source.size();
  std::string pixels(side * side, '\0');
  for (std::size_t r = 0; r < side; ++r) {
    for (std::size_t c = 0; c < side; ++c) {
      if (source[r] < 0 || source[c] < 0) continue;
      const double v = std::clamp(m.values(static_cast<std::size_t>(source[r]), static_cast<std::size_t>(source[c])), -1.0, 1.0);
      pixels[r * side + c] = static_cast<char>(static_cast<unsigned char>(std::lround((v + 1.0) * 127.5)));
    }
  }
  std::ofstream out(pgm, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + pgm.string());
  out << "P5\n" << side << ' ' << side << "\n255\n";
  out.write(pixels.data(), static_cast<std::streamsize>(pixels.size()));
  if (!out) throw IoError("write failed for " + pgm.string());
}

Matrix read_matrix_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<Vector> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    Vector row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) row.push_back(std::strtod(cell.c_str(), nullptr));
    rows.push_back(std::move(row));
  }
  return Matrix::from_rows(rows);
}

}  // namespace mos
