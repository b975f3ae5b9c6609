#include "mos/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "mos/checkpoint.hpp"
#include "mos/errors.hpp"

namespace mos {
namespace {

constexpr char kEmbeddingMagic[8] = {'M', 'O', 'S', 'E', 'M', 'B', '\0', '\0'};
constexpr std::uint64_t kThemeStream = 0x7468656d65ULL;
constexpr std::uint64_t kUserStreamBase = 0x1000000ULL;

Matrix theme_centers(const SyntheticConfig& cfg, RngStream& rng) {
  Matrix c(cfg.themes, cfg.dim);
  for (std::size_t k = 0; k < cfg.themes; ++k) {
    auto row = c.row(k);
    for (;;) {
      for (double& v : row) v = rng.normal();
      // Gram-Schmidt against earlier centers while an orthogonal direction
      // still exists.
      if (k < cfg.dim) {
        for (std::size_t j = 0; j < k; ++j) {
          const double proj = dot(row, c.row(j));
          axpy(-proj, c.row(j), row);
        }
      }
      const double n = norm(row);
      if (n > 1e-6) {
        for (double& v : row) v /= n;
        break;
      }
    }
  }
  return c;
}

std::size_t geometric_length(double mean, RngStream& rng) {
  if (mean <= 1.0) return 1;
  const double q = 1.0 / mean;
  const double u = 1.0 - rng.uniform();  // (0, 1]
  return 1 + static_cast<std::size_t>(std::floor(std::log(u) / std::log1p(-q)));
}

std::uint32_t other_theme_uniform(std::uint32_t current, std::size_t themes, RngStream& rng) {
  std::size_t pick = rng.index(themes - 1);
  if (pick >= current) ++pick;
  return static_cast<std::uint32_t>(pick);
}

ItemId item_of_theme(std::uint32_t theme, const SyntheticConfig& cfg, RngStream& rng) {
  return static_cast<ItemId>(theme * cfg.items_per_theme + rng.index(cfg.items_per_theme));
}

[[noreturn]] void parse_fail(const std::filesystem::path& path, std::size_t line, const std::string& why) {
  throw ParseError(path.string() + ":" + std::to_string(line) + ": " + why);
}

template <class T>
T parse_number(std::string_view field, const std::filesystem::path& path, std::size_t line,
               const char* what) {
  T v{};
  auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
  if (ec != std::errc() || ptr != field.data() + field.size()) {
    parse_fail(path, line, std::string("bad ") + what + " '" + std::string(field) + "'");
  }
  return v;
}

std::map<std::string, std::string> read_meta(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::map<std::string, std::string> kv;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) parse_fail(path, n, "expected key=value");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

}  // namespace

void validate(const SyntheticConfig& cfg) {
  if (cfg.themes < 2) throw ArgumentError("synthetic data needs at least 2 themes");
  if (cfg.items_per_theme < 1) throw ArgumentError("items_per_theme must be positive");
  if (cfg.dim < 1) throw ArgumentError("embedding dim must be positive");
  if (!(cfg.sigma >= 0.0) || !std::isfinite(cfg.sigma)) throw ArgumentError("sigma must be >= 0");
  if (!(cfg.mean_session_length >= 1.0)) throw ArgumentError("mean session length must be >= 1");
  if (!(cfg.p_switch >= 0.0 && cfg.p_switch <= 1.0)) throw ArgumentError("p_switch must lie in [0, 1]");
  if (!(cfg.beta >= 0.0) || !std::isfinite(cfg.beta)) throw ArgumentError("beta must be >= 0");
  if (cfg.max_sequence < 1) throw ArgumentError("max sequence length must be positive");
  if (cfg.users < 1) throw ArgumentError("user count must be positive");
  if (!(cfg.label_noise >= 0.0 && cfg.label_noise < 0.5)) {
    throw ArgumentError("label noise must lie in [0, 0.5)");
  }
}

std::vector<Impression> build_impressions(std::vector<Interaction>& rows, std::size_t max_sequence) {
  std::stable_sort(rows.begin(), rows.end(), [](const Interaction& a, const Interaction& b) {
    if (a.user != b.user) return a.user < b.user;
    return a.timestamp < b.timestamp;
  });
  std::vector<Impression> out;
  std::size_t begin = 0;
  while (begin < rows.size()) {
    std::size_t end = begin;
    while (end < rows.size() && rows[end].user == rows[begin].user) ++end;
    for (std::size_t r = begin + 1; r < end; ++r) {
      if (rows[r].label == kUnlabeled) continue;
      Impression imp;
      imp.user = rows[r].user;
      const std::size_t from = r - begin > max_sequence ? r - max_sequence : begin;
      for (std::size_t p = from; p < r; ++p) imp.sequence.push_back(rows[p].item);
      imp.target = rows[r].item;
      imp.label = rows[r].label;
      out.push_back(std::move(imp));
    }
    begin = end;
  }
  return out;
}

LabeledDataset generate_synthetic(const SyntheticConfig& cfg) {
  validate(cfg);
  RngStream theme_rng(cfg.seed, kThemeStream);
  GroundTruth truth;
  truth.theme_centers = theme_centers(cfg, theme_rng);
  const std::size_t vocab = cfg.themes * cfg.items_per_theme;
  truth.item_vectors = Matrix(vocab, cfg.dim);
  truth.item_theme.resize(vocab);
  for (std::size_t item = 0; item < vocab; ++item) {
    const std::size_t theme = item / cfg.items_per_theme;
    truth.item_theme[item] = static_cast<std::uint32_t>(theme);
    auto row = truth.item_vectors.row(item);
    for (std::size_t j = 0; j < cfg.dim; ++j) {
      row[j] = truth.theme_centers(theme, j) + cfg.sigma * theme_rng.normal();
    }
    const double n = norm(row);
    for (double& v : row) v /= n;
  }

  LabeledDataset data;
  data.vocab_size = vocab;
  data.max_sequence = cfg.max_sequence;
  data.users = cfg.users;
  data.seed = cfg.seed;
  data.themes = cfg.themes;
  const std::size_t events = cfg.max_sequence + cfg.impressions_per_user * (cfg.impression_gap + 1);
  truth.event_themes.resize(cfg.users);
  truth.session_boundaries.resize(cfg.users);
  truth.segment_themes.resize(cfg.users);

  for (std::size_t u = 0; u < cfg.users; ++u) {
    RngStream rng(cfg.seed, kUserStreamBase + u);
    std::vector<std::uint32_t>& themes = truth.event_themes[u];
    std::vector<std::uint32_t>& segments = truth.segment_themes[u];
    // Session index at which each theme was last active; -1 if never.
    std::vector<long> last_visit(cfg.themes, -1);
    long session = 0;
    std::uint32_t current = static_cast<std::uint32_t>(rng.index(cfg.themes));
    last_visit[current] = 0;
    while (themes.size() < events) {
      segments.push_back(current);
      const std::size_t len = geometric_length(cfg.mean_session_length, rng);
      for (std::size_t i = 0; i < len && themes.size() < events; ++i) themes.push_back(current);
      if (themes.size() >= events) break;
      if (rng.bernoulli(cfg.p_switch)) {
        ++session;
        std::vector<double> weights(cfg.themes, 0.0);
        for (std::size_t j = 0; j < cfg.themes; ++j) {
          if (j == current) continue;
          const double recency =
              last_visit[j] < 0 ? 0.0 : 1.0 / static_cast<double>(session - last_visit[j]);
          weights[j] = std::exp(cfg.beta * recency);
        }
        current = static_cast<std::uint32_t>(rng.categorical(weights));
        last_visit[current] = session;
      }
    }
    for (std::size_t p = 1; p < themes.size(); ++p) {
      if (themes[p] != themes[p - 1]) truth.session_boundaries[u].push_back(p);
    }

    for (std::size_t p = 0; p < events; ++p) {
      Interaction row;
      row.user = static_cast<UserId>(u);
      row.timestamp = static_cast<std::int64_t>(p);
      const bool labeled =
          p >= cfg.max_sequence && (p - cfg.max_sequence) % (cfg.impression_gap + 1) == cfg.impression_gap;
      if (!labeled) {
        row.item = item_of_theme(themes[p], cfg, rng);
      } else {
        const bool positive_draw = rng.bernoulli(0.5);
        const std::uint32_t theme =
            positive_draw ? themes[p] : other_theme_uniform(themes[p], cfg.themes, rng);
        row.item = item_of_theme(theme, cfg, rng);
        int label = positive_draw ? 1 : 0;
        if (rng.bernoulli(cfg.label_noise)) label = 1 - label;
        row.label = label;
      }
      data.interactions.push_back(row);
    }
  }
  data.impressions = build_impressions(data.interactions, cfg.max_sequence);
  data.item_embeddings = truth.item_vectors;
  data.truth = std::move(truth);
  return data;
}

LabeledDataset ingest_tsv(const std::filesystem::path& path,
                          const std::optional<std::filesystem::path>& embeddings,
                          std::size_t max_sequence) {
  if (max_sequence < 1) throw ArgumentError("max sequence length must be positive");
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string() + " for reading");
  LabeledDataset data;
  data.max_sequence = max_sequence;
  std::string line;
  std::size_t line_no = 0;
  std::size_t max_item = 0;
  bool any = false;
  std::size_t users = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line_no == 1 && line.rfind("user_id", 0) == 0) continue;
    std::string_view rest(line);
    std::string_view fields[4];
    for (int f = 0; f < 4; ++f) {
      const auto tab = rest.find('\t');
      if (f < 3) {
        if (tab == std::string_view::npos) parse_fail(path, line_no, "expected 4 tab-separated fields");
        fields[f] = rest.substr(0, tab);
        rest.remove_prefix(tab + 1);
      } else {
        if (tab != std::string_view::npos) parse_fail(path, line_no, "expected 4 tab-separated fields");
        fields[f] = rest;
      }
    }
    Interaction row;
    row.user = parse_number<UserId>(fields[0], path, line_no, "user_id");
    row.item = parse_number<ItemId>(fields[1], path, line_no, "item_id");
    row.timestamp = parse_number<std::int64_t>(fields[2], path, line_no, "timestamp");
    row.label = parse_number<int>(fields[3], path, line_no, "label");
    if (row.label != 0 && row.label != 1 && row.label != kUnlabeled) {
      parse_fail(path, line_no, "label must be 0, 1 or -1");
    }
    max_item = std::max<std::size_t>(max_item, row.item);
    users = std::max<std::size_t>(users, static_cast<std::size_t>(row.user) + 1);
    any = true;
    data.interactions.push_back(row);
  }
  data.vocab_size = any ? max_item + 1 : 0;
  data.users = users;
  data.impressions = build_impressions(data.interactions, max_sequence);
  if (embeddings) {
    data.item_embeddings = read_embeddings(*embeddings);
    if (data.item_embeddings->rows() < data.vocab_size) {
      throw CompatibilityError("embedding file has " + std::to_string(data.item_embeddings->rows()) +
                               " rows but the log references item " + std::to_string(max_item));
    }
    data.vocab_size = data.item_embeddings->rows();
  }
  return data;
}

void write_embeddings(const std::filesystem::path& path, const Matrix& m) {
  std::vector<char> bytes(std::begin(kEmbeddingMagic), std::end(kEmbeddingMagic));
  append_u64(bytes, m.rows());
  append_u64(bytes, m.cols());
  for (double v : m.data()) append_f64(bytes, v);
  write_file_bytes(path, bytes);
}

Matrix read_embeddings(const std::filesystem::path& path) {
  const std::vector<char> bytes = read_file_bytes(path);
  ByteReader in(bytes);
  const std::string magic = in.bytes(sizeof(kEmbeddingMagic));
  if (std::memcmp(magic.data(), kEmbeddingMagic, sizeof(kEmbeddingMagic)) != 0) {
    throw ParseError(path.string() + ": not an embedding file (bad magic)");
  }
  const std::uint64_t rows = in.u64();
  const std::uint64_t cols = in.u64();
  if (rows * cols * 8 > bytes.size()) throw ParseError(path.string() + ": truncated embedding file");
  std::vector<double> values(rows * cols);
  for (double& v : values) v = in.f64();
  if (!in.done()) throw ParseError(path.string() + ": trailing bytes in embedding file");
  return Matrix(rows, cols, std::move(values));
}

void export_dataset(const LabeledDataset& data, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  {
    std::ofstream out(dir / "interactions.tsv", std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + (dir / "interactions.tsv").string());
    out << "user_id\titem_id\ttimestamp\tlabel\n";
    for (const Interaction& r : data.interactions) {
      out << r.user << '\t' << r.item << '\t' << r.timestamp << '\t' << r.label << '\n';
    }
    if (!out) throw IoError("write failed for interactions.tsv");
  }
  {
    std::ofstream out(dir / "meta.txt", std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + (dir / "meta.txt").string());
    out << "seed=" << data.seed << '\n'
        << "K=" << data.themes << '\n'
        << "N=" << data.max_sequence << '\n'
        << "users=" << data.users << '\n'
        << "items=" << data.vocab_size << '\n'
        << "interactions=" << data.interactions.size() << '\n'
        << "impressions=" << data.impressions.size() << '\n';
    if (!out) throw IoError("write failed for meta.txt");
  }
  if (data.truth) {
    std::ofstream out(dir / "item_themes.tsv", std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + (dir / "item_themes.tsv").string());
    for (std::size_t i = 0; i < data.truth->item_theme.size(); ++i) {
      out << i << '\t' << data.truth->item_theme[i] << '\n';
    }
  }
  if (data.item_embeddings) write_embeddings(dir / "item_vectors.bin", *data.item_embeddings);
}

LabeledDataset load_dataset(const std::filesystem::path& dir) {
  if (!std::filesystem::exists(dir / "meta.txt")) {
    throw IoError("dataset directory " + dir.string() + " has no meta.txt");
  }
  const auto meta = read_meta(dir / "meta.txt");
  auto get = [&](const std::string& key) -> std::uint64_t {
    auto it = meta.find(key);
    if (it == meta.end()) throw ParseError("meta.txt is missing key '" + key + "'");
    std::uint64_t v = 0;
    auto [ptr, ec] = std::from_chars(it->second.data(), it->second.data() + it->second.size(), v);
    if (ec != std::errc() || ptr != it->second.data() + it->second.size()) {
      throw ParseError("meta.txt has a bad value for '" + key + "'");
    }
    return v;
  };
  const std::filesystem::path vectors = dir / "item_vectors.bin";
  std::optional<std::filesystem::path> emb;
  if (std::filesystem::exists(vectors)) emb = vectors;
  LabeledDataset data = ingest_tsv(dir / "interactions.tsv", emb, get("N"));
  data.seed = get("seed");
  data.themes = get("K");
  data.users = std::max<std::size_t>(data.users, get("users"));
  data.vocab_size = std::max<std::size_t>(data.vocab_size, get("items"));
  const std::filesystem::path themes_path = dir / "item_themes.tsv";
  if (std::filesystem::exists(themes_path)) {
    GroundTruth truth;
    truth.item_theme.assign(data.vocab_size, 0);
    std::ifstream in(themes_path);
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
      ++n;
      if (line.empty()) continue;
      const auto tab = line.find('\t');
      if (tab == std::string::npos) parse_fail(themes_path, n, "expected item_id TAB theme");
      const auto item = parse_number<std::size_t>(std::string_view(line).substr(0, tab), themes_path, n, "item_id");
      const auto theme = parse_number<std::uint32_t>(std::string_view(line).substr(tab + 1), themes_path, n, "theme");
      if (item >= truth.item_theme.size()) parse_fail(themes_path, n, "item id outside vocabulary");
      truth.item_theme[item] = theme;
    }
    if (data.item_embeddings) truth.item_vectors = *data.item_embeddings;
    data.truth = std::move(truth);
  }
  return data;
}

DatasetSplit split(std::span<const Impression> impressions, const SplitRatios& ratios) {
  if (!(ratios.train >= 0.0 && ratios.validation >= 0.0 && ratios.test >= 0.0) ||
      std::abs(ratios.train + ratios.validation + ratios.test - 1.0) > 1e-9 || !(ratios.train > 0.0)) {
    throw ArgumentError("split ratios must be nonnegative, with positive train share, and sum to 1");
  }
  DatasetSplit out;
  std::size_t begin = 0;
  while (begin < impressions.size()) {
    std::size_t end = begin;
    while (end < impressions.size() && impressions[end].user == impressions[begin].user) ++end;
    const std::size_t m = end - begin;
    auto share = [&](double r) {
      if (r <= 0.0) return std::size_t{0};
      auto c = static_cast<std::size_t>(std::llround(static_cast<double>(m) * r));
      return std::max<std::size_t>(c, m >= 3 ? 1 : 0);
    };
    std::size_t n_test = share(ratios.test);
    std::size_t n_val = share(ratios.validation);
    while (n_test + n_val >= m && (n_test > 0 || n_val > 0) && m > 0) {
      if (n_val >= n_test && n_val > 0) {
        --n_val;
      } else {
        --n_test;
      }
    }
    const std::size_t n_train = m - n_val - n_test;
    for (std::size_t i = 0; i < m; ++i) {
      const Impression& imp = impressions[begin + i];
      if (i < n_train) {
        out.train.push_back(imp);
      } else if (i < n_train + n_val) {
        out.validation.push_back(imp);
      } else {
        out.test.push_back(imp);
      }
    }
    begin = end;
  }
  return out;
}

}  // namespace mos
