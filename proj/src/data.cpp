#include "funcreg/data.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cctype>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <string_view>

#include "funcreg/augment.hpp"
#include "funcreg/error.hpp"
#include "funcreg/rng.hpp"

namespace funcreg {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Dataset

std::span<const double> Dataset::row(std::size_t i) const {
  if (i >= size()) {
    throw IndexError("dataset row " + std::to_string(i) + " out of range");
  }
  return std::span<const double>(features).subspan(i * dim, dim);
}

Tensor Dataset::features_tensor() const {
  if (empty()) {
    throw StateError("dataset '" + name + "' is empty");
  }
  return Tensor::from_data({size(), dim}, features);
}

Tensor Dataset::gather(std::span<const std::size_t> indices) const {
  std::vector<double> out;
  out.reserve(indices.size() * dim);
  for (std::size_t i : indices) {
    auto r = row(i);
    out.insert(out.end(), r.begin(), r.end());
  }
  return Tensor::from_data({indices.size(), dim}, std::move(out));
}

std::vector<std::size_t> Dataset::class_counts() const {
  std::vector<std::size_t> counts(num_classes, 0);
  for (int y : labels) {
    ++counts.at(static_cast<std::size_t>(y));
  }
  return counts;
}

// ---------------------------------------------------------------------------
// Templates

namespace {

constexpr std::array<std::string_view, kMaxTemplates> kTemplateArt{
    // ring
    "........"
    ".######."
    ".#....#."
    ".#....#."
    ".#....#."
    ".#....#."
    ".######."
    "........",
    // plus
    "...##..."
    "...##..."
    "...##..."
    "########"
    "########"
    "...##..."
    "...##..."
    "...##...",
    // diagonal cross
    "#......#"
    ".#....#."
    "..#..#.."
    "...##..."
    "...##..."
    "..#..#.."
    ".#....#."
    "#......#",
    // centre blob
    "........"
    "........"
    "..####.."
    "..####.."
    "..####.."
    "..####.."
    "........"
    "........",
    // upper bar
    "........"
    "########"
    "########"
    "........"
    "........"
    "........"
    "........"
    "........",
    // left bar
    ".##....."
    ".##....."
    ".##....."
    ".##....."
    ".##....."
    ".##....."
    ".##....."
    ".##.....",
    // corner blocks
    "##....##"
    "##....##"
    "........"
    "........"
    "........"
    "........"
    "##....##"
    "##....##",
    // lower-left triangle
    "#......."
    "##......"
    "###....."
    "####...."
    "#####..."
    "######.."
    "#######."
    "########",
    // T
    "########"
    "...##..."
    "...##..."
    "...##..."
    "...##..."
    "...##..."
    "...##..."
    "........",
    // diamond outline
    "...##..."
    "..#..#.."
    ".#....#."
    "#......#"
    "#......#"
    ".#....#."
    "..#..#.."
    "...##...",
    // lower-right blob
    "........"
    "........"
    "........"
    "........"
    "....###."
    "....###."
    "....###."
    "........",
    // dot pair
    "........"
    "........"
    "........"
    ".##..##."
    ".##..##."
    "........"
    "........"
    "........",
};

std::vector<double> texture_pattern(std::uint64_t seed, double amplitude) {
  Rng rng(derive_seed({seed, 0x7E57}));
  constexpr std::size_t side = 8;
  std::vector<double> raw(kGridValues);
  for (double& v : raw) {
    v = rng.normal();
  }
  std::vector<double> smooth(kGridValues, 0.0);
  for (std::size_t r = 0; r < side; ++r) {
    for (std::size_t c = 0; c < side; ++c) {
      double acc = 0.0;
      int count = 0;
      for (int dr = -1; dr <= 1; ++dr) {
        for (int dc = -1; dc <= 1; ++dc) {
          const auto rr = static_cast<long>(r) + dr;
          const auto cc = static_cast<long>(c) + dc;
          if (rr < 0 || cc < 0 || rr >= static_cast<long>(side) || cc >= static_cast<long>(side)) {
            continue;
          }
          acc += raw[static_cast<std::size_t>(rr) * side + static_cast<std::size_t>(cc)];
          ++count;
        }
      }
      smooth[r * side + c] = acc / count;
    }
  }
  double peak = 0.0;
  for (double v : smooth) {
    peak = std::max(peak, std::abs(v));
  }
  for (double& v : smooth) {
    v = peak > 0.0 ? amplitude * v / peak : 0.0;
  }
  return smooth;
}

void check_domain(const DomainSpec& d) {
  if (d.domain_id.empty()) {
    throw ConfigError("domain without domain_id");
  }
  if (!(d.noise_sigma >= 0.0) || !std::isfinite(d.noise_sigma)) {
    throw ConfigError("domain " + d.domain_id + ": noise_sigma must be finite and >= 0");
  }
  if (!std::isfinite(d.rotation_deg) || !std::isfinite(d.intensity_shift) ||
      !std::isfinite(d.texture_amplitude)) {
    throw ConfigError("domain " + d.domain_id + ": non-finite transform parameter");
  }
}

// OOD domain ids double as CSV file stems in a benchmark directory.
bool file_safe(const std::string& id) {
  if (id.empty() || id.front() == '.') {
    return false;
  }
  return std::all_of(id.begin(), id.end(), [](char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.';
  });
}

bool is_reserved_split_name(const std::string& id) {
  for (const char* name : {"pretrain", "pretrain_test", "id_train", "id_test", "heldout",
                           "benchmark"}) {
    if (id == name) {
      return true;
    }
  }
  return false;
}

// A split of n examples from one domain with balanced labels, in shuffled
// order. `classes` are the global template ids; labels index into it.
void append_examples(Dataset& out, const ShiftBenchmark& spec, const DomainSpec& domain,
                     std::span<const int> classes, std::size_t n, std::uint64_t stream) {
  Rng rng(stream);
  std::vector<std::vector<double>> rendered;
  rendered.reserve(classes.size());
  for (int c : classes) {
    rendered.push_back(render_domain(spec.templates.at(static_cast<std::size_t>(c)), domain));
  }
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    labels[i] = static_cast<int>(i % classes.size());
  }
  for (std::size_t i = n; i > 1; --i) {
    std::swap(labels[i - 1], labels[rng.index(i)]);
  }
  for (int y : labels) {
    std::vector<double> x = rendered[static_cast<std::size_t>(y)];
    if (domain.noise_sigma > 0.0) {
      for (double& v : x) {
        v += domain.noise_sigma * rng.normal();
      }
    }
    clamp_features(x);
    out.features.insert(out.features.end(), x.begin(), x.end());
    out.labels.push_back(y);
  }
}

Dataset empty_split(std::string name, std::size_t num_classes) {
  Dataset d;
  d.name = std::move(name);
  d.dim = kGridValues;
  d.num_classes = num_classes;
  return d;
}

void shuffle_rows(Dataset& d, std::uint64_t stream) {
  Rng rng(stream);
  std::vector<std::size_t> order(d.size());
  for (std::size_t i = 0; i < order.size(); ++i) {
    order[i] = i;
  }
  for (std::size_t i = order.size(); i > 1; --i) {
    std::swap(order[i - 1], order[rng.index(i)]);
  }
  Dataset out = empty_split(d.name, d.num_classes);
  for (std::size_t i : order) {
    auto r = d.row(i);
    out.features.insert(out.features.end(), r.begin(), r.end());
    out.labels.push_back(d.labels[i]);
  }
  d = std::move(out);
}

}  // namespace

std::vector<std::vector<double>> canonical_templates(std::size_t num_classes) {
  if (num_classes > kMaxTemplates) {
    throw ConfigError("at most " + std::to_string(kMaxTemplates) + " built-in templates");
  }
  std::vector<std::vector<double>> out;
  for (std::size_t k = 0; k < num_classes; ++k) {
    std::vector<double> grid(kGridValues);
    for (std::size_t i = 0; i < kGridValues; ++i) {
      grid[i] = kTemplateArt[k][i] == '#' ? 1.0 : 0.0;
    }
    out.push_back(std::move(grid));
  }
  return out;
}

std::vector<double> render_domain(std::span<const double> grid, const DomainSpec& domain) {
  std::vector<double> x = domain.rotation_deg != 0.0
                              ? rotate_grid(grid, domain.rotation_deg)
                              : std::vector<double>(grid.begin(), grid.end());
  if (domain.background_texture_seed != 0) {
    const auto tex = texture_pattern(domain.background_texture_seed, domain.texture_amplitude);
    for (std::size_t i = 0; i < x.size(); ++i) {
      x[i] += tex[i];
    }
  }
  if (domain.intensity_shift != 0.0) {
    for (double& v : x) {
      v += domain.intensity_shift;
    }
  }
  return x;
}

// ---------------------------------------------------------------------------
// ShiftBenchmark

std::vector<int> ShiftBenchmark::task_classes() const {
  if (!finetune_classes.empty()) {
    return finetune_classes;
  }
  std::vector<int> all(num_classes);
  for (std::size_t k = 0; k < num_classes; ++k) {
    all[k] = static_cast<int>(k);
  }
  return all;
}

std::vector<int> ShiftBenchmark::heldout_classes() const {
  const auto task = task_classes();
  std::vector<int> out;
  for (std::size_t k = 0; k < num_classes; ++k) {
    if (std::find(task.begin(), task.end(), static_cast<int>(k)) == task.end()) {
      out.push_back(static_cast<int>(k));
    }
  }
  return out;
}

void ShiftBenchmark::validate() const {
  if (num_classes < 2) {
    throw ConfigError("benchmark needs at least 2 classes");
  }
  if (templates.size() != num_classes) {
    throw ConfigError("benchmark has " + std::to_string(templates.size()) + " templates for " +
                      std::to_string(num_classes) + " classes");
  }
  for (const auto& t : templates) {
    if (t.size() != kGridValues) {
      throw ConfigError("templates must be 8x8 grids");
    }
  }
  const auto task = task_classes();
  if (task.size() < 2) {
    throw ConfigError("fine-tuning task needs at least 2 classes");
  }
  std::set<int> seen;
  for (int c : task) {
    if (c < 0 || static_cast<std::size_t>(c) >= num_classes || !seen.insert(c).second) {
      throw ConfigError("finetune_classes must be distinct ids in [0, num_classes)");
    }
  }
  if (pretrain_domains.empty()) {
    throw ConfigError("benchmark needs at least one pretraining domain");
  }
  for (const auto& d : pretrain_domains) {
    check_domain(d);
  }
  check_domain(id_domain);
  std::set<std::string> ood_ids;
  for (const auto& d : ood_domains) {
    check_domain(d);
    if (d == id_domain || d.domain_id == id_domain.domain_id) {
      throw ConfigError("OOD domain " + d.domain_id + " coincides with the ID domain");
    }
    if (!file_safe(d.domain_id) || is_reserved_split_name(d.domain_id)) {
      throw ConfigError("OOD domain id '" + d.domain_id +
                        "' is not usable as a split file name");
    }
    if (!ood_ids.insert(d.domain_id).second) {
      throw ConfigError("OOD domain " + d.domain_id + " listed twice");
    }
    for (const auto& other : ood_domains) {
      if (&other != &d && other == d) {
        throw ConfigError("OOD domains must be pairwise distinct");
      }
    }
  }
  if (heldout_domain) {
    check_domain(*heldout_domain);
  }
  const auto& s = sizes;
  if (s.min_per_class == 0) {
    throw ConfigError("min_per_class must be positive");
  }
  if (s.pretrain_per_domain < num_classes * s.min_per_class ||
      s.id_train < task.size() * s.min_per_class || s.test < num_classes * s.min_per_class) {
    throw ConfigError("split sizes too small for min_per_class examples of every class");
  }
}

ShiftBenchmark default_benchmark() {
  ShiftBenchmark b;
  b.num_classes = 12;
  b.finetune_classes = {0, 1, 2, 3, 4, 5};
  b.templates = canonical_templates(b.num_classes);
  // Broad pretraining: rotations and a different random background per
  // domain. The ID task uses a background never seen in pretraining; each
  // OOD domain pairs yet another background with a rotation and/or noise.
  const double rotations[] = {0.0, 20.0, -20.0, 40.0, -40.0};
  for (std::uint64_t i = 0; i < 8; ++i) {
    const double rot = rotations[i % 5];
    b.pretrain_domains.push_back({"pre_" + std::to_string(i), rot, 0.2, 0.0, 101 + i, 0.6});
  }
  b.id_domain = {"id", 0.0, 0.1, 0.0, 7, 0.8};
  b.ood_domains = {
      {"ood_r20", 20.0, 0.1, 0.0, 11, 0.8},
      {"ood_noise", 0.0, 0.3, 0.0, 12, 0.8},
      {"ood_r20_noise", 20.0, 0.3, 0.0, 13, 0.8},
      {"ood_r40_noise", 40.0, 0.2, 0.0, 14, 0.8},
  };
  b.heldout_domain = DomainSpec{"heldout_r40", 40.0, 0.2, 0.0, 15, 0.8};
  b.seed = 2024;
  return b;
}

BenchmarkSplits generate_benchmark(const ShiftBenchmark& spec) {
  spec.validate();
  const auto task = spec.task_classes();
  const auto held = spec.heldout_classes();
  std::vector<int> all(spec.num_classes);
  for (std::size_t k = 0; k < all.size(); ++k) {
    all[k] = static_cast<int>(k);
  }

  BenchmarkSplits s;
  s.pretrain = empty_split("pretrain", spec.num_classes);
  s.pretrain_test = empty_split("pretrain_test", spec.num_classes);
  for (std::size_t d = 0; d < spec.pretrain_domains.size(); ++d) {
    const auto& dom = spec.pretrain_domains[d];
    append_examples(s.pretrain, spec, dom, all, spec.sizes.pretrain_per_domain,
                    derive_seed({spec.seed, 1, d}));
    const std::size_t n_test = std::max(spec.sizes.test / spec.pretrain_domains.size(),
                                        spec.num_classes * spec.sizes.min_per_class);
    append_examples(s.pretrain_test, spec, dom, all, n_test, derive_seed({spec.seed, 2, d}));
  }
  shuffle_rows(s.pretrain, derive_seed({spec.seed, 3}));

  s.id_train = empty_split("id_train", task.size());
  append_examples(s.id_train, spec, spec.id_domain, task, spec.sizes.id_train,
                  derive_seed({spec.seed, 4}));
  s.id_test = empty_split("id_test", task.size());
  append_examples(s.id_test, spec, spec.id_domain, task, spec.sizes.test,
                  derive_seed({spec.seed, 5}));
  for (std::size_t d = 0; d < spec.ood_domains.size(); ++d) {
    const auto& dom = spec.ood_domains[d];
    Dataset split = empty_split(dom.domain_id, task.size());
    append_examples(split, spec, dom, task, spec.sizes.test, derive_seed({spec.seed, 6, d}));
    s.ood_tests.push_back(std::move(split));
  }
  if (!held.empty()) {
    Dataset split = empty_split("heldout", held.size());
    const DomainSpec dom = spec.heldout_domain.value_or(spec.pretrain_domains.front());
    append_examples(split, spec, dom, held, spec.sizes.test, derive_seed({spec.seed, 7}));
    s.heldout = std::move(split);
  }
  return s;
}

// ---------------------------------------------------------------------------
// JSON

namespace {

void reject_unknown_keys(const json& j, std::initializer_list<std::string_view> allowed,
                         std::string_view where) {
  if (!j.is_object()) {
    throw ConfigError(std::string(where) + " must be a JSON object");
  }
  for (const auto& [key, _] : j.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      throw ConfigError("unknown key '" + key + "' in " + std::string(where));
    }
  }
}

json domain_to_json(const DomainSpec& d) {
  return {{"domain_id", d.domain_id},
          {"rotation_deg", d.rotation_deg},
          {"noise_sigma", d.noise_sigma},
          {"intensity_shift", d.intensity_shift},
          {"background_texture_seed", d.background_texture_seed},
          {"texture_amplitude", d.texture_amplitude}};
}

DomainSpec domain_from_json(const json& j) {
  reject_unknown_keys(j,
                      {"domain_id", "rotation_deg", "noise_sigma", "intensity_shift",
                       "background_texture_seed", "texture_amplitude"},
                      "domain");
  DomainSpec d;
  d.domain_id = j.at("domain_id").get<std::string>();
  d.rotation_deg = j.value("rotation_deg", 0.0);
  d.noise_sigma = j.value("noise_sigma", 0.0);
  d.intensity_shift = j.value("intensity_shift", 0.0);
  d.background_texture_seed = j.value("background_texture_seed", std::uint64_t{0});
  d.texture_amplitude = j.value("texture_amplitude", 0.5);
  return d;
}

}  // namespace

json to_json(const ShiftBenchmark& spec) {
  json pre = json::array();
  for (const auto& d : spec.pretrain_domains) {
    pre.push_back(domain_to_json(d));
  }
  json ood = json::array();
  for (const auto& d : spec.ood_domains) {
    ood.push_back(domain_to_json(d));
  }
  json j = {{"num_classes", spec.num_classes},
            {"finetune_classes", spec.finetune_classes},
            {"templates", spec.templates},
            {"pretrain_domains", pre},
            {"id_domain", domain_to_json(spec.id_domain)},
            {"ood_domains", ood},
            {"seed", spec.seed},
            {"sizes",
             {{"pretrain_per_domain", spec.sizes.pretrain_per_domain},
              {"id_train", spec.sizes.id_train},
              {"test", spec.sizes.test},
              {"min_per_class", spec.sizes.min_per_class}}}};
  if (spec.heldout_domain) {
    j["heldout_domain"] = domain_to_json(*spec.heldout_domain);
  }
  return j;
}

ShiftBenchmark benchmark_from_json(const json& j) {
  reject_unknown_keys(j,
                      {"num_classes", "finetune_classes", "templates", "pretrain_domains",
                       "id_domain", "ood_domains", "heldout_domain", "seed", "sizes"},
                      "benchmark");
  ShiftBenchmark b;
  try {
    b.num_classes = j.value("num_classes", std::size_t{10});
    b.finetune_classes = j.value("finetune_classes", std::vector<int>{});
    if (j.contains("templates")) {
      b.templates = j.at("templates").get<std::vector<std::vector<double>>>();
    } else {
      b.templates = canonical_templates(b.num_classes);
    }
    for (const auto& d : j.at("pretrain_domains")) {
      b.pretrain_domains.push_back(domain_from_json(d));
    }
    b.id_domain = domain_from_json(j.at("id_domain"));
    for (const auto& d : j.value("ood_domains", json::array())) {
      b.ood_domains.push_back(domain_from_json(d));
    }
    if (j.contains("heldout_domain")) {
      b.heldout_domain = domain_from_json(j.at("heldout_domain"));
    }
    b.seed = j.value("seed", std::uint64_t{0});
    if (j.contains("sizes")) {
      const auto& s = j.at("sizes");
      reject_unknown_keys(s, {"pretrain_per_domain", "id_train", "test", "min_per_class"},
                          "benchmark.sizes");
      b.sizes.pretrain_per_domain = s.value("pretrain_per_domain", b.sizes.pretrain_per_domain);
      b.sizes.id_train = s.value("id_train", b.sizes.id_train);
      b.sizes.test = s.value("test", b.sizes.test);
      b.sizes.min_per_class = s.value("min_per_class", b.sizes.min_per_class);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("benchmark spec: ") + e.what());
  }
  b.validate();
  return b;
}

// ---------------------------------------------------------------------------
// CSV

void save_csv(const Dataset& data, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) {
    throw Error("cannot write " + path.string());
  }
  std::string line = "label";
  for (std::size_t j = 0; j < data.dim; ++j) {
    line += ",x" + std::to_string(j);
  }
  out << line << '\n';
  std::array<char, 32> buf{};
  for (std::size_t i = 0; i < data.size(); ++i) {
    line = std::to_string(data.labels[i]);
    for (double v : data.row(i)) {
      auto [end, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
      line += ',';
      line.append(buf.data(), end);
    }
    out << line << '\n';
  }
  if (!out) {
    throw Error("failed writing " + path.string());
  }
}

Dataset load_csv(const std::filesystem::path& path, std::size_t num_classes) {
  std::ifstream in(path);
  if (!in) {
    throw ParseError("cannot open " + path.string(), 0);
  }
  Dataset d;
  d.name = path.stem().string();
  d.num_classes = num_classes;

  std::string line;
  std::size_t line_no = 1;
  if (!std::getline(in, line)) {
    throw ParseError(path.string() + ": missing header", line_no);
  }
  {
    std::stringstream ss(line);
    std::string cell;
    std::size_t col = 0;
    while (std::getline(ss, cell, ',')) {
      const std::string expected = col == 0 ? "label" : "x" + std::to_string(col - 1);
      if (cell != expected) {
        throw ParseError(path.string() + ": bad header cell '" + cell + "', expected '" +
                             expected + "'",
                         line_no);
      }
      ++col;
    }
    if (col < 2) {
      throw ParseError(path.string() + ": header has no feature columns", line_no);
    }
    d.dim = col - 1;
  }
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) {
      continue;
    }
    const char* p = line.data();
    const char* end = line.data() + line.size();
    int label = 0;
    auto [lp, lec] = std::from_chars(p, end, label);
    if (lec != std::errc() || (lp != end && *lp != ',')) {
      throw ParseError(path.string() + ": non-integer label", line_no);
    }
    if (label < 0 || static_cast<std::size_t>(label) >= num_classes) {
      throw RangeError(path.string() + ":" + std::to_string(line_no) + ": label " +
                       std::to_string(label) + " outside [0, " + std::to_string(num_classes) +
                       ")");
    }
    p = lp;
    std::size_t count = 0;
    while (p != end) {
      ++p;  // comma
      double v = 0.0;
      auto [vp, vec] = std::from_chars(p, end, v);
      if (vec != std::errc() || (vp != end && *vp != ',') || !std::isfinite(v)) {
        throw ParseError(path.string() + ": non-numeric cell in column " +
                             std::to_string(count + 1),
                         line_no);
      }
      d.features.push_back(v);
      ++count;
      p = vp;
    }
    if (count != d.dim) {
      throw ParseError(path.string() + ": expected " + std::to_string(d.dim) + " features, got " +
                           std::to_string(count),
                       line_no);
    }
    d.labels.push_back(label);
  }
  return d;
}

// ---------------------------------------------------------------------------
// Benchmark directories

std::vector<std::filesystem::path> save_benchmark_dir(const ShiftBenchmark& spec,
                                                      const BenchmarkSplits& splits,
                                                      const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> written;
  const auto spec_path = dir / "benchmark.json";
  {
    std::ofstream out(spec_path, std::ios::trunc);
    if (!out) {
      throw Error("cannot write " + spec_path.string());
    }
    out << to_json(spec).dump(2) << '\n';
  }
  written.push_back(spec_path);
  auto put = [&](const Dataset& d, const std::string& stem) {
    const auto path = dir / (stem + ".csv");
    save_csv(d, path);
    written.push_back(path);
  };
  put(splits.pretrain, "pretrain");
  put(splits.pretrain_test, "pretrain_test");
  put(splits.id_train, "id_train");
  put(splits.id_test, "id_test");
  for (const auto& d : splits.ood_tests) {
    put(d, d.name);
  }
  if (splits.heldout) {
    put(*splits.heldout, "heldout");
  }
  return written;
}

LoadedBenchmark load_benchmark_dir(const std::filesystem::path& dir) {
  const auto spec_path = dir / "benchmark.json";
  std::ifstream in(spec_path);
  if (!in) {
    throw ParseError("cannot open " + spec_path.string(), 0);
  }
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError(spec_path.string() + ": " + e.what(), e.byte);
  }
  LoadedBenchmark out;
  out.spec = benchmark_from_json(j);
  const std::size_t k_all = out.spec.num_classes;
  const std::size_t k_task = out.spec.task_classes().size();
  out.splits.pretrain = load_csv(dir / "pretrain.csv", k_all);
  out.splits.pretrain_test = load_csv(dir / "pretrain_test.csv", k_all);
  out.splits.id_train = load_csv(dir / "id_train.csv", k_task);
  out.splits.id_test = load_csv(dir / "id_test.csv", k_task);
  for (const auto& d : out.spec.ood_domains) {
    out.splits.ood_tests.push_back(load_csv(dir / (d.domain_id + ".csv"), k_task));
  }
  const auto held = out.spec.heldout_classes();
  if (!held.empty()) {
    out.splits.heldout = load_csv(dir / "heldout.csv", held.size());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batching

std::vector<Batch> batches(const Dataset& data, std::size_t batch_size, std::uint64_t seed,
                           std::uint64_t epoch) {
  if (data.empty()) {
    throw StateError("cannot batch empty dataset '" + data.name + "'");
  }
  if (batch_size == 0) {
    throw ConfigError("batch_size must be >= 1");
  }
  Rng rng(derive_seed({seed, epoch, 0xBA7C}));
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) {
    order[i] = i;
  }
  for (std::size_t i = order.size(); i > 1; --i) {
    std::swap(order[i - 1], order[rng.index(i)]);
  }
  std::vector<Batch> out;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t stop = std::min(order.size(), start + batch_size);
    Batch b;
    b.indices.assign(order.begin() + static_cast<std::ptrdiff_t>(start),
                     order.begin() + static_cast<std::ptrdiff_t>(stop));
    b.x = data.gather(b.indices);
    for (std::size_t i : b.indices) {
      b.labels.push_back(data.labels[i]);
    }
    out.push_back(std::move(b));
  }
  return out;
}

}  // namespace funcreg
