#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "doctest.h"
#include "funcreg/augment.hpp"
#include "funcreg/data.hpp"
#include "funcreg/error.hpp"
#include "support.hpp"

using namespace funcreg;
using funcreg::test::same_bits;

namespace {

ShiftBenchmark small_benchmark(std::uint64_t seed = 5) {
  ShiftBenchmark b;
  b.num_classes = 4;
  b.finetune_classes = {0, 2};
  b.templates = canonical_templates(4);
  b.pretrain_domains = {{"pre_a", 0, 0.1, 0, 3, 0.5}, {"pre_b", 15, 0.1, 0, 4, 0.5}};
  b.id_domain = {"id", 0, 0.05, 0, 0, 0.5};
  b.ood_domains = {{"ood_a", 30, 0.3, 0, 0, 0.5}, {"ood_b", 0, 0.2, 0.4, 9, 0.5}};
  b.sizes = {40, 22, 30, 5};
  b.seed = seed;
  return b;
}

void check_balanced(const Dataset& d) {
  const auto counts = d.class_counts();
  REQUIRE(counts.size() == d.num_classes);
  const std::size_t lo = d.size() / d.num_classes;
  for (auto c : counts) {
    CHECK((c == lo || c == lo + 1));
  }
}

bool same_dataset(const Dataset& a, const Dataset& b) {
  return a.labels == b.labels && a.dim == b.dim && same_bits(a.features, b.features);
}

}  // namespace

TEST_SUITE("data") {
  TEST_CASE("identity domain reproduces raw templates") {
    ShiftBenchmark b = small_benchmark();
    b.id_domain = {"id", 0, 0, 0, 0, 0.5};
    auto s = generate_benchmark(b);
    const auto task = b.task_classes();
    for (std::size_t i = 0; i < s.id_train.size(); ++i) {
      const auto& tpl = b.templates[static_cast<std::size_t>(task[s.id_train.labels[i]])];
      CHECK(same_bits(s.id_train.row(i), tpl));
    }
  }

  TEST_CASE("generation is deterministic and seed dependent") {
    auto a = generate_benchmark(small_benchmark());
    auto b = generate_benchmark(small_benchmark());
    CHECK(same_dataset(a.pretrain, b.pretrain));
    CHECK(same_dataset(a.id_test, b.id_test));
    CHECK(same_dataset(a.ood_tests[1], b.ood_tests[1]));
    auto c = generate_benchmark(small_benchmark(6));
    CHECK_FALSE(same_dataset(a.id_train, c.id_train));
  }

  TEST_CASE("split shapes and label histograms") {
    ShiftBenchmark b = small_benchmark();
    auto s = generate_benchmark(b);
    CHECK(s.pretrain.size() == 2 * 40);
    CHECK(s.id_train.size() == 22);
    CHECK(s.id_test.size() == 30);
    CHECK(s.ood_tests.size() == 2);
    CHECK(s.ood_tests[0].name == "ood_a");
    REQUIRE(s.heldout.has_value());
    CHECK(s.heldout->num_classes == 2);
    CHECK(s.id_train.num_classes == 2);
    CHECK(s.pretrain.num_classes == 4);
    check_balanced(s.id_train);
    check_balanced(s.id_test);
    check_balanced(*s.heldout);
    for (const auto& d : s.ood_tests) {
      check_balanced(d);
    }
    // Each pretraining domain contributes a balanced block.
    for (auto c : s.pretrain.class_counts()) {
      CHECK(c == 20);
    }
    for (const auto* d : {&s.pretrain, &s.id_train, &s.id_test, &s.ood_tests[0]}) {
      for (double v : d->features) {
        CHECK(std::isfinite(v));
        CHECK(v >= kFeatureMin);
        CHECK(v <= kFeatureMax);
      }
      for (auto c : d->class_counts()) {
        CHECK(c >= b.sizes.min_per_class);
      }
    }
  }

  TEST_CASE("noiseless domains keep the label to template mapping") {
    ShiftBenchmark b = small_benchmark();
    b.ood_domains = {{"r30", 30, 0, 0, 0, 0.5}, {"shift", 0, 0, 0.3, 21, 0.5}};
    auto s = generate_benchmark(b);
    const auto task = b.task_classes();
    for (std::size_t d = 0; d < s.ood_tests.size(); ++d) {
      const auto& split = s.ood_tests[d];
      std::vector<std::vector<double>> rendered;
      for (int c : task) {
        auto r = render_domain(b.templates[static_cast<std::size_t>(c)], b.ood_domains[d]);
        clamp_features(r);
        rendered.push_back(r);
      }
      std::size_t correct = 0;
      for (std::size_t i = 0; i < split.size(); ++i) {
        std::size_t best = 0;
        double best_d = 1e300;
        for (std::size_t k = 0; k < rendered.size(); ++k) {
          double dist = 0.0;
          for (std::size_t j = 0; j < kGridValues; ++j) {
            const double e = split.row(i)[j] - rendered[k][j];
            dist += e * e;
          }
          if (dist < best_d) {
            best_d = dist;
            best = k;
          }
        }
        correct += static_cast<int>(best) == split.labels[i];
      }
      CHECK(correct == split.size());
    }
  }

  TEST_CASE("invalid specs raise config errors") {
    auto expect_bad = [](ShiftBenchmark b) { CHECK_THROWS_AS(generate_benchmark(b), ConfigError); };
    ShiftBenchmark b = small_benchmark();
    b.ood_domains.push_back(b.id_domain);
    expect_bad(b);
    b = small_benchmark();
    b.ood_domains.push_back(b.ood_domains[0]);
    expect_bad(b);
    b = small_benchmark();
    b.ood_domains[0].noise_sigma = -1;
    expect_bad(b);
    b = small_benchmark();
    b.sizes.test = 3;
    expect_bad(b);
    b = small_benchmark();
    b.finetune_classes = {1};
    expect_bad(b);
    b = small_benchmark();
    b.finetune_classes = {0, 7};
    expect_bad(b);
    b = small_benchmark();
    b.templates.pop_back();
    expect_bad(b);
    b = small_benchmark();
    b.ood_domains[0].domain_id = "id_test";
    expect_bad(b);
    b = small_benchmark();
    b.ood_domains[0].domain_id = "../x";
    expect_bad(b);
    CHECK_THROWS_AS(canonical_templates(kMaxTemplates + 1), ConfigError);
  }

  TEST_CASE("default benchmark is valid") {
    ShiftBenchmark b = default_benchmark();
    CHECK_NOTHROW(b.validate());
    CHECK(b.heldout_classes().size() == 6);
    for (const auto& d : b.ood_domains) {
      CHECK(d.domain_id != b.id_domain.domain_id);
    }
  }

  TEST_CASE("benchmark json round-trip and strict keys") {
    ShiftBenchmark b = small_benchmark();
    b.heldout_domain = DomainSpec{"held", 10, 0.1, 0, 2, 0.3};
    auto j = to_json(b);
    ShiftBenchmark c = benchmark_from_json(j);
    CHECK(to_json(c) == j);
    j["bogus"] = 1;
    try {
      benchmark_from_json(j);
      FAIL("unknown key accepted");
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find("bogus") != std::string::npos);
    }
    auto k = to_json(b);
    k["id_domain"]["colour"] = 3;
    CHECK_THROWS_AS(benchmark_from_json(k), ConfigError);
  }

  TEST_CASE("csv round-trip") {
    auto dir = funcreg::test::scratch_dir("data_csv");
    auto s = generate_benchmark(small_benchmark());
    save_csv(s.ood_tests[0], dir / "a.csv");
    auto back = load_csv(dir / "a.csv", 2);
    CHECK(same_dataset(back, s.ood_tests[0]));
    CHECK(back.num_classes == 2);
    std::ifstream in(dir / "a.csv");
    std::string header;
    std::getline(in, header);
    CHECK(header.rfind("label,x0,x1,", 0) == 0);
    REQUIRE(header.size() >= 4);
    CHECK(header.substr(header.size() - 4) == ",x63");
  }

  TEST_CASE("csv errors carry line numbers") {
    auto dir = funcreg::test::scratch_dir("data_csv_bad");
    auto write = [&](const std::string& text) {
      std::ofstream(dir / "b.csv", std::ios::trunc) << text;
      return dir / "b.csv";
    };
    auto line_of = [](const std::filesystem::path& p) -> std::size_t {
      try {
        load_csv(p, 3);
      } catch (const ParseError& e) {
        return e.location();
      }
      return 0;
    };
    CHECK(line_of(write("label,y0\n1,2\n")) == 1);
    CHECK(line_of(write("label,x0,x1\n1,2,3\n0,abc,1\n")) == 3);
    CHECK(line_of(write("label,x0,x1\n1,2\n")) == 2);
    CHECK(line_of(write("label,x0,x1\n1.5,2,3\n")) == 2);
    CHECK(line_of(write("label,x0,x1\n1,2,nan\n")) == 2);
    CHECK(line_of(write("")) == 1);
    CHECK_THROWS_AS(load_csv(write("label,x0\n3,1\n"), 3), RangeError);
    CHECK_THROWS_AS(load_csv(write("label,x0\n-1,1\n"), 3), RangeError);
    CHECK_THROWS_AS(load_csv(dir / "missing.csv", 3), ParseError);
  }

  TEST_CASE("benchmark directory round-trip") {
    auto dir = funcreg::test::scratch_dir("data_dir");
    ShiftBenchmark b = small_benchmark();
    auto s = generate_benchmark(b);
    auto written = save_benchmark_dir(b, s, dir);
    CHECK(written.size() == 1 + 4 + 2 + 1);
    auto loaded = load_benchmark_dir(dir);
    CHECK(to_json(loaded.spec) == to_json(b));
    CHECK(same_dataset(loaded.splits.pretrain, s.pretrain));
    CHECK(same_dataset(loaded.splits.id_train, s.id_train));
    CHECK(same_dataset(loaded.splits.ood_tests[1], s.ood_tests[1]));
    CHECK(loaded.splits.ood_tests[1].name == "ood_b");
    REQUIRE(loaded.splits.heldout.has_value());
    CHECK(same_dataset(*loaded.splits.heldout, *s.heldout));
    std::filesystem::remove(dir / "benchmark.json");
    CHECK_THROWS_AS(load_benchmark_dir(dir), ParseError);
  }

  TEST_CASE("batches") {
    auto s = generate_benchmark(small_benchmark());
    const Dataset& d = s.id_test;
    auto whole = batches(d, d.size(), 1, 0);
    REQUIRE(whole.size() == 1);
    auto idx = whole[0].indices;
    std::sort(idx.begin(), idx.end());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      CHECK(idx[i] == i);
    }

    auto a = batches(d, 7, 3, 2);
    auto b = batches(d, 7, 3, 2);
    auto c = batches(d, 7, 3, 3);
    CHECK(a.size() == (d.size() + 6) / 7);
    CHECK(a.back().indices.size() == d.size() % 7);
    bool differs = false;
    std::multiset<std::size_t> seen;
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(a[i].indices == b[i].indices);
      differs = differs || a[i].indices != c[i].indices;
      for (std::size_t k = 0; k < a[i].indices.size(); ++k) {
        const std::size_t row = a[i].indices[k];
        seen.insert(row);
        CHECK(a[i].labels[k] == d.labels[row]);
        CHECK(a[i].x.at(k, 5) == d.row(row)[5]);
      }
    }
    CHECK(differs);
    CHECK(seen.size() == d.size());
    for (std::size_t i = 0; i < d.size(); ++i) {
      CHECK(seen.count(i) == 1);
    }
    Dataset empty;
    CHECK_THROWS_AS(batches(empty, 4, 0, 0), StateError);
    CHECK_THROWS_AS(batches(d, 0, 0, 0), ConfigError);
  }
}
