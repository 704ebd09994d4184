#include <cmath>
#include <numbers>

#include "doctest.h"
#include "funcreg/error.hpp"
#include "funcreg/regularizers.hpp"
#include "funcreg/training.hpp"
#include "support.hpp"

using namespace funcreg;
using funcreg::test::check_gradients;
using funcreg::test::random_data;

namespace {

const double kKlCase = 0.5 * std::log(2.0) + 0.5 * std::log(2.0 / 3.0);

/// One linear 2x2 layer with the given bias and an identity head.
ModelParams linear2(std::vector<double> weight, std::vector<double> bias,
                    std::vector<double> head = {1, 0, 0, 1}) {
  ModelParams p;
  p.encoder.layers.push_back({Tensor::parameter({2, 2}, std::move(weight)),
                              Tensor::parameter({2}, std::move(bias))});
  p.head.prototypes = Tensor::parameter({2, 2}, std::move(head));
  return p;
}

ModelParams identity2(std::vector<double> bias = {0, 0}) {
  return linear2({1, 0, 0, 1}, std::move(bias));
}

/// Live parameters perturbed away from the snapshot and EMA shadow.
struct Fixture {
  ModelState m;
  Tensor x;
  Tensor x_aug;
  std::vector<int> labels;
  Tensor contexts;

  explicit Fixture(std::uint64_t seed)
      : m(init_params(funcreg::test::tiny_arch(), seed)) {
    Rng rng(derive_seed({seed, 99}));
    m.take_snapshot();
    m.init_ema();
    funcreg::test::jitter(m.live(), rng, 0.3);
    // Redraw inputs that put a ReLU unit within reach of the FD probe.
    do {
      x = random_data({6, 4}, rng);
      x_aug = random_data({6, 4}, rng);
    } while (std::min(funcreg::test::relu_margin(m.live().encoder, x),
                      funcreg::test::relu_margin(m.live().encoder, x_aug)) <= 1e-3);
    for (int i = 0; i < 6; ++i) {
      labels.push_back(static_cast<int>(rng.index(3)));
    }
    contexts = make_context_prototypes(4, 3, seed);
  }

  std::vector<Tensor> params() {
    std::vector<Tensor> out;
    for (auto& nt : trainable_parameters(m.live())) {
      out.push_back(nt.tensor);
    }
    return out;
  }
};

RegularizerConfig config_for(RegMethod method) {
  RegularizerConfig cfg;
  cfg.method = method;
  cfg.lambda_far = 0.7;
  cfg.lambda_fcr = 1.3;
  cfg.lambda_baseline = 0.5;
  cfg.lipsum_probes = 5;
  cfg.car_contexts = 4;
  return cfg;
}

const std::vector<RegMethod> kAllMethods = {
    RegMethod::none, RegMethod::far,   RegMethod::fcr,    RegMethod::far_fcr,    RegMethod::l2sp,
    RegMethod::ldifs, RegMethod::car, RegMethod::lipsum, RegMethod::ema_distill};

}  // namespace

TEST_SUITE("regularizers") {
  TEST_CASE("gradients match finite differences for every term") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      CAPTURE(seed);
      Fixture f(seed);
      REQUIRE(f.m.live().parameter_count() <= 100);
      auto params = f.params();
      auto ok = [&](const std::function<Tensor()>& fn) {
        return check_gradients(fn, params).max_error <= 1.0;
      };
      CHECK(ok([&] { return cross_entropy(forward_logits(f.m.live(), f.x), f.labels); }));
      CHECK(ok([&] { return far_loss(f.m, f.x_aug); }));
      CHECK(ok([&] { return far_loss(f.m, f.x_aug, OutputSpace::logits); }));
      CHECK(ok([&] { return fcr_loss(f.m, f.x, f.x_aug); }));
      CHECK(ok([&] { return l2sp_loss(f.m); }));
      CHECK(ok([&] { return ldifs_loss(f.m, f.x); }));
      CHECK(ok([&] { return car_loss(f.m, f.x, f.contexts); }));
      CHECK(ok([&] { return lipsum_loss(f.m, f.x, 5, seed); }));
      CHECK(ok([&] { return ema_distill_loss(f.m, f.x); }));
      for (auto method : kAllMethods) {
        CAPTURE(to_string(method));
        RegularizerInputs inputs{f.contexts, seed};
        auto cfg = config_for(method);
        CHECK(ok([&] { return combined_loss(f.m, f.x, f.labels, f.x_aug, cfg, inputs).total; }));
      }
    }
  }

  TEST_CASE("every regularizer vanishes at the starting point") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      ModelState m(init_params(funcreg::test::tiny_arch(), seed));
      m.take_snapshot();
      m.init_ema();
      Rng rng(seed);
      auto x = random_data({8, 4}, rng);
      auto xa = random_data({8, 4}, rng);
      CHECK(far_loss(m, xa).item() <= 1e-12);
      CHECK(far_loss(m, xa, OutputSpace::logits).item() <= 1e-12);
      CHECK(fcr_loss(m, x, x).item() <= 1e-12);
      CHECK(l2sp_loss(m).item() <= 1e-12);
      CHECK(ldifs_loss(m, x).item() <= 1e-12);
      CHECK(car_loss(m, x, make_context_prototypes(8, 3, seed)).item() <= 1e-12);
      CHECK(lipsum_loss(m, x, 80, seed).item() <= 1e-12);
      CHECK(ema_distill_loss(m, x).item() <= 1e-12);
    }
  }

  TEST_CASE("regularizers are nonnegative away from the start") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      Fixture f(seed);
      CHECK(far_loss(f.m, f.x_aug).item() >= 0.0);
      CHECK(fcr_loss(f.m, f.x, f.x_aug).item() >= 0.0);
      CHECK(l2sp_loss(f.m).item() >= 0.0);
      CHECK(ldifs_loss(f.m, f.x).item() >= 0.0);
      CHECK(car_loss(f.m, f.x, f.contexts).item() >= 0.0);
      CHECK(lipsum_loss(f.m, f.x, 5, seed).item() >= 0.0);
      CHECK(ema_distill_loss(f.m, f.x).item() >= 0.0);
    }
  }

  TEST_CASE("far examples") {
    ModelState m(identity2());
    m.take_snapshot();
    CHECK(far_loss(m, Tensor::from_data({1, 2}, {0.3, -0.4})).item() == 0.0);

    ModelState swapped(linear2({1, 0, 0, 1}, {0, 0}, {0, 1, 1, 0}));
    swapped.take_snapshot();
    swapped.live().head.prototypes.mutable_data()[0] = 1;
    swapped.live().head.prototypes.mutable_data()[1] = 0;
    swapped.live().head.prototypes.mutable_data()[2] = 0;
    swapped.live().head.prototypes.mutable_data()[3] = 1;
    auto x = Tensor::from_data({1, 2}, {1, 0});
    CHECK(far_loss(swapped, x, OutputSpace::logits).item() == 2.0);

    ModelState missing(identity2());
    CHECK_THROWS_AS(far_loss(missing, x), StateError);

    Fixture f(3);
    Rng rng(4);
    auto xa = random_data({4, 4}, rng);
    auto live = softmax(forward_logits(f.m.live(), xa));
    auto ref = softmax(forward_logits(f.m.snapshot(), xa));
    double acc = 0.0;
    for (std::size_t i = 0; i < 4; ++i) {
      for (std::size_t k = 0; k < 3; ++k) {
        const double d = live.at(i, k) - ref.at(i, k);
        acc += d * d;
      }
    }
    CHECK(std::abs(far_loss(f.m, xa).item() - acc / 4.0) <= 1e-12);
  }

  TEST_CASE("fcr examples") {
    ModelState m(identity2());
    auto clean = Tensor::from_data({1, 2}, {0, 0});
    auto aug = Tensor::from_data({1, 2}, {0, std::log(3.0)});
    CHECK(std::abs(fcr_loss(m, clean, aug).item() - kKlCase) <= 1e-12);
    CHECK(std::abs(fcr_loss(m, clean, aug).item() - 0.143841) <= 1e-6);

    Fixture f(5);
    CHECK(fcr_loss(f.m, f.x, f.x).item() <= 1e-12);

    ModelState constant(init_params(funcreg::test::tiny_arch(), 6));
    for (auto& l : constant.live().encoder.layers) {
      for (double& v : l.weight.mutable_data()) v = 0.0;
    }
    CHECK(fcr_loss(constant, f.x, f.x_aug).item() <= 1e-12);
    CHECK_THROWS_AS(fcr_loss(f.m, f.x, Tensor::zeros({5, 4})), ShapeError);
  }

  TEST_CASE("l2sp examples") {
    ModelState m(init_params(funcreg::test::tiny_arch(), 7));
    m.take_snapshot();
    m.live().encoder.layers[1].weight.mutable_data()[3] += 0.25;
    CHECK(l2sp_loss(m).item() == doctest::Approx(0.0625).epsilon(1e-14));

    Fixture f(8);
    auto a = f.m.live().encoder;
    auto b = f.m.snapshot().encoder;
    double acc = 0.0;
    for (std::size_t l = 0; l < a.layers.size(); ++l) {
      for (const auto& [ta, tb] : {std::pair{a.layers[l].weight, b.layers[l].weight},
                                   std::pair{a.layers[l].bias, b.layers[l].bias}}) {
        for (std::size_t i = 0; i < ta.size(); ++i) {
          const double d = ta.data()[i] - tb.data()[i];
          acc += d * d;
        }
      }
    }
    CHECK(std::abs(l2sp_loss(f.m).item() - acc) <= 1e-12);
    // Head drift is not penalised.
    ModelState h(init_params(funcreg::test::tiny_arch(), 9));
    h.take_snapshot();
    h.live().head.prototypes.mutable_data()[0] += 5.0;
    CHECK(l2sp_loss(h).item() == 0.0);
  }

  TEST_CASE("ldifs examples") {
    ModelParams id;
    id.encoder.layers.push_back(
        {Tensor::parameter({4, 4}, {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1}),
         Tensor::parameter({4}, {0, 0, 0, 0})});
    id.head.prototypes = Tensor::parameter({2, 4}, {1, 0, 0, 0, 0, 1, 0, 0});
    ModelState m(id);
    m.take_snapshot();
    for (double& v : m.live().encoder.layers[0].weight.mutable_data()) v = 0.0;
    CHECK(ldifs_loss(m, Tensor::from_data({1, 4}, {1, 0, 0, 0})).item() == 1.0);

    // A single linear layer makes features affine in the weights.
    ModelParams base = linear2({0.3, -0.2, 0.5, 0.1}, {0.1, 0.2});
    ModelState one(base.deep_copy(true));
    one.take_snapshot();
    ModelState two(base.deep_copy(true));
    two.take_snapshot();
    const std::vector<double> delta = {0.2, -0.1, 0.05, 0.3};
    for (std::size_t i = 0; i < 4; ++i) {
      one.live().encoder.layers[0].weight.mutable_data()[i] += delta[i];
      two.live().encoder.layers[0].weight.mutable_data()[i] += 2 * delta[i];
    }
    auto x = Tensor::from_data({3, 2}, {1, 2, -1, 0.5, 0.3, -2});
    CHECK(ldifs_loss(two, x).item() == doctest::Approx(4 * ldifs_loss(one, x).item()).epsilon(1e-12));
  }

  TEST_CASE("car examples") {
    auto ctx = Tensor::from_data({2, 2}, {1, 0, 0, 1});
    ModelState m(identity2());
    m.take_snapshot();
    m.live().encoder.layers[0].bias.mutable_data()[1] = std::log(3.0);
    auto x = Tensor::from_data({1, 2}, {0, 0});
    CHECK(std::abs(car_loss(m, x, ctx).item() - kKlCase) <= 1e-12);

    ModelState shifted(identity2({0.8, 0.8}));
    shifted.take_snapshot();
    shifted.live().encoder.layers[0].bias.mutable_data()[1] = 0.8 + std::log(3.0);
    CHECK(std::abs(car_loss(shifted, x, ctx).item() - car_loss(m, x, ctx).item()) <= 1e-12);

    CHECK_THROWS_AS(car_loss(m, x, Tensor::from_data({1, 2}, {1, 0})), ConfigError);
    CHECK_THROWS_AS(make_context_prototypes(1, 2, 0), ConfigError);
    auto rows = make_context_prototypes(5, 3, 1);
    for (std::size_t r = 0; r < 5; ++r) {
      double sq = 0.0;
      for (std::size_t k = 0; k < 3; ++k) sq += rows.at(r, k) * rows.at(r, k);
      CHECK(std::abs(sq - 1.0) <= 1e-12);
    }
  }

  TEST_CASE("lipsum examples") {
    Fixture f(11);
    auto phi = forward_features(f.m.live(), f.x);
    auto phi0 = forward_features(f.m.snapshot(), f.x);
    double sq = 0.0;
    for (std::size_t i = 0; i < phi.size(); ++i) {
      const double d = phi.data()[i] - phi0.data()[i];
      sq += d * d;
    }
    const double limit = sq / 6.0 / (2.0 * 3.0);
    const double mc = lipsum_loss(f.m, f.x, 10000, 5).item();
    CHECK(std::abs(mc - limit) <= 0.05 * limit);

    auto x1 = Tensor::from_data({1, 4}, {0.5, -1, 1.5, 0.2});
    auto d1 = sub(forward_features(f.m.live(), x1), forward_features(f.m.snapshot(), x1));
    double n2 = 0.0;
    for (double v : d1.data()) n2 += v * v;
    std::vector<double> u(d1.data().begin(), d1.data().end());
    for (double& v : u) v /= std::sqrt(n2);
    auto aligned = Tensor::from_data({1, 3}, u);
    CHECK(std::abs(lipsum_loss(f.m, x1, aligned).item() - n2 / 2.0) <= 1e-12);

    auto p1 = make_lipsum_probes(3, 4, 7);
    auto p2 = make_lipsum_probes(3, 4, 7);
    auto p3 = make_lipsum_probes(3, 4, 8);
    CHECK(funcreg::test::same_bits(p1.data(), p2.data()));
    CHECK_FALSE(funcreg::test::same_bits(p1.data(), p3.data()));
  }

  TEST_CASE("ema distill examples") {
    ModelState m(identity2());
    m.init_ema();
    auto x = Tensor::from_data({1, 2}, {0, 0});
    CHECK(ema_distill_loss(m, x).item() == 0.0);
    m.live().encoder.layers[0].bias.mutable_data()[1] = std::log(3.0);
    CHECK(std::abs(ema_distill_loss(m, x).item() - kKlCase) <= 1e-12);
    ModelState fresh(identity2());
    CHECK_THROWS_AS(ema_distill_loss(fresh, x), StateError);
  }

  TEST_CASE("combined loss oracles") {
    Fixture f(12);
    RegularizerInputs inputs{f.contexts, 3};
    auto cfg = config_for(RegMethod::far_fcr);
    cfg.lambda_far = 0.0;
    cfg.lambda_fcr = 0.0;
    auto zero = combined_loss(f.m, f.x, f.labels, f.x_aug, cfg, inputs);
    CHECK(zero.total.item() == zero.ce);
    CHECK(zero.ce == cross_entropy(forward_logits(f.m.live(), f.x), f.labels).item());

    ModelState start(init_params(funcreg::test::tiny_arch(), 13));
    start.take_snapshot();
    auto both = combined_loss(start, f.x, f.labels, f.x, config_for(RegMethod::far_fcr), inputs);
    CHECK(std::abs(both.total.item() - both.ce) <= 1e-12);

    auto full = combined_loss(f.m, f.x, f.labels, f.x_aug, config_for(RegMethod::far_fcr), inputs);
    const double expected = cross_entropy(forward_logits(f.m.live(), f.x), f.labels).item() +
                            0.7 * far_loss(f.m, f.x_aug).item() +
                            1.3 * fcr_loss(f.m, f.x, f.x_aug).item();
    CHECK(std::abs(full.total.item() - expected) <= 1e-12);
    REQUIRE(full.far.has_value());
    REQUIRE(full.fcr.has_value());
    CHECK_FALSE(full.reg.has_value());

    auto plain = combined_loss(f.m, f.x, f.labels, Tensor{}, config_for(RegMethod::none), inputs);
    CHECK_FALSE(plain.far.has_value());
    CHECK_FALSE(plain.fcr.has_value());
    CHECK_FALSE(plain.reg.has_value());
    CHECK_THROWS_AS(combined_loss(f.m, f.x, f.labels, Tensor{}, config_for(RegMethod::far), inputs),
                    StateError);

    for (auto method : {RegMethod::l2sp, RegMethod::ldifs, RegMethod::car, RegMethod::lipsum,
                        RegMethod::ema_distill}) {
      auto b = combined_loss(f.m, f.x, f.labels, Tensor{}, config_for(method), inputs);
      REQUIRE(b.reg.has_value());
      CHECK(std::abs(b.total.item() - (b.ce + 0.5 * *b.reg)) <= 1e-12);
    }
  }

  TEST_CASE("far and fcr are invariant to batch order") {
    Fixture f(14);
    std::vector<std::size_t> perm = {3, 0, 5, 1, 4, 2};
    std::vector<double> xp;
    std::vector<double> xap;
    for (std::size_t i : perm) {
      for (std::size_t j = 0; j < 4; ++j) {
        xp.push_back(f.x.at(i, j));
        xap.push_back(f.x_aug.at(i, j));
      }
    }
    auto x2 = Tensor::from_data({6, 4}, xp);
    auto xa2 = Tensor::from_data({6, 4}, xap);
    CHECK(std::abs(far_loss(f.m, f.x_aug).item() - far_loss(f.m, xa2).item()) <= 1e-14);
    CHECK(std::abs(fcr_loss(f.m, f.x, f.x_aug).item() - fcr_loss(f.m, x2, xa2).item()) <= 1e-14);
  }

  TEST_CASE("frozen branches receive no gradient") {
    Fixture f(15);
    RegularizerInputs inputs{f.contexts, 1};
    for (auto method : kAllMethods) {
      GradientTape tape;
      GradientTape::Scope scope(tape);
      auto loss = combined_loss(f.m, f.x, f.labels, f.x_aug, config_for(method), inputs);
      tape.backward(loss.total);
      for (const auto& nt : f.m.snapshot().named_tensors()) {
        CHECK_FALSE(nt.tensor.has_grad());
      }
      for (const auto& nt : f.m.ema().named_tensors()) {
        CHECK_FALSE(nt.tensor.has_grad());
      }
      for (auto& nt : f.m.live().named_tensors()) {
        nt.tensor.clear_grad();
      }
    }
  }

  TEST_CASE("config validation, warnings and json") {
    RegularizerConfig cfg;
    cfg.lambda_far = -1;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = RegularizerConfig{};
    cfg.ema_decay = 1.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = RegularizerConfig{};
    cfg.lipsum_probes = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);

    cfg = RegularizerConfig{};
    cfg.method = RegMethod::far;
    cfg.lambda_far = 0;
    cfg.lambda_fcr = 2;
    CHECK(cfg.warnings().size() == 1);
    cfg.lambda_far = 1;
    CHECK(cfg.warnings().empty());

    auto full = config_for(RegMethod::lipsum);
    full.output_space = OutputSpace::logits;
    auto back = regularizer_from_json(to_json(full));
    CHECK(to_json(back) == to_json(full));
    auto partial = regularizer_from_json(nlohmann::json{{"lambda_far", 3.0}}, full);
    CHECK(partial.method == RegMethod::lipsum);
    CHECK(partial.lambda_far == 3.0);
    CHECK_THROWS_AS(regularizer_from_json(nlohmann::json{{"lambda", 1}}), ConfigError);
    CHECK_THROWS_AS(regularizer_from_json(nlohmann::json{{"method", "sam"}}), ConfigError);
    for (auto method : kAllMethods) {
      CHECK(reg_method_from_string(to_string(method)) == method);
    }
  }
}
