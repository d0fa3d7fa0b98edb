#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "remi/attack_features.hpp"
#include "remi/error.hpp"
#include "remi/privacy_model.hpp"
#include "remi/training.hpp"
#include "support.hpp"

using namespace remi;
using remi::test::random_tensor;

namespace {

Corpus blobs(std::size_t classes, std::size_t per_class, std::size_t dim, Real sigma, Real sep, std::uint64_t seed) {
  SyntheticSpec s;
  s.classes = classes;
  s.per_class = per_class;
  s.dim = dim;
  s.sigma = sigma;
  s.separation = sep;
  s.seed = seed;
  return make_synthetic(s);
}

IndexList iota_list(std::size_t begin, std::size_t end) {
  IndexList v;
  for (std::size_t i = begin; i < end; ++i) v.push_back(i);
  return v;
}

Network mlp3(std::size_t in, std::size_t k, std::uint64_t seed) {
  return NetworkBuilder({in}).dense(8).relu().dense(6).relu().dense(static_cast<std::uint32_t>(k)).softmax().build(seed);
}

}  // namespace

TEST_CASE("training reaches high accuracy on separable blobs") {
  const Corpus c = blobs(3, 200, 6, 0.2, 6.0, 1);
  const SplitPlan p = split(c, 2);
  TrainConfig cfg;
  cfg.epochs = 10;
  cfg.batch_size = 16;
  cfg.seed = 3;
  auto r = train(mlp3(6, 3, 4), c, p.target_train, p.target_test, cfg);
  CHECK(accuracy(r.net, c, p.target_train) >= 0.99);
  CHECK(r.log.epochs.size() == 10);
  CHECK(r.log.returned_epoch == 10);

  auto again = train(mlp3(6, 3, 4), c, p.target_train, p.target_test, cfg);
  CHECK(again.net.flatten_params() == r.net.flatten_params());
}

TEST_CASE("training config validation") {
  TrainConfig cfg;
  cfg.epochs = 0;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg.epochs = 1;
  cfg.batch_size = 0;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg.batch_size = 4;
  cfg.learning_rate = -1;
  CHECK_THROWS_AS(cfg.validate(), Error);
}

TEST_CASE("train log survives CSV round trip") {
  remi::test::TempDir dir("log");
  TrainLog log;
  log.epochs.push_back({1, 0.5, 0.75, 0.625, 0.5});
  log.epochs.push_back({2, 0.25, 0.875, 0.5, 0.625});
  log.returned_epoch = 2;
  log.write_csv(dir / "log.csv");
  const TrainLog back = TrainLog::read_csv(dir / "log.csv");
  REQUIRE(back.epochs.size() == 2);
  CHECK(back.epochs[1].train_acc == 0.875);
  CHECK(back.epochs[0].eval_loss == 0.625);
}

TEST_CASE("shadow model is deterministic and comparable to the target") {
  const Corpus c = blobs(3, 80, 6, 0.8, 3.0, 9);
  const SplitPlan p = split(c, 1);
  TrainConfig cfg;
  cfg.epochs = 15;
  cfg.seed = 5;
  ArchSpec arch;
  arch.kind = "mlp";
  arch.hidden = {16};
  const auto a = train_shadow(c, p, arch, cfg);
  const auto b = train_shadow(c, p, arch, cfg);
  CHECK(a.net.flatten_params() == b.net.flatten_params());
  const auto target = train(build_network(arch, c.sample_shape, c.class_count, cfg.seed), c, p.target_train, p.target_test, cfg);
  CHECK(std::abs(accuracy(a.net, c, p.shadow_out) - accuracy(target.net, c, p.target_test)) <= 0.10);

  SplitPlan leaky = p;
  const auto x = p.target_train.front();
  leaky.shadow_in.insert(std::lower_bound(leaky.shadow_in.begin(), leaky.shadow_in.end(), x), x);
  CHECK_THROWS_AS(train_shadow(c, leaky, arch, cfg), Error);
}

TEST_CASE("accuracy matches a brute-force loop") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t k = 2 + rng() % 4, n = 5 + rng() % 20;
    const Corpus c = blobs(k, n, 6, 1.0, 1.0, rng());
    Network net = NetworkBuilder({6}).dense(static_cast<std::uint32_t>(k)).softmax().build(rng());
    const IndexList idx = iota_list(0, c.size());
    const Tensor probs = net.predict(c.batch(idx));
    std::size_t hit = 0;
    for (std::size_t i = 0; i < c.size(); ++i) {
      std::size_t best = 0;
      for (std::size_t j = 1; j < k; ++j)
        if (probs.at(i, j) > probs.at(i, best)) best = j;
      hit += best == static_cast<std::size_t>(c.labels[i]);
    }
    CHECK(accuracy(net, c, idx) == static_cast<Real>(hit) / c.size());
  }
}

TEST_CASE("accuracy of perfect and constant predictors") {
  // Identity dense on one-hot inputs is perfect.
  Corpus c;
  c.sample_shape = {10};
  c.class_count = 10;
  c.samples = Tensor({100, 10});
  for (std::size_t i = 0; i < 100; ++i) {
    c.labels.push_back(static_cast<int>(i % 10));
    c.samples[i * 10 + i % 10] = 5.0;
  }
  Network id = NetworkBuilder({10}).dense(10).softmax().build(1);
  for (auto& v : id.layers()[0].params[0].data()) v = 0;
  for (std::size_t i = 0; i < 10; ++i) id.layers()[0].params[0][i * 10 + i] = 1;
  for (auto& v : id.layers()[0].params[1].data()) v = 0;
  const IndexList all = iota_list(0, 100);
  CHECK(accuracy(id, c, all) == 1.0);
  // Constant predictor: argmax ties go to class 0.
  for (auto& v : id.layers()[0].params[0].data()) v = 0;
  CHECK(accuracy(id, c, all) == doctest::Approx(0.1));
}

TEST_CASE("feature layout arithmetic") {
  Network net = mlp3(5, 4, 1);
  CHECK(net.parametric_layer_count() == 3);
  CHECK(FeatureSpec::white_box().feature_length(net) == 12);
  CHECK(FeatureSpec::black_box().feature_length(net) == 9);
  FeatureSpec full = FeatureSpec::white_box();
  full.gradient_reduction = GradientReduction::last_layer_full;
  full.include_activations = true;
  CHECK(full.feature_length(net) == 4 + 4 + 1 + (6 * 4 + 4) + 6);
  const auto mask = magnitude_columns(FeatureSpec::white_box(), net);
  CHECK(mask == std::vector<std::uint8_t>{0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 1, 1});
}

TEST_CASE("feature spec access rules") {
  CHECK_THROWS_AS(FeatureSpec::white_box().validate(Access::black_box), Error);
  try {
    FeatureSpec::white_box().validate(Access::black_box);
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::access);
  }
  CHECK_NOTHROW(FeatureSpec::black_box().validate(Access::black_box));
  FeatureSpec none{};
  none.include_posterior = none.include_pred_label = none.include_loss = none.include_gradient = false;
  CHECK_THROWS_AS(none.validate(Access::white_box), Error);
  Network net = mlp3(3, 2, 1);
  CHECK_THROWS_AS(extract(net, Tensor({3}, 0.0), 0, FeatureSpec::white_box(), Access::black_box), Error);
}

TEST_CASE("confidently correct sample has near-zero loss feature") {
  Network net = NetworkBuilder({2}).dense(2).softmax().build(1);
  auto& l = net.layers()[0];
  l.params[0][0] = 50;
  l.params[0][1] = 0;
  l.params[0][2] = 0;
  l.params[0][3] = 0;
  l.params[1][0] = l.params[1][1] = 0;
  const auto rec = extract(net, Tensor({2}, std::vector<Real>{1.0, 0.0}), 0, FeatureSpec::white_box(), Access::white_box);
  REQUIRE(rec.features.size() == 2 + 2 + 1 + 1);
  CHECK(rec.features[2] == 1.0);
  CHECK(rec.features[3] == 0.0);
  CHECK(rec.features[4] < 1e-12);
}

TEST_CASE("gradient norm features match hand-written backprop") {
  const Network net = mlp3(5, 3, 17);
  const Tensor x = random_tensor({20, 5}, 18);
  const auto y = remi::test::random_labels(20, 3, 19);
  const Tensor g = gradient_summaries(net, x, y, GradientReduction::per_layer_norms);
  REQUIRE(g.shape() == Shape{20, 3});
  for (std::size_t i = 0; i < 20; ++i) {
    const auto sq = remi::test::manual_layer_sq_norms(net, x.rows(i, 1).data(), y[i]);
    for (std::size_t l = 0; l < 3; ++l) {
      const Real expect = std::sqrt(sq[l]);
      CHECK(std::abs(g.at(i, l) - expect) <= 1e-8 * std::max(expect, 1e-300));
    }
  }
}

TEST_CASE("attack dataset is balanced and labelled by membership") {
  const Corpus c = blobs(2, 200, 3, 1.0, 2.0, 4);
  const Network net = mlp3(3, 2, 5);
  const IndexList members = iota_list(0, 100), nonmembers = iota_list(100, 400);
  const auto recs = build_attack_dataset(net, c, members, iota_list(100, 200), FeatureSpec::black_box(), Access::black_box, 1);
  CHECK(recs.size() == 200);
  const auto bal = build_attack_dataset(net, c, members, nonmembers, FeatureSpec::black_box(), Access::black_box, 1);
  REQUIRE(bal.size() == 200);
  std::size_t ones = 0;
  for (const auto& r : bal) {
    ones += r.membership;
    const bool is_member = r.source_index < 100;
    CHECK(r.membership == (is_member ? 1 : 0));
  }
  CHECK(ones == 100);
  CHECK_THROWS_AS(build_attack_dataset(net, c, members, members, FeatureSpec::black_box(), Access::black_box, 1), Error);

  remi::test::TempDir dir("att");
  write_attack_csv(dir / "a.csv", bal, FeatureSpec::black_box());
  FeatureSpec spec;
  const auto back = read_attack_csv(dir / "a.csv", &spec);
  REQUIRE(back.size() == bal.size());
  CHECK(back[7].features == bal[7].features);
  CHECK(back[150].membership == bal[150].membership);
  CHECK(!spec.include_gradient);
}

TEST_CASE("attack accuracy and member rate match brute force") {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<Real> u(0, 1);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Real> p(37);
    std::vector<int> z(37);
    std::size_t hit = 0, flagged = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      p[i] = u(rng);
      z[i] = static_cast<int>(rng() % 2);
      hit += (p[i] > 0.5 ? 1 : 0) == z[i];
      flagged += p[i] > 0.5;
    }
    CHECK(attack_accuracy(p, z) == static_cast<Real>(hit) / 37);
    CHECK(member_rate(p) == static_cast<Real>(flagged) / 37);
  }
  const std::vector<Real> half{0.5};
  CHECK(member_rate(half) == 0.0);
}

TEST_CASE("gaussian KL properties") {
  const GaussianFit f{0.3, 0.7, 10};
  CHECK(kl_gaussian(f, f) == 0.0);
  CHECK(kl_gaussian_shared(f, f) == 0.0);
  const GaussianFit p{1.0, 1.0, 1000}, q{0.0, 1.0, 1000};
  CHECK(kl_gaussian_shared(p, q) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(kl_gaussian(p, q) == doctest::Approx(0.5).epsilon(1e-12));
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<Real> mu(-3, 3), sd(0.01, 4);
  for (int i = 0; i < 100; ++i) {
    const GaussianFit a{mu(rng), sd(rng), 5}, b{mu(rng), sd(rng), 5};
    CHECK(kl_gaussian(a, b) >= 0.0);
  }
  const std::vector<Real> v{1, 2, 3, 4};
  const auto fit = fit_gaussian(v);
  CHECK(fit.mu == 2.5);
  CHECK(fit.sigma == doctest::Approx(std::sqrt(5.0 / 3.0)));
  const std::vector<Real> flat{0.2, 0.2, 0.2};
  CHECK(fit_gaussian(flat).sigma == kSigmaFloor);
}

TEST_CASE("privacy model learns a planted signal and not noise") {
  std::mt19937_64 rng(5);
  std::normal_distribution<Real> n(0, 1);
  std::vector<AttackFeatureRecord> signal, noise;
  for (std::size_t i = 0; i < 600; ++i) {
    AttackFeatureRecord r;
    r.membership = static_cast<int>(i % 2);
    r.features = {n(rng) + (r.membership ? 2.0 : -2.0), n(rng), n(rng)};
    r.source_index = i;
    signal.push_back(r);
    r.features = {n(rng), n(rng), n(rng)};
    noise.push_back(r);
  }
  FeatureSpec spec = FeatureSpec::black_box();
  spec.include_posterior = false;
  spec.include_pred_label = false;
  spec.include_loss = false;
  spec.include_activations = true;  // 3 opaque columns
  PrivacyTrainConfig cfg;
  cfg.train.epochs = 20;
  cfg.train.seed = 2;
  cfg.log_magnitudes = false;
  const PrivacyModel g = train_privacy_model(signal, cfg, Variant::mf, Access::white_box, spec);
  CHECK(g.heldout_accuracy >= 0.9);
  const PrivacyModel h = train_privacy_model(noise, cfg, Variant::mf, Access::white_box, spec);
  CHECK(h.heldout_accuracy == doctest::Approx(0.5).epsilon(0.2));

  Tensor probe({10000, 3});
  for (auto& v : probe.data()) v = n(rng) * 100;
  for (auto p : attack_probs(g, probe)) {
    CHECK(p >= 0.0);
    CHECK(p <= 1.0);
  }

  remi::test::TempDir dir("g");
  save_privacy_model(g, dir / "g.remi");
  const PrivacyModel back = load_privacy_model(dir / "g.remi");
  CHECK(back.feature_shift == g.feature_shift);
  CHECK(back.heldout_accuracy == g.heldout_accuracy);
  CHECK(attack_prob(back, signal[3].features) == attack_prob(g, signal[3].features));
}

TEST_CASE("magnitude compression feeds log values to the attack model") {
  std::vector<AttackFeatureRecord> recs;
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<Real> u(0, 1);
  for (std::size_t i = 0; i < 200; ++i) {
    const int z = static_cast<int>(i % 2);
    recs.push_back({{u(rng), u(rng), z ? 1e-8 * u(rng) : 0.5 + u(rng)}, z, i});
  }
  FeatureSpec spec = FeatureSpec::black_box();
  spec.include_pred_label = false;
  Network k2 = NetworkBuilder({1}).dense(2).softmax().build(1);
  CHECK(spec.feature_length(k2) == 3);
  const auto mask = magnitude_columns(spec, k2);
  CHECK(mask == std::vector<std::uint8_t>{0, 0, 1});
  PrivacyTrainConfig cfg;
  cfg.train.epochs = 10;
  const PrivacyModel g = train_privacy_model(recs, cfg, Variant::mf, Access::black_box, spec, mask);
  CHECK(g.log_columns == mask);
  const auto t = compress_features(g, recs[0].features);
  CHECK(t[0] == recs[0].features[0]);
  CHECK(t[2] == doctest::Approx(std::log(recs[0].features[2] + kMagnitudeFloor)));
  CHECK(g.heldout_accuracy >= 0.95);
}

TEST_CASE("differentiable attack probability matches the plain path") {
  std::vector<AttackFeatureRecord> recs;
  std::mt19937_64 rng(1);
  std::normal_distribution<Real> n(0, 1);
  for (std::size_t i = 0; i < 100; ++i)
    recs.push_back({{n(rng) + (i % 2 ? 1.0 : 0.0), std::abs(n(rng))}, static_cast<int>(i % 2), i});
  FeatureSpec spec = FeatureSpec::black_box();
  spec.include_pred_label = false;
  spec.include_posterior = false;
  spec.include_activations = true;
  PrivacyTrainConfig cfg;
  cfg.train.epochs = 5;
  cfg.log_magnitudes = true;
  const std::vector<std::uint8_t> mask{0, 1};
  const PrivacyModel g = train_privacy_model(recs, cfg, Variant::mia, Access::white_box, spec, mask);
  const auto before = g.net.flatten_params();

  Tensor f({3, 2}, std::vector<Real>{0.2, 0.5, -1.0, 2.0, 0.7, 0.01});
  Tape t;
  Var fv = t.leaf(f);
  Var p = attack_prob_var(t, g, fv);
  const auto plain = attack_probs(g, f);
  for (std::size_t i = 0; i < 3; ++i) CHECK(t.value(p)[i] == doctest::Approx(plain[i]).epsilon(1e-12));
  t.backward(ops::mean(t, p));
  // G is frozen: backward touches the features only.
  CHECK(g.net.flatten_params() == before);
  for (const auto& l : g.net.layers())
    for (const auto& w : l.params) CHECK(!w.has_grad());

  // Finite-difference check of d mean(G) / d features.
  const auto grad = std::vector<Real>(t.grad(fv).begin(), t.grad(fv).end());
  for (std::size_t i = 0; i < f.size(); ++i) {
    Tensor up = f, down = f;
    up[i] += 1e-6;
    down[i] -= 1e-6;
    auto mean = [&](const Tensor& x) {
      const auto v = attack_probs(g, x);
      return (v[0] + v[1] + v[2]) / 3;
    };
    const Real fd = (mean(up) - mean(down)) / 2e-6;
    CHECK(std::abs(grad[i] - fd) <= 1e-6 * (std::abs(fd) + 1e-6));
  }
}
