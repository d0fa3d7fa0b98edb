#include "remi/privacy_model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

#include "remi/error.hpp"
#include "remi/random.hpp"

namespace remi {

const char* variant_name(Variant v) noexcept { return v == Variant::mf ? "mf" : "mia"; }

Variant parse_variant(const std::string& s) {
  if (s == "mf" || s == "MF") return Variant::mf;
  if (s == "mia" || s == "MIA") return Variant::mia;
  fail(ErrorCode::config, "unknown privacy model variant '" + s + "'");
}

PrivacyModel train_privacy_model(std::span<const AttackFeatureRecord> records, const PrivacyTrainConfig& cfg, Variant variant,
                                 Access access, const FeatureSpec& spec, std::span<const std::uint8_t> magnitudes) {
  spec.validate(access);
  if (!(cfg.holdout_fraction > 0 && cfg.holdout_fraction < 1)) fail(ErrorCode::input, "holdout_fraction must lie in (0,1)");
  if (records.empty()) fail(ErrorCode::input, "no attack records");
  const std::size_t width = records.front().features.size();
  IndexList members, nonmembers;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].features.size() != width) fail(ErrorCode::dimension, "attack records have inconsistent feature lengths");
    if (records[i].membership != 0 && records[i].membership != 1) fail(ErrorCode::input, "membership label must be 0 or 1");
    (records[i].membership ? members : nonmembers).push_back(i);
  }
  if (members.size() < cfg.min_per_class || nonmembers.size() < cfg.min_per_class)
    fail(ErrorCode::input, "attack training needs at least " + std::to_string(cfg.min_per_class) + " records per class");

  IndexList fit_rows, holdout_rows;
  for (auto* side : {&members, &nonmembers}) {
    const auto perm = permutation(side->size(), cfg.train.seed, side == &members ? 11 : 12);
    const auto n_hold = static_cast<std::size_t>(std::llround(cfg.holdout_fraction * static_cast<Real>(side->size())));
    for (std::size_t k = 0; k < side->size(); ++k) (k < n_hold ? holdout_rows : fit_rows).push_back((*side)[perm[k]]);
  }
  std::sort(fit_rows.begin(), fit_rows.end());
  std::sort(holdout_rows.begin(), holdout_rows.end());

  PrivacyModel g;
  g.spec = spec;
  g.variant = variant;
  g.access = access;
  if (cfg.log_magnitudes && !magnitudes.empty()) {
    if (magnitudes.size() != width) fail(ErrorCode::dimension, "magnitude mask does not match the record width");
    g.log_columns.assign(magnitudes.begin(), magnitudes.end());
  }
  std::vector<std::vector<Real>> inputs;
  inputs.reserve(records.size());
  for (const auto& r : records) inputs.push_back(compress_features(g, r.features));

  g.feature_shift.assign(width, 0.0);
  g.feature_inv_scale.assign(width, 1.0);
  bool any_variance = false;
  for (std::size_t j = 0; j < width; ++j) {
    Real m = 0, v = 0;
    for (auto r : fit_rows) m += inputs[r][j];
    m /= static_cast<Real>(fit_rows.size());
    for (auto r : fit_rows) v += (inputs[r][j] - m) * (inputs[r][j] - m);
    const Real sd = std::sqrt(v / static_cast<Real>(fit_rows.size()));
    g.feature_shift[j] = m;
    if (sd > 1e-12) {
      g.feature_inv_scale[j] = 1.0 / sd;
      any_variance = true;
    }
  }
  if (!any_variance) g.warnings.push_back("all attack features have zero variance; the attack model cannot separate members");

  Corpus table;
  table.name = "attack";
  table.class_count = 2;
  table.sample_shape = {width};
  table.samples = Tensor({records.size(), width});
  for (std::size_t i = 0; i < records.size(); ++i) {
    for (std::size_t j = 0; j < width; ++j)
      table.samples.at(i, j) = (inputs[i][j] - g.feature_shift[j]) * g.feature_inv_scale[j];
    table.labels.push_back(records[i].membership);
  }
  ArchSpec arch{.kind = "mlp", .channels = {}, .hidden = cfg.hidden};
  Network net = build_network(arch, {width}, 2, mix_seed(cfg.train.seed, 0x6A7));
  auto result = train(std::move(net), table, fit_rows, holdout_rows, cfg.train);
  g.net = std::move(result.net);
  g.heldout_accuracy = evaluate(g.net, table, holdout_rows).accuracy;
  return g;
}

std::vector<Real> compress_features(const PrivacyModel& g, std::span<const Real> features) {
  std::vector<Real> out(features.begin(), features.end());
  if (g.log_columns.empty()) return out;
  if (g.log_columns.size() != out.size()) fail(ErrorCode::dimension, "feature vector does not match the compression mask");
  for (std::size_t j = 0; j < out.size(); ++j)
    if (g.log_columns[j]) out[j] = std::log(std::max(out[j], 0.0) + kMagnitudeFloor);
  return out;
}

std::vector<Real> attack_probs(const PrivacyModel& g, const Tensor& features) {
  if (features.rank() != 2 || features.dim(1) != g.feature_length())
    fail(ErrorCode::dimension, "attack features " + shape_str(features.shape()) + " do not match model width " +
                                   std::to_string(g.feature_length()));
  Tape tape;
  Var p = attack_prob_var(tape, g, tape.constant(features));
  const auto v = tape.value(p).data();
  return {v.begin(), v.end()};
}

Real attack_prob(const PrivacyModel& g, std::span<const Real> features) {
  return attack_probs(g, Tensor({1, features.size()}, std::vector<Real>(features.begin(), features.end())))[0];
}

Var attack_prob_var(Tape& tape, const PrivacyModel& g, Var features) {
  Var x = features;
  if (!g.log_columns.empty()) x = ops::log_cols(tape, x, g.log_columns, kMagnitudeFloor);
  x = ops::affine_cols(tape, x, g.feature_shift, g.feature_inv_scale);
  Var probs = g.net.forward_frozen(tape, x);
  return ops::column(tape, probs, 1);
}

Real attack_accuracy(std::span<const Real> probs, std::span<const int> membership) {
  if (probs.size() != membership.size() || probs.empty()) fail(ErrorCode::input, "attack_accuracy: size mismatch");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) hit += static_cast<int>(probs[i] > 0.5) == membership[i];
  return static_cast<Real>(hit) / static_cast<Real>(probs.size());
}

Real member_rate(std::span<const Real> probs) {
  if (probs.empty()) fail(ErrorCode::input, "member_rate of an empty set");
  return static_cast<Real>(std::count_if(probs.begin(), probs.end(), [](Real p) { return p > 0.5; })) /
         static_cast<Real>(probs.size());
}

Real mean_of(std::span<const Real> values) {
  if (values.empty()) fail(ErrorCode::input, "mean of an empty set");
  Real s = 0;
  for (auto v : values) s += v;
  return s / static_cast<Real>(values.size());
}

GaussianFit fit_gaussian(std::span<const Real> values) {
  if (values.size() < 2) fail(ErrorCode::input, "fit_gaussian needs at least two values");
  const Real mu = mean_of(values);
  Real ss = 0;
  for (auto v : values) ss += (v - mu) * (v - mu);
  const Real sd = std::sqrt(ss / static_cast<Real>(values.size() - 1));
  return {mu, std::max(sd, kSigmaFloor), values.size()};
}

Real kl_gaussian(const GaussianFit& p, const GaussianFit& q) {
  const Real d = p.mu - q.mu;
  return std::log(q.sigma / p.sigma) + (p.sigma * p.sigma + d * d) / (2.0 * q.sigma * q.sigma) - 0.5;
}

Real pooled_sigma(const GaussianFit& p, const GaussianFit& q) {
  if (p.count + q.count <= 2) return std::max((p.sigma + q.sigma) / 2.0, kSigmaFloor);
  const Real np = static_cast<Real>(p.count), nq = static_cast<Real>(q.count);
  const Real v = ((np - 1) * p.sigma * p.sigma + (nq - 1) * q.sigma * q.sigma) / (np + nq - 2);
  return std::max(std::sqrt(v), kSigmaFloor);
}

Real kl_gaussian_shared(const GaussianFit& p, const GaussianFit& q) {
  const Real s = pooled_sigma(p, q);
  const Real d = p.mu - q.mu;
  return d * d / (2.0 * s * s);
}

void save_privacy_model(const PrivacyModel& g, const std::filesystem::path& path) {
  save_checkpoint(g.net, path);
  nlohmann::json side{{"variant", variant_name(g.variant)},
                      {"access", access_name(g.access)},
                      {"feature_spec", g.spec},
                      {"feature_shift", g.feature_shift},
                      {"feature_inv_scale", g.feature_inv_scale},
                      {"log_columns", g.log_columns},
                      {"heldout_accuracy", g.heldout_accuracy},
                      {"warnings", g.warnings}};
  std::ofstream out(path.string() + ".json");
  if (!out) fail(ErrorCode::io, "cannot write sidecar for " + path.string());
  out << side.dump(2) << '\n';
}

PrivacyModel load_privacy_model(const std::filesystem::path& path) {
  PrivacyModel g;
  g.net = load_checkpoint(path);
  std::ifstream in(path.string() + ".json");
  if (!in) fail(ErrorCode::io, "missing sidecar for " + path.string());
  try {
    const auto side = nlohmann::json::parse(in);
    g.variant = parse_variant(side.at("variant").get<std::string>());
    g.access = parse_access(side.at("access").get<std::string>());
    g.spec = side.at("feature_spec").get<FeatureSpec>();
    side.at("feature_shift").get_to(g.feature_shift);
    side.at("feature_inv_scale").get_to(g.feature_inv_scale);
    g.log_columns = side.value("log_columns", std::vector<std::uint8_t>{});
    side.at("heldout_accuracy").get_to(g.heldout_accuracy);
    side.at("warnings").get_to(g.warnings);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::format, "bad sidecar for " + path.string() + ": " + e.what());
  }
  const auto n = g.net.input_size();
  if (g.feature_shift.size() != n || g.feature_inv_scale.size() != n || (!g.log_columns.empty() && g.log_columns.size() != n))
    fail(ErrorCode::format, "sidecar standardization does not match the attack network input");
  return g;
}

}  // namespace remi
