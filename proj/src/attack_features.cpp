#include "remi/attack_features.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "remi/error.hpp"
#include "remi/optim.hpp"
#include "remi/random.hpp"
#include "remi/training.hpp"

namespace remi {

const char* access_name(Access a) noexcept { return a == Access::white_box ? "white_box" : "black_box"; }

Access parse_access(const std::string& s) {
  if (s == "white_box" || s == "white-box" || s == "whitebox") return Access::white_box;
  if (s == "black_box" || s == "black-box" || s == "blackbox") return Access::black_box;
  fail(ErrorCode::config, "unknown access mode '" + s + "'");
}

FeatureSpec FeatureSpec::black_box() {
  FeatureSpec s;
  s.include_gradient = false;
  return s;
}

FeatureSpec FeatureSpec::white_box() { return FeatureSpec{}; }

void FeatureSpec::validate(Access access) const {
  if (!include_posterior && !include_pred_label && !include_loss && !include_gradient && !include_activations)
    fail(ErrorCode::input, "feature spec enables no feature block");
  if (needs_white_box() && access != Access::white_box)
    fail(ErrorCode::access, "gradient/activation features require white-box access");
}

namespace {

std::size_t final_dense_index(const Network& net) {
  const auto& layers = net.layers();
  for (std::size_t i = layers.size(); i-- > 0;)
    if (layers[i].kind == LayerKind::dense) return i;
  fail(ErrorCode::input, "network has no dense layer");
}

std::size_t gradient_width(const Network& net, GradientReduction r) {
  if (r == GradientReduction::per_layer_norms) return net.parametric_layer_count();
  const auto& l = net.layers()[final_dense_index(net)];
  return static_cast<std::size_t>(l.hyper[0]) * l.hyper[1] + l.hyper[1];
}

}  // namespace

std::size_t FeatureSpec::feature_length(const Network& net) const {
  const std::size_t k = net.class_count();
  std::size_t n = 0;
  if (include_posterior) n += k;
  if (include_pred_label) n += k;
  if (include_loss) n += 1;
  if (include_gradient) n += gradient_width(net, gradient_reduction);
  if (include_activations) n += net.layers()[final_dense_index(net)].hyper[0];
  return n;
}

std::vector<std::uint8_t> magnitude_columns(const FeatureSpec& spec, const Network& net) {
  std::vector<std::uint8_t> mask(spec.feature_length(net), 0);
  const std::size_t k = net.class_count();
  std::size_t at = (spec.include_posterior ? k : 0) + (spec.include_pred_label ? k : 0);
  if (spec.include_loss) mask[at++] = 1;
  if (spec.include_gradient)
    for (std::size_t n = gradient_width(net, spec.gradient_reduction); n > 0; --n) mask[at++] = 1;
  return mask;
}

void to_json(nlohmann::json& j, const FeatureSpec& s) {
  j = nlohmann::json{{"include_posterior", s.include_posterior},
                     {"include_pred_label", s.include_pred_label},
                     {"include_loss", s.include_loss},
                     {"include_gradient", s.include_gradient},
                     {"include_activations", s.include_activations},
                     {"gradient_reduction", s.gradient_reduction == GradientReduction::per_layer_norms ? "per_layer_norms" : "last_layer_full"},
                     {"differentiable_posterior", s.differentiable_posterior},
                     {"differentiable_loss", s.differentiable_loss}};
}

void from_json(const nlohmann::json& j, FeatureSpec& s) {
  s = FeatureSpec{};
  s.include_posterior = j.value("include_posterior", s.include_posterior);
  s.include_pred_label = j.value("include_pred_label", s.include_pred_label);
  s.include_loss = j.value("include_loss", s.include_loss);
  s.include_gradient = j.value("include_gradient", s.include_gradient);
  s.include_activations = j.value("include_activations", s.include_activations);
  const std::string red = j.value("gradient_reduction", std::string("per_layer_norms"));
  if (red == "per_layer_norms")
    s.gradient_reduction = GradientReduction::per_layer_norms;
  else if (red == "last_layer_full")
    s.gradient_reduction = GradientReduction::last_layer_full;
  else
    fail(ErrorCode::config, "unknown gradient_reduction '" + red + "'");
  s.differentiable_posterior = j.value("differentiable_posterior", s.differentiable_posterior);
  s.differentiable_loss = j.value("differentiable_loss", s.differentiable_loss);
}

Tensor gradient_summaries(const Network& net, const Tensor& batch, std::span<const int> labels, GradientReduction reduction) {
  const std::size_t n = batch.dim(0);
  if (labels.size() != n) fail(ErrorCode::dimension, "gradient_summaries: label count does not match batch");
  Network scratch = net;
  const std::size_t width = gradient_width(scratch, reduction);
  const std::size_t last = final_dense_index(scratch);
  Tensor out({n, width});
  for (std::size_t i = 0; i < n; ++i) {
    scratch.zero_grads();
    Tape tape;
    Var x = tape.constant(batch.rows(i, 1));
    Var probs = scratch.forward(tape, x);
    Var loss = ops::mean(tape, ops::nll(tape, probs, labels.subspan(i, 1), kProbEps));
    tape.backward(loss);
    std::size_t col = 0;
    if (reduction == GradientReduction::per_layer_norms) {
      for (const auto& l : scratch.layers()) {
        if (!l.has_params()) continue;
        Real sq = 0;
        for (const auto& p : l.params)
          for (auto g : p.grad()) sq += g * g;
        out.at(i, col++) = std::sqrt(sq);
      }
    } else {
      for (const auto& p : scratch.layers()[last].params)
        for (auto g : p.grad()) out.at(i, col++) = g;
    }
  }
  return out;
}

Tensor penultimate_activations(const Network& net, const Tensor& batch) {
  const Tensor a = net.activations(batch, final_dense_index(net));
  return a.reshaped({batch.dim(0), a.size() / batch.dim(0)});
}

Var assemble_features(Tape& tape, Var probs, std::span<const int> labels, const FeatureSpec& spec,
                      const Tensor* gradient_block, const Tensor* activation_block) {
  const Tensor& pv = tape.value(probs);
  const std::size_t batch = pv.dim(0), k = pv.dim(1);
  std::vector<Var> parts;
  if (spec.include_posterior) parts.push_back(spec.differentiable_posterior ? probs : tape.constant(pv));
  if (spec.include_pred_label) {
    Tensor onehot({batch, k});
    for (std::size_t b = 0; b < batch; ++b) onehot.at(b, argmax_row(pv, b)) = 1.0;
    parts.push_back(tape.constant(std::move(onehot)));
  }
  if (spec.include_loss) {
    Var loss = ops::nll(tape, probs, labels, kProbEps);
    parts.push_back(spec.differentiable_loss ? loss : tape.constant(tape.value(loss)));
  }
  if (spec.include_gradient) {
    if (!gradient_block || gradient_block->dim(0) != batch) fail(ErrorCode::state, "gradient block missing for feature assembly");
    parts.push_back(tape.constant(*gradient_block));
  }
  if (spec.include_activations) {
    if (!activation_block || activation_block->dim(0) != batch) fail(ErrorCode::state, "activation block missing for feature assembly");
    parts.push_back(tape.constant(*activation_block));
  }
  return ops::concat_cols(tape, parts);
}

Tensor extract_features(const Network& net, const Corpus& corpus, std::span<const std::size_t> indices,
                        const FeatureSpec& spec, Access access) {
  spec.validate(access);
  if (indices.empty()) fail(ErrorCode::input, "extract_features needs at least one sample");
  const Tensor batch = corpus.batch(indices);
  const auto labels = corpus.labels_of(indices);
  Tensor grads, acts;
  if (spec.include_gradient) grads = gradient_summaries(net, batch, labels, spec.gradient_reduction);
  if (spec.include_activations) acts = penultimate_activations(net, batch);
  Tape tape;
  Var probs = tape.constant(net.predict(batch));
  Var f = assemble_features(tape, probs, labels, spec, spec.include_gradient ? &grads : nullptr,
                            spec.include_activations ? &acts : nullptr);
  return tape.value(f);
}

AttackFeatureRecord extract(const Network& net, const Tensor& sample, int label, const FeatureSpec& spec, Access access) {
  spec.validate(access);
  Shape s{1};
  s.insert(s.end(), sample.shape().begin(), sample.shape().end());
  Corpus one;
  one.sample_shape = sample.shape();
  one.samples = sample.reshaped(s);
  one.labels = {label};
  one.class_count = net.class_count();
  const std::size_t idx = 0;
  const Tensor f = extract_features(net, one, std::span(&idx, 1), spec, access);
  AttackFeatureRecord r;
  r.features.assign(f.data().begin(), f.data().end());
  return r;
}

std::vector<AttackFeatureRecord> build_attack_dataset(const Network& net, const Corpus& corpus,
                                                      std::span<const std::size_t> members,
                                                      std::span<const std::size_t> nonmembers, const FeatureSpec& spec,
                                                      Access access, std::uint64_t seed) {
  if (members.empty() || nonmembers.empty()) fail(ErrorCode::input, "attack dataset needs both members and nonmembers");
  IndexList m(members.begin(), members.end()), o(nonmembers.begin(), nonmembers.end());
  std::sort(m.begin(), m.end());
  std::sort(o.begin(), o.end());
  IndexList both;
  std::set_intersection(m.begin(), m.end(), o.begin(), o.end(), std::back_inserter(both));
  if (!both.empty()) fail(ErrorCode::input, "member and nonmember sets overlap");
  auto downsample = [&](IndexList& v, std::size_t n, std::uint64_t stream) {
    if (v.size() <= n) return;
    const auto perm = permutation(v.size(), seed, stream);
    IndexList keep(n);
    for (std::size_t i = 0; i < n; ++i) keep[i] = v[perm[i]];
    std::sort(keep.begin(), keep.end());
    v = std::move(keep);
  };
  const std::size_t n = std::min(m.size(), o.size());
  downsample(m, n, 1);
  downsample(o, n, 2);
  std::vector<AttackFeatureRecord> out;
  out.reserve(2 * n);
  for (int z : {1, 0}) {
    const IndexList& idx = z ? m : o;
    const Tensor f = extract_features(net, corpus, idx, spec, access);
    const std::size_t w = f.dim(1);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      AttackFeatureRecord r;
      r.features.assign(f.data().begin() + static_cast<std::ptrdiff_t>(i * w), f.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * w));
      r.membership = z;
      r.source_index = idx[i];
      out.push_back(std::move(r));
    }
  }
  return out;
}

void write_attack_csv(const std::filesystem::path& path, std::span<const AttackFeatureRecord> records, const FeatureSpec& spec) {
  std::ofstream out(path);
  if (!out) fail(ErrorCode::io, "cannot write " + path.string());
  out.precision(17);
  out << "# feature_spec: " << nlohmann::json(spec).dump() << '\n';
  const std::size_t w = records.empty() ? 0 : records.front().features.size();
  for (std::size_t j = 0; j < w; ++j) out << 'f' << j << ',';
  out << "z,source_index\n";
  for (const auto& r : records) {
    if (r.features.size() != w) fail(ErrorCode::dimension, "attack records have inconsistent feature lengths");
    for (auto v : r.features) out << v << ',';
    out << r.membership << ',' << r.source_index << '\n';
  }
}

std::vector<AttackFeatureRecord> read_attack_csv(const std::filesystem::path& path, FeatureSpec* spec) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::io, "cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  const std::string prefix = "# feature_spec: ";
  if (line.rfind(prefix, 0) != 0) fail(ErrorCode::format, path.string() + ": missing feature_spec comment");
  if (spec) *spec = nlohmann::json::parse(line.substr(prefix.size())).get<FeatureSpec>();
  std::getline(in, line);
  const auto cols = static_cast<std::size_t>(std::count(line.begin(), line.end(), ',')) + 1;
  if (cols < 3) fail(ErrorCode::format, path.string() + ": malformed header");
  std::vector<AttackFeatureRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream is(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(is, cell, ',')) cells.push_back(cell);
    if (cells.size() != cols) fail(ErrorCode::format, path.string() + ": ragged row");
    AttackFeatureRecord r;
    for (std::size_t j = 0; j + 2 < cols; ++j) r.features.push_back(std::stod(cells[j]));
    r.membership = std::stoi(cells[cols - 2]);
    r.source_index = std::stoul(cells[cols - 1]);
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace remi
