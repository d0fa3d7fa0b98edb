#include "remi/unlearner.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>

#include "remi/error.hpp"
#include "remi/optim.hpp"
#include "remi/random.hpp"

namespace remi {

namespace {
using Clock = std::chrono::steady_clock;
Real seconds_since(Clock::time_point t) { return std::chrono::duration<Real>(Clock::now() - t).count(); }
}  // namespace

void UnlearnConfig::validate() const {
  if (!(lambda2 >= 0 && lambda2 <= 1)) fail(ErrorCode::input, "unlearn config: lambda2 must lie in [0,1]");
  if (!(learning_rate > 0)) fail(ErrorCode::input, "unlearn config: learning rate must be > 0");
  if (max_epochs < 1) fail(ErrorCode::input, "unlearn config: max_epochs must be >= 1");
  if (!(stop_threshold >= 0 && stop_threshold <= 1)) fail(ErrorCode::input, "unlearn config: stop threshold must lie in [0,1]");
  if (batch_size < 1) fail(ErrorCode::input, "unlearn config: batch_size must be >= 1");
  if (!(max_grad_norm >= 0)) fail(ErrorCode::input, "unlearn config: max_grad_norm must be >= 0");
}

void UnlearnTrace::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) fail(ErrorCode::io, "cannot write " + path.string());
  out.precision(17);
  out << "epoch,fidelity_loss,privacy_loss,mf_acc_df,test_acc\n";
  for (const auto& e : epochs)
    out << e.epoch << ',' << e.fidelity_loss << ',' << e.privacy_loss << ',' << e.mf_acc_df << ',' << e.test_acc << '\n';
}

Real privacy_loss_value(Real mean_prob) { return -std::log(std::max(1.0 - mean_prob + kProbEps, kProbEps)); }

Var privacy_loss(Tape& tape, const PrivacyModel& g, Var features) {
  Var p = attack_prob_var(tape, g, features);
  return ops::neg_log_complement(tape, ops::mean(tape, p), kProbEps);
}

UnlearnResult remi_unlearn(Network net, const Corpus& corpus, std::span<const std::size_t> forget,
                           std::span<const std::size_t> out_of_sample, const PrivacyModel& g, const UnlearnConfig& cfg,
                           std::span<const std::size_t> monitor) {
  cfg.validate();
  if (forget.empty() || out_of_sample.empty()) fail(ErrorCode::input, "unlearning needs non-empty D_f and D_o");
  {
    IndexList f(forget.begin(), forget.end()), o(out_of_sample.begin(), out_of_sample.end()), both;
    std::sort(f.begin(), f.end());
    std::sort(o.begin(), o.end());
    std::set_intersection(f.begin(), f.end(), o.begin(), o.end(), std::back_inserter(both));
    if (!both.empty()) fail(ErrorCode::input, "D_f and D_o overlap");
  }
  g.spec.validate(g.access);
  if (g.feature_length() != g.spec.feature_length(net))
    fail(ErrorCode::dimension, "guide expects " + std::to_string(g.feature_length()) + " features, network yields " +
                                   std::to_string(g.spec.feature_length(net)));
  if (monitor.empty()) monitor = out_of_sample;

  Sgd sgd({cfg.learning_rate, cfg.momentum, cfg.weight_decay});
  const Real l1 = cfg.lambda1(), l2 = cfg.lambda2;
  UnlearnTrace trace;
  Real elapsed = 0, privacy_time = 0;
  std::size_t stalled_steps = 0;
  std::size_t o_pass = 0, o_pos = 0;
  auto o_order = permutation(out_of_sample.size(), cfg.seed, 0x0D0 + o_pass);

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto t_epoch = Clock::now();
    std::vector<std::pair<IndexList, IndexList>> batches;
    if (cfg.batching == UnlearnBatching::proportional) {
      const std::size_t nf = forget.size(), total_n = nf + out_of_sample.size();
      const auto order = permutation(total_n, cfg.seed, epoch);
      for (std::size_t pos = 0; pos < total_n; pos += cfg.batch_size) {
        auto& [bf, bo] = batches.emplace_back();
        for (std::size_t k = pos; k < std::min(pos + cfg.batch_size, total_n); ++k)
          order[k] < nf ? bf.push_back(forget[order[k]]) : bo.push_back(out_of_sample[order[k] - nf]);
      }
    } else {
      const auto order = permutation(forget.size(), cfg.seed, epoch);
      for (std::size_t pos = 0; pos < order.size(); pos += cfg.batch_size) {
        const std::size_t count = std::min(cfg.batch_size, order.size() - pos);
        auto& [bf, bo] = batches.emplace_back(IndexList(count), IndexList(std::min(count, out_of_sample.size())));
        for (std::size_t k = 0; k < count; ++k) bf[k] = forget[order[pos + k]];
        for (auto& i : bo) {
          if (o_pos == o_order.size()) {
            o_order = permutation(out_of_sample.size(), cfg.seed, 0x0D0 + ++o_pass);
            o_pos = 0;
          }
          i = out_of_sample[o_order[o_pos++]];
        }
      }
    }

    Real fid_sum = 0, priv_sum = 0, total_sum = 0, norm_sum = 0;
    std::size_t steps = 0, priv_steps = 0;
    for (const auto& [idx_f, idx_o] : batches) {
      Tape tape;
      Var fidelity = tape.constant(Tensor({1}, 0.0));
      Var lg = tape.constant(Tensor({1}, 0.0));
      Var pmean{}, feats{};
      if (!idx_f.empty()) {
        const Tensor xf = corpus.batch(idx_f);
        const auto yf = corpus.labels_of(idx_f);
        auto t_priv = Clock::now();
        Tensor grads_block, acts_block;
        if (g.spec.include_gradient) grads_block = gradient_summaries(net, xf, yf, g.spec.gradient_reduction);
        if (g.spec.include_activations) acts_block = penultimate_activations(net, xf);
        privacy_time += seconds_since(t_priv);

        Var pf = net.forward(tape, tape.constant(xf));
        fidelity = ops::mean(tape, ops::nll(tape, pf, yf, kProbEps));

        t_priv = Clock::now();
        feats = assemble_features(tape, pf, yf, g.spec, g.spec.include_gradient ? &grads_block : nullptr,
                                  g.spec.include_activations ? &acts_block : nullptr);
        pmean = ops::mean(tape, attack_prob_var(tape, g, feats));
        lg = ops::neg_log_complement(tape, pmean, kProbEps);
        privacy_time += seconds_since(t_priv);
      }
      if (!idx_o.empty()) {
        Var po = net.forward(tape, tape.constant(corpus.batch(idx_o)));
        fidelity = ops::add(tape, fidelity, ops::mean(tape, ops::nll(tape, po, corpus.labels_of(idx_o), kProbEps)));
      }

      Var total = ops::add(tape, ops::scale(tape, fidelity, l1), ops::scale(tape, lg, l2));
      const Real total_v = tape.value(total)[0];
      if (!std::isfinite(total_v)) fail(ErrorCode::numeric, "unlearning loss became non-finite in epoch " + std::to_string(epoch));
      tape.backward(total);

      if (!idx_f.empty()) {
        bool stalled = false;
        if (tape.value(pmean)[0] >= 1.0 - kProbEps && l2 > 0 && tape.requires_grad(feats)) {
          const auto gf = tape.grad(feats);
          stalled = std::all_of(gf.begin(), gf.end(), [](Real v) { return v == 0.0; });
        }
        stalled_steps = stalled ? stalled_steps + 1 : 0;
        if (stalled_steps >= cfg.stall_patience)
          fail(ErrorCode::stall, "privacy loss saturated with zero gradient in epoch " + std::to_string(epoch));
        priv_sum += tape.value(lg)[0];
        ++priv_steps;
      }

      auto grads = net.flatten_grads();
      net.zero_grads();
      Real norm = 0;
      for (auto v : grads) norm += v * v;
      norm = std::sqrt(norm);
      norm_sum += norm;
      if (cfg.max_grad_norm > 0 && norm > cfg.max_grad_norm)
        for (auto& v : grads) v *= cfg.max_grad_norm / norm;
      try {
        sgd.step(net, grads);
      } catch (const Error& e) {
        fail(ErrorCode::numeric, "unlearning step failed in epoch " + std::to_string(epoch) + ": " + e.what());
      }
      fid_sum += tape.value(fidelity)[0];
      total_sum += total_v;
      ++steps;
    }

    UnlearnEpoch row;
    row.epoch = epoch;
    row.fidelity_loss = fid_sum / static_cast<Real>(steps);
    row.privacy_loss = priv_steps ? priv_sum / static_cast<Real>(priv_steps) : 0.0;
    row.total_loss = total_sum / static_cast<Real>(steps);
    row.grad_norm = norm_sum / static_cast<Real>(steps);
    const auto probs = attack_probs(g, extract_features(net, corpus, forget, g.spec, g.access));
    row.mf_acc_df = member_rate(probs);
    row.mean_prob_df = mean_of(probs);
    elapsed += seconds_since(t_epoch);
    row.elapsed_seconds = elapsed;
    row.test_acc = accuracy(net, corpus, monitor);
    trace.epochs.push_back(row);
    if (row.mf_acc_df <= cfg.stop_threshold) {
      trace.reached_threshold = true;
      break;
    }
  }
  for (auto& l : net.layers())
    for (auto& p : l.params) p.drop_grad();
  trace.epochs_run = trace.epochs.size();
  trace.wall_time_seconds = elapsed;
  trace.privacy_loss_seconds = privacy_time;
  return {std::move(net), std::move(trace)};
}

TrainResult naive_retrain(const Corpus& corpus, const SplitPlan& plan, const ForgetSet& forget, const ArchSpec& arch,
                          const TrainConfig& cfg) {
  const IndexList remaining = remaining_set(plan, forget);
  if (remaining.empty()) fail(ErrorCode::input, "D_r is empty; nothing to retrain on");
  Network fresh = build_network(arch, corpus.sample_shape, corpus.class_count, cfg.seed);
  return train(std::move(fresh), corpus, remaining, plan.target_test, cfg);
}

}  // namespace remi
