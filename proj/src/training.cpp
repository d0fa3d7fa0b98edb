#include "remi/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "remi/error.hpp"
#include "remi/optim.hpp"
#include "remi/random.hpp"

namespace remi {

void TrainConfig::validate() const {
  if (epochs < 1) fail(ErrorCode::input, "train config: epochs must be >= 1");
  if (batch_size < 1) fail(ErrorCode::input, "train config: batch_size must be >= 1");
  if (!(learning_rate > 0)) fail(ErrorCode::input, "train config: learning rate must be > 0");
  if (!(momentum >= 0 && momentum < 1)) fail(ErrorCode::input, "train config: momentum must lie in [0,1)");
  if (!(weight_decay >= 0)) fail(ErrorCode::input, "train config: weight decay must be >= 0");
}

std::size_t argmax_row(const Tensor& probs, std::size_t row) {
  const std::size_t k = probs.dim(1);
  std::size_t best = 0;
  for (std::size_t j = 1; j < k; ++j)
    if (probs.at(row, j) > probs.at(row, best)) best = j;
  return best;
}

Evaluation evaluate(const Network& net, const Corpus& corpus, std::span<const std::size_t> indices) {
  if (indices.empty()) fail(ErrorCode::input, "evaluate needs at least one sample");
  const Tensor probs = net.predict(corpus.batch(indices));
  const auto labels = corpus.labels_of(indices);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) correct += argmax_row(probs, i) == static_cast<std::size_t>(labels[i]);
  return {cross_entropy(probs, labels), static_cast<Real>(correct) / static_cast<Real>(labels.size())};
}

Real accuracy(const Network& net, const Corpus& corpus, std::span<const std::size_t> indices) {
  return evaluate(net, corpus, indices).accuracy;
}

TrainResult train(Network net, const Corpus& corpus, std::span<const std::size_t> data,
                  std::span<const std::size_t> eval, const TrainConfig& cfg) {
  cfg.validate();
  if (data.empty()) fail(ErrorCode::input, "training set is empty");
  if (net.class_count() != corpus.class_count)
    fail(ErrorCode::dimension, "network predicts " + std::to_string(net.class_count()) + " classes, corpus has " +
                                   std::to_string(corpus.class_count));
  const auto start = std::chrono::steady_clock::now();
  Sgd sgd({cfg.learning_rate, cfg.momentum, cfg.weight_decay});
  TrainLog log;
  const bool early = cfg.early_stop_patience.has_value() && !eval.empty();
  Real best_loss = std::numeric_limits<Real>::infinity();
  std::vector<Real> best_params;
  std::size_t best_epoch = 0;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto order = permutation(data.size(), cfg.seed, epoch);
    Real loss_sum = 0;
    std::size_t correct = 0;
    try {
      for (std::size_t start_pos = 0; start_pos < order.size(); start_pos += cfg.batch_size) {
        const std::size_t count = std::min(cfg.batch_size, order.size() - start_pos);
        IndexList idx(count);
        for (std::size_t k = 0; k < count; ++k) idx[k] = data[order[start_pos + k]];
        const auto labels = corpus.labels_of(idx);
        Tape tape;
        Var x = tape.constant(corpus.batch(idx));
        Var probs = net.forward(tape, x);
        Var loss = ops::mean(tape, ops::nll(tape, probs, labels, kProbEps));
        tape.backward(loss);
        const Tensor& pv = tape.value(probs);
        for (std::size_t b = 0; b < count; ++b) correct += argmax_row(pv, b) == static_cast<std::size_t>(labels[b]);
        loss_sum += tape.value(loss)[0] * static_cast<Real>(count);
        const auto grads = net.flatten_grads();
        net.zero_grads();
        sgd.step(net, grads);
      }
    } catch (const Error& e) {
      if (e.code() != ErrorCode::numeric) throw;
      fail(ErrorCode::training, "training diverged in epoch " + std::to_string(epoch) + ": " + e.what());
    }
    EpochStats row;
    row.epoch = epoch;
    row.train_loss = loss_sum / static_cast<Real>(data.size());
    row.train_acc = static_cast<Real>(correct) / static_cast<Real>(data.size());
    if (!std::isfinite(row.train_loss))
      fail(ErrorCode::training, "training loss became non-finite in epoch " + std::to_string(epoch));
    if (!eval.empty()) {
      const auto ev = evaluate(net, corpus, eval);
      row.eval_loss = ev.loss;
      row.eval_acc = ev.accuracy;
    } else {
      row.eval_loss = row.eval_acc = std::numeric_limits<Real>::quiet_NaN();
    }
    log.epochs.push_back(row);
    if (early) {
      if (row.eval_loss < best_loss) {
        best_loss = row.eval_loss;
        best_params = net.flatten_params();
        best_epoch = epoch;
      } else if (epoch - best_epoch > *cfg.early_stop_patience) {
        break;
      }
    }
  }
  if (early) {
    net.unflatten_params(best_params);
    log.returned_epoch = best_epoch;
  } else {
    log.returned_epoch = log.epochs.size();
  }
  for (auto& l : net.layers())
    for (auto& p : l.params) p.drop_grad();
  log.wall_time_seconds = std::chrono::duration<Real>(std::chrono::steady_clock::now() - start).count();
  return {std::move(net), std::move(log)};
}

TrainResult train_shadow(const Corpus& corpus, const SplitPlan& plan, const ArchSpec& arch, const TrainConfig& cfg) {
  if (plan.shadow_in.empty() || plan.shadow_out.empty()) fail(ErrorCode::input, "split plan has no shadow data");
  IndexList overlap;
  std::set_intersection(plan.shadow_in.begin(), plan.shadow_in.end(), plan.target_train.begin(), plan.target_train.end(),
                        std::back_inserter(overlap));
  if (!overlap.empty()) fail(ErrorCode::input, "shadow_in intersects target_train");
  Network net = build_network(arch, corpus.sample_shape, corpus.class_count, mix_seed(cfg.seed, kShadowStream));
  return train(std::move(net), corpus, plan.shadow_in, plan.shadow_out, cfg);
}

void TrainLog::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) fail(ErrorCode::io, "cannot write " + path.string());
  out.precision(17);
  out << "epoch,train_loss,train_acc,eval_loss,eval_acc\n";
  for (const auto& r : epochs) out << r.epoch << ',' << r.train_loss << ',' << r.train_acc << ',' << r.eval_loss << ',' << r.eval_acc << '\n';
}

TrainLog TrainLog::read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::io, "cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != "epoch,train_loss,train_acc,eval_loss,eval_acc") fail(ErrorCode::format, path.string() + ": unexpected header");
  TrainLog log;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream fields(line);
    std::string f;
    std::vector<Real> vals;
    while (std::getline(fields, f, ',')) vals.push_back(std::stod(f));
    if (vals.size() != 5) fail(ErrorCode::format, path.string() + ": malformed row");
    EpochStats r;
    r.epoch = static_cast<std::size_t>(vals[0]);
    r.train_loss = vals[1];
    r.train_acc = vals[2];
    r.eval_loss = vals[3];
    r.eval_acc = vals[4];
    log.epochs.push_back(r);
  }
  log.returned_epoch = log.epochs.size();
  return log;
}

}  // namespace remi
