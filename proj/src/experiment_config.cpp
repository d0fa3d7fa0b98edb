#include <fstream>
#include <set>

#include "remi/error.hpp"
#include "remi/evaluation.hpp"

namespace remi {

using nlohmann::json;

namespace {

void check_keys(const json& j, const char* table, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) fail(ErrorCode::config, std::string("'") + table + "' must be a table");
  const std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [key, _] : j.items())
    if (!ok.count(key)) fail(ErrorCode::config, std::string("unknown key '") + key + "' in '" + table + "'");
}

template <class T>
void read(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    j.at(key).get_to(out);
  } catch (const json::exception& e) {
    fail(ErrorCode::config, std::string("bad value for '") + key + "': " + e.what());
  }
}

std::filesystem::path resolve(const std::filesystem::path& base, const std::filesystem::path& p) {
  if (p.empty() || p.is_absolute() || base.empty()) return p;
  return base / p;
}

CorpusSpec corpus_from_json(const json& j, const std::filesystem::path& base) {
  check_keys(j, "corpus", {"kind", "classes", "per_class", "dim", "sigma", "separation", "seed", "image_side", "images",
                           "labels", "side", "normalize", "mean", "stddev", "class_count", "csv", "sample_shape",
                           "label_column"});
  CorpusSpec c;
  read(j, "kind", c.kind);
  auto& s = c.synthetic;
  read(j, "classes", s.classes);
  read(j, "per_class", s.per_class);
  read(j, "dim", s.dim);
  read(j, "sigma", s.sigma);
  read(j, "separation", s.separation);
  read(j, "seed", s.seed);
  read(j, "image_side", s.image_side);
  std::string images, labels, csv;
  read(j, "images", images);
  read(j, "labels", labels);
  read(j, "csv", csv);
  c.images = resolve(base, images);
  c.labels = resolve(base, labels);
  c.csv = resolve(base, csv);
  read(j, "side", c.image.side);
  read(j, "normalize", c.image.normalize);
  read(j, "mean", c.image.mean);
  read(j, "stddev", c.image.stddev);
  read(j, "class_count", c.image.class_count);
  c.schema.class_count = c.image.class_count;
  read(j, "sample_shape", c.schema.sample_shape);
  read(j, "label_column", c.schema.label_column);
  return c;
}

json corpus_to_json(const CorpusSpec& c) {
  json j{{"kind", c.kind}};
  if (c.kind == "synthetic") {
    const auto& s = c.synthetic;
    j.update({{"classes", s.classes}, {"per_class", s.per_class}, {"dim", s.dim}, {"sigma", s.sigma},
              {"separation", s.separation}, {"seed", s.seed}, {"image_side", s.image_side}});
  } else if (c.kind == "idx") {
    j.update({{"images", c.images.string()}, {"labels", c.labels.string()}, {"side", c.image.side},
              {"normalize", c.image.normalize}, {"mean", c.image.mean}, {"stddev", c.image.stddev},
              {"class_count", c.image.class_count}});
  } else {
    j.update({{"csv", c.csv.string()}, {"class_count", c.schema.class_count}, {"sample_shape", c.schema.sample_shape},
              {"label_column", c.schema.label_column}});
  }
  return j;
}

void train_from_json(const json& j, const char* table, TrainConfig& t) {
  check_keys(j, table, {"epochs", "batch_size", "learning_rate", "momentum", "weight_decay", "early_stop_patience"});
  read(j, "epochs", t.epochs);
  read(j, "batch_size", t.batch_size);
  read(j, "learning_rate", t.learning_rate);
  read(j, "momentum", t.momentum);
  read(j, "weight_decay", t.weight_decay);
  if (j.contains("early_stop_patience") && !j.at("early_stop_patience").is_null()) {
    std::size_t p = 0;
    read(j, "early_stop_patience", p);
    t.early_stop_patience = p;
  }
}

json train_to_json(const TrainConfig& t) {
  json j{{"epochs", t.epochs},
         {"batch_size", t.batch_size},
         {"learning_rate", t.learning_rate},
         {"momentum", t.momentum},
         {"weight_decay", t.weight_decay}};
  j["early_stop_patience"] = t.early_stop_patience ? json(*t.early_stop_patience) : json(nullptr);
  return j;
}

}  // namespace

Corpus load_corpus(const CorpusSpec& spec) {
  if (spec.kind == "synthetic") return make_synthetic(spec.synthetic);
  if (spec.kind == "idx") return load_idx(spec.images, spec.labels, spec.image);
  if (spec.kind == "csv") return load_csv(spec.csv, spec.schema);
  fail(ErrorCode::config, "unknown corpus kind '" + spec.kind + "'");
}

std::string attack_model_name(Variant v, Access a) { return std::string(variant_name(v)) + "_" + access_name(a); }

void ExperimentConfig::validate() const {
  if (corpus.kind != "synthetic" && corpus.kind != "idx" && corpus.kind != "csv")
    fail(ErrorCode::config, "corpus.kind must be synthetic, idx or csv");
  if (arch.kind != "cnn" && arch.kind != "mlp") fail(ErrorCode::config, "architecture.kind must be cnn or mlp");
  if (ratios.empty()) fail(ErrorCode::config, "at least one forget ratio is required");
  for (auto r : ratios)
    if (!(r > 0 && r < 1)) fail(ErrorCode::config, "forget ratios must lie in (0,1)");
  if (seeds.empty()) fail(ErrorCode::config, "at least one seed is required");
  if (!(stop_margin >= 0)) fail(ErrorCode::config, "unlearn.stop_margin must be >= 0");
  if (output_dir.empty()) fail(ErrorCode::config, "output_dir is required");
  try {
    train.validate();
    attack.train.validate();
    UnlearnConfig u = unlearn;
    u.stop_threshold = 0;
    u.validate();
  } catch (const Error& e) {
    fail(ErrorCode::config, e.what());
  }
}

ExperimentConfig experiment_from_json(const json& doc, const std::filesystem::path& base_dir) {
  check_keys(doc, "experiment",
             {"name", "corpus", "architecture", "train", "attack", "guide", "unlearn", "ratios", "seeds", "cross_attack",
              "output_dir"});
  ExperimentConfig cfg;
  read(doc, "name", cfg.name);
  if (doc.contains("corpus")) cfg.corpus = corpus_from_json(doc.at("corpus"), base_dir);
  if (doc.contains("architecture")) {
    const auto& a = doc.at("architecture");
    check_keys(a, "architecture", {"kind", "channels", "hidden"});
    read(a, "kind", cfg.arch.kind);
    read(a, "channels", cfg.arch.channels);
    read(a, "hidden", cfg.arch.hidden);
  }
  if (doc.contains("train")) train_from_json(doc.at("train"), "train", cfg.train);
  if (doc.contains("attack")) {
    const auto& a = doc.at("attack");
    check_keys(a, "attack", {"epochs", "batch_size", "learning_rate", "momentum", "weight_decay", "hidden",
                             "holdout_fraction", "log_magnitudes"});
    json t = json::object();
    for (const char* k : {"epochs", "batch_size", "learning_rate", "momentum", "weight_decay"})
      if (a.contains(k)) t[k] = a.at(k);
    train_from_json(t, "attack", cfg.attack.train);
    read(a, "hidden", cfg.attack.hidden);
    read(a, "holdout_fraction", cfg.attack.holdout_fraction);
    read(a, "log_magnitudes", cfg.attack.log_magnitudes);
  }
  if (doc.contains("guide")) {
    const auto& g = doc.at("guide");
    check_keys(g, "guide", {"variant", "access"});
    std::string v = variant_name(cfg.guide.variant), a = access_name(cfg.guide.access);
    read(g, "variant", v);
    read(g, "access", a);
    cfg.guide.variant = parse_variant(v);
    cfg.guide.access = parse_access(a);
  }
  if (doc.contains("unlearn")) {
    const auto& u = doc.at("unlearn");
    check_keys(u, "unlearn", {"lambda2", "learning_rate", "momentum", "weight_decay", "max_epochs", "batch_size",
                              "stop_margin", "max_grad_norm", "stall_patience", "batching"});
    read(u, "lambda2", cfg.unlearn.lambda2);
    read(u, "learning_rate", cfg.unlearn.learning_rate);
    read(u, "momentum", cfg.unlearn.momentum);
    read(u, "weight_decay", cfg.unlearn.weight_decay);
    read(u, "max_epochs", cfg.unlearn.max_epochs);
    read(u, "batch_size", cfg.unlearn.batch_size);
    read(u, "max_grad_norm", cfg.unlearn.max_grad_norm);
    read(u, "stall_patience", cfg.unlearn.stall_patience);
    read(u, "stop_margin", cfg.stop_margin);
    if (u.contains("batching")) {
      std::string b;
      read(u, "batching", b);
      if (b == "proportional") cfg.unlearn.batching = UnlearnBatching::proportional;
      else if (b == "paired") cfg.unlearn.batching = UnlearnBatching::paired;
      else fail(ErrorCode::config, "unlearn.batching must be proportional or paired");
    }
  }
  read(doc, "ratios", cfg.ratios);
  read(doc, "seeds", cfg.seeds);
  read(doc, "cross_attack", cfg.cross_attack);
  std::string out;
  read(doc, "output_dir", out);
  if (!out.empty()) cfg.output_dir = out;
  cfg.validate();
  return cfg;
}

json experiment_to_json(const ExperimentConfig& cfg) {
  json attack = train_to_json(cfg.attack.train);
  attack.erase("early_stop_patience");
  attack["hidden"] = cfg.attack.hidden;
  attack["holdout_fraction"] = cfg.attack.holdout_fraction;
  attack["log_magnitudes"] = cfg.attack.log_magnitudes;
  const auto& u = cfg.unlearn;
  return json{{"name", cfg.name},
              {"corpus", corpus_to_json(cfg.corpus)},
              {"architecture", {{"kind", cfg.arch.kind}, {"channels", cfg.arch.channels}, {"hidden", cfg.arch.hidden}}},
              {"train", train_to_json(cfg.train)},
              {"attack", attack},
              {"guide", {{"variant", variant_name(cfg.guide.variant)}, {"access", access_name(cfg.guide.access)}}},
              {"unlearn",
               {{"lambda2", u.lambda2},
                {"learning_rate", u.learning_rate},
                {"momentum", u.momentum},
                {"weight_decay", u.weight_decay},
                {"max_epochs", u.max_epochs},
                {"batch_size", u.batch_size},
                {"stop_margin", cfg.stop_margin},
                {"max_grad_norm", u.max_grad_norm},
                {"stall_patience", u.stall_patience},
                {"batching", u.batching == UnlearnBatching::proportional ? "proportional" : "paired"}}},
              {"ratios", cfg.ratios},
              {"seeds", cfg.seeds},
              {"cross_attack", cfg.cross_attack},
              {"output_dir", cfg.output_dir.string()}};
}

json read_experiment_document(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::config, "cannot open experiment file " + path.string());
  try {
    return json::parse(in, nullptr, true, true);
  } catch (const json::exception& e) {
    fail(ErrorCode::config, "cannot parse " + path.string() + ": " + e.what());
  }
}

ExperimentConfig load_experiment(const std::filesystem::path& path) {
  return experiment_from_json(read_experiment_document(path), path.parent_path());
}

void apply_override(json& doc, const std::string& dotted_key, const std::string& value) {
  if (dotted_key.empty()) fail(ErrorCode::config, "empty override key");
  json parsed;
  try {
    parsed = json::parse(value);
  } catch (const json::exception&) {
    parsed = value;
  }
  json* node = &doc;
  std::size_t start = 0;
  for (;;) {
    const auto dot = dotted_key.find('.', start);
    const std::string part = dotted_key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) fail(ErrorCode::config, "malformed override key '" + dotted_key + "'");
    if (!node->is_object()) fail(ErrorCode::config, "override '" + dotted_key + "' descends into a non-table");
    if (dot == std::string::npos) {
      (*node)[part] = parsed;
      return;
    }
    node = &(*node)[part];
    if (node->is_null()) *node = json::object();
    start = dot + 1;
  }
}

}  // namespace remi
