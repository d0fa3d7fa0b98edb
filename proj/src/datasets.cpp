#include "remi/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <map>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

#include "remi/error.hpp"
#include "remi/random.hpp"

namespace remi {

void Corpus::validate() const {
  if (class_count < 2) fail(ErrorCode::input, "corpus '" + name + "' needs at least two classes");
  if (samples.empty() || samples.dim(0) != labels.size())
    fail(ErrorCode::input, "corpus '" + name + "': sample/label count mismatch");
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= class_count)
      fail(ErrorCode::input, "corpus '" + name + "': label " + std::to_string(y) + " outside [0," + std::to_string(class_count) + ")");
  if (labels.size() < 4 * class_count)
    fail(ErrorCode::input, "corpus '" + name + "' has " + std::to_string(labels.size()) + " samples, needs at least 4 per class");
}

Tensor Corpus::batch(std::span<const std::size_t> indices) const { return samples.gather_rows(indices); }

std::vector<int> Corpus::labels_of(std::span<const std::size_t> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (auto i : indices) {
    if (i >= labels.size()) fail(ErrorCode::input, "sample index " + std::to_string(i) + " out of range");
    out.push_back(labels[i]);
  }
  return out;
}

// ---- IDX -----------------------------------------------------------------

namespace {

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::io, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t off) {
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) | b[off + 3];
}

struct IdxPayload {
  std::vector<std::size_t> dims;
  std::size_t offset = 0;
};

IdxPayload parse_idx_header(const std::vector<unsigned char>& b, std::uint32_t magic, const std::string& what) {
  if (b.size() < 4) fail(ErrorCode::format, what + ": malformed IDX header (file too short)");
  if (be32(b, 0) != magic) fail(ErrorCode::format, what + ": malformed IDX header (bad magic)");
  const std::size_t ndim = magic & 0xFF;
  if (b.size() < 4 + 4 * ndim) fail(ErrorCode::format, what + ": malformed IDX header (missing dimensions)");
  IdxPayload p;
  std::size_t total = 1;
  for (std::size_t i = 0; i < ndim; ++i) {
    p.dims.push_back(be32(b, 4 + 4 * i));
    total *= p.dims.back();
  }
  p.offset = 4 + 4 * ndim;
  if (b.size() - p.offset < total) fail(ErrorCode::format, what + ": truncated IDX payload");
  return p;
}

std::vector<Real> resize_bilinear(std::span<const Real> src, std::size_t h, std::size_t w, std::size_t side) {
  std::vector<Real> out(side * side);
  const Real sy = static_cast<Real>(h) / static_cast<Real>(side), sx = static_cast<Real>(w) / static_cast<Real>(side);
  for (std::size_t y = 0; y < side; ++y) {
    const Real fy = std::clamp((static_cast<Real>(y) + 0.5) * sy - 0.5, 0.0, static_cast<Real>(h - 1));
    const std::size_t y0 = static_cast<std::size_t>(fy), y1 = std::min(y0 + 1, h - 1);
    const Real ty = fy - static_cast<Real>(y0);
    for (std::size_t x = 0; x < side; ++x) {
      const Real fx = std::clamp((static_cast<Real>(x) + 0.5) * sx - 0.5, 0.0, static_cast<Real>(w - 1));
      const std::size_t x0 = static_cast<std::size_t>(fx), x1 = std::min(x0 + 1, w - 1);
      const Real tx = fx - static_cast<Real>(x0);
      const Real top = src[y0 * w + x0] * (1 - tx) + src[y0 * w + x1] * tx;
      const Real bot = src[y1 * w + x0] * (1 - tx) + src[y1 * w + x1] * tx;
      out[y * side + x] = top * (1 - ty) + bot * ty;
    }
  }
  return out;
}

}  // namespace

Corpus load_idx(const std::filesystem::path& images, const std::filesystem::path& labels, const ImageOptions& opts) {
  const auto ib = read_file(images);
  const auto lb = read_file(labels);
  const auto ih = parse_idx_header(ib, 0x00000803, images.string());
  const auto lh = parse_idx_header(lb, 0x00000801, labels.string());
  const std::size_t n = ih.dims[0], h = ih.dims[1], w = ih.dims[2];
  if (lh.dims[0] != n)
    fail(ErrorCode::format, "label count " + std::to_string(lh.dims[0]) + " does not match image count " + std::to_string(n));
  if (n == 0 || h == 0 || w == 0) fail(ErrorCode::format, "IDX file declares an empty image set");
  const std::size_t side = opts.side;
  const std::size_t oh = side ? side : h, ow = side ? side : w;
  Corpus c;
  c.name = images.stem().string();
  c.sample_shape = {1, oh, ow};
  c.samples = Tensor({n, 1, oh, ow});
  std::vector<Real> img(h * w);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t p = 0; p < h * w; ++p) img[p] = static_cast<Real>(ib[ih.offset + i * h * w + p]) / 255.0;
    auto px = side ? resize_bilinear(img, h, w, side) : img;
    if (opts.normalize)
      for (auto& v : px) v = (v - opts.mean) / opts.stddev;
    std::copy(px.begin(), px.end(), c.samples.data().begin() + static_cast<std::ptrdiff_t>(i * oh * ow));
  }
  int max_label = 0;
  for (std::size_t i = 0; i < n; ++i) {
    c.labels.push_back(lb[lh.offset + i]);
    max_label = std::max(max_label, c.labels.back());
  }
  c.class_count = opts.class_count ? opts.class_count : static_cast<std::size_t>(max_label) + 1;
  for (int y : c.labels)
    if (static_cast<std::size_t>(y) >= c.class_count)
      fail(ErrorCode::input, "label " + std::to_string(y) + " outside declared class count");
  return c;
}

// ---- CSV -----------------------------------------------------------------

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) {
    while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
    while (!cell.empty() && cell.front() == ' ') cell.erase(cell.begin());
    out.push_back(cell);
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

Real parse_real(const std::string& s, std::size_t line) {
  std::size_t used = 0;
  Real v = 0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != s.size() || !std::isfinite(v))
    fail(ErrorCode::format, "line " + std::to_string(line) + ": '" + s + "' is not a finite number");
  return v;
}

}  // namespace

Corpus load_csv(const std::filesystem::path& path, const CsvSchema& schema) {
  if (schema.class_count < 2) fail(ErrorCode::input, "csv schema needs class_count >= 2");
  std::ifstream in(path);
  if (!in) fail(ErrorCode::io, "cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) fail(ErrorCode::format, path.string() + ": missing header row");
  const auto header = split_csv_line(line);
  const auto label_it = std::find(header.begin(), header.end(), schema.label_column);
  if (label_it == header.end()) fail(ErrorCode::format, path.string() + ": no '" + schema.label_column + "' column");
  const std::size_t label_col = static_cast<std::size_t>(label_it - header.begin());
  const std::size_t features = header.size() - 1;
  if (features == 0) fail(ErrorCode::format, path.string() + ": no feature columns");
  Shape sample = schema.sample_shape.empty() ? Shape{features} : schema.sample_shape;
  if (shape_size(sample) != features)
    fail(ErrorCode::dimension, "csv has " + std::to_string(features) + " features but schema shape is " + shape_str(sample));

  std::vector<Real> data;
  Corpus c;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != header.size())
      fail(ErrorCode::format, "line " + std::to_string(lineno) + ": expected " + std::to_string(header.size()) + " columns");
    for (std::size_t j = 0; j < cells.size(); ++j) {
      const Real v = parse_real(cells[j], lineno);
      if (j != label_col) {
        data.push_back(v);
        continue;
      }
      if (v != std::floor(v) || v < 0 || v >= static_cast<Real>(schema.class_count))
        fail(ErrorCode::input, "line " + std::to_string(lineno) + ": label " + cells[j] + " outside [0," + std::to_string(schema.class_count) + ")");
      c.labels.push_back(static_cast<int>(v));
    }
  }
  if (c.labels.empty()) fail(ErrorCode::format, path.string() + ": no data rows");
  Shape full{c.labels.size()};
  full.insert(full.end(), sample.begin(), sample.end());
  c.name = path.stem().string();
  c.sample_shape = std::move(sample);
  c.samples = Tensor(std::move(full), std::move(data));
  c.class_count = schema.class_count;
  return c;
}

// ---- synthetic -----------------------------------------------------------

Corpus make_synthetic(const SyntheticSpec& spec) {
  if (spec.classes < 2) fail(ErrorCode::input, "synthetic corpus needs at least two classes");
  if (spec.per_class == 0 || spec.dim < spec.classes)
    fail(ErrorCode::input, "synthetic corpus needs per_class > 0 and dim >= classes");
  if (!(spec.sigma >= 0) || !(spec.separation > 0)) fail(ErrorCode::input, "synthetic corpus needs sigma >= 0 and separation > 0");
  Shape sample{spec.dim};
  if (spec.image_side) {
    if (spec.image_side * spec.image_side != spec.dim) fail(ErrorCode::input, "image_side^2 must equal dim");
    sample = {1, spec.image_side, spec.image_side};
  }
  const std::size_t n = spec.classes * spec.per_class;
  Corpus c;
  c.name = "synthetic";
  c.class_count = spec.classes;
  c.sample_shape = sample;
  Shape full{n};
  full.insert(full.end(), sample.begin(), sample.end());
  c.samples = Tensor(full);
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<Real> noise(0.0, 1.0);
  const Real offset = spec.separation / std::sqrt(2.0);
  auto data = c.samples.data();
  for (std::size_t cls = 0; cls < spec.classes; ++cls)
    for (std::size_t i = 0; i < spec.per_class; ++i) {
      const std::size_t row = cls * spec.per_class + i;
      for (std::size_t d = 0; d < spec.dim; ++d) data[row * spec.dim + d] = spec.sigma * noise(rng) + (d == cls ? offset : 0.0);
      c.labels.push_back(static_cast<int>(cls));
    }
  return c;
}

// ---- split & forget set --------------------------------------------------

SplitPlan split(const Corpus& corpus, std::uint64_t seed) {
  corpus.validate();
  std::vector<IndexList> by_class(corpus.class_count);
  for (std::size_t i = 0; i < corpus.size(); ++i) by_class[static_cast<std::size_t>(corpus.labels[i])].push_back(i);
  SplitPlan plan;
  plan.seed = seed;
  IndexList* quarters[4] = {&plan.target_train, &plan.target_test, &plan.shadow_in, &plan.shadow_out};
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    const auto& members = by_class[c];
    if (members.size() < 4) fail(ErrorCode::input, "class " + std::to_string(c) + " has fewer than 4 samples");
    const auto order = permutation(members.size(), seed, c);
    const std::size_t q = members.size() / 4;
    for (std::size_t part = 0; part < 4; ++part)
      for (std::size_t k = 0; k < q; ++k) quarters[part]->push_back(members[order[part * q + k]]);
  }
  for (auto* l : quarters) std::sort(l->begin(), l->end());
  return plan;
}

ForgetSet select_forget_set(const Corpus& corpus, const SplitPlan& plan, std::span<const Real> mf_probs, Real ratio) {
  if (!(ratio > 0 && ratio < 1)) fail(ErrorCode::input, "forget ratio must lie in (0,1)");
  const auto& train = plan.target_train;
  if (mf_probs.size() != train.size())
    fail(ErrorCode::dimension, "mf_probs has " + std::to_string(mf_probs.size()) + " entries for " + std::to_string(train.size()) + " training samples");
  std::vector<std::vector<std::size_t>> by_class(corpus.class_count);  // positions into train
  for (std::size_t p = 0; p < train.size(); ++p) {
    const auto y = static_cast<std::size_t>(corpus.labels_of(std::span(&train[p], 1))[0]);
    by_class[y].push_back(p);
  }
  std::vector<std::size_t> quota(by_class.size());
  std::size_t assigned = 0;
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    quota[c] = static_cast<std::size_t>(std::floor(ratio * static_cast<Real>(by_class[c].size())));
    assigned += quota[c];
  }
  const auto total = static_cast<std::size_t>(std::llround(ratio * static_cast<Real>(train.size())));
  for (std::size_t c = 0; c < by_class.size() && assigned < total; ++c) {
    if (quota[c] < by_class[c].size()) {
      ++quota[c];
      ++assigned;
    }
  }
  ForgetSet fs;
  fs.ratio = ratio;
  std::vector<std::pair<std::size_t, Real>> picked;
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    if (quota[c] == 0) fail(ErrorCode::input, "ratio " + std::to_string(ratio) + " selects no samples from class " + std::to_string(c));
    auto cand = by_class[c];
    std::stable_sort(cand.begin(), cand.end(), [&](std::size_t a, std::size_t b) {
      if (mf_probs[a] != mf_probs[b]) return mf_probs[a] > mf_probs[b];
      return train[a] < train[b];
    });
    for (std::size_t k = 0; k < quota[c]; ++k) picked.emplace_back(train[cand[k]], mf_probs[cand[k]]);
  }
  std::sort(picked.begin(), picked.end());
  for (auto& [idx, score] : picked) {
    fs.indices.push_back(idx);
    fs.selection_scores.push_back(score);
  }
  return fs;
}

IndexList remaining_set(const SplitPlan& plan, const ForgetSet& forget) {
  IndexList sorted_forget = forget.indices;
  std::sort(sorted_forget.begin(), sorted_forget.end());
  IndexList out;
  std::set_difference(plan.target_train.begin(), plan.target_train.end(), sorted_forget.begin(), sorted_forget.end(),
                      std::back_inserter(out));
  return out;
}

void to_json(nlohmann::json& j, const SplitPlan& plan) {
  j = nlohmann::json{{"seed", plan.seed},
                     {"target_train", plan.target_train},
                     {"target_test", plan.target_test},
                     {"shadow_in", plan.shadow_in},
                     {"shadow_out", plan.shadow_out}};
}

void from_json(const nlohmann::json& j, SplitPlan& plan) {
  j.at("seed").get_to(plan.seed);
  j.at("target_train").get_to(plan.target_train);
  j.at("target_test").get_to(plan.target_test);
  j.at("shadow_in").get_to(plan.shadow_in);
  j.at("shadow_out").get_to(plan.shadow_out);
}

void to_json(nlohmann::json& j, const ForgetSet& forget) {
  j = nlohmann::json{{"ratio", forget.ratio}, {"indices", forget.indices}, {"selection_scores", forget.selection_scores}};
}

void from_json(const nlohmann::json& j, ForgetSet& forget) {
  j.at("ratio").get_to(forget.ratio);
  j.at("indices").get_to(forget.indices);
  j.at("selection_scores").get_to(forget.selection_scores);
}

}  // namespace remi
