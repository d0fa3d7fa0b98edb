#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

#include "remi/datasets.hpp"
#include "remi/error.hpp"
#include "remi/training.hpp"
#include "support.hpp"

using namespace remi;

namespace {

void put_be32(std::vector<unsigned char>& b, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<unsigned char>((v >> s) & 0xFF));
}

void write_bytes(const std::filesystem::path& p, const std::vector<unsigned char>& b) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

ErrorCode code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an error");
  return ErrorCode::input;
}

// N samples with labels i % k, features all zero.
Corpus flat_corpus(std::size_t n, std::size_t k) {
  Corpus c;
  c.name = "flat";
  c.sample_shape = {2};
  c.samples = Tensor({n, 2});
  c.class_count = k;
  for (std::size_t i = 0; i < n; ++i) c.labels.push_back(static_cast<int>(i % k));
  return c;
}

SplitPlan plan_with_train(std::size_t n) {
  SplitPlan p;
  for (std::size_t i = 0; i < n; ++i) p.target_train.push_back(i);
  return p;
}

}  // namespace

TEST_CASE("IDX fixture built byte by byte") {
  remi::test::TempDir dir("idx");
  std::vector<unsigned char> img, lab;
  put_be32(img, 0x00000803);
  put_be32(img, 10);
  put_be32(img, 28);
  put_be32(img, 28);
  for (int i = 0; i < 10; ++i)
    for (int p = 0; p < 28 * 28; ++p) img.push_back(static_cast<unsigned char>((i * 25 + p) % 256));
  put_be32(lab, 0x00000801);
  put_be32(lab, 10);
  for (int i = 0; i < 10; ++i) lab.push_back(static_cast<unsigned char>(i % 3));
  write_bytes(dir / "img.idx", img);
  write_bytes(dir / "lab.idx", lab);

  const Corpus c = load_idx(dir / "img.idx", dir / "lab.idx");
  CHECK(c.size() == 10);
  CHECK(shape_size(c.sample_shape) == 784);
  CHECK(c.class_count == 3);
  CHECK(c.labels[4] == 1);
  CHECK(c.samples[0] == 0.0);
  CHECK(c.samples[784 + 1] == doctest::Approx(26.0 / 255.0));

  ImageOptions opts;
  opts.side = 14;
  const Corpus small = load_idx(dir / "img.idx", dir / "lab.idx", opts);
  CHECK(small.sample_shape == Shape{1, 14, 14});

  write_bytes(dir / "empty.idx", {});
  CHECK(code_of([&] { load_idx(dir / "empty.idx", dir / "lab.idx"); }) == ErrorCode::format);
  auto bad = img;
  bad[3] = 0x04;
  write_bytes(dir / "bad.idx", bad);
  CHECK(code_of([&] { load_idx(dir / "bad.idx", dir / "lab.idx"); }) == ErrorCode::format);
  auto cut = img;
  cut.resize(cut.size() - 1);
  write_bytes(dir / "cut.idx", cut);
  CHECK(code_of([&] { load_idx(dir / "cut.idx", dir / "lab.idx"); }) == ErrorCode::format);
}

TEST_CASE("CSV corpus loading and label range") {
  remi::test::TempDir dir("csv");
  {
    std::ofstream out(dir / "ok.csv");
    out << "a,label,b\n0.5,1,2\n1.5,0,-1\n";
  }
  CsvSchema schema;
  schema.class_count = 2;
  const Corpus c = load_csv(dir / "ok.csv", schema);
  CHECK(c.size() == 2);
  CHECK(c.labels == std::vector<int>{1, 0});
  CHECK(c.samples[1] == 2.0);
  CHECK(c.samples[2] == 1.5);
  {
    std::ofstream out(dir / "bad.csv");
    out << "a,label\n0.5,2\n";
  }
  CHECK(code_of([&] { load_csv(dir / "bad.csv", schema); }) == ErrorCode::input);
  {
    std::ofstream out(dir / "neg.csv");
    out << "a,label\n0.5,-1\n";
  }
  CHECK(code_of([&] { load_csv(dir / "neg.csv", schema); }) == ErrorCode::input);
}

TEST_CASE("synthetic corpus is deterministic per seed") {
  SyntheticSpec s;
  s.seed = 42;
  const Corpus a = make_synthetic(s), b = make_synthetic(s);
  CHECK(std::equal(a.samples.data().begin(), a.samples.data().end(), b.samples.data().begin()));
  CHECK(a.labels == b.labels);
  s.seed = 43;
  const Corpus c = make_synthetic(s);
  CHECK(!std::equal(a.samples.data().begin(), a.samples.data().end(), c.samples.data().begin()));
  s.image_side = 3;
  CHECK_THROWS_AS(make_synthetic(s), Error);
}

TEST_CASE("tiny noise makes nearest centroid perfect") {
  SyntheticSpec s;
  s.classes = 5;
  s.per_class = 40;
  s.dim = 8;
  s.sigma = 1e-6;
  s.separation = 1.0;
  const Corpus c = make_synthetic(s);
  std::vector<std::vector<Real>> centroid(s.classes, std::vector<Real>(s.dim, 0.0));
  for (std::size_t i = 0; i < c.size(); ++i)
    for (std::size_t d = 0; d < s.dim; ++d) centroid[c.labels[i]][d] += c.samples[i * s.dim + d] / s.per_class;
  std::size_t right = 0;
  for (std::size_t i = 0; i < c.size(); ++i) {
    std::size_t best = 0;
    Real best_d = 1e300;
    for (std::size_t k = 0; k < s.classes; ++k) {
      Real d2 = 0;
      for (std::size_t d = 0; d < s.dim; ++d) d2 += std::pow(c.samples[i * s.dim + d] - centroid[k][d], 2);
      if (d2 < best_d) best_d = d2, best = k;
    }
    right += best == static_cast<std::size_t>(c.labels[i]);
  }
  CHECK(right == c.size());
}

TEST_CASE("separated blobs are linearly separable") {
  SyntheticSpec s;
  s.classes = 2;
  s.per_class = 100;
  s.dim = 16;
  s.sigma = 1.0;
  s.separation = 6.0;
  s.seed = 5;
  const Corpus c = make_synthetic(s);
  // Logistic-regression probe by plain gradient descent.
  std::vector<Real> w(s.dim, 0.0);
  Real b = 0;
  for (int it = 0; it < 500; ++it) {
    std::vector<Real> gw(s.dim, 0.0);
    Real gb = 0;
    for (std::size_t i = 0; i < c.size(); ++i) {
      Real z = b;
      for (std::size_t d = 0; d < s.dim; ++d) z += w[d] * c.samples[i * s.dim + d];
      const Real err = 1.0 / (1.0 + std::exp(-z)) - c.labels[i];
      for (std::size_t d = 0; d < s.dim; ++d) gw[d] += err * c.samples[i * s.dim + d] / c.size();
      gb += err / c.size();
    }
    for (std::size_t d = 0; d < s.dim; ++d) w[d] -= 0.5 * gw[d];
    b -= 0.5 * gb;
  }
  std::size_t right = 0;
  for (std::size_t i = 0; i < c.size(); ++i) {
    Real z = b;
    for (std::size_t d = 0; d < s.dim; ++d) z += w[d] * c.samples[i * s.dim + d];
    right += (z > 0) == (c.labels[i] == 1);
  }
  CHECK(static_cast<Real>(right) / c.size() >= 0.99);
}

TEST_CASE("split gives equal stratified quarters") {
  SyntheticSpec s;
  s.classes = 4;
  s.per_class = 100;
  s.dim = 4;
  const Corpus c = make_synthetic(s);
  const SplitPlan p = split(c, 9);
  for (const IndexList* q : {&p.target_train, &p.target_test, &p.shadow_in, &p.shadow_out}) {
    CHECK(q->size() == 100);
    CHECK(std::is_sorted(q->begin(), q->end()));
    std::vector<int> per(4, 0);
    for (auto i : *q) ++per[c.labels[i]];
    CHECK(per == std::vector<int>{25, 25, 25, 25});
  }
  const SplitPlan again = split(c, 9);
  CHECK(again.target_train == p.target_train);
  CHECK(again.shadow_out == p.shadow_out);
  CHECK(split(c, 10).target_train != p.target_train);
}

TEST_CASE("split quarters are disjoint for many seeds") {
  SyntheticSpec s;
  s.classes = 3;
  s.per_class = 37;
  s.dim = 4;
  const Corpus c = make_synthetic(s);
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const SplitPlan p = split(c, seed);
    std::set<std::size_t> all;
    std::size_t total = 0;
    for (const IndexList* q : {&p.target_train, &p.target_test, &p.shadow_in, &p.shadow_out}) {
      all.insert(q->begin(), q->end());
      total += q->size();
    }
    CHECK(all.size() == total);
  }
}

TEST_CASE("split plan survives a JSON round trip") {
  SyntheticSpec s;
  s.per_class = 20;
  const SplitPlan p = split(make_synthetic(s), 4);
  const SplitPlan q = nlohmann::json(p).get<SplitPlan>();
  CHECK(q.target_train == p.target_train);
  CHECK(q.shadow_in == p.shadow_in);
  CHECK(q.seed == p.seed);
}

TEST_CASE("forget set sizes follow round(ratio * |train|)") {
  {
    const Corpus c = flat_corpus(17500, 10);
    const SplitPlan p = plan_with_train(17500);
    const std::vector<Real> probs(17500, 0.5);
    CHECK(select_forget_set(c, p, probs, 0.1).indices.size() == 1750);
    CHECK(select_forget_set(c, p, probs, 0.01).indices.size() == 175);
  }
  {
    const Corpus c = flat_corpus(5503, 10);
    const SplitPlan p = plan_with_train(5503);
    const std::vector<Real> probs(5503, 0.5);
    const auto fs = select_forget_set(c, p, probs, 0.01);
    CHECK(fs.indices.size() == 55);
    // Remainder goes to the lowest class ids.
    std::vector<int> per(10, 0);
    for (auto i : fs.indices) ++per[c.labels[i]];
    CHECK(per[0] == 6);
    CHECK(per[9] == 5);
  }
}

TEST_CASE("forget selection takes top scores with index tie-break") {
  const Corpus c = flat_corpus(40, 2);
  const SplitPlan p = plan_with_train(40);
  std::vector<Real> equal(40, 0.7);
  const auto ties = select_forget_set(c, p, equal, 0.1);
  CHECK(ties.indices == IndexList{0, 1, 2, 3});

  std::vector<Real> scores(40, 0.1);
  scores[37] = 0.9;
  scores[5] = 0.8;
  scores[36] = 0.95;
  scores[11] = 0.85;
  const auto top = select_forget_set(c, p, scores, 0.1);
  // Class 1 (odd ids) keeps its two best; class 0 has one standout then ties.
  CHECK(top.indices == IndexList{0, 11, 36, 37});
  CHECK(top.selection_scores == std::vector<Real>{0.1, 0.85, 0.95, 0.9});
  const auto rest = remaining_set(p, top);
  CHECK(rest.size() == 36);
  CHECK(std::find(rest.begin(), rest.end(), 36) == rest.end());

  const ForgetSet back = nlohmann::json(top).get<ForgetSet>();
  CHECK(back.indices == top.indices);
  CHECK(back.ratio == top.ratio);

  CHECK_THROWS_AS(select_forget_set(c, p, scores, 0.0), Error);
  CHECK_THROWS_AS(select_forget_set(c, p, scores, 1.0), Error);
  CHECK_THROWS_AS(select_forget_set(c, p, std::vector<Real>(3, 0.1), 0.1), Error);
}

TEST_CASE("corpus validation") {
  Corpus c = flat_corpus(8, 2);
  CHECK_NOTHROW(c.validate());
  c.labels[3] = 5;
  CHECK_THROWS_AS(c.validate(), Error);
  CHECK_THROWS_AS(flat_corpus(6, 2).validate(), Error);
}
