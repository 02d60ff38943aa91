#include "fruitreid/metrics.hpp"
#include "support/random_cloud.hpp"

#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <set>

using namespace fruitreid;
using fruitreid::testing::random_cloud;
using fruitreid::testing::random_labels;

namespace {

SceneAnnotation from_labels(const std::vector<int>& labels) {
  const auto cloud = random_cloud(labels.size(), 7);
  return SceneAnnotation::from_labels(cloud, labels);
}

std::vector<int> with_instance(std::size_t n, std::initializer_list<std::pair<int, std::pair<int, int>>> spans) {
  std::vector<int> labels(n, -1);
  for (const auto& [id, range] : spans)
    for (int k = range.first; k <= range.second; ++k) labels[static_cast<std::size_t>(k)] = id;
  return labels;
}

TemporalAssociation assoc(std::vector<int> prev) { return {std::move(prev)}; }

// Greedy pairing by brute force: repeatedly scan for the best remaining
// (IoU, -pred, -gt) triple.
std::vector<std::pair<int, int>> greedy_oracle(const Eigen::MatrixXd& m, double thr) {
  std::vector<std::pair<int, int>> out;
  std::set<int> used_p, used_g;
  while (true) {
    int bp = -1, bg = -1;
    double best = -1.0;
    for (int p = 0; p < m.rows(); ++p)
      for (int g = 0; g < m.cols(); ++g) {
        if (used_p.count(p) || used_g.count(g) || m(p, g) < thr || m(p, g) <= 0.0) continue;
        if (m(p, g) > best) {
          best = m(p, g);
          bp = p;
          bg = g;
        }
      }
    if (bp < 0) break;
    used_p.insert(bp);
    used_g.insert(bg);
    out.emplace_back(bp, bg);
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

TEST_CASE("IoU of overlapping index ranges matches the hand count") {
  const std::vector<std::uint32_t> p{1, 2, 3, 4, 5, 6, 7, 8}, g{3, 4, 5, 6, 7, 8, 9, 10};
  CHECK(iou(p, g) == doctest::Approx(0.6).epsilon(1e-12));
  CHECK(iou(g, p) == iou(p, g));
  CHECK(iou(p, p) == 1.0);
  CHECK(iou({}, {}) == 0.0);
  const std::vector<std::uint32_t> far{20, 21};
  CHECK(iou(p, far) == 0.0);
}

TEST_CASE("matching at threshold 0.5 turns the 6/10 overlap into a true positive") {
  const auto pred = from_labels(with_instance(12, {{0, {1, 8}}}));
  const auto gt = from_labels(with_instance(12, {{0, {3, 10}}}));
  const auto m = match_instances(pred, gt, 0.5);
  REQUIRE(m.tp.size() == 1);
  CHECK(std::abs(m.tp[0].iou - 0.6) < 1e-9);
  CHECK(m.fp.empty());
  CHECK(m.fn.empty());
  CHECK(match_instances(pred, gt, 0.7).tp.empty());
  CHECK_THROWS_AS(match_instances(pred, gt, 0.0), ConfigError);
  CHECK_THROWS_AS(match_instances(pred, gt, 1.5), ConfigError);
}

TEST_CASE("identical and disjoint annotations") {
  const auto labels = random_labels(200, 6, 3);
  const auto a = from_labels(labels);
  const auto same = match_instances(a, a, 0.5);
  CHECK(same.tp.size() == a.instances.size());
  for (const auto& t : same.tp) CHECK(t.iou == 1.0);
  const auto rep = panoptic_quality(a, a);
  CHECK(rep.fruit.pq == 1.0);
  CHECK(rep.fruit.rq == 1.0);
  CHECK(rep.background.pq == 1.0);
  CHECK(rep.average.pq == 1.0);

  const auto b = from_labels(with_instance(20, {{0, {0, 4}}}));
  const auto c = from_labels(with_instance(20, {{0, {10, 14}}}));
  const auto dis = match_instances(b, c, 0.5);
  CHECK(dis.tp.empty());
  CHECK(dis.fp.size() == 1);
  CHECK(dis.fn.size() == 1);
}

TEST_CASE("point-count mismatch is a validation error") {
  const auto a = from_labels(std::vector<int>(10, -1));
  const auto b = from_labels(std::vector<int>(11, -1));
  CHECK_THROWS_AS(instance_iou(a, b), ValidationError);
}

TEST_CASE("one TP at IoU 0.8 plus one FP gives SQ 0.8, RQ 2/3, PQ 0.5333") {
  const auto gt = from_labels(with_instance(40, {{0, {0, 9}}}));
  const auto pred = from_labels(with_instance(40, {{0, {0, 7}}, {1, {20, 24}}}));
  const auto r = panoptic_quality(pred, gt, 0.5);
  CHECK(r.fruit.tp == 1);
  CHECK(r.fruit.fp == 1);
  CHECK(r.fruit.fn == 0);
  CHECK(std::abs(r.fruit.sq - 0.8) < 1e-9);
  CHECK(std::abs(r.fruit.rq - 2.0 / 3.0) < 1e-9);
  CHECK(std::abs(r.fruit.pq - 0.8 * 2.0 / 3.0) < 1e-9);
  CHECK(std::abs(r.fruit.iou - 0.8) < 1e-9);
}

TEST_CASE("background is a single stuff segment") {
  // GT background 30 points; prediction swallows 5 of them into a fruit.
  const auto gt = from_labels(with_instance(40, {{0, {0, 9}}}));
  const auto pred = from_labels(with_instance(40, {{0, {0, 14}}}));
  const auto r = panoptic_quality(pred, gt, 0.5);
  CHECK(r.background.tp == 1);
  CHECK(r.background.rq == 1.0);
  CHECK(std::abs(r.background.sq - 25.0 / 30.0) < 1e-12);
  CHECK(std::abs(r.background.semantic_iou - 25.0 / 30.0) < 1e-12);
  CHECK(std::abs(r.fruit.semantic_iou - 10.0 / 15.0) < 1e-12);
}

TEST_CASE("empty classes are flagged degenerate and report 0") {
  const auto a = from_labels(std::vector<int>(10, -1));
  const auto r = panoptic_quality(a, a);
  CHECK(r.fruit.degenerate);
  CHECK(r.fruit.pq == 0.0);
  CHECK_FALSE(r.background.degenerate);
}

TEST_CASE("PQ equals SQ times RQ and greedy pairing matches a brute-force oracle") {
  std::mt19937_64 rng(11);
  for (int seed = 0; seed < 60; ++seed) {
    const auto n = 40 + static_cast<std::size_t>(seed);
    const auto gt = from_labels(random_labels(n, 5, 1000 + static_cast<std::uint64_t>(seed)));
    auto labels = random_labels(n, 5, 2000 + static_cast<std::uint64_t>(seed));
    // Mix ground truth in so that overlaps are substantial.
    const auto gl = gt.id_per_point();
    std::bernoulli_distribution keep(0.7);
    for (std::size_t i = 0; i < n; ++i)
      if (keep(rng)) labels[i] = gl[i];
    const auto pred = from_labels(labels);
    for (double thr : {0.05, 0.2, 0.5, 0.75}) {
      const auto r = panoptic_quality(pred, gt, thr);
      for (const auto* q : {&r.fruit, &r.background}) {
        CHECK(std::abs(q->pq - q->sq * q->rq) < 1e-9);
        CHECK(q->pq >= 0.0);
        CHECK(q->pq <= 1.0);
      }
      CHECK(std::abs(r.average.pq - (r.fruit.pq + r.background.pq) / 2) < 1e-12);
      const auto m = match_instances(pred, gt, thr);
      std::vector<std::pair<int, int>> got;
      for (const auto& t : m.tp) got.emplace_back(t.pred, t.gt);
      std::sort(got.begin(), got.end());
      CHECK(got == greedy_oracle(instance_iou(pred, gt), thr));
      CHECK(m.tp.size() + m.fp.size() == pred.instances.size());
      CHECK(m.tp.size() + m.fn.size() == gt.instances.size());
    }
  }
}

TEST_CASE("above 0.5 every prediction certifies at most one ground-truth instance") {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto pred = from_labels(random_labels(12, 3, seed));
    const auto gt = from_labels(random_labels(12, 3, seed + 500));
    const auto m = instance_iou(pred, gt);
    for (Eigen::Index p = 0; p < m.rows(); ++p) CHECK((m.row(p).array() > 0.5).count() <= 1);
    for (Eigen::Index g = 0; g < m.cols(); ++g) CHECK((m.col(g).array() > 0.5).count() <= 1);
  }
}

TEST_CASE("a prediction covering two ground-truth fruits is adopted by the higher-IoU one only") {
  // gt0 = 0..9, gt1 = 10..13, pred0 = 0..13 -> IoU 10/14 vs 4/14.
  const auto gt = from_labels(with_instance(30, {{0, {0, 9}}, {1, {10, 13}}}));
  const auto pred = from_labels(with_instance(30, {{0, {0, 13}}}));
  const auto a = adopt_predictions(pred, gt, 0.2);
  CHECK(a == std::vector<int>{0, -1});
}

TEST_CASE("ID transfer with perfect segmentation keeps the ground-truth association") {
  const auto cur = from_labels(random_labels(80, 6, 1));
  const auto prev = from_labels(random_labels(80, 5, 2));
  TemporalAssociation gt;
  for (std::size_t i = 0; i < cur.instances.size(); ++i)
    gt.prev.push_back(i < prev.instances.size() && i % 2 == 0 ? static_cast<int>(i) : TemporalAssociation::kNoMatch);
  for (double thr : {0.05, 0.1, 0.15, 0.2, 0.25, 0.3}) {
    const auto r = transfer_ids(cur, cur, prev, prev, gt, thr);
    CHECK(r.association.prev == gt.prev);
  }
}

TEST_CASE("unadopted predictions become negatives") {
  const auto gt_cur = from_labels(with_instance(30, {{0, {0, 9}}}));
  const auto gt_prev = from_labels(with_instance(30, {{0, {0, 9}}}));
  // A spurious second prediction at time t.
  const auto pred_cur = from_labels(with_instance(30, {{0, {0, 9}}, {1, {20, 25}}}));
  const auto r = transfer_ids(pred_cur, gt_cur, gt_prev, gt_prev, assoc({0}), 0.05);
  CHECK(r.association.prev == std::vector<int>{0, TemporalAssociation::kNoMatch});
  CHECK_THROWS_AS(transfer_ids(pred_cur, gt_cur, gt_prev, gt_prev, assoc({0, 0}), 0.05), ValidationError);
}

TEST_CASE("confusion cases follow the per-instance definitions") {
  constexpr int N = TemporalAssociation::kNoMatch;
  const auto c = matching_confusion(assoc({0, 1, N, N, 2}), assoc({0, 2, 1, N, 3}));
  CHECK(c.cm == 1);
  CHECK(c.mm == 2);
  CHECK(c.fm == 0);
  CHECK(c.fn == 1);
  CHECK(c.tn == 1);
  CHECK(c.total() == 5);
  CHECK_THROWS_AS(matching_confusion(assoc({0}), assoc({0, 1})), ValidationError);

  const auto all_fn = matching_confusion(assoc({N, N}), assoc({0, 1}));
  CHECK(all_fn.fn == 2);
  const auto perfect = f1_scores(matching_confusion(assoc({0, N}), assoc({0, N})));
  CHECK(perfect.f1p == 1.0);
  CHECK(perfect.f1n == 1.0);
  CHECK(perfect.mf1 == 1.0);
}

TEST_CASE("F1 scores of CM=8 MM=1 FM=1 TN=3 FN=1") {
  MatchConfusion c;
  c.cm = 8;
  c.mm = 1;
  c.fm = 1;
  c.tn = 3;
  c.fn = 1;
  const auto f = f1_scores(c);
  CHECK(std::abs(f.f1p - 16.0 / 19.0) < 1e-9);
  CHECK(std::abs(f.f1n - 0.75) < 1e-9);
  CHECK(std::abs(f.mf1 - (16.0 / 19.0 + 0.75) / 2.0) < 1e-9);
  CHECK(std::abs(f.mf1 - 0.7961) < 1e-4);
}

TEST_CASE("degenerate F1 terms are flagged") {
  MatchConfusion c;
  c.cm = 3;
  const auto f = f1_scores(c);
  CHECK(f.f1n_degenerate);
  CHECK(f.f1n == 0.0);
  CHECK(f.f1p == 1.0);
  CHECK(f.mf1 == 0.5);
}

TEST_CASE("mF1 is invariant under consistent relabeling") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const int A = 8, B = 7;
    std::uniform_int_distribution<int> pick(-1, B - 1);
    TemporalAssociation p, g;
    for (int i = 0; i < A; ++i) {
      p.prev.push_back(pick(rng));
      g.prev.push_back(pick(rng));
    }
    std::vector<int> perm_prev(B), perm_cur(A);
    std::iota(perm_prev.begin(), perm_prev.end(), 0);
    std::iota(perm_cur.begin(), perm_cur.end(), 0);
    std::shuffle(perm_prev.begin(), perm_prev.end(), rng);
    std::shuffle(perm_cur.begin(), perm_cur.end(), rng);
    TemporalAssociation p2, g2;
    p2.prev.resize(A);
    g2.prev.resize(A);
    for (int i = 0; i < A; ++i) {
      auto map = [&](int v) { return v < 0 ? v : perm_prev[static_cast<std::size_t>(v)]; };
      p2.prev[static_cast<std::size_t>(perm_cur[static_cast<std::size_t>(i)])] = map(p.prev[static_cast<std::size_t>(i)]);
      g2.prev[static_cast<std::size_t>(perm_cur[static_cast<std::size_t>(i)])] = map(g.prev[static_cast<std::size_t>(i)]);
    }
    CHECK(f1_scores(matching_confusion(p, g)).mf1 == f1_scores(matching_confusion(p2, g2)).mf1);
  }
}

TEST_CASE("IoU grid parsing") {
  const auto grid = parse_grid("0.05:0.30:0.05");
  REQUIRE(grid.size() == 6);
  CHECK(grid.front() == doctest::Approx(0.05));
  CHECK(grid.back() == doctest::Approx(0.30));
  CHECK(parse_grid("0.5:0.5:0.1").size() == 1);
  CHECK_THROWS_AS(parse_grid("0.1:0.3"), ConfigError);
  CHECK_THROWS_AS(parse_grid("a:b:c"), ConfigError);
  CHECK_THROWS_AS(parse_grid("0.3:0.1:0.05"), ConfigError);
  CHECK_THROWS_AS(parse_grid("0.1:0.3:0"), ConfigError);
}

TEST_CASE("CSV tables have one row per class and per threshold") {
  const auto dir = std::filesystem::temp_directory_path() / "fruitreid_metrics_csv";
  std::filesystem::create_directories(dir);
  const auto a = from_labels(random_labels(50, 4, 9));
  write_panoptic_csv(dir / "pq.csv", panoptic_quality(a, a));
  std::vector<ThresholdResult> rows;
  for (double t : parse_grid("0.05:0.30:0.05")) rows.push_back({t, {}, {}});
  write_matching_csv(dir / "match.csv", rows);
  auto count = [](const std::filesystem::path& p) {
    std::ifstream in(p);
    std::string line;
    int n = 0;
    while (std::getline(in, line)) ++n;
    return n;
  };
  CHECK(count(dir / "pq.csv") == 4);  // header, background, fruit, average
  CHECK(count(dir / "match.csv") == 7);
  CHECK(to_json(rows).size() == 6);
  std::filesystem::remove_all(dir);
}
