#include "fruitreid/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace fruitreid {

double iou(std::span<const std::uint32_t> a, std::span<const std::uint32_t> b) {
  std::size_t inter = 0;
  auto ia = a.begin();
  auto ib = b.begin();
  while (ia != a.end() && ib != b.end()) {
    if (*ia < *ib) {
      ++ia;
    } else if (*ib < *ia) {
      ++ib;
    } else {
      ++inter;
      ++ia;
      ++ib;
    }
  }
  const std::size_t uni = a.size() + b.size() - inter;
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

Eigen::MatrixXd instance_iou(const SceneAnnotation& pred, const SceneAnnotation& gt) {
  if (pred.point_count() != gt.point_count()) {
    throw ValidationError("annotations cover " + std::to_string(pred.point_count()) + " and " +
                          std::to_string(gt.point_count()) + " points");
  }
  const auto owner = pred.instance_index_per_point();
  Eigen::MatrixXd inter = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(pred.instances.size()),
                                                static_cast<Eigen::Index>(gt.instances.size()));
  for (std::size_t g = 0; g < gt.instances.size(); ++g) {
    for (auto i : gt.instances[g].point_indices) {
      if (owner[i] >= 0) inter(owner[i], static_cast<Eigen::Index>(g)) += 1.0;
    }
  }
  Eigen::MatrixXd out = inter;
  for (Eigen::Index p = 0; p < out.rows(); ++p) {
    for (Eigen::Index g = 0; g < out.cols(); ++g) {
      const double uni = static_cast<double>(pred.instances[static_cast<std::size_t>(p)].point_indices.size() +
                                             gt.instances[static_cast<std::size_t>(g)].point_indices.size()) -
                         inter(p, g);
      out(p, g) = uni > 0.0 ? inter(p, g) / uni : 0.0;
    }
  }
  return out;
}

InstanceMatching match_instances(const SceneAnnotation& pred, const SceneAnnotation& gt,
                                 double iou_threshold) {
  if (!(iou_threshold > 0.0 && iou_threshold <= 1.0)) throw ConfigError("IoU threshold must be in (0, 1]");
  const Eigen::MatrixXd m = instance_iou(pred, gt);
  std::vector<InstancePair> cand;
  for (Eigen::Index p = 0; p < m.rows(); ++p)
    for (Eigen::Index g = 0; g < m.cols(); ++g)
      if (m(p, g) >= iou_threshold) cand.push_back({static_cast<int>(p), static_cast<int>(g), m(p, g)});
  std::stable_sort(cand.begin(), cand.end(), [](const auto& a, const auto& b) { return a.iou > b.iou; });

  InstanceMatching out;
  std::vector<bool> used_p(static_cast<std::size_t>(m.rows()), false);
  std::vector<bool> used_g(static_cast<std::size_t>(m.cols()), false);
  for (const auto& c : cand) {
    if (used_p[static_cast<std::size_t>(c.pred)] || used_g[static_cast<std::size_t>(c.gt)]) continue;
    used_p[static_cast<std::size_t>(c.pred)] = used_g[static_cast<std::size_t>(c.gt)] = true;
    out.tp.push_back(c);
  }
  for (std::size_t p = 0; p < used_p.size(); ++p)
    if (!used_p[p]) out.fp.push_back(static_cast<int>(p));
  for (std::size_t g = 0; g < used_g.size(); ++g)
    if (!used_g[g]) out.fn.push_back(static_cast<int>(g));
  return out;
}

namespace {

void finish(ClassQuality& q) {
  q.degenerate = q.tp + q.fp + q.fn == 0;
  if (q.degenerate) return;
  q.rq = static_cast<double>(q.tp) / (static_cast<double>(q.tp) + 0.5 * static_cast<double>(q.fp + q.fn));
  q.pq = q.sq * q.rq;
}

std::vector<std::uint32_t> fruit_points(const SceneAnnotation& a) {
  std::vector<std::uint32_t> out;
  for (std::size_t i = 0; i < a.per_point_semantic.size(); ++i)
    if (a.per_point_semantic[i] == Semantic::Fruit) out.push_back(static_cast<std::uint32_t>(i));
  return out;
}

}  // namespace

PanopticReport panoptic_quality(const SceneAnnotation& pred, const SceneAnnotation& gt,
                                double iou_threshold) {
  PanopticReport r;
  const auto m = match_instances(pred, gt, iou_threshold);
  r.fruit.tp = m.tp.size();
  r.fruit.fp = m.fp.size();
  r.fruit.fn = m.fn.size();
  if (!m.tp.empty()) {
    double s = 0.0;
    for (const auto& t : m.tp) s += t.iou;
    r.fruit.sq = r.fruit.iou = s / static_cast<double>(m.tp.size());
  }
  r.fruit.semantic_iou = iou(fruit_points(pred), fruit_points(gt));
  finish(r.fruit);

  const double bg = iou(pred.background_indices, gt.background_indices);
  r.background.semantic_iou = bg;
  if (bg >= iou_threshold && bg > 0.0) {
    r.background.tp = 1;
    r.background.sq = r.background.iou = bg;
  } else {
    r.background.fp = pred.background_indices.empty() ? 0 : 1;
    r.background.fn = gt.background_indices.empty() ? 0 : 1;
  }
  finish(r.background);

  auto& a = r.average;
  a.iou = (r.background.iou + r.fruit.iou) / 2.0;
  a.semantic_iou = (r.background.semantic_iou + r.fruit.semantic_iou) / 2.0;
  a.rq = (r.background.rq + r.fruit.rq) / 2.0;
  a.sq = (r.background.sq + r.fruit.sq) / 2.0;
  a.pq = (r.background.pq + r.fruit.pq) / 2.0;
  a.tp = r.background.tp + r.fruit.tp;
  a.fp = r.background.fp + r.fruit.fp;
  a.fn = r.background.fn + r.fruit.fn;
  a.degenerate = r.background.degenerate && r.fruit.degenerate;
  return r;
}

std::vector<int> adopt_predictions(const SceneAnnotation& pred, const SceneAnnotation& gt,
                                   double iou_threshold) {
  const Eigen::MatrixXd m = instance_iou(pred, gt);
  std::vector<int> best(gt.instances.size(), -1);
  for (Eigen::Index g = 0; g < m.cols(); ++g) {
    double top = iou_threshold;
    for (Eigen::Index p = 0; p < m.rows(); ++p) {
      if (m(p, g) > top) {
        top = m(p, g);
        best[static_cast<std::size_t>(g)] = static_cast<int>(p);
      }
    }
  }
  // Resolve predictions claimed more than once in favor of the highest IoU.
  std::vector<int> owner(pred.instances.size(), -1);
  for (std::size_t g = 0; g < best.size(); ++g) {
    const int p = best[g];
    if (p < 0) continue;
    int& o = owner[static_cast<std::size_t>(p)];
    if (o < 0 || m(p, static_cast<Eigen::Index>(g)) > m(p, o)) o = static_cast<int>(g);
  }
  std::vector<int> out(gt.instances.size(), -1);
  for (std::size_t p = 0; p < owner.size(); ++p)
    if (owner[p] >= 0) out[static_cast<std::size_t>(owner[p])] = static_cast<int>(p);
  return out;
}

TransferResult transfer_ids(const SceneAnnotation& pred_current, const SceneAnnotation& gt_current,
                            const SceneAnnotation& pred_previous, const SceneAnnotation& gt_previous,
                            const TemporalAssociation& gt_association, double iou_threshold) {
  if (gt_association.size() != gt_current.instances.size()) {
    throw ValidationError("ground-truth association has " + std::to_string(gt_association.size()) +
                          " rows for " + std::to_string(gt_current.instances.size()) + " instances");
  }
  TransferResult r;
  r.adopted_current = adopt_predictions(pred_current, gt_current, iou_threshold);
  r.adopted_previous = adopt_predictions(pred_previous, gt_previous, iou_threshold);
  r.association.prev.assign(pred_current.instances.size(), TemporalAssociation::kNoMatch);
  for (std::size_t g = 0; g < gt_current.instances.size(); ++g) {
    const int p = r.adopted_current[g];
    const int gp = gt_association.prev[g];
    if (p < 0 || gp == TemporalAssociation::kNoMatch) continue;
    if (gp < 0 || static_cast<std::size_t>(gp) >= r.adopted_previous.size()) {
      throw ValidationError("ground-truth association points outside the previous scene");
    }
    r.association.prev[static_cast<std::size_t>(p)] = r.adopted_previous[static_cast<std::size_t>(gp)];
  }
  return r;
}

MatchConfusion& MatchConfusion::operator+=(const MatchConfusion& o) {
  cm += o.cm;
  mm += o.mm;
  fm += o.fm;
  tn += o.tn;
  fn += o.fn;
  return *this;
}

MatchConfusion matching_confusion(const TemporalAssociation& pred, const TemporalAssociation& gt) {
  if (pred.size() != gt.size()) {
    throw ValidationError("predicted association has " + std::to_string(pred.size()) + " rows, ground truth " +
                          std::to_string(gt.size()));
  }
  MatchConfusion c;
  constexpr int none = TemporalAssociation::kNoMatch;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const int g = gt.prev[i], p = pred.prev[i];
    if (g == none) {
      ++(p == none ? c.tn : c.fm);
    } else if (p == none) {
      ++c.fn;
    } else {
      ++(p == g ? c.cm : c.mm);
    }
  }
  return c;
}

F1Report f1_scores(const MatchConfusion& c) {
  F1Report f;
  const double cm = static_cast<double>(c.cm), mm = static_cast<double>(c.mm), fm = static_cast<double>(c.fm),
               tn = static_cast<double>(c.tn), fn = static_cast<double>(c.fn);
  const double dp = 2 * cm + mm + fm + fn;
  const double dn = 2 * tn + fm + fn;
  f.f1p_degenerate = dp == 0.0;
  f.f1n_degenerate = dn == 0.0;
  f.f1p = f.f1p_degenerate ? 0.0 : 2 * cm / dp;
  f.f1n = f.f1n_degenerate ? 0.0 : 2 * tn / dn;
  f.mf1 = (f.f1p + f.f1n) / 2.0;
  return f;
}

std::vector<double> parse_grid(const std::string& spec) {
  double a = 0, b = 0, s = 0;
  char c1 = 0, c2 = 0;
  std::istringstream in(spec);
  if (!(in >> a >> c1 >> b >> c2 >> s) || c1 != ':' || c2 != ':' || !in.eof()) {
    throw ConfigError("grid '" + spec + "' is not start:stop:step");
  }
  if (!(s > 0.0) || b < a) throw ConfigError("grid '" + spec + "' needs step > 0 and stop >= start");
  std::vector<double> out;
  const auto n = static_cast<long>(std::floor((b - a) / s + 1e-9));
  for (long k = 0; k <= n; ++k) out.push_back(std::round((a + static_cast<double>(k) * s) * 1e12) / 1e12);
  return out;
}

nlohmann::json to_json(const ClassQuality& q) {
  return {{"IoU", q.iou}, {"semantic_IoU", q.semantic_iou}, {"RQ", q.rq}, {"SQ", q.sq}, {"PQ", q.pq},
          {"TP", q.tp},   {"FP", q.fp},                     {"FN", q.fn}, {"degenerate", q.degenerate}};
}

nlohmann::json to_json(const PanopticReport& r) {
  return {{"background", to_json(r.background)}, {"fruit", to_json(r.fruit)}, {"average", to_json(r.average)}};
}

nlohmann::json to_json(const MatchConfusion& c) {
  return {{"CM", c.cm}, {"MM", c.mm}, {"FM", c.fm}, {"TN", c.tn}, {"FN", c.fn}};
}

nlohmann::json to_json(const F1Report& f) {
  return {{"F1p", f.f1p}, {"F1n", f.f1n}, {"mF1", f.mf1}, {"F1p_degenerate", f.f1p_degenerate},
          {"F1n_degenerate", f.f1n_degenerate}};
}

nlohmann::json to_json(const std::vector<ThresholdResult>& rows) {
  auto out = nlohmann::json::array();
  for (const auto& r : rows) {
    auto j = to_json(r.f1);
    j["threshold"] = r.threshold;
    j["confusion"] = to_json(r.confusion);
    out.push_back(j);
  }
  return out;
}

namespace {

std::ofstream open_csv(const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << std::fixed << std::setprecision(6);
  return out;
}

}  // namespace

void write_panoptic_csv(const std::filesystem::path& path, const PanopticReport& r) {
  auto out = open_csv(path);
  out << "class,IoU,semantic_IoU,RQ,SQ,PQ,TP,FP,FN\n";
  auto row = [&out](const char* name, const ClassQuality& q) {
    out << name << ',' << q.iou << ',' << q.semantic_iou << ',' << q.rq << ',' << q.sq << ',' << q.pq << ','
        << q.tp << ',' << q.fp << ',' << q.fn << '\n';
  };
  row("background", r.background);
  row("fruit", r.fruit);
  row("average", r.average);
}

void write_matching_csv(const std::filesystem::path& path, const std::vector<ThresholdResult>& rows) {
  auto out = open_csv(path);
  out << "threshold,F1p,F1n,mF1,CM,MM,FM,TN,FN\n";
  for (const auto& r : rows) {
    out << r.threshold << ',' << r.f1.f1p << ',' << r.f1.f1n << ',' << r.f1.mf1 << ',' << r.confusion.cm << ','
        << r.confusion.mm << ',' << r.confusion.fm << ',' << r.confusion.tn << ',' << r.confusion.fn << '\n';
  }
}

}  // namespace fruitreid
