// Acceptance suite: one PASS/FAIL line per criterion A1..A7.
#include "fruitreid/baseline.hpp"
#include "fruitreid/cli.hpp"
#include "fruitreid/io.hpp"
#include "fruitreid/matcher.hpp"
#include "fruitreid/metrics.hpp"
#include "fruitreid/segmentation.hpp"
#include "fruitreid/synth.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <unordered_map>

using namespace fruitreid;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(double v, int digits = 4) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

int failures = 0;

void report(const std::string& id, bool pass, const std::string& detail) {
  std::cout << id << ' ' << (pass ? "PASS" : "FAIL") << "  " << detail << std::endl;
  if (!pass) ++failures;
}

// Runs a unit-test binary restricted to the named test cases. A filter
// that selects nothing counts as a failure.
bool run_cases(const std::string& binary, const std::string& filter) {
  std::string cmd = "\"" + binary + "\" --no-version=true";
  if (!filter.empty()) cmd += " \"--test-case=" + filter + "\"";
  cmd += " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return false;
  std::string text;
  char buf[4096];
  while (std::fgets(buf, sizeof buf, pipe)) text += buf;
  const int status = pclose(pipe);
  const auto pos = text.find("test cases:");
  if (status != 0 || pos == std::string::npos) return false;
  return std::atoi(text.c_str() + pos + 11) > 0;
}

struct SuiteRun {
  bool ok = true;
  double seconds = 0.0;
};

SuiteRun run_suite(const std::vector<std::pair<std::string, std::string>>& parts) {
  SuiteRun r;
  const auto t0 = Clock::now();
  for (const auto& [bin, filter] : parts) {
    const bool ok = run_cases(bin, filter);
    if (!ok) std::cerr << "  failed: " << bin << " " << filter << '\n';
    r.ok = r.ok && ok;
  }
  r.seconds = seconds_since(t0);
  return r;
}

// ------------------------------------------------------------ A5 helpers

// Moves a fraction of the boundary points (those with a differently labeled
// neighbor within `radius`) to one of their neighboring labels.
SceneAnnotation corrupt_boundary(const ColoredCloud& cloud, const SceneAnnotation& ann, double fraction,
                                 double radius, std::uint64_t seed, std::size_t* boundary_count = nullptr) {
  const auto labels = ann.id_per_point();
  auto key = [radius](const Vec3& p, int dx, int dy, int dz) {
    const auto c = [&](double v, int d) { return static_cast<std::int64_t>(std::floor(v / radius)) + d; };
    return (c(p.x(), dx) * 73856093) ^ (c(p.y(), dy) * 19349663) ^ (c(p.z(), dz) * 83492791);
  };
  std::unordered_map<std::int64_t, std::vector<std::uint32_t>> cells;
  for (std::uint32_t i = 0; i < cloud.size(); ++i) cells[key(cloud.points[i], 0, 0, 0)].push_back(i);

  std::vector<std::uint32_t> boundary;
  std::vector<std::vector<int>> options(cloud.size());
  for (std::uint32_t i = 0; i < cloud.size(); ++i) {
    const Vec3& p = cloud.points[i];
    for (int dx = -1; dx <= 1; ++dx)
      for (int dy = -1; dy <= 1; ++dy)
        for (int dz = -1; dz <= 1; ++dz) {
          const auto it = cells.find(key(p, dx, dy, dz));
          if (it == cells.end()) continue;
          for (const auto j : it->second) {
            if (labels[j] != labels[i] && (cloud.points[j] - p).norm() <= radius) options[i].push_back(labels[j]);
          }
        }
    if (!options[i].empty()) boundary.push_back(i);
  }
  if (boundary_count) *boundary_count = boundary.size();
  Rng rng(seed);
  std::shuffle(boundary.begin(), boundary.end(), rng);
  const auto n = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(boundary.size())));
  auto out = labels;
  for (std::size_t k = 0; k < n; ++k) {
    const auto i = boundary[k];
    std::uniform_int_distribution<std::size_t> pick(0, options[i].size() - 1);
    out[i] = options[i][pick(rng)];
  }
  return SceneAnnotation::from_labels(cloud, out);
}

struct NoisyPair {
  const ScenePair* truth;
  SceneAnnotation current, previous;
};

// Mean over the IoU grid of the mF1 pooled over the pairs.
template <class Predict>
double grid_mf1(const std::vector<NoisyPair>& pairs, const std::vector<double>& grid, Predict&& predict) {
  std::vector<TemporalAssociation> preds;
  for (const auto& p : pairs) preds.push_back(predict(p));
  double sum = 0.0;
  for (const double th : grid) {
    MatchConfusion pooled;
    for (std::size_t k = 0; k < pairs.size(); ++k) {
      const auto& p = pairs[k];
      const auto tr = transfer_ids(p.current, p.truth->current.annotation, p.previous, p.truth->previous.annotation,
                                   p.truth->association, th);
      pooled += matching_confusion(preds[k], tr.association);
    }
    sum += f1_scores(pooled).mf1;
  }
  return sum / static_cast<double>(grid.size());
}

// ------------------------------------------------------------ A6/A7 helpers

struct CliRun {
  int code = 0;
  std::string out;
};

CliRun cli(std::vector<std::string> args) {
  args.insert(args.begin(), "fruitreid");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  CliRun r;
  r.code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  r.out = out.str();
  if (r.code != 0) std::cerr << "  fruitreid " << args[1] << ": " << err.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// Instances as small blobs 5 cm apart with some background in between.
Scene blob_scene(int instances, double z) {
  ColoredCloud cloud;
  std::vector<int> labels;
  for (int i = 0; i < instances; ++i) {
    for (int k = 0; k < 6; ++k) {
      cloud.push_back(Vec3(0.05 * i + 0.002 * (k % 3), 0.002 * (k / 3), z), Vec3(0.8, 0.1, 0.1));
      labels.push_back(i);
    }
    cloud.push_back(Vec3(0.05 * i + 0.025, 0.0, z), Vec3(0.2, 0.6, 0.2));
    labels.push_back(-1);
  }
  auto ann = SceneAnnotation::from_labels(cloud, labels);
  return {std::move(cloud), std::move(ann)};
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) {
    std::cerr << "usage: acceptance <unit-test-bin-dir> [work-dir]\n";
    return 2;
  }
  const fs::path bin = argv[1];
  const fs::path work = argc > 2 ? fs::path(argv[2]) : fs::temp_directory_path() / "fruitreid_acceptance";
  fs::remove_all(work);
  fs::create_directories(work);
  const auto exe = [&](const char* name) { return (bin / name).string(); };
  const auto total = Clock::now();

  // A1: gradient suite, < 2 min.
  {
    const auto r = run_suite({{exe("test_nn"), "*gradient*"},
                              {exe("test_nn"), "*lovasz*"},
                              {exe("test_encoder"), "*gradient*"},
                              {exe("test_matcher"), "*gradients*"},
                              {exe("test_segmentation"), "*gradient*"}});
    report("A1", r.ok && r.seconds < 120.0,
           "gradient checks " + std::string(r.ok ? "green" : "red") + " in " + fmt(r.seconds, 1) + " s (limit 120 s)");
  }

  // A2: oracle suite, < 3 min.
  {
    const auto r = run_suite({{exe("test_sparsegrid"), "*dense oracle*"},
                              {exe("test_matcher"), "*priority-queue*"},
                              {exe("test_segmentation"), "*K blob*"},
                              {exe("test_metrics"), ""}});
    report("A2", r.ok && r.seconds < 180.0,
           "oracle checks " + std::string(r.ok ? "green" : "red") + " in " + fmt(r.seconds, 1) + " s (limit 180 s)");
  }

  // A3: segmentation overfit on one 20-fruit scene, < 15 min.
  {
    const auto t0 = Clock::now();
    OrchardConfig c;
    c.fruit_count = {20, 20};
    c.radius_range = {0.0094, 0.0094};
    c.rng_seed = derive_seed(0, "data/pair/0");
    const auto scene = generate_scene(c);
    const std::vector<std::pair<ColoredCloud, SceneAnnotation>> train{{scene.cloud, scene.annotation}};

    SegTrainConfig tc;
    tc.epochs = 200;
    tc.eval_every = 5;
    int first_epoch = -1;
    double pq_at_first = 0.0;
    const auto result = train_segmentation(train, {}, SegNetConfig{}, tc, [&](const SegEpochLog& e) {
      if (first_epoch < 0 && e.val_pq >= 0.90) {
        first_epoch = e.epoch;
        pq_at_first = e.val_pq;
      }
    });
    const auto oracle = segment_instances(scene.cloud, oracle_prediction(scene.cloud, scene.annotation), 0.01125);
    const double secs = seconds_since(t0);
    const bool ok = first_epoch >= 0 && oracle.instances.size() == 20 && secs < 900.0;
    report("A3", ok,
           std::to_string(scene.cloud.size()) + " points; fruit PQ >= 0.90 " +
               (first_epoch >= 0 ? "at epoch " + std::to_string(first_epoch + 1) + " (PQ " + fmt(pq_at_first) + ")"
                                 : std::string("never")) +
               ", best " + fmt(result.best_val_pq) + "; oracle offsets give " +
               std::to_string(oracle.instances.size()) + "/20 instances; " + fmt(secs, 1) + " s");
  }

  // A4: matcher overfit on 5 pairs, validation on 5 held-out pairs, < 20 min.
  std::vector<ScenePair> train_pairs, val_pairs;
  for (int k = 0; k < 5; ++k) {
    OrchardConfig c = OrchardConfig::matcher_scene();
    c.rng_seed = derive_seed(10, "data/pair/" + std::to_string(k));
    train_pairs.push_back(generate_pair(c));
    c.rng_seed = derive_seed(11, "data/pair/" + std::to_string(k));
    val_pairs.push_back(generate_pair(c));
  }
  std::optional<ReidModel> model;
  {
    const auto t0 = Clock::now();
    MatchTrainConfig tc;
    tc.steps = 500;
    tc.lr = 3e-4;
    tc.eval_every = 25;
    tc.stop_at_mf1 = 1.0;
    // No validation set: selection and early stop use the training pairs.
    auto result = train_matcher(train_pairs, {}, EncoderConfig::desk(), MatchConfig::desk(), tc);
    model.emplace(std::move(result.model));
    const double train_mf1 = evaluate_mf1(*model, train_pairs);
    const double val_mf1 = evaluate_mf1(*model, val_pairs);
    const double secs = seconds_since(t0);
    double fruits = 0.0;
    for (const auto& p : train_pairs) fruits += static_cast<double>(p.current.annotation.instances.size());
    const bool ok = train_mf1 == 1.0 && result.best_step < 500 && val_mf1 >= 0.80 && secs < 1200.0;
    report("A4", ok,
           fmt(fruits / 5.0, 1) + " fruits/pair; train mF1 " + fmt(train_mf1) + " at step " +
               std::to_string(result.best_step + 1) + "; validation mF1 " + fmt(val_mf1) + " (>= 0.80); " +
               fmt(secs, 1) + " s");
  }

  // A5: learned matcher vs nn_match at its swept epsilon under boundary noise.
  {
    const auto grid = parse_grid("0.05:0.30:0.05");
    std::size_t boundary = 0, points = 0;
    auto noisy = [&](const std::vector<ScenePair>& pairs, const std::string& stream) {
      std::vector<NoisyPair> out;
      for (std::size_t k = 0; k < pairs.size(); ++k) {
        const auto& p = pairs[k];
        std::size_t b0 = 0, b1 = 0;
        const auto seed = derive_seed(5, stream + "/" + std::to_string(k));
        out.push_back({&p, corrupt_boundary(p.current.cloud, p.current.annotation, 0.2, 0.004, seed, &b1),
                       corrupt_boundary(p.previous.cloud, p.previous.annotation, 0.2, 0.004, seed + 1, &b0)});
        boundary += b0 + b1;
        points += p.current.cloud.size() + p.previous.cloud.size();
      }
      return out;
    };
    const auto noisy_train = noisy(train_pairs, "train");
    const auto noisy_val = noisy(val_pairs, "val");

    auto nn_at = [](double eps) {
      return [eps](const NoisyPair& p) { return nn_match(p.current.centers(), p.previous.centers(), eps); };
    };
    double best_eps = 0.0, best_train = -1.0;
    for (const double eps : parse_grid("0.005:0.1:0.0025")) {
      const double v = grid_mf1(noisy_train, grid, nn_at(eps));
      if (v > best_train) {
        best_train = v;
        best_eps = eps;
      }
    }
    const double nn_val = grid_mf1(noisy_val, grid, nn_at(best_eps));
    const double learned_val = grid_mf1(noisy_val, grid, [&](const NoisyPair& p) {
      return model->associate(p.truth->current.cloud, p.current.instances, p.truth->previous.cloud,
                              p.previous.instances);
    });
    report("A5", learned_val > nn_val,
           "noisy validation mF1: matcher " + fmt(learned_val) + " vs nn_match " + fmt(nn_val) + " at eps* " +
               fmt(best_eps, 4) + " m (train " + fmt(best_train) + "); corrupted 20% of " + std::to_string(boundary) +
               " boundary points out of " + std::to_string(points));
  }

  // A6: eval on a constructed confusion CM=8 MM=1 FM=1 TN=3 FN=1.
  {
    const fs::path dir = work / "a6";
    fs::create_directories(dir);
    const Scene cur = blob_scene(14, 0.0), prev = blob_scene(12, 0.5);
    // Current 0..7 keep partners 0..7; 8 (MM) truly maps to 8; 9 (FN) to 9;
    // 10 (FM) and 11..13 (TN) are new.
    TemporalAssociation gt, pred;
    gt.prev = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, -1, -1, -1, -1};
    pred.prev = {0, 1, 2, 3, 4, 5, 6, 7, 10, -1, 11, -1, -1, -1};
    save_ply(dir / "t.ply", cur.cloud, &cur.annotation);
    save_ply(dir / "prev.ply", prev.cloud, &prev.annotation);
    save_association_csv(dir / "gt.csv", gt, &cur.annotation, &prev.annotation);
    save_association_csv(dir / "pred.csv", pred, &cur.annotation, &prev.annotation);
    const auto t = (dir / "t.ply").string(), p = (dir / "prev.ply").string();
    const auto r = cli({"eval", "--pred-t", t, "--gt-t", t, "--pred-prev", p, "--gt-prev", p, "--pred-assoc",
                        (dir / "pred.csv").string(), "--gt-assoc", (dir / "gt.csv").string(), "--iou-grid",
                        "0.05:0.30:0.05", "--csv", (dir / "report").string()});
    int rows = 0, exact = 0;
    std::istringstream lines(r.out);
    for (std::string line; std::getline(lines, line);) {
      if (line.rfind("iou=", 0) != 0) continue;
      ++rows;
      exact += line.find("CM=8 MM=1 FM=1 TN=3 FN=1 F1p=0.8421 F1n=0.7500 mF1=0.7961") != std::string::npos;
    }
    std::istringstream csv(slurp(dir / "report.matching.csv"));
    int csv_rows = -1;  // header
    for (std::string line; std::getline(csv, line);) ++csv_rows;
    report("A6", r.code == 0 && rows == 6 && exact == 6 && csv_rows == 6,
           std::to_string(exact) + "/" + std::to_string(rows) +
               " grid rows print F1p=0.8421 F1n=0.7500 mF1=0.7961; CSV rows " + std::to_string(csv_rows));
  }

  // A7: every command twice with identical seeds; artifacts byte-identical.
  {
    const std::string small = R"({"schema_version": 1, "canopy_density": 3e4, "points_per_fruit": [100, 120]})";
    std::ofstream(work / "small.json") << small;
    auto run_all = [&](const fs::path& d) {
      const auto s = [&](const char* f) { return (d / f).string(); };
      bool ok = true;
      ok &= cli({"gen", "--out", s("data"), "--seed", "21", "--pairs", "2", "--preset", "matcher", "--config",
                 (work / "small.json").string()})
                .code == 0;
      ok &= cli({"train-seg", "--data", s("data"), "--epochs", "2", "--seed", "4", "--out", s("seg.bin")}).code == 0;
      ok &= cli({"train-match", "--data", s("data"), "--desk", "--steps", "3", "--seed", "4", "--out", s("reid.bin")})
                .code == 0;
      const auto t = s("data/pair_000/scene_t1.ply"), p = s("data/pair_000/scene_t0.ply");
      ok &= cli({"segment", "--model", s("seg.bin"), "--in", t, "--out", s("seg_t.ply")}).code == 0;
      ok &= cli({"segment", "--in", p, "--out", s("seg_prev.ply"), "--oracle-offsets"}).code == 0;
      ok &= cli({"match", "--enc", s("reid.bin"), "--t", t, "--prev", p, "--out", s("assoc.csv"), "--probs",
                 s("probs.json")})
                .code == 0;
      ok &= cli({"match", "--baseline", "nn", "--t", t, "--prev", p, "--out", s("nn.csv")}).code == 0;
      ok &= cli({"eval", "--pred-t", t, "--gt-t", t, "--pred-prev", p, "--gt-prev", p, "--pred-assoc",
                 s("assoc.csv"), "--gt-assoc", s("data/pair_000/assoc_t1_t0.csv"), "--out", s("report.json"),
                 "--csv", s("report")})
                .code == 0;
      return ok;
    };
    const bool ran = run_all(work / "run1") && run_all(work / "run2");
    std::size_t files = 0, same = 0;
    for (const auto& e : fs::recursive_directory_iterator(work / "run1")) {
      if (!e.is_regular_file()) continue;
      ++files;
      const auto other = work / "run2" / fs::relative(e.path(), work / "run1");
      same += fs::exists(other) && slurp(e.path()) == slurp(other);
    }
    report("A7", ran && files > 0 && same == files,
           std::to_string(same) + "/" + std::to_string(files) + " artifacts byte-identical across reruns");
  }

  std::cout << "acceptance: " << (failures == 0 ? "all criteria pass" : std::to_string(failures) + " failing")
            << " (" << fmt(seconds_since(total), 1) << " s)" << std::endl;
  fs::remove_all(work);
  return failures == 0 ? 0 : 1;
}
