#include "fruitreid/cli.hpp"

#include "fruitreid/baseline.hpp"
#include "fruitreid/io.hpp"
#include "fruitreid/matcher.hpp"
#include "fruitreid/metrics.hpp"
#include "fruitreid/segmentation.hpp"
#include "fruitreid/synth.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>

namespace fruitreid {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

constexpr int kSchemaVersion = 1;

json read_config_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path.string() + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("'" + path.string() + "': " + e.what());
  }
  if (!j.is_object()) throw ConfigError("'" + path.string() + "' must hold a JSON object");
  const int v = j.value("schema_version", kSchemaVersion);
  if (v != kSchemaVersion) throw ConfigError("unsupported schema_version " + std::to_string(v));
  j.erase("schema_version");
  return j;
}

std::string fixed(double v, int digits = 4) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

std::string pair_name(int k) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "pair_%03d", k);
  return buf;
}

void ensure_parent(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

class JsonLog {
 public:
  explicit JsonLog(const fs::path& path) : out_(path, std::ios::binary) {
    if (!out_) throw IoError("cannot write log '" + path.string() + "'");
  }
  void write(const json& j) { out_ << j.dump() << '\n'; }

 private:
  std::ofstream out_;
};

std::vector<std::pair<ColoredCloud, SceneAnnotation>> scenes_of(const fs::path& root) {
  std::vector<std::pair<ColoredCloud, SceneAnnotation>> out;
  for (const auto& dir : pair_directories(root)) {
    auto p = read_pair(dir);
    out.emplace_back(std::move(p.previous.cloud), std::move(p.previous.annotation));
    out.emplace_back(std::move(p.current.cloud), std::move(p.current.annotation));
  }
  return out;
}

std::vector<ScenePair> pairs_of(const fs::path& root) {
  std::vector<ScenePair> out;
  for (const auto& dir : pair_directories(root)) out.push_back(read_pair(dir));
  return out;
}

Scene load_annotated(const fs::path& path) {
  auto ply = load_ply(path);
  if (!ply.annotation) throw ValidationError("'" + path.string() + "' has no instance_id property");
  return {std::move(ply.cloud), std::move(*ply.annotation)};
}

// ---------------------------------------------------------------- gen

struct GenArgs {
  fs::path out;
  std::uint64_t seed = 0;
  fs::path config;
  int pairs = 1;
  std::string preset = "row";
};

int cmd_gen(const GenArgs& a, std::ostream& out) {
  OrchardConfig base = a.preset == "matcher" ? OrchardConfig::matcher_scene() : OrchardConfig{};
  if (!a.config.empty()) {
    json j = to_json(base);
    j.update(read_config_file(a.config));
    base = orchard_config_from_json(j);
  }
  base.validate();
  fs::create_directories(a.out);
  for (int k = 0; k < a.pairs; ++k) {
    OrchardConfig c = base;
    c.rng_seed = derive_seed(a.seed, "data/pair/" + std::to_string(k));
    const auto pair = generate_pair(c);
    const auto name = pair_name(k);
    write_pair(a.out / name, pair, c);
    for (const auto* s : {&pair.previous, &pair.current}) {
      out << name << '/' << (s == &pair.previous ? "scene_t0" : "scene_t1") << " points=" << s->cloud.size()
          << " fruits=" << s->annotation.instances.size() << '\n';
    }
    out << name << "/assoc_t1_t0 matched=" << pair.association.size() - pair.association.no_match_count()
        << " unmatched=" << pair.association.no_match_count() << '\n';
  }
  return kExitOk;
}

// ---------------------------------------------------------------- train-seg

struct TrainSegArgs {
  fs::path data, val, out, config, log;
  std::optional<int> epochs;
  std::optional<double> lr;
  std::uint64_t seed = 0;
  std::string tune;
};

int cmd_train_seg(const TrainSegArgs& a, std::ostream& out) {
  SegNetConfig model;
  SegTrainConfig train;
  if (!a.config.empty()) {
    const json j = read_config_file(a.config);
    if (j.contains("model")) {
      json m = to_json(model);
      m.update(j.at("model"));
      model = seg_config_from_json(m);
    }
    const json t = j.value("train", json::object());
    train.epochs = t.value("epochs", train.epochs);
    train.steps_per_epoch = t.value("steps_per_epoch", train.steps_per_epoch);
    train.lr = t.value("lr", train.lr);
    train.lr_decay = t.value("lr_decay", train.lr_decay);
    train.augment = t.value("augment", train.augment);
    train.eval_every = t.value("eval_every", train.eval_every);
    train.weights.ce = t.value("w_ce", train.weights.ce);
    train.weights.lovasz = t.value("w_lovasz", train.weights.lovasz);
    train.weights.offset = t.value("w_offset", train.weights.offset);
  }
  if (a.epochs) train.epochs = *a.epochs;
  if (a.lr) train.lr = *a.lr;
  if (train.epochs < 0) throw ConfigError("epochs must be >= 0");
  model.rng_seed = a.seed;
  train.seed = a.seed;
  model.validate();

  const auto scenes = scenes_of(a.data);
  const auto val = a.val.empty() ? decltype(scenes){} : scenes_of(a.val);
  ensure_parent(a.out);
  JsonLog log(a.log.empty() ? fs::path(a.out.string() + ".log.jsonl") : a.log);
  auto result = train_segmentation(scenes, val, model, train, [&](const SegEpochLog& e) {
    json j{{"epoch", e.epoch}, {"lr", e.lr}, {"loss", e.loss}};
    if (e.val_pq >= 0.0) j["val_pq"] = e.val_pq;
    log.write(j);
  });

  SegNet best = std::move(result.model);
  if (!a.tune.empty()) {
    const auto grid = parse_grid(a.tune);
    const auto t = tune_bandwidth(best, val.empty() ? scenes : val, grid);
    for (const auto& [bw, pq] : t.table) log.write({{"bandwidth", bw}, {"pq", pq}});
    SegNetConfig c = best.config();
    c.bandwidth = t.best;
    best = SegNet(c, best.store());
  }
  save_segnet(a.out, best);
  out << "best_epoch=" << result.best_epoch << " val_pq=" << fixed(result.best_val_pq)
      << " bandwidth=" << best.config().bandwidth << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------- train-match

struct TrainMatchArgs {
  fs::path data, val, out, config, log;
  std::optional<int> epochs, steps;
  std::optional<double> lr;
  std::uint64_t seed = 0;
  bool desk = false;
};

int cmd_train_match(const TrainMatchArgs& a, std::ostream& out) {
  EncoderConfig enc = a.desk ? EncoderConfig::desk() : EncoderConfig{};
  MatchConfig match = a.desk ? MatchConfig::desk() : MatchConfig{};
  MatchTrainConfig train;
  if (!a.config.empty()) {
    const json j = read_config_file(a.config);
    if (j.contains("encoder")) {
      json e = to_json(enc);
      e.update(j.at("encoder"));
      enc = encoder_config_from_json(e);
    }
    if (j.contains("matcher")) {
      json m = to_json(match);
      m.update(j.at("matcher"));
      match = match_config_from_json(m);
    }
    const json t = j.value("train", json::object());
    train.steps = t.value("steps", train.steps);
    train.lr = t.value("lr", train.lr);
    train.lambda_inj = t.value("lambda_inj", train.lambda_inj);
    train.augment = t.value("augment", train.augment);
    train.eval_every = t.value("eval_every", train.eval_every);
    train.stop_at_mf1 = t.value("stop_at_mf1", train.stop_at_mf1);
  }
  const auto pairs = pairs_of(a.data);
  const auto val = a.val.empty() ? decltype(pairs){} : pairs_of(a.val);
  // One epoch is one pass over the training pairs.
  if (a.epochs) train.steps = *a.epochs * static_cast<int>(pairs.size());
  if (a.steps) train.steps = *a.steps;
  if (a.lr) train.lr = *a.lr;
  if (train.steps < 0) throw ConfigError("steps must be >= 0");
  enc.rng_seed = a.seed;
  match.rng_seed = a.seed;
  train.seed = a.seed;
  enc.validate();
  match.validate();

  ensure_parent(a.out);
  JsonLog log(a.log.empty() ? fs::path(a.out.string() + ".log.jsonl") : a.log);
  auto result = train_matcher(pairs, val, enc, match, train, [&](const MatchStepLog& s) {
    json j{{"step", s.step}, {"lr", train.lr}, {"loss", s.loss}};
    if (s.train_mf1 >= 0.0) j["train_mf1"] = s.train_mf1;
    if (s.val_mf1 >= 0.0) j["val_mf1"] = s.val_mf1;
    log.write(j);
  });
  save_reid(a.out, result.model);
  out << "best_step=" << result.best_step << " val_mf1=" << fixed(result.best_val_mf1) << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------- segment

struct SegmentArgs {
  fs::path model, in, out;
  std::optional<double> bandwidth;
  std::optional<int> min_points;
  bool oracle = false;
};

int cmd_segment(const SegmentArgs& a, std::ostream& out) {
  auto ply = load_ply(a.in);
  if (ply.cloud.empty()) throw EmptyInputError("'" + a.in.string() + "' has no points");
  SceneAnnotation result;
  if (a.oracle) {
    if (!ply.annotation) throw ConfigError("--oracle-offsets needs an instance_id property in the input");
    const auto pred = oracle_prediction(ply.cloud, *ply.annotation);
    result = segment_instances(ply.cloud, pred, a.bandwidth.value_or(SegNetConfig{}.bandwidth),
                               a.min_points.value_or(SegNetConfig{}.min_points));
  } else {
    if (a.model.empty()) throw ConfigError("--model is required unless --oracle-offsets is given");
    SegNet model = load_segnet(a.model);
    const auto pred = model.predict(ply.cloud);
    result = segment_instances(ply.cloud, pred, a.bandwidth.value_or(model.config().bandwidth),
                               a.min_points.value_or(model.config().min_points));
  }
  ensure_parent(a.out);
  save_ply(a.out, ply.cloud, &result);
  out << "points=" << ply.cloud.size() << " instances=" << result.instances.size()
      << " background=" << result.background_indices.size() << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------- match

struct MatchArgs {
  fs::path enc, matcher, t, prev, out, probs;
  std::string baseline;
  double epsilon = 0.033;
};

int cmd_match(const MatchArgs& a, std::ostream& out) {
  const Scene cur = load_annotated(a.t);
  const Scene prev = load_annotated(a.prev);
  TemporalAssociation assoc;
  if (a.baseline == "nn") {
    if (!(a.epsilon > 0.0)) throw ConfigError("--epsilon must be > 0");
    assoc = nn_match(cur.annotation.centers(), prev.annotation.centers(), a.epsilon);
  } else {
    if (a.enc.empty()) throw ConfigError("--enc is required unless --baseline nn is given");
    ReidModel model = load_reid(a.enc, a.matcher.empty() ? a.enc : a.matcher);
    ProbMatrix probs;
    assoc = model.associate(cur, prev, &probs);
    if (!a.probs.empty()) {
      ensure_parent(a.probs);
      std::ofstream p(a.probs, std::ios::binary);
      if (!p) throw IoError("cannot write '" + a.probs.string() + "'");
      p << to_json(probs).dump(1) << '\n';
    }
  }
  ensure_parent(a.out);
  save_association_csv(a.out, assoc, &cur.annotation, &prev.annotation);
  out << "queries=" << assoc.size() << " matched=" << assoc.size() - assoc.no_match_count()
      << " unmatched=" << assoc.no_match_count() << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------- eval

struct EvalArgs {
  fs::path pred_t, pred_prev, pred_assoc, gt_t, gt_prev, gt_assoc, out, csv;
  std::string grid = "0.05:0.30:0.05";
};

void print_quality(std::ostream& out, const std::string& tag, const PanopticReport& r) {
  out << tag << " PQ=" << fixed(r.fruit.pq) << " SQ=" << fixed(r.fruit.sq) << " RQ=" << fixed(r.fruit.rq)
      << " mPQ=" << fixed(r.average.pq) << '\n';
}

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  const auto thresholds = parse_grid(a.grid);
  const Scene pt = load_annotated(a.pred_t);
  const Scene gt = load_annotated(a.gt_t);
  if (pt.cloud.size() != gt.cloud.size()) {
    throw ShapeError("prediction and ground truth at t differ in point count");
  }
  json report;
  const auto seg_t = panoptic_quality(pt.annotation, gt.annotation);
  report["segmentation_t"] = to_json(seg_t);
  print_quality(out, "segmentation_t", seg_t);

  const bool matching = !a.pred_prev.empty() || !a.gt_prev.empty() || !a.pred_assoc.empty() || !a.gt_assoc.empty();
  std::vector<ThresholdResult> rows;
  if (matching) {
    if (a.pred_prev.empty() || a.gt_prev.empty() || a.pred_assoc.empty() || a.gt_assoc.empty()) {
      throw ConfigError("matching evaluation needs --pred-prev, --gt-prev, --pred-assoc and --gt-assoc");
    }
    const Scene pp = load_annotated(a.pred_prev);
    const Scene gp = load_annotated(a.gt_prev);
    if (pp.cloud.size() != gp.cloud.size()) {
      throw ShapeError("prediction and ground truth at t-1 differ in point count");
    }
    const auto seg_prev = panoptic_quality(pp.annotation, gp.annotation);
    report["segmentation_prev"] = to_json(seg_prev);
    print_quality(out, "segmentation_prev", seg_prev);

    const auto pred_assoc = load_association_csv(a.pred_assoc, &pt.annotation, &pp.annotation);
    const auto gt_assoc = load_association_csv(a.gt_assoc, &gt.annotation, &gp.annotation);
    double mean = 0.0;
    for (const double th : thresholds) {
      const auto tr = transfer_ids(pt.annotation, gt.annotation, pp.annotation, gp.annotation, gt_assoc, th);
      ThresholdResult r;
      r.threshold = th;
      r.confusion = matching_confusion(pred_assoc, tr.association);
      r.f1 = f1_scores(r.confusion);
      mean += r.f1.mf1;
      const auto& c = r.confusion;
      out << "iou=" << fixed(th, 2) << " CM=" << c.cm << " MM=" << c.mm << " FM=" << c.fm << " TN=" << c.tn
          << " FN=" << c.fn << " F1p=" << fixed(r.f1.f1p) << " F1n=" << fixed(r.f1.f1n)
          << " mF1=" << fixed(r.f1.mf1) << '\n';
      rows.push_back(r);
    }
    mean /= static_cast<double>(thresholds.size());
    report["matching"] = to_json(rows);
    report["mean_mf1"] = mean;
    out << "mean mF1=" << fixed(mean) << '\n';
  }
  if (!a.out.empty()) {
    ensure_parent(a.out);
    std::ofstream o(a.out, std::ios::binary);
    if (!o) throw IoError("cannot write '" + a.out.string() + "'");
    o << report.dump(2) << '\n';
  }
  if (!a.csv.empty()) {
    ensure_parent(a.csv);
    write_panoptic_csv(a.csv.string() + ".panoptic.csv", seg_t);
    if (matching) write_matching_csv(a.csv.string() + ".matching.csv", rows);
  }
  return kExitOk;
}

int exit_code_for(std::ostream& err, const char* kind, const std::exception& e, int code) {
  err << "error (" << kind << "): " << e.what() << '\n';
  return code;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Fruit re-identification on colored point clouds", "fruitreid"};
  app.require_subcommand(1);
  int code = kExitOk;

  GenArgs gen;
  auto* g = app.add_subcommand("gen", "Generate synthetic scene pairs");
  g->add_option("--out", gen.out, "Output directory")->required();
  g->add_option("--seed", gen.seed, "Base seed");
  g->add_option("--config", gen.config, "Orchard config JSON");
  g->add_option("--pairs", gen.pairs, "Number of pairs")->check(CLI::PositiveNumber);
  g->add_option("--preset", gen.preset, "Base config before --config")->check(CLI::IsMember({"row", "matcher"}));
  g->callback([&] { code = cmd_gen(gen, out); });

  TrainSegArgs ts;
  auto* s = app.add_subcommand("train-seg", "Train the segmentation network");
  s->add_option("--data", ts.data, "Pair directory or parent of pair_* directories")->required();
  s->add_option("--val", ts.val, "Validation pairs");
  s->add_option("--out", ts.out, "Checkpoint path")->required();
  s->add_option("--epochs", ts.epochs);
  s->add_option("--lr", ts.lr);
  s->add_option("--seed", ts.seed);
  s->add_option("--config", ts.config, "JSON with 'model' and 'train' sections");
  s->add_option("--log", ts.log, "JSON-lines log (default <out>.log.jsonl)");
  s->add_option("--tune-bandwidth", ts.tune, "Bandwidth grid start:stop:step stored in the checkpoint");
  s->callback([&] { code = cmd_train_seg(ts, out); });

  TrainMatchArgs tm;
  auto* m = app.add_subcommand("train-match", "Train the descriptor encoder and matcher");
  m->add_option("--data", tm.data)->required();
  m->add_option("--val", tm.val);
  m->add_option("--out", tm.out)->required();
  auto* ep = m->add_option("--epochs", tm.epochs, "Passes over the training pairs");
  m->add_option("--steps", tm.steps, "Optimizer steps")->excludes(ep);
  m->add_option("--lr", tm.lr);
  m->add_option("--seed", tm.seed);
  m->add_option("--config", tm.config, "JSON with 'encoder', 'matcher' and 'train' sections");
  m->add_option("--log", tm.log);
  m->add_flag("--desk", tm.desk, "Start from the reduced desk configs");
  m->callback([&] { code = cmd_train_match(tm, out); });

  SegmentArgs sg;
  auto* seg = app.add_subcommand("segment", "Segment fruit instances in a cloud");
  seg->add_option("--model", sg.model);
  seg->add_option("--in", sg.in)->required();
  seg->add_option("--out", sg.out)->required();
  seg->add_option("--bandwidth", sg.bandwidth, "Mean-shift bandwidth (default from the checkpoint)");
  seg->add_option("--min-points", sg.min_points);
  seg->add_flag("--oracle-offsets", sg.oracle, "Cluster the input's ground-truth offsets");
  seg->callback([&] { code = cmd_segment(sg, out); });

  MatchArgs ma;
  auto* mt = app.add_subcommand("match", "Associate instances of two visits");
  mt->add_option("--enc", ma.enc, "Encoder checkpoint");
  mt->add_option("--matcher", ma.matcher, "Matcher checkpoint (default: --enc)");
  mt->add_option("--t", ma.t, "Annotated PLY at t")->required();
  mt->add_option("--prev", ma.prev, "Annotated PLY at t-1")->required();
  mt->add_option("--out", ma.out, "Association CSV")->required();
  mt->add_option("--probs", ma.probs, "Also write the probability matrix as JSON");
  mt->add_option("--baseline", ma.baseline)->check(CLI::IsMember({"nn"}));
  mt->add_option("--epsilon", ma.epsilon);
  mt->callback([&] { code = cmd_match(ma, out); });

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Segmentation and re-identification metrics");
  e->add_option("--pred-t", ev.pred_t)->required();
  e->add_option("--gt-t", ev.gt_t)->required();
  e->add_option("--pred-prev", ev.pred_prev);
  e->add_option("--gt-prev", ev.gt_prev);
  e->add_option("--pred-assoc", ev.pred_assoc);
  e->add_option("--gt-assoc", ev.gt_assoc);
  e->add_option("--iou-grid", ev.grid);
  e->add_option("--out", ev.out, "JSON report");
  e->add_option("--csv", ev.csv, "CSV prefix");
  e->callback([&] { code = cmd_eval(ev, out); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& pe) {
    const int c = app.exit(pe, out, err);
    return c == 0 ? kExitOk : kExitConfig;
  } catch (const ConfigError& x) {
    return exit_code_for(err, "config", x, kExitConfig);
  } catch (const DivergenceError& x) {
    return exit_code_for(err, "divergence", x, kExitDivergence);
  } catch (const ShapeError& x) {
    return exit_code_for(err, "shape", x, kExitShape);
  } catch (const ValidationError& x) {
    return exit_code_for(err, "validation", x, kExitShape);
  } catch (const IoError& x) {
    return exit_code_for(err, "io", x, kExitIo);
  } catch (const ParseError& x) {
    return exit_code_for(err, "parse", x, kExitIo);
  } catch (const EmptyInputError& x) {
    return exit_code_for(err, "empty input", x, kExitIo);
  } catch (const fs::filesystem_error& x) {
    return exit_code_for(err, "io", x, kExitIo);
  } catch (const nlohmann::json::exception& x) {
    return exit_code_for(err, "config", x, kExitConfig);
  }
  return code;
}

}  // namespace fruitreid
