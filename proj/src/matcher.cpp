#include "fruitreid/matcher.hpp"
#include "fruitreid/nn/checkpoint.hpp"
#include "fruitreid/nn/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <tuple>

namespace fruitreid {

using nn::Matrix;
using nn::Var;

void MatchConfig::validate() const {
  if (!(max_move > 0.0)) throw ConfigError("matcher max_move must be positive");
  if (token_dim <= 0 || ff_dim <= 0 || heads <= 0) throw ConfigError("matcher widths must be positive");
  if (token_dim % heads != 0) {
    throw ConfigError("matcher token_dim " + std::to_string(token_dim) + " is not divisible by " +
                      std::to_string(heads) + " heads");
  }
  if (n_freq < 1) throw ConfigError("matcher n_freq must be >= 1");
}

MatchConfig MatchConfig::desk() {
  MatchConfig c;
  c.token_dim = 32;
  c.ff_dim = 64;
  c.heads = 4;
  return c;
}

nlohmann::json to_json(const MatchConfig& c) {
  return {{"max_move", c.max_move}, {"token_dim", c.token_dim}, {"ff_dim", c.ff_dim},
          {"heads", c.heads},       {"n_freq", c.n_freq},       {"rng_seed", c.rng_seed}};
}

MatchConfig match_config_from_json(const nlohmann::json& j) {
  MatchConfig c;
  try {
    c.max_move = j.value("max_move", c.max_move);
    c.token_dim = j.value("token_dim", c.token_dim);
    c.ff_dim = j.value("ff_dim", c.ff_dim);
    c.heads = j.value("heads", c.heads);
    c.n_freq = j.value("n_freq", c.n_freq);
    c.rng_seed = j.value("rng_seed", c.rng_seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("matcher config: ") + e.what());
  }
  c.validate();
  return c;
}

Matrix positional_encoding(const Matrix& T, int out_dim, int n_freq, double max_move) {
  if (T.cols() != 3) throw ShapeError("positional encoding expects B x 3 displacements");
  if (out_dim < 6 * n_freq) {
    throw ConfigError("positional encoding needs " + std::to_string(6 * n_freq) + " lanes, got " +
                      std::to_string(out_dim));
  }
  Matrix out = Matrix::Zero(T.rows(), out_dim);
  for (Eigen::Index b = 0; b < T.rows(); ++b) {
    Eigen::Index lane = 0;
    for (Eigen::Index a = 0; a < 3; ++a) {
      const double x = T(b, a) / max_move;
      for (int k = 0; k < n_freq; ++k) {
        const double arg = std::ldexp(std::numbers::pi * x, k);
        out(b, lane++) = std::sin(arg);
        out(b, lane++) = std::cos(arg);
      }
    }
  }
  return out;
}

Matrix distance_mask(std::span<const Vec3> current, std::span<const Vec3> previous, double max_move) {
  const auto A = static_cast<Eigen::Index>(current.size()), B = static_cast<Eigen::Index>(previous.size());
  Matrix keep = Matrix::Ones(A, B + 1);
  for (Eigen::Index i = 0; i < A; ++i)
    for (Eigen::Index j = 0; j < B; ++j)
      if ((previous[static_cast<std::size_t>(j)] - current[static_cast<std::size_t>(i)]).norm() > max_move) {
        keep(i, j) = 0.0;
      }
  return keep;
}

Matcher::Matcher(MatchConfig config, int descriptor_dim)
    : config_(std::move(config)), z_(descriptor_dim), store_(derive_seed(config_.rng_seed, "init/matcher")) {
  config_.validate();
  if (z_ <= 0) throw ConfigError("descriptor dimension must be positive");
}

Matcher::Matcher(MatchConfig config, int descriptor_dim, nn::ParamStore store)
    : config_(std::move(config)), z_(descriptor_dim), store_(std::move(store)) {
  config_.validate();
}

Var Matcher::forward(nn::Tape& t, Var current, Var previous, std::span<const Vec3> current_centers,
                     std::span<const Vec3> previous_centers, bool train) {
  const Eigen::Index A = current.rows(), B = previous.rows();
  if (current.cols() != z_ || previous.cols() != z_) {
    throw ShapeError("descriptor width " + std::to_string(current.cols()) + "/" + std::to_string(previous.cols()) +
                     " does not match the matcher's " + std::to_string(z_));
  }
  if (static_cast<Eigen::Index>(current_centers.size()) != A ||
      static_cast<Eigen::Index>(previous_centers.size()) != B) {
    throw ShapeError("one center per descriptor required");
  }
  if (A == 0) return t.constant(Matrix::Zero(0, B + 1));

  const Eigen::Index rows = A * (B + 1);
  std::vector<std::int32_t> cand(static_cast<std::size_t>(rows)), query(static_cast<std::size_t>(rows));
  Matrix T = Matrix::Zero(rows, 3);
  std::vector<nn::RowRange> segments;
  for (Eigen::Index i = 0; i < A; ++i) {
    segments.push_back({i * (B + 1), (i + 1) * (B + 1)});
    for (Eigen::Index j = 0; j <= B; ++j) {
      const auto r = static_cast<std::size_t>(i * (B + 1) + j);
      cand[r] = static_cast<std::int32_t>(j);  // B selects the zero row
      query[r] = static_cast<std::int32_t>(j < B ? i : A);
      if (j < B) {
        T.row(static_cast<Eigen::Index>(r)) =
            (previous_centers[static_cast<std::size_t>(j)] - current_centers[static_cast<std::size_t>(i)]).transpose();
      }
    }
  }
  Matrix pe = positional_encoding(T, static_cast<int>(2 * z_), config_.n_freq, config_.max_move);
  for (Eigen::Index i = 0; i < A; ++i) pe.row(i * (B + 1) + B).setZero();

  Var zero = t.constant(Matrix::Zero(1, z_));
  Var G = nn::concat_cols({nn::gather_rows(nn::concat_rows({previous, zero}), std::move(cand)),
                           nn::gather_rows(nn::concat_rows({current, zero}), std::move(query))});
  Var h = nn::add(G, t.constant(std::move(pe)));
  h = nn::linear_layer(t, store_, "match.in", h, config_.token_dim);
  h = nn::leaky_relu(nn::batch_norm_layer(t, store_, "match.in_bn", h, train));
  h = nn::encoder_layer(t, store_, "match.transformer", h, config_.heads, config_.ff_dim, segments);
  h = nn::leaky_relu(nn::batch_norm_layer(t, store_, "match.out_bn", h, train));
  Var logits = nn::linear_layer(t, store_, "match.head", h, 1);
  return nn::reshape(nn::softmax_segments(logits, std::move(segments)), A, B + 1);
}

Eigen::VectorXd match_query(const Descriptor& query, const Matrix& candidates, const Matrix& T, Matcher& matcher) {
  if (T.rows() != candidates.rows() || T.cols() != 3) throw ShapeError("T must hold one 3D offset per candidate");
  if (query.size() != matcher.descriptor_dim()) throw ShapeError("query descriptor width mismatch");
  std::vector<Vec3> prev(static_cast<std::size_t>(T.rows()));
  for (Eigen::Index j = 0; j < T.rows(); ++j) prev[static_cast<std::size_t>(j)] = T.row(j).transpose();
  const Vec3 origin = Vec3::Zero();
  const auto pm = batch_match(query.transpose(), candidates, std::span<const Vec3>(&origin, 1), prev, matcher);
  return pm.probs.row(0).transpose();
}

ProbMatrix batch_match(const Matrix& current, const Matrix& previous, std::span<const Vec3> current_centers,
                       std::span<const Vec3> previous_centers, Matcher& matcher) {
  nn::Tape t;
  ProbMatrix pm;
  pm.unmasked =
      matcher.forward(t, t.constant(current), t.constant(previous), current_centers, previous_centers, false).value();
  pm.probs = pm.unmasked.cwiseProduct(distance_mask(current_centers, previous_centers, matcher.config().max_move));
  return pm;
}

TemporalAssociation greedy_assign(const Matrix& H) {
  TemporalAssociation out;
  out.prev.assign(static_cast<std::size_t>(H.rows()), TemporalAssociation::kNoMatch);
  if (H.rows() == 0) return out;
  const Eigen::Index none = H.cols() - 1;
  std::vector<std::tuple<double, Eigen::Index, Eigen::Index>> entries;
  entries.reserve(static_cast<std::size_t>(H.size()));
  for (Eigen::Index i = 0; i < H.rows(); ++i)
    for (Eigen::Index j = 0; j < H.cols(); ++j) entries.emplace_back(-H(i, j), i, j);
  std::sort(entries.begin(), entries.end());
  std::vector<bool> row_done(static_cast<std::size_t>(H.rows()), false), col_done(static_cast<std::size_t>(H.cols()), false);
  Eigen::Index remaining = H.rows();
  for (const auto& [neg, i, j] : entries) {
    if (remaining == 0) break;
    if (row_done[static_cast<std::size_t>(i)] || (j != none && col_done[static_cast<std::size_t>(j)])) continue;
    row_done[static_cast<std::size_t>(i)] = true;
    --remaining;
    if (j != none) {
      col_done[static_cast<std::size_t>(j)] = true;
      out.prev[static_cast<std::size_t>(i)] = static_cast<int>(j);
    }
  }
  return out;
}

Matrix association_matrix(const TemporalAssociation& assoc, Eigen::Index candidates) {
  Matrix m = Matrix::Zero(static_cast<Eigen::Index>(assoc.size()), candidates + 1);
  for (std::size_t i = 0; i < assoc.size(); ++i) {
    const int p = assoc.prev[i];
    if (p != TemporalAssociation::kNoMatch && (p < 0 || p >= candidates)) {
      throw ValidationError("association row " + std::to_string(i) + " points at candidate " + std::to_string(p) +
                            " of " + std::to_string(candidates));
    }
    m(static_cast<Eigen::Index>(i), p == TemporalAssociation::kNoMatch ? candidates : p) = 1.0;
  }
  return m;
}

Var loss_match(Var H, const Matrix& target, double lambda_inj) {
  if (H.rows() != target.rows() || H.cols() != target.cols()) throw ShapeError("loss_match: shape mismatch");
  if (lambda_inj < 0.0) throw ConfigError("lambda_inj must be nonnegative");
  Var ce = nn::cross_entropy(H, target, nn::PredKind::Probabilities, nn::Reduction::Sum);
  const Eigen::Index A = H.rows(), B = H.cols() - 1;
  if (A == 0) return ce;
  if (B == 0) {
    // Every row has zero candidate mass: L_row = A, L_col is empty.
    return nn::add_scalar(ce, lambda_inj * static_cast<double>(A));
  }
  Var cand = nn::slice_cols(H, 0, B);
  Var row = nn::sum_all(nn::abs(nn::add_scalar(nn::sum_rows(cand), -1.0)));
  Var col = nn::sum_all(nn::abs(nn::add_scalar(nn::sum_cols(cand), -1.0)));
  return nn::add(ce, nn::scale(nn::add(row, col), lambda_inj));
}

nlohmann::json to_json(const ProbMatrix& m) {
  auto rows = [](const Matrix& x) {
    auto out = nlohmann::json::array();
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      auto r = nlohmann::json::array();
      for (Eigen::Index j = 0; j < x.cols(); ++j) r.push_back(x(i, j));
      out.push_back(r);
    }
    return out;
  };
  return {{"queries", m.queries()}, {"candidates", m.candidates()}, {"probs", rows(m.probs)},
          {"unmasked", rows(m.unmasked)}};
}

ReidModel ReidModel::create(const EncoderConfig& e, const MatchConfig& m) {
  Encoder enc(e);
  return {enc, Matcher(m, e.descriptor_dim())};
}

TemporalAssociation ReidModel::associate(const Scene& current, const Scene& previous, ProbMatrix* probs) {
  return associate(current.cloud, current.annotation.instances, previous.cloud, previous.annotation.instances, probs);
}

TemporalAssociation ReidModel::associate(const ColoredCloud& cur_cloud, std::span<const FruitInstance> cur,
                                         const ColoredCloud& prev_cloud, std::span<const FruitInstance> prev,
                                         ProbMatrix* probs) {
  const auto dc = encode_all(cur_cloud, cur, encoder);
  const auto dp = encode_all(prev_cloud, prev, encoder);
  std::vector<Vec3> cc, pc;
  for (const auto& f : cur) cc.push_back(f.center);
  for (const auto& f : prev) pc.push_back(f.center);
  auto pm = batch_match(dc.values, dp.values, cc, pc, matcher);
  auto assoc = greedy_assign(pm.probs);
  if (probs) *probs = std::move(pm);
  return assoc;
}

void save_reid(const std::filesystem::path& path, const ReidModel& model) {
  nn::ParamStore merged(model.encoder.store().seed());
  merged.merge_from(model.encoder.store());
  merged.merge_from(model.matcher.store());
  nn::save_checkpoint(path, merged,
                      {{"kind", "reid"},
                       {"encoder", to_json(model.encoder.config())},
                       {"matcher", to_json(model.matcher.config())},
                       {"descriptor_dim", model.matcher.descriptor_dim()}});
}

namespace {

nn::Checkpoint load_reid_checkpoint(const std::filesystem::path& path) {
  auto ck = nn::load_checkpoint(path);
  if (ck.config.value("kind", "") != "reid") throw ShapeError("'" + path.string() + "' is not a re-identification checkpoint");
  return ck;
}

}  // namespace

ReidModel load_reid(const std::filesystem::path& path) { return load_reid(path, path); }

ReidModel load_reid(const std::filesystem::path& encoder_path, const std::filesystem::path& matcher_path) {
  auto ek = load_reid_checkpoint(encoder_path);
  auto mk = encoder_path == matcher_path ? ek : load_reid_checkpoint(matcher_path);
  const auto ec = encoder_config_from_json(ek.config.at("encoder"));
  const auto mc = match_config_from_json(mk.config.at("matcher"));
  const int z = mk.config.value("descriptor_dim", 0);
  if (z != ec.descriptor_dim()) {
    throw ShapeError("matcher expects " + std::to_string(z) + "-d descriptors, encoder produces " +
                     std::to_string(ec.descriptor_dim()));
  }
  nn::ParamStore es(ek.store.seed()), ms(mk.store.seed());
  es.merge_from(ek.store, "enc.");
  ms.merge_from(mk.store, "match.");
  return {Encoder(ec, std::move(es)), Matcher(mc, z, std::move(ms))};
}

double evaluate_mf1(ReidModel& model, std::span<const ScenePair> pairs) {
  MatchConfusion c;
  for (const auto& p : pairs) c += matching_confusion(model.associate(p.current, p.previous), p.association);
  return f1_scores(c).mf1;
}

MatchTrainResult train_matcher(std::span<const ScenePair> train, std::span<const ScenePair> validation,
                               const EncoderConfig& encoder_config, const MatchConfig& match_config,
                               const MatchTrainConfig& config, const std::function<void(const MatchStepLog&)>& on_step) {
  if (train.empty()) throw EmptyInputError("matcher training set is empty");
  if (config.steps < 0 || config.eval_every < 1) throw ConfigError("steps >= 0 and eval_every >= 1 required");
  ReidModel model = ReidModel::create(encoder_config, match_config);
  MatchTrainResult result{model, {}, -1, -1.0};
  const auto val = validation.empty() ? train : validation;

  // Supports are cut from the unaugmented clouds; augmentation then acts on
  // each support about its own fruit center.
  struct Prepared {
    std::vector<ColoredCloud> prev, cur;
    std::vector<Vec3> prev_centers, cur_centers;
    Matrix target;
  };
  std::vector<Prepared> prepared;
  for (std::size_t k = 0; k < train.size(); ++k) {
    const auto& p = train[k];
    Prepared q;
    q.prev = instance_supports(p.previous.cloud, p.previous.annotation.instances, encoder_config, config.seed);
    q.cur = instance_supports(p.current.cloud, p.current.annotation.instances, encoder_config, config.seed);
    q.prev_centers = p.previous.annotation.centers();
    q.cur_centers = p.current.annotation.centers();
    q.target = association_matrix(p.association, static_cast<Eigen::Index>(q.prev.size()));
    prepared.push_back(std::move(q));
  }

  nn::AdamConfig adam{config.lr};
  for (int step = 0; step < config.steps; ++step) {
    const auto& q = prepared[static_cast<std::size_t>(step) % prepared.size()];
    std::vector<ColoredCloud> supports;
    supports.reserve(q.prev.size() + q.cur.size());
    for (const auto* side : {&q.prev, &q.cur})
      for (const auto& s : *side) supports.push_back(s);
    if (config.augment) {
      for (std::size_t i = 0; i < supports.size(); ++i) {
        auto a = AugmentConfig::matcher_preset(
            derive_seed(config.seed, "augment/" + std::to_string(step) + "/" + std::to_string(i)));
        supports[i] = augment(supports[i], a);
      }
    }
    nn::Tape tape;
    nn::GraphMaps graph;
    Var d = model.encoder.forward(tape, graph, supports, true);
    const auto B = static_cast<Eigen::Index>(q.prev.size());
    const auto A = static_cast<Eigen::Index>(q.cur.size());
    Var dp = nn::slice_rows(d, 0, B);
    Var dc = nn::slice_rows(d, B, A);
    Var H = model.matcher.forward(tape, dc, dp, q.cur_centers, q.prev_centers, true);
    Var loss = loss_match(H, q.target, config.lambda_inj);
    MatchStepLog entry;
    entry.step = step;
    entry.loss = loss.scalar();
    if (!std::isfinite(entry.loss)) {
      throw DivergenceError("matching loss became non-finite at step " + std::to_string(step));
    }
    model.encoder.store().zero_grad();
    model.matcher.store().zero_grad();
    tape.backward(loss);
    nn::adam_step(model.encoder.store(), adam, step + 1);
    nn::adam_step(model.matcher.store(), adam, step + 1);

    bool stop = false;
    if ((step + 1) % config.eval_every == 0 || step + 1 == config.steps) {
      entry.val_mf1 = evaluate_mf1(model, val);
      entry.train_mf1 = validation.empty() ? entry.val_mf1 : evaluate_mf1(model, train);
      if (entry.val_mf1 > result.best_val_mf1) {
        result.best_val_mf1 = entry.val_mf1;
        result.best_step = step;
        result.model = model;
      }
      stop = entry.val_mf1 >= config.stop_at_mf1;
    }
    result.log.push_back(entry);
    if (on_step) on_step(entry);
    if (stop) break;
  }
  return result;
}

}  // namespace fruitreid
