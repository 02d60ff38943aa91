#include "fruitreid/nn/checkpoint.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

namespace fruitreid::nn {

namespace {

void put_u32(std::string& buf, std::uint32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  buf.append(b, 4);
}

std::uint32_t get_u32(const std::string& data, std::size_t& pos) {
  if (pos + 4 > data.size()) throw ParseError("checkpoint truncated");
  std::uint32_t v;
  std::memcpy(&v, data.data() + pos, 4);
  pos += 4;
  return v;
}

void put_tensor(std::string& buf, const Matrix& m) {
  put_u32(buf, static_cast<std::uint32_t>(m.size()));
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    const float f = static_cast<float>(m.data()[i]);
    char b[4];
    std::memcpy(b, &f, 4);
    buf.append(b, 4);
  }
}

Matrix get_tensor(const std::string& data, std::size_t& pos, Eigen::Index rows, Eigen::Index cols) {
  const std::uint32_t n = get_u32(data, pos);
  if (static_cast<Eigen::Index>(n) != rows * cols) throw ParseError("checkpoint tensor size mismatch");
  if (pos + 4ull * n > data.size()) throw ParseError("checkpoint truncated");
  Matrix m(rows, cols);
  for (std::uint32_t i = 0; i < n; ++i) {
    float f;
    std::memcpy(&f, data.data() + pos, 4);
    pos += 4;
    m.data()[i] = f;
  }
  return m;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ParamStore& store,
                     const nlohmann::json& config) {
  nlohmann::json header;
  header["format_version"] = kCheckpointVersion;
  header["config"] = config;
  header["seed"] = store.seed();
  auto tensors = nlohmann::json::array();
  for (const auto& [name, p] : store.params()) {
    tensors.push_back({{"name", name}, {"kind", "param"}, {"shape", {p.value.rows(), p.value.cols()}}});
  }
  for (const auto& [name, b] : store.buffers()) {
    tensors.push_back({{"name", name}, {"kind", "buffer"}, {"shape", {b.rows(), b.cols()}}});
  }
  header["tensors"] = tensors;
  const std::string text = header.dump();

  std::string buf(kCheckpointMagic, sizeof(kCheckpointMagic));
  put_u32(buf, static_cast<std::uint32_t>(text.size()));
  buf += text;
  for (const auto& [_, p] : store.params()) put_tensor(buf, p.value);
  for (const auto& [_, b] : store.buffers()) put_tensor(buf, b);

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (data.size() < sizeof(kCheckpointMagic) ||
      std::memcmp(data.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) {
    throw ParseError("'" + path.string() + "' is not a checkpoint (bad magic)");
  }
  std::size_t pos = sizeof(kCheckpointMagic);
  const std::uint32_t len = get_u32(data, pos);
  if (pos + len > data.size()) throw ParseError("checkpoint header truncated");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(data.substr(pos, len));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("checkpoint header: ") + e.what());
  }
  pos += len;
  if (header.value("format_version", 0) != kCheckpointVersion) {
    throw ParseError("unsupported checkpoint version");
  }
  Checkpoint ck{header.value("config", nlohmann::json::object()),
                ParamStore(header.value("seed", std::uint64_t{0}))};
  for (const auto& t : header.at("tensors")) {
    const std::string name = t.at("name");
    const auto rows = t.at("shape").at(0).get<Eigen::Index>();
    const auto cols = t.at("shape").at(1).get<Eigen::Index>();
    Matrix m = get_tensor(data, pos, rows, cols);
    if (t.at("kind") == "param") {
      Parameter& p = ck.store.constant(name, rows, cols, 0.0);
      p.value = std::move(m);
    } else {
      ck.store.buffer(name, rows, cols, 0.0) = std::move(m);
    }
  }
  return ck;
}

void round_to_float(ParamStore& store) {
  auto round = [](Matrix& m) { m = m.unaryExpr([](double x) { return static_cast<double>(static_cast<float>(x)); }); };
  for (auto& [_, p] : store.params()) round(p.value);
  for (auto& [_, b] : store.buffers()) round(b);
}

GradCheckResult grad_check(const std::function<Var(Tape&)>& loss,
                           std::span<Parameter* const> targets, const GradCheckOptions& options) {
  GradCheckResult result;
  std::vector<Matrix> analytic;
  {
    for (Parameter* p : targets) p->zero_grad();
    Tape tape;
    Var l = loss(tape);
    tape.backward(l);
    result.min_kink_distance = tape.min_kink_distance();
    for (Parameter* p : targets) analytic.push_back(p->grad);
  }
  auto eval = [&]() {
    Tape tape;
    return loss(tape).scalar();
  };
  Rng rng = make_rng(options.seed, "grad_check");
  for (std::size_t t = 0; t < targets.size(); ++t) {
    Matrix& value = targets[t]->value;
    std::vector<Eigen::Index> entries(static_cast<std::size_t>(value.size()));
    std::iota(entries.begin(), entries.end(), 0);
    if (options.max_entries_per_target && entries.size() > options.max_entries_per_target) {
      std::shuffle(entries.begin(), entries.end(), rng);
      entries.resize(options.max_entries_per_target);
    }
    for (Eigen::Index e : entries) {
      const double orig = value.data()[e];
      value.data()[e] = orig + options.eps;
      const double up = eval();
      value.data()[e] = orig - options.eps;
      const double down = eval();
      value.data()[e] = orig;
      const double fd = (up - down) / (2.0 * options.eps);
      const double a = analytic[t].data()[e];
      const double rel = std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), options.abs_floor});
      result.max_rel_error = std::max(result.max_rel_error, rel);
      ++result.probes;
    }
  }
  return result;
}

}  // namespace fruitreid::nn
