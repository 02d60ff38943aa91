#include "fruitreid/io.hpp"

#include <fstream>
#include <map>
#include <sstream>

namespace fruitreid {

namespace {

int id_of(const SceneAnnotation* ann, int index) {
  return ann ? ann->instances.at(static_cast<std::size_t>(index)).id : index;
}

std::map<int, int> index_by_id(const SceneAnnotation& ann) {
  std::map<int, int> out;
  for (std::size_t k = 0; k < ann.instances.size(); ++k) {
    out[ann.instances[k].id] = static_cast<int>(k);
  }
  return out;
}

}  // namespace

void save_association_csv(const std::filesystem::path& path, const TemporalAssociation& assoc,
                          const SceneAnnotation* current, const SceneAnnotation* previous) {
  if (current && current->instances.size() != assoc.size()) {
    throw ValidationError("association size does not match the current annotation");
  }
  std::ostringstream os;
  os << "t_id,prev_id\n";
  for (std::size_t i = 0; i < assoc.size(); ++i) {
    const int prev = assoc.prev[i];
    os << id_of(current, static_cast<int>(i)) << ','
       << (prev == TemporalAssociation::kNoMatch ? -1 : id_of(previous, prev)) << '\n';
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  const auto s = os.str();
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

TemporalAssociation load_association_csv(const std::filesystem::path& path,
                                         const SceneAnnotation* current,
                                         const SceneAnnotation* previous,
                                         std::optional<std::size_t> current_count) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::string line;
  if (!std::getline(in, line)) throw ParseError("association CSV is empty");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "t_id,prev_id") throw ParseError("association CSV line 1: expected header t_id,prev_id");

  std::map<int, int> cur_index, prev_index;
  if (current) cur_index = index_by_id(*current);
  if (previous) prev_index = index_by_id(*previous);

  std::size_t n = current ? current->instances.size() : current_count.value_or(0);
  std::vector<std::pair<int, int>> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) {
      throw ParseError("association CSV line " + std::to_string(line_no) + ": missing comma");
    }
    int t_id = 0, prev_id = 0;
    try {
      std::size_t used = 0;
      t_id = std::stoi(line.substr(0, comma), &used);
      if (used != comma) throw std::invalid_argument("trailing");
      const auto rest = line.substr(comma + 1);
      prev_id = std::stoi(rest, &used);
      if (used != rest.size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw ParseError("association CSV line " + std::to_string(line_no) + ": bad integer");
    }
    int t_index = t_id;
    if (current) {
      auto it = cur_index.find(t_id);
      if (it == cur_index.end()) {
        throw ValidationError("association CSV line " + std::to_string(line_no) +
                              ": unknown t_id " + std::to_string(t_id));
      }
      t_index = it->second;
    }
    int prev_index_v = TemporalAssociation::kNoMatch;
    if (prev_id >= 0) {
      prev_index_v = prev_id;
      if (previous) {
        auto it = prev_index.find(prev_id);
        if (it == prev_index.end()) {
          throw ValidationError("association CSV line " + std::to_string(line_no) +
                                ": unknown prev_id " + std::to_string(prev_id));
        }
        prev_index_v = it->second;
      }
    }
    if (t_index < 0) throw ValidationError("association CSV: negative t_id");
    rows.emplace_back(t_index, prev_index_v);
    if (!current) n = std::max(n, static_cast<std::size_t>(t_index) + 1);
  }
  TemporalAssociation assoc;
  assoc.prev.assign(n, TemporalAssociation::kNoMatch);
  std::vector<bool> seen(n, false);
  for (auto [t, p] : rows) {
    if (static_cast<std::size_t>(t) >= n) throw ValidationError("association CSV: t_id out of range");
    if (seen[static_cast<std::size_t>(t)]) {
      throw ValidationError("association CSV: duplicate t_id row");
    }
    seen[static_cast<std::size_t>(t)] = true;
    assoc.prev[static_cast<std::size_t>(t)] = p;
  }
  return assoc;
}

}  // namespace fruitreid
