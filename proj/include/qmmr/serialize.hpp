// Copyright 2026 The qmmr Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "qmmr/qmmr.hpp"

namespace qmmr {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Hashing (FNV-1a over the canonical JSON text)
// ---------------------------------------------------------------------------

inline std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hash_hex(const json& j) {
  std::ostringstream os;
  os << std::hex << fnv1a(j.dump());
  return os.str();
}

// ---------------------------------------------------------------------------
// MDP / policy / features
// ---------------------------------------------------------------------------

inline json vec_to_json(const Vec& v) {
  json out = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(v[i]);
  return out;
}

inline Vec vec_from_json(const json& j) {
  Vec v(j.size());
  for (std::size_t i = 0; i < j.size(); ++i) v[i] = j[i].get<double>();
  return v;
}

inline json mat_to_json(const Mat& m) {
  json out = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    out.push_back(std::move(row));
  }
  return out;
}

inline Mat mat_from_json(const json& j) {
  const int rows = static_cast<int>(j.size());
  require(rows > 0, "empty matrix in JSON");
  const int cols = static_cast<int>(j[0].size());
  Mat m(rows, cols);
  for (int r = 0; r < rows; ++r) {
    require(static_cast<int>(j[r].size()) == cols, "ragged matrix in JSON");
    for (int c = 0; c < cols; ++c) m(r, c) = j[r][c].get<double>();
  }
  return m;
}

inline json mdp_to_json(const LayeredMDP& mdp) {
  json doc;
  doc["horizon"] = mdp.horizon();
  doc["actions"] = mdp.num_actions();
  doc["r_max"] = mdp.r_max();
  doc["noise"] = {{"kind", to_string(mdp.noise().kind)},
                  {"sigma", mdp.noise().sigma}};
  json levels = json::array();
  for (int h = 0; h <= mdp.horizon(); ++h) {
    json level;
    level["states"] = {{"first", mdp.first_state_id(h)},
                       {"count", mdp.num_states(h)}};
    level["rewards"] = vec_to_json(mdp.reward_mean(h));
    if (h < mdp.horizon()) {
      level["transitions"] = mat_to_json(mdp.transitions(h));
    }
    levels.push_back(std::move(level));
  }
  doc["levels"] = std::move(levels);
  return doc;
}

inline LayeredMDP mdp_from_json(const json& doc) {
  const int h_max = doc.at("horizon").get<int>();
  const int actions = doc.at("actions").get<int>();
  std::vector<int> sizes;
  std::vector<Mat> transitions;
  std::vector<Vec> rewards;
  const json& levels = doc.at("levels");
  require(static_cast<int>(levels.size()) == h_max + 1,
          "level count does not match horizon");
  for (int h = 0; h <= h_max; ++h) {
    sizes.push_back(levels[h].at("states").at("count").get<int>());
    rewards.push_back(vec_from_json(levels[h].at("rewards")));
    if (h < h_max) {
      transitions.push_back(mat_from_json(levels[h].at("transitions")));
    }
  }
  RewardNoise noise;
  noise.kind =
      reward_noise_kind_from_string(doc.at("noise").at("kind").get<std::string>());
  noise.sigma = doc.at("noise").at("sigma").get<double>();
  return LayeredMDP(std::move(sizes), actions, std::move(transitions),
                    std::move(rewards), doc.at("r_max").get<double>(), noise);
}

inline json policy_to_json(const Policy& pi) {
  json doc;
  json levels = json::array();
  for (int h = 0; h < pi.levels(); ++h) levels.push_back(mat_to_json(pi.level(h)));
  doc["levels"] = std::move(levels);
  return doc;
}

inline Policy policy_from_json(const json& doc) {
  std::vector<Mat> levels;
  for (const json& level : doc.at("levels")) levels.push_back(mat_from_json(level));
  return Policy(std::move(levels));
}

inline json features_to_json(const FeatureMap& f) {
  json doc;
  doc["actions"] = f.shape().num_actions;
  doc["states_per_level"] = f.shape().states_per_level;
  json levels = json::array();
  for (int h = 1; h <= f.horizon(); ++h) {
    levels.push_back({{"level", h},
                      {"dim", f.dim(h)},
                      {"matrix", mat_to_json(f.matrix(h))}});
  }
  doc["levels"] = std::move(levels);
  return doc;
}

inline FeatureMap features_from_json(const json& doc) {
  MdpShape shape;
  shape.num_actions = doc.at("actions").get<int>();
  shape.states_per_level = doc.at("states_per_level").get<std::vector<int>>();
  std::vector<Mat> levels;
  for (const json& level : doc.at("levels")) {
    levels.push_back(mat_from_json(level.at("matrix")));
  }
  return FeatureMap(std::move(shape), std::move(levels));
}

// ---------------------------------------------------------------------------
// Datasets: JSON-lines with a provenance header, plus CSV export
// ---------------------------------------------------------------------------

inline void write_dataset_jsonl(std::ostream& os, const TrajectoryDataset& ds) {
  const MdpShape& shape = ds.shape();
  std::vector<int> first_ids(shape.horizon() + 1, 0);
  for (int h = 1; h <= shape.horizon(); ++h) {
    first_ids[h] = first_ids[h - 1] + shape.states_per_level[h - 1];
  }
  json header;
  header["kind"] = "qmmr-trajectories";
  header["n"] = ds.n();
  header["horizon"] = shape.horizon();
  header["actions"] = shape.num_actions;
  header["states_per_level"] = shape.states_per_level;
  {
    std::ostringstream mh, bh;
    mh << std::hex << ds.provenance().mdp_hash;
    bh << std::hex << ds.provenance().behavior_hash;
    header["provenance"] = {{"mdp_hash", mh.str()},
                            {"behavior_hash", bh.str()},
                            {"seed", ds.provenance().seed}};
  }
  os << header.dump() << "\n";
  for (int i = 0; i < ds.n(); ++i) {
    json line;
    json s = json::array(), a = json::array(), r = json::array();
    for (int h = 0; h <= shape.horizon(); ++h) {
      s.push_back(first_ids[h] + ds.state(h, i));
      a.push_back(ds.action(h, i));
      r.push_back(ds.reward(h, i));
    }
    line["s"] = std::move(s);
    line["a"] = std::move(a);
    line["r"] = std::move(r);
    os << line.dump() << "\n";
  }
}

inline TrajectoryDataset read_dataset_jsonl(std::istream& is) {
  std::string text;
  require(static_cast<bool>(std::getline(is, text)), "empty dataset file");
  const json header = json::parse(text);
  require(header.at("kind") == "qmmr-trajectories", "not a trajectory file");
  MdpShape shape;
  shape.num_actions = header.at("actions").get<int>();
  shape.states_per_level =
      header.at("states_per_level").get<std::vector<int>>();
  const int n = header.at("n").get<int>();
  std::vector<int> first_ids(shape.horizon() + 1, 0);
  for (int h = 1; h <= shape.horizon(); ++h) {
    first_ids[h] = first_ids[h - 1] + shape.states_per_level[h - 1];
  }
  TrajectoryDataset ds(shape, n);
  const json& prov = header.at("provenance");
  ds.provenance().seed = prov.at("seed").get<std::uint64_t>();
  ds.provenance().mdp_hash =
      std::stoull(prov.at("mdp_hash").get<std::string>(), nullptr, 16);
  ds.provenance().behavior_hash =
      std::stoull(prov.at("behavior_hash").get<std::string>(), nullptr, 16);
  for (int i = 0; i < n; ++i) {
    require(static_cast<bool>(std::getline(is, text)),
            "dataset file truncated");
    const json line = json::parse(text);
    for (int h = 0; h <= shape.horizon(); ++h) {
      ds.set_step(h, i, line.at("s")[h].get<int>() - first_ids[h],
                  line.at("a")[h].get<int>(), line.at("r")[h].get<double>());
    }
  }
  return ds;
}

inline void write_dataset_csv(std::ostream& os, const TrajectoryDataset& ds) {
  os << "trajectory,level,state,action,reward\n";
  const MdpShape& shape = ds.shape();
  std::vector<int> first_ids(shape.horizon() + 1, 0);
  for (int h = 1; h <= shape.horizon(); ++h) {
    first_ids[h] = first_ids[h - 1] + shape.states_per_level[h - 1];
  }
  for (int i = 0; i < ds.n(); ++i) {
    for (int h = 0; h <= shape.horizon(); ++h) {
      os << i << "," << h << "," << first_ids[h] + ds.state(h, i) << ","
         << ds.action(h, i) << "," << json(ds.reward(h, i)).dump() << "\n";
    }
  }
}

// ---------------------------------------------------------------------------
// Results
// ---------------------------------------------------------------------------

inline json estimate_to_json(const OpeEstimate& est, const std::string& method) {
  json doc;
  doc["method"] = method;
  doc["j_hat"] = est.j_hat;
  doc["delta"] = est.delta;
  doc["v_max"] = est.v_max;
  doc["n"] = est.n;
  doc["bound"] = est.bound;
  json per_level = json::array();
  for (std::size_t h = 0; h < est.eps_stat.size(); ++h) {
    per_level.push_back({{"level", h},
                         {"loss", est.matching_loss[h]},
                         {"second_moment", est.second_moment[h]},
                         {"eps_stat", est.eps_stat[h]},
                         {"reward_contribution", est.level_rewards[h]}});
  }
  doc["per_level"] = std::move(per_level);
  return doc;
}

/// Weight dump: one CSV row per level, one column per trajectory.
inline void write_weights_csv(std::ostream& os, const WeightMatrix& w) {
  os << "level";
  for (int i = 0; i < w.n(); ++i) os << ",w" << i;
  os << "\n";
  for (int h = 0; h <= w.horizon(); ++h) {
    os << h;
    for (int i = 0; i < w.n(); ++i) os << "," << json(w.levels[h][i]).dump();
    os << "\n";
  }
}

// ---------------------------------------------------------------------------
// File helpers
// ---------------------------------------------------------------------------

inline void write_text_file(const std::filesystem::path& path,
                            const std::string& text) {
  if (path.has_parent_path()) {
    std::filesystem::create_directories(path.parent_path());
  }
  std::ofstream os(path);
  require(os.good(), "cannot open for writing: " + path.string());
  os << text;
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  require(is.good(), "cannot open for reading: " + path.string());
  std::ostringstream buf;
  buf << is.rdbuf();
  return buf.str();
}

inline json read_json_file(const std::filesystem::path& path) {
  return json::parse(read_text_file(path));
}

}  // namespace qmmr
