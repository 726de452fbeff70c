#include "maos/run_config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "maos/errors.hpp"
#include "nlohmann/json.hpp"

using json = nlohmann::json;

namespace maos {

namespace {

const std::set<std::string>& known_keys() {
  static const std::set<std::string> keys = {
      "alpha",          "n_threads",        "part_size",        "lr",
      "adam_beta1",     "adam_beta2",       "adam_eps",         "cycle_weight",
      "iterations",     "batch_size",       "seed",             "image_size",
      "loss_form",      "gen_base_width",   "gen_res_blocks",   "disc_base_width",
      "disc_depth_global", "disc_depth_part", "checkpoint_interval", "augment_flip",
      "augment_rotate", "augment_center_crop", "dataset",       "out_dir",
      "embedding"};
  return keys;
}

}  // namespace

RunConfig run_config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: malformed JSON: ") + e.what());
  }
  std::vector<std::string> problems;
  for (const auto& [key, value] : j.items()) {
    if (known_keys().count(key) == 0) problems.push_back("unknown key '" + key + "'");
  }
  RunConfig cfg;
  try {
    cfg.train = training_config_from_json(text);
  } catch (const ConfigError& e) {
    problems.push_back(e.what());
  }
  cfg.dataset = j.value("dataset", "");
  cfg.out_dir = j.value("out_dir", "");
  cfg.embedding = j.value("embedding", cfg.embedding);
  if (cfg.dataset.empty()) problems.push_back("missing required key 'dataset'");
  if (cfg.out_dir.empty()) problems.push_back("missing required key 'out_dir'");
  for (const std::string& p : cfg.train.validate()) problems.push_back(p);
  if (!problems.empty()) {
    std::ostringstream os;
    os << "config: " << problems.size() << " problem(s):";
    for (const std::string& p : problems) os << "\n  - " << p;
    throw ConfigError(os.str());
  }
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError(path + ": cannot open config file");
  std::stringstream ss;
  ss << in.rdbuf();
  return run_config_from_json(ss.str());
}

std::string run_config_to_json(const RunConfig& cfg) {
  json j = json::parse(training_config_to_json(cfg.train));
  j["dataset"] = cfg.dataset;
  j["out_dir"] = cfg.out_dir;
  j["embedding"] = cfg.embedding;
  return j.dump(2);
}

}  // namespace maos
