#pragma once

#include <string>

#include "maos/trainer.hpp"

namespace maos {

// Training-run description loaded from a JSON config file. Unknown keys are
// rejected and every violation is reported at once.
struct RunConfig {
  TrainingConfig train;
  std::string dataset;  // corpus directory (from cmd synth)
  std::string out_dir;
  std::string embedding = "downsample:8";
};

RunConfig run_config_from_json(const std::string& text);
RunConfig load_run_config(const std::string& path);
std::string run_config_to_json(const RunConfig& cfg);

}  // namespace maos
