#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "lumen/metrics.hpp"

namespace lumen {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

// Entry point of the `lumen` binary. `args` excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

struct BenchReport {
  std::size_t frames_processed = 0;
  double wall_time_s = 0.0;
  double fps = 0.0;
  double preprocess_ms = 0.0, forward_ms = 0.0, postprocess_ms = 0.0;  // per-frame means
  double total_ms = 0.0;  // wall time per frame
  int input_size = 0;
  bool unstable = false;
  std::vector<std::string> warnings;
};

std::string bench_json(const BenchReport& report);

// Table-3-shaped row: Model, Dataset, Precision, mAP@0.5, mAP@0.5:0.95.
std::string table_header();
std::string table_row(const std::string& model, const std::string& dataset, const EvalReport& report);

}  // namespace lumen
