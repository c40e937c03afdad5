#pragma once

#include <string>
#include <vector>

namespace dpdcan::cli {

// Runs one command (args exclude the program name). Exit codes: 0 success,
// 1 config error, 2 data error, 3 numerical divergence, 4 calibration
// failure.
int run(std::vector<std::string> args);

}  // namespace dpdcan::cli
