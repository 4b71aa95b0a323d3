#pragma once

#include <string>
#include <vector>

#include "geofaith/entropy_dynamics.hpp"

namespace geofaith::testing {

// Hand-evaluated traces; dyadic values keep every delta exact.
struct EntropyCase {
  std::string name;
  std::vector<double> trace;
  std::size_t t;
  PatternConfig config;
  int flat;
  int spike;
  double oscillation;
  double s_temp;
};

inline PatternConfig pattern(std::size_t window, double flat_threshold) {
  PatternConfig c;
  c.window = window;
  c.flat_threshold = flat_threshold;
  return c;
}

inline std::vector<EntropyCase> entropy_truth_table() {
  const PatternConfig d;
  return {
      {"constant trace is flat", {1, 1, 1, 1, 1, 1}, 5, d, 1, 0, 0.0, 0.8},
      {"window not yet full", {1, 1, 1, 1, 1}, 4, d, 0, 0, 0.0, 1.0},
      {"single step", {0.7}, 0, d, 0, 0, 0.0, 1.0},
      {"steady climb above flat threshold", {0, 0.25, 0.5, 0.75, 1, 1.25}, 5, d, 0, 0, 0.0, 1.0},
      {"one late move keeps mean below threshold", {1, 1, 1, 1, 1, 1.375}, 5, d, 1, 0, 0.0, 0.8},
      {"mean delta exactly at flat threshold", {0, 0.5, 0.5, 0.5, 0.5, 0.5}, 5, d, 0, 0, 0.0, 1.0},
      {"mean delta just below flat threshold", {0, 0.25, 0.25, 0.25, 0.25, 0.25}, 5, d, 1, 0, 0.0, 0.8},
      {"upward spike", {0, 1.5}, 1, d, 0, 1, 0.0, 0.7},
      {"jump exactly at spike threshold", {0.5, 1.5}, 1, d, 0, 0, 0.0, 1.0},
      {"downward spike", {2, 0.75}, 1, d, 0, 1, 0.0, 0.7},
      {"first step cannot spike", {3}, 0, d, 0, 0, 0.0, 1.0},
      {"jump one ulp above spike threshold", {0, 1.0000000000000002}, 1, d, 0, 1, 0.0, 0.7},
      {"full alternation", {0, 0.5, 0, 0.5, 0, 0.5}, 5, d, 0, 0, 1.0, 0.5},
      {"two sign flips", {0, 1, 2, 3, 2, 3}, 5, d, 0, 0, 0.5, 0.75},
      {"monotone decrease", {3, 2.5, 2, 1.5, 1, 0.5}, 5, d, 0, 0, 0.0, 1.0},
      {"alternation before window fills", {0, 0.5, 0, 0.5, 0}, 4, d, 0, 0, 0.0, 1.0},
      {"zero delta is not a flip", {0, 0.5, 0.5, 0, 0.5, 0}, 5, d, 0, 0, 0.5, 0.75},
      {"single flip", {0, 0.25, 0.5, 0.75, 1, 0.75}, 5, d, 0, 0, 0.25, 0.875},
      {"three flips", {0, 0.5, 1, 0.5, 1, 0.5}, 5, d, 0, 0, 0.75, 0.625},
      {"spiking alternation", {0, 2, 0, 2, 0, 2}, 5, d, 0, 1, 1.0, 0.2},
      {"all three penalties", {0, 1.5, 0}, 2, pattern(2, 2.0), 1, 1, 1.0, 0.0},
      {"flat and spike together", {0, 0, 0, 0, 0, 1.25}, 5, pattern(5, 0.5), 1, 1, 0.0, 0.5},
      {"small flat alternation", {0, 0.0625, 0, 0.0625, 0, 0.0625}, 5, d, 1, 0, 1.0, 0.3},
      {"window of three", {0, 1, 0, 1}, 3, pattern(3, 0.1), 0, 0, 1.0, 0.5},
      {"shifted spiking alternation", {10, 12, 10, 12, 10, 12}, 5, d, 0, 1, 1.0, 0.2},
  };
}

}  // namespace geofaith::testing
