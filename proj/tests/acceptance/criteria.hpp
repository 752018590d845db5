#pragma once

#include <chrono>
#include <filesystem>
#include <string>
#include <vector>

namespace hemorl::acceptance {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Context {
  std::filesystem::path work_dir;
};

struct Criterion {
  std::string id;
  std::string title;
  Outcome (*run)(const Context&);
};

std::vector<Criterion> numeric_criteria();   // 1, 2, 3, 4, 6, 8, 9
std::vector<Criterion> learning_criteria();  // 5, 7
std::vector<Criterion> pipeline_criteria();  // 10, 11, 12

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

/// printf-style formatting into a std::string.
std::string fmt(const char* format, ...);

}  // namespace hemorl::acceptance
