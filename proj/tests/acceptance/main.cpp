// Acceptance runner: one PASS/FAIL line per criterion, exit 1 if any fail.
//
//   hemorl_acceptance --work-dir DIR [--only 1,7,12]

#include <algorithm>
#include <cstdarg>
#include <cstdio>
#include <iostream>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "criteria.hpp"

namespace hemorl::acceptance {

std::string fmt(const char* format, ...) {
  va_list args;
  va_start(args, format);
  va_list copy;
  va_copy(copy, args);
  const int n = std::vsnprintf(nullptr, 0, format, copy);
  va_end(copy);
  std::string out(static_cast<std::size_t>(std::max(n, 0)), '\0');
  std::vsnprintf(out.data(), out.size() + 1, format, args);
  va_end(args);
  return out;
}

}  // namespace hemorl::acceptance

int main(int argc, char** argv) {
  using namespace hemorl::acceptance;
  CLI::App app{"Acceptance criteria"};
  std::filesystem::path work = "acceptance_work";
  std::string only;
  app.add_option("--work-dir", work, "Scratch directory for pipeline runs");
  app.add_option("--only", only, "Comma list of criterion ids to run");
  CLI11_PARSE(app, argc, argv);

  std::set<std::string> wanted;
  std::stringstream ss(only);
  for (std::string tok; std::getline(ss, tok, ',');) wanted.insert(tok);

  std::vector<Criterion> all;
  for (auto group : {numeric_criteria, learning_criteria, pipeline_criteria}) {
    for (auto& c : group()) all.push_back(std::move(c));
  }
  std::sort(all.begin(), all.end(), [](const Criterion& a, const Criterion& b) { return std::stoi(a.id) < std::stoi(b.id); });

  std::filesystem::create_directories(work);
  const Context ctx{std::filesystem::absolute(work)};
  std::size_t failed = 0, ran = 0;
  for (const auto& c : all) {
    if (!wanted.empty() && !wanted.count(c.id)) continue;
    ++ran;
    Stopwatch sw;
    Outcome o;
    try {
      o = c.run(ctx);
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("%s [%s] %s (%.1f s): %s\n", o.pass ? "PASS" : "FAIL", c.id.c_str(), c.title.c_str(), sw.seconds(),
                o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%zu of %zu criteria passed\n", ran - failed, ran);
  return failed == 0 ? 0 : 1;
}
