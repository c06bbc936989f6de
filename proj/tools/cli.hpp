#pragma once

#include <nlohmann/json.hpp>

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace mmfuse::cli {

struct CommandResult {
  int exit_code = 0;  // 0 ok, 1 module error, 2 usage error
  std::vector<std::filesystem::path> artifacts;
  nlohmann::json summary = nlohmann::json::object();
};

// args excludes the program name.
CommandResult run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace mmfuse::cli
