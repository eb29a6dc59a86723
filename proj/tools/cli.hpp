#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace d3il::cli {

/// Parses arguments, runs one subcommand and maps errors to exit codes.
int run(int argc, const char* const* argv);

/// output_dir joined under $D3IL_OUTPUT_ROOT when the variable is set and the path is relative.
std::filesystem::path resolve_output(const std::filesystem::path& output_dir);

}  // namespace d3il::cli
