#ifndef STEGDET_TOML_LITE_HPP
#define STEGDET_TOML_LITE_HPP

#include <filesystem>
#include <string>

#include "json.hpp"

namespace stegdet {

/// Reads the TOML subset used by config files into a JSON object: [table]
/// and [dotted.table] headers, bare/quoted/dotted keys, basic and literal
/// strings, integers, floats, booleans, and (possibly multi-line) arrays of
/// those. Inline tables, dates and multi-line strings are rejected. Errors
/// carry the line number.
nlohmann::json parse_toml(const std::string& text);
nlohmann::json load_toml(const std::filesystem::path& file);

}  // namespace stegdet

#endif  // STEGDET_TOML_LITE_HPP
