#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace t2is {

// System prompts shipped in assets/prompts/<name>.txt and compiled in.
// Names carry their version, e.g. "parse.v1". Throws ValidationError for an
// unknown name.
std::string_view prompt_asset(std::string_view name);
std::vector<std::string> prompt_asset_names();

}  // namespace t2is
