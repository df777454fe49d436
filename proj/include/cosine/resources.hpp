#pragma once

// Text assets compiled into the binary so runs never depend on the working
// directory.

#include <string_view>

namespace cosine::resources {

std::string_view system_prompt();
std::string_view init_prompt();
std::string_view refine_prompt();
std::string_view primitives_json();

}  // namespace cosine::resources
