#include "cosine/resources.hpp"

#include "cosine/resources_data.hpp"

namespace cosine::resources {

std::string_view system_prompt() { return resources_data::system_txt; }
std::string_view init_prompt() { return resources_data::init_txt; }
std::string_view refine_prompt() { return resources_data::refine_txt; }
std::string_view primitives_json() { return resources_data::primitives_json; }

}  // namespace cosine::resources
