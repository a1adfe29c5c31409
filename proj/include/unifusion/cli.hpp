#pragma once

#include <string>
#include <vector>

namespace unifusion::cli {

// Exit codes: 0 success, 1 domain error, 2 usage error.
int dispatch(const std::vector<std::string>& args);

} // namespace unifusion::cli
