#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace mpsynth {

/// Exit codes: 0 success, 1 contract/config error, 2 I/O or format error,
/// 3 gradient check failure, 4 non-finite abort.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int dispatch(int argc, const char* const* argv);

} // namespace mpsynth
