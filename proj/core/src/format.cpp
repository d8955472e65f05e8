#include "attnwave/format.hpp"

#include <cstdio>

namespace attnwave {

std::string fmt_g9(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

}  // namespace attnwave
