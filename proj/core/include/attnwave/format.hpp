#pragma once

#include <string>

namespace attnwave {

// Canonical float formatting for reports: 9 significant digits, shortest
// form ("%.9g"), locale-independent. All CSV/JSON report writers go through
// this so reruns stay byte-identical.
std::string fmt_g9(double v);

}  // namespace attnwave
