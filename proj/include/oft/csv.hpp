#pragma once

#include <cmath>
#include <cstdio>
#include <string>

namespace oft {

// Shortest round-trip decimal form; identical runs produce identical text.
inline std::string fmt_g17(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

// NaN marks "not available" and renders as an empty CSV cell.
inline std::string fmt_cell(double v) { return std::isnan(v) ? std::string() : fmt_g17(v); }

}  // namespace oft
