#pragma once

#include <string>

#include "ibattr/common.hpp"

namespace ibattr {

// GGO severity classes. CT-0 is reserved for exactly zero lesion fraction;
// the positive intervals are half-open: CT-1 (0, 0.25], CT-2 (0.25, 0.50],
// CT-3 (0.50, 0.75], CT-4 (0.75, 1].
enum class SeverityClass { CT0 = 0, CT1, CT2, CT3, CT4 };

inline SeverityClass severity_from_fraction(double ggo_fraction) {
    if (ggo_fraction < 0.0 || ggo_fraction > 1.0)
        throw ContractError("ggo fraction must lie in [0, 1]");
    if (ggo_fraction == 0.0) return SeverityClass::CT0;
    if (ggo_fraction <= 0.25) return SeverityClass::CT1;
    if (ggo_fraction <= 0.50) return SeverityClass::CT2;
    if (ggo_fraction <= 0.75) return SeverityClass::CT3;
    return SeverityClass::CT4;
}

inline std::string severity_name(SeverityClass s) {
    switch (s) {
        case SeverityClass::CT0: return "CT-0";
        case SeverityClass::CT1: return "CT-1";
        case SeverityClass::CT2: return "CT-2";
        case SeverityClass::CT3: return "CT-3";
        case SeverityClass::CT4: return "CT-4";
    }
    throw ContractError("invalid severity class");
}

inline SeverityClass parse_severity(const std::string& name) {
    for (int k = 0; k <= 4; ++k) {
        const auto s = static_cast<SeverityClass>(k);
        if (name == severity_name(s)) return s;
    }
    throw FormatError("unknown severity class: " + name);
}

}  // namespace ibattr
