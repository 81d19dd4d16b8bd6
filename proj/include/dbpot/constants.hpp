#pragma once

namespace dbpot {

/// Faraday constant (C/mol).
inline constexpr double kFaraday = 96485.33;

/// Elementary charge (C).
inline constexpr double kElementaryCharge = 1.602176634e-19;

inline constexpr double kPi = 3.14159265358979323846;

/// Concentrations are mol/m^3 internally; 1 mM is numerically the same.
inline constexpr double from_mM(double c_mM) { return c_mM; }
inline constexpr double to_mM(double c) { return c; }

}  // namespace dbpot
