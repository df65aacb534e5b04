#pragma once

#include <cstdint>

namespace devid {

// Storage scalar for all signal and model data. The default build uses
// 32-bit floats; defining DEVID_REAL64 switches the whole library to
// doubles, which tightens the gradient-check thresholds (see verify).
#ifdef DEVID_REAL64
using real = double;
inline constexpr bool kReal64 = true;
#else
using real = float;
inline constexpr bool kReal64 = false;
#endif

} // namespace devid
