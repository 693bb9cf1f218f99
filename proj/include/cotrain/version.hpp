#pragma once

namespace cotrain {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace cotrain
