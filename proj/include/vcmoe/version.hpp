#pragma once

namespace vcmoe {

inline constexpr const char* version = "0.1.0";

}  // namespace vcmoe
