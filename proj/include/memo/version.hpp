#pragma once

namespace memo {
inline constexpr const char* kVersion = "0.1.0";
}
