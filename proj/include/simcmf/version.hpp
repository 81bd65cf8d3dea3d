#pragma once

namespace simcmf {
inline constexpr const char* kVersion = "0.1.0";
}
