#pragma once

namespace attnlink {

// Reserved vocabulary slots shared by every vocab.
inline constexpr int kPadId = 0;
inline constexpr int kUnkId = 1;
inline constexpr int kBosId = 2;
inline constexpr int kEosId = 3;
inline constexpr int kReservedIds = 4;

}  // namespace attnlink
