#pragma once

namespace atelier::special {

// Fixed ids at the head of every vocabulary file.
inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr int kUnk = 3;
// Last prompt token; its final hidden state feeds the regression head.
inline constexpr int kScoring = 4;
// Marks the start of the critique.
inline constexpr int kCritique = 5;
inline constexpr int kCount = 6;

// Target value excluded from cross-entropy.
inline constexpr int kIgnore = -1;

}  // namespace atelier::special
