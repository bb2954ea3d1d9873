#pragma once

// Rouge-1 and Rouge-L F1 over lowercased whitespace tokens. Both-empty scores
// 1, one side empty scores 0.

#include <string_view>

namespace steerkit {

double rouge1(std::string_view candidate, std::string_view reference);
double rougeL(std::string_view candidate, std::string_view reference);

}  // namespace steerkit
