#include "tinyft/tensor.hpp"

#include <cmath>

namespace tinyft {

std::string shape_str(const std::vector<int64_t>& s) {
  std::string out = "(";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + ")";
}

void check_finite(const Tensor& t, const char* what) {
  for (float v : t.data) {
    if (!std::isfinite(v)) {
      throw std::invalid_argument(std::string(what) +
                                  ": tensor contains a non-finite value");
    }
  }
}

}  // namespace tinyft
