#include "imode/tensor.hpp"

#include <cstdio>

namespace imode::ad {

std::string Tensor::shape_str() const {
  char buf[64];
  if (rank == 0)
    std::snprintf(buf, sizeof buf, "()");
  else if (rank == 1)
    std::snprintf(buf, sizeof buf, "(%d)", rows);
  else
    std::snprintf(buf, sizeof buf, "(%dx%d)", rows, cols);
  return buf;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw ShapeError("max_abs_diff: shape " + a.shape_str() + " vs " + b.shape_str());
  double m = 0.0;
  for (size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::fabs(a.data[i] - b.data[i]));
  return m;
}

}  // namespace imode::ad
