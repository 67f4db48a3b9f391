#pragma once

#include <string>
#include <vector>

#include "crane/tensor_archive.hpp"

namespace crane {

// theta_think - theta_inst for one aligned tensor pair, decoded to f64.
// Shapes must match exactly; dtypes may differ (both widen losslessly).
std::vector<double> tensor_delta(const std::string& name, const TensorView& inst,
                                 const TensorView& think);

// Median of |values| over this tensor only. Even counts take the arithmetic
// mean of the two middle order statistics.
double median_magnitude(const std::vector<double>& values);

// Stage-1 sparsifier: keep 2*v[j] where |v[j]| strictly exceeds the tensor's
// median magnitude, zero everywhere else. Ties at the median are dropped.
std::vector<double> sparsify(const std::vector<double>& delta);

// Archive-level delta. Both sides must hold exactly the same tensor names;
// a tensor present on one side only is a hard error, not a zero-fill.
// Output tensors are f64.
TensorMap delta_archive(const TensorMap& inst, const TensorMap& think, int threads = 1);

// Archive-level sparsify. Each tensor's median is its own; expert tensors in
// a mixture layer are separate archive entries, so they are sparsified
// independently by construction.
TensorMap sparsify_archive(const TensorMap& delta, int threads = 1);

}  // namespace crane
