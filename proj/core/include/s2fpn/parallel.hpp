#pragma once

namespace s2fpn {

/// Number of threads the convolution kernels may use. Without OpenMP support
/// this is always 1 and set_num_threads is a no-op.
int num_threads();
void set_num_threads(int n);

}  // namespace s2fpn
