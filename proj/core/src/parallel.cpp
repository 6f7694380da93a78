#include "s2fpn/parallel.hpp"

#include <Eigen/Core>

#ifdef S2FPN_HAVE_OPENMP
#include <omp.h>
#endif

namespace s2fpn {

int num_threads() {
#ifdef S2FPN_HAVE_OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

void set_num_threads(int n) {
  if (n < 1) n = 1;
#ifdef S2FPN_HAVE_OPENMP
  omp_set_num_threads(n);
#endif
  Eigen::setNbThreads(n);
}

}  // namespace s2fpn
