#pragma once

#include <cstdint>

namespace raremem::detail {

// Screening similarities for one or two queries against a 32-slot packed key
// tile. Compiled with fp contraction enabled, so values may differ from the
// canonical plain-accumulation dot product by a few ulps; callers re-score
// candidates exactly. For unit-norm inputs the deviation is below 1e-13,
// orders of magnitude inside the screening margin.
void tile_sims_quad_fma(const double* tile, const double* const q[4], int64_t d,
                        double* const out[4]);
void tile_sims_pair_fma(const double* tile, const double* qa, const double* qb,
                        int64_t d, double* out_a, double* out_b);
void tile_sims_one_fma(const double* tile, const double* qa, int64_t d, double* out_a);

}  // namespace raremem::detail
