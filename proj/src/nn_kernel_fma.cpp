// Built with -ffp-contract=fast (see CMakeLists): the accumulations below are
// free to fuse into FMAs. Everything else in the project stays contraction-off.

#include "nn_kernel_fma.hpp"

namespace raremem::detail {

namespace {

typedef double v8d __attribute__((vector_size(64)));
typedef double v8d_u __attribute__((vector_size(64), aligned(8)));

inline v8d load8(const double* p) { return *reinterpret_cast<const v8d_u*>(p); }
inline v8d bcast8(double x) { return v8d{x, x, x, x, x, x, x, x}; }

constexpr int64_t kTileSlots = 32;

}  // namespace

void tile_sims_quad_fma(const double* tile, const double* const q[4], int64_t d,
                        double* const out[4]) {
    v8d acc[4][4] = {};
    const double* kt = tile;
    for (int64_t j = 0; j < d; ++j, kt += kTileSlots) {
        const v8d k0 = load8(kt);
        const v8d k1 = load8(kt + 8);
        const v8d k2 = load8(kt + 16);
        const v8d k3 = load8(kt + 24);
        for (int u = 0; u < 4; ++u) {
            const v8d v = bcast8(q[u][j]);
            acc[u][0] += v * k0;
            acc[u][1] += v * k1;
            acc[u][2] += v * k2;
            acc[u][3] += v * k3;
        }
    }
    for (int u = 0; u < 4; ++u)
        for (int s = 0; s < 4; ++s) __builtin_memcpy(out[u] + 8 * s, &acc[u][s], 64);
}

void tile_sims_pair_fma(const double* tile, const double* qa, const double* qb,
                        int64_t d, double* out_a, double* out_b) {
    v8d a0{}, a1{}, a2{}, a3{}, b0{}, b1{}, b2{}, b3{};
    const double* kt = tile;
    for (int64_t j = 0; j < d; ++j, kt += kTileSlots) {
        const v8d k0 = load8(kt);
        const v8d k1 = load8(kt + 8);
        const v8d k2 = load8(kt + 16);
        const v8d k3 = load8(kt + 24);
        const v8d va = bcast8(qa[j]);
        const v8d vb = bcast8(qb[j]);
        a0 += va * k0;
        a1 += va * k1;
        a2 += va * k2;
        a3 += va * k3;
        b0 += vb * k0;
        b1 += vb * k1;
        b2 += vb * k2;
        b3 += vb * k3;
    }
    __builtin_memcpy(out_a, &a0, 64);
    __builtin_memcpy(out_a + 8, &a1, 64);
    __builtin_memcpy(out_a + 16, &a2, 64);
    __builtin_memcpy(out_a + 24, &a3, 64);
    __builtin_memcpy(out_b, &b0, 64);
    __builtin_memcpy(out_b + 8, &b1, 64);
    __builtin_memcpy(out_b + 16, &b2, 64);
    __builtin_memcpy(out_b + 24, &b3, 64);
}

void tile_sims_one_fma(const double* tile, const double* qa, int64_t d, double* out_a) {
    v8d a0{}, a1{}, a2{}, a3{};
    const double* kt = tile;
    for (int64_t j = 0; j < d; ++j, kt += kTileSlots) {
        const v8d va = bcast8(qa[j]);
        a0 += va * load8(kt);
        a1 += va * load8(kt + 8);
        a2 += va * load8(kt + 16);
        a3 += va * load8(kt + 24);
    }
    __builtin_memcpy(out_a, &a0, 64);
    __builtin_memcpy(out_a + 8, &a1, 64);
    __builtin_memcpy(out_a + 16, &a2, 64);
    __builtin_memcpy(out_a + 24, &a3, 64);
}

}  // namespace raremem::detail
