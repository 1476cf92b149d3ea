#pragma once

#include <Eigen/Core>
#include <cstdint>

namespace raremem {

using RowMatrixD =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using VecD = Eigen::VectorXd;

// Sentinel for memory slots that have never been written.
inline constexpr uint32_t kNoneValue = 0xFFFFFFFFu;

// Round a double through float32. Memory keys keep the invariant that every
// stored coefficient is exactly float-representable, which makes the 32-bit
// snapshot format lossless.
inline double quantize_f32(double x) { return static_cast<double>(static_cast<float>(x)); }

}  // namespace raremem
