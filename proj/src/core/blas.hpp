#pragma once

#include <cstdint>

namespace nseg {

// Accumulating double GEMM kernels, loop-ordered for contiguous access.
// C += A * B        A:[M,K] B:[K,N] C:[M,N]
void mm_nn(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n);
// C += A * B^T      A:[M,K] B:[N,K] C:[M,N]
void mm_nt(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n);
// C += A^T * B      A:[K,M] B:[K,N] C:[M,N]
void mm_tn(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n);

}  // namespace nseg
