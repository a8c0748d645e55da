/* Register-blocked multi-tap GEMM used by the dilated convolution kernels.
 *
 *   out[m, n] += sum_j sum_p a[(m + offs[j]) * lda + p * aps] * b[(j * K + p) * ldb + n]
 *
 * for 0 <= m < M, 0 <= n < N, 0 <= p < K.  Callers pad `a` so every row index
 * m + offs[j] is valid.  Summation order is fixed (tap, then p) for every
 * output element, so results are deterministic for a given build.
 */
#ifndef COLONTCN_TAPGEMM_H
#define COLONTCN_TAPGEMM_H

#include <stddef.h>

static void tapgemm_scalar(const double* a, ptrdiff_t lda, ptrdiff_t aps, const double* b, ptrdiff_t ldb,
                           const ptrdiff_t* offs, ptrdiff_t ntap, ptrdiff_t K,
                           ptrdiff_t m0, ptrdiff_t m1, ptrdiff_t n0, ptrdiff_t n1,
                           double* out, ptrdiff_t ldo)
{
    for (ptrdiff_t m = m0; m < m1; m++)
        for (ptrdiff_t n = n0; n < n1; n++) {
            double s = out[m * ldo + n];
            for (ptrdiff_t j = 0; j < ntap; j++) {
                const double* ar = a + (m + offs[j]) * lda;
                const double* bc = b + j * K * ldb + n;
                for (ptrdiff_t p = 0; p < K; p++) s += ar[p * aps] * bc[p * ldb];
            }
            out[m * ldo + n] = s;
        }
}

#if defined(__AVX2__) && defined(__FMA__)
#include <immintrin.h>
#define TG_MR 6
#define TG_NR 8

/* one mr x TG_NR output tile; mr <= TG_MR is a compile-time constant after inlining */
static inline __attribute__((always_inline)) void tapgemm_tile(
    const double* a, ptrdiff_t lda, ptrdiff_t aps, const double* b, ptrdiff_t ldb, const ptrdiff_t* offs,
    ptrdiff_t ntap, ptrdiff_t K, ptrdiff_t m0, ptrdiff_t n0, int mr, double* out, ptrdiff_t ldo)
{
    __m256d acc[TG_MR][2];
    for (int r = 0; r < mr; r++) {
        acc[r][0] = _mm256_loadu_pd(out + (m0 + r) * ldo + n0);
        acc[r][1] = _mm256_loadu_pd(out + (m0 + r) * ldo + n0 + 4);
    }
    for (ptrdiff_t j = 0; j < ntap; j++) {
        const double* ab = a + (m0 + offs[j]) * lda;
        const double* bb = b + j * K * ldb + n0;
        for (ptrdiff_t p = 0; p < K; p++) {
            __m256d b0 = _mm256_loadu_pd(bb + p * ldb);
            __m256d b1 = _mm256_loadu_pd(bb + p * ldb + 4);
            for (int r = 0; r < mr; r++) {
                __m256d av = _mm256_broadcast_sd(ab + r * lda + p * aps);
                acc[r][0] = _mm256_fmadd_pd(av, b0, acc[r][0]);
                acc[r][1] = _mm256_fmadd_pd(av, b1, acc[r][1]);
            }
        }
    }
    for (int r = 0; r < mr; r++) {
        _mm256_storeu_pd(out + (m0 + r) * ldo + n0, acc[r][0]);
        _mm256_storeu_pd(out + (m0 + r) * ldo + n0 + 4, acc[r][1]);
    }
}

static void tapgemm(const double* a, ptrdiff_t lda, ptrdiff_t aps, const double* b, ptrdiff_t ldb,
                    const ptrdiff_t* offs, ptrdiff_t ntap, ptrdiff_t K, ptrdiff_t M, ptrdiff_t N,
                    double* out, ptrdiff_t ldo)
{
    ptrdiff_t Mf = M - M % TG_MR, Nf = N - N % TG_NR;
    int rem = (int)(M - Mf);
    for (ptrdiff_t n0 = 0; n0 < Nf; n0 += TG_NR) {
        for (ptrdiff_t m0 = 0; m0 < Mf; m0 += TG_MR)
            tapgemm_tile(a, lda, aps, b, ldb, offs, ntap, K, m0, n0, TG_MR, out, ldo);
        switch (rem) {
        case 1: tapgemm_tile(a, lda, aps, b, ldb, offs, ntap, K, Mf, n0, 1, out, ldo); break;
        case 2: tapgemm_tile(a, lda, aps, b, ldb, offs, ntap, K, Mf, n0, 2, out, ldo); break;
        case 3: tapgemm_tile(a, lda, aps, b, ldb, offs, ntap, K, Mf, n0, 3, out, ldo); break;
        case 4: tapgemm_tile(a, lda, aps, b, ldb, offs, ntap, K, Mf, n0, 4, out, ldo); break;
        case 5: tapgemm_tile(a, lda, aps, b, ldb, offs, ntap, K, Mf, n0, 5, out, ldo); break;
        default: break;
        }
    }
    if (Nf < N) tapgemm_scalar(a, lda, aps, b, ldb, offs, ntap, K, 0, M, Nf, N, out, ldo);
}
#define TAPGEMM_SIMD 1
#else
static void tapgemm(const double* a, ptrdiff_t lda, ptrdiff_t aps, const double* b, ptrdiff_t ldb,
                    const ptrdiff_t* offs, ptrdiff_t ntap, ptrdiff_t K, ptrdiff_t M, ptrdiff_t N,
                    double* out, ptrdiff_t ldo)
{
    tapgemm_scalar(a, lda, aps, b, ldb, offs, ntap, K, 0, M, 0, N, out, ldo);
}
#define TAPGEMM_SIMD 0
#endif

#endif
