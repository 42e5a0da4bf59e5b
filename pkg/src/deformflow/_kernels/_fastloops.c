/* Elementwise stages of the ensemble kernels.
 *
 * Kept in plain C so the restrict qualifiers let the compiler vectorize the
 * sigmoid through libmvec (-ffast-math -march=native at build time).
 */

#include <math.h>

/* z += b (row-broadcast); s = sigmoid(z); z = z * s  (activation in place) */
void dflow_sigmoid_act(double *restrict Z, double *restrict S,
                       const double *restrict b, long R, long d) {
    for (long r = 0; r < R; r++) {
        double *restrict zr = Z + r * d;
        double *restrict sr = S + r * d;
        for (long j = 0; j < d; j++) {
            double z = zr[j] + b[j];
            double s = 1.0 / (1.0 + exp(-z));
            sr[j] = s;
            zr[j] = z * s;
        }
    }
}

/* y += kappa[:, m] * (z + b)  (affine output layer, kernel-weighted) */
void dflow_bias_kappa_accum(const double *restrict Z, const double *restrict b,
                            const double *restrict kap, double *restrict Y,
                            long R, long d, long K, long m) {
    for (long r = 0; r < R; r++) {
        const double k = kap[r * K + m];
        const double *restrict zr = Z + r * d;
        double *restrict yr = Y + r * d;
        for (long j = 0; j < d; j++)
            yr[j] += k * (zr[j] + b[j]);
    }
}

/* g = kappa[r0+r, m] * dY[r0+r, :] */
void dflow_kappa_scale(const double *restrict dY, const double *restrict kap,
                       double *restrict G, long R, long d, long K, long m, long r0) {
    for (long r = 0; r < R; r++) {
        const double k = kap[(r0 + r) * K + m];
        const double *restrict dyr = dY + (r0 + r) * d;
        double *restrict gr = G + r * d;
        for (long j = 0; j < d; j++)
            gr[j] = k * dyr[j];
    }
}

/* dw[j] += sum_r G[r, j] */
void dflow_colsum(const double *restrict G, double *restrict dw, long R, long d) {
    for (long r = 0; r < R; r++) {
        const double *restrict gr = G + r * d;
        for (long j = 0; j < d; j++)
            dw[j] += gr[j];
    }
}

/* G *= s + a (1 - s)   [swish'(z) from stored sigmoid s and activation a] */
void dflow_swish_prime_mul(double *restrict G, const double *restrict S,
                           const double *restrict A, long n) {
    for (long i = 0; i < n; i++)
        G[i] *= S[i] + A[i] * (1.0 - S[i]);
}

void dflow_acc(double *restrict dst, const double *restrict src, long n) {
    for (long i = 0; i < n; i++)
        dst[i] += src[i];
}
