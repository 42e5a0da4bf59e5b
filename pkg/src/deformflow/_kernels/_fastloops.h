#ifndef DFLOW_FASTLOOPS_H
#define DFLOW_FASTLOOPS_H

void dflow_sigmoid_act(double *Z, double *S, const double *b, long R, long d);
void dflow_bias_kappa_accum(const double *Z, const double *b, const double *kap,
                            double *Y, long R, long d, long K, long m);
void dflow_kappa_scale(const double *dY, const double *kap, double *G,
                       long R, long d, long K, long m, long r0);
void dflow_colsum(const double *G, double *dw, long R, long d);
void dflow_swish_prime_mul(double *G, const double *S, const double *A, long n);
void dflow_acc(double *dst, const double *src, long n);

#endif
