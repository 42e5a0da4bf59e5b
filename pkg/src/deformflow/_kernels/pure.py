"""Numpy implementation of the hot ensemble kernels.

Parameter layout per MLP member, for layer dims [d0, d1, ..., dL]:
W0 (d0 x d1, row major), b0, W1, b1, ..., W_{L-1}, b_{L-1}.
An ensemble stores K members back to back.  Hidden layers use swish,
the output layer is affine.
"""

import numpy as np


def member_size(dims):
    return int(sum((dims[i] + 1) * dims[i + 1] for i in range(len(dims) - 1)))


def _sigmoid(z):
    out = np.negative(z)
    np.exp(out, out=out)
    out += 1.0
    np.reciprocal(out, out=out)
    return out


def _member_layers(w, dims, m):
    """Yield (W, b) views for member m."""
    msize = member_size(dims)
    off = m * msize
    for i in range(len(dims) - 1):
        din, dout = dims[i], dims[i + 1]
        W = w[off : off + din * dout].reshape(din, dout)
        off += din * dout
        b = w[off : off + dout]
        off += dout
        yield W, b


def _member_forward(w, dims, m, X, keep=False):
    """Forward through member m; optionally keep (inputs, sigmoids) per layer."""
    L = len(dims) - 1
    acts = [X]
    sigs = []
    A = X
    for i, (W, b) in enumerate(_member_layers(w, dims, m)):
        Z = A @ W
        Z += b
        if i < L - 1:
            S = _sigmoid(Z)
            A = Z * S
            if keep:
                sigs.append(S)
                acts.append(A)
        else:
            A = Z
    return (A, acts, sigs) if keep else A


def ensemble_forward(w, dims, X, kappa):
    """Kernel-weighted sum of K MLPs over a batch of rows.

    w: flat (K*member_size,) parameters; dims: layer sizes; X: (R, d0);
    kappa: (R, K) per-row kernel weights.  Returns (R, dL).
    """
    K = kappa.shape[1]
    Y = np.zeros((X.shape[0], dims[-1]))
    for m in range(K):
        Y += kappa[:, m : m + 1] * _member_forward(w, dims, m, X)
    return Y


def ensemble_backward(w, dims, X, kappa, dY):
    """Vector-Jacobian product of ensemble_forward.

    Recomputes activations member by member (the forward pass caches
    nothing).  Returns (dX, dw) with dX: (R, d0), dw like w.
    """
    R = X.shape[0]
    K = kappa.shape[1]
    L = len(dims) - 1
    msize = member_size(dims)
    dX = np.zeros_like(X)
    dw = np.zeros_like(w)
    chunk = 16384  # caps live activation memory on large stencil stacks
    for r0 in range(0, R, chunk):
        r1 = min(R, r0 + chunk)
        Xc = X[r0:r1]
        for m in range(K):
            layers = list(_member_layers(w, dims, m))
            _, acts, sigs = _member_forward(w, dims, m, Xc, keep=True)
            G = kappa[r0:r1, m : m + 1] * dY[r0:r1]
            off = (m + 1) * msize
            for i in range(L - 1, -1, -1):
                W, _ = layers[i]
                din, dout = dims[i], dims[i + 1]
                off -= dout
                dw[off : off + dout] += G.sum(axis=0)
                off -= din * dout
                dw[off : off + din * dout] += (acts[i].T @ G).ravel()
                G = G @ W.T
                if i > 0:
                    # swish'(z) = s + a(1-s) from the stored sigmoid s and activation a
                    S, A = sigs[i - 1], acts[i]
                    G *= S + A * (1.0 - S)
            dX[r0:r1] += G
    return dX, dw
