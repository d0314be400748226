"""Reference (pure numpy) implementation of the batched MLP kernels.

Network: two hidden tanh layers of equal width, each optionally batch-
normalized, with a residual skip whenever a layer's input and output widths
match; the logit layer is either affine (z = h W^T + b) or cosine-style
(z = exp(g) * h_hat W_hat^T with l2-normalized rows).

The forward cache is a plain tuple consumed by ``mlp_backward``; unused
slots hold empty arrays so the compiled backend can mirror the layout with
typed memoryviews.

Cache layout:
    (XH1, IV1, A1, H1, XH2, IV2, A2, H2, HN, WN, hn, wn, Z)
"""

from __future__ import annotations

import numpy as np

_EMPTY = np.empty((0, 0))
_EMPTY1 = np.empty(0)


def _bn_forward(P, gamma, shift, rmean, rvar, train, eps, momentum):
    """Returns (Y, XH, IV); updates running stats in place in train mode."""
    if train:
        mu = P.mean(axis=0)
        var = ((P - mu) ** 2).mean(axis=0)
        rmean *= momentum
        rmean += (1.0 - momentum) * mu
        rvar *= momentum
        rvar += (1.0 - momentum) * var
    else:
        mu = rmean
        var = rvar
    IV = 1.0 / np.sqrt(var + eps)
    XH = (P - mu) * IV
    return gamma * XH + shift, XH, IV


def mlp_forward(X, W1, b1, W2, b2, Wl, bl,
                g1, s1, rm1, rv1, g2, s2, rm2, rv2, log_scale,
                use_bn, use_residual, norm_logits, train, bn_eps, bn_momentum):
    X = np.ascontiguousarray(X)
    P1 = X @ W1.T + b1
    if use_bn:
        Y1, XH1, IV1 = _bn_forward(P1, g1, s1, rm1, rv1, train, bn_eps, bn_momentum)
    else:
        Y1, XH1, IV1 = P1, _EMPTY, _EMPTY1
    A1 = np.tanh(Y1)
    H1 = A1 + X if (use_residual and X.shape[1] == A1.shape[1]) else A1

    P2 = H1 @ W2.T + b2
    if use_bn:
        Y2, XH2, IV2 = _bn_forward(P2, g2, s2, rm2, rv2, train, bn_eps, bn_momentum)
    else:
        Y2, XH2, IV2 = P2, _EMPTY, _EMPTY1
    A2 = np.tanh(Y2)
    H2 = A2 + H1 if use_residual else A2

    if norm_logits:
        hn = np.linalg.norm(H2, axis=1)
        hn = np.where(hn == 0.0, 1.0, hn)
        HN = H2 / hn[:, None]
        wn = np.linalg.norm(Wl, axis=1)
        wn = np.where(wn == 0.0, 1.0, wn)
        WN = Wl / wn[:, None]
        Z = np.exp(log_scale) * (HN @ WN.T)
    else:
        hn, HN, wn, WN = _EMPTY1, _EMPTY, _EMPTY1, _EMPTY
        Z = H2 @ Wl.T + bl

    return Z, (XH1, IV1, A1, H1, XH2, IV2, A2, H2, HN, WN, hn, wn, Z)


def _bn_backward(dY, XH, IV, gamma, train):
    """Returns (dP, dgamma, dshift) for y = gamma * xhat + shift."""
    dgamma = (dY * XH).sum(axis=0)
    dshift = dY.sum(axis=0)
    if train:
        dP = (gamma * IV) * (dY - dY.mean(axis=0) - XH * (dY * XH).mean(axis=0))
    else:
        dP = dY * (gamma * IV)
    return dP, dgamma, dshift


def mlp_backward(dZ, X, W1, W2, Wl, g1, g2, log_scale, cache,
                 use_bn, use_residual, norm_logits, train):
    XH1, IV1, A1, H1, XH2, IV2, A2, H2, HN, WN, hn, wn, Z = cache
    X = np.ascontiguousarray(X)

    if norm_logits:
        dlog_scale = float((dZ * Z).sum())
        G = np.exp(log_scale) * dZ
        dHN = G @ WN
        dWN = G.T @ HN
        dH2 = (dHN - (dHN * HN).sum(axis=1, keepdims=True) * HN) / hn[:, None]
        dWl = (dWN - (dWN * WN).sum(axis=1, keepdims=True) * WN) / wn[:, None]
        dbl = np.zeros(Wl.shape[0])
    else:
        dlog_scale = 0.0
        dH2 = dZ @ Wl
        dWl = dZ.T @ H2
        dbl = dZ.sum(axis=0)

    # hidden layer 2 (residual skip always width-compatible here)
    carry = dH2 if use_residual else 0.0
    dY2 = dH2 * (1.0 - A2 * A2)
    if use_bn:
        dP2, dg2, ds2 = _bn_backward(dY2, XH2, IV2, g2, train)
    else:
        dP2, dg2, ds2 = dY2, _EMPTY1, _EMPTY1
    dW2 = dP2.T @ H1
    db2 = dP2.sum(axis=0)
    dH1 = dP2 @ W2 + carry

    # hidden layer 1 (skip applies only when widths matched in forward)
    dY1 = dH1 * (1.0 - A1 * A1)
    if use_bn:
        dP1, dg1, ds1 = _bn_backward(dY1, XH1, IV1, g1, train)
    else:
        dP1, dg1, ds1 = dY1, _EMPTY1, _EMPTY1
    dW1 = dP1.T @ X
    db1 = dP1.sum(axis=0)

    return (dW1, db1, dg1, ds1, dW2, db2, dg2, ds2, dWl, dbl, dlog_scale)
