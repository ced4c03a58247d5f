"""Slow, independent reference implementations used only by the tests."""

import math

import numpy as np


def conv3d_loops(x, w, b=None, stride=1, padding=0):
    B, cin, D, H, W = x.shape
    cout, _, k, _, _ = w.shape
    xp = np.zeros((B, cin, D + 2 * padding, H + 2 * padding, W + 2 * padding))
    xp[:, :, padding:padding + D, padding:padding + H, padding:padding + W] = x
    do = (D + 2 * padding - k) // stride + 1
    ho = (H + 2 * padding - k) // stride + 1
    wo = (W + 2 * padding - k) // stride + 1
    out = np.zeros((B, cout, do, ho, wo))
    for n in range(B):
        for o in range(cout):
            for d in range(do):
                for h in range(ho):
                    for v in range(wo):
                        acc = 0.0 if b is None else float(b[o])
                        for i in range(cin):
                            for a in range(k):
                                for c in range(k):
                                    for e in range(k):
                                        acc += w[o, i, a, c, e] * xp[n, i, d * stride + a, h * stride + c, v * stride + e]
                        out[n, o, d, h, v] = acc
    return out


def depthwise_loops(x, w, stride=1, padding=0):
    B, C = x.shape[:2]
    out = [conv3d_loops(x[:, c:c + 1], w[c][None, None], None, stride, padding) for c in range(C)]
    return np.concatenate(out, axis=1)


def pointwise_loops(x, w, b=None):
    B, cin = x.shape[:2]
    cout = w.shape[0]
    flat = x.reshape(B, cin, -1)
    out = np.zeros((B, cout, flat.shape[2]))
    for n in range(B):
        for v in range(flat.shape[2]):
            for o in range(cout):
                acc = 0.0 if b is None else float(b[o])
                for i in range(cin):
                    acc += w[o, i] * flat[n, i, v]
                out[n, o, v] = acc
    return out.reshape((B, cout) + x.shape[2:])


def mean_over_hw_loops(x):
    B, C, D, H, W = x.shape
    out = np.zeros((B, C, D))
    for n in range(B):
        for c in range(C):
            for d in range(D):
                s = 0.0
                for h in range(H):
                    for v in range(W):
                        s += x[n, c, d, h, v]
                out[n, c, d] = s / (H * W)
    return out


def gelu_erf(t):
    return t * 0.5 * (1.0 + math.erf(t / math.sqrt(2.0)))


def fnv1a_64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for byte in data:
        h ^= byte
        h = (h * 0x100000001B3) % (1 << 64)
    return h
