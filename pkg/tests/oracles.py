"""Brute-force reference implementations, written without torch or the package.

Everything here loops over pixels in plain Python / NumPy so it shares no
code path with the vectorised implementation it is compared against.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.spatial.transform import Rotation

C1 = 0.01 ** 2
C2 = 0.03 ** 2
ALPHA = 0.85


def rotation_matrix(axis_angle):
    return Rotation.from_rotvec(np.asarray(axis_angle, dtype=np.float64)).as_matrix()


def backproject_pixel(u, v, depth, fx, fy, cx, cy):
    return np.array([depth * (u - cx) / fx, depth * (v - cy) / fy, depth])


def project_point(p, fx, fy, cx, cy):
    return fx * p[0] / p[2] + cx, fy * p[1] / p[2] + cy


def bilinear(image, u, v):
    """Clamp-to-border bilinear lookup in a 2-D array at column ``u``, row ``v``."""
    h, w = image.shape
    u = min(max(u, 0.0), w - 1.0)
    v = min(max(v, 0.0), h - 1.0)
    u0, v0 = int(math.floor(u)), int(math.floor(v))
    u1, v1 = min(u0 + 1, w - 1), min(v0 + 1, h - 1)
    a, b = u - u0, v - v0
    return ((1 - a) * (1 - b) * image[v0, u0] + a * (1 - b) * image[v0, u1]
            + (1 - a) * b * image[v1, u0] + a * b * image[v1, u1])


def softmax(xs):
    m = max(xs)
    e = [math.exp(x - m) for x in xs]
    s = sum(e)
    return [x / s for x in e]


def attention(x, w_f, w_g, w_h):
    """``x``: list of P feature vectors (length M); weights are N x M nested lists.

    Returns the P x P weights and the P output vectors.
    """
    def mat_vec(w, vec):
        return [sum(w[n][m] * vec[m] for m in range(len(vec))) for n in range(len(w))]
    q = [mat_vec(w_f, xi) for xi in x]
    k = [mat_vec(w_g, xi) for xi in x]
    val = [mat_vec(w_h, xi) for xi in x]
    s = [softmax([sum(a * b for a, b in zip(qi, kj)) for kj in k]) for qi in q]
    out = [[sum(s[i][j] * val[j][n] for j in range(len(x))) for n in range(len(w_h))] for i in range(len(x))]
    return s, out


def softargmax(logits, bins):
    return sum(p * b for p, b in zip(softmax(logits), bins))


def variance(probs, bins):
    mean = sum(p * b for p, b in zip(probs, bins))
    return sum(p * b * b for p, b in zip(probs, bins)) - mean * mean


def _reflect(i, n):
    if i < 0:
        return -i
    if i >= n:
        return 2 * (n - 1) - i
    return i


def ssim(x, y):
    """SSIM map of two 2-D arrays with 3x3 windows and reflected borders."""
    h, w = x.shape
    out = np.zeros((h, w))
    for r in range(h):
        for c in range(w):
            xs, ys = [], []
            for dr in (-1, 0, 1):
                for dc in (-1, 0, 1):
                    rr, cc = _reflect(r + dr, h), _reflect(c + dc, w)
                    xs.append(x[rr, cc])
                    ys.append(y[rr, cc])
            mx, my = sum(xs) / 9, sum(ys) / 9
            vx = sum(a * a for a in xs) / 9 - mx * mx
            vy = sum(b * b for b in ys) / 9 - my * my
            cxy = sum(a * b for a, b in zip(xs, ys)) / 9 - mx * my
            val = ((2 * mx * my + C1) * (2 * cxy + C2)) / ((mx * mx + my * my + C1) * (vx + vy + C2))
            out[r, c] = min(1.0, max(-1.0, val))
    return out


def photometric_error(target, synth):
    """Channel-averaged SSIM + L1 error for ``C x H x W`` arrays."""
    c = target.shape[0]
    dssim = sum(1 - ssim(target[i], synth[i]) for i in range(c)) / c
    l1 = sum(np.abs(target[i] - synth[i]) for i in range(c)) / c
    return ALPHA / 2 * dssim + (1 - ALPHA) * l1


def smoothness(disp, image):
    """Edge-aware smoothness of a 2-D disparity with a ``C x H x W`` image."""
    h, w = disp.shape
    mean = sum(disp[r, c] for r in range(h) for c in range(w)) / (h * w)
    d = disp / mean
    total = 0.0
    if w > 1:
        terms = []
        for r in range(h):
            for c in range(w - 1):
                g = sum(abs(image[i, r, c + 1] - image[i, r, c]) for i in range(image.shape[0])) / image.shape[0]
                terms.append(abs(d[r, c + 1] - d[r, c]) * math.exp(-g))
        total += sum(terms) / len(terms)
    if h > 1:
        terms = []
        for r in range(h - 1):
            for c in range(w):
                g = sum(abs(image[i, r + 1, c] - image[i, r, c]) for i in range(image.shape[0])) / image.shape[0]
                terms.append(abs(d[r + 1, c] - d[r, c]) * math.exp(-g))
        total += sum(terms) / len(terms)
    return total


def depth_metrics(pred, gt):
    """The eight metrics over flat lists, no scaling or clamping."""
    n = len(gt)
    abs_rel = sum(abs(p - g) / g for p, g in zip(pred, gt)) / n
    sq_rel = sum((p - g) ** 2 / g for p, g in zip(pred, gt)) / n
    rmse = math.sqrt(sum((p - g) ** 2 for p, g in zip(pred, gt)) / n)
    rmse_log = math.sqrt(sum((math.log(p) - math.log(g)) ** 2 for p, g in zip(pred, gt)) / n)
    ratio = [max(p / g, g / p) for p, g in zip(pred, gt)]
    a = [sum(1 for t in ratio if t < 1.25 ** k) / n for k in (1, 2, 3)]
    log10 = sum(abs(math.log10(p) - math.log10(g)) for p, g in zip(pred, gt)) / n
    return {"abs_rel": abs_rel, "sq_rel": sq_rel, "rmse": rmse, "rmse_log": rmse_log,
            "a1": a[0], "a2": a[1], "a3": a[2], "log10": log10}


def adam_trace(x0, grad_fn, steps, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Scalar Adam with bias correction; returns the iterates after each step."""
    x, m, v = x0, 0.0, 0.0
    out = []
    for t in range(1, steps + 1):
        g = grad_fn(x)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        x = x - lr * m_hat / (math.sqrt(v_hat) + eps)
        out.append(x)
    return out
