"""Shared test utilities: finite-difference gradient checking and slow
reference implementations used as oracles. Everything here is written
independently of the package internals (nested loops, pair counting),
on purpose.
"""

import numpy as np


def rel_err(a, b):
    """Array-level max relative error: max|a-b| / max(inf-norms)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(np.abs(a - b).max(initial=0.0) / denom)


def fd_grad(f, x, step=1e-3):
    """Central-difference gradient of scalar f at x, in float64."""
    # order="C" so reshape(-1) below is a view we can probe through
    x = np.array(x, dtype=np.float64, order="C")
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = float(f(x))
        flat[i] = orig - step
        lo = float(f(x))
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * step)
    return grad


def spaced_random(rng, shape, gap=0.011):
    """Random tensor whose values are pairwise separated by more than
    2*fd step and keep clear of zero, so max/relu kinks can't flip
    under the probe."""
    n = int(np.prod(shape))
    vals = (np.arange(n) - n / 2) * gap + gap / 2
    return rng.permutation(vals).reshape(shape)


def conv2d_ref(x, w, b, stride=1, padding="valid"):
    """Nested-loop convolution oracle (float64)."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n, c, h, wd = x.shape
    co, ci, kh, kw = w.shape
    assert ci == c
    if padding == "same":
        oh = -(-h // stride)
        ow = -(-wd // stride)
        ph = max((oh - 1) * stride + kh - h, 0)
        pw = max((ow - 1) * stride + kw - wd, 0)
        pt, pl = ph // 2, pw // 2  # extra pixel goes bottom/right
        xp = np.zeros((n, c, h + ph, wd + pw))
        xp[:, :, pt:pt + h, pl:pl + wd] = x
    else:
        oh = (h - kh) // stride + 1
        ow = (wd - kw) // stride + 1
        xp = x
    out = np.zeros((n, co, oh, ow))
    for ni in range(n):
        for oc in range(co):
            for i in range(oh):
                for j in range(ow):
                    patch = xp[ni, :, i * stride:i * stride + kh,
                               j * stride:j * stride + kw]
                    out[ni, oc, i, j] = (patch * w[oc]).sum() + b[oc]
    return out


def auc_pairs(scores, labels):
    """Mann-Whitney pair counting: P(pos > neg) with ties worth 0.5."""
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    total = 0.0
    for p in pos:
        for q in neg:
            total += 1.0 if p > q else (0.5 if p == q else 0.0)
    return total / (len(pos) * len(neg))


def ap_prefix(scores, labels):
    """Average precision by exhaustive descending-threshold prefixes."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    ap = 0.0
    prev_recall = 0.0
    for t in sorted(set(scores.tolist()), reverse=True):
        keep = scores >= t
        tp = int((labels[keep] == 1).sum())
        fp = int((labels[keep] == 0).sum())
        precision = tp / (tp + fp)
        recall = tp / n_pos
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap


def reflect_ref(i, length):
    """Mirror-without-edge-repeat by explicit period construction."""
    period = list(range(length)) + list(range(length - 2, 0, -1))
    return period[i % len(period)]
