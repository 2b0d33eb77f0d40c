"""Shared numeric oracles for the test suite.

Finite differences run in float64, where the h=1e-3 central stencil has
truncation error far below the tolerances under test.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

FD_STEP = 1e-3


def central_difference(f: Callable[[Sequence[np.ndarray]], float],
                       arrays: Sequence[np.ndarray], h: float = FD_STEP) -> list[np.ndarray]:
    """Gradient of scalar f via central differences, one element at a time."""
    grads = []
    arrays = [np.asarray(a, dtype=np.float64).copy() for a in arrays]
    for k, arr in enumerate(arrays):
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = f(arrays)
            flat[i] = orig - h
            f_minus = f(arrays)
            flat[i] = orig
            gflat[i] = (f_plus - f_minus) / (2.0 * h)
        grads.append(g)
    return grads


def assert_close(actual, expected, rtol, atol=1e-8, label=""):
    """Elementwise |a-e| <= atol + rtol*max(|a|,|e|), with a readable report."""
    a = np.asarray(actual, dtype=np.float64)
    e = np.asarray(expected, dtype=np.float64)
    assert a.shape == e.shape, f"{label}: shape {a.shape} vs {e.shape}"
    bound = atol + rtol * np.maximum(np.abs(a), np.abs(e))
    diff = np.abs(a - e)
    if not (diff <= bound).all():
        worst = np.unravel_index(np.argmax(diff - bound), diff.shape)
        raise AssertionError(
            f"{label}: mismatch at {worst}: actual={a[worst]!r} expected={e[worst]!r} "
            f"diff={diff[worst]:.3e} allowed={bound[worst]:.3e}")


def relative_error(actual, expected, floor=1e-8) -> float:
    a = np.asarray(actual, dtype=np.float64)
    e = np.asarray(expected, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(e)), floor)
    return float(np.max(np.abs(a - e) / denom))


def matmul_loops(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Triple-loop matrix product, the brute-force oracle for matmul."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += float(a[i, t]) * float(b[t, j])
            out[i, j] = acc
    return out


def softmax_log_domain(x: np.ndarray) -> np.ndarray:
    """Log-domain softmax oracle: exp(x_i - logsumexp(x))."""
    x = np.asarray(x, dtype=np.float64)
    m = x.max()
    lse = m + np.log(np.sum(np.exp(x - m)))
    return np.exp(x - lse)


def kl_loops(p: np.ndarray, q: np.ndarray, eps=1e-12) -> float:
    """Scalar-loop KL(p || q) averaged over rows."""
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    total = 0.0
    for i in range(p.shape[0]):
        for j in range(p.shape[1]):
            if p[i, j] > 0:
                total += p[i, j] * (np.log(max(p[i, j], eps)) - np.log(max(q[i, j], eps)))
    return total / p.shape[0]


# -- partition-metric brute-force oracles --------------------------------------


def _entropy_of(labels) -> float:
    labels = list(labels)
    n = len(labels)
    h = 0.0
    for value in set(labels):
        p = labels.count(value) / n
        h -= p * np.log(p)
    return h


def nmi_entropy_oracle(a, b) -> float:
    """NMI via H(A) + H(B) - H(A,B), normalized by the mean entropy."""
    a, b = list(a), list(b)
    h_a, h_b = _entropy_of(a), _entropy_of(b)
    if h_a == 0.0 and h_b == 0.0:
        return 1.0
    if h_a == 0.0 or h_b == 0.0:
        return 0.0
    h_ab = _entropy_of(list(zip(a, b)))
    return (h_a + h_b - h_ab) / (0.5 * (h_a + h_b))


def ari_pairs_oracle(a, b) -> float:
    """ARI from explicit counts over all sample pairs."""
    a, b = list(a), list(b)
    n = len(a)
    ss = sd = ds = dd = 0  # same/diff membership in (a, b) per pair
    for i in range(n):
        for j in range(i + 1, n):
            same_a = a[i] == a[j]
            same_b = b[i] == b[j]
            if same_a and same_b:
                ss += 1
            elif same_a:
                sd += 1
            elif same_b:
                ds += 1
            else:
                dd += 1
    denom = (ss + sd) * (sd + dd) + (ss + ds) * (ds + dd)
    if denom == 0:
        return 1.0
    return 2.0 * (ss * dd - sd * ds) / denom


def clustering_accuracy_oracle(y_true, clusters) -> float:
    """Exhaustive search over one-to-one cluster-to-class assignments."""
    from itertools import permutations

    y_true = list(y_true)
    clusters = list(clusters)
    class_values = sorted(set(y_true))
    cluster_values = sorted(set(clusters))
    k = max(len(class_values), len(cluster_values))
    classes_padded = class_values + [f"_pad{i}" for i in range(k - len(class_values))]
    best = 0
    for perm in permutations(classes_padded):
        mapping = {c: perm[i] for i, c in enumerate(cluster_values)}
        hits = sum(1 for t, c in zip(y_true, clusters) if mapping[c] == t)
        best = max(best, hits)
    return best / len(y_true)


def prf_loops_oracle(y_true, y_pred, num_classes):
    """Per-class precision/recall/F1 by explicit sample counting."""
    out = {}
    for c in range(num_classes):
        tp = sum(1 for t, p in zip(y_true, y_pred) if t == c and p == c)
        fp = sum(1 for t, p in zip(y_true, y_pred) if t != c and p == c)
        fn = sum(1 for t, p in zip(y_true, y_pred) if t == c and p != c)
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        out[c] = (precision, recall, f1)
    return out
