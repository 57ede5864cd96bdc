"""Slow, direct reference implementations used only by the tests."""

import numpy as np


def centered_dft_matrix(n: int) -> np.ndarray:
    idx = np.arange(n) - n // 2
    return np.exp(-2j * np.pi * np.outer(idx, idx) / n) / np.sqrt(n)


def dft2_centered(x: np.ndarray) -> np.ndarray:
    fh = centered_dft_matrix(x.shape[-2])
    fw = centered_dft_matrix(x.shape[-1])
    return fh @ x @ fw.T


def circular_convolve(x: np.ndarray, psf: np.ndarray) -> np.ndarray:
    """z[n] = sum_k x[k] psf[(n - k + c) mod N] with c = N // 2 per axis."""
    h, w = x.shape
    ch, cw = h // 2, w // 2
    z = np.zeros((h, w), dtype=np.complex128)
    for kr in range(h):
        for kc in range(w):
            if x[kr, kc] == 0:
                continue
            rows = (np.arange(h) - kr + ch) % h
            cols = (np.arange(w) - kc + cw) % w
            z += x[kr, kc] * psf[np.ix_(rows, cols)]
    return z


def dense_attention(tokens, wq, bq, wk, bk, wv, bv, wo, bo, heads):
    """Plain per-head softmax attention over all tokens of one sequence (n, d)."""
    n, d = tokens.shape
    dh = d // heads
    q = tokens @ wq + bq
    k = tokens @ wk + bk
    v = tokens @ wv + bv
    out = np.zeros((n, d))
    for h in range(heads):
        s = slice(h * dh, (h + 1) * dh)
        logits = q[:, s] @ k[:, s].T / np.sqrt(dh)
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        out[:, s] = p @ v[:, s]
    return out @ wo + bo


def shifted_region_labels(rows: int, cols: int, window: int, shift: int) -> np.ndarray:
    """Label each position of the rolled grid by the pre-shift region it came from.

    Positions are labelled by brute force: a token at rolled position (i, j)
    came from original position ((i + s) mod rows, (j + s) mod cols); it
    wraps around iff that original coordinate is smaller than the rolled one.
    Tokens may attend each other only if they share a window and both their
    row-wrap and column-wrap flags agree.
    """
    labels = np.zeros((rows, cols), dtype=int)
    for i in range(rows):
        for j in range(cols):
            wrap_r = (i + shift) >= rows
            wrap_c = (j + shift) >= cols
            # inside the last window row/col, unwrapped and wrapped tokens differ
            labels[i, j] = 2 * int(wrap_r) + int(wrap_c)
    return labels


def allowed_pairs(rows: int, cols: int, window: int, shift: int) -> set:
    labels = shifted_region_labels(rows, cols, window, shift)
    ok = set()
    cells = [(i, j) for i in range(rows) for j in range(cols)]
    for a in cells:
        for b in cells:
            same_window = a[0] // window == b[0] // window and a[1] // window == b[1] // window
            if same_window and labels[a] == labels[b]:
                ok.add((a, b))
    return ok
