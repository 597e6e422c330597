"""Pure-numpy reference versions of the hot kernels."""

import numpy as np


def im2col3x3(x):
    """[B, H, W, C] -> [B, H, W, 9*C] patches of a zero-padded 3x3 window.

    Patch channel order is (dy, dx, c).
    """
    B, H, W, C = x.shape
    xp = np.zeros((B, H + 2, W + 2, C), dtype=x.dtype)
    xp[:, 1:-1, 1:-1, :] = x
    cols = np.empty((B, H, W, 9, C), dtype=x.dtype)
    for dy in range(3):
        for dx in range(3):
            cols[:, :, :, dy * 3 + dx, :] = xp[:, dy:dy + H, dx:dx + W, :]
    return cols.reshape(B, H, W, 9 * C)


def col2im3x3(cols, C):
    """Adjoint of :func:`im2col3x3`: scatter-add patch gradients back."""
    B, H, W, _ = cols.shape
    cols = cols.reshape(B, H, W, 9, C)
    xp = np.zeros((B, H + 2, W + 2, C), dtype=cols.dtype)
    for dy in range(3):
        for dx in range(3):
            xp[:, dy:dy + H, dx:dx + W, :] += cols[:, :, :, dy * 3 + dx, :]
    return xp[:, 1:-1, 1:-1, :].copy()


def relation_huber(t, s, mask):
    """Masked pairwise-distance Huber consistency.

    For each group g, compares the distances ||t[g,i] - t[g,j]|| and
    ||s[g,i] - s[g,j]|| over ordered member pairs (i, j) where both members
    are masked in.  Returns ``(loss, grad_s, n_pairs)`` where ``n_pairs``
    counts valid ordered pairs with i != j.
    """
    m = mask.astype(bool)
    pair = (m[:, :, None] & m[:, None, :]).astype(np.float64)
    t64 = t.astype(np.float64)
    s64 = s.astype(np.float64)
    dt = t64[:, :, None, :] - t64[:, None, :, :]
    ds = s64[:, :, None, :] - s64[:, None, :, :]
    rt = np.sqrt((dt * dt).sum(-1)) * pair
    rs = np.sqrt((ds * ds).sum(-1)) * pair
    r = rt - rs
    ar = np.abs(r)
    loss = np.where(ar <= 1, 0.5 * r * r, ar - 0.5).sum()
    # d loss / d rs for each ordered pair
    w = -np.where(ar <= 1, r, np.sign(r))
    inv = np.divide(w, rs, out=np.zeros_like(rs), where=rs > 0)
    # both (i, j) and (j, i) carry the same term; the ds sign flips
    grad = 2.0 * (inv[:, :, :, None] * ds).sum(axis=2)
    n = pair.shape[1]
    n_pairs = int(pair.sum() - (pair * np.eye(n)).sum())
    return float(loss), grad.astype(s.dtype), n_pairs
