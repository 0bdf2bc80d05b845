"""Orthonormal 2D Haar transforms, one or two levels.

Coefficient convention for each non-overlapping 2x2 block [[a, b], [c, d]]:

    LL = (a + b + c + d) / 2
    LH = (a + c - b - d) / 2    column difference -> vertical edges
    HL = (a + b - c - d) / 2    row difference    -> horizontal edges
    HH = (a - b - c + d) / 2

The /2 makes the transform orthonormal, so coefficient energy equals image
energy and the adjoint of the analysis step is the synthesis step. Odd
inputs are edge-replicated on the right/bottom before the transform and
cropped back after the inverse.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "Subbands",
    "SubbandPyramid",
    "dwt2",
    "idwt2",
    "dwt2_multi",
    "idwt2_multi",
    "dwt2_adjoint",
    "pyramid_adjoint",
]

BAND_NAMES = ("ll", "lh", "hl", "hh")


@dataclass(frozen=True)
class Subbands:
    """One decomposition level. Planes are (H2, W2) or (H2, W2, C) with
    H2 = ceil(H/2), W2 = ceil(W/2) of the pre-padding input."""

    ll: np.ndarray
    lh: np.ndarray
    hl: np.ndarray
    hh: np.ndarray
    orig_shape: tuple[int, int]

    def bands(self):
        return {"ll": self.ll, "lh": self.lh, "hl": self.hl, "hh": self.hh}

    def energy(self) -> float:
        return float(sum(np.sum(np.square(p)) for p in (self.ll, self.lh, self.hl, self.hh)))


@dataclass(frozen=True)
class SubbandPyramid:
    """Stack of 1 or 2 Subbands; level k+1 decomposes level k's LL."""

    levels: tuple[Subbands, ...]

    @property
    def top_ll(self) -> np.ndarray:
        return self.levels[-1].ll


def _pad_to_even(x: np.ndarray) -> np.ndarray:
    h, w = x.shape[:2]
    ph, pw = h % 2, w % 2
    if ph == 0 and pw == 0:
        return x
    pad = [(0, ph), (0, pw)] + [(0, 0)] * (x.ndim - 2)
    return np.pad(x, pad, mode="edge")


def _pad_adjoint(g: np.ndarray, orig_shape: tuple[int, int]) -> np.ndarray:
    """Adjoint of _pad_to_even: fold replicated row/col gradients back."""
    h, w = orig_shape
    if g.shape[1] > w:
        g = g.copy()
        g[:, w - 1] += g[:, w]
        g = g[:, :w]
    if g.shape[0] > h:
        g = g.copy()
        g[h - 1] += g[h]
        g = g[:h]
    return g


def dwt2(image: np.ndarray) -> Subbands:
    """One-level Haar analysis of an (H, W) or (H, W, C) array."""
    image = np.asarray(image, dtype=np.float64)
    if image.size == 0:
        raise ValueError("cannot transform an empty image")
    orig_shape = image.shape[:2]
    x = _pad_to_even(image)
    a = x[0::2, 0::2]
    b = x[0::2, 1::2]
    c = x[1::2, 0::2]
    d = x[1::2, 1::2]
    ll = (a + b + c + d) / 2.0
    lh = (a + c - b - d) / 2.0
    hl = (a + b - c - d) / 2.0
    hh = (a - b - c + d) / 2.0
    return Subbands(ll=ll, lh=lh, hl=hl, hh=hh, orig_shape=orig_shape)


def _synthesize(sub: Subbands) -> np.ndarray:
    """Inverse block formulas, without the crop back to orig_shape."""
    ll, lh, hl, hh = sub.ll, sub.lh, sub.hl, sub.hh
    shapes = {p.shape for p in (ll, lh, hl, hh)}
    if len(shapes) != 1:
        raise ValueError(f"subband planes disagree in shape: {sorted(shapes)}")
    h2, w2 = ll.shape[:2]
    out_shape = (2 * h2, 2 * w2) + ll.shape[2:]
    x = np.empty(out_shape, dtype=np.float64)
    x[0::2, 0::2] = (ll + lh + hl + hh) / 2.0
    x[0::2, 1::2] = (ll - lh + hl - hh) / 2.0
    x[1::2, 0::2] = (ll + lh - hl - hh) / 2.0
    x[1::2, 1::2] = (ll - lh - hl + hh) / 2.0
    return x


def idwt2(subbands: Subbands) -> np.ndarray:
    """Exact inverse of dwt2, cropped back to the original size."""
    x = _synthesize(subbands)
    h, w = subbands.orig_shape
    return x[:h, :w]


def dwt2_multi(image: np.ndarray, levels: int) -> SubbandPyramid:
    """1- or 2-level pyramid; level 2 decomposes level 1's LL."""
    if levels not in (1, 2):
        raise ValueError(f"levels must be 1 or 2, got {levels}")
    first = dwt2(image)
    if levels == 1:
        return SubbandPyramid(levels=(first,))
    return SubbandPyramid(levels=(first, dwt2(first.ll)))


def idwt2_multi(pyramid: SubbandPyramid) -> np.ndarray:
    """Inverse of dwt2_multi."""
    levels = list(pyramid.levels)
    ll = levels[-1].ll
    for k in range(len(levels) - 1, 0, -1):
        sub = levels[k]
        rec_ll = idwt2(Subbands(ll=sub.ll, lh=sub.lh, hl=sub.hl, hh=sub.hh,
                                orig_shape=sub.orig_shape))
        prev = levels[k - 1]
        if rec_ll.shape != prev.ll.shape:
            raise ValueError(
                f"level {k} reconstructs LL of shape {rec_ll.shape}, "
                f"level {k - 1} expects {prev.ll.shape}")
        levels[k - 1] = Subbands(ll=rec_ll, lh=prev.lh, hl=prev.hl, hh=prev.hh,
                                 orig_shape=prev.orig_shape)
        ll = rec_ll
    return idwt2(levels[0])


def dwt2_adjoint(band_grads: dict[str, np.ndarray], orig_shape: tuple[int, int]) -> np.ndarray:
    """Adjoint of dwt2 for gradient backprop.

    For the orthonormal block transform the adjoint is the synthesis step;
    the edge-replication pad contributes a fold of the padded row/col.
    Missing bands are treated as zero.
    """
    planes = [band_grads.get(name) for name in BAND_NAMES]
    ref = next(p for p in planes if p is not None)
    planes = [np.zeros_like(ref) if p is None else p for p in planes]
    full = _synthesize(Subbands(*planes, orig_shape=orig_shape))
    return _pad_adjoint(full, orig_shape)


def pyramid_adjoint(level_grads: list[dict[str, np.ndarray]],
                    pyramid: SubbandPyramid) -> np.ndarray:
    """Adjoint of dwt2_multi: pushes per-level band gradients back to the image.

    `level_grads[k]` holds gradients w.r.t. the bands of pyramid level k
    (missing bands are zero). Level-2 gradients flow into the level-1 LL slot.
    """
    n = len(pyramid.levels)
    if len(level_grads) != n:
        raise ValueError("one gradient dict per pyramid level required")
    carry = None
    for k in range(n - 1, -1, -1):
        grads = dict(level_grads[k])
        if carry is not None:
            grads["ll"] = grads.get("ll", 0.0) + carry
        carry = dwt2_adjoint(grads, pyramid.levels[k].orig_shape)
    return carry
