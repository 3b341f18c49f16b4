"""Central finite-difference gradient checker."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .linalg import seeded_rng

# Blocks whose gradient is (numerically) zero are compared against this
# absolute scale instead of their own magnitude.
SCALE_FLOOR = 1e-6


@dataclass
class BlockReport:
    name: str
    max_rel_error: float
    checked: int
    excluded: list = field(default_factory=list)


@dataclass
class GradCheckReport:
    blocks: dict
    tolerance: float

    @property
    def max_rel_error(self) -> float:
        return max((b.max_rel_error for b in self.blocks.values()), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    @property
    def excluded(self) -> list:
        return [(b.name, idx) for b in self.blocks.values() for idx in b.excluded]

    def lines(self) -> list[str]:
        out = []
        for b in self.blocks.values():
            out.append(f"{b.name:32s} rel_err={b.max_rel_error:.3e} checked={b.checked} excluded={len(b.excluded)}")
        return out


def _eval(loss_fn):
    out = loss_fn()
    if isinstance(out, tuple):
        return float(out[0]), out[1]
    return float(out), None


def finite_diff_check(loss_fn, params: dict, analytic: dict, tolerance: float = 1e-4,
                      h: float = 1e-5, max_coords: int | None = None, seed: int = 0) -> GradCheckReport:
    """Compare ``analytic`` gradients with central differences of ``loss_fn``.

    ``loss_fn()`` reads the arrays in ``params`` (perturbed in place and
    restored) and returns either the loss or ``(loss, signature)``.  The
    signature encodes every piecewise branch taken (ReLU masks, hinge
    states, top-k selections); a coordinate whose ``+h`` or ``-h`` evaluation
    changes the signature straddles a kink and is excluded.

    Per block the error is ``max|a - n| / max(max|a|, max|n|, SCALE_FLOOR)``.
    """
    _, base_sig = _eval(loss_fn)
    rng = seeded_rng(seed)
    blocks = {}
    for name in sorted(analytic):
        p = params[name]
        a = np.asarray(analytic[name])
        flat_idx = np.arange(p.size)
        if max_coords is not None and p.size > max_coords:
            flat_idx = np.sort(rng.choice(p.size, size=max_coords, replace=False))
        num = {}
        excluded = []
        for fi in flat_idx:
            idx = np.unravel_index(fi, p.shape)
            orig = p[idx]
            p[idx] = orig + h
            lp, sp = _eval(loss_fn)
            p[idx] = orig - h
            lm, sm = _eval(loss_fn)
            p[idx] = orig
            if base_sig is not None and not (_same(sp, base_sig) and _same(sm, base_sig)):
                excluded.append(tuple(int(i) for i in idx))
                continue
            num[fi] = (lp - lm) / (2.0 * h)
        if num:
            keys = np.array(sorted(num))
            nv = np.array([num[k] for k in keys])
            av = a.reshape(-1)[keys]
            scale = max(np.max(np.abs(av)), np.max(np.abs(nv)), SCALE_FLOOR)
            err = float(np.max(np.abs(av - nv)) / scale)
        else:
            err = 0.0
        blocks[name] = BlockReport(name, err, len(num), excluded)
    return GradCheckReport(blocks, tolerance)


def _same(a, b) -> bool:
    if isinstance(a, (bytes, str)) or isinstance(b, (bytes, str)):
        return a == b
    if isinstance(a, (list, tuple)):
        return len(a) == len(b) and all(_same(x, y) for x, y in zip(a, b))
    return np.array_equal(a, b)
