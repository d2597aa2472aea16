"""Sub-model construction: unit selection, parameter slicing and lifting.

A prunable layer's *units* are its outputs: hidden neurons for ``Dense`` and
output filters for ``Conv2d``. Dropping a unit removes its weight row (or
filter slice) and bias, plus the matching input columns/channels of the next
parameterized layer.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .model import (
    Conv2d,
    Dense,
    LayerParams,
    LayerSpec,
    ModelParams,
    ShapeError,
    param_layer_indices,
    validate_arch,
)

EPSILON = 1e-6
FDR_GUIDANCE = (0.10, 0.50)

ScoreMap = dict  # layer index -> np.ndarray of nonnegative scores


class ContractError(ValueError):
    """An operation was called outside its precondition."""


class FdrWarning(UserWarning):
    pass


def check_fdr(fdr: float) -> float:
    """Validate a dropout rate: error outside [0, 1), warn outside 10%-50%."""
    fdr = float(fdr)
    if not 0.0 <= fdr < 1.0:
        raise ValueError("fdr must be in [0,1)")
    lo, hi = FDR_GUIDANCE
    if not lo <= fdr <= hi:
        warnings.warn(
            f"fdr={fdr} is outside the recommended {lo:.0%}-{hi:.0%} range",
            FdrWarning,
            stacklevel=2,
        )
    return fdr


def kept_count(n_units: int, fdr: float) -> int:
    return max(1, int(np.floor((1.0 - fdr) * n_units + 0.5)))


def units(layer: LayerSpec) -> int:
    return layer.out_units if isinstance(layer, Dense) else layer.out_channels


def prunable_layers(arch: Sequence[LayerSpec]) -> list[int]:
    return [i for i in param_layer_indices(arch) if arch[i].prunable]


@dataclass(frozen=True)
class SubModelSpec:
    """Kept unit indices per prunable layer (keyed by position in the arch)."""

    kept: Mapping[int, tuple[int, ...]]
    fdr: float = 0.0

    def to_json(self) -> str:
        return json.dumps({str(k): list(v) for k, v in sorted(self.kept.items())})

    @classmethod
    def from_json(cls, text: str, fdr: float = 0.0) -> "SubModelSpec":
        raw = json.loads(text)
        return cls({int(k): tuple(int(i) for i in v) for k, v in raw.items()}, fdr)

    def __hash__(self) -> int:
        return hash((self.to_json(), self.fdr))

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:12]

    def same_units(self, other: "SubModelSpec | None") -> bool:
        return other is not None and dict(self.kept) == dict(other.kept)


def full_spec(arch: Sequence[LayerSpec]) -> SubModelSpec:
    return SubModelSpec({i: tuple(range(units(arch[i]))) for i in prunable_layers(arch)}, 0.0)


def empty_score_map(arch: Sequence[LayerSpec]) -> ScoreMap:
    return {i: np.zeros(units(arch[i])) for i in prunable_layers(arch)}


def validate_spec(arch: Sequence[LayerSpec], spec: SubModelSpec) -> None:
    expected = set(prunable_layers(arch))
    if set(spec.kept) != expected:
        raise ShapeError(
            f"spec covers layers {sorted(spec.kept)}, prunable layers are {sorted(expected)}"
        )
    for i, kept in spec.kept.items():
        n = units(arch[i])
        if len(kept) == 0:
            raise ShapeError(f"layer {i}: spec keeps no units")
        if any(b <= a for a, b in zip(kept, kept[1:])):
            raise ShapeError(f"layer {i}: kept indices must be strictly increasing")
        if kept[0] < 0 or kept[-1] >= n:
            raise ShapeError(f"layer {i}: kept index out of range for {n} units")


def select_random(arch: Sequence[LayerSpec], fdr: float, rng: np.random.Generator) -> SubModelSpec:
    kept = {}
    for i in prunable_layers(arch):
        n = units(arch[i])
        k = kept_count(n, fdr)
        kept[i] = tuple(int(j) for j in np.sort(rng.choice(n, size=k, replace=False)))
    return SubModelSpec(kept, fdr)


def weighted_sample(weights: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``k`` distinct indices by successive weighted draws without replacement.

    Uses exponential keys: taking the ``k`` largest ``log(u) / w`` has the same
    distribution as drawing one index at a time with probability proportional
    to the remaining weights.
    """
    weights = np.asarray(weights, dtype=float)
    if np.any(weights <= 0):
        raise ValueError("weights must be positive")
    u = rng.random(weights.shape[0])
    keys = np.log(u) / weights
    # stable sort on the negated key: ties resolve to the lowest index
    return np.argsort(-keys, kind="stable")[:k]


def select_weighted(
    arch: Sequence[LayerSpec], score_map: ScoreMap, fdr: float, rng: np.random.Generator
) -> SubModelSpec:
    kept = {}
    for i in prunable_layers(arch):
        n = units(arch[i])
        scores = np.asarray(score_map[i], dtype=float)
        if scores.shape != (n,):
            raise ShapeError(f"layer {i}: score map has {scores.shape}, expected ({n},)")
        picks = weighted_sample(scores + EPSILON, kept_count(n, fdr), rng)
        kept[i] = tuple(int(j) for j in np.sort(picks))
    return SubModelSpec(kept, fdr)


def _slices(arch: Sequence[LayerSpec], spec: SubModelSpec):
    """Yield (arch index, row index array, column index array or None) per param layer.

    Columns index the input axis of Dense weights (flattened) or the input
    channel axis of Conv2d weights. ``None`` means "keep all".
    """
    prev_kept = None  # kept units of the previous param layer, None if all
    prev_channels = None  # channel count feeding a flatten, if the previous layer was conv
    for i in param_layer_indices(arch):
        layer = arch[i]
        rows = np.asarray(spec.kept[i]) if layer.prunable else None
        cols = None
        if prev_kept is not None:
            if isinstance(layer, Dense) and prev_channels is not None:
                spatial = layer.in_units // prev_channels
                cols = (prev_kept[:, None] * spatial + np.arange(spatial)[None, :]).ravel()
            else:
                cols = prev_kept
        yield i, rows, cols
        prev_kept = rows
        prev_channels = layer.out_channels if isinstance(layer, Conv2d) else None


def _index(arr: np.ndarray, rows, cols):
    if rows is not None:
        arr = arr[rows]
    if cols is not None:
        arr = arr[:, cols]
    return arr


def extract(global_params: ModelParams, arch: Sequence[LayerSpec], spec: SubModelSpec):
    """Slice ``global_params`` down to ``spec``; returns ``(sub_params, sub_arch)``."""
    validate_arch(arch)
    validate_spec(arch, spec)
    sub_params = []
    sub_arch = list(arch)
    for k, (i, rows, cols) in enumerate(_slices(arch, spec)):
        p = global_params[k]
        w = _index(p.weights, rows, cols).copy()
        b = (p.biases[rows] if rows is not None else p.biases).copy()
        sub_params.append(LayerParams(w, b))
        layer = arch[i]
        if isinstance(layer, Dense):
            sub_arch[i] = Dense(w.shape[1], w.shape[0], layer.prunable)
        else:
            sub_arch[i] = Conv2d(w.shape[1], w.shape[0], layer.kernel_h, layer.kernel_w, layer.prunable)
    return sub_params, sub_arch


def lift(
    global_params: ModelParams,
    arch: Sequence[LayerSpec],
    spec: SubModelSpec,
    trained_sub: ModelParams,
) -> ModelParams:
    """Write ``trained_sub`` back into a copy of ``global_params``."""
    validate_spec(arch, spec)
    out = []
    for k, (i, rows, cols) in enumerate(_slices(arch, spec)):
        g, s = global_params[k], trained_sub[k]
        w, b = g.weights.copy(), g.biases.copy()
        r = np.arange(w.shape[0]) if rows is None else rows
        c = np.arange(w.shape[1]) if cols is None else cols
        expected = (len(r), len(c), *w.shape[2:])
        if s.weights.shape != expected or s.biases.shape != (len(r),):
            raise ShapeError(
                f"layer {i}: sub-model weights {s.weights.shape} / biases {s.biases.shape} "
                f"do not match spec shape {expected}"
            )
        w[np.ix_(r, c)] = s.weights
        b[r] = s.biases
        out.append(LayerParams(w, b))
    return out


def coverage_mask(global_params: ModelParams, arch: Sequence[LayerSpec], spec: SubModelSpec) -> ModelParams:
    """Boolean params-shaped mask of the coordinates a spec addresses."""
    zeros = [LayerParams(np.zeros(p.weights.shape, bool), np.zeros(p.biases.shape, bool)) for p in global_params]
    sub, _ = extract(zeros, arch, spec)
    ones = [LayerParams(np.ones_like(p.weights), np.ones_like(p.biases)) for p in sub]
    return lift(zeros, arch, spec, ones)


def update_score_map(score_map: ScoreMap, spec: SubModelSpec, l_prev: float, l_cur: float) -> ScoreMap:
    """Add the relative loss improvement to every kept unit's score."""
    if not (l_prev > 0 and l_cur < l_prev):
        raise ContractError(
            f"score update requires l_prev > 0 and l_cur < l_prev (got {l_prev}, {l_cur})"
        )
    gain = (l_prev - l_cur) / l_prev
    out = {i: s.copy() for i, s in score_map.items()}
    for i, kept in spec.kept.items():
        out[i][list(kept)] += gain
    return out
