"""
engines/quant_engine.py — QLIP Lab
Uniform affine fake quantization.

  calibrate_range       percentile clip range of pooled activation samples
  make_quantizer        (range, bits) → QuantizerSpec
  fake_quantize         quantize→dequantize on real values (bits=32 is the identity)
  quantize_weights      per-layer symmetric weight quantizer
  ste_mixture_quantize  the straight-through mixture node: forward uses the
                        selected bit-width, backward is the gradient of
                        Σ_i p_i·Q_i(a) with each Q_i passed straight through
"""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from engines.autograd import DiffTensor, as_tensor, record_op
from errors import CalibrationError, ContractViolation
from models import IDENTITY_BITS, BitMenu

logger = logging.getLogger(__name__)

CALIBRATION_PERCENTILES = (0.5, 99.5)
DEGENERATE_WIDENING = 1e-6
PROB_SUM_TOLERANCE = 1e-9


# ── Data Structures ────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class QuantizerSpec:
    bits: int
    scale: float
    zero_point: int
    clip_min: float
    clip_max: float

    @property
    def is_identity(self) -> bool:
        return self.bits == IDENTITY_BITS

    @property
    def qmax(self) -> int:
        return 2 ** self.bits - 1

    def to_dict(self) -> dict:
        return {
            "bits":       self.bits,
            "scale":      self.scale,
            "zero_point": self.zero_point,
            "clip_min":   self.clip_min,
            "clip_max":   self.clip_max,
        }


@dataclass
class SpecBatch:
    """Per-row quantizer parameters, shaped (B, 1) to broadcast over features."""

    bits: int
    scale: np.ndarray
    zero_point: np.ndarray
    clip_min: np.ndarray
    clip_max: np.ndarray

    @property
    def is_identity(self) -> bool:
        return self.bits == IDENTITY_BITS


@dataclass
class CalibrationSet:
    """Activation samples per (layer, timestep group), full-precision model only."""

    samples: dict = field(default_factory=lambda: defaultdict(list))

    def add(self, layer: int, group: int, values: np.ndarray) -> None:
        self.samples[(layer, group)].append(np.asarray(values, dtype=np.float64).reshape(-1))

    def keys(self) -> list:
        return sorted(self.samples)

    def ranges(self) -> dict:
        return {
            key: calibrate_range(self.samples[key], label=f"layer {key[0]} / group {key[1]}")
            for key in self.keys()
        }


# ── Calibration ────────────────────────────────────────────────────────────────

def calibrate_range(samples, label: str = "") -> tuple[float, float]:
    """
    0.5th / 99.5th percentiles of the pooled samples. The lower bound takes the
    sample at or below the percentile and the upper bound the one at or above,
    so tiny collections return their extremes.
    """
    if isinstance(samples, np.ndarray):
        pooled = samples.reshape(-1).astype(np.float64)
    else:
        parts = [np.asarray(s, dtype=np.float64).reshape(-1) for s in samples]
        pooled = np.concatenate(parts) if parts else np.zeros(0)
    if pooled.size == 0:
        raise CalibrationError(f"empty calibration collection for {label or 'unnamed layer/group'}")

    lo_pct, hi_pct = CALIBRATION_PERCENTILES
    clip_min = float(np.percentile(pooled, lo_pct, method="lower"))
    clip_max = float(np.percentile(pooled, hi_pct, method="higher"))
    if clip_min == clip_max:
        clip_min -= DEGENERATE_WIDENING
        clip_max += DEGENERATE_WIDENING
    return clip_min, clip_max


def make_quantizer(clip_range: tuple[float, float], bits: int) -> QuantizerSpec:
    """
    scale = (clip_max − clip_min) / (2^bits − 1); zero_point = round(−clip_min/scale).
    The range is first stretched to contain 0 so zero_point stays inside [0, 2^bits − 1].
    """
    bits = int(bits)
    if bits < 2:
        raise ContractViolation(f"quantizer needs at least 2 bits, got {bits}")
    clip_min, clip_max = float(clip_range[0]), float(clip_range[1])
    if not clip_min < clip_max:
        raise ContractViolation(f"invalid clip range ({clip_min}, {clip_max})")

    if bits == IDENTITY_BITS:
        return QuantizerSpec(IDENTITY_BITS, 1.0, 0, clip_min, clip_max)

    clip_min, clip_max = min(clip_min, 0.0), max(clip_max, 0.0)
    qmax = 2 ** bits - 1
    scale = (clip_max - clip_min) / qmax
    zero_point = int(np.clip(np.rint(-clip_min / scale), 0, qmax))
    return QuantizerSpec(bits, scale, zero_point, clip_min, clip_max)


def stack_specs(specs: Sequence[QuantizerSpec]) -> SpecBatch:
    bits = {s.bits for s in specs}
    if len(bits) != 1:
        raise ContractViolation(f"stack_specs needs a single bit-width, got {sorted(bits)}")

    def column(attr):
        return np.array([getattr(s, attr) for s in specs], dtype=np.float64).reshape(-1, 1)

    return SpecBatch(
        bits=bits.pop(),
        scale=column("scale"),
        zero_point=column("zero_point"),
        clip_min=column("clip_min"),
        clip_max=column("clip_max"),
    )


# ── Fake quantization ──────────────────────────────────────────────────────────

SpecLike = Union[QuantizerSpec, SpecBatch]


def _fq(x: np.ndarray, spec: SpecLike) -> np.ndarray:
    if spec.is_identity:
        return x
    qmax = 2 ** spec.bits - 1
    q = np.clip(np.rint(x / spec.scale) + spec.zero_point, 0, qmax)
    return (q - spec.zero_point) * spec.scale


def _clip(x: np.ndarray, spec: SpecLike) -> np.ndarray:
    if spec.is_identity:
        return x
    return np.clip(x, spec.clip_min, spec.clip_max)


def _pass_mask(x: np.ndarray, spec: SpecLike) -> np.ndarray:
    """STE pass-through region: 1 inside the clip range, 0 outside."""
    if spec.is_identity:
        return np.ones_like(x)
    return ((x >= spec.clip_min) & (x <= spec.clip_max)).astype(np.float64)


def fake_quantize_array(x, spec: SpecLike) -> np.ndarray:
    return _fq(np.asarray(x, dtype=np.float64), spec)


def fake_quantize(x, spec: SpecLike) -> DiffTensor:
    """y = (clamp(round(x/scale) + zp, 0, 2^bits − 1) − zp)·scale, straight-through backward."""
    x = as_tensor(x)
    mask = _pass_mask(x.data, spec)
    return record_op("quantize", _fq(x.data, spec), (x,), lambda g: (g * mask,))


def quantize_weights(w: np.ndarray, bits: int) -> np.ndarray:
    """Per-layer symmetric quantizer: scale = max|w| / (2^(bits−1) − 1)."""
    w = np.asarray(w, dtype=np.float64)
    if bits == IDENTITY_BITS:
        return w
    if bits < 2:
        raise ContractViolation(f"weight quantizer needs at least 2 bits, got {bits}")
    levels = 2 ** (bits - 1) - 1
    peak = float(np.max(np.abs(w)))
    if peak == 0.0:
        return w.copy()
    scale = peak / levels
    return np.clip(np.rint(w / scale), -levels, levels) * scale


# ── STE mixture node ───────────────────────────────────────────────────────────

@dataclass
class MixtureRelaxation:
    """
    Frozen rounding residuals for the relaxed objective Σ_i p_i·Q_i(a).

    On first use of a key the residual ρ_i = Q_i(a) − clip_i(a) is stored; every
    later evaluation computes clip_i(a) + ρ_i instead of Q_i(a). At the capture
    point both agree, and the relaxed function's exact derivative is the
    straight-through rule, so finite differences can check it.
    """

    residuals: dict = field(default_factory=dict)

    def candidates(self, key: str, a: np.ndarray, specs: Sequence[SpecLike]) -> list:
        if key not in self.residuals:
            self.residuals[key] = [_fq(a, s) - _clip(a, s) for s in specs]
        return [_clip(a, s) + r for s, r in zip(specs, self.residuals[key])]


def ste_mixture_quantize(
    a,
    probs: Sequence,
    specs: Sequence[SpecLike],
    selected_bits,
    relaxation: Optional[MixtureRelaxation] = None,
    key: str = "",
) -> DiffTensor:
    """
    Forward: Q_{selected}(a), chosen per row when selected_bits is an array.
    Backward: ∂/∂a = g·Σ_i p_i·mask_i(a), ∂/∂p_i = g·Q_i(a), i.e. the gradient
    of Σ_i p_i·Q_i(a) with every Q_i straight-through inside its clip range.

    probs and specs are ordered like the bit menu (low, med, high).
    """
    a = as_tensor(a)
    probs = [as_tensor(p) for p in probs]
    if len(probs) != len(specs):
        raise ContractViolation(f"{len(probs)} probability vectors for {len(specs)} quantizers")

    total = sum(p.data for p in probs)
    if not np.all(np.abs(total - 1.0) <= PROB_SUM_TOLERANCE):
        worst = float(np.max(np.abs(total - 1.0)))
        raise ContractViolation(f"bit probabilities must sum to 1 (max deviation {worst:.3e})")

    if relaxation is not None:
        candidates = relaxation.candidates(key, a.data, specs)
    else:
        candidates = [_fq(a.data, s) for s in specs]
    masks = [_pass_mask(a.data, s) for s in specs]

    if relaxation is not None:
        forward = sum(p.data * c for p, c in zip(probs, candidates))
    else:
        forward = _select_candidates(a.data, candidates, specs, selected_bits)

    def _backward(g):
        grad_a = g * sum(p.data * m for p, m in zip(probs, masks))
        return (grad_a, *[g * c for c in candidates])

    return record_op("ste_mixture", forward, (a, *probs), _backward)


def _select_candidates(a: np.ndarray, candidates: list, specs: Sequence[SpecLike], selected_bits) -> np.ndarray:
    menu_bits = [s.bits for s in specs]
    selected = np.asarray(selected_bits)

    if selected.ndim == 0:
        bits = int(selected)
        if bits not in menu_bits:
            raise ContractViolation(f"selected bit-width {bits} is not in the menu {menu_bits}")
        return candidates[menu_bits.index(bits)]

    rows = selected.reshape(-1)
    if rows.shape[0] != a.shape[0]:
        raise ContractViolation(f"{rows.shape[0]} selected bit-widths for {a.shape[0]} rows")
    index = np.empty(rows.shape[0], dtype=np.int64)
    for r, bits in enumerate(rows):
        bits = int(bits)
        if bits not in menu_bits:
            raise ContractViolation(f"selected bit-width {bits} is not in the menu {menu_bits}")
        index[r] = menu_bits.index(bits)
    stacked = np.stack(candidates, axis=0)
    picked = np.take_along_axis(stacked, index.reshape(1, -1, *([1] * (a.ndim - 1))), axis=0)
    return picked[0]


# ── Calibrated quantizer store ─────────────────────────────────────────────────

@dataclass
class QuantStore:
    """
    Activation clip ranges per (layer, timestep group) plus the bit menu. The
    same range serves every menu bit-width; only scale / zero_point differ.
    Groups index reverse steps: group(τ) = (τ − 1) // group_size.
    """

    menu: BitMenu
    steps: int
    group_size: int
    ranges: dict = field(default_factory=dict)
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_layers(self) -> int:
        return 1 + max(layer for layer, _ in self.ranges) if self.ranges else 0

    @property
    def n_groups(self) -> int:
        return -(-self.steps // self.group_size)

    def group_of(self, tau):
        return (np.asarray(tau) - 1) // self.group_size

    def spec(self, layer: int, group: int, bits: int) -> QuantizerSpec:
        key = (layer, int(group), int(bits))
        if key not in self._cache:
            if (layer, int(group)) not in self.ranges:
                raise CalibrationError(f"no calibration for layer {layer} / group {int(group)}")
            self._cache[key] = make_quantizer(self.ranges[(layer, int(group))], bits)
        return self._cache[key]

    def menu_specs(self, layer: int, groups) -> list:
        """One quantizer per menu entry; rows in different groups get a SpecBatch."""
        groups = np.asarray(groups).reshape(-1)
        uniq = np.unique(groups)
        out = []
        for bits in self.menu.bits:
            if uniq.size == 1:
                out.append(self.spec(layer, uniq[0], bits))
            else:
                out.append(stack_specs([self.spec(layer, g, bits) for g in groups]))
        return out

    def to_records(self) -> dict:
        records = {
            "quant/meta": np.array(
                [self.steps, self.group_size, *self.menu.bits, self.menu.weight_bits], dtype=np.int32
            ),
        }
        for (layer, group), (lo, hi) in sorted(self.ranges.items()):
            records[f"quant/{layer}/{group}/clip_min"] = np.array(lo, dtype=np.float64)
            records[f"quant/{layer}/{group}/clip_max"] = np.array(hi, dtype=np.float64)
        return records

    @classmethod
    def from_records(cls, records: dict, menu: Optional[BitMenu] = None) -> "QuantStore":
        """Rebuilds the store; `menu` overrides the stored one (ranges do not depend on bits)."""
        meta = [int(v) for v in records["quant/meta"]]
        steps, group_size = meta[0], meta[1]
        if menu is None:
            menu = BitMenu(meta[2], meta[3], meta[4], weight_bits=meta[5])
        ranges = {}
        for name, value in records.items():
            parts = name.split("/")
            if len(parts) == 4 and parts[0] == "quant" and parts[3] == "clip_min":
                layer, group = int(parts[1]), int(parts[2])
                hi = records[f"quant/{layer}/{group}/clip_max"]
                ranges[(layer, group)] = (float(value), float(hi))
        return cls(menu=menu, steps=steps, group_size=group_size, ranges=ranges)


def build_quant_store(calibration: CalibrationSet, menu: BitMenu, steps: int, group_size: int) -> QuantStore:
    ranges = calibration.ranges()
    logger.info(f"[calibrate] {len(ranges)} (layer, group) ranges for menu {menu.label}")
    return QuantStore(menu=menu, steps=steps, group_size=group_size, ranges=ranges)
