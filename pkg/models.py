"""
models.py — QLIP Lab
Plain data records shared by the engines, the pipeline and the report.

Nothing here touches disk; serialisation goes through engines/checkpoint.py
(binary tensors) or to_dict() (JSON manifests, CSV rows).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from errors import ConfigError, ContractViolation

IDENTITY_BITS = 32

# A bit plan is a (K, T) integer matrix: row k = quantizable layer, column j =
# reverse step τ = j + 1. Batches of plans are stacked as (B, K, T).
BitPlan = np.ndarray


# ── Bit menu ──────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class BitMenu:
    b_low: int
    b_med: int
    b_high: int
    weight_bits: int = 4

    def __post_init__(self):
        bits = self.bits
        if self.is_identity:
            pass
        elif not (bits[0] < bits[1] < bits[2]):
            raise ConfigError(f"bit menu must be strictly increasing, got {bits}")
        if min(bits) < 2 or self.weight_bits < 2:
            raise ConfigError(f"bit-widths below 2 are not supported: {bits} / W{self.weight_bits}")
        if max(*bits, self.weight_bits) > IDENTITY_BITS:
            raise ConfigError(f"bit-widths above {IDENTITY_BITS} are not supported")

    @property
    def bits(self) -> tuple[int, int, int]:
        return (self.b_low, self.b_med, self.b_high)

    @property
    def is_identity(self) -> bool:
        """All three entries 32: quantized execution must equal full precision."""
        return all(b == IDENTITY_BITS for b in self.bits)

    @property
    def label(self) -> str:
        return f"W{self.weight_bits}A{{{self.b_low},{self.b_med},{self.b_high}}}"

    def to_dict(self) -> dict:
        return asdict(self)


def validate_plan(plan: BitPlan, menu: BitMenu) -> BitPlan:
    plan = np.asarray(plan)
    if plan.ndim not in (2, 3):
        raise ContractViolation(f"bit plan must be (K, T) or (B, K, T), got shape {plan.shape}")
    allowed = np.array(sorted(set(menu.bits)))
    if not np.all(np.isin(plan, allowed)):
        stray = sorted(set(np.unique(plan).tolist()) - set(allowed.tolist()))
        raise ContractViolation(f"bit plan contains bit-widths {stray} outside the menu {menu.bits}")
    return plan


# ── Prompts ───────────────────────────────────────────────────────────────────

@dataclass
class PromptSample:
    tokens: tuple[str, ...]
    detail_level: int
    class_id: int
    embedding: np.ndarray
    quality: Optional[float] = None

    @property
    def text(self) -> str:
        return " ".join(self.tokens)

    def to_dict(self) -> dict:
        return {
            "prompt":       self.text,
            "detail_level": self.detail_level,
            "class_id":     self.class_id,
            "quality":      self.quality,
        }


# ── Sampling ──────────────────────────────────────────────────────────────────

@dataclass
class SamplerOutput:
    """One sampler call: generated x_0 rows plus the (B, K, T) bit plans that produced them."""

    x0: np.ndarray
    plans: np.ndarray
    sample_ids: np.ndarray

    @property
    def n_samples(self) -> int:
        return int(self.x0.shape[0])


# ── Metrics ───────────────────────────────────────────────────────────────────

@dataclass
class MetricsReport:
    arm: str
    n_samples: int
    fab: float
    bitops: float
    mmd: float
    fab_by_level: dict = field(default_factory=dict)
    batch_fab: dict = field(default_factory=dict)
    srocc: Optional[float] = None
    plcc: Optional[float] = None
    t2q_bitops: Optional[float] = None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_row(self) -> dict:
        """Flat row for metrics.csv; nested breakdowns become prefixed columns."""
        row = {
            "arm":        self.arm,
            "n_samples":  self.n_samples,
            "fab":        self.fab,
            "bitops":     self.bitops,
            "mmd":        self.mmd,
            "srocc":      self.srocc,
            "plcc":       self.plcc,
            "t2q_bitops": self.t2q_bitops,
        }
        for level, value in sorted(self.fab_by_level.items()):
            row[f"fab_level_{level}"] = value
        for size, value in sorted(self.batch_fab.items()):
            row[f"fab_batch_{size}"] = value
        return row


# ── Pipeline manifests ────────────────────────────────────────────────────────

@dataclass
class StageManifest:
    stage: str
    stage_hash: str
    upstream: dict = field(default_factory=dict)
    artifacts: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: dict) -> "StageManifest":
        return cls(
            stage=payload["stage"],
            stage_hash=payload["stage_hash"],
            upstream=dict(payload.get("upstream", {})),
            artifacts=list(payload.get("artifacts", [])),
            summary=dict(payload.get("summary", {})),
        )
