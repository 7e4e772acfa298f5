"""
engines/metrics_engine.py — QLIP Lab
Efficiency and quality metrics.

  FAB     feature average bit-width: unweighted mean of activation bits over
          every (layer, reverse step, sample) of the quantizable layers
  BitOPs  Σ MACs·(b_w/32)·(b_a/32) over layers and steps
  MMD²    unbiased RBF-kernel two-sample statistic (desk-scale stand-in for FID)
  SROCC / PLCC for grading the quality predictor
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.spatial.distance import cdist, pdist
from scipy.stats import pearsonr, rankdata

from errors import ContractViolation
from models import IDENTITY_BITS, BitMenu

logger = logging.getLogger(__name__)


# ── FAB ───────────────────────────────────────────────────────────────────────

def stack_plans(plans) -> np.ndarray:
    if isinstance(plans, np.ndarray):
        arr = plans
    else:
        if len(plans) == 0:
            raise ContractViolation("no bit plans given")
        shapes = {np.shape(p) for p in plans}
        if len(shapes) != 1:
            raise ContractViolation(f"bit plans differ in shape: {sorted(shapes)}")
        arr = np.stack([np.asarray(p) for p in plans])
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[0] == 0:
        raise ContractViolation(f"expected (B, K, T) bit plans, got shape {arr.shape}")
    return arr


def compute_fab(plans) -> float:
    return float(stack_plans(plans).mean(dtype=np.float64))


def fab_by_group(plans, labels) -> dict:
    """FAB of the samples sharing each label (e.g. prompt detail level)."""
    arr = stack_plans(plans)
    labels = np.asarray(labels)
    if labels.shape[0] != arr.shape[0]:
        raise ContractViolation(f"{labels.shape[0]} labels for {arr.shape[0]} plans")
    return {int(v): float(arr[labels == v].mean(dtype=np.float64)) for v in np.unique(labels)}


def batch_fab_sweep(plans, sizes: Sequence[int]) -> dict:
    """
    FAB when consecutive batches of each size share their merged plan. Batches
    are formed in sample order, so sizes that divide each other nest and the
    result is nondecreasing along such a chain.
    """
    arr = stack_plans(plans)
    out = {}
    for size in sizes:
        size = int(size)
        if size < 1:
            raise ContractViolation(f"batch size must be positive, got {size}")
        merged = np.empty_like(arr)
        for start in range(0, arr.shape[0], size):
            merged[start:start + size] = arr[start:start + size].max(axis=0)
        out[size] = float(merged.mean(dtype=np.float64))
    return out


def bit_histogram(plans, menu: BitMenu) -> np.ndarray:
    """(K, n_bits) counts of each distinct menu bit-width per layer."""
    arr = stack_plans(plans)
    bits = sorted(set(menu.bits))
    return np.stack([(arr == b).sum(axis=(0, 2)) for b in bits], axis=1)


# ── BitOPs ────────────────────────────────────────────────────────────────────

@dataclass
class CostModel:
    """MACs per sample for each quantizable layer, plus the always-FP remainder."""

    layer_macs: list
    weight_bits: int = IDENTITY_BITS
    fp_macs: int = 0

    def __post_init__(self):
        if any(m <= 0 for m in self.layer_macs):
            raise ContractViolation(f"every quantizable layer needs positive MACs, got {self.layer_macs}")


def compute_bitops(cost: CostModel, plan) -> float:
    """Σ_{k,t} MACs_k·(b_w/32)·(plan(k,t)/32) + unquantized layers at 32/32 per step."""
    plan = np.atleast_2d(np.asarray(plan, dtype=np.float64))
    if plan.shape[0] != len(cost.layer_macs):
        raise ContractViolation(f"plan has {plan.shape[0]} layers, cost model {len(cost.layer_macs)}")
    macs = np.asarray(cost.layer_macs, dtype=np.float64)[:, None]
    quantized = float(np.sum(macs * (cost.weight_bits / 32.0) * (plan / 32.0)))
    return quantized + float(cost.fp_macs) * plan.shape[1]


def mean_bitops(cost: CostModel, plans) -> float:
    arr = stack_plans(plans)
    return float(np.mean([compute_bitops(cost, p) for p in arr]))


def t2q_bitops(layer_shapes: Sequence[tuple]) -> float:
    """One quality-predictor forward at full precision (32/32)."""
    return float(sum(int(a) * int(b) for a, b in layer_shapes))


# ── MMD ───────────────────────────────────────────────────────────────────────

def median_bandwidth(x: np.ndarray, y: np.ndarray) -> float:
    pooled = np.concatenate([x, y])
    med = float(np.median(pdist(pooled)))
    return med if med > 0 else 1.0


def mmd_distance(x, y, bandwidth: Optional[float] = None) -> float:
    """Unbiased RBF MMD², floored at 0."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    m, n = x.shape[0], y.shape[0]
    if m < 2 or n < 2:
        raise ContractViolation(f"unbiased MMD needs at least 2 points per set, got {m} and {n}")
    bw = bandwidth if bandwidth else median_bandwidth(x, y)
    gamma = 0.5 / (bw * bw)

    kxx = np.exp(-gamma * cdist(x, x, "sqeuclidean"))
    kyy = np.exp(-gamma * cdist(y, y, "sqeuclidean"))
    kxy = np.exp(-gamma * cdist(x, y, "sqeuclidean"))
    term_xx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    term_yy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    term_xy = 2.0 * kxy.mean()
    return max(float(term_xx + term_yy - term_xy), 0.0)


# ── Rank correlation ──────────────────────────────────────────────────────────

def rank_correlation(pred, true) -> tuple[float, float]:
    """(SROCC, PLCC); ties get average ranks."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    true = np.asarray(true, dtype=np.float64).reshape(-1)
    if pred.shape != true.shape or pred.size < 3:
        raise ContractViolation(f"need two equal-length vectors of at least 3 values, got {pred.size} / {true.size}")
    if np.ptp(pred) == 0 or np.ptp(true) == 0:
        raise ContractViolation("rank correlation undefined for a zero-variance input")
    srocc = pearsonr(rankdata(pred), rankdata(true))[0]
    plcc = pearsonr(pred, true)[0]
    return float(srocc), float(plcc)
