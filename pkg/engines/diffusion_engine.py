"""
engines/diffusion_engine.py — QLIP Lab
Toy conditional DDPM.

Schedule, forward noising and the ancestral reverse step follow the standard
ε-parameterised DDPM. The denoiser is a residual MLP conditioned by
concatenation: [x_t, time embedding, prompt embedding] → input layer (FP) →
K quantizable hidden layers → output layer (FP).

Timestep conventions used everywhere in the lab:
  t  diffusion timestep, 1..T, t = T is pure noise
  τ  reverse step, τ = T − t + 1, so τ = 1 is the first (noisiest) step
A bit plan column j holds the bits used at reverse step τ = j + 1.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from engines.autograd import (
    AdamState,
    DiffTensor,
    Tape,
    adam_step,
    as_tensor,
    backward,
    concat,
    matmul,
    parameter,
    reduce_mean,
    relu,
    squared_error,
    take_slice,
    zero_grad,
)
from engines.quant_engine import (
    CalibrationSet,
    MixtureRelaxation,
    QuantStore,
    quantize_weights,
    ste_mixture_quantize,
)
from engines.rng import stream
from errors import ContractViolation
from models import IDENTITY_BITS, SamplerOutput

logger = logging.getLogger(__name__)

MIN_QUANT_LAYERS = 3
TIME_EMBED_BASE = 10000.0
_CONFIG_RECORDS = ("denoiser/config", "denoiser/outlier_scale")


# ── Schedule ──────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class DiffusionSchedule:
    """Arrays are indexed by t − 1."""

    steps: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    sigmas: np.ndarray

    def to_records(self) -> dict:
        return {"schedule/betas": self.betas}

    @classmethod
    def from_records(cls, records: dict) -> "DiffusionSchedule":
        return _schedule_from_betas(np.asarray(records["schedule/betas"], dtype=np.float64))


def _schedule_from_betas(betas: np.ndarray) -> DiffusionSchedule:
    alphas = 1.0 - betas
    return DiffusionSchedule(
        steps=int(betas.shape[0]),
        betas=betas,
        alphas=alphas,
        alpha_bars=np.cumprod(alphas),
        sigmas=np.sqrt(betas),
    )


def build_schedule(steps: int, beta_start: float, beta_end: float) -> DiffusionSchedule:
    """Linear β from beta_start to beta_end over `steps` steps."""
    if steps < 2:
        raise ContractViolation(f"diffusion needs at least 2 steps, got {steps}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ContractViolation(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    return _schedule_from_betas(np.linspace(beta_start, beta_end, steps, dtype=np.float64))


def _check_t(t, schedule: DiffusionSchedule) -> np.ndarray:
    t = np.asarray(t, dtype=np.int64)
    if np.any(t < 1) or np.any(t > schedule.steps):
        raise ContractViolation(f"timestep outside [1, {schedule.steps}]: {t.min()}..{t.max()}")
    return t


def _per_row(values: np.ndarray, t: np.ndarray, ndim: int) -> np.ndarray:
    picked = values[t - 1]
    if picked.ndim == 0:
        return picked
    return picked.reshape(-1, *([1] * (ndim - 1)))


def forward_noise(x0, t, eps, schedule: DiffusionSchedule) -> np.ndarray:
    """x_t = √ᾱ_t·x_0 + √(1 − ᾱ_t)·ε; t may be a scalar or one timestep per row."""
    t = _check_t(t, schedule)
    x0 = np.asarray(x0, dtype=np.float64)
    ab = _per_row(schedule.alpha_bars, t, x0.ndim)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * np.asarray(eps, dtype=np.float64)


def reverse_step(x_t, t, eps_pred, schedule: DiffusionSchedule, noise) -> np.ndarray:
    """
    μ = (x_t − β_t/√(1 − ᾱ_t)·ε_pred)/√α_t and x_{t−1} = μ + σ_t·noise.
    The noise term is dropped at t = 1.
    """
    t = _check_t(t, schedule)
    x_t = np.asarray(x_t, dtype=np.float64)
    eps_pred = np.asarray(eps_pred, dtype=np.float64)
    beta = _per_row(schedule.betas, t, x_t.ndim)
    alpha = _per_row(schedule.alphas, t, x_t.ndim)
    alpha_bar = _per_row(schedule.alpha_bars, t, x_t.ndim)
    sigma = _per_row(schedule.sigmas, t, x_t.ndim)

    mean = (x_t - (beta / np.sqrt(1.0 - alpha_bar)) * eps_pred) / np.sqrt(alpha)
    keep = _per_row((np.arange(schedule.steps) > 0).astype(np.float64), t, x_t.ndim)
    return mean + keep * sigma * np.asarray(noise, dtype=np.float64)


def sinusoidal_time_embedding(t, dim: int) -> np.ndarray:
    """(B,) timesteps → (B, dim) sin/cos features."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(TIME_EMBED_BASE) * np.arange(half) / max(half, 1))
    args = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((t.shape[0], 1))], axis=1)
    return emb


# ── Denoiser ──────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class DenoiserConfig:
    data_dim: int = 4
    hidden: int = 64
    quant_layers: int = 6
    time_dim: int = 16
    embed_dim: int = 64
    outlier_scale: float = 0.0

    @property
    def input_dim(self) -> int:
        return self.data_dim + self.time_dim + self.embed_dim


class Denoiser:
    """
    ε_θ(x_t, t, z). Layer k of the quantizable stack computes
    h ← h + relu(Q(h)·W_k + b_k), so the activation hook sees h before Q.

    With outlier_scale > 0 the quantized tensor carries one extra channel
    holding outlier_scale × the row's peak activation (a massive-activation
    channel). It is dropped right after quantization, but it sets the
    calibrated clip range, so the ordinary channels keep about
    log2(outlier_scale) fewer effective bits at every menu width.
    """

    def __init__(self, config: DenoiserConfig, params: dict):
        if config.quant_layers < MIN_QUANT_LAYERS:
            raise ContractViolation(
                f"denoiser needs at least {MIN_QUANT_LAYERS} quantizable layers, got {config.quant_layers}"
            )
        self.config = config
        self.params = params
        self._quantized: dict[int, "Denoiser"] = {}

    @classmethod
    def initialise(cls, config: DenoiserConfig, seed: int) -> "Denoiser":
        rng = stream(seed, "denoiser/init")
        h = config.hidden

        def dense(fan_in, fan_out, gain=np.sqrt(2.0)):
            return rng.standard_normal((fan_in, fan_out)) * gain / np.sqrt(fan_in)

        params = {
            "in/w": parameter(dense(config.input_dim, h), "in/w"),
            "in/b": parameter(np.zeros((1, h)), "in/b"),
        }
        for k in range(config.quant_layers):
            params[f"hidden/{k}/w"] = parameter(dense(h, h, gain=0.5), f"hidden/{k}/w")
            params[f"hidden/{k}/b"] = parameter(np.zeros((1, h)), f"hidden/{k}/b")
        params["out/w"] = parameter(dense(h, config.data_dim, gain=1.0), "out/w")
        params["out/b"] = parameter(np.zeros((1, config.data_dim)), "out/b")
        return cls(config, params)

    @property
    def n_layers(self) -> int:
        return self.config.quant_layers

    def layer_macs(self) -> list[int]:
        """MACs per sample of each quantizable layer."""
        return [self.config.hidden * self.config.hidden] * self.config.quant_layers

    def fp_macs(self) -> int:
        """MACs per sample of the full-precision input and output layers."""
        return self.config.input_dim * self.config.hidden + self.config.hidden * self.config.data_dim

    def quantized(self, weight_bits: int) -> "Denoiser":
        """Frozen copy with every quantizable layer's weights fake-quantized once."""
        if weight_bits not in self._quantized:
            params = {}
            for name, p in self.params.items():
                data = p.data
                if name.startswith("hidden/") and name.endswith("/w"):
                    data = quantize_weights(data, weight_bits)
                params[name] = DiffTensor(data, requires_grad=False, name=name)
            self._quantized[weight_bits] = Denoiser(self.config, params)
        return self._quantized[weight_bits]

    def to_records(self) -> dict:
        cfg = self.config
        records = {
            "denoiser/config": np.array(
                [cfg.data_dim, cfg.hidden, cfg.quant_layers, cfg.time_dim, cfg.embed_dim], dtype=np.int32
            ),
            "denoiser/outlier_scale": np.array(cfg.outlier_scale, dtype=np.float64),
        }
        for name, p in self.params.items():
            records[f"denoiser/{name}"] = p.data
        return records

    @classmethod
    def from_records(cls, records: dict) -> "Denoiser":
        config = DenoiserConfig(
            *[int(v) for v in records["denoiser/config"]],
            outlier_scale=float(records.get("denoiser/outlier_scale", 0.0)),
        )
        params = {
            name[len("denoiser/"):]: parameter(value, name[len("denoiser/"):])
            for name, value in records.items()
            if name.startswith("denoiser/") and name not in _CONFIG_RECORDS
        }
        return cls(config, params)


@dataclass
class QuantizedMode:
    """
    How denoise_forward quantizes the hook activations.

    bits:  (K, B) selected bit-width per layer and row.
    probs: optional per-layer (p_low, p_med, p_high) tensors shaped (B, 1); the
           STE node routes gradients into them. Defaults to one-hot of `bits`.
    """

    store: QuantStore
    bits: np.ndarray
    probs: Optional[Sequence] = None
    relaxation: Optional[MixtureRelaxation] = None

    def layer_probs(self, layer: int):
        if self.probs is not None:
            return self.probs[layer]
        row_bits = np.asarray(self.bits[layer]).reshape(-1, 1)
        return tuple((row_bits == b).astype(np.float64) for b in _menu_slots(self.store))


def _menu_slots(store: QuantStore) -> list:
    # Identity menu repeats 32; only the first slot may claim a row.
    slots, seen = [], set()
    for b in store.menu.bits:
        slots.append(b if b not in seen else -1)
        seen.add(b)
    return slots


ActivationHook = Callable[[int, np.ndarray], None]


def _with_outlier_channel(h: DiffTensor, scale: float) -> DiffTensor:
    peak = np.max(h.data, axis=1, keepdims=True)
    return concat([h, scale * peak], axis=1)


def denoise_forward(
    denoiser: Denoiser,
    x_t,
    t,
    z,
    mode: Optional[QuantizedMode] = None,
    hook: Optional[ActivationHook] = None,
) -> DiffTensor:
    """
    ε prediction for a batch. mode=None is the full-precision network; with a
    QuantizedMode the weight-quantized copy runs and every hook activation
    passes through the STE mixture node.
    """
    cfg = denoiser.config
    x_t = as_tensor(x_t)
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    batch = x_t.shape[0]
    t = np.broadcast_to(np.asarray(t, dtype=np.int64), (batch,))
    if x_t.shape[1] != cfg.data_dim or z.shape != (batch, cfg.embed_dim):
        raise ContractViolation(
            f"denoiser expects x_t (B, {cfg.data_dim}) and z (B, {cfg.embed_dim}), got {x_t.shape} / {z.shape}"
        )

    net = denoiser
    groups = None
    if mode is not None:
        net = denoiser.quantized(mode.store.menu.weight_bits)
        taus = mode.store.steps - t + 1
        groups = mode.store.group_of(taus)
    p = net.params

    inp = concat([x_t, sinusoidal_time_embedding(t, cfg.time_dim), z], axis=1)
    h = relu(matmul(inp, p["in/w"]) + p["in/b"])
    widen = cfg.outlier_scale > 0 and (mode is not None or hook is not None)
    for k in range(cfg.quant_layers):
        a = _with_outlier_channel(h, cfg.outlier_scale) if widen else h
        if hook is not None:
            hook(k, a.data)
        if mode is not None:
            specs = mode.store.menu_specs(k, groups)
            a = ste_mixture_quantize(
                a,
                mode.layer_probs(k),
                specs,
                selected_bits=np.asarray(mode.bits[k]).reshape(-1),
                relaxation=mode.relaxation,
                key=f"layer/{k}",
            )
        if widen:
            a = take_slice(a, 0, cfg.hidden, axis=1)
        h = h + relu(matmul(a, p[f"hidden/{k}/w"]) + p[f"hidden/{k}/b"])
    return matmul(h, p["out/w"]) + p["out/b"]


# ── Sampling ──────────────────────────────────────────────────────────────────

def sample_noise(seed: int, sample_ids, steps: int, data_dim: int, name: str = "sample/noise") -> np.ndarray:
    """(B, T + 1, d): row 0 is x_T, row τ is the noise injected after reverse step τ."""
    return np.stack(
        [stream(seed, name, int(i)).standard_normal((steps + 1, data_dim)) for i in sample_ids]
    )


def sample(
    denoiser: Denoiser,
    schedule: DiffusionSchedule,
    z,
    seed: int,
    sample_ids=None,
    plans: Optional[np.ndarray] = None,
    store: Optional[QuantStore] = None,
    fixed_bits: Optional[int] = None,
    hook: Optional[Callable[[int, int, np.ndarray], None]] = None,
    noise_stream: str = "sample/noise",
) -> SamplerOutput:
    """
    Ancestral sampling from x_T ~ N(0, I) for every row of z.

    plans (B, K, T) gives the activation bits per reverse step; fixed_bits
    fills the plan with one bit-width (uniform-precision baseline). With
    neither, the full-precision network runs and the recorded plan is all 32.
    Each row draws its noise from its own stream (seed, sample id), so rows
    are independent of batch composition.
    """
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    batch, steps, k_layers = z.shape[0], schedule.steps, denoiser.n_layers
    sample_ids = np.arange(batch) if sample_ids is None else np.asarray(sample_ids)

    if fixed_bits is not None:
        plans = np.full((batch, k_layers, steps), int(fixed_bits), dtype=np.int64)
    quantized = plans is not None
    if quantized:
        if store is None:
            raise ContractViolation("quantized sampling needs a calibrated QuantStore")
        plans = np.asarray(plans, dtype=np.int64)
        if plans.shape != (batch, k_layers, steps):
            raise ContractViolation(f"plans must be {(batch, k_layers, steps)}, got {plans.shape}")
        allowed = set(store.menu.bits)
        if not set(np.unique(plans).tolist()) <= allowed:
            raise ContractViolation(f"plan entries outside the menu {store.menu.bits}")
    else:
        plans = np.full((batch, k_layers, steps), IDENTITY_BITS, dtype=np.int64)

    noise = sample_noise(seed, sample_ids, steps, denoiser.config.data_dim, noise_stream)
    x = noise[:, 0, :]
    for tau in range(1, steps + 1):
        t = steps - tau + 1
        mode = QuantizedMode(store=store, bits=plans[:, :, tau - 1].T) if quantized else None
        layer_hook = None
        if hook is not None:
            layer_hook = (lambda k, act, _tau=tau: hook(k, _tau, act))
        eps = denoise_forward(denoiser, x, t, z, mode=mode, hook=layer_hook)
        x = reverse_step(x, t, eps.data, schedule, noise[:, tau, :])
    return SamplerOutput(x0=x, plans=plans, sample_ids=sample_ids)


# ── Training / calibration ────────────────────────────────────────────────────

@dataclass
class DenoiserFit:
    losses: list = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        tail = self.losses[-50:]
        return float(np.mean(tail)) if tail else float("nan")


def train_denoiser(
    denoiser: Denoiser,
    x0: np.ndarray,
    z: np.ndarray,
    schedule: DiffusionSchedule,
    iterations: int,
    batch_size: int,
    lr: float,
    seed: int,
    log_every: int = 500,
) -> DenoiserFit:
    """ε-prediction MSE with Adam; mini-batches, timesteps and noise from seeded streams."""
    x0 = np.asarray(x0, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if x0.shape[0] == 0:
        raise ContractViolation("cannot train the denoiser on an empty dataset")
    state = AdamState(lr=lr)
    fit = DenoiserFit()

    for it in range(iterations):
        rng = stream(seed, "denoiser/batch", it)
        idx = rng.integers(0, x0.shape[0], size=batch_size)
        t = rng.integers(1, schedule.steps + 1, size=batch_size)
        eps = rng.standard_normal((batch_size, x0.shape[1]))
        x_t = forward_noise(x0[idx], t, eps, schedule)

        zero_grad(denoiser.params)
        with Tape() as tape:
            pred = denoise_forward(denoiser, x_t, t, z[idx])
            loss = reduce_mean(squared_error(pred, eps))
        backward(loss, tape)
        adam_step(denoiser.params, None, state)
        fit.losses.append(loss.item())

        if log_every and (it + 1) % log_every == 0:
            logger.info(f"[train_denoiser] iter {it + 1}/{iterations} loss={fit.final_loss:.5f}")

    zero_grad(denoiser.params)
    denoiser._quantized.clear()
    return fit


def collect_calibration(
    denoiser: Denoiser,
    schedule: DiffusionSchedule,
    z: np.ndarray,
    seed: int,
    group_size: int,
    batch_size: int = 64,
) -> CalibrationSet:
    """Full-precision sampling trajectories, hook activations pooled per (layer, reverse-step group)."""
    calibration = CalibrationSet()
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))

    def _record(layer: int, tau: int, act: np.ndarray) -> None:
        calibration.add(layer, (tau - 1) // group_size, act)

    for start in range(0, z.shape[0], batch_size):
        ids = np.arange(start, min(start + batch_size, z.shape[0]))
        sample(denoiser, schedule, z[ids], seed, sample_ids=ids, hook=_record, noise_stream="calibrate/noise")
    logger.info(f"[calibrate] collected {len(calibration.keys())} (layer, group) pools from {z.shape[0]} prompts")
    return calibration
