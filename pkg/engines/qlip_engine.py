"""
engines/qlip_engine.py — QLIP Lab
Prompt-adaptive bit allocation.

  T2Q   text-to-quality: z → q ∈ (0, 1), a three-layer MLP whose first layer is frozen
  Q2B   quality-to-bits: (q, reverse step τ) → per-layer probabilities over
        (b_low, b_med, b_high), then argmax bit selection

Q2B probability construction, per quantizable layer k:

    p_q = σ((q − 0.5)·s_k + o_k)          forced to 1 for τ ≤ m
    p_m = σ(u_m[k, g(τ)])   p_h = σ(u_h[k, g(τ)])   g(τ) = (τ − 1) // M

    p_low  = (1 − p_q)(1 − p_m)
    p_med  = (1 − p_q)·p_m + p_q·(1 − p_h)
    p_high = p_q·p_h

Ablation variants:
    q_only    p_low = 1 − p_q, p_med = 0, p_high = p_q
    q_plus_h  p_m ≡ 1
    q_plus_m  p_h ≡ 1

Training minimises  mean((ε_full − ε_quant)²) + λ·(b_high·Σ_k p_high + b_med·Σ_k p_med)
with the straight-through mixture node carrying gradients into the probabilities.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from engines.autograd import (
    AdamState,
    DiffTensor,
    Tape,
    adam_step,
    as_tensor,
    backward,
    matmul,
    parameter,
    reduce_mean,
    reduce_sum,
    relu,
    scalar_affine,
    sigmoid,
    squared_error,
    take_slice,
    zero_grad,
)
from engines.diffusion_engine import (
    Denoiser,
    DiffusionSchedule,
    QuantizedMode,
    denoise_forward,
    forward_noise,
)
from engines.metrics_engine import rank_correlation, stack_plans
from engines.quant_engine import MixtureRelaxation, QuantStore
from engines.rng import stream
from errors import ContractViolation, NumericFailure
from models import IDENTITY_BITS, BitMenu

logger = logging.getLogger(__name__)

VARIANTS = ("full", "q_only", "q_plus_h", "q_plus_m")
DEFAULT_SLOPE = 4.0


# ── T2Q ───────────────────────────────────────────────────────────────────────

@dataclass
class T2QModel:
    params: dict

    @classmethod
    def initialise(cls, embed_dim: int, hidden: int, seed: int) -> "T2QModel":
        rng = stream(seed, "t2q/init")

        def dense(fan_in, fan_out):
            return rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)

        return cls({
            "layer1/w": DiffTensor(dense(embed_dim, embed_dim), name="layer1/w"),
            "layer1/b": DiffTensor(np.zeros((1, embed_dim)), name="layer1/b"),
            "layer2/w": parameter(dense(embed_dim, hidden), "layer2/w"),
            "layer2/b": parameter(np.zeros((1, hidden)), "layer2/b"),
            "layer3/w": parameter(dense(hidden, 1) * 0.1, "layer3/w"),
            "layer3/b": parameter(np.zeros((1, 1)), "layer3/b"),
        })

    @property
    def embed_dim(self) -> int:
        return self.params["layer1/w"].shape[0]

    def trainable(self) -> dict:
        return {name: p for name, p in self.params.items() if not name.startswith("layer1/")}

    def layer_shapes(self) -> list:
        return [self.params[f"layer{i}/w"].shape for i in (1, 2, 3)]

    def to_records(self) -> dict:
        return {f"t2q/{name}": p.data for name, p in self.params.items()}

    @classmethod
    def from_records(cls, records: dict) -> "T2QModel":
        params = {}
        for full_name, value in records.items():
            if not full_name.startswith("t2q/"):
                continue
            name = full_name[len("t2q/"):]
            frozen = name.startswith("layer1/")
            params[name] = DiffTensor(value, requires_grad=not frozen, name=name)
        return cls(params)


def t2q_forward(model: T2QModel, z) -> DiffTensor:
    """(B, C) embeddings → (B, 1) quality in (0, 1)."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if z.shape[1] != model.embed_dim:
        raise ContractViolation(f"T2Q expects embeddings of length {model.embed_dim}, got {z.shape[1]}")
    p = model.params
    h = relu(matmul(z, p["layer1/w"]) + p["layer1/b"])
    h = relu(matmul(h, p["layer2/w"]) + p["layer2/b"])
    return sigmoid(matmul(h, p["layer3/w"]) + p["layer3/b"])


def predict_quality(model: T2QModel, z) -> np.ndarray:
    return t2q_forward(model, z).data.reshape(-1)


@dataclass
class T2QFit:
    train_loss: float
    val_loss: Optional[float]
    srocc: Optional[float]
    plcc: Optional[float]
    n_train: int
    n_val: int
    history: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "train_loss": self.train_loss,
            "val_loss":   self.val_loss,
            "srocc":      self.srocc,
            "plcc":       self.plcc,
            "n_train":    self.n_train,
            "n_val":      self.n_val,
            "history":    self.history,
        }


def _t2q_loss(model: T2QModel, z: np.ndarray, labels: np.ndarray) -> DiffTensor:
    return reduce_mean(squared_error(t2q_forward(model, z), labels.reshape(-1, 1)))


def train_t2q(
    model: T2QModel,
    z,
    labels,
    epochs: int = 3,
    lr: float = 1e-3,
    batch_size: int = 32,
    holdout: float = 0.2,
    seed: int = 0,
) -> T2QFit:
    """Adam on layers 2–3 against mean (q̄ − φ(z))²; layer 1 stays frozen."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.float64).reshape(-1)
    n = labels.shape[0]
    if n == 0:
        raise ContractViolation("T2Q dataset is empty")
    if z.shape[0] != n:
        raise ContractViolation(f"{z.shape[0]} embeddings for {n} labels")

    order = stream(seed, "t2q/split").permutation(n)
    n_val = int(round(holdout * n)) if n > 1 else 0
    val_idx, train_idx = order[:n_val], order[n_val:]
    trainable = model.trainable()
    state = AdamState(lr=lr)
    history = []

    for epoch in range(epochs):
        perm = train_idx[stream(seed, "t2q/shuffle", epoch).permutation(train_idx.shape[0])]
        for start in range(0, perm.shape[0], batch_size):
            batch = perm[start:start + batch_size]
            zero_grad(trainable)
            with Tape() as tape:
                loss = _t2q_loss(model, z[batch], labels[batch])
            backward(loss, tape)
            adam_step(trainable, None, state)
        epoch_loss = _t2q_loss(model, z[train_idx], labels[train_idx]).item()
        history.append(epoch_loss)
        logger.info(f"[train_t2q] epoch {epoch + 1}/{epochs} train_loss={epoch_loss:.5f}")
    zero_grad(trainable)

    train_loss = _t2q_loss(model, z[train_idx], labels[train_idx]).item()
    val_loss = srocc = plcc = None
    if n_val:
        val_loss = _t2q_loss(model, z[val_idx], labels[val_idx]).item()
        pred = predict_quality(model, z[val_idx])
        if n_val >= 3 and np.ptp(pred) > 0 and np.ptp(labels[val_idx]) > 0:
            srocc, plcc = rank_correlation(pred, labels[val_idx])
        else:
            logger.warning("[train_t2q] held-out split too small or constant; skipping SROCC/PLCC")
    return T2QFit(train_loss, val_loss, srocc, plcc, int(train_idx.shape[0]), n_val, history)


# ── Q2B parameters ────────────────────────────────────────────────────────────

@dataclass
class Q2BParams:
    s: DiffTensor
    o: DiffTensor
    u_m: DiffTensor
    u_h: DiffTensor
    menu: BitMenu
    steps: int
    group_size: int
    forced_steps: int
    variant: str = "full"
    _clamp_warned: bool = field(default=False, repr=False, compare=False)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ContractViolation(f"unknown Q2B variant '{self.variant}', expected one of {VARIANTS}")
        if self.group_size < 1:
            raise ContractViolation(f"group size must be at least 1, got {self.group_size}")
        if not 0 <= self.forced_steps <= self.steps:
            raise ContractViolation(f"forced steps must lie in [0, {self.steps}], got {self.forced_steps}")
        if self.u_m.shape != (self.n_layers, self.n_groups) or self.u_h.shape != self.u_m.shape:
            raise ContractViolation(
                f"u_m / u_h must be {(self.n_layers, self.n_groups)}, got {self.u_m.shape} / {self.u_h.shape}"
            )

    @classmethod
    def initialise(
        cls,
        n_layers: int,
        steps: int,
        group_size: int,
        forced_steps: int,
        menu: BitMenu,
        variant: str = "full",
        slope: float = DEFAULT_SLOPE,
    ) -> "Q2BParams":
        groups = -(-steps // group_size)
        return cls(
            s=parameter(np.full(n_layers, slope), "s"),
            o=parameter(np.zeros(n_layers), "o"),
            u_m=parameter(np.zeros((n_layers, groups)), "u_m"),
            u_h=parameter(np.zeros((n_layers, groups)), "u_h"),
            menu=menu,
            steps=steps,
            group_size=group_size,
            forced_steps=forced_steps,
            variant=variant,
        )

    @property
    def n_layers(self) -> int:
        return int(self.s.shape[0])

    @property
    def n_groups(self) -> int:
        return -(-self.steps // self.group_size)

    @property
    def parameter_count(self) -> int:
        return sum(p.size for p in self.trainable().values())

    def trainable(self) -> dict:
        return {"s": self.s, "o": self.o, "u_m": self.u_m, "u_h": self.u_h}

    def group_of(self, tau):
        return (np.asarray(tau) - 1) // self.group_size

    def copy(self) -> "Q2BParams":
        return Q2BParams(
            s=parameter(self.s.data.copy(), "s"),
            o=parameter(self.o.data.copy(), "o"),
            u_m=parameter(self.u_m.data.copy(), "u_m"),
            u_h=parameter(self.u_h.data.copy(), "u_h"),
            menu=self.menu,
            steps=self.steps,
            group_size=self.group_size,
            forced_steps=self.forced_steps,
            variant=self.variant,
        )

    def to_records(self) -> dict:
        meta = [
            self.steps, self.group_size, self.forced_steps, VARIANTS.index(self.variant),
            *self.menu.bits, self.menu.weight_bits,
        ]
        return {
            "q2b/meta": np.array(meta, dtype=np.int32),
            "q2b/s": self.s.data,
            "q2b/o": self.o.data,
            "q2b/u_m": self.u_m.data,
            "q2b/u_h": self.u_h.data,
        }

    @classmethod
    def from_records(cls, records: dict) -> "Q2BParams":
        meta = [int(v) for v in records["q2b/meta"]]
        return cls(
            s=parameter(records["q2b/s"], "s"),
            o=parameter(records["q2b/o"], "o"),
            u_m=parameter(records["q2b/u_m"], "u_m"),
            u_h=parameter(records["q2b/u_h"], "u_h"),
            menu=BitMenu(meta[4], meta[5], meta[6], weight_bits=meta[7]),
            steps=meta[0],
            group_size=meta[1],
            forced_steps=meta[2],
            variant=VARIANTS[meta[3]],
        )


@dataclass
class BitProbabilities:
    p_low: np.ndarray
    p_med: np.ndarray
    p_high: np.ndarray

    def stacked(self) -> np.ndarray:
        return np.stack([self.p_low, self.p_med, self.p_high], axis=-1)


# ── Q2B probabilities and bit selection ───────────────────────────────────────

def _complement(p: DiffTensor) -> DiffTensor:
    return scalar_affine(p, -1.0, 1.0)


def q2b_probs_tensor(q, taus, params: Q2BParams) -> tuple:
    """
    Batched, differentiable probabilities. q and taus are (B,) (either may be a
    scalar); returns (p_low, p_med, p_high), each (B, K).
    """
    q = np.atleast_1d(np.asarray(q, dtype=np.float64))
    taus = np.atleast_1d(np.asarray(taus, dtype=np.int64))
    q, taus = np.broadcast_arrays(q, taus)
    if np.any(taus < 1) or np.any(taus > params.steps):
        raise ContractViolation(f"reverse step outside [1, {params.steps}]")
    if np.any((q < 0.0) | (q > 1.0)):
        if not params._clamp_warned:
            logger.warning(f"[q2b] quality outside [0, 1] (min {q.min():.4g}, max {q.max():.4g}); clamping")
            params._clamp_warned = True
        q = np.clip(q, 0.0, 1.0)

    batch, k_layers = q.shape[0], params.n_layers
    centered = DiffTensor((q - 0.5).reshape(-1, 1))
    p_q = sigmoid(centered * params.s + params.o)
    forced = (taus <= params.forced_steps).astype(np.float64).reshape(-1, 1)
    if forced.any():
        p_q = p_q * (1.0 - forced) + forced

    if params.variant == "q_only":
        return _complement(p_q), DiffTensor(np.zeros((batch, k_layers))), p_q

    onehot = np.zeros((batch, params.n_groups))
    onehot[np.arange(batch), params.group_of(taus)] = 1.0
    ones = DiffTensor(np.ones((batch, k_layers)))
    p_m = ones if params.variant == "q_plus_h" else sigmoid(matmul(onehot, params.u_m, transpose_b=True))
    p_h = ones if params.variant == "q_plus_m" else sigmoid(matmul(onehot, params.u_h, transpose_b=True))

    not_q = _complement(p_q)
    p_low = not_q * _complement(p_m)
    p_med = not_q * p_m + p_q * _complement(p_h)
    p_high = p_q * p_h
    return p_low, p_med, p_high


def q2b_probs(q: float, tau: int, params: Q2BParams) -> BitProbabilities:
    """Probabilities for one prompt quality at one reverse step, each (K,)."""
    p_low, p_med, p_high = q2b_probs_tensor(q, tau, params)
    return BitProbabilities(p_low.data[0], p_med.data[0], p_high.data[0])


def select_bits(probs, menu: BitMenu) -> np.ndarray:
    """Per-layer argmax over (low, med, high); ties go to the lowest bit-width."""
    if isinstance(probs, BitProbabilities):
        stacked = probs.stacked()
    else:
        stacked = np.stack([np.asarray(p, dtype=np.float64) for p in probs], axis=-1)
    return np.asarray(menu.bits, dtype=np.int64)[np.argmax(stacked, axis=-1)]


def plan_for_quality(q: float, params: Q2BParams) -> np.ndarray:
    """(K, T) bit plan for one prompt; column j is reverse step τ = j + 1."""
    taus = np.arange(1, params.steps + 1)
    probs = q2b_probs_tensor(np.full(params.steps, q), taus, params)
    return select_bits(tuple(p.data for p in probs), params.menu).T


def plans_for_qualities(qualities, params: Q2BParams) -> np.ndarray:
    return np.stack([plan_for_quality(float(q), params) for q in np.asarray(qualities).reshape(-1)])


def merge_bit_plans(plans) -> np.ndarray:
    """One plan for a whole batch: the elementwise maximum."""
    return stack_plans(plans).max(axis=0)


# ── QLIP objective ────────────────────────────────────────────────────────────

def _layer_total(p) -> DiffTensor:
    """Σ_k p(k), averaged over the batch when p is (B, K)."""
    p = as_tensor(p)
    if p.data.ndim == 1:
        return reduce_sum(p)
    return reduce_mean(reduce_sum(p, axis=1))


def qlip_loss(eps_full, eps_quant, probs, menu: BitMenu, lambda_bit: float) -> DiffTensor:
    _, p_med, p_high = probs
    mse = reduce_mean(squared_error(eps_full, eps_quant))
    bit_cost = scalar_affine(_layer_total(p_high), float(menu.b_high)) + scalar_affine(
        _layer_total(p_med), float(menu.b_med)
    )
    return mse + scalar_affine(bit_cost, float(lambda_bit))


def q2b_objective(
    params: Q2BParams,
    denoiser: Denoiser,
    store: QuantStore,
    x_t,
    t,
    z,
    q,
    lambda_bit: float,
    relaxation: Optional[MixtureRelaxation] = None,
    eps_full: Optional[np.ndarray] = None,
):
    """
    QLIP loss for one batch. Both branches see the same x_t. Returns the loss
    and the (p_low, p_med, p_high) tensors it was computed from.
    """
    if tuple(store.menu.bits) != tuple(params.menu.bits):
        raise ContractViolation(f"quantizer menu {store.menu.bits} differs from Q2B menu {params.menu.bits}")
    x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    t = np.broadcast_to(np.asarray(t, dtype=np.int64), (x_t.shape[0],))
    taus = params.steps - t + 1

    probs = q2b_probs_tensor(q, taus, params)
    bits = select_bits(tuple(p.data for p in probs), params.menu)
    layer_probs = [
        tuple(take_slice(p, k, k + 1, axis=1) for p in probs) for k in range(params.n_layers)
    ]
    mode = QuantizedMode(store=store, bits=bits.T, probs=layer_probs, relaxation=relaxation)
    eps_quant = denoise_forward(denoiser, x_t, t, z, mode=mode)
    if eps_full is None:
        eps_full = denoise_forward(denoiser.quantized(IDENTITY_BITS), x_t, t, z).data
    return qlip_loss(eps_full, eps_quant, probs, params.menu, lambda_bit), probs


def q2b_relaxed_objective(
    params: Q2BParams,
    denoiser: Denoiser,
    store: QuantStore,
    x_t,
    t,
    z,
    q,
    lambda_bit: float,
    relaxation: MixtureRelaxation,
) -> DiffTensor:
    """
    Σ_i p_i·Q_i(a) at every hook with rounding residuals frozen in `relaxation`:
    a smooth function whose exact gradient is what the STE backward reports.
    """
    loss, _ = q2b_objective(params, denoiser, store, x_t, t, z, q, lambda_bit, relaxation=relaxation)
    return loss


# ── Q2B training ──────────────────────────────────────────────────────────────

@dataclass
class Q2BFit:
    losses: list = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        tail = self.losses[-50:]
        return float(np.mean(tail)) if tail else float("nan")


def train_q2b(
    params: Q2BParams,
    denoiser: Denoiser,
    store: QuantStore,
    schedule: DiffusionSchedule,
    z,
    qualities,
    x0,
    iterations: int = 5000,
    lambda_bit: float = 1.0,
    lr: float = 0.01,
    batch_size: int = 8,
    seed: int = 0,
    log_every: int = 500,
) -> Q2BFit:
    """
    Each iteration draws calibration prompts (z, q from the frozen T2Q, x_0),
    t uniform on [1, T] and ε, and takes one Adam step on {s, o, u_m, u_h}.
    On a non-finite loss or gradient, NumericFailure carries the last good
    parameters as `snapshot`.
    """
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    qualities = np.asarray(qualities, dtype=np.float64).reshape(-1)
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    n = z.shape[0]
    if n == 0 or qualities.shape[0] != n or x0.shape[0] != n:
        raise ContractViolation(f"calibration prompts, qualities and x_0 must align, got {n}/{qualities.shape[0]}/{x0.shape[0]}")

    reference_net = denoiser.quantized(IDENTITY_BITS)
    trainable = params.trainable()
    state = AdamState(lr=lr)
    fit = Q2BFit()
    last_good = params.copy()

    for it in range(iterations):
        rng = stream(seed, "q2b/batch", it)
        idx = rng.integers(0, n, size=batch_size)
        t = rng.integers(1, schedule.steps + 1, size=batch_size)
        eps = rng.standard_normal((batch_size, x0.shape[1]))
        x_t = forward_noise(x0[idx], t, eps, schedule)
        eps_full = denoise_forward(reference_net, x_t, t, z[idx]).data

        zero_grad(trainable)
        try:
            with Tape() as tape:
                loss, _ = q2b_objective(
                    params, denoiser, store, x_t, t, z[idx], qualities[idx], lambda_bit, eps_full=eps_full
                )
            backward(loss, tape)
            adam_step(trainable, None, state)
            if not all(np.all(np.isfinite(p.data)) for p in trainable.values()):
                raise NumericFailure("Q2B parameters became non-finite")
        except NumericFailure as exc:
            raise NumericFailure(f"train_q2b diverged at iteration {it + 1}: {exc}", snapshot=last_good) from exc

        fit.losses.append(loss.item())
        last_good = params.copy()
        if log_every and (it + 1) % log_every == 0:
            logger.info(f"[train_q2b] iter {it + 1}/{iterations} loss={fit.final_loss:.5f}")

    zero_grad(trainable)
    return fit
