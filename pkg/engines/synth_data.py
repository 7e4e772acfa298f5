"""
engines/synth_data.py — QLIP Lab
Synthetic prompt language and prompt-conditioned toy data.

A prompt is one class keyword followed by 0–3 distinct detail modifiers.
Its embedding z is the mean of the tokens' rows in a fixed seeded table
(the frozen text encoder). The data x_0 for a prompt of class c and detail
level L is

    x_0 = center(c) + Σ_{l=1..L} g(c, l) + σ₀·ρ^L·ε

so richer prompts pin the sample down more tightly. The law depends only on
(class, level); which modifier words were drawn changes z, not x_0.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from engines.rng import stream
from errors import ContractViolation
from models import PromptSample

logger = logging.getLogger(__name__)

CLASS_WORDS = ("ring", "spiral", "grid", "cluster", "wave", "star", "cross", "blob")

MODIFIER_WORDS = (
    "red", "blue", "green", "golden", "silver", "pale", "dark", "bright",
    "small", "large", "tiny", "huge", "thin", "wide", "tall", "flat",
    "smooth", "rough", "glossy", "matte", "fuzzy", "sharp", "soft", "crisp",
    "old", "new", "ancient", "modern", "rusty", "polished", "cracked", "woven",
    "striped", "dotted", "checkered", "plain", "ornate", "simple", "twisted", "curved",
    "glowing", "shadowed", "misty", "sunlit", "frozen", "burning", "wet", "dusty",
    "calm", "busy", "lonely", "crowded", "quiet", "vivid", "faded", "hidden",
)

VOCABULARY = CLASS_WORDS + MODIFIER_WORDS
MAX_DETAIL = 3
N_LEVELS = MAX_DETAIL + 1

# The encoder and the class geometry never change between runs.
WORLD_SEED = 20240917
CENTER_RADIUS = 4.0
FINE_SCALE = 0.3
BASE_NOISE = 0.8
NOISE_DECAY = 0.5


@dataclass(frozen=True)
class PromptWorld:
    data_dim: int
    embed_dim: int
    embedding_table: np.ndarray
    centers: np.ndarray
    fine_terms: np.ndarray

    @property
    def n_classes(self) -> int:
        return len(CLASS_WORDS)

    def conditional_mean(self, class_id: int, level: int) -> np.ndarray:
        return self.centers[class_id] + self.fine_terms[class_id, :level].sum(axis=0)

    @staticmethod
    def conditional_std(level: int) -> float:
        return BASE_NOISE * NOISE_DECAY ** level

    def to_records(self) -> dict:
        return {
            "synth/vocabulary": np.array([ord(c) for c in "\n".join(VOCABULARY)], dtype=np.int32),
            "synth/embedding_table": self.embedding_table,
        }


@lru_cache(maxsize=8)
def build_world(data_dim: int = 4, embed_dim: int = 64) -> PromptWorld:
    rng = stream(WORLD_SEED, f"synth/world/{data_dim}/{embed_dim}")
    table = rng.standard_normal((len(VOCABULARY), embed_dim))

    centers = rng.standard_normal((len(CLASS_WORDS), data_dim))
    centers *= CENTER_RADIUS / np.linalg.norm(centers, axis=1, keepdims=True)

    fine = rng.standard_normal((len(CLASS_WORDS), MAX_DETAIL, data_dim))
    fine *= FINE_SCALE / np.linalg.norm(fine, axis=2, keepdims=True)
    return PromptWorld(data_dim, embed_dim, table, centers, fine)


_TOKEN_INDEX = {token: i for i, token in enumerate(VOCABULARY)}


def encode_prompt(tokens: Sequence[str], world: PromptWorld) -> np.ndarray:
    """Mean of the tokens' embedding rows."""
    if not tokens:
        raise ContractViolation("cannot encode an empty prompt")
    unknown = [t for t in tokens if t not in _TOKEN_INDEX]
    if unknown:
        raise ContractViolation(f"unknown prompt tokens: {unknown}")
    rows = world.embedding_table[[_TOKEN_INDEX[t] for t in tokens]]
    return rows.mean(axis=0)


def detail_level(tokens: Sequence[str]) -> int:
    return min(sum(1 for t in tokens if t in MODIFIER_WORDS), MAX_DETAIL)


# ── Dataset ───────────────────────────────────────────────────────────────────

@dataclass
class ToyDataset:
    prompts: list
    x0: np.ndarray

    def __len__(self) -> int:
        return len(self.prompts)

    @property
    def embeddings(self) -> np.ndarray:
        return np.stack([p.embedding for p in self.prompts])

    @property
    def levels(self) -> np.ndarray:
        return np.array([p.detail_level for p in self.prompts], dtype=np.int64)

    @property
    def class_ids(self) -> np.ndarray:
        return np.array([p.class_id for p in self.prompts], dtype=np.int64)

    def subset(self, index) -> "ToyDataset":
        index = np.asarray(index)
        return ToyDataset([self.prompts[i] for i in index], self.x0[index])


def generate_dataset(n: int, seed: int, world: PromptWorld, name: str = "dataset") -> ToyDataset:
    """
    n prompts with detail levels balanced across 0..3 (counts differ by at most
    one), uniform classes, and one x_0 draw per prompt.
    """
    if n < 1:
        raise ContractViolation(f"dataset size must be positive, got {n}")
    rng = stream(seed, f"synth/{name}")
    levels = rng.permutation(np.resize(np.arange(N_LEVELS), n))
    classes = rng.integers(0, world.n_classes, size=n)

    prompts, rows = [], []
    for level, class_id in zip(levels.tolist(), classes.tolist()):
        picks = rng.choice(len(MODIFIER_WORDS), size=level, replace=False)
        tokens = (CLASS_WORDS[class_id], *[MODIFIER_WORDS[j] for j in sorted(picks)])
        prompts.append(PromptSample(tokens, level, class_id, encode_prompt(tokens, world)))
        noise = rng.standard_normal(world.data_dim)
        rows.append(world.conditional_mean(class_id, level) + world.conditional_std(level) * noise)

    logger.debug(f"[synth] generated {n} samples ({name}, seed {seed})")
    return ToyDataset(prompts, np.stack(rows))


def export_dataset_csv(dataset: ToyDataset, path, qualities=None) -> Path:
    """One row per sample: prompt, level, class, x_0 components, quality label."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame([p.to_dict() for p in dataset.prompts])
    for j in range(dataset.x0.shape[1]):
        frame[f"x{j}"] = dataset.x0[:, j]
    if qualities is not None:
        frame["quality"] = np.asarray(qualities, dtype=np.float64)
    frame.to_csv(path, index=False, float_format="%.10g")
    return path


def prompt_length_scores(prompts: Sequence[PromptSample]) -> np.ndarray:
    """Token count mapped onto [0, 1]: a bare class word is 0, MAX_DETAIL modifiers is 1."""
    lengths = np.array([len(p.tokens) for p in prompts], dtype=np.float64)
    return np.clip((lengths - 1.0) / MAX_DETAIL, 0.0, 1.0)
