"""
tasks.py — QLIP Lab
Pipeline stages and the runner that strings them together.

  train-denoiser → calibrate ─┐
                 → train-t2q ─┴→ train-q2b → sample → evaluate

Each stage writes into <cache_root>/<stage>/<stage hash>/. A stage hash covers
the config slice the stage reads plus the hashes of its upstream stages, so a
change to (say) q2b.lambda_bit re-runs train-q2b and everything after it while
the denoiser, calibration and T2Q are reused.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import pandas as pd

from config import ABLATION_AXES, RunConfig, cache_root, config_hash
from decorators import STAGE_REGISTRY, pipeline_stage, read_manifest
from engines.checkpoint import load_checkpoint, save_checkpoint
from engines.diffusion_engine import (
    Denoiser,
    DenoiserConfig,
    DiffusionSchedule,
    build_schedule,
    collect_calibration,
    sample,
    train_denoiser,
)
from engines.metrics_engine import (
    CostModel,
    batch_fab_sweep,
    bit_histogram,
    compute_fab,
    fab_by_group,
    mean_bitops,
    mmd_distance,
    t2q_bitops,
)
from engines.qlip_engine import (
    Q2BParams,
    T2QModel,
    merge_bit_plans,
    plans_for_qualities,
    predict_quality,
    train_q2b,
    train_t2q,
)
from engines.quality_oracle import QualityOracle, fit_quality_oracle, score_quality
from engines.quant_engine import QuantStore, build_quant_store
from engines.synth_data import ToyDataset, build_world, export_dataset_csv, generate_dataset, prompt_length_scores
from errors import ArtifactMismatchError, ConfigError, MissingPrerequisiteError, NumericFailure
from models import IDENTITY_BITS, MetricsReport, SamplerOutput

logger = logging.getLogger(__name__)

STAGES = ("train-denoiser", "calibrate", "train-t2q", "train-q2b", "sample", "evaluate")

STAGE_REQUIRES: dict[str, tuple[str, ...]] = {
    "train-denoiser": (),
    "calibrate":      ("train-denoiser",),
    "train-t2q":      ("train-denoiser",),
    "train-q2b":      ("calibrate", "train-t2q"),
    "sample":         ("train-q2b",),
    "evaluate":       ("sample", "train-t2q"),
}

SAMPLE_CHUNK = 256

DENOISER_FILE = "denoiser.qlpb"
QUANT_FILE = "quant_store.qlpb"
T2Q_FILE = "t2q.qlpb"
Q2B_FILE = "q2b.qlpb"
Q2B_SNAPSHOT_FILE = "q2b_last_good.qlpb"
SAMPLES_FILE = "samples.qlpb"
METRICS_CSV = "metrics.csv"
METRICS_JSON = "metrics.json"
HISTOGRAM_CSV = "bit_histogram.csv"
BITPLANS_CSV = "bitplans.csv"


# ── Context ───────────────────────────────────────────────────────────────────

class PipelineContext:
    """Config + artifact root for one pipeline run; resolves stage hashes and files."""

    def __init__(self, config: RunConfig, root: Optional[Path] = None, force: bool = False):
        self.config = config
        self.root = Path(root) if root is not None else cache_root(config)
        self.force = force
        self._hashes: dict[str, str] = {}

    def stage_slice(self, stage: str) -> dict:
        c = self.config.data
        if stage == "train-denoiser":
            return {k: c[k] for k in ("seed", "schedule", "model", "denoiser")}
        if stage == "calibrate":
            return {"calibration": c["calibration"], "group_size": self.config.group_size}
        if stage == "train-t2q":
            return {"t2q": c["t2q"]}
        if stage == "train-q2b":
            q2b = dict(c["q2b"], group_size=self.config.group_size, forced_steps=self.config.forced_steps)
            return {"q2b": q2b, "menu": c["menu"]}
        if stage == "sample":
            return {"sample": c["sample"]}
        if stage == "evaluate":
            return {"eval": c["eval"]}
        raise ConfigError(f"unknown stage '{stage}'")

    def stage_hash(self, stage: str) -> str:
        if stage not in self._hashes:
            self._hashes[stage] = config_hash({
                "stage": stage,
                "config": self.stage_slice(stage),
                "upstream": {u: self.stage_hash(u) for u in STAGE_REQUIRES[stage]},
            })
        return self._hashes[stage]

    def stage_dir(self, stage: str) -> Path:
        return self.root / stage / self.stage_hash(stage)

    # ── artifacts ────────────────────────────────────────────────────────────

    def save(self, stage: str, out_dir: Path, filename: str, records: dict) -> str:
        save_checkpoint(out_dir / filename, records, config_hash=self.stage_hash(stage))
        return filename

    def load(self, stage: str, filename: str) -> dict:
        path = self.stage_dir(stage) / filename
        if not path.is_file():
            raise MissingPrerequisiteError(f"load {filename}", stage)
        records, stamp = load_checkpoint(path)
        if stamp != self.stage_hash(stage):
            raise ArtifactMismatchError(f"{path} carries hash {stamp}, expected {self.stage_hash(stage)}")
        return records

    def manifest(self, stage: str):
        found = read_manifest(self.stage_dir(stage), self.stage_hash(stage))
        if found is None:
            raise MissingPrerequisiteError("read manifest", stage)
        return found

    # ── shared inputs ────────────────────────────────────────────────────────

    @property
    def world(self):
        model = self.config.section("model")
        return build_world(model["data_dim"], model["embed_dim"])

    def dataset(self, name: str, n: int) -> ToyDataset:
        return generate_dataset(n, self.config.seed, self.world, name=name)

    def load_denoiser(self) -> tuple[Denoiser, DiffusionSchedule]:
        records = self.load("train-denoiser", DENOISER_FILE)
        return Denoiser.from_records(records), DiffusionSchedule.from_records(records)

    def load_store(self) -> QuantStore:
        return QuantStore.from_records(self.load("calibrate", QUANT_FILE), menu=self.config.menu)

    def load_t2q(self) -> tuple[T2QModel, QualityOracle]:
        records = self.load("train-t2q", T2Q_FILE)
        return T2QModel.from_records(records), QualityOracle.from_records(records)


def _sample_in_chunks(denoiser, schedule, z, seed, plans=None, store=None, fixed_bits=None, noise_stream="sample/noise") -> SamplerOutput:
    """Sampling in fixed-size chunks; rows keep their sample id, so chunking never changes results."""
    outputs = []
    for start in range(0, z.shape[0], SAMPLE_CHUNK):
        ids = np.arange(start, min(start + SAMPLE_CHUNK, z.shape[0]))
        outputs.append(sample(
            denoiser, schedule, z[ids], seed,
            sample_ids=ids,
            plans=None if plans is None else plans[ids],
            store=store,
            fixed_bits=fixed_bits,
            noise_stream=noise_stream,
        ))
    return SamplerOutput(
        x0=np.concatenate([o.x0 for o in outputs]),
        plans=np.concatenate([o.plans for o in outputs]),
        sample_ids=np.concatenate([o.sample_ids for o in outputs]),
    )


def bit_criterion_scores(criterion: str, t2q: T2QModel, prompts: ToyDataset) -> np.ndarray:
    """Per-prompt score in [0, 1] that drives Q2B: predicted quality, or the prompt-length baseline."""
    if criterion == "prompt_length":
        return prompt_length_scores(prompts.prompts)
    return predict_quality(t2q, prompts.embeddings)


# ── Stages ────────────────────────────────────────────────────────────────────

@pipeline_stage("train-denoiser")
def stage_train_denoiser(ctx: PipelineContext, out_dir: Path):
    cfg = ctx.config
    sched, train = cfg.section("schedule"), cfg.section("denoiser")

    # ── Step 1: Training data from the prompt world ──────────────────────────
    data = ctx.dataset("train", train["n_train"])
    schedule = build_schedule(sched["steps"], sched["beta_start"], sched["beta_end"])

    # ── Step 2: ε-prediction training ────────────────────────────────────────
    denoiser = Denoiser.initialise(DenoiserConfig(**cfg.section("model")), cfg.seed)
    fit = train_denoiser(
        denoiser, data.x0, data.embeddings, schedule,
        iterations=train["iterations"],
        batch_size=train["batch_size"],
        lr=train["lr"],
        seed=cfg.seed,
    )

    records = {**denoiser.to_records(), **schedule.to_records(), **ctx.world.to_records()}
    artifacts = [ctx.save("train-denoiser", out_dir, DENOISER_FILE, records)]
    return artifacts, {"final_loss": fit.final_loss, "n_train": len(data), "iterations": train["iterations"]}


@pipeline_stage("calibrate", requires=STAGE_REQUIRES["calibrate"])
def stage_calibrate(ctx: PipelineContext, out_dir: Path):
    cfg = ctx.config
    denoiser, schedule = ctx.load_denoiser()
    prompts = ctx.dataset("calibration", cfg.section("calibration")["n_prompts"])

    calibration = collect_calibration(denoiser, schedule, prompts.embeddings, cfg.seed, cfg.group_size)
    store = build_quant_store(calibration, cfg.menu, schedule.steps, cfg.group_size)

    artifacts = [ctx.save("calibrate", out_dir, QUANT_FILE, store.to_records())]
    return artifacts, {"pools": len(store.ranges), "group_size": cfg.group_size, "n_prompts": len(prompts)}


@pipeline_stage("train-t2q", requires=STAGE_REQUIRES["train-t2q"])
def stage_train_t2q(ctx: PipelineContext, out_dir: Path):
    cfg = ctx.config
    t2q_cfg = cfg.section("t2q")
    denoiser, schedule = ctx.load_denoiser()

    # ── Step 1: Quality oracle on real data ──────────────────────────────────
    reference = ctx.dataset("oracle-reference", t2q_cfg["n_samples"])
    oracle = fit_quality_oracle(
        reference.x0, n_components=t2q_cfg["n_components"], seed=cfg.seed, kind=t2q_cfg["quality_metric"]
    )

    # ── Step 2: Label full-precision generations ─────────────────────────────
    # Each label is the mean score over draws_per_prompt independent noise streams.
    prompts = ctx.dataset("t2q", t2q_cfg["n_samples"])
    draws = t2q_cfg["draws_per_prompt"]
    scores, generated = [], None
    for d in range(draws):
        stream_name = "t2q/noise" if d == 0 else f"t2q/noise/{d}"
        out = _sample_in_chunks(denoiser, schedule, prompts.embeddings, cfg.seed, noise_stream=stream_name)
        if generated is None:
            generated = out
        scores.append(score_quality(oracle, out.x0))
    labels = np.mean(scores, axis=0)
    for prompt, label in zip(prompts.prompts, labels.tolist()):
        prompt.quality = label
    logger.info(f"[train_t2q] {len(prompts)} labels from {draws} draws each, mean quality {labels.mean():.3f}")

    # ── Step 3: Fit the predictor ────────────────────────────────────────────
    model = T2QModel.initialise(cfg.section("model")["embed_dim"], t2q_cfg["hidden"], cfg.seed)
    fit = train_t2q(
        model, prompts.embeddings, labels,
        epochs=t2q_cfg["epochs"],
        lr=t2q_cfg["lr"],
        batch_size=t2q_cfg["batch_size"],
        holdout=t2q_cfg["holdout"],
        seed=cfg.seed,
    )
    logger.info(f"[train_t2q] held-out SROCC={fit.srocc} PLCC={fit.plcc}")

    artifacts = [
        ctx.save("train-t2q", out_dir, T2Q_FILE, {**model.to_records(), **oracle.to_records()}),
        export_dataset_csv(ToyDataset(prompts.prompts, generated.x0), out_dir / "t2q_dataset.csv").name,
    ]
    (out_dir / "t2q_fit.json").write_text(json.dumps(fit.to_dict(), indent=2, sort_keys=True) + "\n")
    artifacts.append("t2q_fit.json")
    summary = {k: v for k, v in fit.to_dict().items() if k != "history"}
    return artifacts, summary


@pipeline_stage("train-q2b", requires=STAGE_REQUIRES["train-q2b"])
def stage_train_q2b(ctx: PipelineContext, out_dir: Path):
    cfg = ctx.config
    q2b_cfg = cfg.section("q2b")
    denoiser, schedule = ctx.load_denoiser()
    store = ctx.load_store()
    t2q, _ = ctx.load_t2q()

    prompts = ctx.dataset("q2b", q2b_cfg["n_prompts"])
    qualities = bit_criterion_scores(q2b_cfg["criterion"], t2q, prompts)
    params = Q2BParams.initialise(
        denoiser.n_layers, schedule.steps, cfg.group_size, cfg.forced_steps, cfg.menu, variant=q2b_cfg["variant"]
    )
    logger.info(
        f"[train_q2b] variant={params.variant} criterion={q2b_cfg['criterion']} menu={cfg.menu.label} "
        f"M={params.group_size} m={params.forced_steps} params={params.parameter_count}"
    )

    try:
        fit = train_q2b(
            params, denoiser, store, schedule, prompts.embeddings, qualities, prompts.x0,
            iterations=q2b_cfg["iterations"],
            lambda_bit=q2b_cfg["lambda_bit"],
            lr=q2b_cfg["lr"],
            batch_size=q2b_cfg["batch_size"],
            seed=cfg.seed,
        )
    except NumericFailure as exc:
        if exc.snapshot is not None:
            ctx.save("train-q2b", out_dir, Q2B_SNAPSHOT_FILE, exc.snapshot.to_records())
            logger.error(f"[train_q2b] last good parameters saved to {out_dir / Q2B_SNAPSHOT_FILE}")
        raise

    artifacts = [ctx.save("train-q2b", out_dir, Q2B_FILE, params.to_records())]
    return artifacts, {
        "final_loss": fit.final_loss,
        "parameter_count": params.parameter_count,
        "variant": params.variant,
        "criterion": q2b_cfg["criterion"],
    }


def sample_arms(menu) -> list[tuple[str, Optional[int]]]:
    """(arm name, fixed bits) pairs; None marks the fp and qlip arms."""
    arms = [("fp", None), ("qlip", None)]
    for bits in (menu.b_low, menu.b_med):
        name = f"uniform_{bits}"
        if all(name != a for a, _ in arms):
            arms.append((name, bits))
    return arms


@pipeline_stage("sample", requires=STAGE_REQUIRES["sample"])
def stage_sample(ctx: PipelineContext, out_dir: Path):
    cfg = ctx.config
    batch = cfg.section("sample")["batch"]
    denoiser, schedule = ctx.load_denoiser()
    store = ctx.load_store()
    t2q, _ = ctx.load_t2q()
    params = Q2BParams.from_records(ctx.load("train-q2b", Q2B_FILE))

    # ── Step 1: Prompts → predicted quality → bit plans ──────────────────────
    prompts = ctx.dataset("sample", cfg.section("sample")["n_samples"])
    z = prompts.embeddings
    criterion = cfg.section("q2b")["criterion"]
    qualities = bit_criterion_scores(criterion, t2q, prompts)
    plans = plans_for_qualities(qualities, params)
    summary = {
        "n_samples": len(prompts),
        "batch": batch,
        "seed": cfg.seed,
        "criterion": criterion,
        "bitplans": BITPLANS_CSV,
        "arms": [],
        "fab": {},
    }
    if batch > 1:
        fab_per_sample = compute_fab(plans)
        for start in range(0, plans.shape[0], batch):
            plans[start:start + batch] = merge_bit_plans(plans[start:start + batch])
        fab_merged = compute_fab(plans)
        summary.update(fab_per_sample=fab_per_sample, fab_merged=fab_merged)
        logger.info(
            f"[sample] batch {batch} merge lifts FAB {fab_per_sample:.3f} → {fab_merged:.3f} "
            f"(+{fab_merged - fab_per_sample:.3f} bits)"
        )

    # ── Step 2: One pass per arm, shared noise streams ───────────────────────
    records = {
        "samples/levels": prompts.levels.astype(np.int32),
        "samples/quality": qualities,
    }
    for arm, fixed_bits in sample_arms(cfg.menu):
        if arm == "fp":
            out = _sample_in_chunks(denoiser, schedule, z, cfg.seed)
        elif arm == "qlip":
            out = _sample_in_chunks(denoiser, schedule, z, cfg.seed, plans=plans, store=store)
        else:
            out = _sample_in_chunks(denoiser, schedule, z, cfg.seed, store=store, fixed_bits=fixed_bits)
        if not np.all(np.isfinite(out.x0)):
            raise NumericFailure(f"[sample] arm '{arm}' produced non-finite samples")
        records[f"samples/{arm}/x0"] = out.x0
        records[f"samples/{arm}/plans"] = out.plans.astype(np.int32)
        summary["arms"].append(arm)
        summary["fab"][arm] = compute_fab(out.plans)
        logger.info(f"[sample] arm {arm}: {out.n_samples} samples, FAB {summary['fab'][arm]:.3f}")

    # ── Step 3: Per-sample plans of the adaptive arm ─────────────────────────
    rows = []
    for i, plan in enumerate(plans):
        for layer in range(plan.shape[0]):
            row = {
                "sample_id": i,
                "prompt": prompts.prompts[i].text,
                "detail_level": int(prompts.levels[i]),
                "quality": float(qualities[i]),
                "layer": layer,
            }
            row.update({f"tau_{j + 1}": int(b) for j, b in enumerate(plan[layer])})
            rows.append(row)
    pd.DataFrame(rows).to_csv(out_dir / BITPLANS_CSV, index=False, float_format="%.10g")

    artifacts = [ctx.save("sample", out_dir, SAMPLES_FILE, records), BITPLANS_CSV]
    return artifacts, summary


@pipeline_stage("evaluate", requires=STAGE_REQUIRES["evaluate"])
def stage_evaluate(ctx: PipelineContext, out_dir: Path):
    cfg = ctx.config
    eval_cfg = cfg.section("eval")
    menu = cfg.menu
    denoiser, _ = ctx.load_denoiser()
    t2q, _ = ctx.load_t2q()
    t2q_summary = ctx.manifest("train-t2q").summary
    records = ctx.load("sample", SAMPLES_FILE)
    levels = records["samples/levels"]

    reference = ctx.dataset("eval-reference", eval_cfg["n_reference"]).x0
    bandwidth = eval_cfg["bandwidth"] or None
    quantized_cost = CostModel(denoiser.layer_macs(), weight_bits=menu.weight_bits, fp_macs=denoiser.fp_macs())
    fp_cost = CostModel(denoiser.layer_macs(), weight_bits=IDENTITY_BITS, fp_macs=denoiser.fp_macs())

    reports = []
    for arm, _ in sample_arms(menu):
        x0 = records[f"samples/{arm}/x0"]
        plans = records[f"samples/{arm}/plans"].astype(np.int64)
        is_qlip = arm == "qlip"
        predicted = is_qlip and cfg.section("q2b")["criterion"] == "t2q"
        reports.append(MetricsReport(
            arm=arm,
            n_samples=int(x0.shape[0]),
            fab=compute_fab(plans),
            bitops=mean_bitops(fp_cost if arm == "fp" else quantized_cost, plans),
            mmd=mmd_distance(x0, reference, bandwidth=bandwidth),
            fab_by_level=fab_by_group(plans, levels),
            batch_fab=batch_fab_sweep(plans, eval_cfg["batch_sweep"]),
            srocc=t2q_summary.get("srocc") if predicted else None,
            plcc=t2q_summary.get("plcc") if predicted else None,
            t2q_bitops=t2q_bitops(t2q.layer_shapes()) if predicted else None,
        ))
        logger.info(f"[evaluate] {arm}: FAB={reports[-1].fab:.3f} MMD²={reports[-1].mmd:.5f}")

    pd.DataFrame([r.to_row() for r in reports]).to_csv(out_dir / METRICS_CSV, index=False, float_format="%.10g")
    (out_dir / METRICS_JSON).write_text(
        json.dumps({"menu": menu.to_dict(), "reports": [r.to_dict() for r in reports]}, indent=2, sort_keys=True) + "\n"
    )

    qlip_plans = records["samples/qlip/plans"].astype(np.int64)
    hist = bit_histogram(qlip_plans, menu)
    frame = pd.DataFrame(hist, columns=[f"bits_{b}" for b in sorted(set(menu.bits))])
    frame.insert(0, "layer", np.arange(hist.shape[0]))
    frame.to_csv(out_dir / HISTOGRAM_CSV, index=False)

    qlip = reports[1]
    return [METRICS_CSV, METRICS_JSON, HISTOGRAM_CSV], {"fab": qlip.fab, "mmd": qlip.mmd, "bitops": qlip.bitops}


# ── Runner ────────────────────────────────────────────────────────────────────

def resolve_stages(stages: Optional[Iterable[str]]) -> list[str]:
    if stages is None:
        return list(STAGES)
    requested = [s.strip() for s in stages if s.strip()]
    unknown = [s for s in requested if s not in STAGES]
    if unknown:
        raise ConfigError(f"unknown stage(s) {unknown}; choose from {list(STAGES)}")
    if not requested:
        raise ConfigError("no stages requested")
    return [s for s in STAGES if s in requested]


def run_pipeline(
    config: RunConfig,
    stages: Optional[Sequence[str]] = None,
    force: bool = False,
    root: Optional[Path] = None,
) -> dict:
    """
    Runs the requested stages in pipeline order and returns {stage: StageManifest}.
    A stage whose upstream output is missing raises MissingPrerequisiteError.
    """
    ctx = PipelineContext(config, root=root, force=force)
    results = {}
    for stage in resolve_stages(stages):
        results[stage] = STAGE_REGISTRY[stage](ctx)
    return results


def evaluate_dir(config: RunConfig, root: Optional[Path] = None) -> Path:
    return PipelineContext(config, root=root).stage_dir("evaluate")


# ── Ablation ──────────────────────────────────────────────────────────────────

def _axis_overrides(axis: str, value) -> dict:
    if axis == "menu":
        b_low, b_med, b_high = value
        return {"menu.b_low": b_low, "menu.b_med": b_med, "menu.b_high": b_high}
    key = {
        "lambda_bit":     "q2b.lambda_bit",
        "group_size":     "q2b.group_size",
        "variant":        "q2b.variant",
        "criterion":      "q2b.criterion",
        "quality_metric": "t2q.quality_metric",
        "batch":          "sample.batch",
    }[axis]
    return {key: value}


def ablate(config: RunConfig, axis: str, force: bool = False, root: Optional[Path] = None) -> Path:
    """
    One full pipeline per value listed under ablate.<axis>, all on the same
    seed; upstream stages the values do not touch are shared through the cache.
    Writes ablation.csv (one row per value, adaptive arm) plus ablation.md and
    ablation.png next to it, and returns the CSV path.
    """
    from analytics import plot_ablation, write_ablation_summary

    if axis not in ABLATION_AXES:
        raise ConfigError(f"unknown ablation axis '{axis}'; choose from {list(ABLATION_AXES)}")
    values = config.section("ablate")[axis]
    if not values:
        raise ConfigError(f"ablate.{axis} lists no values")

    rows = []
    for value in values:
        run_config = config.with_overrides(_axis_overrides(axis, value))
        logger.info(f"[ablate] {axis}={value}")
        run_pipeline(run_config, STAGES, force=force, root=root)
        metrics = pd.read_csv(evaluate_dir(run_config, root) / METRICS_CSV)
        qlip = metrics[metrics["arm"] == "qlip"].iloc[0].to_dict()
        fp = metrics[metrics["arm"] == "fp"].iloc[0]
        row = {"axis": axis, "value": json.dumps(value), "stage_hash": PipelineContext(run_config, root).stage_hash("evaluate")}
        row.update({k: v for k, v in qlip.items() if k not in ("arm", "srocc", "plcc", "t2q_bitops")})
        row["mmd_fp"] = float(fp["mmd"])
        rows.append(row)

    sweep_root = Path(root) if root is not None else cache_root(config)
    out_dir = sweep_root / "ablate" / axis / config_hash({"axis": axis, "config": config.data})
    out_dir.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(rows)
    path = out_dir / "ablation.csv"
    frame.to_csv(path, index=False, float_format="%.10g")
    plot_ablation(frame, out_dir / "ablation.png")
    write_ablation_summary(frame, out_dir / "ablation.md")
    logger.info(f"[ablate] {len(rows)} runs → {path}")
    return path
