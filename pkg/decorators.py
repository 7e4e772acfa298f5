"""
decorators.py — QLIP Lab
Pipeline stage decorator and manifest helpers.
Import into tasks.py.
"""

from __future__ import annotations

import json
import logging
import os
import time
from functools import wraps
from pathlib import Path
from typing import Callable, Optional

from errors import ArtifactMismatchError, MissingPrerequisiteError
from models import StageManifest

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"

# stage name → decorated stage function, in definition order
STAGE_REGISTRY: dict[str, Callable] = {}


def pipeline_stage(name: str, requires: tuple[str, ...] = ()):
    """
    Decorator for a stage function `fn(ctx, out_dir) -> (artifacts, summary)`.

    The wrapped call returns the stage's StageManifest and:
      - raises MissingPrerequisiteError when an upstream manifest is absent
      - returns the cached manifest when the stage directory already holds one
        for the same stage hash (unless ctx.force)
      - writes manifest.json after the stage body succeeds
    `ctx` must provide stage_hash(stage), stage_dir(stage) and `force`.
    """
    def decorator(fn):
        @wraps(fn)
        def decorated_function(ctx) -> StageManifest:
            for upstream in requires:
                if read_manifest(ctx.stage_dir(upstream), ctx.stage_hash(upstream)) is None:
                    raise MissingPrerequisiteError(name, upstream)

            stage_hash = ctx.stage_hash(name)
            out_dir = ctx.stage_dir(name)
            cached = read_manifest(out_dir, stage_hash)
            if cached is not None and not ctx.force:
                logger.info(f"[{name}] cache hit {stage_hash}; skipping")
                return cached

            out_dir.mkdir(parents=True, exist_ok=True)
            logger.info(f"[{name}] starting (hash {stage_hash})")
            started = time.perf_counter()
            artifacts, summary = fn(ctx, out_dir)
            manifest = StageManifest(
                stage=name,
                stage_hash=stage_hash,
                upstream={u: ctx.stage_hash(u) for u in requires},
                artifacts=sorted(artifacts),
                summary=summary,
            )
            write_manifest(out_dir, manifest)
            logger.info(f"[{name}] finished in {time.perf_counter() - started:.1f}s → {out_dir}")
            return manifest

        decorated_function.stage_name = name
        decorated_function.requires = requires
        STAGE_REGISTRY[name] = decorated_function
        return decorated_function
    return decorator


def write_manifest(out_dir: Path, manifest: StageManifest) -> Path:
    path = Path(out_dir) / MANIFEST_NAME
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True, default=_json_default) + "\n")
    os.replace(tmp, path)
    return path


def read_manifest(out_dir: Path, expected_hash: str) -> Optional[StageManifest]:
    """None when the stage never completed; ArtifactMismatchError on a foreign hash."""
    path = Path(out_dir) / MANIFEST_NAME
    if not path.is_file():
        return None
    manifest = StageManifest.from_dict(json.loads(path.read_text()))
    if manifest.stage_hash != expected_hash:
        raise ArtifactMismatchError(
            f"{path} was written for hash {manifest.stage_hash}, expected {expected_hash}"
        )
    return manifest


def _json_default(value):
    # numpy scalars in stage summaries
    if hasattr(value, "item"):
        return value.item()
    raise TypeError(f"not JSON serialisable: {type(value).__name__}")
