"""Run configuration: JSON file with strict keys and a stable content hash."""

from __future__ import annotations

import copy
import hashlib
import json

from .errors import InvalidArgumentError

DEFAULT_CONFIG: dict = {
    "dataset": {
        "n_identities": 8,
        "n_expressions": 4,
        "n_views": 2,
        "resolution": 32,
        "seed": 0,
    },
    "model": {
        "input_res": 32,
        "token_patch": 4,
        "width": 64,
        "depth_low": 3,
        "depth_fuse": 2,
        "heads": 4,
        "plane_res": 32,
        "plane_channels": 16,
        "insert_positions": [0, 2],
        "exp_width": 64,
        "exp_depth": 4,
        "n_tokens": 64,
        "seed": 0,
    },
    "augment": {
        "color_patches": [1, 3],
        "masks": [0, 2],
        "area_range": [0.05, 0.20],
    },
    "lift": {
        "steps": 600,
        "batch_size": 4,
        "lr": 1e-3,
        "seed": 0,
        "samples_per_ray": 24,
        "render_resolution": 32,
    },
    "neutralizer": {
        "steps": 1200,
        "batch_size": 8,
        "lr": 1e-3,
        "seed": 0,
        "norm": "l1",
    },
    "embedder": {
        "steps": 600,
        "batch_size": 16,
        "lr": 1e-3,
        "seed": 0,
    },
    "stage1": {
        "steps": 300,
        "batch_size": 4,
        "lr": 1e-4,
        "seed": 0,
        "render_resolution": 32,
        "samples_per_ray": 24,
        "lambda_neu": 0.01,
    },
    "stage2": {
        "steps": 200,
        "batch_size": 4,
        "lr": 1e-4,
        "seed": 0,
        "render_resolution": 64,
        "samples_per_ray": 24,
        "patch_size": 44,
        "eye_loss": True,
        "lift_finetune_steps": 50,
        "n_stage2_records": 256,
    },
    "stage3": {
        "steps": 150,
        "batch_size": 4,
        "lr": 1e-4,
        "seed": 0,
        "render_resolution": 64,
        "samples_per_ray": 24,
        "patch_size": 44,
        "eye_loss": False,
        "lambda_gan": 0.05,
    },
    "superres": {
        "n_pairs": 96,
        "steps": 300,
        "batch_size": 4,
        "lr": 2e-3,
        "seed": 0,
    },
    "fewshot": {
        "steps": 60,
        "lr": 3e-4,
        "seed": 0,
        "samples_per_ray": 24,
    },
    "eval": {
        "max_pairs": 64,
        "probe_scenes": 600,
        "seed": 0,
    },
}


def _merge_strict(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise InvalidArgumentError(f"unknown config key: {here}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise InvalidArgumentError(f"config key {here} must be a table")
            out[key] = _merge_strict(base[key], val, here)
        else:
            out[key] = val
    return out


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Defaults, overlaid with a JSON file and then explicit overrides.
    Unknown keys are rejected at any depth."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        with open(path) as f:
            try:
                user = json.load(f)
            except json.JSONDecodeError as e:
                raise InvalidArgumentError(f"config is not valid JSON: {e}") from e
        cfg = _merge_strict(cfg, user)
    if overrides:
        cfg = _merge_strict(cfg, overrides)
    return cfg


def config_hash(cfg: dict) -> str:
    """Stable hash: changes iff the content changes."""
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]
