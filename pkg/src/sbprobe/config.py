"""Structured experiment configuration (YAML or JSON).

A config file is merged over :data:`DEFAULT_CONFIG` and validated against
``schemas/config.schema.json``. Every key is optional. The defaults describe
the desk-scale synthetic benchmark::

    seed: 0
    dataset:   {manifest: path/to/manifest.csv, classes: [f, m], positive_class: m}
    splits:    {n_test_splits: 4, train_fraction: 0.5, min_test_images: 2, nonmated_cap: 50000}
    classifier: {hidden: 0, epochs: 300, lr: 0.01, l2: 1.0e-4, weights: null}
    scorer:    null            # optional unseen classifier, same keys as classifier
    verifier:  {embedding_dim: 32, whiten: true, weights: null}
    schedule:  {square_size: 2, spacing: 6, stride: 1, squares_per_side: null, traversal: null}
    backends:
      denoiser:       {kind: median, radius: 1}
      inpainter:      {kind: harmonic}
      autoencoder:    {kind: dense_autoencoder, latent_dim: 64, epochs: 300}
      face_parser:    {kind: threshold_parser, threshold: 0.12}
      super_resolver: {kind: bicubic}
    super_resolution: {factor: 3.6, low_res: null}
    privacy_models:   {fgsm: {kind: adversarial_misclassify, method: fgsm, ...}, ...}
    privacy_model: fgsm        # which entry `evaluate` uses
    probers: [PP-D, PP-I, PP-A, PP-B, PP-DI, PP-DA, PP-DB, PP-IB, PP-AB]
    detection: {enabled: true, probers: [PP-A, PP-DI, PP-B], weights: null, alpha: 0.5, external_scores: null}
    quantize_enhanced: false   # true rounds enhanced images to 8 bits, as a stored PNG would
    workers: 1

The only environment variable consulted is ``SBPROBE_CACHE_DIR`` (trained
component cache; unset disables caching).
"""
from __future__ import annotations

import copy
import hashlib
import json
import os
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

import jsonschema
import yaml

from .errors import ConfigurationError

CACHE_ENV = "SBPROBE_CACHE_DIR"

DEFAULT_CONFIG: dict[str, Any] = {
    "seed": 0,
    "dataset": {"manifest": None, "toy": None, "classes": ["f", "m"], "positive_class": "m"},
    "splits": {"n_test_splits": 4, "train_fraction": 0.5, "min_test_images": 2, "nonmated_cap": 50000},
    "classifier": {"hidden": 0, "epochs": 300, "lr": 0.01, "l2": 1e-4, "weights": None},
    "scorer": None,
    "verifier": {"embedding_dim": 32, "whiten": True, "weights": None},
    "schedule": {"square_size": 2, "spacing": 6, "stride": 1, "squares_per_side": None, "traversal": None},
    "backends": {
        "denoiser": {"kind": "median", "radius": 1},
        "inpainter": {"kind": "harmonic"},
        "autoencoder": {"kind": "dense_autoencoder", "latent_dim": 64, "epochs": 300},
        "face_parser": {"kind": "threshold_parser", "threshold": 0.12},
        "super_resolver": {"kind": "bicubic"},
    },
    "super_resolution": {"factor": 3.6, "low_res": None},
    "privacy_models": {
        "fgsm": {"kind": "adversarial_misclassify", "method": "fgsm", "epsilon": 0.03,
                 "epsilon_search_range": [0.1, 0.001], "epoch_budget": 200, "inverted": True},
        "cw": {"kind": "adversarial_misclassify", "method": "cw", "max_iter": 20, "learning_rate": 0.01,
               "init_const": 1000.0, "inverted": True},
        "san": {"kind": "synthesis_equalize", "hidden": 32, "grid": 16, "epochs": 300, "lr": 0.002,
                "attr_weight": 1.0, "identity_weight": 0.5, "recon_weight": 1.0, "inverted": False},
        "identity": {"kind": "external", "inverted": False},
    },
    "privacy_model": "fgsm",
    "probers": ["PP-D", "PP-I", "PP-A", "PP-B", "PP-DI", "PP-DA", "PP-DB", "PP-IB", "PP-AB"],
    "detection": {"enabled": True, "probers": ["PP-A", "PP-DI", "PP-B"], "weights": None, "alpha": 0.5,
                  "external_scores": None},
    "quantize_enhanced": False,
    "workers": 1,
}


def load_schema(name: str) -> dict:
    return json.loads(resources.files("sbprobe").joinpath("schemas").joinpath(name).read_text())


def _merge(base: Any, over: Any) -> Any:
    """Recursive dict merge; non-dict values in ``over`` replace those in ``base``."""
    if isinstance(base, dict) and isinstance(over, Mapping):
        out = copy.deepcopy(base)
        for k, v in over.items():
            out[k] = _merge(out[k], v) if k in out else copy.deepcopy(v)
        return out
    return copy.deepcopy(over)


def validate_config(cfg: Mapping[str, Any]) -> None:
    try:
        jsonschema.validate(cfg, load_schema("config.schema.json"))
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigurationError(f"config error at {where}: {exc.message}") from None
    if cfg["privacy_model"] not in cfg["privacy_models"]:
        raise ConfigurationError(f"privacy_model {cfg['privacy_model']!r} is not defined in privacy_models")
    ds = cfg["dataset"]
    if ds["positive_class"] not in ds["classes"]:
        raise ConfigurationError("dataset.positive_class must be one of dataset.classes")


def make_config(overrides: Mapping[str, Any] | None = None) -> dict[str, Any]:
    cfg = _merge(DEFAULT_CONFIG, overrides or {})
    validate_config(cfg)
    return cfg


def load_config(path: str | Path | None, overrides: Mapping[str, Any] | None = None) -> dict[str, Any]:
    """Read a YAML/JSON file (JSON is valid YAML), merge defaults and overrides, validate."""
    raw: dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        try:
            raw = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"{path}: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigurationError(f"{path}: top level must be a mapping")
        base = path.parent
        man = raw.get("dataset", {}).get("manifest") if isinstance(raw.get("dataset"), dict) else None
        if man and not Path(man).is_absolute():
            raw["dataset"]["manifest"] = str(base / man)
    return make_config(_merge(raw, overrides or {}))


def config_digest(section: Any) -> str:
    """Stable short hash of a config fragment (cache keys)."""
    return hashlib.sha256(json.dumps(section, sort_keys=True, default=str).encode()).hexdigest()[:16]


def cache_dir() -> Path | None:
    d = os.environ.get(CACHE_ENV, "").strip()
    if not d:
        return None
    p = Path(d).expanduser()
    p.mkdir(parents=True, exist_ok=True)
    return p


def derive_seed(root: int, name: str) -> int:
    """Component seed derived from the root seed and a component name."""
    h = hashlib.sha256(f"{int(root)}:{name}".encode()).digest()
    return int.from_bytes(h[:4], "little")
