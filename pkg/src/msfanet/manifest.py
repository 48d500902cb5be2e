"""Experiment manifests: one JSON document pins everything that affects a run.

Command-line flags only override manifest fields (precedence: flag > env >
manifest), which keeps experiments reproducible and diffable. Validation
collects every problem before failing so a bad manifest is fixed in one pass.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

from .data.augment import AugmentationConfig
from .errors import ContractError, LoadError, ManifestError
from .losses import LossConfig
from .model.config import ModelConfig
from .training import TrainConfig

MANIFEST_VERSION = 1
OUTPUT_ROOT_ENV = "MSFANET_OUTPUT_ROOT"

_EVAL_KEYS = {"regions", "heatmaps", "kfold"}


def _section(doc, name, cls, problems):
    """Build a config dataclass from a manifest section, collecting problems."""
    raw = doc.get(name, {})
    if not isinstance(raw, dict):
        problems.append(f"section '{name}' must be an object")
        return cls()
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - known
    for key in sorted(unknown):
        problems.append(f"section '{name}': unknown field '{key}'")
    kwargs = {k: v for k, v in raw.items() if k in known}
    # JSON has no tuples; dataclass __post_init__ handles the coercion
    try:
        return cls(**kwargs)
    except (ContractError, TypeError, ValueError) as e:
        problems.append(f"section '{name}': {e}")
        return cls()


@dataclass
class ExperimentManifest:
    data_root: str = ""
    output_dir: str = "runs"
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentationConfig = field(default_factory=AugmentationConfig)
    eval_options: dict = field(default_factory=dict)
    version: int = MANIFEST_VERSION

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "paths": {"data_root": self.data_root, "output_dir": self.output_dir},
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "loss": self.train.loss.to_dict(),
            "augment": {
                "crop_size": self.augment.crop_size,
                "scales": list(self.augment.scales),
                "mirror": self.augment.mirror,
                "longest_side_cap": self.augment.longest_side_cap,
                "rng_seed": self.augment.rng_seed,
            },
            "eval": dict(self.eval_options),
        }


def manifest_from_dict(doc: dict, base_dir: str = ".",
                       require_data_root: bool = True) -> ExperimentManifest:
    """Validate a manifest document; raises ManifestError listing all problems."""
    problems = []
    if not isinstance(doc, dict):
        raise ManifestError(["manifest must be a JSON object"])
    version = doc.get("version")
    if version != MANIFEST_VERSION:
        problems.append(f"unrecognized manifest version: {version!r} "
                        f"(expected {MANIFEST_VERSION})")
    paths = doc.get("paths", {})
    if not isinstance(paths, dict):
        problems.append("section 'paths' must be an object")
        paths = {}
    data_root = paths.get("data_root", "")
    output_dir = paths.get("output_dir", "runs")
    if data_root:
        data_root = os.path.normpath(os.path.join(base_dir, data_root))
        if not os.path.exists(data_root):
            problems.append(f"paths.data_root does not exist: {data_root}")
    elif require_data_root:
        problems.append("paths.data_root is required")
    output_dir = os.path.normpath(os.path.join(base_dir, output_dir))

    model = _section(doc, "model", ModelConfig, problems)
    train = _section(doc, "train", TrainConfig, problems)
    augment = _section(doc, "augment", AugmentationConfig, problems)
    if "loss" in doc:
        loss = _section(doc, "loss", LossConfig, problems)
        train = dataclasses.replace(train, loss=loss)
    if train.pretrained_backbone:
        backbone = os.path.normpath(os.path.join(base_dir, train.pretrained_backbone))
        if os.path.exists(backbone):
            train = dataclasses.replace(train, pretrained_backbone=backbone)
        else:
            problems.append(f"train.pretrained_backbone does not exist: {backbone}")
    eval_options = doc.get("eval", {})
    if not isinstance(eval_options, dict):
        problems.append("section 'eval' must be an object")
        eval_options = {}
    for key in sorted(set(eval_options) - _EVAL_KEYS):
        problems.append(f"section 'eval': unknown field '{key}'")

    if problems:
        raise ManifestError(problems)
    return ExperimentManifest(data_root=data_root, output_dir=output_dir,
                              model=model, train=train, augment=augment,
                              eval_options=eval_options, version=version)


def load_manifest(path, require_data_root: bool = True) -> ExperimentManifest:
    path = os.fspath(path)
    try:
        with open(path) as f:
            doc = json.load(f)
    except FileNotFoundError as e:
        raise LoadError(f"manifest not found: {path}") from e
    except (OSError, json.JSONDecodeError) as e:
        raise LoadError(f"cannot parse manifest {path}: {e}") from e
    return manifest_from_dict(doc, base_dir=os.path.dirname(path) or ".",
                              require_data_root=require_data_root)


def apply_overrides(manifest: ExperimentManifest, seed=None, output_dir=None,
                    ablation=None) -> ExperimentManifest:
    """Flag/environment overrides; precedence: flag > env > manifest."""
    train = manifest.train
    if seed is not None:
        train = dataclasses.replace(train, seed=int(seed))
        manifest = dataclasses.replace(
            manifest, augment=dataclasses.replace(manifest.augment, rng_seed=int(seed)))
    if ablation is not None:
        train = dataclasses.replace(train, ablation=ablation)
    out = output_dir or os.environ.get(OUTPUT_ROOT_ENV) or manifest.output_dir
    return dataclasses.replace(manifest, train=train, output_dir=os.fspath(out))
