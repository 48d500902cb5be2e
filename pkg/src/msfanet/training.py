"""End-to-end optimization: Adam loop, ablation variants, checkpointing.

The four ablation variants from the architecture study are selected by name:
``baseline`` (no aggregation paths), ``sh`` (short aggregation), ``sh_sk``
(both aggregation paths), all three trained with the Euclidean loss, and
``sh_sk_ploss`` (both paths, trained with the combined objective).

Determinism contract: with a fixed seed and the single-worker loop below, the
parameter trajectory and loss sequence are bit-reproducible, and training
resumed from a checkpoint continues exactly where the uninterrupted run would
have been. Batch assembly consumes the data RNG in a documented order (per batch
slot: sample index, scale index, crop origin, mirror flag), and the RNG
state travels inside the checkpoint.

Checkpoints use a flat container written byte-identically for identical
state: a magic string, a little-endian uint64 header length, a JSON header
(configs, iteration, RNG states, array manifest, payload digest) and the raw
array payload. Truncation or corruption fails the load before any state is
touched.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import time
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np
import torch

from .data.augment import (AugmentationConfig, cap_longest_side,
                           horizontal_mirror, random_crop, scale_sample)
from .data.density import downsample_density, generate_density_map, pad_to_multiple
from .errors import ContractError, LoadError, TrainingDiverged
from .losses import LossConfig, euclidean_loss, total_loss
from .model.config import DENSITY_STRIDE, ModelConfig
from .model.net import MsfaNet, init_parameters

ABLATIONS = ("baseline", "sh", "sh_sk", "sh_sk_ploss")

_MAGIC = b"MSFACKPT1\n"


@dataclass
class TrainConfig:
    learning_rate: float = 1e-5
    batch_size: int = 8
    iterations: int = 1000
    epochs: int = 0                      # alternative to iterations, see resolve_iterations
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    ablation: str = "sh_sk_ploss"
    checkpoint_every: int = 0            # 0 -> only the final checkpoint
    sigma: float = 4.0                   # ground-truth Gaussian spread
    crops_per_image: int = 4             # defines one "epoch" of the crop sampler
    adam_eps: float = 1e-8
    pretrained_backbone: Optional[str] = None   # trunk weight file (.npz)

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig.from_dict(self.loss)
        if self.learning_rate <= 0:
            raise ContractError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ContractError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.ablation not in ABLATIONS:
            raise ContractError(
                f"ablation must be one of {ABLATIONS}, got '{self.ablation}'")

    def resolve_iterations(self, n_samples: int) -> int:
        """Iteration count, honoring the epoch definition when requested.

        Crop-based training has no natural epoch, so one epoch is defined as
        ``crops_per_image`` random crops per source image; ``epochs > 0``
        (with ``iterations == 0``) converts that into optimizer iterations.
        """
        if self.epochs > 0 and self.iterations == 0:
            crops = self.epochs * self.crops_per_image * n_samples
            return -(-crops // self.batch_size)
        return self.iterations

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss"] = self.loss.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def apply_ablation(model_cfg: ModelConfig, ablation: str) -> ModelConfig:
    """Model config with the aggregation toggles of the named variant."""
    if ablation not in ABLATIONS:
        raise ContractError(f"unknown ablation '{ablation}'")
    d = model_cfg.to_dict()
    d["enable_shortagg"] = ablation != "baseline"
    d["enable_skipagg"] = ablation in ("sh_sk", "sh_sk_ploss")
    return ModelConfig.from_dict(d)


def objective_name(ablation: str) -> str:
    return "total" if ablation == "sh_sk_ploss" else "euclidean"


def compute_objective(pred, gt, cfg: TrainConfig):
    if objective_name(cfg.ablation) == "total":
        return total_loss(pred, gt, cfg.loss)
    return euclidean_loss(pred, gt)


# ---------------------------------------------------------------------------
# checkpoint container


def _array_blob(arrays):
    """arrays: list of (name, np.ndarray) -> (manifest, payload bytes)."""
    manifest = []
    chunks = []
    offset = 0
    for name, arr in arrays:
        raw = np.ascontiguousarray(arr).tobytes()
        manifest.append({
            "name": name,
            "dtype": arr.dtype.str,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
        })
        chunks.append(raw)
        offset += len(raw)
    return manifest, b"".join(chunks)


def _optimizer_arrays(optimizer):
    arrays = []
    groups = []
    sd = optimizer.state_dict()
    for g in sd["param_groups"]:
        g = dict(g)
        g["params"] = list(g["params"])
        groups.append({k: v for k, v in g.items()
                       if isinstance(v, (int, float, bool, str, list, type(None), tuple))})
    for idx, st in sd["state"].items():
        for key, val in st.items():
            if isinstance(val, torch.Tensor):
                arrays.append((f"adam/{idx}/{key}", val.detach().cpu().numpy()))
            else:
                arrays.append((f"adam/{idx}/{key}", np.asarray(val, dtype=np.float64)))
    return arrays, groups


def save_checkpoint(path, model: MsfaNet, optimizer, iteration: int,
                    train_cfg: TrainConfig, data_rng: np.random.Generator) -> None:
    """Atomically write model, optimizer and RNG state; bit-exact round trip."""
    arrays = [(f"param/{n}", p.detach().cpu().numpy())
              for n, p in model.named_parameters()]
    opt_arrays, groups = _optimizer_arrays(optimizer)
    arrays += opt_arrays
    arrays.append(("torch_rng", torch.get_rng_state().numpy()))
    manifest, payload = _array_blob(arrays)
    header = {
        "version": 1,
        "model_config": model.cfg.to_dict(),
        "train_config": train_cfg.to_dict(),
        "iteration": int(iteration),
        "data_rng_state": data_rng.bit_generator.state,
        "optimizer_groups": groups,
        "arrays": manifest,
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode()
    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        f.write(payload)
    os.replace(tmp, os.fspath(path))


@dataclass
class CheckpointState:
    model_config: ModelConfig
    train_config: TrainConfig
    iteration: int
    data_rng_state: dict
    optimizer_groups: list
    arrays: dict                      # name -> np.ndarray


def load_checkpoint(path) -> CheckpointState:
    """Parse and verify a checkpoint; raises LoadError before touching state."""
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise LoadError(f"cannot read checkpoint {path}: {e}") from e
    if not blob.startswith(_MAGIC):
        raise LoadError(f"{path}: not a checkpoint file (bad magic)")
    pos = len(_MAGIC)
    if len(blob) < pos + 8:
        raise LoadError(f"{path}: truncated header length")
    (header_len,) = struct.unpack("<Q", blob[pos:pos + 8])
    pos += 8
    if len(blob) < pos + header_len:
        raise LoadError(f"{path}: truncated header")
    try:
        header = json.loads(blob[pos:pos + header_len])
    except json.JSONDecodeError as e:
        raise LoadError(f"{path}: corrupt header: {e}") from e
    if header.get("version") != 1:
        raise LoadError(f"{path}: unsupported checkpoint version {header.get('version')}")
    payload = blob[pos + header_len:]
    if len(payload) != header["payload_bytes"]:
        raise LoadError(
            f"{path}: truncated payload ({len(payload)} of {header['payload_bytes']} bytes)")
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise LoadError(f"{path}: payload digest mismatch (corrupt file)")
    arrays = {}
    for entry in header["arrays"]:
        raw = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arrays[entry["name"]] = np.frombuffer(raw, dtype=entry["dtype"]).reshape(
            entry["shape"]).copy()
    return CheckpointState(
        model_config=ModelConfig.from_dict(header["model_config"]),
        train_config=TrainConfig.from_dict(header["train_config"]),
        iteration=header["iteration"],
        data_rng_state=header["data_rng_state"],
        optimizer_groups=header["optimizer_groups"],
        arrays=arrays,
    )


def restore_model(state: CheckpointState) -> MsfaNet:
    """Model rebuilt from a checkpoint; parameters bit-identical to the save."""
    model = MsfaNet(state.model_config)
    named = dict(model.named_parameters())
    problems = []
    for name, p in named.items():
        key = f"param/{name}"
        if key not in state.arrays:
            problems.append(f"missing parameter {name}")
        elif tuple(state.arrays[key].shape) != tuple(p.shape):
            problems.append(f"shape mismatch for {name}")
    if problems:
        raise LoadError("checkpoint does not fit the model:\n  " + "\n  ".join(problems))
    with torch.no_grad():
        for name, p in named.items():
            p.copy_(torch.from_numpy(state.arrays[f"param/{name}"]))
    return model


def restore_optimizer(state: CheckpointState, model: MsfaNet, optimizer) -> None:
    sd = optimizer.state_dict()
    opt_state = {}
    indices = {i for name in state.arrays
               for i in ([int(name.split("/")[1])] if name.startswith("adam/") else [])}
    for idx in sorted(indices):
        entry = {}
        for name, arr in state.arrays.items():
            if name.startswith(f"adam/{idx}/"):
                key = name.split("/", 2)[2]
                if key == "step":
                    entry[key] = torch.tensor(float(arr.reshape(())), dtype=torch.float32)
                else:
                    entry[key] = torch.from_numpy(arr)
        opt_state[idx] = entry
    groups = []
    for g in state.optimizer_groups:
        g = dict(g)
        g["betas"] = tuple(g.get("betas", (0.9, 0.999)))
        groups.append(g)
    optimizer.load_state_dict({"state": opt_state, "param_groups": groups})


# ---------------------------------------------------------------------------
# the optimization loop


def _prepare_batch(samples, aug: AugmentationConfig, cfg: TrainConfig,
                   rng: np.random.Generator):
    """Assemble one batch; RNG consumption order is the determinism contract."""
    images, gts, ids = [], [], []
    scales = tuple(aug.scales)
    for _ in range(cfg.batch_size):
        idx = int(rng.integers(0, len(samples)))
        s = samples[idx]
        if scales:
            factor = scales[int(rng.integers(0, len(scales)))]
            if factor != 1.0:
                s = scale_sample(s, factor)
        s = random_crop(s, aug, rng)
        if aug.mirror and int(rng.integers(0, 2)):
            s = horizontal_mirror(s)
        gt = generate_density_map(s.annotations, cfg.sigma)
        gt = downsample_density(pad_to_multiple(gt, DENSITY_STRIDE), DENSITY_STRIDE)
        images.append(torch.from_numpy(s.image).permute(2, 0, 1))
        gts.append(torch.from_numpy(gt.values)[None])
        ids.append(s.sample_id or str(idx))
    return torch.stack(images), torch.stack(gts), ids


class Trainer:
    def __init__(self, model_cfg: ModelConfig, samples, cfg: TrainConfig,
                 out_dir, aug: Optional[AugmentationConfig] = None,
                 resume_from=None):
        if not samples:
            raise ContractError("training needs at least one sample")
        self.aug = aug or AugmentationConfig(rng_seed=cfg.seed)
        if self.aug.longest_side_cap:
            samples = [cap_longest_side(s, self.aug.longest_side_cap)
                       for s in samples]
        self.samples = list(samples)
        self.cfg = cfg
        self.iterations = cfg.resolve_iterations(len(self.samples))
        self.out_dir = os.fspath(out_dir)
        os.makedirs(self.out_dir, exist_ok=True)
        self.objective = objective_name(cfg.ablation)

        if resume_from is not None:
            state = load_checkpoint(resume_from)
            self.model = restore_model(state)
            self.optimizer = torch.optim.Adam(
                self.model.parameters(), lr=cfg.learning_rate, eps=cfg.adam_eps)
            restore_optimizer(state, self.model, self.optimizer)
            self.data_rng = np.random.default_rng()
            self.data_rng.bit_generator.state = state.data_rng_state
            torch_rng = state.arrays.get("torch_rng")
            if torch_rng is not None:
                torch.set_rng_state(torch.from_numpy(torch_rng.copy()))
            self.start_iteration = state.iteration
        else:
            torch.manual_seed(cfg.seed)
            effective = apply_ablation(model_cfg, cfg.ablation)
            self.model = init_parameters(effective, seed=cfg.seed,
                                         pretrained=cfg.pretrained_backbone)
            self.optimizer = torch.optim.Adam(
                self.model.parameters(), lr=cfg.learning_rate, eps=cfg.adam_eps)
            self.data_rng = np.random.default_rng(cfg.seed)
            self.start_iteration = 0

    def checkpoint_path(self, tag) -> str:
        return os.path.join(self.out_dir, f"ckpt_{tag}.msfa")

    def save(self, tag, iteration) -> str:
        path = self.checkpoint_path(tag)
        save_checkpoint(path, self.model, self.optimizer, iteration,
                        self.cfg, self.data_rng)
        return path

    def run(self, log_name: str = "loss_log.jsonl") -> str:
        """Run the loop; returns the final checkpoint path."""
        cfg = self.cfg
        log_path = os.path.join(self.out_dir, log_name)
        mode = "a" if self.start_iteration > 0 else "w"
        self.model.train()
        with open(log_path, mode) as log:
            for iteration in range(self.start_iteration + 1, self.iterations + 1):
                t0 = time.monotonic()
                images, gts, batch_ids = _prepare_batch(
                    self.samples, self.aug, cfg, self.data_rng)
                pred = self.model(images)
                loss = compute_objective(pred, gts, cfg)
                value = float(loss.detach())
                if not np.isfinite(value):
                    snapshot = {
                        "iteration": iteration,
                        "lr": cfg.learning_rate,
                        "batch_ids": batch_ids,
                        "objective": self.objective,
                        "value": value,
                    }
                    snap_path = os.path.join(self.out_dir, "diverged_snapshot.json")
                    with open(snap_path, "w") as f:
                        json.dump(snapshot, f, indent=1, sort_keys=True)
                    raise TrainingDiverged(
                        f"non-finite loss at iteration {iteration} "
                        f"(snapshot: {snap_path})", snapshot)
                self.optimizer.zero_grad()
                loss.backward()
                self.optimizer.step()
                record = {
                    "iteration": iteration,
                    "objective": self.objective,
                    "value": value,
                    "lr": cfg.learning_rate,
                    "wall_ms": round((time.monotonic() - t0) * 1000.0, 3),
                }
                log.write(json.dumps(record) + "\n")
                log.flush()
                if cfg.checkpoint_every and iteration % cfg.checkpoint_every == 0:
                    self.save(f"{iteration:07d}", iteration)
        return self.save("final", max(self.start_iteration, self.iterations))


def train(model_cfg: ModelConfig, samples, cfg: TrainConfig, out_dir,
          aug: Optional[AugmentationConfig] = None, resume_from=None) -> str:
    """Train one variant end to end; returns the final checkpoint path."""
    return Trainer(model_cfg, samples, cfg, out_dir, aug=aug,
                   resume_from=resume_from).run()
