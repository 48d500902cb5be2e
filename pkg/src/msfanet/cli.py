"""Command-line entry point: prepare, synth, train, eval, visualize.

Exit codes are a stable scripting contract: 0 success, 1 validation error
(bad manifest, schema, arguments, missing inputs), 2 runtime error.
Output-directory precedence: --output flag > MSFANET_OUTPUT_ROOT env >
manifest value.
"""

from __future__ import annotations

import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import click
import numpy as np

from . import data as D
from .errors import (ContractError, LoadError, ManifestError, MsfaError,
                     SchemaError, TrainingDiverged)
from .evaluation import evaluate_model
from .manifest import apply_overrides, load_manifest
from .model.config import DENSITY_STRIDE
from .model.net import init_parameters, parameter_count
from .training import (ABLATIONS, apply_ablation, load_checkpoint,
                       restore_model, train)
from .visualize import export_feature_maps, export_heatmap


@click.group()
def cli():
    """Crowd-counting toolkit: data preparation, training, evaluation."""


# ---------------------------------------------------------------------------
# synth


@cli.command()
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--n-samples", type=int, default=8, show_default=True)
@click.option("--profile", type=click.Choice(["uniform", "perspective"]),
              default="uniform", show_default=True)
@click.option("--size", type=(int, int), default=(224, 224), show_default=True)
@click.option("--count-range", type=(int, int), default=(20, 120), show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--workers", type=int, default=1, show_default=True)
@click.option("--dry-run", is_flag=True)
def synth(seed, n_samples, profile, size, count_range, out_dir, workers, dry_run):
    """Emit a deterministic synthetic dataset.

    Artifacts depend only on the seed, so the worker count never changes
    the output bytes.
    """
    if dry_run:
        click.echo(json.dumps({"n_samples": n_samples, "profile": profile,
                               "size": list(size), "seed": seed,
                               "out": str(out_dir)}))
        return
    os.makedirs(out_dir, exist_ok=True)
    master = np.random.default_rng(seed)
    sample_seeds = master.integers(0, 2 ** 63, size=n_samples)
    counts = master.integers(count_range[0], count_range[1] + 1, size=n_samples)

    def emit(i):
        sample = D.synthesize_scene(int(sample_seeds[i]), int(counts[i]),
                                    size=size, density_profile=profile)
        sample_id = f"synth_{i:04d}"
        sample.sample_id = sample_id
        D.save_annotations(sample, out_dir, sample_id)
        entry = {"id": sample_id, "sidecar": f"{sample_id}.json",
                 "count": int(counts[i])}
        if profile == "perspective":
            top, mid, bot = D.perspective_band_counts(int(counts[i]))
            entry["band_counts"] = {"top": top, "mid": mid, "bottom": bot}
        return entry

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            entries = list(pool.map(emit, range(n_samples)))
    else:
        entries = [emit(i) for i in range(n_samples)]
    D.write_index(out_dir, entries, extra={"profile": profile, "seed": seed})
    click.echo(f"wrote {n_samples} samples to {out_dir}")


# ---------------------------------------------------------------------------
# prepare


def _prepare_one(sidecar, sigma, out_dir):
    sample = D.load_annotations(sidecar)
    with open(sidecar, "rb") as f:
        fingerprint = D.content_hash(f.read(), sigma, DENSITY_STRIDE, 1)
    sample_id = sample.sample_id
    den_path = os.path.join(out_dir, f"{sample_id}.den")
    header_path = den_path + ".json"
    if os.path.exists(header_path):
        try:
            with open(header_path) as f:
                if json.load(f).get("content_hash") == fingerprint:
                    return sample_id, sample.annotations.count(), False
        except (OSError, json.JSONDecodeError):
            pass
    gt = D.generate_density_map(sample.annotations, sigma)
    gt = D.downsample_density(D.pad_to_multiple(gt, DENSITY_STRIDE), DENSITY_STRIDE)
    if sample.roi is not None:
        h, w = sample.image.shape[:2]
        roi = np.pad(sample.roi, ((0, (-h) % DENSITY_STRIDE), (0, (-w) % DENSITY_STRIDE)))
        gt = D.apply_roi_mask(gt, D.downsample_mask(roi, DENSITY_STRIDE))
    D.save_density_raw(gt, den_path)
    with open(header_path) as f:
        header = json.load(f)
    header["content_hash"] = fingerprint
    with open(header_path, "w") as f:
        json.dump(header, f, sort_keys=True)
        f.write("\n")
    return sample_id, sample.annotations.count(), True


@cli.command()
@click.option("--data-root", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--sigma", type=float, default=4.0, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--workers", type=int, default=1, show_default=True)
@click.option("--dry-run", is_flag=True)
def prepare(data_root, sigma, out_dir, workers, dry_run):
    """Generate 1/8-scale ground-truth density files (idempotent by content hash)."""
    sidecars = D.list_sidecars(data_root)
    if dry_run:
        click.echo(json.dumps({"n_files": len(sidecars), "sigma": sigma,
                               "out": str(out_dir)}))
        return
    os.makedirs(out_dir, exist_ok=True)
    failures = []
    results = {}

    def work(path):
        try:
            results[path] = _prepare_one(path, sigma, out_dir)
        except (LoadError, SchemaError) as e:
            failures.append((path, str(e)))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(work, sidecars))
    else:
        for path in sidecars:
            work(path)

    entries = [{"id": results[p][0], "gt_file": f"{results[p][0]}.den",
                "count": results[p][1]}
               for p in sidecars if p in results]
    D.write_index(out_dir, entries, extra={"sigma": sigma, "scale": DENSITY_STRIDE})
    written = sum(1 for p in results if results[p][2])
    skipped = len(results) - written
    click.echo(f"prepared {written} ground-truth maps, {skipped} up to date, "
               f"{len(failures)} failed")
    if failures:
        for path, msg in failures:
            click.echo(f"FAILED {path}: {msg}", err=True)
        raise SchemaError(f"{len(failures)} annotation file(s) failed to prepare")


# ---------------------------------------------------------------------------
# train


@cli.command(name="train")
@click.option("--manifest", "manifest_path", required=True, type=click.Path())
@click.option("--ablation", type=click.Choice(ABLATIONS), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--output", "output_dir", type=click.Path(), default=None)
@click.option("--resume", "resume_from", type=click.Path(), default=None)
@click.option("--dry-run", is_flag=True)
def train_cmd(manifest_path, ablation, seed, output_dir, resume_from, dry_run):
    """Train a model variant as pinned by the manifest."""
    manifest = load_manifest(manifest_path)
    manifest = apply_overrides(manifest, seed=seed, output_dir=output_dir,
                               ablation=ablation)
    effective = apply_ablation(manifest.model, manifest.train.ablation)
    if dry_run:
        model = init_parameters(effective, seed=manifest.train.seed)
        resolved = manifest.to_dict()
        resolved["parameter_count"] = parameter_count(model)
        click.echo(json.dumps(resolved, indent=1, sort_keys=True))
        return
    samples = D.load_dataset(manifest.data_root)
    ckpt = train(manifest.model, samples, manifest.train, manifest.output_dir,
                 aug=manifest.augment, resume_from=resume_from)
    click.echo(f"final checkpoint: {ckpt}")


# ---------------------------------------------------------------------------
# eval


def _eval_heatmaps(model, samples, out_dir):
    from .model.net import predict_density
    heat_dir = os.path.join(out_dir, "heatmaps")
    os.makedirs(heat_dir, exist_ok=True)
    for s in samples:
        d = predict_density(model, s.image, roi=s.roi)
        export_heatmap(d, os.path.join(heat_dir, f"{s.sample_id}.png"))


@cli.command(name="eval")
@click.option("--checkpoint", "ckpt_path", type=click.Path(), default=None)
@click.option("--dataset", "dataset_dir", required=True,
              type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--regions", is_flag=True, help="add per-band error breakdown")
@click.option("--heatmaps", is_flag=True, help="export per-image heatmaps")
@click.option("--kfold", type=int, default=0,
              help="run k train/eval cycles over dataset folds (needs --manifest)")
@click.option("--manifest", "manifest_path", type=click.Path(), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--workers", type=int, default=1, show_default=True)
@click.option("--longest-side-cap", type=int, default=None,
              help="shrink large images so their longest side fits (test-time protocol)")
def eval_cmd(ckpt_path, dataset_dir, out_dir, regions, heatmaps, kfold,
             manifest_path, seed, workers, longest_side_cap):
    """Evaluate a checkpoint (or cross-validate) on a dataset."""
    os.makedirs(out_dir, exist_ok=True)
    samples = D.load_dataset(dataset_dir)
    if longest_side_cap:
        samples = [D.cap_longest_side(s, longest_side_cap) for s in samples]
    if kfold:
        if manifest_path is None:
            raise ContractError("--kfold needs --manifest for the training settings")
        manifest = load_manifest(manifest_path, require_data_root=False)
        manifest = apply_overrides(manifest, seed=seed)
        _run_kfold(manifest, samples, kfold, out_dir, regions)
        return
    if ckpt_path is None:
        raise ContractError("eval needs --checkpoint (or --kfold)")
    state = load_checkpoint(ckpt_path)
    model = restore_model(state)
    report = evaluate_model(model, samples, sigma=state.train_config.sigma,
                            regions=regions, workers=workers)
    report_path = os.path.join(out_dir, "eval_report.json")
    report.save(report_path)
    if heatmaps:
        _eval_heatmaps(model, samples, out_dir)
    click.echo(f"MAE {report.mae:.3f}  MSE {report.mse:.3f}  -> {report_path}")


def _run_kfold(manifest, samples, k, out_dir, regions):
    cap = manifest.augment.longest_side_cap
    if cap:  # the trainer caps its side internally; test folds need it too
        samples = [D.cap_longest_side(s, cap) for s in samples]
    by_id = {s.sample_id: s for s in samples}
    folds = D.kfold_splits(sorted(by_id), k=k, seed=manifest.train.seed)
    fold_reports = []
    for fold, (train_ids, test_ids) in enumerate(folds):
        fold_dir = os.path.join(out_dir, f"fold_{fold}")
        ckpt = train(manifest.model, [by_id[i] for i in train_ids],
                     manifest.train, fold_dir, aug=manifest.augment)
        model = restore_model(load_checkpoint(ckpt))
        report = evaluate_model(model, [by_id[i] for i in test_ids],
                                sigma=manifest.train.sigma, regions=regions)
        report.save(os.path.join(fold_dir, "eval_report.json"))
        fold_reports.append(report)
        click.echo(f"fold {fold}: MAE {report.mae:.3f}  MSE {report.mse:.3f}")
    summary = {
        "k": k,
        "mean_mae": float(np.mean([r.mae for r in fold_reports])),
        "mean_mse": float(np.mean([r.mse for r in fold_reports])),
        "folds": [{"mae": r.mae, "mse": r.mse} for r in fold_reports],
    }
    with open(os.path.join(out_dir, "kfold_report.json"), "w") as f:
        json.dump(summary, f, indent=1, sort_keys=True)
        f.write("\n")
    click.echo(f"k-fold mean: MAE {summary['mean_mae']:.3f}  "
               f"MSE {summary['mean_mse']:.3f}")


# ---------------------------------------------------------------------------
# visualize


@cli.command()
@click.option("--checkpoint", "ckpt_path", required=True, type=click.Path())
@click.option("--input", "input_path", required=True, type=click.Path(exists=True),
              help="annotation sidecar of the sample to visualize")
@click.option("--layer", default=None,
              help="also export this module's feature maps (e.g. blocks.4)")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--max-channels", type=int, default=16, show_default=True)
def visualize(ckpt_path, input_path, layer, out_dir, max_channels):
    """Export the predicted density heatmap (and optional feature maps)."""
    from .model.net import predict_density
    os.makedirs(out_dir, exist_ok=True)
    state = load_checkpoint(ckpt_path)
    model = restore_model(state)
    sample = D.load_annotations(input_path)
    d = predict_density(model, sample.image, roi=sample.roi)
    heat_path = os.path.join(out_dir, f"{sample.sample_id}_density.png")
    export_heatmap(d, heat_path)
    D.save_density_raw(d, os.path.join(out_dir, f"{sample.sample_id}_density.den"))
    written = [heat_path]
    if layer:
        written += export_feature_maps(model, sample.image, layer, out_dir,
                                       max_channels=max_channels)
    click.echo(f"wrote {len(written)} file(s) to {out_dir}")


# ---------------------------------------------------------------------------


def main(argv=None) -> int:
    """Entry point with the documented exit-code contract."""
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.UsageError as e:
        e.show()
        return 1
    except click.ClickException as e:
        e.show()
        return 2
    except click.exceptions.Abort:
        return 130
    except (ManifestError, SchemaError, ContractError, LoadError) as e:
        click.echo(f"error: {e}", err=True)
        return 1
    except (TrainingDiverged, MsfaError, OSError) as e:
        click.echo(f"runtime error: {e}", err=True)
        return 2


if __name__ == "__main__":
    sys.exit(main())
