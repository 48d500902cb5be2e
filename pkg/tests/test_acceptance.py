"""Acceptance suite: one test per release criterion, each printing a
PASS/FAIL line with its measured runtime.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the lines as they
complete. Absolute MAE/MSE targets on the four licensed benchmark datasets
are out of desk-scale reach (they need the real data and long GPU training);
everything here is property-based and runs on synthetic scenes.
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from fd import rel_err
from msfanet.cli import main as cli_main
from msfanet.data import (AugmentationConfig, HeadAnnotations,
                          downsample_density, generate_density_map,
                          pad_to_multiple, synthesize_scene)
from msfanet.evaluation import average_ranking, compute_mae_mse
from msfanet.losses import (LossConfig, euclidean_loss, la_loss_window,
                            pooling_loss, total_loss)
from msfanet.model import (ModelConfig, MsfaNet, init_parameters,
                           parameter_count)
from msfanet.model.swin import WindowAttention, window_partition, window_reverse
from msfanet.training import TrainConfig, Trainer, train

RANKING_FIXTURE = Path(__file__).parent / "data" / "ranking_table.json"

TINY = dict(channel_multiplier=0.125, stem_window=2)


class Criterion:
    """Prints one PASS/FAIL line per criterion, then reports to pytest."""

    def __init__(self, name, budget_s):
        self.name = name
        self.budget_s = budget_s

    def __enter__(self):
        self.t0 = time.time()
        return self

    def __exit__(self, exc_type, exc, tb):
        elapsed = time.time() - self.t0
        status = "PASS" if exc_type is None else "FAIL"
        print(f"[{status}] {self.name}  ({elapsed:.1f}s / budget {self.budget_s}s)")
        if exc_type is None and elapsed > self.budget_s:
            raise AssertionError(
                f"{self.name}: runtime {elapsed:.1f}s exceeded budget {self.budget_s}s")
        return False


# ---------------------------------------------------------------------------


def test_count_conservation():
    with Criterion("count conservation over 200 random annotation sets", 60):
        rng = np.random.default_rng(2024)
        for case in range(200):
            n = int(rng.integers(0, 501))
            w = int(rng.integers(48, 257))
            h = int(rng.integers(48, 257))
            sigma = float(rng.uniform(1.0, 8.0))
            pts = np.stack([rng.uniform(0, w - 1e-6, n),
                            rng.uniform(0, h - 1e-6, n)], axis=1)
            ann = HeadAnnotations(pts, image_width=w, image_height=h)
            d = generate_density_map(ann, sigma)
            assert abs(d.total() - n) <= 1e-3 * max(n, 1), \
                f"case {case}: sum {d.total()} vs count {n}"
            down = downsample_density(pad_to_multiple(d, 8), 8)
            if n:
                assert abs(down.total() - d.total()) <= 1e-4 * d.total()
            else:
                assert down.total() == 0.0


def test_loss_correctness():
    with Criterion("loss oracles, single-window identity, loss gradients", 30):
        rng = np.random.default_rng(7)
        cfg = LossConfig(window=4, stride=4, alpha=0.1)

        # brute-force oracle on 8x8 maps
        pred = rng.uniform(0, 1, (2, 8, 8))
        gt = rng.uniform(0, 1, (2, 8, 8))
        oracle = 0.0
        for i in range(2):
            acc = 0.0
            for wy in range(2):
                for wx in range(2):
                    pw = pred[i, wy * 4:wy * 4 + 4, wx * 4:wx * 4 + 4]
                    gw = gt[i, wy * 4:wy * 4 + 4, wx * 4:wx * 4 + 4]
                    acc += ((pw - gw) ** 2).sum() / (gw.sum() + 1.0)
            oracle += acc
        oracle /= 2
        tp, tg = torch.tensor(pred), torch.tensor(gt)
        assert rel_err(float(pooling_loss(tp, tg, cfg)), oracle) <= 1e-9

        # la_loss_window hand case: squared diff 0.8, count 3 -> 0.2
        gtw = torch.tensor([[1.0, 1.0], [1.0, 0.0]], dtype=torch.float64)
        predw = gtw + torch.tensor([[0.6, 0.6], [0.2, 0.2]], dtype=torch.float64)
        assert rel_err(float(la_loss_window(predw, gtw)), 0.2) <= 1e-9

        # total loss composition
        combined = float(total_loss(tp, tg, cfg))
        parts = 0.1 * float(euclidean_loss(tp, tg)) + float(pooling_loss(tp, tg, cfg))
        assert rel_err(combined, parts) <= 1e-9

        # single-window reduction identity (K=1)
        one_p, one_g = tp[:1], tg[:1]
        full = LossConfig(window=8, stride=8)
        lhs = float(pooling_loss(one_p, one_g, full))
        rhs = float(euclidean_loss(one_p, one_g)) / (float(one_g.sum()) + 1.0)
        assert rel_err(lhs, rhs) <= 1e-6

        # gradients vs central differences, double precision
        for fn in (lambda p, g: euclidean_loss(p, g),
                   lambda p, g: pooling_loss(p, g, cfg),
                   lambda p, g: total_loss(p, g, cfg)):
            p64 = torch.tensor(pred, requires_grad=True)
            fn(p64, torch.tensor(gt)).backward()
            analytic = p64.grad.numpy()
            numeric = np.zeros_like(pred)
            h = 1e-6
            flatview = pred.reshape(-1)
            nflat = numeric.reshape(-1)
            for i in range(flatview.size):
                orig = flatview[i]
                flatview[i] = orig + h
                hi = float(fn(torch.tensor(pred), torch.tensor(gt)))
                flatview[i] = orig - h
                lo = float(fn(torch.tensor(pred), torch.tensor(gt)))
                flatview[i] = orig
                nflat[i] = (hi - lo) / (2 * h)
            rel = np.abs(analytic - numeric) / np.maximum(np.abs(numeric), 1e-8)
            assert rel.max() <= 1e-6


def test_model_shape_and_graph_contracts():
    with Criterion("model shapes, zeroed-SkipAgg equivalence, ablation counts", 120):
        cfg = ModelConfig(channel_multiplier=0.25)
        model = MsfaNet(cfg)
        assert model(torch.randn(1, 3, 224, 224)).shape == (1, 1, 28, 28)
        assert model(torch.randn(1, 3, 320, 480)).shape == (1, 1, 40, 60)

        # zero-weight skip adapters == SH-only model, bit-exact, incl. non-square
        tiny_sk = ModelConfig(enable_shortagg=True, enable_skipagg=True, **TINY)
        tiny_sh = ModelConfig(enable_shortagg=True, enable_skipagg=False, **TINY)
        m_sk = init_parameters(tiny_sk, seed=11)
        m_sh = MsfaNet(tiny_sh)
        m_sh.load_state_dict({k: v for k, v in m_sk.state_dict().items()
                              if k in m_sh.state_dict()})
        with torch.no_grad():
            for key in m_sk.skip_adapters:
                m_sk.skip_adapters[key].weight.zero_()
        for shape in [(1, 3, 64, 64), (2, 3, 48, 80)]:
            x = torch.randn(*shape)
            assert torch.equal(m_sk(x), m_sh(x))

        # strictly increasing parameter counts across the ablation ladder
        base = parameter_count(MsfaNet(ModelConfig(
            enable_shortagg=False, enable_skipagg=False, channel_multiplier=0.25)))
        sh = parameter_count(MsfaNet(ModelConfig(
            enable_shortagg=True, enable_skipagg=False, channel_multiplier=0.25)))
        sh_sk = parameter_count(MsfaNet(ModelConfig(
            enable_shortagg=True, enable_skipagg=True, channel_multiplier=0.25)))
        assert base < sh < sh_sk


def test_attention_correctness():
    with Criterion("attention rows, shift involution, hand-computed window", 60):
        torch.manual_seed(0)
        attn = WindowAttention(dim=12, heads=3, window=4).double()
        tokens = torch.randn(8, 16, 12, dtype=torch.float64)
        _, weights = attn(tokens, return_attn=True)
        assert float((weights.detach().sum(-1) - 1.0).abs().max()) <= 1e-6

        # cyclic shift + inverse is an exact involution
        x = torch.randn(1, 14, 14, 4, dtype=torch.float64)
        rolled = torch.roll(x, shifts=(-3, -3), dims=(1, 2))
        through = window_reverse(window_partition(rolled, 7), 7, 14, 14)
        assert torch.equal(torch.roll(through, shifts=(3, 3), dims=(1, 2)), x)

        # 4-token attention against an explicit numpy computation
        dim = 3
        mod = WindowAttention(dim=dim, heads=1, window=2).double()
        rng = np.random.default_rng(5)
        wq, wk, wv, wo = (rng.normal(0, 0.5, (dim, dim)) for _ in range(4))
        bq, bk, bv, bo = (rng.normal(0, 0.2, dim) for _ in range(4))
        with torch.no_grad():
            mod.qkv.weight.copy_(torch.from_numpy(np.vstack([wq, wk, wv])))
            mod.qkv.bias.copy_(torch.from_numpy(np.concatenate([bq, bk, bv])))
            mod.proj.weight.copy_(torch.from_numpy(wo))
            mod.proj.bias.copy_(torch.from_numpy(bo))
            mod.position_bias.zero_()
        xt = rng.normal(0, 1, (1, 4, dim))
        out = mod(torch.from_numpy(xt)).detach().numpy()[0]
        q, k, v = xt[0] @ wq.T + bq, xt[0] @ wk.T + bk, xt[0] @ wv.T + bv
        scores = q @ k.T / np.sqrt(dim)
        e = np.exp(scores - scores.max(axis=1, keepdims=True))
        w = e / e.sum(axis=1, keepdims=True)
        expected = (w @ v) @ wo.T + bo
        assert np.max(np.abs(out - expected)) <= 1e-9


def test_end_to_end_gradients():
    with Criterion("full-model gradients vs central differences (tiny config)", 300):
        torch.manual_seed(0)
        cfg = ModelConfig(**TINY)
        model = init_parameters(cfg, seed=0).double()
        gen = torch.Generator().manual_seed(99)
        # generic parameter point: the documented init leaves the output head
        # nearly dead, so draw a livelier random point and rescale the head
        with torch.no_grad():
            for n, p in model.named_parameters():
                if "norm" in n:
                    continue
                p.normal_(0, 0.05 if n.endswith(".bias") else 0.1, generator=gen)
        x = torch.randn(1, 3, 32, 32, dtype=torch.float64, generator=gen)
        gt = torch.rand(1, 1, 4, 4, dtype=torch.float64, generator=gen)
        lcfg = LossConfig(window=4, stride=4, alpha=0.1)
        with torch.no_grad():
            scale = 2.0 / float(model(x).max())
            model.head.up.weight.mul_(scale)
            model.head.up.bias.mul_(scale)

        def f():
            with torch.no_grad():
                return float(total_loss(model(x), gt, lcfg))

        loss = total_loss(model(x), gt, lcfg)
        loss.backward()

        rng = np.random.default_rng(7)
        h = 1e-5
        worst = 0.0
        for name, p in model.named_parameters():
            g = p.grad
            # directional derivative covers every entry of the tensor
            v = torch.from_numpy(rng.standard_normal(tuple(p.shape)))
            v /= v.norm()
            analytic = float((g * v).sum())
            with torch.no_grad():
                p.add_(v, alpha=h)
                hi = f()
                p.add_(v, alpha=-2 * h)
                lo = f()
                p.add_(v, alpha=h)
            numeric = (hi - lo) / (2 * h)
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-10)
            assert rel <= 1e-4, f"{name} directional: rel {rel:.2e}"
            worst = max(worst, rel)
            # exact per-entry checks on the strongest coordinates
            flat = p.detach().view(-1)
            top = torch.topk(g.view(-1).abs(), min(3, flat.numel())).indices
            for idx in top.tolist():
                analytic_e = float(g.view(-1)[idx])
                with torch.no_grad():
                    orig = float(flat[idx])
                    flat[idx] = orig + h
                    hi = f()
                    flat[idx] = orig - h
                    lo = f()
                    flat[idx] = orig
                numeric_e = (hi - lo) / (2 * h)
                rel = abs(analytic_e - numeric_e) / max(abs(analytic_e),
                                                        abs(numeric_e), 1e-10)
                assert rel <= 1e-4, f"{name}[{idx}]: rel {rel:.2e}"
                worst = max(worst, rel)
        print(f"  worst relative error {worst:.2e} over all parameter tensors")


def test_metrics():
    with Criterion("MAE/MSE formula oracle and published average rankings", 30):
        rng = np.random.default_rng(3)
        pairs = list(zip(rng.uniform(0, 500, 1000), rng.uniform(0, 500, 1000)))
        mae, mse = compute_mae_mse(pairs)
        k = len(pairs)
        assert abs(mae - sum(abs(g - p) for g, p in pairs) / k) <= 1e-9
        assert abs(mse - math.sqrt(sum((g - p) ** 2 for g, p in pairs) / k)) <= 1e-9

        doc = json.loads(RANKING_FIXTURE.read_text())
        table = {m: e["ranks"] for m, e in doc["methods"].items()}
        averages = average_ranking(table)
        assert round(averages["MSFANet"], 2) == 1.75
        assert round(averages["ADSCNet"], 2) == 3.33
        for method, entry in doc["methods"].items():
            computed = round(averages[method], 2)
            if entry.get("printed_avg_inconsistent"):
                # the published table's own rank columns (16+10+13+6)/4 give
                # 11.25; its printed 10.5 fails its own arithmetic
                assert computed == 11.25
            else:
                assert computed == entry["printed_avg"], method


# ---------------------------------------------------------------------------
# heavier end-to-end criteria


def _strip_wall_ms(text):
    records = [json.loads(line) for line in text.splitlines()]
    for r in records:
        r.pop("wall_ms")
    return records


def _tree(root):
    root = Path(root)
    return {str(p.relative_to(root)): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


def _write_manifest(tmp_path, data_root, out_dir, iterations=3):
    doc = {
        "version": 1,
        "paths": {"data_root": str(data_root), "output_dir": str(out_dir)},
        "model": {"channel_multiplier": 0.125, "stem_window": 2},
        "train": {"iterations": iterations, "batch_size": 1, "seed": 0,
                  "ablation": "sh_sk_ploss", "learning_rate": 0.001,
                  "sigma": 3.0},
        "loss": {"window": 2, "stride": 2},
        "augment": {"crop_size": 32, "scales": [1.0], "mirror": True},
    }
    path = tmp_path / "exp.json"
    path.write_text(json.dumps(doc))
    return path


def test_determinism_of_seeded_runs(tmp_path):
    with Criterion("byte-identical repeated seeded synth/prepare/train/eval", 300):
        # synth twice
        for tag in ("a", "b"):
            assert cli_main(["synth", "--seed", "9", "--n-samples", "3", "--size",
                             "32", "32", "--count-range", "4", "9",
                             "--out", str(tmp_path / f"data_{tag}")]) == 0
        assert _tree(tmp_path / "data_a") == _tree(tmp_path / "data_b")

        # prepare twice (fresh output dirs)
        for tag in ("a", "b"):
            assert cli_main(["prepare", "--data-root", str(tmp_path / "data_a"),
                             "--sigma", "3.0", "--out", str(tmp_path / f"gt_{tag}")]) == 0
        assert _tree(tmp_path / "gt_a") == _tree(tmp_path / "gt_b")

        # train twice; logs compared with the wall-clock field stripped
        # (the record keeps wall_ms per the log schema; timing is the one
        # legitimately non-reproducible field)
        manifest = _write_manifest(tmp_path, tmp_path / "data_a", tmp_path / "run_a")
        assert cli_main(["train", "--manifest", str(manifest)]) == 0
        assert cli_main(["train", "--manifest", str(manifest),
                         "--output", str(tmp_path / "run_b")]) == 0
        ta, tb = _tree(tmp_path / "run_a"), _tree(tmp_path / "run_b")
        assert set(ta) == set(tb)
        for name in ta:
            if name.endswith("loss_log.jsonl"):
                assert _strip_wall_ms(ta[name].decode()) == \
                    _strip_wall_ms(tb[name].decode())
            else:
                assert ta[name] == tb[name], name

        # eval twice
        ckpt = tmp_path / "run_a" / "ckpt_final.msfa"
        for tag in ("a", "b"):
            assert cli_main(["eval", "--checkpoint", str(ckpt), "--dataset",
                             str(tmp_path / "data_a"), "--out",
                             str(tmp_path / f"eval_{tag}"), "--regions",
                             "--heatmaps"]) == 0
        assert _tree(tmp_path / "eval_a") == _tree(tmp_path / "eval_b")


def test_checkpoint_resume_equivalence(tmp_path):
    with Criterion("interrupted-and-resumed training equals uninterrupted", 300):
        samples = [synthesize_scene(s, 10, size=(32, 32)) for s in range(3)]
        model_cfg = ModelConfig(**TINY)
        aug = AugmentationConfig(crop_size=32, scales=(1.0,), mirror=True)

        def cfg(iters, every=0):
            return TrainConfig(learning_rate=1e-3, batch_size=2, iterations=iters,
                               seed=4, ablation="sh_sk_ploss", sigma=3.0,
                               checkpoint_every=every,
                               loss=LossConfig(window=2, stride=2))

        final_a = train(model_cfg, samples, cfg(8, every=4), tmp_path / "a", aug=aug)
        log_a = _strip_wall_ms((tmp_path / "a" / "loss_log.jsonl").read_text())

        train(model_cfg, samples, cfg(4, every=4), tmp_path / "b", aug=aug)
        final_b = train(model_cfg, samples, cfg(8, every=4), tmp_path / "b", aug=aug,
                        resume_from=tmp_path / "b" / "ckpt_final.msfa")
        log_b = _strip_wall_ms((tmp_path / "b" / "loss_log.jsonl").read_text())

        assert [r["value"] for r in log_a] == [r["value"] for r in log_b]
        assert log_a == log_b
        assert Path(final_a).read_bytes() == Path(final_b).read_bytes()


OVERFIT_GT_COUNTS = (40, 55, 70, 85)


def _overfit_fixture():
    samples = [synthesize_scene(seed, count, size=(224, 224))
               for seed, count in enumerate(OVERFIT_GT_COUNTS)]
    images = torch.stack([torch.from_numpy(s.image).permute(2, 0, 1)
                          for s in samples])
    gts = torch.stack([torch.from_numpy(downsample_density(
        pad_to_multiple(generate_density_map(s.annotations, 4.0), 8), 8).values)[None]
        for s in samples])
    return samples, images, gts


def _donor_trunk(cfg, path):
    """Trunk weight file at a trainable scale, standing in for the real
    protocol's well-trained backbone (written via the documented pretrained
    mechanism)."""
    import math as _math
    torch.manual_seed(123)
    donor = MsfaNet(cfg)
    with torch.no_grad():
        for block in donor.blocks:
            for conv in block.convs:
                fan_in = conv.weight.shape[1] * 9
                conv.weight.normal_(0, _math.sqrt(2.0 / fan_in))
                conv.bias.zero_()
    from msfanet.model import save_backbone
    save_backbone(donor, path)
    return path


def test_overfit_smoke_all_variants(tmp_path):
    """4 synthetic 224^2 samples, 500 Adam iterations per variant, tiny
    config; trunk seeded from a backbone file as in the real protocol."""
    with Criterion("overfit smoke: all four ablation variants", 900):
        samples, images, gts = _overfit_fixture()
        lcfg = LossConfig()
        model_cfg = ModelConfig(channel_multiplier=0.125)
        trunk = _donor_trunk(model_cfg, tmp_path / "trunk.npz")
        aug = AugmentationConfig(crop_size=224, scales=(1.0,), mirror=False)

        for variant in ("baseline", "sh", "sh_sk", "sh_sk_ploss"):
            cfg = TrainConfig(learning_rate=1e-3, batch_size=4, iterations=500,
                              seed=0, ablation=variant, sigma=4.0, loss=lcfg,
                              pretrained_backbone=str(trunk))
            trainer = Trainer(model_cfg, samples, cfg, tmp_path / variant, aug=aug)

            def lt_on_fixture():
                trainer.model.eval()
                with torch.no_grad():
                    value = float(total_loss(trainer.model(images), gts, lcfg))
                trainer.model.train()
                return value

            lt_first = lt_on_fixture()
            trainer.run()
            lt_final = lt_on_fixture()
            assert lt_final <= 0.10 * lt_first, \
                f"{variant}: L_T {lt_first:.3f} -> {lt_final:.3f}"

            trainer.model.eval()
            with torch.no_grad():
                pred = trainer.model(images)
            for i, gt_count in enumerate(OVERFIT_GT_COUNTS):
                pred_count = float(pred[i].sum())
                assert abs(pred_count - gt_count) <= 0.10 * gt_count, \
                    f"{variant} sample {i}: predicted {pred_count:.1f} vs {gt_count}"
            print(f"  {variant}: L_T {lt_first:.3f} -> {lt_final:.3f}, counts "
                  + str([round(float(p.sum()), 1) for p in pred]))
