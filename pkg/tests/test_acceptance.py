"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line (shown in the terminal summary under
"acceptance criteria") together with the measured values and the runtime budget.
"""

from pathlib import Path

import numpy as np
import pytest
import torch
from click.testing import CliRunner
from hypothesis import given, settings

from oracles import (
    ap_oracle,
    aupro_oracle,
    backbone_specs,
    brute_force_codes,
    f1_oracle,
    hand_instances,
    numeric_grad,
    roc_oracle,
    small_scored_sets,
)

from edgeclad.backbone import build_backbone, count_resources, desk_spec, forward_prefix, forward_taps
from edgeclad.cli import main
from edgeclad.engine import desk_config, run_experiment
from edgeclad.metrics import aupro, f1_max, pr_auc, roc_auc
from edgeclad.models import distillation_loss
from edgeclad.quantizers import fq_dequantize, fq_quantize, pq_decode, pq_encode, pq_train
from edgeclad.replay import MB, PQParams, memory_footprint

CONFIGS = Path(__file__).parents[1] / "configs"


def test_criterion_01_footprint_arithmetic(criterion):
    with criterion(1, "memory footprints bit-exact", 1) as notes:
        got = {
            "raw_image": memory_footprint("raw_image", 100, (3, 256, 256)).total_bytes,
            "raw_feature": memory_footprint("raw_feature", 100, feature_shape=(24576,)).total_bytes,
            "fq_feature": memory_footprint("fq_feature", 100, feature_shape=(24576,)).total_bytes,
        }
        notes.extend(f"{k}={v:,} B ({v / MB:.2f} MB)" for k, v in got.items())
        assert got == {"raw_image": 19_660_800, "raw_feature": 9_830_400, "fq_feature": 2_458_400}
        assert [round(v / MB, 2) for v in got.values()] == [19.66, 9.83, 2.46]


def test_criterion_02_compression_ratios(criterion):
    with criterion(2, "FPQ total <= FQ and image/FPQ payload ratio >= 8x", 1) as notes:
        feature = (24, 32, 32)
        # one codebook per task over a ten-task stream
        pq = memory_footprint("pq_feature", 100, feature_shape=feature, pq_params=PQParams(), num_codebooks=10)
        fq = memory_footprint("fq_feature", 100, feature_shape=feature)
        raw = memory_footprint("raw_image", 100, (3, 256, 256))
        ratio = raw.payload_bytes / pq.payload_bytes
        notes.append(f"FPQ payload {pq.payload_bytes:,} + codebooks {pq.codebook_bytes:,} = {pq.total_bytes:,} B")
        notes.append(f"FQ {fq.total_bytes:,} B")
        notes.append(f"image/FPQ payload ratio {ratio:.1f}x (published figure: 12x)")
        assert pq.total_bytes <= fq.total_bytes
        assert ratio >= 8


def test_criterion_03_fq_roundtrip(criterion):
    with criterion(3, "FQ round-trip bound on 1,000 maps, constant maps exact", 10) as notes:
        rng = np.random.default_rng(2024)
        worst = 0.0
        for _ in range(1000):
            c, h, w = rng.integers(1, 33), rng.integers(1, 17), rng.integers(1, 17)
            x = (rng.normal(size=(c, h, w)) * rng.uniform(1e-3, 100) + rng.uniform(-50, 50)).astype(np.float32)
            err = np.abs(x.astype(np.float64) - fq_dequantize(fq_quantize(x))).max()
            bound = (float(x.max()) - float(x.min())) / 510 + 1e-7
            worst = max(worst, err / bound)
            assert err <= bound
        for value in (0.0, -3.25, 1e6, np.float32(0.1)):
            x = np.full((8, 4, 4), value, np.float32)
            np.testing.assert_array_equal(fq_dequantize(fq_quantize(x)), x)
        notes.append(f"worst error/bound {worst:.3f}")


def test_criterion_04_pq_oracle(criterion):
    with criterion(4, "PQ encode matches brute force; exact cover reconstructs exactly", 30) as notes:
        rng = np.random.default_rng(7)
        cases = [(d, m, b) for d in (4, 8, 12, 16) for m in (2, 4) for b in (1, 2, 3, 4) if d % m == 0]
        for d, m, b in cases:
            x = rng.normal(size=(200, d)).astype(np.float32)
            cb = pq_train(x, m, b, seed=d + m + b)
            np.testing.assert_array_equal(pq_encode(x, cb).codes, brute_force_codes(x, cb))
        for m in (2, 4):
            for b in (1, 2, 3, 4):
                sub = 16 // m
                pools = [rng.normal(size=(2**b, sub)).astype(np.float32) for _ in range(m)]
                x = np.concatenate([p[rng.integers(0, len(p), 200)] for p in pools], axis=1)
                cb = pq_train(x, m, b, seed=b)
                np.testing.assert_array_equal(pq_decode(pq_encode(x, cb), cb), x)
        notes.append(f"{len(cases)} (d, m, b) settings x 200 vectors; 8 exact-cover settings")


def test_criterion_05_metric_oracles(criterion):
    with criterion(5, "ROC/F1/AP exhaustive oracles; AUPRO on 8x8 instances within 1e-6", 120) as notes:
        n = 0
        for s, y in small_scored_sets():
            n += 1
            assert roc_auc(s, y) == float(roc_oracle(s, y))
            if sum(y):
                f1, thr = f1_max(s, y)
                of1, othr = f1_oracle(s, y)
                assert (f1, thr) == (float(of1), othr)
                assert abs(pr_auc(s, y) - float(ap_oracle(s, y))) <= 1e-12
        worst = 0.0
        for maps, masks in hand_instances():
            for limit in (0.3, 0.1, 1.0):
                diff = abs(aupro(np.stack(maps), np.stack(masks), fpr_limit=limit) - aupro_oracle(maps, masks, limit))
                worst = max(worst, diff)
        notes.append(f"{n:,} scored sets; max AUPRO deviation {worst:.1e}")
        assert worst <= 1e-6


def test_criterion_06_resource_identities(criterion):
    seen = []

    @settings(max_examples=100, deadline=None, database=None)
    @given(backbone_specs())
    def identities(spec):
        seen.append(spec)
        rs, rp = count_resources(spec, "stfpm"), count_resources(spec, "paste")
        assert rs.macs_inference - rp.macs_inference == rp.prefix_macs
        assert rp.architecture_bytes <= rs.architecture_bytes

    with criterion(6, "MAC difference equals prefix MACs; shared prefix never costs memory", 10) as notes:
        identities()
        desk_s, desk_p = count_resources(desk_spec(), "stfpm"), count_resources(desk_spec(), "paste")
        saving = 1 - desk_p.macs_inference / desk_s.macs_inference
        notes.append(f"{len(seen)} generated specs; desk backbone inference MACs {desk_s.macs_inference:,} -> "
                     f"{desk_p.macs_inference:,} ({saving:.1%} fewer)")
        assert len(seen) >= 100


def test_criterion_07_split_equivalence(criterion):
    with criterion(7, "taps from stored split features equal taps from images", 60) as notes:
        net = build_backbone(desk_spec())
        gen = torch.Generator().manual_seed(11)
        worst = 0.0
        for _ in range(50):
            x = torch.rand(1, 3, 64, 64, generator=gen)
            direct = forward_taps(net, x, "student")
            via = forward_taps(net, forward_prefix(net, x), "student", from_split=True)
            for a, b in zip(direct, via):
                worst = max(worst, (a - b).abs().max().item())
        notes.append(f"50 inputs; max deviation {worst:.1e}")
        assert worst <= 1e-6


@pytest.mark.slow
def test_criterion_08_continual_learning(criterion):
    with criterion(8, "CL behaviour on the 5-task synthetic stream, 3 seeds", 30 * 60) as notes:
        kinds = ("FT", "Replay", "FeatureReplay", "FQReplay")
        f1 = {k: [] for k in kinds}
        fg = {k: [] for k in kinds}
        for seed in (0, 1, 2):
            for kind in kinds:
                r = run_experiment(desk_config(kind, seed=seed))
                f1[kind].append(r.final("pixel_f1"))
                fg[kind].append(r.forgetting("pixel_f1"))
        mf1 = {k: float(np.mean(v)) for k, v in f1.items()}
        mfg = {k: float(np.mean(v)) for k, v in fg.items()}
        notes.append("pixel-F1 " + ", ".join(f"{k} {v:.3f}" for k, v in mf1.items()))
        notes.append("forgetting " + ", ".join(f"{k} {v:.3f}" for k, v in mfg.items()))
        checks = {
            "Replay - FT >= 0.05": mf1["Replay"] - mf1["FT"] >= 0.05,
            "forgetting Replay < FT": mfg["Replay"] < mfg["FT"],
            "|FeatureReplay - Replay| <= 0.05": abs(mf1["FeatureReplay"] - mf1["Replay"]) <= 0.05,
            "FQReplay <= FeatureReplay + 0.02": mf1["FQReplay"] <= mf1["FeatureReplay"] + 0.02,
        }
        failed = [name for name, ok in checks.items() if not ok]
        assert not failed, failed


@pytest.mark.slow
def test_criterion_09_determinism(criterion, tmp_path):
    with criterion(9, "two runs of one config and seed give byte-identical metrics.csv", 30 * 60) as notes:
        runner = CliRunner()
        cfg = CONFIGS / "desk_fqreplay.json"
        for name in ("a", "b"):
            res = runner.invoke(main, ["run", str(cfg), str(tmp_path / name)])
            assert res.exit_code == 0, res.output
        a, b = ((tmp_path / n / "metrics.csv").read_bytes() for n in ("a", "b"))
        rows = len(a.splitlines()) - 1
        notes.append(f"{cfg.name}: {len(a):,} bytes, {rows} rows")
        assert a == b


def test_criterion_10_gradient_check(criterion):
    with criterion(10, "distillation loss gradient vs central differences", 30) as notes:
        worst = 0.0
        for seed in range(10):
            gen = torch.Generator().manual_seed(seed)
            shapes = [(2, 3 + seed % 3, 3, 3), (1, 5, 2, 2), (2, 2, 1, 4)]
            teacher = [torch.randn(s, generator=gen, dtype=torch.float64) for s in shapes]
            student = [torch.randn(s, generator=gen, dtype=torch.float64, requires_grad=True) for s in shapes]
            distillation_loss(teacher, student).backward()
            for s in student:
                x = s.detach().clone()
                others = [o.detach() if o is not s else x for o in student]
                num = numeric_grad(lambda: distillation_loss(teacher, others), x)
                worst = max(worst, ((s.grad - num).norm() / num.norm()).item())
        notes.append(f"10 random feature sets; max relative error {worst:.1e}")
        assert worst <= 1e-3
