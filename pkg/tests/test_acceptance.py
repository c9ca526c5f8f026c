"""Release gate: one test per acceptance criterion, at stated tolerances.

Run with ``pytest tests/test_acceptance.py -v`` to get one pass/fail line per
criterion. The slowest entry is the end-to-end training check (a few minutes
on CPU; its own budget is 20 minutes). The suite-wide runtime bound for
criterion 8 is evidenced by the full `pytest -v` run; the test here
additionally re-runs a bundle of cross-module invariants at >= 100 random
cases each.
"""

import hashlib
import json
import math
import time

import numpy as np
import pytest
import torch
from scipy import stats

from fdcheck import check_param_gradients

from compiqa.baselines import ms_ssim, psnr
from compiqa.cli import main
from compiqa.dpis import Dpis, StageExtractor, dpis_distance
from compiqa.evaluation import (accuracy, patch_average_score, predict_judgment,
                                plcc, run_comparison, run_mos_evaluation, srocc)
from compiqa.fixtures import FixtureSpec, make_fixture
from compiqa.head import DistanceHead, MappingMode, RegressionHead
from compiqa.images import (DEFAULT_CHANNEL_MEAN, DEFAULT_CHANNEL_STD,
                            PatchSpec, normalize)
from compiqa.swin import (BackboneConfig, SwinBackbone, extract_stage_features,
                          fuse_pyramid, tiny_test_config)
from compiqa.swiniqa import SwinIQA, score_pair
from compiqa.training import (JudgmentNet, TrainConfig, bce_loss,
                              load_mos_manifest, load_triplet_manifest,
                              mos_to_s, pretrain, total_loss, train_joint)
from compiqa.dpis import unit_normalize


@pytest.fixture(scope="module")
def fixture_data(tmp_path_factory):
    """The built-in synthetic dataset at its shipped size (500 triplets)."""
    out = tmp_path_factory.mktemp("accept_fixture")
    summary = make_fixture(out, FixtureSpec())
    triplets = load_triplet_manifest(summary.triplet_manifest, out)
    mos = load_mos_manifest(summary.mos_manifest, out)
    return out, triplets, mos


def test_criterion_1_fused_pyramid_shapes():
    """224x224x3 at C=96: stages 28x28x192 / 14x14x384 / 7x7x768 / 7x7x768,
    fusion 28x28x2112; everything under 10 s on CPU with random weights."""
    start = time.monotonic()
    backbone = SwinBackbone(BackboneConfig(), seed=0)
    img = normalize(np.random.default_rng(0).random((224, 224, 3)).astype(np.float32),
                    DEFAULT_CHANNEL_MEAN, DEFAULT_CHANNEL_STD)
    sf = extract_stage_features(backbone, img)
    fused = fuse_pyramid(sf)
    elapsed = time.monotonic() - start
    assert sf.f1.shape == (28, 28, 192)
    assert sf.f2.shape == (14, 14, 384)
    assert sf.f3.shape == (7, 7, 768)
    assert sf.f4.shape == (7, 7, 768)
    assert fused.shape == (28, 28, 2112)  # 22C with C=96
    assert elapsed < 10.0


def test_criterion_2_fixture_trained_model_beats_psnr(fixture_data):
    """Jointly trained tiny-config model reaches 2AFC >= 0.90 on the 500
    synthetic triplets and beats the PSNR baseline, in under 20 min CPU."""
    _, triplets, mos = fixture_data
    start = time.monotonic()
    model = SwinIQA(tiny_test_config(), mode=1, dim=32, heads=2, seed=0)
    judgment = JudgmentNet(seed=2)
    config = TrainConfig(pretrain_lr=1e-3, pretrain_epochs=20, pretrain_batch=48,
                         joint_lr=5e-4, judgment_lr=5e-4, joint_epochs=20,
                         joint_batch=16, crop=64, seed=0)
    pretrain(model, mos, config)
    train_joint(model, judgment, triplets, mos, config)
    model.eval()
    report = run_comparison(
        [("swiniqa", lambda r, d: score_pair(model, r, d)),
         ("psnr", lambda r, d: -psnr(r, d).value)],
        triplets, PatchSpec(size=64, stride=64))
    elapsed = time.monotonic() - start
    by_name = {row.metric: row.accuracy for row in report.accuracy_rows}
    assert by_name["swiniqa"] >= 0.90
    assert by_name["swiniqa"] > by_name["psnr"]
    assert elapsed < 1200.0


def test_criterion_3_gradients_match_finite_differences():
    """Cross-attention block, regression head, judgment net, and the DPIS
    similarity path: analytic vs central differences, 1e-3 relative,
    >= 50 sampled parameters each, under 5 min total."""
    start = time.monotonic()
    g = torch.Generator().manual_seed(30)

    head = DistanceHead(12, mode=MappingMode.CROSS_ATTN, dim=8, heads=2,
                        seed=31).double()
    ref = torch.randn(1, 6, 8, generator=g, dtype=torch.float64)
    dist = torch.randn(1, 6, 8, generator=g, dtype=torch.float64)
    weights = torch.randn(1, 6, 8, generator=g, dtype=torch.float64)
    n = check_param_gradients(
        head, lambda: (weights * head.cross_attention(ref, dist)).sum(),
        n_samples=50, rng=np.random.default_rng(32), rel_tol=1e-3)
    assert n >= 50

    regressor = RegressionHead(16).double()
    tokens = torch.randn(2, 5, 16, generator=g, dtype=torch.float64)
    n = check_param_gradients(
        regressor, lambda: regressor(tokens).sum(),
        n_samples=50, rng=np.random.default_rng(33), rel_tol=1e-3)
    assert n >= 50

    judgment = JudgmentNet(seed=34).double()
    feats = torch.randn(8, 5, generator=g, dtype=torch.float64)
    n = check_param_gradients(
        judgment, lambda: judgment(feats).sum(),
        n_samples=64, rng=np.random.default_rng(35), rel_tol=1e-3)
    assert n >= 50

    dpis = Dpis(vgg=StageExtractor("vgg_stub", seed=36),
                alex=StageExtractor("alexnet_stub", seed=37)).double()
    rng = np.random.default_rng(37)
    tx, ty, gx, gy = (torch.from_numpy(rng.standard_normal((1, 3, 16, 16)))
                      for _ in range(4))
    n = check_param_gradients(
        dpis.params, lambda: dpis.d1(tx, ty, gx, gy).sum(),
        n_samples=50, rng=np.random.default_rng(38), rel_tol=1e-3)
    assert n >= 50

    assert time.monotonic() - start < 300.0


def test_criterion_4_closed_form_metric_values():
    """PSNR(uniform 16/255 diff) = 24.048 +- 0.001; MS-SSIM(x,x) = 1.0
    exactly; DPIS(x,x) = 0 +- 1e-9 with zero-bias fusions;
    bce_loss(0.5, 1) = ln 2 +- 1e-9."""
    rng = np.random.default_rng(40)
    x = rng.random((64, 64, 3)) * 0.9
    y = np.clip(x + 16.0 / 255.0, 0.0, 1.0)
    assert abs(psnr(x, y).value - 24.048) <= 0.001

    img = rng.random((161, 161, 3))
    assert ms_ssim(img, img).value == 1.0

    model = Dpis(seed=0)  # fc_sim / fc_l2 biases are zero at init
    assert float(model.params.fc_sim.bias.detach()) == 0.0
    assert float(model.params.fc_l2.bias.detach()) == 0.0
    same = rng.random((64, 64, 3)).astype(np.float32)
    assert abs(dpis_distance(model, same, same)) <= 1e-9

    value = float(bce_loss(torch.tensor(0.5), torch.tensor(1.0)))
    assert abs(value - math.log(2.0)) <= 1e-9


def test_criterion_5_pipeline_matches_definitional_oracles():
    """Judgment/accuracy pipeline equals a brute-force evaluator on 1,000
    random records; SROCC/PLCC match scipy oracles to 1e-12 on 100
    ten-point samples."""
    rng = np.random.default_rng(50)
    d1 = rng.integers(0, 5, 1000) / 4.0  # coarse grid so ties occur
    d2 = rng.integers(0, 5, 1000) / 4.0
    h = rng.choice([0.0, 0.25, 0.5, 0.75, 1.0], 1000)
    predictions = [predict_judgment(a, b) for a, b in zip(d1, d2)]
    pipeline = accuracy(predictions, h)
    correct = used = 0
    for a, b, label in zip(d1, d2, h):
        if label == 0.5:
            continue
        used += 1
        verdict = 0 if a <= b else 1
        correct += verdict == (1 if label > 0.5 else 0)
    assert pipeline == correct / used

    for i in range(100):
        sub = np.random.default_rng(51 + i)
        if i % 3 == 0:  # integer-valued samples exercise tie handling
            x = sub.integers(0, 4, 10).astype(float)
            y = sub.integers(0, 4, 10).astype(float)
            if np.ptp(x) == 0 or np.ptp(y) == 0:
                continue
        else:
            x = sub.standard_normal(10)
            y = sub.standard_normal(10)
        assert abs(srocc(x, y) - float(stats.spearmanr(x, y)[0])) <= 1e-12
        assert abs(plcc(x, y) - float(stats.pearsonr(x, y)[0])) <= 1e-12


def test_criterion_6_all_mapping_modes_train_and_report(fixture_data):
    """Every mapping mode trains on the synthetic fixture without numerical
    failure; the report renders a mode-by-mode SROCC/PLCC grid; mode 3 maps
    identical inputs to exactly zero."""
    _, triplets, mos = fixture_data
    rows = []
    spec = PatchSpec(size=64, stride=64)
    for mode in (1, 2, 3, 4):
        model = SwinIQA(tiny_test_config(), mode=mode, dim=32, heads=2, seed=0)
        judgment = JudgmentNet(seed=2)
        config = TrainConfig(joint_lr=5e-4, judgment_lr=5e-4, joint_epochs=2,
                             joint_batch=16, crop=64, seed=0)
        log = train_joint(model, judgment, triplets[:64], mos[:64], config)
        assert all(math.isfinite(v) for v in log), f"mode {mode} diverged"
        model.eval()
        report = run_mos_evaluation(
            [(f"mode-{mode}", lambda r, d, m=model: score_pair(m, r, d))],
            mos[:96], spec)
        rows.extend(report.correlation_rows)

    assert [row.metric for row in rows] == ["mode-1", "mode-2", "mode-3", "mode-4"]
    assert all(math.isfinite(row.srocc) and math.isfinite(row.plcc)
               for row in rows)
    from compiqa.evaluation import EvalReport
    grid = EvalReport(correlation_rows=tuple(rows)).table()
    lines = grid.splitlines()
    assert "srocc" in lines[0] and "plcc" in lines[0]
    assert len(lines) == 5  # header + one row per mode

    head = DistanceHead(12, mode=MappingMode.DIFF, dim=8, heads=2, seed=60)
    f = torch.randn(1, 12, 3, 4, generator=torch.Generator().manual_seed(61))
    assert (head.map_distance(f, f.clone()) == 0).all()


def test_criterion_7_training_runs_are_byte_deterministic(tmp_path):
    """Two single-worker cmd_train runs with the same seed produce
    byte-identical checkpoints and loss logs."""
    fx = tmp_path / "fx"
    assert main(["make-fixture", "--out", str(fx), "--refs", "4",
                 "--triplets", "24", "--seed", "0"]) == 0
    args = ["train", "--triplet-manifest", str(fx / "triplets.jsonl"),
            "--mos-manifest", str(fx / "mos.jsonl"),
            "--backbone", "tiny-test", "--joint-epochs", "2",
            "--joint-batch", "8", "--crop", "64", "--seed", "11",
            "--workers", "1"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    for name in ("joint.npz", "train_log.txt"):
        digest_a = hashlib.sha256((tmp_path / "a" / name).read_bytes()).hexdigest()
        digest_b = hashlib.sha256((tmp_path / "b" / name).read_bytes()).hexdigest()
        assert digest_a == digest_b, name


def test_criterion_8_invariant_bundle():
    """Cross-module invariants re-checked at >= 100 random cases each. The
    module suites hold the full set; the whole-suite runtime bound is read
    off the pytest run itself."""
    start = time.monotonic()
    rng = np.random.default_rng(80)

    # psnr symmetry, and more error means less psnr
    for _ in range(100):
        x = rng.random((24, 24, 3))
        y = rng.random((24, 24, 3))
        assert psnr(x, y).value == psnr(y, x).value
        small = np.clip(x + 4 / 255, 0, 1)
        big = np.clip(x + 32 / 255, 0, 1)
        assert psnr(x, small).value > psnr(x, big).value

    # ms-ssim self-similarity is exactly one at full scale count
    for _ in range(100):
        img = rng.random((161, 161, 3))
        assert ms_ssim(img, img).value == 1.0

    # unit normalization is bitwise invariant to power-of-two rescaling
    for _ in range(100):
        f = torch.from_numpy(rng.standard_normal((1, 4, 5, 5)).astype(np.float32))
        k = float(2.0 ** rng.integers(-3, 4))
        assert torch.equal(unit_normalize(f * k), unit_normalize(f))

    # a predictor that echoes the binarized label is always 100% accurate
    for _ in range(100):
        labels = rng.choice([0.0, 0.25, 0.75, 1.0], 20)
        predictions = [1 if v > 0.5 else 0 for v in labels]
        assert accuracy(predictions, labels) == 1.0

    # rank correlation is bitwise invariant under strictly monotone maps
    for _ in range(100):
        x = rng.standard_normal(12)
        y = rng.standard_normal(12)
        assert srocc(np.exp(x), y) == srocc(x, y)

    # loss composition is exact float arithmetic
    for _ in range(100):
        bce = float(rng.random())
        reg = float(rng.random())
        lam = float(rng.integers(0, 8))
        assert total_loss(bce, reg, lam) == bce + lam * reg

    # mos mapping stays in range and inverts exactly at the endpoints
    for _ in range(100):
        mos = float(rng.uniform(0.0, 5.0))
        s = mos_to_s(mos)
        assert 0.0 <= s <= 1.0
    assert mos_to_s(0.0) == 1.0 and mos_to_s(5.0) == 0.0

    assert time.monotonic() - start < 300.0
