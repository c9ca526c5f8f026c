import json
import math

import numpy as np
import pytest

from compiqa import images
from compiqa.baselines import psnr
from compiqa.errors import EvaluationError, NumericError
from compiqa.evaluation import (
    EvalReport,
    accuracy,
    patch_average_score,
    plcc,
    predict_judgment,
    run_comparison,
    run_mos_evaluation,
    srocc,
)
from compiqa.images import PatchSpec
from compiqa.training import MosSample, TripletSample


# -------------------------------------------------------------- judgments


def test_predict_judgment_rule():
    assert predict_judgment(0.2, 0.9) == 0
    assert predict_judgment(0.9, 0.2) == 1
    assert predict_judgment(0.4, 0.4) == 0  # ties take the <= branch
    assert predict_judgment(-math.inf, 1.0) == 0
    with pytest.raises(NumericError):
        predict_judgment(math.nan, 0.5)
    with pytest.raises(NumericError):
        predict_judgment(0.5, math.nan)


def test_accuracy_examples():
    assert accuracy([1, 0, 1], [0.8, 0.2, 0.5]) == 1.0
    assert accuracy([1, 1, 0, 0], [1.0, 0.0, 1.0, 0.0]) == 0.5
    assert accuracy([0, 1], [0.2, 0.9]) == 1.0


def test_accuracy_validation():
    with pytest.raises(EvaluationError, match="after dropping"):
        accuracy([1, 0], [0.5, 0.5])
    with pytest.raises(EvaluationError):
        accuracy([1, 0, 1], [1.0, 0.0])
    with pytest.raises(EvaluationError, match="not 0 or 1"):
        accuracy([2, 0], [1.0, 0.0])
    with pytest.raises(EvaluationError, match="outside"):
        accuracy([1, 0], [1.0, 1.2])


def test_judgment_pipeline_matches_bruteforce():
    # independent re-derivation of the whole predict+accuracy pipeline
    rng = np.random.default_rng(0)
    n = 1000
    d1 = rng.integers(0, 5, n) / 4.0  # coarse grid so ties actually occur
    d2 = rng.integers(0, 5, n) / 4.0
    labels = rng.choice([0.0, 0.25, 0.5, 0.75, 1.0], n)

    matches = 0
    used = 0
    for i in range(n):
        if labels[i] == 0.5:
            continue
        used += 1
        h_star = 0 if d1[i] <= d2[i] else 1
        matches += h_star == (1 if labels[i] > 0.5 else 0)
    want = matches / used

    predictions = [predict_judgment(a, b) for a, b in zip(d1, d2)]
    assert accuracy(predictions, list(labels)) == want


def test_random_guess_converges_to_half():
    rng = np.random.default_rng(1)
    n = 10_000
    labels = rng.choice([0.0, 1.0], n)
    predictions = list(rng.integers(0, 2, n))
    assert abs(accuracy(predictions, list(labels)) - 0.5) < 0.05


# ------------------------------------------------------------ correlations


def test_srocc_monotone_invariance():
    rng = np.random.default_rng(2)
    transforms = [
        lambda v: v**3,
        np.exp,
        lambda v: 2 * v + 1,
        np.arctan,
    ]
    for i in range(20):
        x = rng.integers(0, 8, 12) / 2.0  # with ties
        y = rng.standard_normal(12)
        base = srocc(x, y)
        for transform in transforms:
            assert srocc(transform(x), y) == base
        assert srocc(x, x**3 if i % 2 else np.exp(x)) == pytest.approx(1.0, abs=1e-12)


def test_srocc_reversal_and_hand_case():
    assert srocc([1, 2, 3, 4], [8, 6, 4, 2]) == pytest.approx(-1.0, abs=1e-12)

    # hand oracle: ranks of [1,2,2,4] are [1, 2.5, 2.5, 4]
    rx = [1.0, 2.5, 2.5, 4.0]
    ry = [1.0, 2.0, 3.0, 4.0]
    mx = sum(rx) / 4
    my = sum(ry) / 4
    cov = sum((a - mx) * (b - my) for a, b in zip(rx, ry))
    vx = sum((a - mx) ** 2 for a in rx)
    vy = sum((b - my) ** 2 for b in ry)
    want = cov / math.sqrt(vx * vy)
    assert srocc([1, 2, 2, 4], [10, 20, 30, 40]) == pytest.approx(want, abs=1e-12)


def test_plcc_affine_and_oracle():
    rng = np.random.default_rng(3)
    x = rng.standard_normal(10)
    assert plcc(x, 2 * x + 3) == pytest.approx(1.0, abs=1e-12)
    assert plcc(x, -x) == pytest.approx(-1.0, abs=1e-12)

    y = rng.standard_normal(10)
    mx = sum(x) / 10
    my = sum(y) / 10
    cov = sum((a - mx) * (b - my) for a, b in zip(x, y))
    vx = sum((a - mx) ** 2 for a in x)
    vy = sum((b - my) ** 2 for b in y)
    assert plcc(x, y) == pytest.approx(cov / math.sqrt(vx * vy), abs=1e-12)


def test_correlation_degenerate_inputs():
    assert math.isnan(srocc([1.0, 1.0, 1.0], [1, 2, 3]))
    assert math.isnan(plcc([1, 2, 3], [5.0, 5.0, 5.0]))
    with pytest.raises(EvaluationError, match="at least 3"):
        srocc([1, 2], [3, 4])
    with pytest.raises(EvaluationError):
        plcc([1, 2, 3], [1, 2])
    with pytest.raises(NumericError):
        srocc([1.0, math.inf, 3.0], [1, 2, 3])


# ---------------------------------------------------------- patch scoring


def _mad(ref, dist):
    return float(np.mean(np.abs(ref - dist)))


def test_patch_average_single_patch_equals_direct_call():
    rng = np.random.default_rng(4)
    ref = rng.random((32, 32, 3))
    dist = rng.random((32, 32, 3))
    spec = PatchSpec(size=32, stride=32)
    assert patch_average_score(_mad, ref, dist, spec) == _mad(ref, dist)


def test_patch_average_constant_metric():
    rng = np.random.default_rng(5)
    ref = rng.random((96, 64, 3))
    dist = rng.random((96, 64, 3))
    spec = PatchSpec(size=32, stride=16)
    assert patch_average_score(lambda r, d: 0.7, ref, dist, spec) == 0.7


def test_patch_average_two_patch_stub():
    values = iter([0.2, 0.6])
    ref = np.zeros((32, 64, 3))
    spec = PatchSpec(size=32, stride=32)
    got = patch_average_score(lambda r, d: next(values), ref, ref, spec)
    assert got == pytest.approx(0.4, abs=1e-12)


def test_patch_average_enumeration_order_invariant():
    rng = np.random.default_rng(6)
    ref = rng.random((80, 80, 3))
    dist = rng.random((80, 80, 3))
    spec = PatchSpec(size=32, stride=16)
    got = patch_average_score(_mad, ref, dist, spec)
    want = np.mean([
        _mad(rp, dp)
        for rp, dp in reversed(list(zip(
            images.patch_grid(ref, spec), images.patch_grid(dist, spec)
        )))
    ])
    assert got == pytest.approx(want, abs=1e-12)


def test_patch_average_shape_mismatch():
    with pytest.raises(EvaluationError):
        patch_average_score(_mad, np.zeros((32, 32, 3)), np.zeros((32, 36, 3)),
                            PatchSpec(size=32, stride=32))


# -------------------------------------------------------------- comparison


def _write_triplets(tmp_path, n=10, size=32, seed=7, half_votes=0):
    """Triplets whose correct answer is a weak-vs-strong noise call."""
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n):
        ref = rng.random((size, size, 3))
        weak = np.clip(ref + rng.normal(0, 0.02, ref.shape), 0, 1)
        strong = np.clip(ref + rng.normal(0, 0.3, ref.shape), 0, 1)
        images.save_image(ref, tmp_path / f"ref_{i}.png")
        images.save_image(weak, tmp_path / f"weak_{i}.png")
        images.save_image(strong, tmp_path / f"strong_{i}.png")
        if i < half_votes:
            h = 0.5
        else:
            h = 1.0 if i % 2 == 0 else 0.0
        if h == 1.0 or h == 0.5:
            a, b = f"strong_{i}.png", f"weak_{i}.png"
        else:
            a, b = f"weak_{i}.png", f"strong_{i}.png"
        samples.append(TripletSample(tmp_path / f"ref_{i}.png", tmp_path / a,
                                     tmp_path / b, h))
    return samples


def _neg_psnr(ref, dist):
    return -psnr(ref, dist).value


def test_run_comparison_matches_hand_computed_accuracy(tmp_path):
    samples = _write_triplets(tmp_path, n=10)
    spec = PatchSpec(size=32, stride=32)

    matches = 0
    for t in samples:
        ref = images.load_image(t.ref_path)
        d1 = _neg_psnr(ref, images.load_image(t.dist_a_path))
        d2 = _neg_psnr(ref, images.load_image(t.dist_b_path))
        h_star = 0 if d1 <= d2 else 1
        matches += h_star == t.h
    want = matches / len(samples)

    report = run_comparison([("neg_psnr", _neg_psnr)], samples, spec)
    row = report.accuracy_rows[0]
    assert row.metric == "neg_psnr"
    assert row.accuracy == want
    assert row.accuracy == 1.0  # noise-severity calls are easy for PSNR
    assert row.n_used == 10
    assert row.n_excluded == 0
    assert report.n_records == 10
    assert report.patch_size == 32


def test_run_comparison_identical_metrics_identical_rows(tmp_path):
    samples = _write_triplets(tmp_path, n=6)
    spec = PatchSpec(size=32, stride=32)
    report = run_comparison(
        [("first", _neg_psnr), ("second", _neg_psnr)], samples, spec
    )
    first, second = report.accuracy_rows
    assert first.accuracy == second.accuracy
    assert first.n_used == second.n_used


def test_run_comparison_excludes_half_votes(tmp_path):
    samples = _write_triplets(tmp_path, n=8, half_votes=2)
    spec = PatchSpec(size=32, stride=32)
    report = run_comparison([("neg_psnr", _neg_psnr)], samples, spec)
    row = report.accuracy_rows[0]
    assert row.n_excluded == 2
    assert row.n_used == 6
    assert any("h=0.5" in note for note in report.notes)


def test_run_comparison_missing_image(tmp_path):
    samples = _write_triplets(tmp_path, n=4)
    (tmp_path / "ref_1.png").unlink()
    spec = PatchSpec(size=32, stride=32)
    with pytest.raises(Exception):
        run_comparison([("neg_psnr", _neg_psnr)], samples, spec)
    report = run_comparison([("neg_psnr", _neg_psnr)], samples, spec,
                            skip_missing=True)
    assert report.accuracy_rows[0].n_used == 3
    assert any("skipped" in note for note in report.notes)


def test_run_comparison_writes_csv(tmp_path):
    samples = _write_triplets(tmp_path, n=4)
    spec = PatchSpec(size=32, stride=32)
    csv_path = tmp_path / "out" / "per_triplet.csv"
    run_comparison([("neg_psnr", _neg_psnr)], samples, spec,
                   per_triplet_csv=csv_path)
    lines = csv_path.read_text().strip().splitlines()
    assert lines[0].startswith("metric,ref,dist_a,dist_b,d1,d2,h_star,h")
    assert len(lines) == 1 + 4


def test_report_rendering(tmp_path):
    samples = _write_triplets(tmp_path, n=4)
    spec = PatchSpec(size=32, stride=32)
    report = run_comparison([("neg_psnr", _neg_psnr)], samples, spec)
    text = report.table()
    assert "neg_psnr" in text
    assert "accuracy" in text
    parsed = [json.loads(line) for line in report.records()]
    assert parsed[0]["kind"] == "accuracy"
    assert parsed[0]["metric"] == "neg_psnr"
    assert 0.0 <= parsed[0]["accuracy"] <= 1.0


def test_run_comparison_rejects_empty():
    with pytest.raises(EvaluationError):
        run_comparison([], [TripletSample("a", "b", "c", 1.0)],
                       PatchSpec(size=32, stride=32))
    with pytest.raises(EvaluationError):
        run_comparison([("m", _mad)], [], PatchSpec(size=32, stride=32))


# ---------------------------------------------------------- mos evaluation


def test_run_mos_evaluation_correlations(tmp_path):
    rng = np.random.default_rng(8)
    samples = []
    for i in range(8):
        ref = rng.random((32, 32, 3))
        sigma = 0.02 + 0.04 * i
        dist = np.clip(ref + rng.normal(0, sigma, ref.shape), 0, 1)
        images.save_image(ref, tmp_path / f"r{i}.png")
        images.save_image(dist, tmp_path / f"d{i}.png")
        mos = 5.0 * (1.0 - min(0.9, sigma * 2.5))
        samples.append(MosSample(tmp_path / f"r{i}.png", tmp_path / f"d{i}.png",
                                 mos, 1.0 - mos / 5.0))
    spec = PatchSpec(size=32, stride=32)
    report = run_mos_evaluation(
        [("neg_psnr", _neg_psnr), ("flat", lambda r, d: 0.5)], samples, spec
    )
    good, flat = report.correlation_rows
    assert good.metric == "neg_psnr"
    assert good.srocc > 0.8
    assert good.plcc > 0.8
    assert -1.0 <= good.srocc <= 1.0 and -1.0 <= good.plcc <= 1.0
    assert not good.flagged
    assert good.n == 8

    assert flat.flagged
    assert math.isnan(flat.srocc)
    assert any("undefined" in note for note in report.notes)
    # flagged correlations render as null in records and * in the table
    parsed = [json.loads(line) for line in report.records()]
    assert parsed[1]["srocc"] is None
    assert "*" in report.table()


def test_run_mos_evaluation_needs_three(tmp_path):
    rng = np.random.default_rng(9)
    samples = []
    for i in range(2):
        img = rng.random((32, 32, 3))
        images.save_image(img, tmp_path / f"x{i}.png")
        samples.append(MosSample(tmp_path / f"x{i}.png", tmp_path / f"x{i}.png",
                                 3.0, 0.4))
    with pytest.raises(EvaluationError, match="need 3"):
        run_mos_evaluation([("m", _mad)], samples,
                           PatchSpec(size=32, stride=32))


def test_empty_report_renders():
    report = EvalReport()
    assert report.table() == ""
    assert report.records() == []
