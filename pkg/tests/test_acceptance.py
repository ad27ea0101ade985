"""Acceptance checks, one test per numbered criterion.

Criteria 4, 5, 8 and 10 share an end-to-end run driven through the CLI
(data generation, four trainings, evaluation, comparison).  That run takes
tens of minutes on one core.  Set ``LONGIPROG_ACCEPTANCE_DIR`` to keep its
artefacts; otherwise they go to pytest's temporary directory.

Every criterion records a one-line PASS/FAIL summary that is printed at the
end of the session.
"""

import json
import math
import os
import time
from pathlib import Path
from statistics import NormalDist

import numpy as np
import pytest

from longiprog import eval as ev
from longiprog import tensor_nn as nn
from longiprog.cli import main
from longiprog.datagen import GenConfig, blob_mask, plan_patients, read_blobs, split_dataset
from longiprog.manifest import Visit, VisitSequence, read_manifest, resolve
from longiprog.model import Model, ModelConfig, interval_scales
from longiprog.ppm import read_ppm
from longiprog.preprocess import PreprocessConfig, RawImage, preprocess_mask
from longiprog.tensor_nn import GruParams, Tensor
from longiprog.train import CheckpointError, decode_checkpoint, encode_checkpoint

pytestmark = pytest.mark.acceptance

# dataset and training settings shared by the end-to-end criteria
DATA_ARGS = ["--eyes", "3000", "--seed", "42", "--progress-rate", "0.092"]
TRAIN_CONFIG = """\
[train]
lr = 0.001
pos_weight = balanced
max_epochs = 80
batch_size = 16
seed = 0
split_seed = 0
"""
RUNS = {
    "t3": ["--timepoints", "3"],
    "t2": ["--timepoints", "2"],
    "t1": ["--timepoints", "1"],
    "t3_unscaled": ["--timepoints", "3", "--no-interval-scaling"],
}


# -- 1. gradient integrity -----------------------------------------------------------------


def _weighted_sum(out, seed):
    # fixed random weights so no symmetric cancellation can hide an error
    weights = np.random.default_rng([seed, 1]).normal(size=out.shape)
    return nn.total(out * Tensor(weights))


def _layer_checks(seed):
    rng = np.random.default_rng(seed)
    w = seed
    g = lambda *s: rng.normal(size=s)  # noqa: E731
    gru_shapes = {n: (4, 3) if n[0] == "w" else (3, 3) if n[0] == "u" else (3,) for n in GruParams.NAMES}
    checks = {
        "dense": (lambda a: _weighted_sum(nn.dense(a[0], a[1], a[2]), w), [g(4, 5), g(5, 3), g(3)]),
        "conv2d stride 1": (
            lambda a: _weighted_sum(nn.conv2d(a[0], a[1], stride=1, padding="same", bias=a[2]), w),
            [g(1, 6, 6, 2), g(3, 3, 2, 3), g(3)],
        ),
        "conv2d stride 2": (
            lambda a: _weighted_sum(nn.conv2d(a[0], a[1], stride=2, padding="same", bias=a[2]), w),
            [g(1, 7, 7, 2), g(3, 3, 2, 3), g(3)],
        ),
        "relu": (lambda a: _weighted_sum(nn.relu(a[0]), w), [g(5, 4)]),
        "global average pool": (lambda a: _weighted_sum(nn.global_avg_pool(a[0]), w), [g(2, 4, 4, 3)]),
        "sigmoid": (lambda a: _weighted_sum(nn.sigmoid(a[0]), w), [g(6)]),
        "tanh": (lambda a: _weighted_sum(nn.tanh(a[0]), w), [g(6)]),
        "gru step": (
            lambda a: _weighted_sum(nn.gru_step(a[0], a[1], GruParams(**dict(zip(GruParams.NAMES, a[2:])))), w),
            [g(2, 4), g(2, 3)] + [g(*gru_shapes[n]) for n in GruParams.NAMES],
        ),
        "bce loss": (
            lambda a: nn.bce_loss(nn.sigmoid(a[0]), np.array([1, 0, 1, 1, 0]), 2.5),
            [g(5)],
        ),
    }
    return checks


def _pipeline_check(seed):
    cfg = ModelConfig(input_size=8, channels=(2, 2), features=3, timepoints=3)
    model = Model.init(cfg, seed)
    names = list(model.parameters())
    rng = np.random.default_rng([seed, 3])
    imgs = rng.random((2, 3, 8, 8, 3))
    scales = np.stack([interval_scales([0, 2, 3], 4), interval_scales([0, 1.5, 2.5], 6)])
    y = np.array([1, 0])

    def fn(arrs):
        for n, a in zip(names, arrs):
            if n.startswith("encoder"):
                idx = int(n.split(".")[1][4:])
                (model.encoder.kernels if n.endswith("kernel") else model.encoder.biases)[idx] = a
            else:
                setattr(model.head.gru, n.split(".")[-1], a)
        return nn.bce_loss(nn.sigmoid(model.logits(imgs, scales)), y)

    # biases off zero so no ReLU input sits on its kink
    start = [p.data + (0.05 if p.data.ndim == 1 else 0.0) for p in model.parameters().values()]
    return nn.grad_check(fn, start)


def test_criterion_01_gradient_integrity(record_criterion):
    t0 = time.perf_counter()
    worst = {}
    for seed in range(20):
        for name, (fn, inputs) in _layer_checks(seed).items():
            worst[name] = max(worst.get(name, 0.0), nn.grad_check(fn, inputs))
        worst["3-timepoint pipeline"] = max(worst.get("3-timepoint pipeline", 0.0), _pipeline_check(seed))
    elapsed = time.perf_counter() - t0
    top = max(worst.values())
    ok = top < 1e-4 and elapsed < 120
    record_criterion(1, ok, f"max relative error {top:.2e} over 20 seeds, {len(worst)} checks, {elapsed:.1f}s")
    assert top < 1e-4, worst
    assert elapsed < 120


# -- 2. metric oracles ---------------------------------------------------------------------


def _brute_auc(s, y):
    pos, neg = s[y == 1], s[y == 0]
    wins = 0.0
    for p in pos:
        for q in neg:
            wins += 1.0 if p > q else 0.5 if p == q else 0.0
    return wins / (pos.size * neg.size)


def _scan_youden(s, y):
    u = np.unique(s)
    cands = [-math.inf] + [(a + b) / 2 for a, b in zip(u[:-1], u[1:])] + [math.inf]
    m, n = int(y.sum()), int(y.size - y.sum())
    best = None
    for c in cands:
        tp = int(np.sum((s > c) & (y == 1)))
        tn = int(np.sum((s <= c) & (y == 0)))
        key = (tp * n + tn * m, tp, -c)
        if best is None or key > best[0]:
            best = (key, (c, tp / m, tn / n))
    return best[1]


def test_criterion_02_metric_oracles(record_criterion):
    rng = np.random.default_rng(2)
    auc_err, youden_bad = 0.0, 0
    for _ in range(200):
        n = int(rng.integers(2, 101))
        y = rng.integers(0, 2, n)
        y[:2] = (0, 1)
        rng.shuffle(y)
        s = np.round(rng.random(n) + 0.3 * y, int(rng.integers(1, 4)))  # coarse rounding makes ties
        auc_err = max(auc_err, abs(ev.auc(s, y) - _brute_auc(s, y)))
        youden_bad += ev.youden(s, y) != _scan_youden(s, y)
    ok = auc_err <= 1e-12 and youden_bad == 0
    record_criterion(2, ok, f"200 instances: max AUC error {auc_err:.1e}, Youden mismatches {youden_bad}")
    assert auc_err <= 1e-12
    assert youden_bad == 0


# -- 3. De Long validity -------------------------------------------------------------------


def _binormal(rng, m, n, true_auc):
    mu = math.sqrt(2) * NormalDist().inv_cdf(true_auc)
    return np.r_[rng.normal(mu, 1, m), rng.normal(0, 1, n)], np.r_[np.ones(m, int), np.zeros(n, int)]


def test_criterion_03_delong_validity(record_criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    ratios = []
    for k in range(20):
        s, y = _binormal(rng, 100, 100, 0.8)
        _, se = ev.delong_variance(s, y)
        boot = []
        for r in range(2000):
            idx, _ = ev.replicate_indices(y, k, r)
            boot.append(ev.auc(s[idx], y[idx]))
        ratios.append(se / np.std(boot, ddof=1))
    covered = 0
    for _ in range(500):
        s, y = _binormal(rng, 100, 100, 0.8)
        a, se = ev.delong_variance(s, y)
        lo, hi = ev.delong_ci(a, se)
        covered += lo <= 0.8 <= hi
    elapsed = time.perf_counter() - t0
    worst = max(abs(r - 1) for r in ratios)
    coverage = covered / 500
    ok = worst <= 0.15 and 0.93 <= coverage <= 0.97 and elapsed < 600
    record_criterion(
        3, ok, f"SE ratio to bootstrap within {worst:.1%} over 20 sets, CI coverage {coverage:.3f}, {elapsed:.0f}s"
    )
    assert worst <= 0.15
    assert 0.93 <= coverage <= 0.97
    assert elapsed < 600


# -- 6. interval-scale formula -------------------------------------------------------------


def test_criterion_06_interval_scale_values(record_criterion):
    near = interval_scales([0, 2, 3], 4).tolist()
    far = interval_scales([0, 2, 3], 7.5).tolist()
    ok = near == [0.25, 0.5, 1.0] and far == [1 / 7.5, 1 / 5.5, 1 / 4.5]
    record_criterion(6, ok, f"times 0/2/3 predicting at 4 give {near}")
    assert ok


# -- 7. leakage guard ----------------------------------------------------------------------


def test_criterion_07_no_patient_spans_splits(record_criterion):
    plan = plan_patients(GenConfig(n_eyes=3000, seed=42))
    records = [VisitSequence(p, e, (Visit("x", 0.0),), 1.0, 0) for p, e in plan]
    leaks = 0
    for seed in range(100):
        owner = {}
        for k, part in enumerate(split_dataset(records, seed=seed)):
            for r in part:
                leaks += owner.setdefault(r.patient_id, k) != k
    two_eyed = len(plan) - len({p for p, _ in plan})
    record_criterion(7, leaks == 0, f"100 split seeds, {two_eyed} two-eyed patients, {leaks} leaks")
    assert leaks == 0


# -- 9. checkpoint format ------------------------------------------------------------------


def _corrupt(blob, offset, value):
    b = bytearray(blob)
    b[offset] = value
    return bytes(b)


FIXTURES = {
    "magic": lambda b: _corrupt(b, 0, ord("X")),
    "version": lambda b: _corrupt(b, 4, 2),
    "header-length": lambda b: _corrupt(b, 11, 0x7F),
    "header-json": lambda b: _corrupt(b, 12, ord("[")),
    "header-schema": lambda b: _corrupt(b, b.find(b'"model"') + 1, ord("n")),
    "payload-size": lambda b: _corrupt(b, b.find(b'"payload_bytes":') + 16, ord("9")),
    "payload-crc": lambda b: _corrupt(b, len(b) - 1, b[-1] ^ 0x01),
    "dtype": lambda b: _corrupt(b, b.find(b'"<f8"') + 3, ord("3")),
}


def test_criterion_09_checkpoint_format(record_criterion):
    model = Model.init(ModelConfig(timepoints=3), 9)
    blob = encode_checkpoint(model, {"purpose": "acceptance"})
    ck = decode_checkpoint(blob)
    again = encode_checkpoint(ck.to_model(), ck.meta)
    structured = {}
    for reason, make in FIXTURES.items():
        bad = make(blob)
        assert sum(x != y for x, y in zip(bad, blob)) == 1
        try:
            decode_checkpoint(bad)
            structured[reason] = "loaded"
        except CheckpointError as exc:
            structured[reason] = exc.reason
    good = sum(structured[k] == k for k in FIXTURES)
    ok = again == blob and good == len(FIXTURES)
    record_criterion(9, ok, f"save/load/save identical: {again == blob}; structured errors {good}/{len(FIXTURES)}")
    assert again == blob
    assert structured == {k: k for k in FIXTURES}


# -- end-to-end runs (criteria 4, 5, 8, 10) ------------------------------------------------


def _cli(*args):
    code = main([str(a) for a in args])
    assert code == 0, f"longiprog {' '.join(map(str, args))} exited {code}"


def run_pipeline(root: Path, with_cam: bool) -> dict:
    """Generate, train, evaluate and compare inside ``root`` using relative paths."""
    root.mkdir(parents=True, exist_ok=True)
    here = os.getcwd()
    seed_env = os.environ.pop("LONGIPROG_SEED", None)
    os.chdir(root)
    timings = {}
    try:
        Path("train.cfg").write_text(TRAIN_CONFIG)
        t0 = time.perf_counter()
        _cli("gen-data", "--out", "data", *DATA_ARGS)
        timings["gen-data"] = time.perf_counter() - t0
        for name, flags in RUNS.items():
            t = time.perf_counter()
            _cli("train", "--manifest", "data/manifest.jsonl", "--config", "train.cfg", "--out", f"{name}.ckpt", *flags)
            _cli("eval", "--ckpt", f"{name}.ckpt", "--manifest", "data/manifest.jsonl", "--report", f"{name}.json",
                 "--roc", f"{name}.roc.csv", "--bootstrap", "2000", "--seed", "0")
            timings[name] = time.perf_counter() - t
        t = time.perf_counter()
        _cli("compare", "--report-a", "t3.json", "--report-b", "t1.json", "--out", "t3_vs_t1.json")
        _cli("compare", "--report-a", "t3.json", "--report-b", "t2.json", "--out", "t3_vs_t2.json")
        _cli("compare", "--report-a", "t3.json", "--report-b", "t3_unscaled.json", "--out", "t3_vs_unscaled.json")
        timings["compare"] = time.perf_counter() - t
        if with_cam:
            t = time.perf_counter()
            # four hidden units: with one, a near-zero draw for the single dense weight can starve the GRU
            _cli("train", "--manifest", "data/manifest.jsonl", "--config", "train.cfg", "--out", "cam.ckpt",
                 "--timepoints", "3", "--cam-head", "--hidden", "4")
            timings["cam"] = time.perf_counter() - t
    finally:
        os.chdir(here)
        if seed_env is not None:
            os.environ["LONGIPROG_SEED"] = seed_env
    timings["criterion 4"] = timings["gen-data"] + timings["t3"] + timings["t2"] + timings["t1"] + timings["compare"]
    return {"root": root, "timings": timings}


@pytest.fixture(scope="session")
def acceptance_root(tmp_path_factory):
    base = os.environ.get("LONGIPROG_ACCEPTANCE_DIR")
    return Path(base) if base else tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="session")
def first_run(acceptance_root):
    return run_pipeline(acceptance_root / "run1", with_cam=True)


@pytest.fixture(scope="session")
def second_run(acceptance_root, first_run):
    return run_pipeline(acceptance_root / "run2", with_cam=False)


def _report(run, name):
    return ev.EvalReport.load(run["root"] / f"{name}.json")


def test_criterion_04_ordering(first_run, record_criterion):
    a3, a2, a1 = (_report(first_run, n).auc for n in ("t3", "t2", "t1"))
    cmp = json.loads((first_run["root"] / "t3_vs_t1.json").read_text())
    minutes = first_run["timings"]["criterion 4"] / 60
    checks = {
        "AUC(T=3) >= AUC(T=2)": a3 >= a2,
        "AUC(T=2) >= AUC(T=1) + 0.03": a2 >= a1 + 0.03,
        "AUC(T=3) >= 0.85": a3 >= 0.85,
        "compare T=3 vs T=1 p < 0.05": cmp["p"] < 0.05,
        "runtime < 30 min": minutes < 30,
    }
    failed = [k for k, v in checks.items() if not v]
    record_criterion(
        4,
        not failed,
        f"AUC T3 {a3:.4f}, T2 {a2:.4f}, T1 {a1:.4f}; p(T3 vs T1) {cmp['p']:.2e}; {minutes:.1f} min"
        + (f"; failed: {', '.join(failed)}" if failed else ""),
    )
    assert not failed, checks


def test_criterion_05_interval_scaling_ablation(first_run, record_criterion):
    on = _report(first_run, "t3").auc
    off = _report(first_run, "t3_unscaled").auc
    cmp = json.loads((first_run["root"] / "t3_vs_unscaled.json").read_text())
    ok = on - off >= 0.02
    record_criterion(5, ok, f"AUC with scaling {on:.4f}, without {off:.4f}, gain {on - off:+.4f} (p {cmp['p']:.3g})")
    assert ok


def test_criterion_08_determinism(first_run, second_run, record_criterion):
    names = ["data/manifest.jsonl"]
    for run in RUNS:
        names += [f"{run}.ckpt", f"{run}.json"]
    names += ["t3_vs_t1.json", "t3_vs_unscaled.json"]
    differ = [n for n in names if (first_run["root"] / n).read_bytes() != (second_run["root"] / n).read_bytes()]
    record_criterion(8, not differ, f"{len(names) - len(differ)}/{len(names)} artefacts byte-identical across two runs")
    assert not differ


def _top_decile_hits(maps, masks):
    inside = total = 0
    for m, mask in zip(maps, masks):
        top = m >= np.quantile(m, 0.9)
        inside += int(np.sum(top & mask))
        total += int(np.sum(top))
    return inside, total


def test_criterion_10_cam_localization(first_run, record_criterion):
    root = first_run["root"]
    manifest = root / "data" / "manifest.jsonl"
    records = read_manifest(manifest)
    blobs = read_blobs(root / "data" / "blobs.jsonl")
    _, val, test = split_dataset(records, seed=0)  # the split_seed in TRAIN_CONFIG
    eyes = sorted((r for r in val + test if r.label), key=lambda r: r.eye_id)[:50]
    assert len(eyes) == 50
    pconf = PreprocessConfig(target_size=64)
    inside = total = 0
    mask_area = []
    out = root / "cam"
    for rec in eyes:
        assert main(["cam", "--ckpt", str(root / "cam.ckpt"), "--manifest", str(manifest), "--eye-id", rec.eye_id,
                     "--out", str(out)]) == 0
        maps = np.load(out / f"{rec.eye_id}_cam.npy")
        masks = []
        for k, visit in enumerate(rec.visits[-3:], start=len(rec.visits) - 3):
            raw = RawImage(read_ppm(resolve(manifest, visit.image)), rec.eye)
            drawn = blob_mask(blobs[rec.eye_id]["visits"][k], raw.pixels.shape[0])
            masks.append(preprocess_mask(drawn, raw, pconf))
            mask_area.append(masks[-1].mean())
        i, t = _top_decile_hits(maps, masks)
        inside += i
        total += t
    frac = inside / total
    ok = frac >= 0.60
    record_criterion(
        10, ok, f"{frac:.1%} of top-decile pixels inside drusen masks (masks cover {np.mean(mask_area):.1%} of the image)"
    )
    assert ok
