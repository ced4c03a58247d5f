"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run on its own with ``pytest tests/test_acceptance.py -v``; the lines appear
even when pytest captures output.
"""

import json
import math
import struct
import time

import numpy as np
import pytest

from dalight3d import cli, ops
from dalight3d.checkpoint import load_checkpoint, read_tensors, save_checkpoint, write_tensors
from dalight3d.data import generate_phantom, phantom_rng, read_case, write_case
from dalight3d.errors import (
    BadMagicError,
    DimensionOverflowError,
    FormatError,
    TensorNameError,
    TruncatedFileError,
    VersionMismatchError,
)
from dalight3d.gradsuite import TOLERANCE, run_suite
from dalight3d.layers import GroupNorm, ScannerAwareNorm
from dalight3d.losses import LossConfig, ce_loss, combine, dice_loss, one_hot
from dalight3d.metrics import ConfusionMatrix, dice_per_million, ece, per_class
from dalight3d.model import (
    DALightModel,
    ModelConfig,
    count_params,
    separable_report,
    variant_config,
)
from dalight3d.optim import OptimState, adamw_step
from dalight3d.tensor import Tensor
from dalight3d.train import TrainConfig, mean_tumor_dice, train, validation_patches

from oracles import conv3d_loops, depthwise_loops, pointwise_loops


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {n:>2} {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail

    return emit


def T(a):
    return Tensor(np.asarray(a, dtype=float))


def test_01_gradient_correctness(report):
    t0 = time.perf_counter()
    results = run_suite(instances=5, include_end_to_end=False)
    elapsed = time.perf_counter() - t0
    names = {r.name for r in results}
    required = {"SepConv", "ScannerAwareNorm", "SE", "CSA", "SSFB", "LightweightBlock", "SegmentationHead"}
    worst = max(results, key=lambda r: r.max_rel_error)
    ok = required <= names and all(r.passed and r.instances >= 5 for r in results) and elapsed <= 120
    report(1, ok, f"{len(results)} entries x5, worst {worst.name} {worst.max_rel_error:.2e} "
                  f"(<= {TOLERANCE:g}), {elapsed:.0f} s (<= 120 s)")


def test_02_convolution_oracles(report):
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        cin, cout = rng.integers(1, 4, size=2)
        shape = (int(rng.integers(1, 3)), int(cin)) + tuple(int(n) for n in rng.integers(3, 7, size=3))
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        x = rng.normal(size=shape)
        w = rng.normal(size=(cout, cin, 3, 3, 3))
        b = rng.normal(size=cout)
        worst = max(worst, np.abs(ops.conv3d(T(x), T(w), T(b), stride, pad).data
                                  - conv3d_loops(x, w, b, stride, pad)).max())
        wd = rng.normal(size=(cin, 3, 3, 3))
        worst = max(worst, np.abs(ops.depthwise_conv3d(T(x), T(wd), stride, pad).data
                                  - depthwise_loops(x, wd, stride, pad)).max())
        wp = rng.normal(size=(cout, cin))
        worst = max(worst, np.abs(ops.pointwise_conv3d(T(x), T(wp), T(b)).data - pointwise_loops(x, wp, b)).max())
        # separable == dense conv with the composed kernel W[o, i] = wp[o, i] * wd[i]
        dense = wp[:, :, None, None, None] * wd[None]
        sep = ops.pointwise_conv3d(ops.depthwise_conv3d(T(x), T(wd), stride, pad), T(wp)).data
        worst = max(worst, np.abs(sep - ops.conv3d(T(x), T(dense), None, stride, pad).data).max())
    report(2, worst <= 1e-12, f"20 instances each, max abs deviation {worst:.1e} (<= 1e-12)")


def test_03_shape_ladder(report):
    model = DALightModel(ModelConfig(), seed=0)
    feats = model.features(Tensor(np.random.default_rng(0).normal(size=(1, 4, 64, 64, 64))), 0)
    want = {"e0": (24, 64), "e1": (48, 32), "e2": (96, 16), "e3": (432, 8),
            "d0": (96, 16), "d1": (48, 32), "d2": (24, 64), "logits": (4, 64)}
    got = {k: (feats[k].shape[1], feats[k].shape[2]) for k in want}
    cubic = all(len(set(feats[k].shape[2:])) == 1 for k in want)
    report(3, got == want and cubic, "stage shapes " + ", ".join(f"{k}={c}@{n}^3" for k, (c, n) in got.items()))


def test_04_parameter_accounting(report):
    full = DALightModel(ModelConfig(), seed=0)
    rows = separable_report(full)
    exact = all(r["separable"] == r["c_in"] * 27 + r["c_in"] * r["c_out"] + r["c_out"] for r in rows)
    totals = {v: count_params(DALightModel(variant_config(v), seed=0))["total"]
              for v in ("full", "no_sepconv", "no_scanner_norm", "no_csa", "no_ssfb")}
    f = totals["full"]
    band = 1.5e6 <= f <= 3.0e6
    order = (totals["no_sepconv"] >= 2.5 * f and totals["no_csa"] < f and totals["no_scanner_norm"] < f
             and totals["no_ssfb"] <= f)
    per_stage = count_params(full)["per_stage"]
    report(4, exact and band and order and len(rows) > 0,
           f"{len(rows)} separable layers exact; full={f:,} in [1.5M, 3.0M]; "
           f"no_sepconv={totals['no_sepconv'] / f:.2f}x, no_csa={totals['no_csa']:,}, "
           f"no_scanner_norm={totals['no_scanner_norm']:,}, no_ssfb={totals['no_ssfb']:,}; "
           f"stages {per_stage}")


def test_05_csa_complexity(report):
    model = DALightModel(ModelConfig(), seed=0)
    csa = model.e2.block.csa

    def attention_ops(d, hw):
        x = Tensor(np.random.default_rng(0).normal(size=(1, csa.channels, d, hw, hw)))
        csa(x)
        return csa.attention_flops

    depth = attention_ops(16, 8) / attention_ops(8, 8)
    plane = attention_ops(8, 16) / attention_ops(8, 8)
    ok = 3.6 <= depth <= 4.4 and plane <= 1.01
    report(5, ok, f"D doubled -> x{depth:.3f} (in [3.6, 4.4]); H,W doubled -> x{plane:.3f} (<= 1.01)")


def test_06_initialization_identities(report):
    small = dict(base_width=8, bottleneck_width=32, ssfb_rank=4)
    full = DALightModel(ModelConfig(**small), seed=0)
    rng = np.random.default_rng(1)
    # a non-zero head so the comparison sees the whole network
    full.head.classifier.weight.data[...] = rng.normal(size=full.head.classifier.weight.shape)
    no_csa = DALightModel(ModelConfig(**small, ablation="no_csa"), seed=5)
    no_csa.load_state_dict(full.state_dict(), strict=False)
    x = Tensor(rng.normal(size=(1, 4, 16, 16, 16)))
    gap = np.abs(full.logits(x, 3).data - no_csa.logits(x, 3).data).max()

    norm_gap = 0.0
    for channels in (8, 24, 96):
        san, gn = ScannerAwareNorm(channels, 8), GroupNorm(channels)
        xi = Tensor(rng.normal(size=(2, channels, 4, 4, 4)))
        plain = gn(xi).data
        for s in [None] + list(range(8)):
            norm_gap = max(norm_gap, np.abs(san(xi, s).data - plain).max())
    ok = gap <= 1e-12 and norm_gap <= 1e-15
    report(6, ok, f"full vs no_csa forward {gap:.1e} (<= 1e-12); ScannerAwareNorm vs GroupNorm {norm_gap:.1e} (<= 1e-15)")


def test_07_loss_contracts(report):
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 4, size=(1, 6, 6, 6))
    labels.flat[:4] = [0, 1, 2, 3]
    y = T(one_hot(labels))
    perfect = dice_loss(y, y).item()
    disjoint = dice_loss(T(one_hot(np.zeros_like(labels))), y).item()
    in_range = True
    for seed in range(50):
        logits = np.random.default_rng(seed).normal(scale=3, size=(1, 4, 6, 6, 6))
        p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        in_range &= 0.0 <= dice_loss(T(p), y).item() <= 1.0
    uniform = ce_loss(T(np.full((1, 4, 6, 6, 6), 0.25)), y).item()
    cfg = LossConfig()
    exact = combine(T(0.3), T(0.8), cfg).item() == cfg.lambda_dice * 0.3 + cfg.lambda_ce * 0.8
    ok = in_range and perfect <= 1e-4 and disjoint >= 0.999 and abs(uniform - math.log(4)) <= 1e-9 and exact
    report(7, ok, f"perfect {perfect:.1e}, disjoint {disjoint:.6f}, ce(uniform)-ln4 {uniform - math.log(4):.1e}, "
                  f"range ok {in_range}, combination exact {exact}")


def test_08_metric_identities(report):
    worst = 0.0
    for seed in range(100):
        counts = np.random.default_rng(seed).integers(1, 500, size=(4, 4))
        for row in per_class(ConfusionMatrix(counts)).per_class.values():
            d = row["dice_f1"]
            worst = max(worst, abs(row["iou"] - d / (2 - d)))
    dpm = round(dice_per_million(0.727, 2.22e6), 2)
    conf, corr = [], []
    for k in range(1, 11):
        conf += [k / 10] * 10
        corr += [True] * k + [False] * (10 - k)
    calibrated = ece(np.array(conf), np.array(corr)).ece
    hand = ece(np.full(10, 0.9), np.array([True] * 8 + [False] * 2)).ece
    ok = worst <= 1e-12 and dpm == 0.33 and calibrated <= 1e-12 and abs(hand - 0.1) <= 1e-12
    report(8, ok, f"iou identity {worst:.1e}; dice/M {dpm}; ece calibrated {calibrated:.1e}, hand {hand:.15f}")


def test_09_learning_smoke(report):
    cases = [generate_phantom(phantom_rng(0, f"case_{i:03d}"), (32, 32, 32), f"case_{i:03d}") for i in range(4)]
    model = DALightModel(ModelConfig(), seed=0)
    cfg = TrainConfig(epochs=2, steps_per_case=25, patch=16, lr=1e-3, val_every=2, seed=0)
    t0 = time.perf_counter()
    result = train(model, cases, cases, cfg)
    elapsed = time.perf_counter() - t0
    losses = [r["train_loss"] for r in result.rows]
    first, last = float(np.mean(losses[:10])), float(np.mean(losses[-10:]))
    dice = mean_tumor_dice(model, validation_patches(cases, cfg))
    ok = len(losses) == 200 and last < first and dice is not None and dice >= 0.60 and elapsed <= 900
    report(9, ok, f"200 steps in {elapsed:.0f} s; loss first10 {first:.3f} -> last10 {last:.3f}; "
                  f"tumor Dice on training patches {dice:.3f} (>= 0.60)")


def test_10_determinism(report, tmp_path):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({
        "extents": [16, 16, 16], "n_cases": 3,
        "model": {"base_width": 4, "bottleneck_width": 16, "ssfb_rank": 2},
        "train": {"epochs": 2, "steps_per_case": 2, "patch": 8, "lr": 1e-3, "val_every": 1},
    }))
    c = str(conf)
    assert cli.main(["synth", "--config", c, "--out", str(tmp_path / "data")]) == 0
    files = {}
    for run in ("a", "b"):
        out = tmp_path / run
        data = str(tmp_path / "data")
        assert cli.main(["train", "--config", c, "--data", data, "--out", str(out / "train")]) == 0
        assert cli.main(["eval", "--config", c, "--data", data, "--checkpoint", str(out / "train" / "best.ckpt"),
                         "--out", str(out / "eval")]) == 0
        files[run] = {name: (out / name).read_bytes()
                      for name in ("train/history.csv", "train/best.ckpt", "eval/metrics.json", "eval/confusion.csv")}
    same = [k for k in files["a"] if files["a"][k] == files["b"][k]]
    report(10, len(same) == len(files["a"]), f"byte-identical on rerun: {same}")


def test_11_round_trips(report, tmp_path):
    problems = []
    case = generate_phantom(phantom_rng(3, "case_007"), (16, 24, 32), "case_007")
    write_case(tmp_path / "a.dl3d", case)
    back = read_case(tmp_path / "a.dl3d")
    write_case(tmp_path / "b.dl3d", back)
    if (tmp_path / "a.dl3d").read_bytes() != (tmp_path / "b.dl3d").read_bytes():
        problems.append("dl3d rewrite differs")
    if not (np.array_equal(back.labels, case.labels) and np.array_equal(back.image, case.image.astype(np.float32))):
        problems.append("dl3d content differs")

    model = DALightModel(ModelConfig(base_width=4, bottleneck_width=16, ssfb_rank=2), seed=2)
    params = model.parameters()
    state = OptimState.for_params(params)
    adamw_step(params, [np.full(p.shape, 0.1) for p in params], state, 1e-3)
    save_checkpoint(tmp_path / "m.ckpt", model, state)
    tensors, meta = read_tensors(tmp_path / "m.ckpt")
    write_tensors(tmp_path / "n.ckpt", tensors, meta)
    if (tmp_path / "m.ckpt").read_bytes() != (tmp_path / "n.ckpt").read_bytes():
        problems.append("checkpoint rewrite differs")
    loaded, _, _ = load_checkpoint(tmp_path / "m.ckpt")
    if any(not np.array_equal(a, loaded.state_dict()[k]) for k, a in model.state_dict().items()):
        problems.append("checkpoint weights differ")

    raw_case = (tmp_path / "a.dl3d").read_bytes()
    raw_ckpt = (tmp_path / "m.ckpt").read_bytes()
    cases = [
        ("dl3d truncated", raw_case[:-1], read_case, TruncatedFileError),
        ("dl3d magic", b"NOPE" + raw_case[4:], read_case, BadMagicError),
        ("dl3d version", raw_case[:4] + b"\x09" + raw_case[5:], read_case, VersionMismatchError),
        ("dl3d dims", raw_case[:5] + struct.pack("<5I", 4, 2 ** 16, 2 ** 16, 2 ** 16, 8) + raw_case[25:],
         read_case, DimensionOverflowError),
        ("ckpt truncated", raw_ckpt[:len(raw_ckpt) // 2], read_tensors, TruncatedFileError),
        ("ckpt magic", b"NOPE" + raw_ckpt[4:], read_tensors, BadMagicError),
        ("ckpt version", raw_ckpt[:4] + b"\x09" + raw_ckpt[5:], read_tensors, VersionMismatchError),
    ]
    for label, blob, reader, err in cases:
        path = tmp_path / "bad"
        path.write_bytes(blob)
        try:
            reader(path)
            problems.append(f"{label}: accepted")
        except err:
            pass
        except Exception as exc:  # noqa: BLE001 - any other class is a failure here
            problems.append(f"{label}: {type(exc).__name__}")
    other = DALightModel(ModelConfig(base_width=4, bottleneck_width=16, ssfb_rank=2, ablation="no_csa"))
    try:
        other.load_state_dict(load_checkpoint(tmp_path / "m.ckpt")[0].state_dict())
        problems.append("name mismatch accepted")
    except TensorNameError:
        pass

    rng = np.random.default_rng(0)
    for i in range(200):
        blob = bytearray(raw_case if i % 2 else raw_ckpt)
        cut = int(rng.integers(0, len(blob)))
        blob = blob[:cut] if i % 4 < 2 else blob
        for j in rng.integers(0, max(1, min(len(blob), 64)), size=3):
            if len(blob):
                blob[j] = int(rng.integers(0, 256))
        path = tmp_path / "fuzz"
        path.write_bytes(bytes(blob))
        try:
            (read_case if i % 2 else read_tensors)(path)
        except FormatError:
            pass
        except Exception as exc:  # noqa: BLE001
            problems.append(f"fuzz {i}: {type(exc).__name__}")
    report(11, not problems, "round-trips bit-identical, 8 corruption classes and 200 fuzzed headers"
           + ("" if not problems else f"; problems {problems[:5]}"))
