"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Criteria 4-6 and 8 share one two-stage training run on 3 synthetic
subjects x 20 min (hidden 64, batch 64, 15 + 10 epochs).
"""
import io
import time

import numpy as np
import pytest
import torch

from seamcap import evaluation as ev
from seamcap import kinematics as K
from seamcap import neuralnet as nnm
from seamcap import signals as S
from seamcap import simulator as sim
from seamcap import stream
from seamcap.cli import main as cli_main
from seamcap.signals import CapFrame

from test_neuralnet import TINY, fd_relative_errors, tiny_batch

HOP = 4
DESK = dict(hidden=64, batch_size=64, random_state=0)
TARGET = 0


@pytest.fixture
def verdict(request):
    reporter = request.config.pluginmanager.get_plugin("terminalreporter")
    state = {}

    def record(n, text, ok):
        state.update(n=n, text=text, ok=ok)
    yield record
    if state:
        line = f"ACCEPTANCE {state['n']:>2}: {'PASS' if state['ok'] else 'FAIL'}  {state['text']}"
        if reporter is not None:
            reporter.write_line("")
            reporter.write_line(line)
        else:
            print(line)


@pytest.fixture(scope="module")
def desk_run():
    t0 = time.perf_counter()
    ds = sim.build_dataset(3, 20.0, sim.SplitSpec(8, 6, 1), seed=0)
    res = ev.run_protocol(ds, TARGET, DESK, hop=HOP, evaluate_independent=True)
    return ds, res, time.perf_counter() - t0


def test_c01_gradient_check(verdict):
    t0 = time.perf_counter()
    model = nnm.build_model(TINY, seed=3, dtype=torch.float64)
    errs = fd_relative_errors(model, tiny_batch(n=2, T=12), h=1e-5)
    dt = time.perf_counter() - t0
    worst = max(errs, key=errs.get)
    ok = errs[worst] < 1e-3 and dt < 60
    verdict(1, f"FD gradient check, worst rel err {errs[worst]:.2e} ({worst}), {dt:.1f} s", ok)
    assert ok


def test_c02_rotation_suite(verdict):
    rng = np.random.default_rng(2024)
    R = K.random_rotations(1000, rng)
    rt = np.abs(K.matrix_from_rot6d(K.rot6d_from_matrix(R)) - R).max()
    v = rng.normal(size=(1000, 6))
    M = K.matrix_from_rot6d(v)
    ortho = np.abs(np.einsum("nji,njk->nik", M, M) - np.eye(3)).max()
    det = np.abs(np.linalg.det(M) - 1).max()
    ok = rt < 1e-12 and ortho < 1e-9 and det < 1e-9
    verdict(2, f"rotation round trip {rt:.1e}, orthonormality {ortho:.1e}, det {det:.1e}", ok)
    assert ok


def test_c03_normalization_invariance(verdict):
    rng = np.random.default_rng(3)
    worst, median_ok = 0.0, True
    for i in range(100):
        subject = sim.SubjectProfile.sample(rng)
        s = sim.make_session(0, i, subject, 10.0, int(rng.integers(2**31)))
        codes = s.frames.codes
        base, _ = S.normalize_session(codes, hop=3)
        ch = int(rng.integers(8))
        for alpha in (0.5, 3.0):
            scaled = codes.astype(float)
            scaled[:, ch] *= alpha
            W, _ = S.normalize_session(scaled, hop=3)
            worst = max(worst, float(np.abs(W - base).max()))
        for _ in range(5):
            n = int(rng.integers(1, 200))
            lo = int(rng.integers(0, len(codes) - n))
            col = codes[lo:lo + n, ch]
            median_ok &= int(S.lower_median(col)) == sorted(col.tolist())[(n - 1) // 2]
    ok = worst < 1e-9 and median_ok
    verdict(3, f"max window change under channel scaling {worst:.1e}, medians exact {median_ok}", ok)
    assert ok


@pytest.mark.slow
def test_c04_end_to_end_learning(verdict, desk_run):
    _, res, wall = desk_run
    ratio = res.report.overall_cm / res.baseline_report.overall_cm
    ok = ratio < 0.60 and wall < 30 * 60
    verdict(4, f"adaptive {res.report.overall_cm:.2f} cm vs mean-pose {res.baseline_report.overall_cm:.2f} cm "
               f"(ratio {ratio:.3f}), independent {res.independent_report.overall_cm:.2f} cm, "
               f"wall {wall / 60:.1f} min", ok)
    assert ok


@pytest.mark.slow
def test_c05_finetune_curve(verdict, desk_run):
    ds, res, _ = desk_run
    curve = ev.finetune_curve({TARGET: res.independent}, ds, [2.5, 15.0], hop=HOP)
    small, large = curve.mpjpe_cm[0], curve.mpjpe_cm[-1]
    ok = large <= small * 0.95
    pts = ", ".join(f"{m:g} min {e:.2f} cm" for m, e in zip(curve.minutes, curve.mpjpe_cm))
    verdict(5, f"fine-tune curve {pts}", ok)
    assert ok


@pytest.mark.slow
def test_c06_ablation_direction(verdict, desk_run):
    ds, res, _ = desk_run
    out = ev.ablation(["shoulderTop", "sleeve"], ds, TARGET, DESK, hop=HOP, baseline=res.report)
    top, sleeve = out["shoulderTop"]["delta_cm"], out["sleeve"]["delta_cm"]
    ok = 0 < top < sleeve
    verdict(6, f"8 channels {res.report.overall_cm:.2f} cm, no shoulderTop {top:+.2f} cm, "
               f"no sleeve {sleeve:+.2f} cm", ok)
    assert ok


def test_c07_protocol(verdict):
    rng = np.random.default_rng(7)
    n = 100_000
    codes = rng.integers(0, S.MAX_CODE + 1, (n, 8))
    seqs, ts = rng.integers(0, 2**32, n), rng.integers(0, 2**63, n)
    frames = [CapFrame(int(a), int(b), tuple(int(c) for c in cc)) for a, b, cc in zip(seqs, ts, codes)]
    lossless = stream.decode_stream(b"".join(map(stream.encode_frame, frames))) == frames
    robust = True
    for _ in range(2000):
        dec = stream.FrameDecoder()
        try:
            dec.feed(rng.bytes(int(rng.integers(0, 300))))
        except Exception:  # noqa: BLE001
            robust = False
    block = S.FrameBlock(np.arange(60 * 32 + 1), np.arange(60 * 32 + 1) * 31250,
                         np.ones((60 * 32 + 1, 8), dtype=np.int64))
    stats = stream.replay(block, io.BytesIO(), rate=32.0)
    rate_ok = abs(stats.rate_hz - 32.0) / 32.0 < 0.01
    ok = lossless and robust and rate_ok
    verdict(7, f"1e5-frame fuzz lossless {lossless}, random bytes safe {robust}, "
               f"60 s replay {stats.rate_hz:.3f} Hz", ok)
    assert ok


@pytest.mark.slow
def test_c08_live_equals_offline(verdict, desk_run):
    ds, res, _ = desk_run
    s = ds.splits(TARGET)["test"][0]
    buf = io.BytesIO()
    stream.replay(s, buf, realtime=False)
    buf.seek(0)
    live = np.stack([p.joints for p in stream.infer_live(buf, res.adaptive, s.skeleton, drop=False)])
    _, offline = stream.offline_predictions(s.frames, res.adaptive, s.skeleton)
    ok = live.shape == offline.shape and np.array_equal(live, offline)
    verdict(8, f"{len(live)} live predictions bit-identical to offline: {ok}", ok)
    assert ok


def test_c09_inference_latency(verdict):
    net = nnm.build_model(nnm.Architecture(), seed=0)
    x = torch.as_tensor(np.random.default_rng(9).normal(0, 0.05, (1, 96, 8)), dtype=torch.float32)
    with torch.no_grad():
        for _ in range(5):
            net(x)
        times = []
        for _ in range(50):
            t0 = time.perf_counter()
            net(x)
            times.append(time.perf_counter() - t0)
    ms = float(np.median(times)) * 1e3
    ok = ms < 15.0
    verdict(9, f"hidden-256 single window {ms:.2f} ms median (p90 {np.percentile(times, 90) * 1e3:.2f} ms)", ok)
    assert ok


def test_c10_determinism(verdict, tmp_path):
    data = tmp_path / "data"
    assert cli_main(["--seed", "1", "--out", str(data), "simulate", "--subjects", "2",
                     "--minutes", "4", "--sessions", "4", "--finetune-sessions", "3"]) == 0
    runs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        assert cli_main(["--seed", "7", "--out", str(out), "train", "--data", str(data),
                         "--hidden", "16", "--epochs", "2", "--hop", "16"]) == 0
        runs.append(out)
    same = all((runs[0] / f).read_bytes() == (runs[1] / f).read_bytes()
               for f in ("metrics.csv", "weights.bin", "manifest.json"))
    rows = (runs[0] / "metrics.csv").read_text().count("\n") - 1
    verdict(10, f"two seeded train runs identical (metrics, weights, manifest): {same}, {rows} log rows", same)
    assert same
