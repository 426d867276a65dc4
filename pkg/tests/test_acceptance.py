"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line (printed in the terminal summary) and
then asserts, so a failure is both visible in the summary and red in pytest.
"""
import logging
import math
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import VERDICTS
from oracles import running_alpha_bar
from test_diffusion import BranchModel, ConstModel, _cfg, denoiser_grad_error
from test_augment import params_within
from vedit import cappipe as cp
from vedit import toy
from vedit.augment import AffineRanges, apply_trajectory, make_trajectory, sample_affine_params, synth_triplet
from vedit.cli import main
from vedit.dataset import MixedSampler, write_shard
from vedit.diffusion import GuidanceConfig
from vedit.metrics import frame_consistency
from vedit.numkit import Rng, Tensor
from vedit.schedule import NoiseSchedule, linear_beta_schedule, q_step

GOLDEN = Path(__file__).parent / "golden"
VIDEOS = Path(cp.__file__).parent / "data" / "videos"


def verdict(n: int, ok: bool, detail: str) -> None:
    VERDICTS[n] = (bool(ok), detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def test_criterion_01_schedule_exactness():
    t0 = time.perf_counter()
    s = linear_beta_schedule(1000, 1e-4, 2e-2)
    ref = np.array(running_alpha_bar(np.linspace(1e-4, 2e-2, 1000).tolist()))
    err = float(np.max(np.abs(s.alpha_bar - ref) / ref))
    dt = time.perf_counter() - t0
    verdict(1, err < 1e-12 and dt < 1.0, f"max rel err {err:.2e} (< 1e-12), {dt:.3f} s (< 1 s)")


def test_criterion_02_forward_process_equivalence():
    t0 = time.perf_counter()
    n, beta = 100_000, 0.05
    s = NoiseSchedule.from_betas([beta] * 10)
    z = Tensor(np.ones(n, dtype=np.float32))
    rng = Rng(20240)
    for t in range(10):
        z = q_step(z, t, Tensor(rng.normal((n,))), s)
    x = z.data.astype(np.float64)
    ab = running_alpha_bar([beta] * 10)[-1]
    mean_dev = abs(x.mean() - math.sqrt(ab))
    bound = 3 * math.sqrt(1 - ab) / math.sqrt(n)
    var_ratio = x.var() / (1 - ab)
    dt = time.perf_counter() - t0
    ok = mean_dev < bound and abs(var_ratio - 1) < 0.03 and dt < 10
    verdict(2, ok, f"|mean - sqrt(ab)| {mean_dev:.2e} (< {bound:.2e}), var ratio {var_ratio:.4f} "
                   f"(within 3%), {dt:.2f} s")


def test_criterion_03_gradient_fidelity():
    t0 = time.perf_counter()
    errs = [denoiser_grad_error(seed, ("pixel", "affine")[seed % 2]) for seed in range(20)]
    dt = time.perf_counter() - t0
    worst = max(errs)
    verdict(3, worst < 1e-4 and dt < 30, f"20 denoisers, max rel err {worst:.2e} (< 1e-4), {dt:.1f} s (< 30 s)")


def test_criterion_04_guidance_combination():
    stub = _cfg(BranchModel(0.0, 1.0, 0.5, 0.25), GuidanceConfig(1.0, 1.0))
    uncond = _cfg(BranchModel(0.125, 1.0, 0.5, 0.25), GuidanceConfig(0.0, 0.0))
    r = Rng(4)
    blind = []
    for lt, lv, k in zip(r.normal((20,)) * 3, r.normal((20,)) * 3, r.normal((20,))):
        k = float(np.float32(k))
        blind.append(float(np.max(np.abs(_cfg(ConstModel(k), GuidanceConfig(float(lt), float(lv))) - k))))
    ok = np.all(stub == 1.25) and np.all(uncond == 0.125) and max(blind) < 1e-6
    verdict(4, ok, f"stub -> {float(stub.flat[0])} (== 1.25), zero scales -> unconditional, "
                   f"blind model max dev {max(blind):.1e}")


def test_criterion_05_augmentation_contract():
    r = AffineRanges()
    inside = sum(params_within(sample_affine_params(s, r), r) for s in range(10_000))
    img = Rng(0).uniform(3 * 300 * 450).reshape(3, 300, 450).astype(np.float32)
    crop_shape = apply_trajectory(img, make_trajectory(1, 2, r)).shape
    same = []
    small = AffineRanges(resize_short=48, crop=40)
    for seed in range(20):
        I = Rng(seed).uniform(3 * 60 * 50).reshape(3, 60, 50).astype(np.float32)
        t = synth_triplet(I, I.copy(), "noop", make_trajectory(seed, 4, small), seed)
        same.append(t.video_in.tobytes() == t.video_out.tobytes())
    ok = inside == 10_000 and crop_shape[-2:] == (256, 256) and all(same)
    verdict(5, ok, f"{inside}/10000 params in range, crop {crop_shape[-2]}x{crop_shape[-1]}, "
                   f"I==E identical in {sum(same)}/20")


def test_criterion_06_parallel_determinism(tmp_path):
    a = toy.toy_dataset(1000, 6, workers=1)
    b = toy.toy_dataset(1000, 6, workers=8)
    write_shard(tmp_path / "a.evd", a, workers=1)
    write_shard(tmp_path / "b.evd", b, workers=8)
    da, db = (tmp_path / "a.evd").read_bytes(), (tmp_path / "b.evd").read_bytes()
    verdict(6, da == db, f"1k triplets, 1 vs 8 workers: {'identical' if da == db else 'different'} "
                         f"({len(da)} bytes)")


def test_criterion_07_mixing_ratio():
    s = MixedSampler(list(range(50)), list(range(50, 60)), (5, 1), seed=7)
    frac = sum(s.draw()[0] == 0 for _ in range(60_000)) / 60_000
    verdict(7, abs(frac - 5 / 6) < 0.02, f"source-A fraction {frac:.4f} (5/6 +- 0.02)")


@pytest.mark.slow
def test_criterion_08_end_to_end_toy_editing():
    t0 = time.perf_counter()
    run = toy.train_toy(n_train=512, steps=3000, T=50)
    test = toy.toy_dataset(64, 999)
    res = toy.evaluate(run.model, run.schedule, test, GuidanceConfig(1.5, 1.5), n_steps=25, seed=0)
    dt = time.perf_counter() - t0
    ok = res.mse < 0.05 and res.swap_mse > 0.05 and dt < 15 * 60
    per = ", ".join(f"{k} {v:.4f}" for k, v in res.per_instruction.items())
    verdict(8, ok, f"held-out MSE {res.mse:.4f} (< 0.05; do-nothing invert {toy.INVERT_BASELINE:.3f}) [{per}], "
                   f"swap MSE {res.swap_mse:.4f} (> 0.05), {dt:.0f} s (train {run.train_seconds:.0f} s)")


def test_criterion_09_metrics_sanity():
    static = np.repeat(Rng(0).uniform(3 * 16 * 16).reshape(1, 3, 16, 16), 6, axis=0)
    a = np.zeros((1, 8, 8))
    a[0, :4] = 1.0
    b = np.zeros((1, 8, 8))
    b[0, :, :4] = 1.0
    three = frame_consistency(np.stack([a, a, b]))
    worst = 0.0
    for k in range(100):
        r = Rng(k)
        T = 2 + r.integers(6)
        v = r.uniform(T * 3 * 12 * 12).reshape(T, 3, 12, 12)
        perm = np.argsort(r.uniform(T))
        worst = max(worst, abs(frame_consistency(v) - frame_consistency(v[perm])))
    st = frame_consistency(static)
    ok = abs(st - 1) < 1e-12 and abs(three - 1 / 3) < 1e-12 and worst < 1e-12
    verdict(9, ok, f"static {st:.12f}, three-frame {three:.12f} (1/3), permutation max dev {worst:.1e}")


def test_criterion_10_pipeline_golden_run(tmp_path, caplog):
    out = tmp_path / "p.evd"
    rc = main(["pipeline-videos", "--videos", str(VIDEOS), "--out", str(out), "--mock"])
    golden = rc == 0 and out.read_bytes() == (GOLDEN / "pipeline_mock.evd").read_bytes()
    c = cp.RetryingClient("summarizer", cp.FlakyTransport(2), cp.BackendEndpoint("mock://"), lambda s: None)
    with caplog.at_level(logging.INFO, logger="vedit.cappipe"):
        c.call("summarize", {"captions": ["a", "b"]})
    logged = sum(r.levelno == logging.INFO and "attempt=" in r.getMessage() for r in caplog.records)
    ok = golden and c.attempts == 3 and logged == 3
    verdict(10, ok, f"golden shard {'matches' if golden else 'DIFFERS'}, flaky backend: {c.attempts} attempts, "
                    f"{logged} logged (== 3)")
