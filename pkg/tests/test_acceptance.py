"""End-to-end acceptance criteria; each test records one PASS/FAIL line for the summary."""
import time

import numpy as np

from sbprobe.backends import BicubicUpscaler, MedianDenoiser, OracleInpainter, ThresholdFaceParser
from sbprobe.cli import main
from sbprobe.detection import dds_chi_square
from sbprobe.imaging import FaceImage
from sbprobe.masks import ChessPatternConfig, build_schedule
from sbprobe.metrics import ArrClampWarning, arr, auc, identity_loss, is_inverted, pic, suppression_rate
from sbprobe.recovery import RecoveryToolkit
from test_metrics import REFERENCE_ROWS, brute_auc

PIC_TOL = 0.001
AUC_TOL = 1e-12
CHI_TOL = 1e-12
ORACLE_TOL = 1e-9
MIN_SR_FGSM = 0.9
MIN_DETECTION_AUC = 0.85
CONTROL_BAND = (0.4, 0.6)


def test_1_reference_pic_identity(criterion):
    t = time.perf_counter()
    # reference values carry three decimals; 1e-12 absorbs binary rounding of the difference
    worst = max(abs(pic(sr, il) - p) for _, _, p, sr, il in REFERENCE_ROWS)
    dt = time.perf_counter() - t
    criterion(1, worst <= PIC_TOL + 1e-12 and dt < 0.1,
              f"{len(REFERENCE_ROWS)} rows, max |pic - reference| = {worst:.4f} (tol {PIC_TOL}), {dt * 1e3:.2f} ms")


def test_2_mask_count(criterion):
    t = time.perf_counter()
    sched = build_schedule(ChessPatternConfig.standard())
    dt = time.perf_counter() - t
    cov = sched.coverage
    ok = len(sched) == 1156 and cov.shape == (224, 224) and cov.min() >= 1 and dt < 10
    criterion(2, ok, f"N = {len(sched)}, coverage min {cov.min()} max {cov.max()} on {cov.shape}, {dt:.2f} s")


def test_3_auc_oracle(criterion):
    rng = np.random.default_rng(3)
    t = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 201))
        y = rng.integers(0, 2, n)
        y[:2] = [0, 1]
        # coarse grid so that ties are common
        s = rng.integers(0, 20, n) / 20 if rng.random() < 0.5 else rng.normal(size=n)
        worst = max(worst, abs(auc(s, y) - brute_auc(s, y)))
    dt = time.perf_counter() - t
    criterion(3, worst <= AUC_TOL and dt < 30, f"1000 instances, max deviation {worst:.1e}, {dt:.1f} s")


def test_4_chi_square_oracle(criterion):
    rng = np.random.default_rng(4)
    t = time.perf_counter()
    worst, lo, hi = 0.0, np.inf, -np.inf
    for _ in range(10000):
        k = int(rng.integers(2, 8))
        p, q = rng.dirichlet(np.ones(k)), rng.dirichlet(np.ones(k))
        if rng.random() < 0.2:
            p = np.eye(k)[rng.integers(k)]
        d = dds_chi_square(p, q)
        direct = sum((a - b) ** 2 / (a + b) for a, b in zip(p, q) if a + b > 0)
        worst = max(worst, abs(d - direct))
        lo, hi = min(lo, d), max(hi, d)
    dt = time.perf_counter() - t
    ok = worst <= CHI_TOL and lo >= 0 and hi <= 2 and dt < 10
    criterion(4, ok, f"10000 pairs, max deviation {worst:.1e}, range [{lo:.3f}, {hi:.3f}], {dt:.1f} s")


def test_5_oracle_inpainter(criterion):
    rng = np.random.default_rng(5)
    t = time.perf_counter()
    worst = 0.0
    for _ in range(20):
        orig = FaceImage(rng.random((64, 64, 3)))
        tk = RecoveryToolkit(MedianDenoiser(1), OracleInpainter(orig.pixels), None, ThresholdFaceParser(),
                             BicubicUpscaler(), ChessPatternConfig(2, 6, 1, (64, 64)))
        worst = max(worst, float(np.abs(tk.pipeline("PP-I")(orig).pixels - orig.pixels).max()))
    dt = time.perf_counter() - t
    criterion(5, worst < ORACLE_TOL and dt < 60, f"20 images (64 px), max deviation {worst:.1e}, {dt:.1f} s")


def test_6_fgsm_suppression(criterion, fgsm_result):
    plan = fgsm_result.record.plan
    n, k = len(plan.dataset), len(plan.splits.tests)
    sr = fgsm_result.vanilla.sr
    ok = n >= 400 and k == 4 and len(plan.dataset.classes) == 2 and sr.mean >= MIN_SR_FGSM
    criterion(6, ok, f"{n} images, {k} splits, SR = {sr} (min {MIN_SR_FGSM})")


def test_7_robustness_ordering(criterion, fgsm_result, san_result):
    # best prober = the one that recovers the attribute best, i.e. the lowest ARR
    f_name, f = min(((k, v.arr.mean) for k, v in fgsm_result.reports.items()), key=lambda kv: kv[1])
    s_name, s = min(((k, v.arr.mean) for k, v in san_result.reports.items()), key=lambda kv: kv[1])
    criterion(7, s > f, f"ARR synthesis {s:.3f} ({s_name}) > ARR FGSM {f:.3f} ({f_name})")


def test_8_detection(criterion, fgsm_result, identity_result):
    fd, idd = fgsm_result.detection, identity_result.detection
    ok = (fd.probers == ("PP-A", "PP-DI", "PP-B") and np.allclose(fd.weights, 1 / 3)
          and fd.auc.mean >= MIN_DETECTION_AUC and CONTROL_BAND[0] <= idd.auc.mean <= CONTROL_BAND[1])
    criterion(8, ok, f"APEND AUC FGSM {fd.auc} (min {MIN_DETECTION_AUC}), identity control {idd.auc}")


def test_9_determinism(criterion, tmp_path):
    outs = []
    t = time.perf_counter()
    for run in ("a", "b"):
        assert main(["evaluate", "--seed", "0", "--out", str(tmp_path / run)]) == 0
        outs.append((tmp_path / run / "report.json").read_bytes())
    dt = time.perf_counter() - t
    criterion(9, outs[0] == outs[1], f"two evaluate runs, {len(outs[0])} bytes each, identical, {dt:.0f} s")


def test_10_bounds_grid(criterion):
    import warnings
    t = time.perf_counter()
    g = np.arange(101) / 100
    go = g[1:]
    GO, GP = np.meshgrid(go, g, indexing="ij")
    sr = np.concatenate([np.ravel(suppression_rate(GO, GP, inv)) for inv in (True, False)])
    il = identity_loss(GO, GP)
    S, I = np.meshgrid(g, g)
    pc = pic(S, I)
    A, B, C = np.meshgrid(go, g, g, indexing="ij")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ArrClampWarning)
        ar = arr(A, B, C, is_inverted(B))
    dt = time.perf_counter() - t
    ok = (sr.min() >= 0 and sr.max() <= 1 and il.min() >= 0 and il.max() <= 1 and pc.min() >= -1
          and pc.max() <= 1 and ar.min() >= 0 and ar.max() <= 1 and dt < 5)
    criterion(10, ok, f"SR [{sr.min():.2f}, {sr.max():.2f}] IL [{il.min():.2f}, {il.max():.2f}] "
                      f"PIC [{pc.min():.2f}, {pc.max():.2f}] ARR [{ar.min():.2f}, {ar.max():.2f}], {dt:.2f} s")
