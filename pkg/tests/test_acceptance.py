"""Acceptance gate: one test per criterion, each reporting a PASS/FAIL line.

The lines are printed as each check finishes and repeated in the pytest
terminal summary.  Criteria 7 and 9 run the full desk-scale synthetic
cross-validation twice (roughly an hour on one core) and are marked slow.
Run ``python tests/test_acceptance.py`` for the fast criteria only.
"""
import functools
import json
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from gradcases import OP_CASES, tiny_unet_case  # noqa: E402

from voxelseg import cli, evaluation, losses, training, unet3d  # noqa: E402
from voxelseg.augment import (AugmentConfig, affine_spatial, apply_pipeline, brightness, contrast,  # noqa: E402
                              derive_rng, elastic_deform, gamma, gaussian_noise, make_rng, mirror)
from voxelseg.nn.checkpoint import load_checkpoint  # noqa: E402
from voxelseg.nn.gradcheck import grad_check  # noqa: E402
from voxelseg.nn.tensor import Tensor  # noqa: E402
from voxelseg.patch_engine import grid_positions, reassemble, slice_grid  # noqa: E402
from voxelseg.volume_io import (ImageVolume, IntensityKind, LabelVolume, Sample, read_mvf, read_nifti,  # noqa: E402
                                read_nifti_labels, write_mvf, write_nifti, write_nifti_labels)

RESULTS: dict[int, str] = {}

TITLES = {
    1: "gradient correctness",
    2: "loss identities",
    3: "metric oracle equivalence",
    4: "patch-engine exactness",
    5: "shape contract",
    6: "augmentation identity/determinism",
    7: "synthetic end-to-end",
    8: "schedule conformance",
    9: "reproducibility",
    10: "format round trips",
}


def criterion(n):
    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            start = time.perf_counter()
            try:
                detail = fn(*args, **kwargs)
            except BaseException as exc:
                if isinstance(exc, pytest.skip.Exception):
                    raise
                _report(n, "FAIL", f"{type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}",
                        start)
                raise
            _report(n, "PASS", detail or "", start)
        return run
    return wrap


def _report(n, status, detail, start):
    line = f"criterion {n:2d} {TITLES[n]:<36} {status}  ({time.perf_counter() - start:.1f}s) {detail}".rstrip()
    RESULTS[n] = line
    print(line)


# --- 1 --------------------------------------------------------------------------

@criterion(1)
def test_criterion_01_gradients():
    start = time.perf_counter()
    worst = {}
    for name, case in OP_CASES.items():
        for seed in range(20):
            fn, inputs, h = case(seed)
            worst[name] = max(worst.get(name, 0.0), grad_check(fn, inputs, h=h))
    bad = {k: v for k, v in worst.items() if not v < 1e-6}
    assert not bad, f"double-precision op checks above 1e-6: {bad}"
    unet_worst = 0.0
    for seed in range(5):
        fn, inputs = tiny_unet_case(seed, np.float32)
        unet_worst = max(unet_worst, grad_check(fn, inputs, h=1e-5, numeric_dtype=np.float64, max_coords=12))
    assert unet_worst < 1e-3, f"tiny U-Net + total loss: {unet_worst:.2e}"
    elapsed = time.perf_counter() - start
    assert elapsed < 120, f"took {elapsed:.0f}s"
    return f"ops max {max(worst.values()):.1e}, U-Net {unet_worst:.1e}"


# --- 2 --------------------------------------------------------------------------

@criterion(2)
def test_criterion_02_loss_identities():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        e = np.exp(rng.normal(size=(2, 3, 3, 2, 4)))
        p = e / e.sum(-1, keepdims=True)
        y = np.eye(4)[rng.integers(0, 4, (2, 3, 3, 2))]
        tv = float(losses.tversky_loss(Tensor(p), y, 0.5, 0.5, smooth=1e-5).data)
        worst = max(worst, abs(tv - losses.soft_dice_loss(p, y, smooth=2e-5)))
    assert worst < 1e-7
    y = np.eye(4)[rng.integers(0, 4, (1, 4, 4, 4))]
    perfect = float(losses.total_loss(Tensor(y), y).data)
    assert perfect < 1e-4
    cce = float(losses.cce_loss(Tensor(np.full((1, 2, 2, 2, 4), 0.25)), y[:, :2, :2, :2]).data)
    assert abs(cce - 1.386294) < 1e-5
    return f"tversky/dice gap {worst:.1e}, perfect {perfect:.1e}, uniform cce {cce:.6f}"


# --- 3 --------------------------------------------------------------------------

def _brute_counts(pred, gt, cls):
    tp = fp = tn = fn = 0
    for i in range(pred.shape[0]):
        for j in range(pred.shape[1]):
            for k in range(pred.shape[2]):
                p, g = pred[i, j, k] == cls, gt[i, j, k] == cls
                if p and g:
                    tp += 1
                elif p:
                    fp += 1
                elif g:
                    fn += 1
                else:
                    tn += 1
    return tp, fp, tn, fn


@criterion(3)
def test_criterion_03_metric_oracle():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        pred, gt = rng.integers(0, 4, (8, 8, 8)), rng.integers(0, 4, (8, 8, 8))
        for cls in range(4):
            tp, fp, tn, fn = _brute_counts(pred, gt, cls)
            c = evaluation.confusion(pred, gt, cls)
            assert tuple(c) == (tp, fp, tn, fn)
            assert evaluation.dsc(c) == (2 * tp / (2 * tp + fp + fn) if 2 * tp + fp + fn else 1.0)
            assert evaluation.sensitivity(c) == (tp / (tp + fn) if tp + fn else 1.0)
            assert evaluation.specificity(c) == (tn / (tn + fp) if tn + fp else 1.0)
    worked = evaluation.dsc(evaluation.ConfusionCounts(tp=3, fp=1, tn=3, fn=1))
    assert worked == 0.75
    return "100 seeds exact, worked DSC 0.75"


# --- 4 --------------------------------------------------------------------------

@criterion(4)
def test_criterion_04_patch_engine():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        e = rng.random((24, 24, 24, 4)).astype(np.float32)
        vol = e / e.sum(-1, keepdims=True)
        patches = slice_grid(vol, (16, 16, 16), (8, 8, 8))
        back = reassemble(patches, (24, 24, 24), 4)
        assert back.tobytes() == vol.tobytes()
    origins = grid_positions((267, 254, 104), (160, 160, 80), (80, 80, 40))
    assert len(origins) == 18
    return "bit-exact on 10 volumes, 18 origins"


# --- 5 --------------------------------------------------------------------------

@criterion(5)
def test_criterion_05_shape_contract():
    model = unet3d.build(unet3d.UNetConfig(base_filters=2, num_levels=3), seed=0)
    rng = np.random.default_rng(0)
    for _ in range(10):
        shape = tuple(int(v) for v in rng.integers(1, 5, 3) * 4)
        out = unet3d.forward(model, np.zeros((1,) + shape + (1,), np.float32), "infer")
        assert out.shape == (1,) + shape + (4,)
    full = unet3d.UNetConfig()
    assert unet3d.bottleneck_shape(full, (160, 160, 80)) == (10, 10, 5)
    assert full.filters == (32, 64, 128, 256, 512)
    return "10 random shapes, bottleneck (10, 10, 5)"


# --- 6 --------------------------------------------------------------------------

def _marker_sample(shape=(12, 10, 8), pos=(3, 4, 5)):
    img = np.random.default_rng(0).normal(size=shape).astype(np.float32)
    lbl = np.zeros(shape, np.uint8)
    img[pos] = 50.0
    lbl[pos] = 3
    return Sample("m", ImageVolume(img, (1.0, 1.0, 1.0), IntensityKind.ZSCORED), LabelVolume(lbl))


@criterion(6)
def test_criterion_06_augmentation():
    s = _marker_sample()
    img = s.image.voxels
    identities = {
        "affine": affine_spatial(s, np.zeros(3), 1.0).image.voxels,
        "elastic": elastic_deform(s, 0.0, 3.0, make_rng(0)).image.voxels,
        "brightness": brightness(s.image, 0.0).voxels,
        "contrast": contrast(s.image, 1.0).voxels,
        "gamma": gamma(s.image, 1.0).voxels,
        "noise": gaussian_noise(s.image, 0.0, make_rng(0)).voxels,
        "pipeline": apply_pipeline(s, AugmentConfig.identity(), make_rng(0)).image.voxels,
    }
    for name, out in identities.items():
        assert np.abs(out - img).max() <= 1e-5, name
    cfg = AugmentConfig(p_apply=1.0)
    a = apply_pipeline(s, cfg, derive_rng(7, 0, 1, 2))
    b = apply_pipeline(s, cfg, derive_rng(7, 0, 1, 2))
    assert a.image.voxels.tobytes() == b.image.voxels.tobytes()
    assert a.labels.voxels.tobytes() == b.labels.voxels.tobytes()
    # the marker label must land where the bright marker voxel lands
    m = mirror(s, (0,))
    assert m.labels.voxels[12 - 1 - 3, 4, 5] == 3 and m.image.voxels[12 - 1 - 3, 4, 5] == 50.0
    r = affine_spatial(s, np.array([0.0, 0.0, np.pi / 2]), 1.0)
    lpos = np.argwhere(r.labels.voxels == 3)
    ipos = np.argwhere(r.image.voxels == r.image.voxels.max())
    assert len(lpos) == 1 and (lpos == ipos).all()
    return "7 identities, seeded pipelines bit-identical, markers consistent"


# --- 7 and 9 ----------------------------------------------------------------------

TIME_BUDGET = 45 * 60


@pytest.fixture(scope="module")
def cv_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    runs = []
    for name in ("run_a", "run_b"):
        start = time.perf_counter()
        assert cli.main(["synth", "-n", "10", "--out", str(root / name / "data")]) == 0
        assert cli.main(["cv", str(root / name / "data"), "-k", "5", "--out", str(root / name / "cv")]) == 0
        runs.append((root / name, time.perf_counter() - start))
    return runs


@pytest.mark.slow
@criterion(7)
def test_criterion_07_synthetic_end_to_end(cv_runs):
    run_dir, seconds = cv_runs[0]
    report = json.loads((run_dir / "cv/report.json").read_text())
    lungs = report["average"]["lungs_dsc"]
    infection = report["average"]["covid_dsc"]
    folds = ", ".join(f"{f['lungs_dsc']:.3f}/{f['covid_dsc']:.3f}" for f in report["folds"])
    detail = f"lungs {lungs:.3f}, infection {infection:.3f}, {seconds / 60:.1f} min; folds {folds}"
    assert lungs >= 0.85 and infection >= 0.60, detail
    assert seconds <= TIME_BUDGET, detail
    return detail


def _strip_seconds(path):
    return [line.rsplit(",", 1)[0] for line in path.read_text().splitlines()]


@pytest.mark.slow
@criterion(9)
def test_criterion_09_reproducibility(cv_runs):
    (a, _), (b, _) = cv_runs
    compared = 0
    for pa in sorted((a / "cv").rglob("*")):
        if pa.is_dir():
            continue
        pb = b / "cv" / pa.relative_to(a / "cv")
        assert pb.exists(), f"missing in second run: {pb}"
        if pa.name == "fitlog.csv":
            assert _strip_seconds(pa) == _strip_seconds(pb), str(pa.relative_to(a))
        else:
            assert pa.read_bytes() == pb.read_bytes(), str(pa.relative_to(a))
        compared += 1
    for pa in sorted((a / "data").iterdir()):
        assert pa.read_bytes() == (b / "data" / pa.name).read_bytes()
    return f"{compared} output files identical (fit log timing column excluded)"


# --- 8 --------------------------------------------------------------------------

@criterion(8)
def test_criterion_08_schedule():
    cfg = training.TrainConfig()
    state = training.PlateauState.from_config(cfg)
    history, lrs = [1.0], []
    lrs.append(training.lr_on_plateau(history, state))
    for _ in range(15):
        history.append(1.0)
        lrs.append(training.lr_on_plateau(history, state))
    assert lrs[:15] == [1e-3] * 15 and lrs[15] == pytest.approx(1e-4)
    for _ in range(300):
        history.append(1.0)
        lrs.append(training.lr_on_plateau(history, state))
    assert min(lrs) == 1e-5 and lrs[-1] == 1e-5
    assert all(x >= y for x, y in zip(lrs, lrs[1:]))
    stops = [training.early_stop(history[:n], cfg.es_patience) for n in range(1, len(history) + 1)]
    assert stops.index(True) == 100  # first True once 100 epochs follow the best (epoch 1)
    return "decay after 15, floor 1e-5, stop after 100"


# --- 10 -------------------------------------------------------------------------

@criterion(10)
def test_criterion_10_round_trips(tmp_path):
    rng = np.random.default_rng(0)
    img = ImageVolume(rng.normal(size=(7, 5, 3)).astype(np.float32), (0.75, 1.25, 2.5), IntensityKind.HOUNSFIELD)
    back = read_nifti(write_nifti(img, tmp_path / "a.nii"))
    assert back.voxels.tobytes() == img.voxels.tobytes() and back.spacing == img.spacing
    lbl = LabelVolume(rng.integers(0, 4, (7, 5, 3)).astype(np.uint8))
    assert read_nifti_labels(write_nifti_labels(lbl, img.spacing, tmp_path / "l.nii")).voxels.tobytes() \
        == lbl.voxels.tobytes()
    s = Sample("rt", img, lbl)
    r = read_mvf(write_mvf(s, tmp_path / "rt"))
    assert r.image.voxels.tobytes() == img.voxels.tobytes() and r.labels.voxels.tobytes() == lbl.voxels.tobytes()
    assert r.image.spacing == img.spacing and r.image.intensity_kind is img.intensity_kind

    model = unet3d.build(unet3d.UNetConfig(base_filters=4, num_levels=3), seed=3)
    x = rng.normal(size=(2, 16, 16, 8, 1)).astype(np.float32)
    unet3d.forward(model, x, "train")
    unet3d.save_model(model, tmp_path / "m")
    loaded = unet3d.load_model(tmp_path / "m")
    assert unet3d.forward(loaded, x, "infer").data.tobytes() == unet3d.forward(model, x, "infer").data.tobytes()
    arrays, _ = load_checkpoint(tmp_path / "m")
    assert sum(a.size for a in arrays.values()) == unet3d.param_count(model.config)
    return "NIfTI, MVF, checkpoint bit-exact"


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-m", "not slow", "-p", "no:cacheprovider"]))
