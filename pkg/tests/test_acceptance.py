"""Acceptance checks. Every test records one PASS/FAIL line (see the terminal summary).

The desk-scale training runs (criteria 7 and 8) take several minutes each on a
CPU.  Set FIREREG_ACCEPTANCE_DIR to keep their checkpoints between sessions;
a run whose directory already holds a final checkpoint with the same config and
data settings is loaded instead of retrained.
"""
import csv
import json
import os
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np
import pytest
import torch

from acceptance_log import record
from firereg import geometry as G
from firereg.data import GENERATOR_VERSION, CorruptionRanges, make_dataset, to_tensors
from firereg.evaluation import dice, evaluate
from firereg.losses import full_forward, lambda_smooth, smoothness
from firereg.networks import GROUPS, FireModel, ModelConfig
from firereg.training import TrainConfig, Trainer, load_checkpoint, register_pair, train
from oracles import brute_dice, brute_identity_grid

# desk-scale protocol shared by the registration and smoothness criteria
DESK_SHAPE = (64, 64)
DESK_TRAIN = dict(seed=0, count=200)
DESK_TEST = dict(seed=2, count=50)
DESK_CONFIG = dict(
    iterations=3000, batch_size=4, seed=0,
    lr_taf=5e-4, lr_tnr=1e-4, lr_gf=2e-4,
    model=dict(base_width=8, image_shape=list(DESK_SHAPE), nr_scale=0.25),
)


def _rel(a, b, floor=1e-6):
    return abs(a - b) / max(abs(a), abs(b), floor)


# -- 1. geometry ------------------------------------------------------------

def test_criterion_01_geometry_properties():
    start = time.time()
    rng = np.random.default_rng(0)
    checks = {}

    grids_ok = True
    for shape in [(5, 7), (1, 4), (3, 4, 5)]:
        g = G.identity_grid(shape, dtype=torch.float64).numpy()
        grids_ok &= np.array_equal(g, brute_identity_grid(shape))
        for ax, s in enumerate(shape):
            if s > 1:
                comp = g[..., len(shape) - 1 - ax]
                grids_ok &= comp.min() == -1.0 and comp.max() == 1.0
    checks["identity grid exact"] = grids_ok

    x = torch.from_numpy(rng.uniform(-1, 1, (2, 1, 33, 29))).float()
    ident = G.sample(x, G.identity_grid((33, 29)), "linear", -1.0)
    checks["sampler identity"] = (ident - x).abs().max().item() < 1e-6

    y = torch.from_numpy(rng.uniform(-1, 1, (2, 1, 33, 29))).float()
    grid = torch.from_numpy(rng.uniform(-1.2, 1.2, (2, 33, 29, 2))).float()
    lhs = G.sample(0.3 * x - 1.7 * y, grid, "linear", 0.0)
    rhs = 0.3 * G.sample(x, grid, "linear", 0.0) - 1.7 * G.sample(y, grid, "linear", 0.0)
    checks["sampler linearity"] = (lhs - rhs).abs().max().item() < 1e-6

    img = torch.from_numpy(rng.uniform(-1, 1, (1, 1, 9, 9))).requires_grad_(True)
    pos = rng.uniform(0.05, 0.95, (1, 9, 9, 2)) + rng.integers(0, 8, (1, 9, 9, 2))
    grid = torch.from_numpy(pos / 8 * 2 - 1).requires_grad_(True)  # points kept off the knots
    f = lambda: G.sample(img, grid, "linear", -1.0).pow(2).sum()  # noqa: E731
    f().backward()
    worst, h = 0.0, 1e-6
    for tensor in (img, grid):
        for _ in range(50):
            idx = tuple(int(rng.integers(s)) for s in tensor.shape)
            with torch.no_grad():
                base = tensor[idx].item()
                tensor[idx] = base + h
                fp = f().item()
                tensor[idx] = base - h
                fm = f().item()
                tensor[idx] = base
            worst = max(worst, _rel(tensor.grad[idx].item(), (fp - fm) / (2 * h)))
    checks["sampler gradient"] = worst < 1e-4

    inv_err = 0.0
    for n in (2, 3):
        for _ in range(20):
            A = torch.from_numpy(np.hstack([np.eye(n) + rng.uniform(-0.4, 0.4, (n, n)), rng.uniform(-1, 1, (n, 1))]))
            I = G.compose_affine(G.invert_affine(A), A)
            inv_err = max(inv_err, (I - G.identity_affine(n, dtype=torch.float64)).abs().max().item())
    checks["affine inverse"] = inv_err < 1e-9

    elapsed = time.time() - start
    ok = all(checks.values()) and elapsed < 60
    failed = [k for k, v in checks.items() if not v]
    record(1, ok, f"geometry suite; gradient rel err {worst:.1e}, inverse err {inv_err:.1e}, "
                  f"{elapsed:.1f}s" + (f"; failed: {failed}" if failed else ""))
    assert ok


# -- 2. loss fixed points ---------------------------------------------------

def _fresh_bundle():
    from firereg.losses import run_forward
    model = FireModel(ModelConfig(base_width=4, image_shape=(16, 16)), seed=0).double()
    g = torch.Generator().manual_seed(0)
    xa = torch.rand(2, 1, 16, 16, generator=g, dtype=torch.float64) * 2 - 1
    xb = torch.rand(2, 1, 16, 16, generator=g, dtype=torch.float64) * 2 - 1
    return model, xa, xb, run_forward(model, xa, xb)


def test_criterion_02_loss_fixed_points():
    import dataclasses
    from firereg.losses import regularization, registration_loss, synthesis_loss
    model, xa, xb, b = _fresh_bundle()
    values = {}
    fixed = dataclasses.replace(
        b, xb_hat_t=b.xb, xa_hat_t=b.xa, fa_warped=b.fb, fb_warped=b.fa,
        xb_cyc=b.xa, xa_cyc=b.xb, f_xb_hat=b.fa, f_xa_hat=b.fb,
        xb_reg=b.xb, xa_reg=b.xa,
        xb_syn_af=b.xb, xa_syn_af=b.xa, xb_reg_af=b.xb, xa_reg_af=b.xa,
    )
    values.update(synthesis_loss(fixed)[1])
    values.update(registration_loss(fixed)[1])  # identity transforms -> reg_ic fixed point
    values.update(regularization(fixed, 1.0)[1])  # zero fields -> r_smooth fixed point
    affine_field = 0.1 * G.identity_grid((16, 16), dtype=torch.float64)[None] + 0.02
    values["r_smooth (affine field)"] = smoothness(affine_field, affine_field)
    # double-precision resampling leaves ~1e-16 roundoff in the image round trip
    zeros_ok = all(abs(float(v.detach())) < 1e-12 for v in values.values())

    worst = 0.0
    for seed in range(5):
        g = torch.Generator().manual_seed(seed)
        pa = torch.rand(2, 1, 16, 16, generator=g) * 2 - 1
        pb = torch.rand(2, 1, 16, 16, generator=g) * 2 - 1
        m = FireModel(ModelConfig(base_width=4, image_shape=(16, 16)), seed=seed)
        _, rep = full_forward(m, pa, pb)
        d = rep.as_dict()
        parts = sum(d[k] for k in ("syn_acc", "syn_fea", "syn_cyc", "syn_align", "reg_acc", "reg_ic", "r_syn", "r_reg"))
        worst = max(worst, abs(d["total"] - (parts + d["lambda"] * d["r_smooth"])))
    lam_ok = lambda_smooth(2, 16384) == 9.765625e-5
    ok = zeros_ok and worst < 1e-6 and lam_ok
    record(2, ok, f"{len(values)} terms zero at fixed points: {zeros_ok}; sum invariant err {worst:.1e}; "
                  f"lambda(2,16384)={lambda_smooth(2, 16384)!r}")
    assert ok


# -- 3. end-to-end gradient check --------------------------------------------

def test_criterion_03_gradient_check():
    start = time.time()
    model = FireModel(ModelConfig(base_width=4, image_shape=(16, 16)), seed=0).double()
    g = torch.Generator().manual_seed(1)
    with torch.no_grad():
        # move the zero-initialised heads off their identity start so every path is exercised
        for net in model.affine_nets.values():
            net.fc2.weight.add_(0.05 * torch.randn(net.fc2.weight.shape, generator=g, dtype=torch.float64))
        for net in model.nonrigid_nets.values():
            for p in net.out.parameters():
                p.add_(0.05 * torch.randn(p.shape, generator=g, dtype=torch.float64))
    xa = torch.rand(1, 1, 16, 16, generator=g, dtype=torch.float64) * 2 - 1
    xb = torch.rand(1, 1, 16, 16, generator=g, dtype=torch.float64) * 2 - 1

    def loss():
        return full_forward(model, xa, xb)[1].total

    loss().backward()
    params = list(model.named_parameters())
    sizes = np.array([p.numel() for _, p in params], dtype=float)
    rng = np.random.default_rng(2)
    h, errs = 1e-6, []  # small enough that ReLU kinks are rarely crossed
    for _ in range(50):
        name, p = params[rng.choice(len(params), p=sizes / sizes.sum())]
        i = int(rng.integers(p.numel()))
        flat = p.data.view(-1)
        with torch.no_grad():
            base = flat[i].item()
            flat[i] = base + h
            fp = loss().item()
            flat[i] = base - h
            fm = loss().item()
            flat[i] = base
        errs.append(_rel(p.grad.view(-1)[i].item(), (fp - fm) / (2 * h)))
    elapsed = time.time() - start
    worst = max(errs)
    ok = worst < 1e-2 and elapsed < 300
    record(3, ok, f"50 parameters, max rel err {worst:.2e} (median {np.median(errs):.1e}), {elapsed:.0f}s")
    assert ok


# -- 4. initialization identity ---------------------------------------------

def test_criterion_04_initialization_identity():
    samples = make_dataset(11, 12, (32, 32))
    trainer = Trainer(TrainConfig(model=ModelConfig(base_width=8, image_shape=(32, 32)), seed=5))
    xa, xb = to_tensors(samples)
    reg = register_pair(trainer, xa, xb)
    eye = G.identity_affine(2, len(samples))
    exact = (torch.equal(reg.affine_ab, eye) and torch.equal(reg.affine_ba, eye)
             and not reg.field_ab.any() and not reg.field_ba.any())
    report = evaluate(trainer, samples)
    same = all(r.dice_after == r.dice_unaligned and r.dice_after_reverse == r.dice_unaligned for r in report.rows)
    ok = exact and same
    record(4, ok, f"exact identity transforms: {exact}; dice_after == dice_unaligned on {len(report.rows)} samples: {same}")
    assert ok


# -- 5. schedule -------------------------------------------------------------

def test_criterion_05_schedule():
    g = torch.Generator().manual_seed(0)
    data = (torch.rand(4, 1, 16, 16, generator=g) * 2 - 1, torch.rand(4, 1, 16, 16, generator=g) * 2 - 1)
    trainer = Trainer(TrainConfig(model=ModelConfig(base_width=4, image_shape=(16, 16)), batch_size=2))
    isolated = True
    for _ in range(9):
        group = trainer.next_group
        before = {k: p.detach().clone() for k, p in trainer.model.named_parameters()}
        trainer.step(*trainer.draw_batch(*data))
        for other in GROUPS:
            if other == group:
                continue
            for k, p in trainer.model.named_group_parameters(other).items():
                isolated &= torch.equal(before[k], p)
    counts_ok = trainer.step_counts == {g: 3 for g in GROUPS}
    ok = isolated and counts_ok
    record(5, ok, f"step counts {trainer.step_counts}; unscheduled groups bitwise unchanged: {isolated}")
    assert ok


# -- 6. determinism ----------------------------------------------------------

def test_criterion_06_determinism(tmp_path):
    samples = make_dataset(4, 8, (16, 16))
    cfg = TrainConfig(iterations=10, batch_size=2, seed=3, model=ModelConfig(base_width=4, image_shape=(16, 16)))
    _, r1 = train(cfg, samples, out_dir=tmp_path / "a")
    _, r2 = train(cfg, samples, out_dir=tmp_path / "b")
    diff = max(abs(a["total"] - b["total"]) for a, b in zip(r1, r2))
    files = sorted(p.name for p in (tmp_path / "a/checkpoint").glob("*.npz"))
    bitwise = all((tmp_path / "a/checkpoint" / f).read_bytes() == (tmp_path / "b/checkpoint" / f).read_bytes() for f in files)
    ok = diff <= 1e-6 and bitwise and len(files) == 3
    record(6, ok, f"max trace difference {diff:.1e} over 10 iterations; checkpoints bitwise identical: {bitwise}")
    assert ok


# -- desk-scale runs (7, 8) --------------------------------------------------

_RUNS = {}


def _desk_data():
    if "data" not in _RUNS:
        ranges = CorruptionRanges()
        _RUNS["data"] = (
            make_dataset(DESK_TRAIN["seed"], DESK_TRAIN["count"], DESK_SHAPE, ranges),
            make_dataset(DESK_TEST["seed"], DESK_TEST["count"], DESK_SHAPE, ranges),
        )
    return _RUNS["data"]


def _desk_data_key():
    return {"train": DESK_TRAIN, "test": DESK_TEST, "shape": list(DESK_SHAPE),
            "ranges": asdict(CorruptionRanges()), "generator": GENERATOR_VERSION}


def _field_energy(trainer, test):
    xa, xb = to_tensors(test)
    reg = register_pair(trainer, xa, xb)
    return float(smoothness(reg.field_ab, reg.field_ba))


def desk_run(name, tmp_root, **overrides):
    """Train (or reload) one desk-scale variant and evaluate it on the test split."""
    if name in _RUNS:
        return _RUNS[name]
    train_set, test_set = _desk_data()
    cfg = TrainConfig.from_dict({**DESK_CONFIG, **overrides})
    root = Path(os.environ.get("FIREREG_ACCEPTANCE_DIR") or tmp_root)
    out = root / name
    key_file = out / "run_key.json"
    # round-trip through JSON so tuples compare equal to stored lists
    key = json.loads(json.dumps({"config": cfg.to_dict(), "data": _desk_data_key()}))
    start = time.time()
    cached = key_file.exists() and json.loads(key_file.read_text()) == key
    if cached:
        trainer = load_checkpoint(out / "checkpoint")
    else:
        trainer, _ = train(cfg, train_set, out_dir=out)
        key_file.write_text(json.dumps(key))
    with open(out / "train_log.csv", newline="") as fh:
        log = list(csv.DictReader(fh))
    totals = [float(r["total"]) for r in log]
    tail = log[-300:]
    smooth_share = np.mean([float(r["lambda"]) * float(r["r_smooth"]) / float(r["total"]) for r in tail])
    report = evaluate(trainer, test_set, out_dir=out)
    result = {
        "report": report,
        "dice_unaligned": report.column("dice_unaligned").mean(),
        "dice_after": report.column("dice_after").mean(),
        "ice": report.column("ice_rms").mean(),
        "energy": _field_energy(trainer, test_set),
        "totals": np.array(totals),
        "seconds": time.time() - start,
        "cached": cached,
        "lambda": cfg.loss_options.smooth_lambda,
        "smooth_share": smooth_share,
    }
    _RUNS[name] = result
    return result


@pytest.fixture(scope="module")
def desk_root(tmp_path_factory):
    return tmp_path_factory.mktemp("desk")


@pytest.mark.slow
def test_criterion_07_desk_registration(desk_root):
    full = desk_run("full", desk_root)
    ablation = desk_run("no_reg_ic", desk_root, use_reg_ic=False)
    gain = full["dice_after"] - full["dice_unaligned"]
    in_band = 0.3 <= full["dice_unaligned"] <= 0.8
    ice_ratio = full["ice"] / ablation["ice"]
    ma = np.convolve(full["totals"], np.ones(20) / 20, mode="valid")
    converged = ma[min(1999 - 19, len(ma) - 1)] < 0.5 * ma[49 - 19]
    ok = in_band and gain >= 0.15 and ice_ratio <= 0.5
    record(7, ok, f"dice {full['dice_unaligned']:.3f} -> {full['dice_after']:.3f} (gain {gain:+.3f}, need >= +0.15); "
                  f"ICE {full['ice']:.4f} vs no-IC {ablation['ice']:.4f} (ratio {ice_ratio:.2f}, need <= 0.5); "
                  f"loss halved by iteration 2000: {converged}; "
                  + ("checkpoints reused from cache" if full["cached"] else f"train+eval {full['seconds'] / 60:.1f} min"))
    assert ok


@pytest.mark.slow
def test_criterion_08_smoothness(desk_root):
    lam = lambda_smooth(2, DESK_SHAPE[0] * DESK_SHAPE[1])
    default = desk_run("full", desk_root)
    none = desk_run("lambda_0", desk_root, smooth_lambda=0.0)
    strong = desk_run("lambda_10x", desk_root, smooth_lambda=10 * lam)
    ratio = default["energy"] / none["energy"]
    matched = abs(default["dice_after"] - none["dice_after"]) <= 0.05
    monotone = none["energy"] >= default["energy"] >= strong["energy"]
    ok = ratio <= 0.5 and matched and monotone
    record(8, ok, f"Laplacian energy lambda=0: {none['energy']:.4g}, lambda*: {default['energy']:.4g}, "
                  f"10 lambda*: {strong['energy']:.4g} (ratio {ratio:.2f}, need <= 0.5; monotone {monotone}); "
                  f"dice {none['dice_after']:.3f} vs {default['dice_after']:.3f} (matched within 0.05: {matched}); "
                  f"lambda*.r_smooth is {default['smooth_share']:.1e} of the total loss over the last 300 iterations")
    assert ok


# -- 9. 3D smoke test --------------------------------------------------------

@pytest.mark.slow
def test_criterion_09_3d_smoke(tmp_path):
    start = time.time()
    samples = make_dataset(7, 20, (32, 32, 32))
    cfg = TrainConfig(
        iterations=300, batch_size=1, seed=0, lr_taf=5e-4, lr_tnr=5e-4, lr_gf=1e-3,
        model=ModelConfig(n=3, base_width=4, image_shape=(32, 32, 32), nr_scale=0.25),
    )
    _, rows = train(cfg, samples, out_dir=tmp_path)
    totals = np.array([r["total"] for r in rows])
    finite = all(np.isfinite(v) for r in rows for k, v in r.items() if k != "group")
    first, last = totals[:20].mean(), totals[-20:].mean()
    decrease = 1 - last / first
    lam = lambda_smooth(3, 32768)
    elapsed = time.time() - start
    ok = finite and decrease >= 0.2 and lam == 1.953125e-4 and rows[0]["lambda"] == lam and elapsed <= 900
    record(9, ok, f"3D 32^3 loss {first:.3f} -> {last:.3f} ({decrease:.0%} decrease, need >= 20%); finite: {finite}; "
                  f"lambda(3,32768)={lam!r}; {elapsed / 60:.1f} min")
    assert ok


# -- 10. dice oracle ---------------------------------------------------------

def test_criterion_10_dice_oracle():
    rng = np.random.default_rng(10)
    exact = symmetric = 0
    for _ in range(100):
        shape = tuple(int(s) for s in rng.integers(1, 12, size=int(rng.integers(1, 4))))
        a = (rng.random(shape) < rng.random()).astype(np.uint8)
        b = (rng.random(shape) < rng.random()).astype(np.uint8)
        exact += dice(a, b) == brute_dice(a, b)
        symmetric += dice(a, b) == dice(b, a)
    ok = exact == 100 and symmetric == 100
    record(10, ok, f"dice == set-counting oracle on {exact}/100 pairs, symmetric on {symmetric}/100")
    assert ok
