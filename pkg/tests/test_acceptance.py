"""Acceptance criteria 1-9. Each test prints one PASS/FAIL line."""

import numpy as np
import pytest
import torch
import yaml

from ecgrobust import attacks as A
from ecgrobust import classifiers as C
from ecgrobust import cli
from ecgrobust import experiment as ex
from ecgrobust import objectives as O
from ecgrobust import signal_data as sd
from ecgrobust.robustness_eval import MITBIH_GRID, acc_robust, evaluate_curve, normalized_auc, summarize

from conftest import random_mlp
from published_tables import ACC_ROWS, grid_for


@pytest.fixture
def verdict(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
        assert ok, detail
    return emit


def test_criterion_1_metric_reconstruction(verdict):
    worst, where = 0.0, None
    for key, (row, published) in ACC_ROWS.items():
        levels, eps_max = grid_for(key[0])
        acc = [v / 100 for v in row]
        got = 100 * acc_robust(acc[0], normalized_auc(levels, acc, eps_max))
        if abs(got - published) >= worst:
            worst, where = abs(got - published), key
    verdict(1, worst <= 0.1, f"{len(ACC_ROWS)} published rows, max |error| {worst:.3f} pp ({where[0]} {where[1]})")


def test_criterion_2_linearization_identity(verdict):
    rng = np.random.default_rng(2)
    fails, checks = 0, 0
    for _ in range(100):
        m = random_mlp(rng, n_layers=int(rng.integers(2, 5)), d_in=int(rng.integers(2, 65)), width=64,
                       n_classes=int(rng.integers(2, 11)))
        d = m.net[0].in_features
        for x in torch.as_tensor(rng.normal(size=(10, d))):
            z = C.forward(m, x[None])[0]
            aff = C.linearize_at(m, x)
            fails += int(torch.any((z - aff(x)).abs() > 1e-5 * (1 + z.abs())))
            checks += 1
    verdict(2, fails == 0, f"{checks} (model, input) pairs, {fails} failures")


def _fd_param_error(model, loss_fn, h=1e-6):
    params = list(model.parameters())
    grads = torch.autograd.grad(loss_fn(), params)
    worst = 0.0
    for p, g in zip(params, grads):
        flat = p.data.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            up = loss_fn().item()
            flat[i] = orig - h
            down = loss_fn().item()
            flat[i] = orig
            fd = (up - down) / (2 * h)
            worst = max(worst, abs(fd - g.view(-1)[i].item()) / max(1.0, abs(fd)))
    return worst


def test_criterion_3_gradient_contracts(verdict):
    rng = np.random.default_rng(3)
    # (a) input gradients off ReLU kinks
    worst_in, checked = 0.0, 0
    while checked < 50:
        m = random_mlp(rng, d_in=10, n_classes=4)
        x = torch.as_tensor(rng.normal(size=10))
        h, pre, near_kink = 1e-6, x[None], False
        for layer in m.net:
            if isinstance(layer, torch.nn.ReLU):
                near_kink |= pre.abs().min().item() < 1e-3
            pre = layer(pre)
        if near_kink:
            continue
        for y in range(4):
            g = C.input_gradient(m, x, y)
            for i in range(10):
                e = torch.zeros(10, dtype=torch.float64)
                e[i] = h
                fd = (C.forward(m, (x + e)[None])[0, y] - C.forward(m, (x - e)[None])[0, y]).item() / (2 * h)
                worst_in = max(worst_in, abs(g[i].item() - fd) / max(1.0, abs(g[i].item())))
        checked += 1
    # (b) parameter gradients of the four losses on a 3-layer toy
    m = random_mlp(rng, n_layers=3, d_in=4, width=5, n_classes=3, leaky=0.1)
    x = torch.as_tensor(rng.normal(size=(6, 4)))
    with torch.no_grad():
        y = m(x).argmax(1)
    y[:2] = (y[:2] + 1) % 3

    def attacker(model, xb, yb, eps, mask):
        return A.pgd_attack(model, xb, yb, A.AttackConfig(eps=eps, alpha=eps, iters=3), mask)

    losses = {
        "ce": lambda: O.ce_loss(m, x, y),
        "nsr": lambda: O.nsr_loss(m, x, y, 1, O.NsrConfig(beta=0.7)),
        "jacob": lambda: O.jacob_loss(m, x, y, 1, O.JacobConfig(lam=0.5)),
        "adv": lambda: O.adv_loss(m, x, y, 1, O.AdvConfig(eps=0.05), attacker),
    }
    worst_p = {k: _fd_param_error(m, fn) for k, fn in losses.items()}
    ok = worst_in <= 1e-4 and max(worst_p.values()) <= 1e-3
    detail = (f"input-gradient max rel err {worst_in:.1e} (<=1e-4); parameter-gradient max rel err "
              + ", ".join(f"{k} {v:.1e}" for k, v in worst_p.items()) + " (<=1e-3)")
    verdict(3, ok, detail)


def test_criterion_4_attack_invariants(verdict):
    rng = np.random.default_rng(4)
    X, y = sd.beats_to_arrays(sd.synth_beats(200, seed=4))  # 1,000 samples
    torch.manual_seed(4)
    model = C.build_mlp().double().eval()
    worst = {}
    for family in A.FAMILIES:
        excess = 0.0
        for eps in (0.01, 0.05, 0.1):
            cfg = A.AttackConfig(family, eps=eps, alpha=0.01, iters=20)
            out = A.attack_batch(model, X, y, cfg)
            excess = max(excess, (out - torch.as_tensor(X)).abs().max().item() - eps)
        worst[family] = excess
    identity = all(torch.equal(A.pgd_attack(model, X[:50], y[:50], cfg), torch.as_tensor(X[:50]))
                   for cfg in (A.AttackConfig(eps=0.1, iters=0), A.AttackConfig(eps=0.0, iters=10)))
    mcnn = C.build_masked_cnn(num_leads=2, num_classes=3, stem_channels=8, n_blocks=2).double().eval()
    xs = torch.as_tensor(rng.uniform(-1, 1, size=(20, 2, 256)))
    mask = torch.zeros(20, 1, 256, dtype=torch.float64)
    for i, T in enumerate(rng.integers(40, 257, 20)):
        mask[i, :, :T] = 1
    xs = xs * mask
    ys = torch.as_tensor(rng.integers(0, 3, 20))
    untouched = all(
        torch.equal(A.attack_batch(mcnn, xs, ys, A.AttackConfig(f, eps=0.05, iters=5), mask) * (1 - mask), xs * (1 - mask))
        for f in A.FAMILIES)
    ok = max(worst.values()) <= 1e-9 and identity and untouched
    verdict(4, ok, "max budget excess " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
            + f"; K=0/eps=0 identity {identity}; masked positions untouched {untouched}")


def test_criterion_5_nsr_bound(verdict):
    rng = np.random.default_rng(5)
    cases, bound_viol, attain_err, skipped = 0, 0, 0.0, 0
    while cases < 100:
        m = random_mlp(rng, n_layers=int(rng.integers(2, 5)), d_in=12, width=32, n_classes=4)
        x = torch.as_tensor(rng.normal(size=12))
        y = int(rng.integers(0, 4))
        eps_d = 10 ** rng.uniform(-5, -3)
        aff = C.linearize_at(m, x)
        w, zy = aff.W[:, y], aff(x)[y]
        R = O.nsr_regularizer(m, x[None], torch.tensor([y]), O.NsrConfig(eps_delta=eps_d))[0].item()
        star = eps_d * torch.sign(w)
        if R == 0:
            skipped += 1  # dead network, w_y = 0
            continue
        if not torch.equal(C.linearize_at(m, x + star).W, aff.W):
            skipped += 1  # a gate flips inside the ball
            continue
        deltas = torch.as_tensor(rng.uniform(-eps_d, eps_d, size=(1000, 12)))
        ratios = (deltas @ w).abs() / zy.abs()
        bound_viol += int((ratios > R * (1 + 1e-12)).sum())
        attained = ((star @ w).abs() / zy.abs()).item()
        # with frozen gates the true logit change equals w . delta
        shift = (C.forward(m, (x + star)[None])[0, y] - C.forward(m, x[None])[0, y]).abs().item() / zy.abs().item()
        attain_err = max(attain_err, abs(attained - R) / R, abs(shift - R) / R)
        cases += 1
    ok = bound_viol == 0 and attain_err <= 1e-6
    verdict(5, ok, f"{cases} cases x 1000 deltas, {bound_viol} bound violations, "
                   f"sign(w) attains R to rel {attain_err:.1e} ({skipped} dead or gate-flip draws redrawn)")


def test_criterion_8_schedule(verdict):
    got = [O.epsilon_schedule(t, 70, 0.01) for t in (10, 40, 70)]
    verdict(8, got == [0.0, 0.005, 0.01], f"eps_t at t=10,40,70 -> {got}")


# -- desk-scale experiments (criteria 6, 7) -----------------------------------

DESK = {
    "preset": "mitbih",
    "seed": 0,
    "dataset": {"source": "synth", "n_train_per_class": 400, "n_test_per_class": 100},
    "optimizer": {"epochs": 10, "batch_size": 32},
}
DESK_BETAS = (0.1, 0.4, 1.0)
PGD100 = A.AttackConfig("pgd", alpha=0.01, iters=100)


@pytest.fixture(scope="module")
def desk():
    cfg = ex.resolve_config(DESK)
    X_tr, y_tr = sd.beats_to_arrays(sd.synth_beats(400, seed=0))
    X_te, y_te = sd.beats_to_arrays(sd.synth_beats(100, seed=10_000))
    X_va, y_va = sd.beats_to_arrays(sd.synth_beats(100, seed=20_000))
    fit = lambda c: ex.make_estimator(c).fit(X_tr, y_tr)  # noqa: E731
    ce = fit(cfg)
    sweep = {}
    for beta in DESK_BETAS:
        est = fit(ex._merge(cfg, {"method": {"name": "nsr", "beta": beta}}))
        val = evaluate_curve(est.model_, X_va, y_va, PGD100, MITBIH_GRID)
        sweep[beta] = (est, summarize(val, 0.1).acc_robust)
    best = min(sweep, key=lambda b: (-sweep[b][1], b))
    return {"ce": ce, "nsr": sweep[best][0], "beta": best, "val": {b: v for b, (_, v) in sweep.items()},
            "test": (X_te, y_te)}


def test_criterion_6_desk_directional_robustness(desk, verdict):
    X, y = desk["test"]
    levels = (0.0, 0.05)
    ce = evaluate_curve(desk["ce"].model_, X, y, PGD100, levels).accuracy
    nsr = evaluate_curve(desk["nsr"].model_, X, y, PGD100, levels).accuracy
    gap, clean_gap = 100 * (nsr[1] - ce[1]), 100 * abs(nsr[0] - ce[0])
    ok = gap >= 10 and clean_gap <= 5
    sweep = ", ".join(f"{b}: {v:.3f}" for b, v in desk["val"].items())
    verdict(6, ok, f"best beta {desk['beta']} (val ACC_robust {sweep}); 100-PGD eps=0.05 acc "
                   f"NSR {nsr[1]:.3f} vs CE {ce[1]:.3f} (+{gap:.1f} pp, need >=10); "
                   f"clean {nsr[0]:.3f} vs {ce[0]:.3f} (diff {clean_gap:.1f} pp, need <=5)")


def test_criterion_7_attack_strength_ordering(desk, verdict):
    X, y = desk["test"]
    model = desk["ce"].model_
    curves = {name: evaluate_curve(model, X, y, cfg, MITBIH_GRID).accuracy for name, cfg in (
        ("pgd", PGD100), ("sap", A.AttackConfig("sap", alpha=0.01, iters=100)),
        ("noise", A.AttackConfig("white_noise", seed=0)))}
    bad = [lv for i, lv in enumerate(MITBIH_GRID)
           if not (curves["pgd"][i] <= curves["sap"][i] + 0.01 and curves["sap"][i] <= curves["noise"][i] + 0.01)]
    rows = "; ".join(f"eps {lv:g}: {curves['pgd'][i]:.3f}/{curves['sap'][i]:.3f}/{curves['noise'][i]:.3f}"
                     for i, lv in enumerate(MITBIH_GRID))
    verdict(7, not bad, f"PGD/SAP/noise accuracy {rows}; violations at {bad}")


def test_criterion_9_end_to_end_reproducibility(tmp_path, verdict):
    cfg = {"seed": 9, "method": {"name": "nsr", "beta": 0.4},
           "dataset": {"source": "synth", "n_train_per_class": 30, "n_test_per_class": 10},
           "optimizer": {"epochs": 2, "batch_size": 32},
           "eval": {"grid": [0, 0.01, 0.05, 0.1], "eps_max": 0.1,
                    "attacks": [{"family": "pgd", "iters": 10}, {"family": "sap", "iters": 10},
                                {"family": "white_noise"}]}}
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(cfg))
    runs = []
    for d in ("run1", "run2"):
        out = tmp_path / d
        assert cli.main(["train", "--config", str(path), "--out-dir", str(out)]) == 0
        (ckpt,) = (out / "checkpoints").glob("*.safetensors")
        assert cli.main(["evaluate", "--config", str(path), "--out-dir", str(out), "--checkpoint", str(ckpt)]) == 0
        files = sorted(p for p in out.rglob("*") if p.is_file() and "records" not in p.parts)
        runs.append({p.relative_to(out): p.read_bytes() for p in files})
    same = runs[0].keys() == runs[1].keys() and all(runs[0][k] == runs[1][k] for k in runs[0])
    n_reports = sum(1 for k in runs[0] if k.parts[0] == "reports")
    verdict(9, same, f"{len(runs[0])} files compared (1 checkpoint, {n_reports} report files), "
                     f"bit-identical {same}")
