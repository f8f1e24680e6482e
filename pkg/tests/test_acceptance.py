"""Acceptance criteria, one test class per criterion.

Each test carries ``@pytest.mark.criterion(n)``; the terminal summary prints
one PASS/FAIL line per criterion.
"""

import time

import numpy as np
import pytest
from scipy.stats import ortho_group

from oracles import cka_direct, cp_exact, logit, ols_normal_equations
from wiselab import checkpoint as ckpt
from wiselab import ensemble as E
from wiselab import metrics as MT
from wiselab import model as M
from wiselab import train as T
from wiselab.harness import experiment as X
from wiselab.harness.config import default_config

GRID = tuple(round(0.05 * i, 2) for i in range(21))


@pytest.fixture(scope="module")
def default_models(default_run):
    return ckpt.load(default_run / X.THETA0), ckpt.load(default_run / X.THETA1)


@pytest.mark.criterion(1)
class TestLinearHeadEquivalence:
    def test_shared_encoder_pair(self, default_models):
        cfg = default_config()
        theta0, theta1 = default_models
        enc = theta0.layout.mask(M.is_encoder)
        assert np.array_equal(theta0.values[enc], theta1.values[enc])
        assert not np.array_equal(theta0.values, theta1.values)
        X_eval = X.build_data(cfg).ref_test.features[:1000]
        assert X_eval.shape[0] == 1000
        start = time.perf_counter()
        gap = E.verify_linear_equivalence(cfg.model, theta0, theta1, GRID, X_eval)
        elapsed = time.perf_counter() - start
        print(f"max |wse - ose| = {gap:.3e} in {elapsed:.2f}s")
        assert gap < 1e-9
        assert elapsed < 5.0


@pytest.mark.criterion(2)
class TestLinearityInWeights:
    def test_pure_linear_model(self):
        d, k = 6, 4
        spec = M.ModelSpec((d, d), activation="identity", k=k, normalize_features=False)
        r = np.random.default_rng(11)
        enc = {"enc.0.weight": np.eye(d), "enc.0.bias": np.zeros(d)}
        theta0 = ckpt.Checkpoint.from_arrays({**enc, "head": r.normal(size=(d, k))})
        theta1 = ckpt.Checkpoint.from_arrays({**enc, "head": r.normal(size=(d, k))})
        gap = E.verify_linear_equivalence(spec, theta0, theta1, GRID, r.normal(size=(1000, d)))
        print(f"linear model gap {gap:.3e}")
        assert gap < 1e-9

    def test_relu_witness(self):
        spec = M.ModelSpec((6, 16, 8), activation="relu", k=4)
        theta0, theta1 = M.init_checkpoint(spec, 1), M.init_checkpoint(spec, 2)
        assert theta0 != theta1
        x, gap = E.find_nonlinear_witness(spec, theta0, theta1, GRID)
        print(f"relu witness gap {gap:.3e}")
        assert gap > 1e-3


@pytest.mark.criterion(3)
class TestEmaRecovery:
    @pytest.mark.parametrize("beta", [0.9, 0.99, 0.999])
    def test_identity(self, beta):
        r = np.random.default_rng(int(beta * 1000))
        lay = ckpt.ParamLayout.from_shapes([("w", (7, 5)), ("b", (5,))])
        theta0 = ckpt.Checkpoint(lay, r.normal(size=lay.total))
        debiased = ckpt.ema_init("zero_init_debiased", beta, layout=lay)
        biased = ckpt.ema_init("init_biased", beta, init_ref=theta0)
        current = theta0.values
        T_steps = 100
        for _ in range(T_steps):
            current = current + 0.1 * r.normal(size=lay.total)
            it = ckpt.Checkpoint(lay, current)
            debiased = ckpt.ema_update(debiased, it)
            biased = ckpt.ema_update(biased, it)
        recovered = ckpt.interpolate(theta0, ckpt.ema_final(debiased), 1.0 - beta**T_steps)
        diff = float(np.max(np.abs(recovered.values - ckpt.ema_final(biased).values)))
        print(f"beta={beta}: sup diff {diff:.3e}")
        assert diff < 1e-10


def _gradient_configs(count=20):
    """First ``count`` random small problems whose point is clear of every kink."""
    found = []
    seed = 0
    while len(found) < count:
        r = np.random.default_rng(1000 + seed)
        seed += 1
        d_in = int(r.integers(2, 6))
        hidden = [int(w) for w in r.integers(3, 8, size=int(r.integers(0, 3)))]
        k = int(r.integers(2, 5))
        spec = M.ModelSpec(
            (d_in, *hidden, int(r.integers(2, 6))),
            activation=str(r.choice(["relu", "identity"])),
            k=k,
            normalize_features=bool(r.integers(0, 2)),
        )
        base = M.init_checkpoint(spec, seed)
        c = base.with_values(base.values + 0.1 * r.normal(size=base.values.size))
        n = int(r.integers(5, 20))
        X_b = r.normal(size=(n, d_in))
        y_b = r.integers(0, k, size=n)
        cache = M.forward_cache(spec, c, X_b)
        if spec.activation == "relu" and any(np.min(np.abs(p)) < 1e-3 for p in cache["pre"][:-1]):
            continue
        if spec.normalize_features and cache["norms"].min() < 1e-3:
            continue
        if np.min(np.abs(c.values)) < 1e-3:
            continue
        teacher = c.with_values(c.values + 0.3 * r.normal(size=c.values.size))
        anchor = c.with_values(c.values + 0.05 * r.normal(size=c.values.size))
        found.append((spec, c, (X_b, y_b), teacher, anchor))
    return found


LOSSES = {
    "ce_smoothing": dict(label_smoothing=0.1),
    "distill": dict(distill_alpha=0.5),
    "reg_to_init": dict(reg_to_init=0.2),
    "l1": dict(l1=0.01),
    "no_weight_decay": dict(weight_decay=0.0),
}


@pytest.mark.criterion(4)
class TestGradientOracle:
    @pytest.mark.parametrize("loss", list(LOSSES))
    def test_every_config(self, loss):
        worst = 0.0
        for spec, c, batch, teacher, anchor in _gradient_configs():
            cfg = T.TrainConfig(mode="end2end", **LOSSES[loss])
            err = T.grad_check(
                spec, c, batch, cfg,
                teacher=teacher if cfg.distill_alpha > 0 else None,
                anchor=anchor,
                n_coords=None,
            )
            worst = max(worst, err)
        print(f"{loss}: worst relative error {worst:.3e}")
        assert worst < 1e-5


@pytest.mark.criterion(5)
class TestClopperPearsonOracle:
    def test_all_counts_up_to_50(self):
        worst = 0.0
        for n in range(1, 51):
            for c in range(n + 1):
                got = MT.clopper_pearson(c, n)
                ref = cp_exact(c, n)
                worst = max(worst, abs(got[0] - ref[0]), abs(got[1] - ref[1]))
        print(f"worst bound error {worst:.3e}")
        assert worst < 1e-9

    @pytest.mark.parametrize("n", [1, 2, 10, 50, 1000])
    def test_boundaries(self, n):
        assert MT.clopper_pearson(0, n)[0] == 0.0
        assert MT.clopper_pearson(n, n)[1] == 1.0


@pytest.mark.criterion(6)
class TestMetricIdentities:
    def test_identical_classifiers(self):
        r = np.random.default_rng(21)
        preds = r.integers(0, 5, size=200)
        labels = r.integers(0, 5, size=200)
        z = r.normal(size=(200, 5))
        F = r.normal(size=(200, 8))
        assert MT.prediction_diversity(preds, preds, labels) == 0.0
        assert MT.cohens_kappa_complement(preds, preds, 5) == 0.0
        assert MT.mean_kl(z, z) == 0.0
        assert MT.ckac(F, F) == 0.0

    def test_cka_orthogonal_invariance(self):
        r = np.random.default_rng(22)
        F, G = r.normal(size=(300, 10)), r.normal(size=(300, 7)) @ r.normal(size=(7, 7))
        Q = ortho_group.rvs(10, random_state=23)
        base = MT.ckac(F, G)
        assert abs(base - (1.0 - cka_direct(F, G))) < 1e-9
        drift = abs(MT.ckac(F @ Q, G) - base)
        print(f"orthogonal drift {drift:.3e}")
        assert drift < 1e-9

    def test_fit_baseline_normal_equations(self):
        r = np.random.default_rng(24)
        for _ in range(20):
            n = int(r.integers(2, 30))
            pts = list(zip(r.uniform(0.05, 0.95, n), r.uniform(0.05, 0.95, n)))
            fit = MT.fit_baseline(pts)
            slope, intercept = ols_normal_equations([logit(a) for a, _ in pts], [logit(b) for _, b in pts])
            assert abs(fit.slope - slope) < 1e-10
            assert abs(fit.intercept - intercept) < 1e-10


@pytest.mark.criterion(7)
class TestInterpolationCurve:
    def test_curve_above_chord_and_peak(self, default_run, default_run_seconds):
        rows = X.read_sweep_csv((default_run / "sweep.csv").read_text())
        for col in ("ref_acc", "avg_shifts"):
            acc0, acc1 = rows[0][col], rows[-1][col]
            worst = min(r[col] - ((1 - r["alpha"]) * acc0 + r["alpha"] * acc1) for r in rows)
            print(f"{col}: worst gap to chord {100 * worst:+.2f} pp")
            assert worst >= -0.01
        best = max(r["avg_shifts"] for r in rows)
        endpoints = max(rows[0]["avg_shifts"], rows[-1]["avg_shifts"])
        print(f"best avg_shifts {best:.4f} vs endpoints {endpoints:.4f}; run took {default_run_seconds:.1f}s")
        assert best >= endpoints - 0.002
        assert default_run_seconds < 120.0


@pytest.mark.criterion(8)
class TestDeterminism:
    def test_two_runs_identical(self, default_run, default_run_repeat):
        names = sorted(p.relative_to(default_run).as_posix() for p in default_run.rglob("*") if p.is_file())
        for required in ("sweep.csv", "diversity.json", "robustness.json", "theta0.ckpt", "theta1.ckpt"):
            assert required in names
        for name in names:
            assert (default_run / name).read_bytes() == (default_run_repeat / name).read_bytes(), name


@pytest.mark.criterion(9)
class TestKShot:
    def test_one_shot_best_alpha(self, one_shot_run):
        rows = X.read_sweep_csv((one_shot_run / "sweep.csv").read_text())
        avg = [r["avg_ref_shifts"] for r in rows]
        best = max(avg)
        print(f"best {best:.4f} at alpha={rows[int(np.argmax(avg))]['alpha']}; zero-shot {avg[0]:.4f}, fine-tuned {avg[-1]:.4f}")
        assert best >= max(avg[0], avg[-1]) - 0.005
