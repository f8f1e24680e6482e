"""Pipeline stages: data, zero-shot proxy, fine-tuning, alpha sweep, analyses.

Every stage is a pure function of the config (and of checkpoints produced by
earlier stages), so any output can be regenerated from saved checkpoints.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import shutil
import tempfile
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .. import checkpoint as ckpt
from .. import datagen as D
from .. import ensemble as E
from .. import metrics as MT
from .. import model as M
from ..checkpoint import Checkpoint
from ..errors import DomainError, FitError, StageError
from ..train import TrainConfig, TrainTrace, finetune
from .config import ExperimentConfig
from .svg import ScatterPoint, render_scatter_svg

log = logging.getLogger(__name__)

THETA0 = "theta0.ckpt"
THETA1 = "theta1.ckpt"


@dataclass(frozen=True)
class ExperimentData:
    ref_train: D.Dataset
    ref_test: D.Dataset
    shifted: dict[str, D.Dataset]
    pretrain: D.Dataset
    prototypes: D.Dataset
    finetune_train: D.Dataset


def build_data(cfg: ExperimentConfig) -> ExperimentData:
    gen = cfg.effective_gen
    ref_train, ref_test = D.gen_reference(gen)
    shifted = {n: D.apply_shift(ref_test, cfg.effective_shift(n), tag=n) for n in cfg.shift_names}
    ft_train = ref_train
    if cfg.k_shot is not None:
        ft_train = D.subsample_per_class(ref_train, cfg.k_shot, cfg.seed_for("k_shot"))
    return ExperimentData(
        ref_train=ref_train,
        ref_test=ref_test,
        shifted=shifted,
        pretrain=D.gen_pretrain_mixture(gen, "train"),
        prototypes=D.gen_pretrain_mixture(gen, "test"),
        finetune_train=ft_train,
    )


# ------------------------------------------------------------------ model stages


def stage_pretrain(cfg: ExperimentConfig, data: ExperimentData) -> Checkpoint:
    """Train encoder+head on the mixture, then swap in the prototype head."""
    init = M.init_checkpoint(cfg.model, cfg.seed_for("init"))
    pretrained, _ = finetune(cfg.model, init, data.pretrain, cfg.effective_train("pretrain"))
    theta0 = M.zero_shot_model(cfg.model, pretrained, data.prototypes.features, data.prototypes.labels)
    return theta0.with_values(theta0.values, seed=cfg.master_seed, tag="zero-shot")


def stage_finetune(
    cfg: ExperimentConfig,
    data: ExperimentData,
    theta0: Checkpoint,
    train_cfg: TrainConfig | None = None,
    teacher: Checkpoint | None = None,
    ema_decay: float | None = None,
) -> tuple[Checkpoint, TrainTrace, dict[str, ckpt.EmaState]]:
    """Fine-tune from ``theta0``; optionally track both EMA variants along the way."""
    train_cfg = train_cfg or cfg.effective_train("finetune")
    emas: dict[str, ckpt.EmaState] = {}
    on_step = None
    if ema_decay is not None:
        emas = {
            "zero_init_debiased": ckpt.ema_init("zero_init_debiased", ema_decay, layout=theta0.layout),
            "init_biased": ckpt.ema_init("init_biased", ema_decay, init_ref=theta0),
        }

        def on_step(step: int, current: Checkpoint) -> None:
            for key in emas:
                emas[key] = ckpt.ema_update(emas[key], current)

    theta1, trace = finetune(cfg.model, theta0, data.finetune_train, train_cfg, teacher=teacher, on_step=on_step)
    return theta1.with_values(theta1.values, seed=cfg.master_seed, tag="fine-tuned"), trace, emas


# ------------------------------------------------------------------------- sweep


@dataclass(frozen=True)
class SweepRow:
    alpha: float
    ref: MT.EvalResult
    shifts: dict[str, MT.EvalResult]

    @property
    def avg_shifts(self) -> float:
        return float(np.mean([r.accuracy for r in self.shifts.values()]))

    @property
    def avg_ref_shifts(self) -> float:
        return 0.5 * (self.ref.accuracy + self.avg_shifts)


@dataclass(frozen=True)
class AlphaSweep:
    shift_names: tuple[str, ...]
    rows: tuple[SweepRow, ...]

    @property
    def alphas(self) -> list[float]:
        return [r.alpha for r in self.rows]

    def column(self, name: str) -> list[float]:
        if name == "ref":
            return [r.ref.accuracy for r in self.rows]
        if name == "avg_shifts":
            return [r.avg_shifts for r in self.rows]
        if name == "avg_ref_shifts":
            return [r.avg_ref_shifts for r in self.rows]
        return [r.shifts[name].accuracy for r in self.rows]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(
            ["alpha", "ref_acc", "ref_ci_low", "ref_ci_high"]
            + [f"{n}_acc" for n in self.shift_names]
            + ["avg_shifts", "avg_ref_shifts"]
        )
        for r in self.rows:
            w.writerow(
                [repr(r.alpha), repr(r.ref.accuracy), repr(r.ref.ci_low), repr(r.ref.ci_high)]
                + [repr(r.shifts[n].accuracy) for n in self.shift_names]
                + [repr(r.avg_shifts), repr(r.avg_ref_shifts)]
            )
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "shift_names": list(self.shift_names),
            "rows": [
                {
                    "alpha": r.alpha,
                    "ref": asdict(r.ref),
                    "shifts": {n: asdict(r.shifts[n]) for n in self.shift_names},
                    "avg_shifts": r.avg_shifts,
                    "avg_ref_shifts": r.avg_ref_shifts,
                }
                for r in self.rows
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "AlphaSweep":
        names = tuple(data["shift_names"])
        rows = tuple(
            SweepRow(
                alpha=row["alpha"],
                ref=MT.EvalResult(**row["ref"]),
                shifts={n: MT.EvalResult(**row["shifts"][n]) for n in names},
            )
            for row in data["rows"]
        )
        return cls(names, rows)


def read_sweep_csv(text: str) -> list[dict[str, float]]:
    return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(io.StringIO(text))]


def evaluate_checkpoint(cfg: ExperimentConfig, data: ExperimentData, c: Checkpoint, alpha: float = float("nan")) -> SweepRow:
    def ev(d: D.Dataset) -> MT.EvalResult:
        return MT.evaluate(M.predict(M.logits(cfg.model, c, d.features)), d.labels, d.tag)

    return SweepRow(alpha, ev(data.ref_test), {n: ev(data.shifted[n]) for n in cfg.shift_names})


def evaluate_logits_fn(cfg: ExperimentConfig, data: ExperimentData, logits_fn, alpha: float) -> SweepRow:
    def ev(d: D.Dataset) -> MT.EvalResult:
        return MT.evaluate(M.predict(logits_fn(d.features)), d.labels, d.tag)

    return SweepRow(alpha, ev(data.ref_test), {n: ev(data.shifted[n]) for n in cfg.shift_names})


def stage_sweep(cfg: ExperimentConfig, data: ExperimentData, theta0: Checkpoint, theta1: Checkpoint) -> AlphaSweep:
    rows = tuple(
        evaluate_checkpoint(cfg, data, ckpt.interpolate(theta0, theta1, a), a) for a in cfg.alpha_grid
    )
    return AlphaSweep(tuple(cfg.shift_names), rows)


# --------------------------------------------------------------------- analyses


def stage_diversity(cfg: ExperimentConfig, data: ExperimentData, theta0: Checkpoint, theta1: Checkpoint) -> dict:
    alpha = cfg.diversity_alpha
    mixed = ckpt.interpolate(theta0, theta1, alpha)
    out = {"ensemble_alpha": alpha, "override_denominator": "all", "datasets": {}}
    sets = [("reference", data.ref_test)] + [(n, data.shifted[n]) for n in cfg.shift_names]
    for name, d in sets:
        c0 = M.forward_cache(cfg.model, theta0, d.features)
        c1 = M.forward_cache(cfg.model, theta1, d.features)
        report = MT.diversity_report(
            c0["logits"],
            c1["logits"],
            M.logits(cfg.model, mixed, d.features),
            c0["emb"],
            c1["emb"],
            d.labels,
            cfg.model.k,
            ckac_seed=cfg.seed_for("ckac"),
        )
        out["datasets"][name] = report.to_dict()
    return out


def train_zoo(cfg: ExperimentConfig, data: ExperimentData) -> list[SweepRow]:
    """Reference-only models of varying quality, trained end-to-end from scratch."""
    rows = []
    base = cfg.effective_train("pretrain")
    for i, member in enumerate(cfg.zoo):
        subset = D.subsample_per_class(data.ref_train, min(member.per_class, cfg.gen.per_class_train), cfg.seed_for("zoo.data", i))
        init = M.init_checkpoint(cfg.model, cfg.seed_for("zoo.init", i))
        tc = replace(base, mode="end2end", epochs=member.epochs, seed=cfg.seed_for("zoo.train", i),
                     warmup_steps=min(base.warmup_steps, member.epochs))
        c, _ = finetune(cfg.model, init, subset, tc)
        rows.append(evaluate_checkpoint(cfg, data, c))
    return rows


def _clamped(acc: float, n: int) -> float:
    return MT.clamp_accuracy(acc, n)


def stage_robustness(cfg: ExperimentConfig, data: ExperimentData, sweep: AlphaSweep, zoo_rows: list[SweepRow]) -> dict:
    """Baseline fits on the zoo, effective robustness along the sweep, linear-connectivity checks."""
    n_ref = len(data.ref_test)
    n_shift = {n: len(data.shifted[n]) for n in cfg.shift_names}
    n_avg = min(n_shift.values())
    out: dict = {
        "zoo": [
            {"ref_acc": r.ref.accuracy, "avg_shifts": r.avg_shifts, **{f"{n}_acc": r.shifts[n].accuracy for n in cfg.shift_names}}
            for r in zoo_rows
        ],
        "fits": {},
        "effective_robustness": {},
    }
    targets = list(cfg.shift_names) + ["avg_shifts"]
    for target in targets:
        n_t = n_avg if target == "avg_shifts" else n_shift[target]
        pts = []
        for r in zoo_rows:
            y = r.avg_shifts if target == "avg_shifts" else r.shifts[target].accuracy
            pts.append((_clamped(r.ref.accuracy, n_ref), _clamped(y, n_t)))
        try:
            fit = MT.fit_baseline(pts)
        except (FitError, DomainError) as exc:
            out["fits"][target] = {"error": str(exc)}
            continue
        out["fits"][target] = fit.to_dict()
        ys = sweep.column(target)
        out["effective_robustness"][target] = [
            {
                "alpha": a,
                "rho": MT.effective_robustness(fit, _clamped(x, n_ref), y),
            }
            for a, x, y in zip(sweep.alphas, sweep.column("ref"), ys)
        ]
    curves = {}
    for col in ("ref", "avg_shifts", "avg_ref_shifts"):
        ys = sweep.column(col)
        res = MT.observation1_check(list(zip(sweep.alphas, ys)), ys[0], ys[-1])
        curves[col] = res.to_dict()
    out["linear_connectivity"] = curves
    best = {}
    for col in ("ref", "avg_shifts", "avg_ref_shifts"):
        ys = sweep.column(col)
        i = int(np.argmax(ys))
        best[col] = {"alpha": sweep.alphas[i], "accuracy": ys[i]}
    out["optimal_alpha"] = {"selection": "oracle on test data (reporting only)", **best}
    return out


def stage_baselines(cfg: ExperimentConfig, data: ExperimentData, theta0: Checkpoint, theta1: Checkpoint) -> dict:
    """Alternative fine-tuning objectives and alternative ensembles."""
    out: dict = {}
    names = cfg.baselines_to_run
    bp = cfg.baseline_params
    ft = cfg.effective_train("finetune")
    variants = {
        "distill": (replace(ft, distill_alpha=bp.distill_alpha), theta0),
        "reg_to_init": (replace(ft, reg_to_init=bp.reg_to_init), None),
        "label_smoothing": (replace(ft, label_smoothing=bp.label_smoothing), None),
        "l1": (replace(ft, l1=bp.l1), None),
        "wd": (replace(ft, weight_decay=bp.weight_decay), None),
    }
    for name, (tc, teacher) in variants.items():
        if name not in names:
            continue
        c, _, _ = stage_finetune(cfg, data, theta0, tc, teacher=teacher)
        out[name] = {"config": tc.to_dict(), "result": _row_dict(evaluate_checkpoint(cfg, data, c))}
    spec = cfg.model
    ens = {
        "ose_logits": lambda a: (lambda X: E.ose_logits(spec, theta0, theta1, a, X)),
        "ose_softmax": lambda a: (lambda X: E.ose_softmax(spec, theta0, theta1, a, X)),
        "random_interp": lambda a: (
            lambda X: E.random_interp_predict(spec, theta0, theta1, a, X, cfg.seed_for("random_interp", bp.random_interp_seed))
        ),
    }
    for name, make in ens.items():
        if name not in names:
            continue
        out[name] = [_row_dict(evaluate_logits_fn(cfg, data, make(a), a)) for a in cfg.alpha_grid]
    if "ema" in names and cfg.ema is not None:
        _, trace, emas = stage_finetune(cfg, data, theta0, ft, ema_decay=cfg.ema.decay)
        debiased = ckpt.ema_final(emas["zero_init_debiased"])
        biased = ckpt.ema_final(emas["init_biased"])
        steps = emas["init_biased"].step
        recovered = ckpt.interpolate(theta0, debiased, 1.0 - cfg.ema.decay**steps)
        out["ema"] = {
            "decay": cfg.ema.decay,
            "steps": steps,
            "zero_init_debiased": _row_dict(evaluate_checkpoint(cfg, data, debiased)),
            "init_biased": _row_dict(evaluate_checkpoint(cfg, data, biased)),
            "recovery_alpha": 1.0 - cfg.ema.decay**steps,
            "recovery_max_abs_diff": float(np.max(np.abs(recovered.values - biased.values))),
            "wse_on_debiased": [
                _row_dict(evaluate_checkpoint(cfg, data, ckpt.interpolate(theta0, debiased, a), a))
                for a in cfg.alpha_grid
            ],
        }
    return out


def _row_dict(r: SweepRow) -> dict:
    d = {"ref_acc": r.ref.accuracy}
    d.update({f"{n}_acc": e.accuracy for n, e in r.shifts.items()})
    d["avg_shifts"] = r.avg_shifts
    d["avg_ref_shifts"] = r.avg_ref_shifts
    if r.alpha == r.alpha:
        d = {"alpha": r.alpha, **d}
    return d


def stage_plots(cfg: ExperimentConfig, sweep: AlphaSweep, robustness: dict) -> dict[str, str]:
    plots = {}
    targets = ["avg_shifts"] + list(cfg.shift_names)
    for target in targets:
        points = [
            ScatterPoint(f"zoo{i}", z["ref_acc"], z["avg_shifts"] if target == "avg_shifts" else z[f"{target}_acc"])
            for i, z in enumerate(robustness.get("zoo", []))
        ]
        endpoints = [(sweep.rows[0], "zero-shot"), (sweep.rows[-1], "fine-tuned")]
        for row, label in endpoints:
            y = row.avg_shifts if target == "avg_shifts" else row.shifts[target].accuracy
            y_ci = None if target == "avg_shifts" else (row.shifts[target].ci_low, row.shifts[target].ci_high)
            points.append(ScatterPoint(label, row.ref.accuracy, y, (row.ref.ci_low, row.ref.ci_high), y_ci))
        fit_d = robustness.get("fits", {}).get(target)
        fit = None
        if fit_d and "slope" in fit_d:
            fit = MT.RobustnessFit(fit_d["slope"], fit_d["intercept"], tuple(map(tuple, fit_d["points"])), tuple(fit_d["residuals"]))
        curve = list(zip(sweep.alphas, sweep.column("ref"), sweep.column(target)))
        plots[f"{target}.svg"] = render_scatter_svg(points, fit, curve, title=f"{target} vs reference")
    return plots


# ------------------------------------------------------------------------ output


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, allow_nan=False) + "\n"


class ArtifactWriter:
    """Stages outputs in a scratch directory; ``commit`` moves them into place."""

    def __init__(self, out_dir: str | Path):
        self.out_dir = Path(out_dir)
        self.out_dir.parent.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=".wiselab-", dir=self.out_dir.parent))

    def text(self, rel: str, content: str) -> None:
        p = self.tmp / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(content)

    def checkpoint(self, rel: str, c: Checkpoint) -> None:
        ckpt.save(c, self.tmp / rel)

    def trace(self, rel: str, t: TrainTrace) -> None:
        t.write_csv(self.tmp / rel)

    def commit(self) -> Path:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        for src in sorted(self.tmp.rglob("*")):
            if src.is_file():
                dst = self.out_dir / src.relative_to(self.tmp)
                dst.parent.mkdir(parents=True, exist_ok=True)
                shutil.move(str(src), str(dst))
        shutil.rmtree(self.tmp, ignore_errors=True)
        return self.out_dir

    def abort(self) -> None:
        shutil.rmtree(self.tmp, ignore_errors=True)


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> Path:
    """Full pipeline; on any failure nothing is written and the stage is named."""
    writer = ArtifactWriter(out_dir or cfg.output_dir)
    stage = "data"
    try:
        data = build_data(cfg)
        stage = "pretrain"
        theta0 = stage_pretrain(cfg, data)
        writer.checkpoint(THETA0, theta0)
        stage = "finetune"
        theta1, trace, _ = stage_finetune(cfg, data, theta0)
        writer.checkpoint(THETA1, theta1)
        writer.trace("trace.csv", trace)
        stage = "sweep"
        sweep = stage_sweep(cfg, data, theta0, theta1)
        writer.text("sweep.csv", sweep.to_csv())
        writer.text("sweep.json", dump_json(sweep.to_dict()))
        stage = "diversity"
        writer.text("diversity.json", dump_json(stage_diversity(cfg, data, theta0, theta1)))
        stage = "robustness"
        robustness = stage_robustness(cfg, data, sweep, train_zoo(cfg, data))
        writer.text("robustness.json", dump_json(robustness))
        if cfg.baselines_to_run:
            stage = "baselines"
            writer.text("baselines.json", dump_json(stage_baselines(cfg, data, theta0, theta1)))
        stage = "plots"
        for name, svg in stage_plots(cfg, sweep, robustness).items():
            writer.text(f"plots/{name}", svg)
        writer.text("config.json", cfg.to_json())
    except Exception as exc:
        writer.abort()
        raise StageError(stage, exc) from exc
    return writer.commit()
