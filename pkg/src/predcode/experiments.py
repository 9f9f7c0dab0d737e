"""Experiment runners behind the CLI subcommands.

Each runner takes a validated :class:`ExperimentConfig` and an output
directory, writes CSV / gnuplot artifacts and returns a short list of
summary lines. Artifacts carry a ``# predcode=<version> config=<hash>
seed=<seeds>`` first line and contain no timestamps, so a rerun with the
same config is byte-identical (wall-clock benchmarks excepted).
"""

from __future__ import annotations

import json
import math
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from . import data as dio
from . import metrics
from . import network as nw
from . import numerics as nm
from .bench import BENCH_COLUMNS, audit_grid, bench_update_ratio, count_audit
from .config import BenchSpec, ExperimentConfig, GenerateSpec
from .engine import make_engine, predicted_smm
from .errors import AuditError, ConfigError, DivergenceError, UsageError
from .schedules import Algorithm, ScheduleConfig, train


def artifact_meta(cfg: ExperimentConfig) -> dict:
    return {"predcode": __version__, "config": cfg.digest(),
            "seed": ",".join(str(s) for s in cfg.seeds)}


def cell_tag(cell: dict) -> str:
    return f"g{cell['gamma']:g}_a{cell['alpha']:g}_T{cell['T']}_wd{cell['weight_decay']:g}"


def load_datasets(cfg: ExperimentConfig, need_test: bool = True):
    ds_cfg = cfg.dataset
    if ds_cfg.name == "synthetic":
        if not ds_cfg.teacher_dims:
            raise ConfigError("synthetic dataset needs teacher_dims")
        train_set = dio.synthetic_generative(ds_cfg.n_samples, ds_cfg.teacher_dims, ds_cfg.teacher_seed)
        return train_set, None
    if ds_cfg.name == "digits":
        train_set = dio.load_digits("train")
        test_set = dio.load_digits("test") if need_test else None
    else:
        try:
            train_set = dio.load_idx_dataset(ds_cfg.name, "train", ds_cfg.root)
            test_set = dio.load_idx_dataset(ds_cfg.name, "test", ds_cfg.root) if need_test else None
        except FileNotFoundError as exc:
            raise UsageError(f"dataset not found: {exc}") from None
    if ds_cfg.subset is not None:
        train_set = dio.subset(train_set, ds_cfg.subset, ds_cfg.subset_seed, ds_cfg.stratified)
    if test_set is not None and ds_cfg.test_subset is not None:
        test_set = dio.subset(test_set, ds_cfg.test_subset, ds_cfg.subset_seed, ds_cfg.stratified)
    return train_set, test_set


def _check_dims(cfg: ExperimentConfig, dataset, supervised: bool) -> None:
    dims = cfg.network.dims
    if dims[0] != dataset.inputs.shape[0] and not supervised:
        raise ConfigError(f"network dims[0]={dims[0]} but data has {dataset.inputs.shape[0]} features")
    if supervised and (dims[-1] != dataset.inputs.shape[0] or dims[0] != dataset.n_classes):
        raise ConfigError(f"network dims {dims} do not fit {dataset.inputs.shape[0]} inputs "
                          f"and {dataset.n_classes} classes")


def schedule_for(cfg: ExperimentConfig, algorithm: str, cell: dict, seed: int, **changes) -> ScheduleConfig:
    s = cfg.schedule
    fields = dict(algorithm=Algorithm(algorithm), gamma=cell["gamma"], alpha=cell["alpha"], T=cell["T"],
                  weight_decay=cell["weight_decay"], batch_size=s.batch_size, epochs=s.epochs,
                  total_steps=s.total_steps, seed=seed, sequential=s.sequential,
                  warm_start=s.warm_start, patience=s.patience, plateau_tol=s.plateau_tol,
                  plateau_window=s.plateau_window, latent_std=s.latent_std)
    fields.update(changes)
    return ScheduleConfig(**fields)


def init_network(cfg: ExperimentConfig, seed: int) -> nw.PCNetwork:
    n = cfg.network
    return nw.PCNetwork.init(n.dims, nm.make_rng(seed), n.activation, n.init)


def _engine(cfg):
    return make_engine(cfg.engine, cfg.workers)


def _train_cell(cfg, net, dataset, sched, mode, eval_set=None):
    """Train one grid cell; divergence is returned, not raised."""
    with _engine(cfg) as eng:
        try:
            return train(net, dataset, sched, mode, eng, eval_set), None
        except DivergenceError as err:
            return err.report, str(err)


def _finish(diverged: list[str], lines: list[str]) -> list[str]:
    if diverged:
        raise DivergenceError(f"{len(diverged)} run(s) diverged: " + "; ".join(diverged)
                              + " (artifacts were written)")
    return lines


def _require_grid(cfg: ExperimentConfig) -> None:
    if not cfg.seeds:
        raise UsageError("empty grid: no seeds")
    for alg in cfg.schedule.algorithms:
        if not cfg.schedule.cells(alg):
            raise UsageError(f"empty grid for {alg}: every hyperparameter axis needs a value")


def _write_config(cfg: ExperimentConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    text = json.dumps(cfg.model_dump(mode="json"), sort_keys=True, indent=2)
    (out / "config.resolved.json").write_text(text + "\n")


# -- plans (dry run) ---------------------------------------------------------------

def plan(cfg: ExperimentConfig) -> list[str]:
    kind = cfg.experiment
    lines = [f"experiment {kind} (config {cfg.digest()}, predcode {__version__})"]
    if kind in ("classify", "generate", "efficiency"):
        _require_grid(cfg)
        for alg in cfg.schedule.algorithms:
            cells = cfg.schedule.cells(alg)
            if kind == "generate" and alg == "pc":
                cells = [dict(c, T=T) for c in cells for T in (cfg.generate or GenerateSpec()).pc_T]
            for c in cells:
                lines.append(f"  {alg} {cell_tag(c)} seeds={cfg.seeds}")
    elif kind == "bench-smm":
        b = cfg.bench or BenchSpec()
        lines.append(f"  audit depths={b.depths} T={b.T} updates={b.updates}")
    elif kind == "bench-wallclock":
        b = cfg.bench or BenchSpec()
        lines.append(f"  ratio depths={b.depths} widths={b.widths} workers={cfg.workers} repeats={b.repeats}")
    else:
        for name, path in cfg.calibrate.checkpoints.items():
            lines.append(f"  {name}: {path}{'' if Path(path).exists() else ' (missing)'}")
    return lines


# -- classify ------------------------------------------------------------------------

RESULT_COLUMNS = ("algorithm", "gamma", "alpha", "T", "weight_decay", "seed", "test_acc",
                  "final_train_loss", "best_epoch", "updates", "smm", "diverged")
SUMMARY_COLUMNS = ("algorithm", "gamma", "alpha", "T", "weight_decay", "n_seeds",
                   "mean_test_acc", "std_test_acc", "n_diverged")


def run_classify(cfg: ExperimentConfig, out: Path) -> list[str]:
    _require_grid(cfg)
    train_set, test_set = load_datasets(cfg)
    if train_set.labels is None:
        raise UsageError("classify needs a labelled dataset")
    _check_dims(cfg, train_set, supervised=True)
    meta = artifact_meta(cfg)
    _write_config(cfg, out)
    results, summary, diverged = [], [], []
    best = {}
    for alg in cfg.schedule.algorithms:
        for cell in cfg.schedule.cells(alg):
            accs, n_div = [], 0
            for seed in cfg.seeds:
                run_dir = out / alg / cell_tag(cell) / f"seed{seed}"
                sched = schedule_for(cfg, alg, cell, seed)
                report, err = _train_cell(cfg, init_network(cfg, seed), train_set, sched,
                                          nw.Mode.SUPERVISED, test_set)
                acc = math.nan
                if err is None:
                    pb = metrics.PredictionBatch.from_onehot(nw.forward(report.network, test_set.inputs),
                                                             test_set.labels)
                    acc = metrics.accuracy(pb)
                    accs.append(acc)
                    run_dir.mkdir(parents=True, exist_ok=True)
                    nw.save(report.network, run_dir / "network.pcnw")
                else:
                    n_div += 1
                    diverged.append(f"{alg} {cell_tag(cell)} seed {seed}")
                for name, (cols, rows) in metrics.report_tables(report).items():
                    if rows:
                        metrics.write_csv(run_dir / f"{name}.csv", cols, rows, meta)
                results.append(dict(
                    algorithm=alg, **cell, seed=seed, test_acc=acc,
                    final_train_loss=report.epoch_train_loss[-1] if report.epoch_train_loss else None,
                    best_epoch=report.best_epoch, updates=report.updates,
                    smm=report.ledger.smm_count, diverged=err is not None))
            mean = float(np.mean(accs)) if accs else math.nan
            std = float(np.std(accs)) if accs else math.nan
            summary.append(dict(algorithm=alg, **cell, n_seeds=len(cfg.seeds), mean_test_acc=mean,
                                std_test_acc=std, n_diverged=n_div))
            if accs and (alg not in best or mean > best[alg][0]):
                best[alg] = (mean, cell)
    metrics.write_csv(out / "results.csv", RESULT_COLUMNS, results, meta)
    metrics.write_csv(out / "summary.csv", SUMMARY_COLUMNS, summary, meta)
    lines = []
    for alg, (mean, cell) in best.items():
        src = out / alg / cell_tag(cell) / f"seed{cfg.seeds[0]}" / "network.pcnw"
        dst = out / "best" / f"{alg}.pcnw"
        dst.parent.mkdir(parents=True, exist_ok=True)
        dst.write_bytes(src.read_bytes())
        row = next(r for r in summary if r["algorithm"] == alg and cell_tag(r) == cell_tag(cell))
        lines.append(f"{alg}: best {cell_tag(cell)} test acc {100 * mean:.2f}% "
                     f"+/- {100 * row['std_test_acc']:.2f} over {len(cfg.seeds)} seed(s)")
    return _finish(diverged, lines)


# -- generate ------------------------------------------------------------------------

ENERGY_COLUMNS = ("algorithm", "T", "gamma", "alpha", "seed", "iteration", "smm", "energy")


def run_generate(cfg: ExperimentConfig, out: Path) -> list[str]:
    _require_grid(cfg)
    if cfg.schedule.batch_size != "full":
        raise ConfigError("generate runs in the full-batch regime (batch_size: full)")
    gen = cfg.generate or GenerateSpec()
    train_set, _ = load_datasets(cfg, need_test=False)
    train_set = dio.Dataset(train_set.inputs, None, train_set.name, train_set.checksum, train_set.image_shape)
    _check_dims(cfg, train_set, supervised=False)
    meta = artifact_meta(cfg)
    _write_config(cfg, out)
    rows, series, diverged, finals = [], {}, [], []
    for alg in cfg.schedule.algorithms:
        if alg not in ("ipc", "pc"):
            raise ConfigError(f"generate supports ipc and pc, not {alg}")
        cells = cfg.schedule.cells(alg)
        if alg == "pc":
            cells = [dict(c, T=T) for c in cells for T in gen.pc_T]
        for cell in cells:
            for seed in cfg.seeds:
                steps = gen.iterations if alg == "ipc" else math.ceil(gen.iterations / cell["T"])
                sched = schedule_for(cfg, alg, cell, seed, total_steps=steps, track_loss=False)
                report, err = _train_cell(cfg, init_network(cfg, seed), train_set, sched, nw.Mode.GENERATIVE)
                if err:
                    diverged.append(f"{alg} {cell_tag(cell)} seed {seed}")
                trace = report.energy_trace[:gen.iterations + 1]
                smms = report.iteration_smm[:gen.iterations + 1]
                for i, (s, e) in enumerate(zip(smms, trace)):
                    rows.append(dict(algorithm=alg, T=cell["T"], gamma=cell["gamma"], alpha=cell["alpha"],
                                     seed=seed, iteration=i, smm=s, energy=e))
                label = f"{alg} T={cell['T']} {cell_tag(cell)} seed={seed}"
                series[label] = list(enumerate(trace))
                if trace:
                    finals.append(f"{label}: energy {trace[0]:.6g} -> {trace[-1]:.6g} "
                                  f"after {len(trace) - 1} iterations")
    metrics.write_csv(out / "energy.csv", ENERGY_COLUMNS, rows, meta)
    metrics.write_gnuplot(out / "energy.dat", series, ("iteration", "energy"), meta)
    return _finish(diverged, finals)


# -- efficiency ----------------------------------------------------------------------

LOSS_COLUMNS = ("algorithm", "T", "gamma", "alpha", "seed", "update", "smm", "train_loss")


def run_efficiency(cfg: ExperimentConfig, out: Path) -> list[str]:
    _require_grid(cfg)
    if cfg.schedule.batch_size != "full":
        raise ConfigError("efficiency runs in the full-batch regime (batch_size: full)")
    budget = (cfg.efficiency.smm_budget if cfg.efficiency else 2000)
    train_set, _ = load_datasets(cfg, need_test=False)
    _check_dims(cfg, train_set, supervised=True)
    meta = artifact_meta(cfg)
    _write_config(cfg, out)
    L = len(cfg.network.dims) - 1
    rows, series, diverged, lines = [], {}, [], []
    for alg in cfg.schedule.algorithms:
        for cell in cfg.schedule.cells(alg):
            _, smm_per = predicted_smm(alg, L, cell["T"])
            if smm_per == 0:
                raise ConfigError(f"{alg} with L={L} performs no matmuls; nothing to plot")
            steps = budget // smm_per
            for seed in cfg.seeds:
                sched = schedule_for(cfg, alg, cell, seed, total_steps=steps, plateau_tol=0.0)
                report, err = _train_cell(cfg, init_network(cfg, seed), train_set, sched, nw.Mode.SUPERVISED)
                if err:
                    diverged.append(f"{alg} {cell_tag(cell)} seed {seed}")
                else:
                    count_audit(report, alg, L, cell["T"])
                for i, (s, loss) in enumerate(report.loss_trace):
                    rows.append(dict(algorithm=alg, T=cell["T"], gamma=cell["gamma"], alpha=cell["alpha"],
                                     seed=seed, update=i, smm=s, train_loss=loss))
                label = f"{alg} T={cell['T']} {cell_tag(cell)} seed={seed}"
                series[label] = report.loss_trace
                if report.loss_trace:
                    lines.append(f"{label}: loss {report.loss_trace[-1][1]:.6g} "
                                 f"at {report.loss_trace[-1][0]} SMMs")
    metrics.write_csv(out / "loss.csv", LOSS_COLUMNS, rows, meta)
    metrics.write_gnuplot(out / "loss.dat", series, ("smm", "train_loss"), meta)
    return _finish(diverged, lines)


# -- benchmarks ----------------------------------------------------------------------

AUDIT_COLUMNS = ("algorithm", "L", "T", "updates", "expected_mm", "observed_mm",
                 "expected_smm", "observed_smm", "passed")


def run_bench_smm(cfg: ExperimentConfig, out: Path) -> list[str]:
    b = cfg.bench or BenchSpec()
    meta = artifact_meta(cfg)
    _write_config(cfg, out)
    results = audit_grid(b.depths, tuple(b.T), b.updates, cfg.seeds[0])
    rows = [dict(algorithm=r.algorithm, L=r.L, T=r.T, updates=r.updates, expected_mm=r.expected_mm,
                 observed_mm=r.observed_mm, expected_smm=r.expected_smm, observed_smm=r.observed_smm,
                 passed=r.passed) for r in results]
    metrics.write_csv(out / "audit.csv", AUDIT_COLUMNS, rows, meta)
    failed = [r for r in results if not r.passed]
    if failed:
        raise AuditError("; ".join(r.describe() for r in failed))
    return [f"{len(results)} audits passed over L={min(b.depths)}..{max(b.depths)}"]


def run_bench_wallclock(cfg: ExperimentConfig, out: Path) -> list[str]:
    b = cfg.bench or BenchSpec()
    meta = artifact_meta(cfg)
    _write_config(cfg, out)
    if b.repeats == 1:
        warnings.warn("a single repeat gives no variance estimate", stacklevel=2)
    rows = bench_update_ratio(b.depths, b.widths, cfg.workers, b.repeats, b.batch, cfg.seeds[0])
    metrics.write_csv(out / "bench.csv", BENCH_COLUMNS, rows, meta)
    series = {}
    for r in rows:
        if r["algorithm"] != "bp":
            series.setdefault(f"L={r['L']}", []).append((r["width"], r["ratio_vs_bp"]))
    metrics.write_gnuplot(out / "ratio.dat", series, ("width", "ratio_vs_bp"), meta)
    lines = []
    for name, pts in series.items():
        ratios = [p[1] for p in pts]
        trend = all(b2 <= a2 for a2, b2 in zip(ratios, ratios[1:]))
        lines.append(f"{name}: ratios {', '.join(f'{v:.3f}' for v in ratios)}"
                     f" ({'non-increasing' if trend else 'not monotone'} in width)")
    return lines


# -- calibrate -----------------------------------------------------------------------

MEDIAN_COLUMNS = ("level", "model", "median_accuracy", "median_ada_ece")


def run_calibrate(cfg: ExperimentConfig, out: Path) -> list[str]:
    c = cfg.calibrate
    models = {}
    for name, path in c.checkpoints.items():
        if not Path(path).exists():
            raise UsageError(f"checkpoint for {name!r} not found: {path} (run classify first)")
        models[name] = nw.load(path)
    _, test_set = load_datasets(cfg)
    if test_set is None or test_set.labels is None:
        raise UsageError("calibrate needs a labelled test split")
    meta = artifact_meta(cfg)
    _write_config(cfg, out)
    rows = []
    for name, net in models.items():
        rows += metrics.shift_study(net, test_set, c.corruptions, c.levels, cfg.seeds[0], c.n_bins, name)
    metrics.write_csv(out / "shift.csv", metrics.SHIFT_COLUMNS, rows, meta)
    med_rows, medians = [], {}
    for name in models:
        mine = [r for r in rows if r["model"] == name]
        acc = metrics.level_medians(mine, "accuracy")
        ece = metrics.level_medians(mine, "ada_ece")
        medians[name] = ece
        for lv in acc:
            med_rows.append(dict(level=lv, model=name, median_accuracy=acc[lv], median_ada_ece=ece[lv]))
    med_rows.sort(key=lambda r: (r["level"], r["model"]))
    metrics.write_csv(out / "medians.csv", MEDIAN_COLUMNS, med_rows, meta)
    paired_cols = ["corruption", "level"] + [f"{k}_{m}" for m in models for k in ("accuracy", "ada_ece")]
    paired = {}
    for r in rows:
        key = (r["corruption"], r["level"])
        paired.setdefault(key, {"corruption": key[0], "level": key[1]})
        paired[key][f"accuracy_{r['model']}"] = r["accuracy"]
        paired[key][f"ada_ece_{r['model']}"] = r["ada_ece"]
    ordered = [paired[k] for k in sorted(paired, key=lambda k: (k[1], k[0]))]
    metrics.write_csv(out / "paired.csv", paired_cols, ordered, meta)
    lines = [f"{r['model']} level {r['level']}: median acc {r['median_accuracy']:.4f}, "
             f"median AdaECE {r['median_ada_ece']:.4f}" for r in med_rows]
    if "ipc" in medians and "bp" in medians:
        worse = [lv for lv in medians["ipc"] if lv > 0 and medians["ipc"][lv] > medians["bp"][lv]]
        if worse:
            warnings.warn(f"iPC median AdaECE above BP at corrupted level(s) {worse}", stacklevel=2)
    return lines


RUNNERS = {
    "classify": run_classify,
    "generate": run_generate,
    "efficiency": run_efficiency,
    "bench-smm": run_bench_smm,
    "bench-wallclock": run_bench_wallclock,
    "calibrate": run_calibrate,
}


def run(cfg: ExperimentConfig, out) -> list[str]:
    return RUNNERS[cfg.experiment](cfg, Path(out))
