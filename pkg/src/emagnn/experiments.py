"""Experiments A, B and C: cohort-wide sweeps that produce table-shaped reports.

Every training run is an independent job.  Seeds are derived from one root
seed and a tuple of string keys, so a job's outcome does not depend on the
order in which jobs execute or on how many worker processes run them.
"""
from __future__ import annotations

import csv
import logging
import math
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import IndividualSeries, split_sequential, train_test_windows
from .graphs import STATIC_METRICS, Graph, build_graph, build_random, graph_correlation, save_graph
from .models import GRAPH_FAMILIES, ModelConfig, build_model, extract_learned_graph
from .training import EvalRecord, TrainConfig, evaluate, train, write_records

log = logging.getLogger(__name__)

# row order of the report grids
TABLE_METRICS = ("EUC", "DTW", "KNN", "CORR")
STATIC_FAMILIES = ("RGCN_ATT", "ST_ATT_CHEB")


def derive_seed(root: int, *keys) -> int:
    """Deterministic 32-bit seed for a (root, key...) combination."""
    words = [zlib.crc32(str(k).encode()) for k in keys]
    return int(np.random.SeedSequence([int(root), *words]).generate_state(1)[0])


def percent_change(mse_static: float, mse_learned: float) -> float:
    """Relative change of the learned-graph MSE against the static-graph MSE, in percent."""
    if mse_static == 0:
        raise ValueError("percent change is undefined for a zero static MSE")
    return 100.0 * (mse_learned - mse_static) / mse_static


@dataclass
class ExperimentPlan:
    experiment: str
    families: tuple[str, ...]
    metrics: tuple[str, ...]
    gdts: tuple[float, ...]
    seq_lens: tuple[int, ...]
    n_random_repeats: int = 5
    seed: int = 0
    epochs: int = 300
    lr: float = 0.01
    dropout: float = 0.3
    hidden: int = 32
    clip_norm: float | None = 5.0
    train_fraction: float = 0.7
    workers: int = 1

    def __post_init__(self):
        self.experiment = self.experiment.upper()
        if self.experiment not in ("A", "B", "C"):
            raise ValueError(f"unknown experiment {self.experiment!r}")
        self.families = tuple(f.upper() for f in self.families)
        self.metrics = tuple(m.upper() for m in self.metrics)
        self.gdts = tuple(float(g) for g in self.gdts)
        self.seq_lens = tuple(int(s) for s in self.seq_lens)
        for axis in ("families", "metrics", "gdts", "seq_lens"):
            if not getattr(self, axis):
                raise ValueError(f"plan axis {axis} is empty")
        if self.n_random_repeats < 1:
            raise ValueError("n_random_repeats must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if any(not 0.0 < g <= 1.0 for g in self.gdts):
            raise ValueError("gdt values must lie in (0, 1]")

    @classmethod
    def default(cls, experiment: str, **overrides) -> "ExperimentPlan":
        experiment = experiment.upper()
        if experiment == "A":
            axes = dict(families=("LSTM",) + GRAPH_FAMILIES, metrics=TABLE_METRICS, gdts=(0.2,), seq_lens=(1, 2, 5))
        elif experiment == "B":
            axes = dict(families=GRAPH_FAMILIES, metrics=TABLE_METRICS + ("RAND",), gdts=(0.2, 0.4, 1.0),
                        seq_lens=(5,))
        elif experiment == "C":
            axes = dict(families=STATIC_FAMILIES, metrics=TABLE_METRICS + ("RAND",), gdts=(0.2,), seq_lens=(5,))
        else:
            raise ValueError(f"unknown experiment {experiment!r}")
        axes.update(overrides)
        return cls(experiment, **axes)

    def train_config(self, seq_len: int, seed: int) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, lr=self.lr, dropout=self.dropout, seq_len=seq_len, seed=seed,
                           clip_norm=self.clip_norm, train_fraction=self.train_fraction)

    def model_config(self, family: str, seq_len: int) -> ModelConfig:
        return ModelConfig(family=family, hidden=self.hidden, dropout=self.dropout, seq_len=seq_len)


@dataclass
class CellSummary:
    family: str
    metric: str
    gdt: float
    seq_len: int
    mean: float
    std: float
    n: int
    n_failed: int

    @property
    def label(self) -> str:
        return self.family if not self.metric else f"{self.family}_{self.metric}"


@dataclass
class TransferRecord:
    individual_id: str
    family: str
    metric: str
    mse_static: float
    mse_learned: float
    percent_change: float
    graph_correlation: float


@dataclass
class ExperimentReport:
    plan: ExperimentPlan
    records: list[EvalRecord] = field(default_factory=list)
    cells: list[CellSummary] = field(default_factory=list)
    transfers: list[TransferRecord] = field(default_factory=list)
    graphs: dict[str, Graph] = field(default_factory=dict)

    def cell(self, family: str, metric: str, gdt: float, seq_len: int) -> CellSummary:
        for c in self.cells:
            if (c.family, c.metric, c.gdt, c.seq_len) == (family, metric, gdt, seq_len):
                return c
        raise KeyError((family, metric, gdt, seq_len))


# ----------------------------------------------------------------- jobs
@dataclass
class _Job:
    series: IndividualSeries
    family: str
    metric: str
    gdt: float
    graph: Graph | None
    model_config: ModelConfig
    train_config: TrainConfig


def _failed(job_id: str, family: str, metric: str, gdt: float, seq_len: int, seed: int, err: Exception) -> EvalRecord:
    return EvalRecord(job_id, family, metric, gdt, seq_len, seed, math.nan, failed=True,
                      error=f"{type(err).__name__}: {err}")


def _fit(job: _Job):
    """Train one model; returns the record and the trained model."""
    cfg = job.train_config
    train_w, test_w = train_test_windows(job.series, cfg.seq_len, cfg.train_fraction)
    model = build_model(job.model_config, job.series.V, job.graph, seed=cfg.seed)
    curve = train(model, train_w, cfg)
    return EvalRecord(job.series.individual_id, job.family, job.metric, job.gdt, cfg.seq_len, cfg.seed,
                      evaluate(model, test_w), curve), model


def _run_job(job: _Job) -> EvalRecord:
    try:
        return _fit(job)[0]
    except Exception as err:  # cell-local failure
        cfg = job.train_config
        log.warning("%s %s_%s failed: %s", job.series.individual_id, job.family, job.metric, err)
        return _failed(job.series.individual_id, job.family, job.metric, job.gdt, cfg.seq_len, cfg.seed, err)


def _map(fn, jobs: Sequence, workers: int) -> list:
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


def _train_segment(series: IndividualSeries, train_fraction: float) -> IndividualSeries:
    return split_sequential(series, train_fraction)[0]


def _static_graph(series: IndividualSeries, metric: str, gdt: float, plan: ExperimentPlan, repeat: int = 0) -> Graph:
    if metric == "RAND":
        seed = derive_seed(plan.seed, "RAND", series.individual_id, gdt, repeat)
        return build_random(series.V, gdt, seed, node_names=series.variable_names)
    return build_graph(metric, _train_segment(series, plan.train_fraction), gdt)


def _graph_key(individual_id: str, metric: str, gdt: float, repeat: int | None = None) -> str:
    key = f"{individual_id}_{metric}_gdt{round(gdt * 100)}"
    return key if repeat is None else f"{key}_r{repeat}"


def _model_seed(plan: ExperimentPlan, individual_id: str, family: str, seq_len: int, repeat: int = 0) -> int:
    # the graph is not part of the key: runs that differ only by graph share an initialization
    return derive_seed(plan.seed, individual_id, family, seq_len, repeat)


def summarize(records: Sequence[EvalRecord]) -> list[CellSummary]:
    """Per-cell mean and population std across individuals, failed runs excluded.

    RAND repeats of one individual are averaged first, so every individual
    contributes one value to its cell.
    """
    cells: dict[tuple, dict[str, list[EvalRecord]]] = {}
    for r in records:
        cells.setdefault((r.family, r.metric, r.gdt, r.seq_len), {}).setdefault(r.individual_id, []).append(r)
    out = []
    for (family, metric, gdt, seq_len), by_individual in cells.items():
        values, n_failed = [], 0
        for recs in by_individual.values():
            ok = [r.test_mse for r in recs if not r.failed]
            if len(ok) == len(recs):
                values.append(float(np.mean(ok)))
            else:
                n_failed += 1
        mean = float(np.mean(values)) if values else math.nan
        std = float(np.std(values)) if values else math.nan
        out.append(CellSummary(family, metric, gdt, seq_len, mean, std, len(values), n_failed))
    return out


def _grid_jobs(cohort: Sequence[IndividualSeries], plan: ExperimentPlan, report: ExperimentReport):
    jobs, preset = [], []
    for series in cohort:
        iid = series.individual_id
        for seq_len in plan.seq_lens:
            if "LSTM" in plan.families:
                seed = _model_seed(plan, iid, "LSTM", seq_len)
                jobs.append(_Job(series, "LSTM", "", plan.gdts[0], None, plan.model_config("LSTM", seq_len),
                                 plan.train_config(seq_len, seed)))
            for gdt in plan.gdts:
                for metric in plan.metrics:
                    repeats = plan.n_random_repeats if metric == "RAND" else 1
                    for rep in range(repeats):
                        try:
                            graph = _static_graph(series, metric, gdt, plan, rep)
                            report.graphs[_graph_key(iid, metric, gdt, rep if metric == "RAND" else None)] = graph
                        except Exception as err:
                            graph, error = None, err
                        for family in plan.families:
                            if family == "LSTM":
                                continue
                            seed = _model_seed(plan, iid, family, seq_len, rep)
                            if graph is None:
                                preset.append(_failed(iid, family, metric, gdt, seq_len, seed, error))
                                continue
                            jobs.append(_Job(series, family, metric, gdt, graph, plan.model_config(family, seq_len),
                                             plan.train_config(seq_len, seed)))
    return jobs, preset


def _run_grid(cohort: Sequence[IndividualSeries], plan: ExperimentPlan) -> ExperimentReport:
    if not cohort:
        raise ValueError("empty cohort")
    report = ExperimentReport(plan)
    jobs, preset = _grid_jobs(cohort, plan, report)
    log.info("experiment %s: %d training runs", plan.experiment, len(jobs))
    report.records = _map(_run_job, jobs, plan.workers) + preset
    report.cells = summarize(report.records)
    return report


def run_experiment_a(cohort: Sequence[IndividualSeries], plan: ExperimentPlan | None = None) -> ExperimentReport:
    """LSTM against the graph families on every static metric, across input lengths."""
    return _run_grid(cohort, plan or ExperimentPlan.default("A"))


def run_experiment_b(cohort: Sequence[IndividualSeries], plan: ExperimentPlan | None = None) -> ExperimentReport:
    """Graph families on every metric plus random graphs, across density thresholds."""
    return _run_grid(cohort, plan or ExperimentPlan.default("B"))


# ------------------------------------------------------------- experiment C
@dataclass
class _TransferJob:
    series: IndividualSeries
    metric: str
    plan: ExperimentPlan


def _run_transfer(job: _TransferJob):
    plan, series, metric = job.plan, job.series, job.metric
    iid, gdt, seq_len = series.individual_id, plan.gdts[0], plan.seq_lens[0]
    records: list[EvalRecord] = []
    transfers: list[TransferRecord] = []
    graphs: dict[str, Graph] = {}
    try:
        static = _static_graph(series, metric, gdt, plan)
    except Exception as err:
        for family in ("GRAPH_LEARN",) + plan.families:
            records.append(_failed(iid, family, metric, gdt, seq_len, _model_seed(plan, iid, family, seq_len), err))
        return records, transfers, graphs
    graphs[_graph_key(iid, metric, gdt)] = static

    def fit(family: str, graph: Graph, tag: str):
        seed = _model_seed(plan, iid, family, seq_len)
        job = _Job(series, family, tag, gdt, graph, plan.model_config(family, seq_len), plan.train_config(seq_len, seed))
        try:
            record, model = _fit(job)
        except Exception as err:
            record, model = _failed(iid, family, tag, gdt, seq_len, seed, err), None
        records.append(record)
        return record, model

    _, learner = fit("GRAPH_LEARN", static, metric)
    if learner is None:
        return records, transfers, graphs
    learned = extract_learned_graph(learner, gdt)
    learned = replace(learned, node_names=static.node_names)
    graphs[f"{iid}_LEARNED_from_{metric}"] = learned
    corr = graph_correlation(static, learned)
    for family in plan.families:
        base, _ = fit(family, static, metric)
        moved, _ = fit(family, learned, f"LEARNED_{metric}")
        if base.failed or moved.failed:
            continue
        transfers.append(TransferRecord(iid, family, metric, base.test_mse, moved.test_mse,
                                        percent_change(base.test_mse, moved.test_mse), corr))
    return records, transfers, graphs


def run_experiment_c(cohort: Sequence[IndividualSeries], plan: ExperimentPlan | None = None) -> ExperimentReport:
    """Learned-graph transfer: retrain static-graph families on GRAPH_LEARN's learned adjacency."""
    plan = plan or ExperimentPlan.default("C")
    if not cohort:
        raise ValueError("empty cohort")
    report = ExperimentReport(plan)
    jobs = [_TransferJob(series, metric, plan) for series in cohort for metric in plan.metrics]
    log.info("experiment C: %d transfer chains", len(jobs))
    for records, transfers, graphs in _map(_run_transfer, jobs, plan.workers):
        report.records.extend(records)
        report.transfers.extend(transfers)
        report.graphs.update(graphs)
    report.cells = summarize(report.records)
    return report


def run_experiment(cohort: Sequence[IndividualSeries], plan: ExperimentPlan) -> ExperimentReport:
    runner = {"A": run_experiment_a, "B": run_experiment_b, "C": run_experiment_c}[plan.experiment]
    return runner(cohort, plan)


# ------------------------------------------------------------------ output
def _fmt_cell(cell: CellSummary | None) -> str:
    if cell is None or cell.n == 0:
        return "FAILED"
    return f"{cell.mean:.3f}({cell.std:.3f})"


def grid_rows(report: ExperimentReport) -> tuple[list[str], list[list[str]]]:
    """Table-shaped grid: one row per model/metric, one column per swept value."""
    plan = report.plan
    lookup = {(c.family, c.metric, c.gdt, c.seq_len): c for c in report.cells}
    metrics = [m for m in plan.metrics if m != "RAND"]
    rows: list[tuple[str, str]] = []
    if "LSTM" in plan.families:
        rows.append(("LSTM", ""))
    graph_families = [f for f in plan.families if f != "LSTM"]
    rows += [(f, m) for m in metrics for f in graph_families]
    if "RAND" in plan.metrics:
        rows += [(f, "RAND") for f in graph_families]
    if plan.experiment == "A":
        gdt = plan.gdts[0]
        header = ["model"] + [f"Seq{s}" for s in plan.seq_lens]
        columns = [(gdt, s) for s in plan.seq_lens]
    else:
        seq_len = plan.seq_lens[0]
        header = ["model"] + [f"GDT{round(g * 100)}" for g in plan.gdts]
        columns = [(g, seq_len) for g in plan.gdts]
    body = []
    for family, metric in rows:
        label = family if not metric else f"{family}_{metric}"
        body.append([label] + [_fmt_cell(lookup.get((family, metric, g, s))) for g, s in columns])
    return header, body


def transfer_summary(report: ExperimentReport) -> list[dict]:
    out = []
    for family in report.plan.families:
        for metric in report.plan.metrics:
            rows = [t for t in report.transfers if t.family == family and t.metric == metric]
            expected = sum(1 for r in report.records if r.family == family and r.metric == metric)
            out.append({
                "family": family,
                "metric": metric,
                "mean_mse_static": float(np.mean([t.mse_static for t in rows])) if rows else math.nan,
                "mean_mse_learned": float(np.mean([t.mse_learned for t in rows])) if rows else math.nan,
                "mean_percent_change": float(np.mean([t.percent_change for t in rows])) if rows else math.nan,
                "mean_graph_correlation": float(np.mean([t.graph_correlation for t in rows])) if rows else math.nan,
                "n": len(rows),
                "n_failed": expected - len(rows),
            })
    return out


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _g(x: float) -> str:
    return format(x, ".17g")


def write_report(report: ExperimentReport, out_dir) -> list[Path]:
    """Write the report CSVs and the graph exports; returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tag = report.plan.experiment.lower()
    written = []

    records_path = out / f"records_{tag}.csv"
    curves_path = out / f"curves_{tag}.csv"
    write_records(report.records, records_path, curves_path)
    written += [records_path, curves_path]

    cells_path = out / f"cells_{tag}.csv"
    _write_csv(cells_path, ["family", "metric", "gdt", "seq_len", "mean", "std", "n", "n_failed"],
               [[c.family, c.metric, c.gdt, c.seq_len, _g(c.mean), _g(c.std), c.n, c.n_failed] for c in report.cells])
    written.append(cells_path)

    if report.plan.experiment in ("A", "B"):
        header, body = grid_rows(report)
        path = out / f"report_{tag}.csv"
        _write_csv(path, header, body)
        written.append(path)
    else:
        path = out / "report_c.csv"
        _write_csv(path, ["individual_id", "family", "metric", "mse_static", "mse_learned", "percent_change",
                          "graph_correlation"],
                   [[t.individual_id, t.family, t.metric, _g(t.mse_static), _g(t.mse_learned),
                     _g(t.percent_change), _g(t.graph_correlation)] for t in report.transfers])
        written.append(path)
        box = out / "boxplot_c.csv"
        rows = []
        for t in report.transfers:
            rows.append([t.family, t.metric, "static", t.individual_id, _g(t.mse_static)])
            rows.append([t.family, t.metric, "learned", t.individual_id, _g(t.mse_learned)])
        _write_csv(box, ["family", "metric", "graph_kind", "individual_id", "mse"], rows)
        written.append(box)
        summary = transfer_summary(report)
        path = out / "summary_c.csv"
        keys = list(summary[0]) if summary else ["family", "metric"]
        _write_csv(path, keys, [[_g(v) if isinstance(v, float) else v for v in row.values()] for row in summary])
        written.append(path)

    graph_dir = out / "graphs"
    graph_dir.mkdir(exist_ok=True)
    for key in sorted(report.graphs):
        path = graph_dir / f"{key}.csv"
        save_graph(report.graphs[key], path)
        written.append(path)
    return written
