"""Manual and threshold chopping sweeps, per-type evaluation and the echelon statistic."""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from .encoder import ChopPlan, EncoderParams, count_parameters, encoder_forward, predict
from .gate import GateParams, gated_forward, run_instance_plans
from .results import UNDEFINED, AblationMatrix, EvalReport, mean_per_type
from .seeding import rng_for
from .taskgen import Dataset

log = logging.getLogger(__name__)


def type_names(data: Dataset) -> dict[int, str]:
    return {s.type_id: s.name for s in data.specs}


def predictions(params: EncoderParams, plan: ChopPlan | None, tokens: np.ndarray,
                batch: int = 512) -> np.ndarray:
    out = [predict(encoder_forward(tokens[i:i + batch], params, plan).logits.value)
           for i in range(0, len(tokens), batch)]
    return np.concatenate(out)


def report_from_predictions(pred: np.ndarray, data: Dataset) -> EvalReport:
    names = type_names(data)
    per_type, counts = {}, {}
    for t in data.type_ids:
        sel = data.types == t
        if not sel.any():
            raise ValueError(f"empty type bucket: {names[t]}")
        per_type[names[t]] = float(np.mean(pred[sel] == data.labels[sel]))
        counts[names[t]] = int(sel.sum())
    a, h, zero = mean_per_type(per_type)
    overall = float(np.mean(pred == data.labels))
    return EvalReport(per_type, counts, overall, a, h, zero)


def eval_by_type(params: EncoderParams, plan: ChopPlan | None, data: Dataset) -> EvalReport:
    return report_from_predictions(predictions(params, plan, data.tokens), data)


def relative_diff(acc_new: float, acc_org: float) -> float:
    """``(acc_new - acc_org) / acc_org``; a zero baseline gives ``UNDEFINED``."""
    if acc_new < 0 or acc_org < 0:
        raise ValueError("accuracies must be non-negative")
    if acc_org == 0:
        return UNDEFINED
    return (acc_new - acc_org) / acc_org


def _map(fn, items, workers: int):
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))  # map keeps input order


@dataclass
class SweepResult:
    name: str
    baseline: EvalReport
    matrix: AblationMatrix  # T x L summary (or T x L for layer sweeps)
    per_head: np.ndarray | None = None  # T x L x H for head sweeps
    reports: list[EvalReport] = field(default_factory=list)

    @property
    def n_evaluations(self) -> int:
        return len(self.reports)

    def per_head_matrix(self) -> AblationMatrix:
        T, L, H = self.per_head.shape
        cols = [f"L{l}H{h}" for l in range(1, L + 1) for h in range(1, H + 1)]
        return AblationMatrix(self.matrix.rows, cols, self.per_head.reshape(T, L * H),
                              dict(self.matrix.meta, granularity="head"))


def _rel_rows(reports: list[EvalReport], baseline: EvalReport) -> np.ndarray:
    """(n_plans, T) relative differences against one shared baseline."""
    names = list(baseline.per_type)
    return np.array([[relative_diff(r.per_type[n], baseline.per_type[n]) for n in names]
                     for r in reports])


def _plan_sweep(params, data, plans, workers):
    baseline = eval_by_type(params, None, data)
    reports = _map(lambda p: eval_by_type(params, p, data), plans, workers)
    return baseline, reports


def _layer_sweep(name, params, data, plans, workers, meta):
    baseline, reports = _plan_sweep(params, data, plans, workers)
    vals = _rel_rows(reports, baseline).T  # T x L
    cols = [f"L{l}" for l in range(1, len(plans) + 1)]
    m = AblationMatrix(list(baseline.per_type), cols, vals, dict(meta or {}, family=name))
    return SweepResult(name, baseline, m, None, reports)


def remove_one_layer_sweep(params: EncoderParams, data: Dataset, workers: int = 1,
                           meta: dict | None = None) -> SweepResult:
    c = params.config
    plans = [ChopPlan.skipping(c.n_layers, c.n_heads, {l}) for l in range(1, c.n_layers + 1)]
    return _layer_sweep("layer-remove", params, data, plans, workers, meta)


def keep_one_layer_sweep(params: EncoderParams, data: Dataset, workers: int = 1,
                         meta: dict | None = None) -> SweepResult:
    c = params.config
    every = set(range(1, c.n_layers + 1))
    plans = [ChopPlan.skipping(c.n_layers, c.n_heads, every - {l}) for l in range(1, c.n_layers + 1)]
    return _layer_sweep("layer-keep", params, data, plans, workers, meta)


def _head_sweep(name, params, data, make_plan, reduce, workers, meta):
    c = params.config
    L, H = c.n_layers, c.n_heads
    plans = [make_plan(L, H, l, h) for l in range(1, L + 1) for h in range(1, H + 1)]
    baseline, reports = _plan_sweep(params, data, plans, workers)
    per_head = _rel_rows(reports, baseline).reshape(L, H, -1).transpose(2, 0, 1)  # T x L x H
    summary = np.array([[reduce(per_head[t, l]) for l in range(L)] for t in range(per_head.shape[0])])
    m = AblationMatrix(list(baseline.per_type), [f"L{l}" for l in range(1, L + 1)], summary,
                       dict(meta or {}, family=name))
    return SweepResult(name, baseline, m, per_head, reports)


def _signed_max_abs(row: np.ndarray) -> float:
    ok = row[~np.isnan(row)]
    if not ok.size:
        return UNDEFINED
    return float(ok[np.argmax(np.abs(ok))])


def _max_defined(row: np.ndarray) -> float:
    ok = row[~np.isnan(row)]
    return float(ok.max()) if ok.size else UNDEFINED


def remove_one_head_sweep(params: EncoderParams, data: Dataset, workers: int = 1,
                          meta: dict | None = None) -> SweepResult:
    """Mask one head at a time. Summary keeps, per layer, the head entry of largest magnitude."""
    return _head_sweep("head-remove", params, data, ChopPlan.without_head, _signed_max_abs,
                       workers, meta)


def keep_one_head_sweep(params: EncoderParams, data: Dataset, workers: int = 1,
                        meta: dict | None = None) -> SweepResult:
    """Keep one head per layer at a time. Summary keeps the largest entry per layer."""
    return _head_sweep("head-keep", params, data, ChopPlan.only_head, _max_defined, workers, meta)


# threshold sweep ------------------------------------------------------------

DEFAULT_THRESHOLDS = (0.0, 0.05, 0.1, 0.3, 0.5, 0.7)


@dataclass
class ThresholdRow:
    theta: float
    report: EvalReport
    kept_fraction: float
    stack_kept_fraction: float
    skip_histogram: dict[int, int]
    all_chopped: int
    random_report: EvalReport

    def to_dict(self) -> dict:
        return {"theta": self.theta, "report": self.report.to_dict(),
                "kept_fraction": self.kept_fraction,
                "stack_kept_fraction": self.stack_kept_fraction,
                "skip_histogram": self.skip_histogram, "all_chopped": self.all_chopped,
                "random_matched": self.random_report.to_dict()}


@dataclass
class ThresholdSweep:
    rows: list[ThresholdRow]
    full: EvalReport
    random_half: EvalReport
    random_half_kept_fraction: float

    def table(self) -> AblationMatrix:
        """Type x threshold accuracy table, with full, random-50% and kept-fraction rows."""
        names = list(self.full.per_type)
        cols = [f"theta>{r.theta:g}" for r in self.rows] + ["random50", "full"]
        vals = [[r.report.per_type[n] for r in self.rows]
                + [self.random_half.per_type[n], self.full.per_type[n]] for n in names]
        extra = {
            "overall": [r.report.overall for r in self.rows] + [self.random_half.overall, self.full.overall],
            "A-MPT": [r.report.a_mpt for r in self.rows] + [self.random_half.a_mpt, self.full.a_mpt],
            "H-MPT": [r.report.h_mpt for r in self.rows] + [self.random_half.h_mpt, self.full.h_mpt],
            "kept_fraction": [r.kept_fraction for r in self.rows] + [self.random_half_kept_fraction, 1.0],
        }
        return AblationMatrix(names + list(extra), cols, np.array(vals + list(extra.values())),
                              {"family": "threshold"})


def _instance_kept(params: EncoderParams, skip_counts: np.ndarray) -> tuple[float, float]:
    c = params.config
    pc = count_parameters(c)
    per_layer = pc["per_layer"][0]["total"]
    kept = pc["total"] - per_layer * skip_counts
    stack = pc["stack_total"] - per_layer * skip_counts
    return float(np.mean(kept / pc["total"])), float(np.mean(stack / pc["stack_total"]))


def random_skips(n_layers: int, counts, rng: np.random.Generator) -> list[frozenset[int]]:
    """Uniformly random layer sets with the given sizes, one per instance."""
    return [frozenset(int(x) + 1 for x in rng.choice(n_layers, size=int(k), replace=False))
            for k in counts]


def threshold_sweep(params: EncoderParams, gate: GateParams, data: Dataset,
                    thresholds=DEFAULT_THRESHOLDS, seed: int = 0, batch: int = 512) -> ThresholdSweep:
    """Gate-chopped evaluation per threshold.

    Each row carries a random-chop baseline that skips, per instance, as many
    uniformly chosen layers as the gate did, so the kept fraction matches.
    """
    c = params.config
    full = eval_by_type(params, None, data)
    rows = []
    for theta in thresholds:
        logits, counts, chopped = [], [], 0
        for i in range(0, len(data), batch):
            out = gated_forward(data.tokens[i:i + batch], params, gate, theta, warn=False)
            logits.append(out.logits)
            counts.append(out.skip_counts)
            chopped += int(out.all_chopped.sum())
        if chopped:
            log.warning("theta %g: %d of %d instance(s) had every layer chopped", theta, chopped, len(data))
        counts = np.concatenate(counts)
        report = report_from_predictions(predict(np.concatenate(logits)), data)
        rng = rng_for(seed, f"threshold/random/{theta!r}")
        rand_pred = predict(run_instance_plans(data.tokens, params, random_skips(c.n_layers, counts, rng)))
        kept, stack = _instance_kept(params, counts)
        hist = {int(k): int(v) for k, v in zip(*np.unique(counts, return_counts=True))}
        rows.append(ThresholdRow(float(theta), report, kept, stack, hist, chopped,
                                 report_from_predictions(rand_pred, data)))
    half = np.full(len(data), c.n_layers // 2)
    rng = rng_for(seed, "threshold/random50")
    rand_pred = predict(run_instance_plans(data.tokens, params, random_skips(c.n_layers, half, rng)))
    return ThresholdSweep(rows, full, report_from_predictions(rand_pred, data),
                          _instance_kept(params, half)[0])


# echelon statistic ----------------------------------------------------------

@dataclass
class Echelon:
    centroids: list[float]
    rho: float


def echelon_statistic(matrix: AblationMatrix, type_depths) -> Echelon:
    """Importance centroid per row and Spearman rank correlation with depth.

    Importance of layer ``l`` is ``max(0, -value)``; the centroid is the
    importance-weighted mean 1-based layer index. Rows with no importance
    get an ``UNDEFINED`` centroid.
    """
    depths = list(type_depths)
    if len(depths) != matrix.shape[0]:
        raise ValueError("one depth per matrix row required")
    layers = np.arange(1, matrix.shape[1] + 1, dtype=np.float64)
    centroids = []
    for row in matrix.values:
        w = np.maximum(0.0, -np.nan_to_num(row, nan=0.0))
        centroids.append(float((layers * w).sum() / w.sum()) if w.sum() > 0 else UNDEFINED)
    ok = [i for i, c in enumerate(centroids) if not math.isnan(c)]
    if len(ok) < 2:
        raise ValueError("fewer than two types have a defined importance centroid")
    d = np.array([depths[i] for i in ok], dtype=np.float64)
    cen = np.array([centroids[i] for i in ok])
    if np.all(d == d[0]) or np.all(cen == cen[0]):
        rho = UNDEFINED
    else:
        rho = float(spearmanr(d, cen).statistic)
    return Echelon(centroids, rho)


# attention dump -------------------------------------------------------------

def dump_attention(params: EncoderParams, plan: ChopPlan | None, tokens, path,
                   heads: str = "mean") -> Path:
    """Write one instance's attention maps as CSV.

    Columns: ``layer, head, query, status, k0..k{T-1}``. ``head`` is ``mean``
    for the head average, or the 1-based head index when ``heads="all"``.
    A skipped layer is a single ``skipped`` row with empty weight cells.
    """
    if heads not in ("mean", "all"):
        raise ValueError("heads must be 'mean' or 'all'")
    tokens = np.asarray(tokens)
    if tokens.ndim == 2:
        if tokens.shape[0] != 1:
            raise ValueError("dump_attention takes a single instance")
        tokens = tokens[0]
    trace = encoder_forward(tokens[None, :], params, plan)
    T = len(tokens)
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "head", "query", "status"] + [f"k{j}" for j in range(T)])
        for l, attn in enumerate(trace.attentions, start=1):
            if attn is None:
                w.writerow([l, "mean", "", "skipped"] + [""] * T)
                continue
            a = attn[0]  # (H, T, T)
            blocks = [("mean", a.mean(axis=0))]
            if heads == "all":
                blocks += [(str(h + 1), a[h]) for h in range(a.shape[0])]
            for head, mat in blocks:
                for qi in range(T):
                    w.writerow([l, head, qi, "kept"] + [repr(float(x)) for x in mat[qi]])
    return path


def read_attention_dump(path) -> dict:
    """Parse a dump back into ``{(layer, head): matrix or None}``."""
    out: dict = {}
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        next(r)
        for row in r:
            key = (int(row[0]), row[1])
            if row[3] == "skipped":
                out[key] = None
                continue
            out.setdefault(key, []).append([float(x) for x in row[4:]])
    return {k: (None if v is None else np.array(v)) for k, v in out.items()}
