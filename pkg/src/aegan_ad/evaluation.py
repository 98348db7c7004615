"""AUC / pAUC per section and domain, and their harmonic means."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

log = logging.getLogger(__name__)

DEFAULT_P = 0.1


class MetricError(ValueError):
    pass


def _split(scores, labels):
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape:
        raise MetricError("scores and labels differ in length")
    if y.all() or not y.any():
        raise MetricError("AUC is undefined without both positive and negative labels")
    return s, y


def auc(scores, labels) -> float:
    """Mann-Whitney AUC; ties earn half credit."""
    s, y = _split(scores, labels)
    ranks = rankdata(s)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def roc_vertices(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    """Exact ROC vertices, with tied scores grouped into a single step."""
    s, y = _split(scores, labels)
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]
    tps = np.cumsum(y)[last]
    fps = np.cumsum(~y)[last]
    fpr = np.r_[0.0, fps / fps[-1]]
    tpr = np.r_[0.0, tps / tps[-1]]
    return fpr, tpr


def pauc(scores, labels, p: float = DEFAULT_P) -> float:
    """Area under the ROC for FPR in [0, p], divided by p."""
    if not 0 < p <= 1:
        raise MetricError("p must lie in (0, 1]")
    fpr, tpr = roc_vertices(scores, labels)
    stop = np.searchsorted(fpr, p, side="right")
    xs, ys = fpr[:stop], tpr[:stop]
    if xs[-1] < p:
        # fpr[stop] > p exists since fpr ends at 1 >= p
        x0, x1, y0, y1 = fpr[stop - 1], fpr[stop], tpr[stop - 1], tpr[stop]
        xs = np.r_[xs, p]
        ys = np.r_[ys, y0 + (y1 - y0) * (p - x0) / (x1 - x0)]
    return float(np.trapezoid(ys, xs) / p)


def hmean(values) -> float:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise MetricError("harmonic mean of nothing")
    if np.any(v <= 0):
        raise MetricError("harmonic mean needs positive inputs")
    return float(len(v) / np.sum(1.0 / v))


def _is_anomaly(rows):
    return np.array([r["label"] == "anomaly" for r in rows])


def domain_auc(rows, section: int, domain: str) -> float:
    """AUC with every anomaly of the section as positives and the domain's normals as negatives."""
    sec = [r for r in rows if r["section"] == section and r["label"] in ("normal", "anomaly")]
    keep = [r for r in sec if r["label"] == "anomaly" or r["domain"] == domain]
    if not any(r["label"] == "normal" and r["domain"] == domain for r in keep):
        raise MetricError(f"section {section} has no normal clips in domain {domain!r}")
    return auc([r["score"] for r in keep], _is_anomaly(keep))


def section_pauc(rows, section: int, p: float = DEFAULT_P) -> float:
    sec = [r for r in rows if r["section"] == section and r["label"] in ("normal", "anomaly")]
    return pauc([r["score"] for r in sec], _is_anomaly(sec), p)


@dataclass
class MachineResult:
    machine: str
    score_name: str
    auc: dict = field(default_factory=dict)  # (section, domain) -> value
    pauc: dict = field(default_factory=dict)  # section -> value
    hmean: float = 0.0
    flagged: bool = False

    def values(self):
        return list(self.auc.values()) + list(self.pauc.values())


def evaluate_machine(rows, machine: str = "", score_name: str = "", p: float = DEFAULT_P) -> MachineResult:
    """``rows`` are the labeled score rows of one machine type under one score name."""
    res = MachineResult(machine, score_name)
    for section in sorted({r["section"] for r in rows}):
        domains = sorted({r["domain"] for r in rows if r["section"] == section and r["label"] == "normal"})
        for dom in domains:
            res.auc[(section, dom)] = domain_auc(rows, section, dom)
        res.pauc[section] = section_pauc(rows, section, p)
    try:
        res.hmean = hmean(res.values())
    except MetricError:
        res.hmean, res.flagged = 0.0, True
    return res


def machine_metric(rows, p: float = DEFAULT_P) -> float:
    return evaluate_machine(rows, p=p).hmean


@dataclass
class EvalReport:
    machines: list[MachineResult]
    overall: float
    flagged: bool = False
    p: float = DEFAULT_P

    def rows(self) -> list[dict]:
        out = []
        for m in self.machines:
            for (sec, dom), v in m.auc.items():
                out.append({"machine": m.machine, "score_name": m.score_name, "section": sec,
                            "domain": dom, "metric": "auc", "value": v})
            for sec, v in m.pauc.items():
                out.append({"machine": m.machine, "score_name": m.score_name, "section": sec,
                            "domain": "all", "metric": "pauc", "value": v})
            out.append({"machine": m.machine, "score_name": m.score_name, "section": "", "domain": "",
                        "metric": "hmean", "value": m.hmean})
        out.append({"machine": "all", "score_name": "", "section": "", "domain": "",
                    "metric": "hmean", "value": self.overall})
        return out

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["machine", "score_name", "section", "domain", "metric", "value"])
            w.writeheader()
            for r in self.rows():
                w.writerow({**r, "value": repr(r["value"])})
        return path

    def to_json(self) -> dict:
        return {
            "overall_hmean": self.overall,
            "flagged": self.flagged,
            "p": self.p,
            "machines": {
                m.machine: {
                    "score_name": m.score_name,
                    "hmean": m.hmean,
                    "auc": {f"section_{s:02d}_{d}": v for (s, d), v in m.auc.items()},
                    "pauc": {f"section_{s:02d}": v for s, v in m.pauc.items()},
                    "flagged": m.flagged,
                }
                for m in self.machines
            },
        }

    def table(self) -> str:
        """Percentages laid out one machine per row, hmean last."""
        lines = [f"{'Machine Type':<14}{'score':<16}{'AUC(src)':>10}{'AUC(tgt)':>10}{'pAUC':>8}{'hmean':>8}"]
        for m in self.machines:
            src = [v for (_, d), v in m.auc.items() if d == "source"]
            tgt = [v for (_, d), v in m.auc.items() if d == "target"]
            pa = list(m.pauc.values())
            fmt = lambda xs: f"{100 * np.mean(xs):.2f}" if xs else "-"
            lines.append(f"{m.machine:<14}{m.score_name:<16}{fmt(src):>10}{fmt(tgt):>10}{fmt(pa):>8}"
                         f"{100 * m.hmean:>8.2f}")
        lines.append(f"{'hmean':<14}{'':<16}{'':>10}{'':>10}{'':>8}{100 * self.overall:>8.2f}")
        return "\n".join(lines)


def evaluate(table, selected: dict | None = None, p: float = DEFAULT_P) -> EvalReport:
    """Evaluate each machine under its selected score (or the table's own selection).

    Machines without a selection are evaluated under every score name and the
    best one is reported.
    """
    selected = dict(selected if selected is not None else getattr(table, "selected", {}) or {})
    rows_all = [r for r in table.rows if r["label"] in ("normal", "anomaly")]
    if not rows_all:
        raise MetricError("no labeled rows to evaluate")
    results = []
    for machine in sorted({r["machine"] for r in rows_all}):
        mrows = [r for r in rows_all if r["machine"] == machine]
        names = [selected[machine]] if machine in selected else sorted({r["score_name"] for r in mrows})
        best = None
        for name in names:
            res = evaluate_machine([r for r in mrows if r["score_name"] == name], machine, name, p)
            if best is None or res.hmean > best.hmean:
                best = res
        results.append(best)
    flagged = any(m.flagged for m in results)
    try:
        overall = hmean([m.hmean for m in results])
    except MetricError:
        overall, flagged = 0.0, True
    return EvalReport(results, overall, flagged, p)


def write_json(report: EvalReport, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(report.to_json(), indent=1, sort_keys=True))
    return path
