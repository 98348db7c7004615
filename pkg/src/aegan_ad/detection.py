"""Anomaly scores from the generator (reconstruction) and the critic (embedding outliers).

Every score is oriented so that larger means more anomalous.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import stats
from scipy.spatial.distance import cdist

from .model import ConfigurationError

log = logging.getLogger(__name__)

GENERATOR_SCORES = tuple(f"gen_{space}_{metric}" for space in ("sample", "latent") for metric in ("l2", "l1", "cos"))
EMBEDDING_SCORES = tuple(f"emb_{det}_{metric}" for det in ("knn", "lof", "mean") for metric in ("cos", "maha"))
SCORE_NAMES = GENERATOR_SCORES + EMBEDDING_SCORES
LOF_EPS = 1e-10


@dataclass(frozen=True)
class DetectionConfig:
    k: int = 2
    n_lof: int = 20
    aggregation: str = "mean"
    shrinkage: float = 1e-3
    threshold_quantile: float = 0.9

    def __post_init__(self):
        if self.aggregation not in ("mean", "max"):
            raise ConfigurationError("aggregation must be 'mean' or 'max'")
        if self.k < 1 or self.n_lof < 1:
            raise ConfigurationError("k and n_lof must be positive")


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------

def cosine_distance(a, b) -> np.ndarray:
    """Row-wise ``1 - cos(a_i, b_i)`` over flattened rows; identical rows give 0."""
    a = np.asarray(a, dtype=np.float64).reshape(len(a), -1)
    b = np.asarray(b, dtype=np.float64).reshape(len(b), -1)
    na, nb = np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1)
    denom = na * nb
    sim = np.divide(np.einsum("ij,ij->i", a, b), denom, out=np.zeros(len(a)), where=denom > 0)
    dist = np.clip(1.0 - sim, 0.0, 2.0)
    dist[np.all(a == b, axis=1)] = 0.0
    return dist


def mahalanobis(x, y, cov_inv) -> np.ndarray:
    d = np.atleast_2d(np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64))
    return np.sqrt(np.maximum(np.einsum("ij,jk,ik->i", d, cov_inv, d), 0.0))


# --------------------------------------------------------------------------
# generator perspective
# --------------------------------------------------------------------------

@torch.no_grad()
def _run_generator(g, segments, chunk=64):
    g.eval()
    recon, z_s, z_r = [], [], []
    for i in range(0, len(segments), chunk):
        x = torch.as_tensor(np.asarray(segments[i : i + chunk], dtype=np.float32))
        zs = g.encode(x)
        r = g.decode(zs)
        recon.append(r.reshape(x.shape).numpy())
        z_s.append(zs.numpy())
        z_r.append(g.encode(r).numpy())
    return np.concatenate(recon), np.concatenate(z_s), np.concatenate(z_r)


def residual_scores(a, b, prefix: str) -> dict[str, np.ndarray]:
    a = np.asarray(a, dtype=np.float64).reshape(len(a), -1)
    b = np.asarray(b, dtype=np.float64).reshape(len(b), -1)
    diff = a - b
    return {
        f"{prefix}_l2": np.linalg.norm(diff, axis=1),
        f"{prefix}_l1": np.abs(diff).sum(axis=1),
        f"{prefix}_cos": cosine_distance(a, b),
    }


def generator_scores(g, segments) -> dict[str, np.ndarray]:
    segments = np.asarray(segments)
    if segments.ndim != 3 or segments.shape[1:] != (128, 128):
        raise ValueError(f"expected (N, 128, 128) segments, got {segments.shape}")
    recon, z_s, z_r = _run_generator(g, segments)
    return {**residual_scores(segments, recon, "gen_sample"), **residual_scores(z_s, z_r, "gen_latent")}


# --------------------------------------------------------------------------
# critic-embedding perspective
# --------------------------------------------------------------------------

@torch.no_grad()
def critic_embeddings(d, segments, chunk=64) -> np.ndarray:
    d.eval()
    out = [d.embed(torch.as_tensor(np.asarray(segments[i : i + chunk], dtype=np.float32))).numpy()
           for i in range(0, len(segments), chunk)]
    return np.concatenate(out).astype(np.float64)


def shrunk_covariance(emb: np.ndarray, shrinkage: float) -> np.ndarray:
    cov = np.atleast_2d(np.cov(emb, rowvar=False))
    dim = cov.shape[0]
    return cov + shrinkage * np.trace(cov) / dim * np.eye(dim) if np.trace(cov) > 0 else cov + shrinkage * np.eye(dim)


@dataclass
class ReferenceSet:
    embeddings: np.ndarray
    mean: np.ndarray
    cov: np.ndarray
    cov_inv: np.ndarray
    cfg: DetectionConfig
    whiten: np.ndarray = field(repr=False, default=None)
    # per metric: k-distance and local reachability density of each reference point
    lof_state: dict = field(repr=False, default_factory=dict)

    def transform(self, emb, metric):
        return emb @ self.whiten if metric == "maha" else emb

    def distances(self, q, metric):
        q = np.atleast_2d(np.asarray(q, dtype=np.float64))
        if metric == "cos":
            return cdist(q, self.embeddings, "cosine")
        return cdist(self.transform(q, "maha"), self._white_ref, "euclidean")

    def __post_init__(self):
        if self.whiten is None:
            self.whiten = np.linalg.cholesky(self.cov_inv)
        self._white_ref = self.embeddings @ self.whiten


def reference_from_embeddings(emb, cfg: DetectionConfig | None = None, cov=None) -> ReferenceSet:
    """``cov`` overrides the shrunk sample covariance (identity turns Mahalanobis into Euclidean)."""
    cfg = cfg or DetectionConfig()
    emb = np.asarray(emb, dtype=np.float64)
    if emb.ndim != 2 or len(emb) < 2:
        raise ValueError("a reference set needs at least 2 embeddings")
    cov = shrunk_covariance(emb, cfg.shrinkage) if cov is None else np.asarray(cov, dtype=np.float64)
    cov_inv = np.linalg.inv(cov)
    cov_inv = (cov_inv + cov_inv.T) / 2
    ref = ReferenceSet(emb, emb.mean(axis=0), cov, cov_inv, cfg)
    if cfg.n_lof < len(emb):
        for metric in ("cos", "maha"):
            dist = ref.distances(emb, metric)
            np.fill_diagonal(dist, np.inf)
            nn_idx, nn_dist = _k_nearest(dist, cfg.n_lof)
            kdist = nn_dist[:, -1]
            reach = np.maximum(nn_dist, kdist[nn_idx])
            ref.lof_state[metric] = (kdist, 1.0 / (reach.mean(axis=1) + LOF_EPS))
    return ref


def build_reference(ckpt, training_segments, cfg: DetectionConfig | None = None) -> ReferenceSet:
    return reference_from_embeddings(critic_embeddings(ckpt.critic, training_segments), cfg)


def _k_nearest(dist: np.ndarray, k: int):
    idx = np.argsort(dist, axis=1, kind="stable")[:, :k]
    return idx, np.take_along_axis(dist, idx, axis=1)


def knn_score(ref: ReferenceSet, q, metric: str, k: int, exclude_self=False) -> np.ndarray:
    dist = ref.distances(q, metric)
    if exclude_self:
        np.fill_diagonal(dist, np.inf)
    if k > dist.shape[1] - int(exclude_self):
        raise ConfigurationError(f"k={k} exceeds the reference size")
    return _k_nearest(dist, k)[1].mean(axis=1)


def lof_score(ref: ReferenceSet, q, metric: str, exclude_self=False) -> np.ndarray:
    if metric not in ref.lof_state:
        raise ConfigurationError(f"n_lof={ref.cfg.n_lof} must be smaller than the reference size {len(ref.embeddings)}")
    kdist, lrd_ref = ref.lof_state[metric]
    dist = ref.distances(q, metric)
    if exclude_self:
        np.fill_diagonal(dist, np.inf)
    idx, nn_dist = _k_nearest(dist, ref.cfg.n_lof)
    reach = np.maximum(nn_dist, kdist[idx])
    lrd_q = 1.0 / (reach.mean(axis=1) + LOF_EPS)
    return np.maximum(lrd_ref[idx].mean(axis=1) / lrd_q, 0.0)


def dist_to_mean(ref: ReferenceSet, q, metric: str) -> np.ndarray:
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    if metric == "cos":
        return cosine_distance(q, np.broadcast_to(ref.mean, q.shape))
    return mahalanobis(q, ref.mean, ref.cov_inv)


def embedding_scores_from(ref: ReferenceSet, emb, exclude_self=False) -> dict[str, np.ndarray]:
    out = {}
    for metric in ("cos", "maha"):
        out[f"emb_knn_{metric}"] = knn_score(ref, emb, metric, ref.cfg.k, exclude_self)
        out[f"emb_lof_{metric}"] = lof_score(ref, emb, metric, exclude_self)
        out[f"emb_mean_{metric}"] = dist_to_mean(ref, emb, metric)
    return out


def embedding_scores(ckpt, ref: ReferenceSet, segments, exclude_self=False) -> dict[str, np.ndarray]:
    return embedding_scores_from(ref, critic_embeddings(ckpt.critic, segments), exclude_self)


def segment_scores(ckpt, ref, segments, exclude_self=False) -> dict[str, np.ndarray]:
    """All 12 variants for every segment, computed in one pass."""
    scores = {**generator_scores(ckpt.generator, segments),
              **embedding_scores(ckpt, ref, segments, exclude_self)}
    return {name: scores[name] for name in SCORE_NAMES}


# --------------------------------------------------------------------------
# clip aggregation
# --------------------------------------------------------------------------

def aggregate(segment_scores, mode: str = "mean") -> float:
    s = np.asarray(segment_scores, dtype=np.float64)
    if s.size == 0:
        raise ValueError("cannot aggregate an empty score list")
    if mode == "mean":
        return float(s.mean())
    if mode == "max":
        return float(s.max())
    raise ConfigurationError(f"unknown aggregation mode {mode!r}")


def clip_scores(seg_scores: dict, clip_index, n_clips: int, mode: str = "mean") -> dict[str, np.ndarray]:
    clip_index = np.asarray(clip_index)
    return {name: np.array([aggregate(v[clip_index == i], mode) for i in range(n_clips)])
            for name, v in seg_scores.items()}


# --------------------------------------------------------------------------
# score table
# --------------------------------------------------------------------------

TABLE_COLUMNS = ("clip_id", "machine", "section", "domain", "label", "score_name", "score")


@dataclass
class ScoreTable:
    rows: list[dict] = field(default_factory=list)
    selected: dict[str, str] = field(default_factory=dict)
    thresholds: dict[str, dict] = field(default_factory=dict)
    config_hash: str = ""

    def add_clips(self, records, scores: dict[str, np.ndarray]) -> None:
        for i, rec in enumerate(records):
            for name in SCORE_NAMES:
                self.rows.append({
                    "clip_id": rec.clip_id, "machine": rec.machine_type, "section": rec.section,
                    "domain": rec.domain, "label": rec.label, "score_name": name,
                    "score": float(scores[name][i]),
                })

    def machines(self) -> list[str]:
        return sorted({r["machine"] for r in self.rows})

    def filter(self, **kw) -> list[dict]:
        return [r for r in self.rows if all(r[k] == v for k, v in kw.items())]

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TABLE_COLUMNS)
            for r in self.rows:
                w.writerow([r["clip_id"], r["machine"], r["section"], r["domain"], r["label"],
                            r["score_name"], repr(r["score"])])
        return path

    @classmethod
    def read_csv(cls, path) -> "ScoreTable":
        with open(path, newline="") as fh:
            rows = [
                {**r, "section": int(r["section"]), "score": float(r["score"])}
                for r in csv.DictReader(fh)
            ]
        return cls(rows)


def select_best_score(table: ScoreTable, metric_fn=None) -> dict[str, str]:
    """Per machine type, the score name with the highest harmonic-mean metric.

    Ties resolve to the lexicographically first name.
    """
    from .evaluation import machine_metric

    metric_fn = metric_fn or machine_metric
    selected = {}
    for machine in table.machines():
        rows = [r for r in table.filter(machine=machine) if r["label"] in ("normal", "anomaly")]
        if not rows:
            raise ValueError(f"no labeled clips for machine {machine!r}")
        best = None
        for name in sorted({r["score_name"] for r in rows}):
            value = metric_fn([r for r in rows if r["score_name"] == name])
            if best is None or value > best[1]:
                best = (name, value)
        selected[machine] = best[0]
        log.info("machine %s: selected %s (hmean %.4f)", machine, *best)
    table.selected = selected
    return selected


# --------------------------------------------------------------------------
# decision threshold
# --------------------------------------------------------------------------

@dataclass
class ThresholdFit:
    threshold: float
    shape: float | None = None
    loc: float | None = None
    scale: float | None = None
    fallback: bool = False

    def to_dict(self):
        return asdict(self)


def fit_threshold(scores, quantile: float = 0.9, eps: float = 1e-6) -> ThresholdFit:
    """Gamma maximum-likelihood fit to normal training scores; threshold at ``quantile``."""
    s = np.asarray(scores, dtype=np.float64)
    if len(s) < 10:
        raise ValueError(f"need at least 10 scores to fit a threshold, got {len(s)}")
    if not np.all(np.isfinite(s)):
        raise ValueError("threshold scores must be finite")
    if np.ptp(s) == 0:
        log.warning("constant training scores; threshold falls back to value + eps")
        return ThresholdFit(float(s[0]) + eps, fallback=True)
    shape, loc, scale = stats.gamma.fit(s)
    thr = stats.gamma.ppf(quantile, shape, loc=loc, scale=scale)
    if not np.isfinite(thr):
        log.warning("gamma fit failed; using the empirical quantile")
        return ThresholdFit(float(np.quantile(s, quantile)), fallback=True)
    return ThresholdFit(float(thr), float(shape), float(loc), float(scale))


def classify(score, threshold) -> np.ndarray:
    """1 = anomalous (score strictly above threshold), 0 = normal."""
    return (np.asarray(score) > threshold).astype(int)


def write_selection(path, selected: dict, thresholds: dict, config_hash: str = "") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"config_hash": config_hash, "selected": selected, "thresholds": thresholds},
                               indent=1, sort_keys=True))
    return path
