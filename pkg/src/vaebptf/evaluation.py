"""Held-out metrics, latent-factor coherence, cross-validation and ablation."""

from __future__ import annotations

import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .engine import ModelConfig, fit, posterior_mean_factors, predict_many
from .errors import DataError, NumericalError
from .rng import stream
from .tensor_store import check_same_shape

__all__ = [
    "MetricsReport",
    "CoherenceReport",
    "mae",
    "poisson_log_mass",
    "holdout_ll",
    "evaluate_means",
    "top_k_neighbors",
    "npmi",
    "load_incidence",
    "coherence_pmi",
    "fold_assignment",
    "cross_validate",
    "fit_and_score",
    "ablate_reweighting",
]


@dataclass
class MetricsReport:
    mae: float
    holdout_ll: float
    n_test: int
    folds: list = field(default_factory=list)


@dataclass
class CoherenceReport:
    neighbors: dict          # probe -> list of k entities (probe first)
    scores: dict             # probe -> average pairwise NPMI of its list
    average: float           # over probes above the document-frequency floor
    excluded: list           # probes dropped by the floor


def mae(predictions, truths):
    p = np.asarray(predictions, dtype=float).ravel()
    t = np.asarray(truths, dtype=float).ravel()
    if p.shape != t.shape:
        raise DataError(f"length mismatch: {p.size} predictions vs {t.size} truths")
    if p.size == 0:
        raise DataError("mae of an empty set")
    return float(np.mean(np.abs(p - t)))


def poisson_log_mass(y, lam):
    y = np.asarray(y, dtype=float)
    lam = np.asarray(lam, dtype=float)
    if np.any(~(lam > 0)):
        raise NumericalError("Poisson rate must be positive")
    return y * np.log(lam) - lam - special.gammaln(y + 1.0)


def holdout_ll(test, means):
    """Full Poisson log-mass of the test entries under posterior-mean factors."""
    return float(np.sum(poisson_log_mass(test.values, predict_many(means, test.coords))))


def evaluate_means(test, means, round_predictions=False):
    if test.nnz == 0:
        raise DataError("test tensor is empty")
    if tuple(z.shape[0] for z in means) != tuple(test.mode_sizes):
        raise DataError(
            f"dimension mismatch: model {tuple(z.shape[0] for z in means)} vs "
            f"tensor {tuple(test.mode_sizes)}"
        )
    lam = predict_many(means, test.coords)
    pred = np.rint(lam) if round_predictions else lam
    return MetricsReport(mae(pred, test.values), holdout_ll(test, means), test.nnz)


# ---------------------------------------------------------------- coherence

def top_k_neighbors(factors, probe, k=10):
    """The ``k`` entities closest to ``probe`` in Euclidean distance, probe first."""
    factors = np.asarray(factors, dtype=float)
    n = factors.shape[0]
    if not 0 <= probe < n:
        raise DataError(f"entity {probe} out of range")
    if k > n:
        raise DataError(f"k={k} exceeds the number of entities ({n})")
    dist = np.linalg.norm(factors - factors[probe], axis=1)
    dist[probe] = -1.0  # probe first even against exact duplicates
    order = np.lexsort((np.arange(n), dist))[:k]
    dist[probe] = 0.0
    return [int(i) for i in order], dist[order]


def npmi(n_a, n_b, n_ab, n_docs):
    """NPMI with one pseudo-document containing both terms (add-one smoothing).

    Lies in [-1, 1]; a pair present in every document scores 1.
    """
    p_ab = (n_ab + 1.0) / (n_docs + 1.0)
    p_a = (n_a + 1.0) / (n_docs + 1.0)
    p_b = (n_b + 1.0) / (n_docs + 1.0)
    if p_ab >= 1.0:
        return 1.0
    # rounding can push the ratio just past the bounds
    return float(np.clip(np.log(p_ab / (p_a * p_b)) / -np.log(p_ab), -1.0, 1.0))


def load_incidence(path):
    """Document-entity incidence: one line per document, tab-separated entity ids."""
    docs = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                docs.append(frozenset())
                continue
            try:
                docs.append(frozenset(int(tok) for tok in line.split("\t")))
            except ValueError:
                raise DataError(f"line {line_no}: non-integer entity id") from None
    return docs


class _Cooccurrence:
    def __init__(self, docs):
        if not docs:
            raise DataError("empty incidence source")
        self.n_docs = len(docs)
        self.doc_freq = {}
        self.postings = {}
        for d, doc in enumerate(docs):
            for e in doc:
                self.doc_freq[e] = self.doc_freq.get(e, 0) + 1
                self.postings.setdefault(e, set()).add(d)

    def df(self, e):
        return self.doc_freq.get(e, 0)

    def joint(self, a, b):
        pa, pb = self.postings.get(a, set()), self.postings.get(b, set())
        if len(pa) > len(pb):
            pa, pb = pb, pa
        return sum(1 for d in pa if d in pb)

    def score(self, entities):
        vals = [npmi(self.df(a), self.df(b), self.joint(a, b), self.n_docs)
                for a, b in itertools.combinations(entities, 2)]
        return float(np.mean(vals)) if vals else float("nan")


def coherence_pmi(neighbor_lists, docs, min_df=0.001):
    """Average pairwise NPMI per neighbor list and over probes with document frequency >= ``min_df``."""
    co = _Cooccurrence(docs)
    scores, kept, excluded = {}, [], []
    for probe, entities in neighbor_lists.items():
        scores[probe] = co.score(entities)
        if co.df(probe) / co.n_docs < min_df:
            excluded.append(probe)
        else:
            kept.append(scores[probe])
    avg = float(np.mean(kept)) if kept else float("nan")
    return CoherenceReport(dict(neighbor_lists), scores, avg, excluded)


# ---------------------------------------------------------------- model selection

def fold_assignment(n_entries, folds, seed):
    """Balanced random fold label per entry."""
    if n_entries < folds:
        raise DataError(f"fewer entries ({n_entries}) than folds ({folds})")
    rng = stream(seed, "folds")
    labels = np.arange(n_entries) % folds
    return rng.permutation(labels)


def fit_and_score(train, test, cfg, model="vae-bptf", gibbs_iters=400):
    """Fit on ``train`` and report metrics on ``test``; returns ``(metrics, trace)``."""
    if model == "vae-bptf":
        state, bank, report = fit(train, cfg)
        means = posterior_mean_factors(train, state, bank, cfg)
        trace = report.elbo_trace
    elif model == "gibbs-bptf":
        from .gibbs import gibbs_fit

        res = gibbs_fit(train, cfg.K, (cfg.prior_shape, cfg.prior_rate), gibbs_iters,
                        rng=stream(cfg.seed, "gibbs"))
        means, trace = res.means, res.log_prob_trace
    else:
        raise DataError(f"unknown model {model!r}")
    return evaluate_means(test, means), trace


def cross_validate(train, grid, folds=5, seed=0, base=None, threads=1, model="vae-bptf"):
    """Grid search by k-fold cross-validation over entries, minimizing mean validation MAE.

    ``grid`` is a list of dicts of config overrides. Returns
    ``(best_overrides, table)`` where ``table`` has one dict per cell with the
    per-fold MAEs and their mean.
    """
    if not grid:
        raise DataError("empty grid")
    base = base or ModelConfig()
    labels = fold_assignment(train.nnz, folds, seed)

    def run_cell(ci):
        cell = grid[ci]
        maes = []
        for f in range(folds):
            fit_part = train.take(np.flatnonzero(labels != f))
            val_part = train.take(np.flatnonzero(labels == f))
            cell_seed = int(stream(seed, "cv", ci, f).integers(2**31))
            cfg = base.replace(**cell, seed=cell_seed)
            metrics, _ = fit_and_score(fit_part, val_part, cfg, model)
            maes.append(metrics.mae)
        return {"cell": ci, "overrides": dict(cell), "fold_mae": maes,
                "mean_mae": float(np.mean(maes))}

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            table = list(pool.map(run_cell, range(len(grid))))
    else:
        table = [run_cell(ci) for ci in range(len(grid))]
    best = min(table, key=lambda row: (row["mean_mae"], row["cell"]))
    return dict(best["overrides"]), table


def ablate_reweighting(train, test, cfg):
    """Paired fits that differ only in reweighting; same seed, hence same initialization."""
    check_same_shape(train, test)
    with_rw, trace_rw = fit_and_score(train, test, cfg.replace(reweight=True))
    without, trace_plain = fit_and_score(train, test, cfg.replace(reweight=False))
    return {
        "reweighted": with_rw,
        "unweighted": without,
        "traces": {"reweighted": trace_rw, "unweighted": trace_plain},
        "delta_mae": with_rw.mae - without.mae,
        "delta_ll": with_rw.holdout_ll - without.holdout_ll,
    }
