"""Full-ranking Recall@K / NDCG@K, sparsity buckets and intent-score exports."""
from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .graphdata import InteractionDataset

log = logging.getLogger(__name__)


def rank_items(scores: np.ndarray, exclude, k: int) -> np.ndarray:
    """Top-k item ids by descending score, excluded ids removed, ties by ascending id."""
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    scores = np.asarray(scores, dtype=np.float64)
    ids = np.arange(len(scores))
    keep = np.ones(len(scores), dtype=bool)
    keep[np.asarray(exclude, dtype=np.int64)] = False
    ids, s = ids[keep], scores[keep]
    order = np.lexsort((ids, -s))
    return ids[order[:k]]


def topk_matrix(scores: np.ndarray, k: int) -> np.ndarray:
    """Row-wise top-k column ids of a score matrix, -inf entries dropped (padded with -1).

    Ties are broken by ascending column id.
    """
    n, m = scores.shape
    kk = min(k, m)
    part = np.argpartition(-scores, kk - 1, axis=1)[:, :kk]
    vals = np.take_along_axis(scores, part, axis=1)
    order = np.lexsort((part, -vals), axis=1)
    out = np.take_along_axis(part, order, axis=1)
    kth = vals.min(axis=1)
    tied = np.flatnonzero((scores >= kth[:, None]).sum(axis=1) > kk)
    for r in tied:
        out[r] = np.lexsort((np.arange(m), -scores[r]))[:kk]
    sorted_vals = np.take_along_axis(scores, out, axis=1)
    out[np.isneginf(sorted_vals)] = -1
    if kk < k:
        out = np.hstack([out, np.full((n, k - kk), -1, dtype=out.dtype)])
    return out


def recall_ndcg(topk, test_items, k: int) -> tuple[float, float]:
    test_items = np.asarray(test_items)
    if not len(test_items):
        raise DataError("recall_ndcg needs a nonempty test set")
    top = np.asarray(topk)[:k]
    hits = np.isin(top, test_items) & (top >= 0)
    recall = hits.sum() / len(test_items)
    disc = 1.0 / np.log2(np.arange(2, k + 2))
    dcg = float((hits * disc[:len(hits)]).sum())
    idcg = float(disc[:min(k, len(test_items))].sum())
    return float(recall), dcg / idcg


@dataclass
class MetricReport:
    recall: dict[int, float]
    ndcg: dict[int, float]
    num_users: int
    skipped: int = 0
    buckets: dict[str, "MetricReport | None"] = field(default_factory=dict)

    def row(self, ks=None) -> str:
        ks = sorted(ks or self.recall)
        cells = [f"{self.recall[k]:.4f}" for k in ks] + [f"{self.ndcg[k]:.4f}" for k in ks]
        return " ".join(cells)

    def table(self, label: str = "model") -> str:
        ks = sorted(self.recall)
        head = ["R@%d" % k for k in ks] + ["N@%d" % k for k in ks]
        lines = [f"{'':18s} " + " ".join(f"{h:>6s}" for h in head) + "  users",
                 f"{label:18s} " + " ".join(f"{c:>6s}" for c in self.row(ks).split())
                 + f"  {self.num_users}"]
        for name, rep in self.buckets.items():
            if rep is None:
                lines.append(f"{'  ' + name:18s} (absent)")
            else:
                lines.append(f"{'  ' + name:18s} " + " ".join(
                    f"{c:>6s}" for c in rep.row(ks).split()) + f"  {rep.num_users}")
        return "\n".join(lines)


def _user_metrics(user_emb, item_emb, users, ds, exclude, ks, chunk):
    kmax = max(ks)
    n = len(users)
    hits = np.zeros((n, kmax), dtype=bool)
    for lo in range(0, n, chunk):
        us = users[lo:lo + chunk]
        s = user_emb[us].astype(np.float64) @ item_emb.astype(np.float64).T
        if not np.all(np.isfinite(s)):
            raise DataError("non-finite scores in evaluation")
        for r, u in enumerate(us):
            s[r, exclude.train[u]] = -np.inf
        top = topk_matrix(s, kmax)
        for r, u in enumerate(us):
            hits[lo + r] = np.isin(top[r], ds.test[u]) & (top[r] >= 0)
    n_test = np.array([len(ds.test[u]) for u in users], dtype=np.float64)
    disc = 1.0 / np.log2(np.arange(2, kmax + 2))
    rec, ndcg = {}, {}
    for k in ks:
        h = hits[:, :k]
        rec[k] = h.sum(axis=1) / n_test
        idcg = np.cumsum(disc[:k])[np.minimum(n_test, k).astype(np.int64) - 1]
        ndcg[k] = (h * disc[:k]).sum(axis=1) / idcg
    return rec, ndcg


def evaluate(ds: InteractionDataset, user_emb: np.ndarray, item_emb: np.ndarray,
             ks=(20, 40), users=None, exclude: InteractionDataset | None = None,
             workers: int = 1, chunk: int = 1024) -> MetricReport:
    """Mean Recall@K / NDCG@K over users with a nonempty test list.

    Scores are inner products; ranking is identical to the sigmoid edge score.
    ``exclude`` supplies the train lists to mask (defaults to ``ds``).
    """
    if user_emb.shape[0] != ds.num_users or item_emb.shape[0] != ds.num_items:
        raise DataError("embeddings do not cover all users and items")
    ks = tuple(sorted(set(int(k) for k in ks)))
    exclude = exclude or ds
    cand = np.arange(ds.num_users) if users is None else np.asarray(users, dtype=np.int64)
    has_test = np.array([len(ds.test[u]) > 0 for u in cand], dtype=bool)
    skipped = int((~has_test).sum())
    cand = cand[has_test]
    if not len(cand):
        log.warning("no users with test interactions; metrics are zero")
        return MetricReport({k: 0.0 for k in ks}, {k: 0.0 for k in ks}, 0, skipped)
    if workers > 1 and len(cand) > chunk:
        parts = np.array_split(cand, workers)
        with ThreadPoolExecutor(workers) as pool:
            outs = list(pool.map(
                lambda us: _user_metrics(user_emb, item_emb, us, ds, exclude, ks, chunk), parts))
        rec = {k: np.concatenate([o[0][k] for o in outs]) for k in ks}
        nd = {k: np.concatenate([o[1][k] for o in outs]) for k in ks}
    else:
        rec, nd = _user_metrics(user_emb, item_emb, cand, ds, exclude, ks, chunk)
    return MetricReport({k: float(np.mean(rec[k])) for k in ks},
                        {k: float(np.mean(nd[k])) for k in ks}, len(cand), skipped)


def evaluate_by_bucket(ds: InteractionDataset, user_emb, item_emb, buckets: dict,
                       ks=(20, 40), exclude=None) -> dict[str, MetricReport | None]:
    out = {}
    for name, users in buckets.items():
        if len(users) == 0:
            out[name] = None
            continue
        out[name] = evaluate(ds, user_emb, item_emb, ks, users=users, exclude=exclude)
    return out


@dataclass
class IntentExport:
    users: np.ndarray
    scores: np.ndarray

    @property
    def mean(self) -> np.ndarray:
        return self.scores.mean(axis=1)

    @property
    def variance(self) -> np.ndarray:
        return self.scores.var(axis=1)

    def write_csv(self, path):
        k = self.scores.shape[1]
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["user", *[f"score_{j}" for j in range(k)], "mean", "variance"])
            for u, row, mu, var in zip(self.users, self.scores, self.mean, self.variance):
                w.writerow([int(u), *(repr(float(x)) for x in row), repr(float(mu)),
                            repr(float(var))])

    @classmethod
    def read_csv(cls, path) -> "IntentExport":
        with open(path, encoding="utf-8", newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0][0] != "user" or rows[0][-2:] != ["mean", "variance"]:
            raise DataError(f"{path}: not an intent-score export")
        body = rows[1:]
        users = np.array([int(r[0]) for r in body], dtype=np.int64)
        scores = np.array([[float(x) for x in r[1:-2]] for r in body], dtype=np.float64)
        return cls(users, scores.reshape(len(body), len(rows[0]) - 3))


def export_intent_scores(params, adj, num_users: int, cfg, users=None, sample: int | None = None,
                         rng: np.random.Generator | None = None) -> IntentExport:
    """Per-user softmax correlation scores against the collective user intents."""
    from . import diffcore as dc
    from .encoder import propagate
    from .intent import intent_scores

    if users is None:
        users = np.arange(num_users)
        if sample is not None and sample < num_users:
            rng = rng or np.random.default_rng(cfg.seed)
            users = np.sort(rng.choice(num_users, size=sample, replace=False))
    users = np.asarray(users, dtype=np.int64)
    bad = users[(users < 0) | (users >= num_users)]
    if len(bad):
        raise DataError(f"unknown user id(s): {bad[:5].tolist()}")
    tape = dc.Tape(dtype=np.float64, check_finite=False)
    layers = 0 if cfg.variant == "baseline_mf" else cfg.layers
    e_mu = propagate(adj, tape.const(params.E0), layers, cfg.include_layer0).e_mu
    scores = intent_scores(dc.take_rows(e_mu, users), tape.const(params.C_user), cfg.kappa)
    return IntentExport(users, scores.value)
