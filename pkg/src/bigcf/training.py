"""Parameters, the per-batch objective, Adam, epochs and the fit loop."""
from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .config import TrainConfig
from .encoder import propagate
from .errors import ConfigError, NumericError
from .evaluation import MetricReport, evaluate
from .graphdata import (BatchSampler, InteractionDataset, TrainBatch,
                        build_normalized_adjacency, holdout_validation)
from .intent import individual_intents, intent_scores, reparameterize
from .losses import (LossReport, bpr_loss, gcr_intent, gcr_interaction, kl_loss, l2_penalty,
                     total_loss)

log = logging.getLogger(__name__)

PARAM_NAMES = ("E0", "C_user", "C_item")


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0


@dataclass
class ModelParams:
    E0: np.ndarray
    C_user: np.ndarray
    C_item: np.ndarray
    adam: AdamState | None = None

    def arrays(self) -> dict[str, np.ndarray]:
        return {"E0": self.E0, "C_user": self.C_user, "C_item": self.C_item}

    def copy(self) -> "ModelParams":
        return copy.deepcopy(self)


def xavier_uniform(rng: np.random.Generator, rows: int, cols: int, dtype) -> np.ndarray:
    bound = math.sqrt(6.0 / (rows + cols))
    return rng.uniform(-bound, bound, size=(rows, cols)).astype(dtype)


def init_params(cfg: TrainConfig, num_users: int, num_items: int,
                rng: np.random.Generator) -> ModelParams:
    if num_users < 1 or num_items < 1:
        raise ConfigError("need at least one user and one item")
    dtype = np.dtype(cfg.dtype)
    p = ModelParams(
        E0=xavier_uniform(rng, num_users + num_items, cfg.dim, dtype),
        C_user=xavier_uniform(rng, cfg.intents, cfg.dim, dtype),
        C_item=xavier_uniform(rng, cfg.intents, cfg.dim, dtype),
    )
    p.adam = AdamState({k: np.zeros_like(a) for k, a in p.arrays().items()},
                       {k: np.zeros_like(a) for k, a in p.arrays().items()})
    return p


def adam_step(params: ModelParams, grads: dict[str, np.ndarray], lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> ModelParams:
    """Bias-corrected Adam, in place. Refuses non-finite gradients."""
    bad = {k: int((~np.isfinite(g)).sum()) for k, g in grads.items() if not np.all(np.isfinite(g))}
    if bad:
        raise NumericError(f"non-finite gradient entries: {bad}; step skipped")
    st = params.adam
    st.t += 1
    c1 = 1.0 - beta1 ** st.t
    c2 = 1.0 - beta2 ** st.t
    for name, theta in params.arrays().items():
        g = grads.get(name)
        if g is None:
            continue
        m, v = st.m[name], st.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        theta -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params


@dataclass(frozen=True)
class LossWiring:
    """Which parts of the objective are active for a variant."""

    fusion: str  # "reparam": mu + sigma*eps, "mean": mu only, "average": (mu + sigma) / 2
    ir: bool
    hnr: bool
    bir: bool
    kl: bool
    layers: int

    @property
    def intents(self) -> bool:
        return self.fusion != "mean" or self.bir or self.kl

    @property
    def gcr_inter(self) -> bool:
        return self.ir or self.hnr


def apply_variant(cfg: TrainConfig) -> LossWiring:
    v = cfg.variant
    fusion, ir, hnr, bir, kl, layers = "reparam", True, True, True, True, cfg.layers
    if v == "full":
        pass
    elif v == "wo_gcr":
        ir = hnr = bir = False
    elif v == "wo_ir":
        ir = False
    elif v == "wo_hnr":
        hnr = False
    elif v == "wo_bir":
        bir = False
    elif v == "wo_bigr":
        fusion = "mean"
    elif v == "wo_pgr":
        fusion, kl = "average", False
    elif v in ("baseline_lightgcn", "baseline_mf"):
        fusion, ir, hnr, bir, kl = "mean", False, False, False, False
        if v == "baseline_mf":
            layers = 0
    else:
        raise ConfigError(f"unknown variant {v!r}")
    if cfg.lambda1 == 0:
        ir = hnr = bir = False
    if cfg.kl_weight == 0:
        kl = False
    return LossWiring(fusion, ir, hnr, bir, kl, layers)


def _fuse(mu: dc.Var, sigma: dc.Var | None, wiring: LossWiring, noise_mode: str,
          rng, noise) -> dc.Var:
    if wiring.fusion == "mean":
        return mu
    if wiring.fusion == "average":
        return dc.scale(mu + sigma, 0.5)
    e, _ = reparameterize(mu, sigma, noise_mode, rng, noise)
    return e


def batch_objective(tape: dc.Tape, leaves: dict[str, dc.Var], adj: dc.SparseMat,
                    batch: TrainBatch, num_users: int, cfg: TrainConfig, wiring: LossWiring,
                    rng: np.random.Generator | None = None,
                    noise: dict[str, np.ndarray] | None = None) -> tuple[dc.Var, LossReport]:
    """Full training objective for one batch.

    Intent and fusion work is restricted to the batch's distinct users and
    items; ``noise`` (keys "users"/"items") pins the reparameterization draw.
    """
    e_mu = propagate(adj, leaves["E0"], wiring.layers, cfg.include_layer0).e_mu
    users = batch.reg_users
    items = np.unique(np.concatenate([batch.pos, batch.neg]))
    local = TrainBatch(
        users=np.searchsorted(users, batch.users),
        pos=np.searchsorted(items, batch.pos),
        neg=np.searchsorted(items, batch.neg),
        reg_users=np.arange(len(users)),
        reg_items=np.searchsorted(items, batch.reg_items),
    )
    mu_u = dc.take_rows(e_mu, users)
    mu_i = dc.take_rows(e_mu, items + num_users)
    sig_u = sig_i = None
    if wiring.intents:
        sig_u = individual_intents(intent_scores(mu_u, leaves["C_user"], cfg.kappa),
                                   leaves["C_user"])
        sig_i = individual_intents(intent_scores(mu_i, leaves["C_item"], cfg.kappa),
                                   leaves["C_item"])
    noise = noise or {}
    e_u = _fuse(mu_u, sig_u, wiring, cfg.train_noise, rng, noise.get("users"))
    e_i = _fuse(mu_i, sig_i, wiring, cfg.train_noise, rng, noise.get("items"))

    bpr = bpr_loss(local, e_u, e_i, cfg.bpr_score)
    kl = kl_loss([mu_u, mu_i], [sig_u, sig_i]) if wiring.kl else None
    g_inter = None
    if wiring.gcr_inter:
        g_inter = gcr_interaction(local, e_u, e_i, cfg.tau, wiring.ir, wiring.hnr,
                                  cfg.gcr_reduction)
    g_intent = None
    if wiring.bir:
        g_intent = gcr_intent(sig_u, dc.take_rows(sig_i, local.reg_items), cfg.tau,
                              cfg.gcr_reduction)
    blocks = [dc.take_rows(leaves["E0"], users), dc.take_rows(leaves["E0"], items + num_users)]
    if wiring.intents:
        blocks += [leaves["C_user"], leaves["C_item"]]
    l2 = l2_penalty(blocks, len(batch))
    return total_loss(bpr, kl, g_inter, g_intent, l2, cfg.lambda1, cfg.lambda2, cfg.kl_weight)


def make_leaves(tape: dc.Tape, params: ModelParams) -> dict[str, dc.Var]:
    return {name: tape.leaf(arr, name) for name, arr in params.arrays().items()}


def train_step(params: ModelParams, adj: dc.SparseMat, batch: TrainBatch, num_users: int,
               cfg: TrainConfig, wiring: LossWiring, rng: np.random.Generator) -> LossReport:
    tape = dc.Tape(dtype=cfg.dtype, check_finite=False)
    leaves = make_leaves(tape, params)
    # finiteness is checked explicitly below, so silence numpy's own warnings
    with np.errstate(all="ignore"):
        total, report = batch_objective(tape, leaves, adj, batch, num_users, cfg, wiring, rng)
        if not math.isfinite(report.total):
            raise NumericError(f"non-finite loss: {report}")
        grads = tape.backward(total)
    adam_step(params, grads, cfg.lr)
    return report


def train_epoch(ds: InteractionDataset, adj: dc.SparseMat, params: ModelParams,
                cfg: TrainConfig, rng: np.random.Generator,
                sampler: BatchSampler | None = None) -> LossReport:
    """ceil(|E_train| / batch_size) Adam steps; returns the mean loss report."""
    wiring = apply_variant(cfg)
    sampler = sampler or BatchSampler(ds)
    n_batches = max(1, math.ceil(ds.num_train / cfg.batch_size))
    reports = []
    for _ in range(n_batches):
        batch = sampler.sample(cfg.batch_size, rng)
        last_good = params.copy()
        try:
            reports.append(train_step(params, adj, batch, ds.num_users, cfg, wiring, rng))
        except NumericError as exc:
            raise NumericError(str(exc), last_good=last_good) from None
    return LossReport.average(reports)


def final_embeddings(params: ModelParams, adj: dc.SparseMat, num_users: int, cfg: TrainConfig,
                     noise_mode: str | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Inference-time user and item embeddings (no gradient tape)."""
    wiring = apply_variant(cfg)
    tape = dc.Tape(dtype=cfg.dtype, check_finite=False)
    e_mu = propagate(adj, tape.const(params.E0), wiring.layers, cfg.include_layer0).e_mu
    if wiring.fusion == "mean":
        e = e_mu
    else:
        cu, ci = tape.const(params.C_user), tape.const(params.C_item)
        mu_u = dc.take_rows(e_mu, np.arange(num_users))
        mu_i = dc.take_rows(e_mu, np.arange(num_users, e_mu.shape[0]))
        sig_u = individual_intents(intent_scores(mu_u, cu, cfg.kappa), cu)
        sig_i = individual_intents(intent_scores(mu_i, ci, cfg.kappa), ci)
        mode = noise_mode or cfg.noise_mode
        rng = np.random.default_rng(cfg.seed) if mode == "sample" else None
        eu = _fuse(mu_u, sig_u, wiring, mode, rng, None)
        ei = _fuse(mu_i, sig_i, wiring, mode, rng, None)
        return eu.value, ei.value
    return e.value[:num_users], e.value[num_users:]


@dataclass
class EpochRecord:
    epoch: int
    loss: LossReport
    recall: float = float("nan")
    ndcg: float = float("nan")
    seconds: float = 0.0

    def line(self, k: int = 20) -> str:
        gcr = self.loss.gcr_inter + self.loss.gcr_intent
        return (f"epoch {self.epoch} bpr {self.loss.bpr:.6f} kl {self.loss.kl:.6f} "
                f"gcr {gcr:.6f} recall@{k} {self.recall:.6f} ndcg@{k} {self.ndcg:.6f}")


@dataclass
class Checkpoint:
    num_users: int
    num_items: int
    params: ModelParams
    config: TrainConfig


@dataclass
class FitResult:
    checkpoint: Checkpoint
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_recall: float = float("nan")
    adj: dc.SparseMat | None = None
    train_ds: InteractionDataset | None = None

    def log_lines(self) -> list[str]:
        k = self.checkpoint.config.topk
        return [r.line(k) for r in self.history]


def seed_streams(seed: int) -> dict[str, np.random.Generator]:
    init, train, split = np.random.SeedSequence(seed).spawn(3)
    return {"init": np.random.default_rng(init), "train": np.random.default_rng(train),
            "split": np.random.default_rng(split)}


def fit(ds: InteractionDataset, cfg: TrainConfig, on_epoch=None) -> FitResult:
    """Train with early stopping on validation Recall@topk.

    A ``val_fraction`` share of each user's train items is held out for
    validation; with ``val_fraction == 0`` all epochs run and the last one wins.
    """
    streams = seed_streams(cfg.seed)
    if cfg.val_fraction > 0:
        fit_ds, val_ds = holdout_validation(ds, cfg.val_fraction, streams["split"])
    else:
        fit_ds, val_ds = ds, None
    adj = build_normalized_adjacency(fit_ds)
    params = init_params(cfg, ds.num_users, ds.num_items, streams["init"])
    sampler = BatchSampler(fit_ds)
    result = FitResult(Checkpoint(ds.num_users, ds.num_items, params.copy(), cfg),
                       adj=adj, train_ds=fit_ds)
    best, since_best = -1.0, 0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        try:
            report = train_epoch(fit_ds, adj, params, cfg, streams["train"], sampler)
        except NumericError as exc:
            good = exc.last_good if exc.last_good is not None else params
            result.checkpoint = Checkpoint(ds.num_users, ds.num_items, good.copy(), cfg)
            raise NumericError(f"epoch {epoch}: {exc}", last_good=result) from None
        rec = EpochRecord(epoch, report, seconds=time.perf_counter() - t0)
        stop = False
        if val_ds is not None and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
            ue, ie = final_embeddings(params, adj, ds.num_users, cfg)
            m = evaluate(val_ds, ue, ie, ks=(cfg.topk,))
            rec.recall, rec.ndcg = m.recall[cfg.topk], m.ndcg[cfg.topk]
            if rec.recall > best:
                best, since_best = rec.recall, 0
                result.best_epoch, result.best_recall = epoch, best
                result.checkpoint = Checkpoint(ds.num_users, ds.num_items, params.copy(), cfg)
            else:
                since_best += 1
                stop = since_best > cfg.patience
        result.history.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
        if stop:
            break
    if val_ds is None:
        result.best_epoch = len(result.history)
        result.checkpoint = Checkpoint(ds.num_users, ds.num_items, params.copy(), cfg)
    return result


def test_metrics(result: FitResult, ds: InteractionDataset, ks=(20, 40)) -> MetricReport:
    """Test-set metrics of the best checkpoint, propagated over the full train graph."""
    ck = result.checkpoint
    adj = build_normalized_adjacency(ds)
    ue, ie = final_embeddings(ck.params, adj, ck.num_users, ck.config)
    return evaluate(ds, ue, ie, ks=ks)


test_metrics.__test__ = False  # keep pytest from collecting it when imported into tests
