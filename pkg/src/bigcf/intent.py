"""Collective intent tables, individual intents, fusion and edge scores."""
from __future__ import annotations

import numpy as np

from . import diffcore as dc
from .errors import ConfigError

NOISE_MODES = ("sample", "zero", "one")


def intent_scores(e_mu: dc.Var, table: dc.Var, kappa: float = 1.0) -> dc.Var:
    """Softmax over intents of <e_mu, C^k> / kappa, one row per node."""
    if table.shape[0] == 0:
        raise ConfigError("intent table has no rows")
    if table.shape[1] != e_mu.shape[1]:
        raise ConfigError(f"intent dim {table.shape[1]} != embedding dim {e_mu.shape[1]}")
    return dc.row_softmax(dc.matmul(e_mu, dc.transpose(table)), kappa)


def individual_intents(scores: dc.Var, table: dc.Var) -> dc.Var:
    """Score-weighted combination of intent rows."""
    return dc.matmul(scores, table)


def draw_noise(shape, noise_mode: str, rng: np.random.Generator | None, dtype) -> np.ndarray:
    if noise_mode == "sample":
        if rng is None:
            raise ConfigError("noise_mode 'sample' needs an rng")
        return rng.standard_normal(shape).astype(dtype, copy=False)
    if noise_mode == "zero":
        return np.zeros(shape, dtype=dtype)
    if noise_mode == "one":
        return np.ones(shape, dtype=dtype)
    raise ConfigError(f"unknown noise_mode {noise_mode!r}; expected one of {NOISE_MODES}")


def reparameterize(e_mu: dc.Var, e_sigma: dc.Var, noise_mode: str = "sample",
                   rng: np.random.Generator | None = None,
                   noise: np.ndarray | None = None) -> tuple[dc.Var, np.ndarray]:
    """e = e_mu + e_sigma * eps. Passing ``noise`` overrides ``noise_mode``."""
    if e_mu.shape != e_sigma.shape:
        raise ConfigError(f"reparameterize: {e_mu.shape} vs {e_sigma.shape}")
    if noise is None:
        noise = draw_noise(e_mu.shape, noise_mode, rng, e_mu.value.dtype)
    eps = e_mu.tape.const(noise)
    return e_mu + dc.mul(e_sigma, eps), eps.value


def score_edges(e_u: dc.Var, e_i: dc.Var) -> dc.Var:
    """Edge probabilities sigmoid(<e_u, e_i>), one per row pair."""
    return dc.sigmoid(dc.row_sum(dc.mul(e_u, e_i)))
