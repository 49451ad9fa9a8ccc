"""MF-BPR and LightGCN as specializations of the main pipeline."""
from __future__ import annotations

import numpy as np

from . import diffcore as dc
from .config import TrainConfig
from .encoder import propagate
from .graphdata import TrainBatch


def baseline_config(cfg: TrainConfig, kind: str) -> TrainConfig:
    """``kind`` is "mf" or "lightgcn"; all other settings are kept."""
    return cfg.replace(variant=f"baseline_{kind}")


def _pair_scores(e: np.ndarray, batch: TrainBatch, num_users: int):
    eu = e[batch.users]
    return ((eu * e[batch.pos + num_users]).sum(axis=1),
            (eu * e[batch.neg + num_users]).sum(axis=1))


def mf_forward(params, batch: TrainBatch, num_users: int):
    """Positive and negative inner-product scores from the raw embedding rows."""
    return _pair_scores(params.E0, batch, num_users)


def lightgcn_forward(params, adj: dc.SparseMat, batch: TrainBatch, num_users: int, layers: int):
    tape = dc.Tape(dtype=params.E0.dtype, check_finite=False)
    e = propagate(adj, tape.const(params.E0), layers).e_mu.value
    return _pair_scores(e, batch, num_users)
