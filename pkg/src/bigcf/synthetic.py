"""Desk-scale implicit-feedback data with latent intents and popularity skew."""
from __future__ import annotations

import numpy as np

from .graphdata import InteractionDataset, split_per_user


def make_desk_dataset(num_users: int = 1000, num_items: int = 1700,
                      num_interactions: int = 100_000, num_topics: int = 12,
                      user_concentration: float = 0.15, item_concentration: float = 0.1,
                      popularity_exponent: float = 0.8, degree_sigma: float = 0.8,
                      test_fraction: float = 0.2, seed: int = 7) -> InteractionDataset:
    """Sample a MovieLens-100k-sized interaction set.

    Users mix a few of ``num_topics`` latent topics (Dirichlet), items carry
    topic profiles and a Zipf-like popularity. User degrees are log-normal
    with mean ``num_interactions / num_users``. Items for a user are drawn
    without replacement in proportion to popularity times topic affinity.
    """
    rng = np.random.default_rng(seed)
    theta = rng.dirichlet(np.full(num_topics, user_concentration), size=num_users)
    phi = rng.dirichlet(np.full(num_topics, item_concentration), size=num_items)
    pop = (1.0 + rng.permutation(num_items)) ** (-popularity_exponent)
    raw = rng.lognormal(0.0, degree_sigma, size=num_users)
    deg = raw / raw.mean() * num_interactions / num_users
    deg = np.clip(np.round(deg), 10, num_items // 2).astype(np.int64)
    train = []
    for u in range(num_users):
        w = pop * (phi @ theta[u]) + 1e-12
        # Gumbel top-k == weighted sampling without replacement
        keys = np.log(w) - np.log(-np.log(rng.random(num_items)))
        train.append(np.sort(np.argpartition(-keys, deg[u] - 1)[:deg[u]]))
    full = InteractionDataset(num_users, num_items, train,
                              [np.zeros(0, np.int64)] * num_users)
    return split_per_user(full, test_fraction, rng)

