"""Synthetic interaction logs with a planted popularity bias.

Items belong to taste clusters and carry "pretrained" embeddings: cluster
centre plus noise, one coordinate tracking log-popularity (as text
embeddings of well-known items tend to), and one constant coordinate so the
adapter can learn a query offset.  Each user prefers one cluster.  An event is either a genuine
pick from the user's cluster (uniform unless ``cluster_zipf`` > 0) or an
exposure-driven pick drawn from a global
Zipf popularity law.  Exposure-driven picks are frequent early on and rare in
the final periods, so the training window over-represents popular items
relative to the validation and test windows.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import G0, G1, GroupAssignment, InteractionLog


@dataclass(frozen=True)
class PlantedBias:
    log: InteractionLog
    item_emb: np.ndarray
    groups: GroupAssignment
    item_cluster: np.ndarray
    popularity_rank: np.ndarray


def zipf_weights(n, exponent):
    w = np.arange(1, n + 1, dtype=float) ** -exponent
    return w / w.sum()


def planted_popularity_bias(n_users=1000, n_items=200, zipf=1.2, events_per_user=10,
                            n_clusters=10, dim=8, early_pop_share=0.4, late_pop_share=0.1,
                            late_start=0.8, noise=0.35, pop_signal=0.3, cluster_zipf=0.0,
                            seed=0) -> PlantedBias:
    if dim < 3:
        raise ValueError("dim must be >= 3")
    rng = np.random.default_rng(seed)
    centres = rng.normal(0.0, 1.0, size=(n_clusters, dim - 2))
    item_cluster = rng.integers(0, n_clusters, size=n_items)
    rank = rng.permutation(n_items)  # rank[i] = popularity rank of item i
    pop_p = zipf_weights(n_items, zipf)[rank]

    log_pop = np.log(pop_p)
    emb = np.empty((n_items, dim))
    emb[:, 0] = 1.0
    emb[:, 1] = pop_signal * (log_pop - log_pop.mean()) / log_pop.std()
    emb[:, 2:] = centres[item_cluster] + noise * rng.normal(size=(n_items, dim - 2))
    emb /= np.sqrt(dim)
    members = [np.flatnonzero(item_cluster == c) for c in range(n_clusters)]
    taste_p = pop_p ** (cluster_zipf / zipf)
    in_cluster_p = [taste_p[m] / taste_p[m].sum() for m in members]

    users, items, stamps = [], [], []
    pref = rng.integers(0, n_clusters, size=n_users)
    horizon = 10_000_000
    for u in range(n_users):
        times = np.sort(rng.integers(0, horizon, size=events_per_user))
        for t in times:
            share = early_pop_share if t < late_start * horizon else late_pop_share
            if rng.random() < share:
                item = int(rng.choice(n_items, p=pop_p))
            else:
                c = pref[u]
                item = int(rng.choice(members[c], p=in_cluster_p[c]))
            users.append(u)
            items.append(item)
            stamps.append(int(t))
    log = InteractionLog.from_arrays(users, items, stamps, n_users, n_items)
    groups = GroupAssignment(np.where(rng.random(n_users) < 0.5, G0, G1).astype(np.int64))
    return PlantedBias(log, emb, groups, item_cluster, rank)


def write_planted(data: PlantedBias, directory):
    """Write ``interactions.tsv``, ``groups.tsv`` and ``item_emb.tsv``."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "interactions.tsv", "w", encoding="utf-8") as fh:
        for u, i, t in zip(data.log.users, data.log.items, data.log.timestamps):
            fh.write(f"u{u}\ti{i}\t{t}\n")
    with open(out / "groups.tsv", "w", encoding="utf-8") as fh:
        for u, g in enumerate(data.groups.group_of):
            fh.write(f"u{u}\t{'F' if g == G0 else 'M'}\n")
    with open(out / "item_emb.tsv", "w", encoding="utf-8") as fh:
        for i, row in enumerate(data.item_emb):
            fh.write(f"i{i}\t" + "\t".join(repr(float(x)) for x in row) + "\n")
    return out
