"""Synthetic interaction logs with cluster-driven transitions and matching content vectors.

Items are split into clusters. Each cluster has a unit-norm centroid and an
item's content vector is its centroid plus Gaussian noise, re-normalised.
Users follow a Markov walk: with probability ``p_follow`` the next item is
drawn uniformly from the current item's cluster, otherwise uniformly from
the whole catalogue. Content therefore predicts transitions, while item IDs
only carry the signal through co-occurrence.
"""
import os
from dataclasses import asdict, dataclass

import numpy as np

from .data import write_content_binary, write_content_tsv


@dataclass
class SynthConfig:
    n_users: int = 5000
    n_items: int = 500
    n_clusters: int = 25
    seq_len_min: int = 6
    seq_len_max: int = 12
    dim_raw: int = 32
    p_follow: float = 0.8
    cluster_spread: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.n_users < 1 or self.n_items < 1 or self.n_clusters < 1:
            raise ValueError("n_users, n_items and n_clusters must be >= 1")
        if self.n_clusters > self.n_items:
            raise ValueError("n_clusters must not exceed n_items (every cluster needs an item)")
        if not 0 <= self.p_follow <= 1:
            raise ValueError("p_follow must be in [0, 1]")
        if not 1 <= self.seq_len_min <= self.seq_len_max:
            raise ValueError("need 1 <= seq_len_min <= seq_len_max")
        if self.dim_raw < 1 or self.cluster_spread < 0:
            raise ValueError("dim_raw must be >= 1 and cluster_spread >= 0")

    def to_dict(self):
        return asdict(self)


@dataclass
class SynthData:
    sequences: list        # list of item-index lists, one per user
    content: np.ndarray    # n_items x dim_raw
    cluster: np.ndarray    # item -> cluster id
    config: SynthConfig

    def item_id(self, i):
        return f"i{i}"

    def user_id(self, u):
        return f"u{u}"


def _unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def generate(config):
    rng = np.random.default_rng(config.seed)
    cluster = np.empty(config.n_items, dtype=np.int64)
    cluster[rng.permutation(config.n_items)] = np.arange(config.n_items) % config.n_clusters
    members = [np.flatnonzero(cluster == c) for c in range(config.n_clusters)]

    centroids = _unit(rng.normal(size=(config.n_clusters, config.dim_raw)))
    noise = rng.normal(scale=config.cluster_spread, size=(config.n_items, config.dim_raw))
    content = _unit(centroids[cluster] + noise)

    sequences = []
    lengths = rng.integers(config.seq_len_min, config.seq_len_max + 1, size=config.n_users)
    for n in lengths:
        cur = int(rng.integers(config.n_items))
        seq = [cur]
        for _ in range(n - 1):
            if rng.random() < config.p_follow:
                group = members[cluster[cur]]
                cur = int(group[rng.integers(group.size)])
            else:
                cur = int(rng.integers(config.n_items))
            seq.append(cur)
        sequences.append(seq)
    return SynthData(sequences, content, cluster, config)


def write(data, out_dir, content_format="tsv"):
    """Write ``interactions.csv``, ``content.tsv``/``content.cvec`` and ``clusters.csv``."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {"interactions": os.path.join(out_dir, "interactions.csv"),
             "clusters": os.path.join(out_dir, "clusters.csv")}
    with open(paths["interactions"], "w", encoding="utf-8", newline="\n") as fh:
        clock = 0
        for u, seq in enumerate(data.sequences):
            for item in seq:
                fh.write(f"{data.user_id(u)},{data.item_id(item)},{clock}\n")
                clock += 1
    ids = [data.item_id(i) for i in range(len(data.content))]
    if content_format == "binary":
        paths["content"] = os.path.join(out_dir, "content.cvec")
        write_content_binary(paths["content"], ids, data.content)
    else:
        paths["content"] = os.path.join(out_dir, "content.tsv")
        write_content_tsv(paths["content"], ids, data.content)
    with open(paths["clusters"], "w", encoding="utf-8", newline="\n") as fh:
        for i, c in enumerate(data.cluster):
            fh.write(f"{data.item_id(i)},{c}\n")
    return paths


def _gain(ranks, cutoff):
    ranks = np.asarray(ranks, dtype=np.float64)
    return np.where(ranks <= cutoff, 1.0 / np.log2(ranks + 1.0), 0.0)


def oracle_ndcg_bound(config, cluster=None, cutoff=10):
    """Expected NDCG@cutoff of the ranker that puts the current cluster's items first.

    Within the cluster and outside it the order is uniformly random. The item
    distribution of the walk is uniform at every step, so the current cluster
    is drawn in proportion to its size.
    """
    if cluster is None:
        cluster = generate(config).cluster
    n = cluster.size
    sizes = np.bincount(cluster)
    total = 0.0
    for s in sizes[sizes > 0]:
        q = config.p_follow + (1 - config.p_follow) * s / n
        inside = _gain(np.arange(1, s + 1), cutoff).mean()
        outside = _gain(np.arange(s + 1, n + 1), cutoff).mean() if s < n else 0.0
        total += (s / n) * (q * inside + (1 - q) * outside)
    return float(total)
