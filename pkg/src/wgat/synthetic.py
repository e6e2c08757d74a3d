"""Synthetic interaction data: tiny fixtures and a MovieLens-shaped generator."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .graph import InteractionSet


def random_bipartite(num_users: int, num_items: int, num_edges: int, seed: int = 0) -> InteractionSet:
    """Uniform random edge set that touches every user and item when possible."""
    if num_edges > num_users * num_items:
        raise ValueError("more edges requested than user-item pairs exist")
    rng = np.random.default_rng(seed)
    chosen = set()
    # cover every node first
    for k in range(max(num_users, num_items)):
        if len(chosen) >= num_edges:
            break
        chosen.add((k % num_users, int(rng.integers(num_items)) if k >= num_items else k))
    while len(chosen) < num_edges:
        chosen.add((int(rng.integers(num_users)), int(rng.integers(num_items))))
    pairs = sorted(chosen)
    return InteractionSet([p[0] for p in pairs], [p[1] for p in pairs])


def toy_interactions(seed: int = 0) -> InteractionSet:
    """The 5-user / 7-item / 20-edge fixture used for gradient checks."""
    return random_bipartite(5, 7, 20, seed)


@dataclass
class SyntheticCatalog:
    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    timestamps: np.ndarray
    item_genres: list  # list of tuples of genre names, indexed by item
    genre_names: list

    def write_movielens(self, directory) -> tuple[str, str]:
        """Write ``ratings.dat`` and ``movies.dat`` in MovieLens ``::`` format."""
        os.makedirs(directory, exist_ok=True)
        ratings = os.path.join(directory, "ratings.dat")
        movies = os.path.join(directory, "movies.dat")
        with open(ratings, "w") as fh:
            for u, i, r, t in zip(self.users, self.items, self.ratings, self.timestamps):
                fh.write(f"{u + 1}::{i + 1}::{r}::{t}\n")
        with open(movies, "w") as fh:
            for i, genres in enumerate(self.item_genres):
                fh.write(f"{i + 1}::Item {i + 1} (2000)::{'|'.join(genres)}\n")
        return ratings, movies


def movielens_like(num_users: int = 943, num_items: int = 1682, num_genres: int = 18,
                   interactions: int = 100_000, seed: int = 0, taste_strength: float = 6.0,
                   latent_strength: float = 2.0) -> SyntheticCatalog:
    """Interactions with genre structure, long-tailed activity and popularity.

    Each user draws a sparse taste vector over genres and a latent factor;
    items get one to three genres, a popularity weight and a latent factor.
    Users pick items without replacement with probability proportional to
    popularity * exp(taste affinity + latent affinity).
    """
    rng = np.random.default_rng(seed)
    genre_names = [f"Genre{g:02d}" for g in range(num_genres)]
    prevalence = rng.dirichlet(np.full(num_genres, 2.0))
    n_labels = rng.choice([1, 2, 3], size=num_items, p=[0.5, 0.33, 0.17])
    item_genre = np.zeros((num_items, num_genres))
    item_genres = []
    for i, k in enumerate(n_labels):
        gs = np.sort(rng.choice(num_genres, size=k, replace=False, p=prevalence))
        item_genre[i, gs] = 1.0 / k
        item_genres.append(tuple(genre_names[g] for g in gs))

    popularity = rng.lognormal(0.0, 1.0, size=num_items)
    taste = rng.dirichlet(np.full(num_genres, 0.3), size=num_users)
    latent_dim = 8
    user_f = rng.standard_normal((num_users, latent_dim))
    item_f = rng.standard_normal((num_items, latent_dim))

    activity = rng.lognormal(0.0, 0.9, size=num_users)
    counts = np.clip(np.round(activity / activity.sum() * interactions), 20, num_items // 3)
    counts = counts.astype(np.int64)

    logits = (taste_strength * taste @ item_genre.T
              + latent_strength * (user_f @ item_f.T) / np.sqrt(latent_dim))
    logits += np.log(popularity)[None, :]
    # Gumbel top-k == sampling without replacement proportional to exp(logits)
    keys = logits + rng.gumbel(size=logits.shape)
    users, items = [], []
    for u in range(num_users):
        top = np.argpartition(-keys[u], counts[u])[: counts[u]]
        users.append(np.full(len(top), u))
        items.append(np.sort(top))
    users = np.concatenate(users)
    items = np.concatenate(items)
    ratings = rng.integers(1, 6, size=len(users))
    timestamps = 880_000_000 + rng.integers(0, 10_000_000, size=len(users))
    return SyntheticCatalog(users, items, ratings, timestamps, item_genres, genre_names)
