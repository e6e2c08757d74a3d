"""Parameters, optimisation and the training loop."""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from ._io import atomic_write
from .encoder import VARIANCE_RULES, encode
from .gauss import VARIANCE_FLOOR
from .graph import InteractionGraph, InteractionSet, build_graph
from .losses import LOSS_MODES, Batch, LossBreakdown, total_loss

log = logging.getLogger(__name__)

ENCODERS = ("wgat", "lightgcn_gauss")
CHECKPOINT_MAGIC = b"GREC1"
_HEADER = struct.Struct("<IIIIBBB")


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch: int, batch: int, what: str = "loss"):
        super().__init__(f"non-finite {what} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


@dataclass
class TrainConfig:
    dim: int = 64
    layers: int = 2
    lr: float = 1e-3
    reg: float = 1e-5
    omega: float = 0.1
    tau: float = 0.25
    batch_size: int = 2048
    epochs: int = 100
    seed: int = 0
    encoder: str = "wgat"
    variance_rule: str = "a2"
    loss: str = "bpr+wpc"
    negatives: int = 1
    eval_every: int = 0
    topk: int = 20

    def __post_init__(self):
        for name in ("dim", "batch_size", "negatives", "topk"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.layers < 0 or self.epochs < 0 or self.eval_every < 0:
            raise ValueError("layers, epochs and eval_every must be non-negative")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if not 0 < self.tau <= 1:
            raise ValueError(f"tau must lie in (0, 1], got {self.tau}")
        if self.omega < 0 or self.reg < 0:
            raise ValueError("omega and reg must be non-negative")
        if self.negatives != 1:
            raise ValueError("only one negative per positive is supported")
        if self.encoder not in ENCODERS:
            raise ValueError(f"encoder must be one of {ENCODERS}")
        if self.variance_rule not in VARIANCE_RULES:
            raise ValueError(f"variance_rule must be one of {VARIANCE_RULES}")
        if self.loss not in LOSS_MODES:
            raise ValueError(f"loss must be one of {LOSS_MODES}")

    def to_dict(self) -> dict:
        return asdict(self)


def softplus(x):
    return np.logaddexp(0.0, x)


def inverse_softplus(y):
    return np.log(np.expm1(y))


@dataclass
class ModelParams:
    mean: np.ndarray
    raw_variance: np.ndarray
    moments: dict = field(default_factory=dict)
    step: int = 0

    def variance(self) -> np.ndarray:
        return softplus(self.raw_variance) + VARIANCE_FLOOR

    def tables(self) -> dict:
        return {"mean": self.mean, "raw_variance": self.raw_variance}

    def copy(self) -> "ModelParams":
        return ModelParams(self.mean.copy(), self.raw_variance.copy(),
                           {k: v.copy() for k, v in self.moments.items()}, self.step)


def xavier_bound(dim: int) -> float:
    return math.sqrt(6.0 / (dim + dim))


def init_params(config: TrainConfig, num_users: int, num_items: int,
                seed: int | None = None) -> ModelParams:
    """Xavier-uniform means; raw variances chosen so every variance starts at 1."""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    n = num_users + num_items
    b = xavier_bound(config.dim)
    mean = rng.uniform(-b, b, size=(n, config.dim))
    raw = np.full((n, config.dim), inverse_softplus(1.0 - VARIANCE_FLOOR))
    return ModelParams(mean, raw)


# --------------------------------------------------------------------------
# sampling


def sample_negatives(graph: InteractionGraph, users: np.ndarray, rng: np.random.Generator,
                     max_tries: int = 100):
    """One non-interacted item per user; returns (negatives, keep_mask).

    Rejection sampling for up to ``max_tries`` rounds, then an exhaustive draw
    from the complement. Users who interacted with every item are dropped.
    """
    users = np.asarray(users, dtype=np.int64)
    neg = rng.integers(0, graph.num_items, size=len(users))
    keep = np.ones(len(users), dtype=bool)
    bad = np.flatnonzero(graph.has_edges(users, neg))
    for _ in range(max_tries):
        if not len(bad):
            break
        neg[bad] = rng.integers(0, graph.num_items, size=len(bad))
        bad = bad[graph.has_edges(users[bad], neg[bad])]
    for k in bad:
        taken = graph.user_neighbors(users[k])
        free = np.setdiff1d(np.arange(graph.num_items), taken, assume_unique=True)
        if len(free) == 0:
            log.warning("user %d has interacted with every item; skipped", users[k])
            keep[k] = False
        else:
            neg[k] = free[rng.integers(len(free))]
    return neg, keep


def _make_batch(graph, edge_ids, rng) -> Batch:
    users = graph.edge_users[edge_ids]
    pos = graph.edge_items[edge_ids]
    neg, keep = sample_negatives(graph, users, rng)
    return Batch(users[keep], pos[keep], neg[keep])


def sample_triplets(graph: InteractionGraph, batch_size: int, rng: np.random.Generator) -> Batch:
    """(user, positive, negative) triples with (user, positive) uniform over train edges."""
    return _make_batch(graph, rng.integers(0, graph.num_edges, size=batch_size), rng)


def epoch_batches(graph: InteractionGraph, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(graph.num_edges)
    for start in range(0, len(order), batch_size):
        yield _make_batch(graph, order[start:start + batch_size], rng)


# --------------------------------------------------------------------------
# objective and gradients


def forward(tables: dict, graph: InteractionGraph, config: TrainConfig):
    """Build a tape, materialise variances and run the encoder.

    Returns (tape, mean_leaf, raw_leaf, mean0, var0, stack).
    """
    tape = ad.Tape()
    mean0 = tape.leaf(tables["mean"])
    raw = tape.leaf(tables["raw_variance"])
    var0 = ad.softplus(raw) + VARIANCE_FLOOR
    stack = encode(mean0, var0, graph, config.layers, config.encoder, config.variance_rule)
    return tape, mean0, raw, var0, stack


def loss_and_grads(tables: dict, graph: InteractionGraph, batch: Batch,
                   config: TrainConfig) -> tuple[LossBreakdown, dict]:
    tape, mean0, raw, var0, stack = forward(tables, graph, config)
    loss, parts = total_loss(batch, mean0, var0, stack.mean, stack.variance, graph.num_users,
                             omega=config.omega, tau=config.tau, reg=config.reg, loss=config.loss)
    tape.backward(loss)
    grads = {"mean": mean0.grad, "raw_variance": raw.grad}
    tape.release()
    return parts, grads


def make_loss_fn(graph: InteractionGraph, batch: Batch, config: TrainConfig):
    """Adapter for autodiff.finite_diff_check."""
    def fn(tables):
        parts, grads = loss_and_grads(tables, graph, batch, config)
        return parts.total, grads
    return fn


def gradient_check(num_users: int = 5, num_items: int = 7, num_edges: int = 20,
                   samples: int = 200, seed: int = 0, step: float = 1e-5,
                   config: TrainConfig | None = None) -> float:
    """Worst relative gradient error of the full loss on a random toy graph.

    Every training edge is one triple of the batch, so the contrastive term
    sees all users and items.
    """
    from .synthetic import random_bipartite

    config = config or TrainConfig()
    graph = build_graph(random_bipartite(num_users, num_items, num_edges, seed),
                        num_users, num_items)
    rng = np.random.default_rng(seed)
    batch = _make_batch(graph, np.arange(graph.num_edges), rng)
    params = init_params(config, num_users, num_items, seed)
    # move away from the symmetric start so every term has a non-trivial gradient
    params.raw_variance += rng.normal(0.0, 0.5, size=params.raw_variance.shape)
    return ad.finite_diff_check(make_loss_fn(graph, batch, config), params.tables(),
                                step=step, samples=samples, seed=seed)


def final_embeddings(params: ModelParams, graph: InteractionGraph, config: TrainConfig):
    """Encoder output (mean, variance) arrays for every node."""
    tape, *_, stack = forward(params.tables(), graph, config)
    tape.release()
    return stack.mean.value, stack.variance.value


# --------------------------------------------------------------------------
# optimisation


def adam_step(params: ModelParams, grads: dict, lr: float, betas=(0.9, 0.999),
              eps: float = 1e-8) -> ModelParams:
    """In-place bias-corrected Adam update of every table in ``grads``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}; step aborted")
    b1, b2 = betas
    params.step += 1
    t = params.step
    tables = params.tables()
    for name, g in grads.items():
        m = params.moments.setdefault(name + ".m", np.zeros_like(g))
        v = params.moments.setdefault(name + ".v", np.zeros_like(g))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        tables[name] -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return params


@dataclass
class EpochRecord:
    epoch: int
    l_bpr: float
    l_wpc: float
    l_reg: float
    l_total: float
    recall20: float = float("nan")
    ndcg20: float = float("nan")

    CSV_HEADER = "epoch,l_bpr,l_wpc,l_reg,l_total,recall20,ndcg20"

    def csv_row(self) -> str:
        values = (self.l_bpr, self.l_wpc, self.l_reg, self.l_total, self.recall20, self.ndcg20)
        return ",".join([str(self.epoch)] + [repr(float(v)) for v in values])


def train(config: TrainConfig, graph: InteractionGraph, test: InteractionSet | None = None,
          params: ModelParams | None = None, on_epoch=None):
    """Run ``config.epochs`` epochs of mini-batch training.

    Each step rebuilds attention from the current parameters, runs the encoder
    over the whole graph, backpropagates the batch loss and applies Adam.
    Returns (params, list of EpochRecord).
    """
    if params is None:
        params = init_params(config, graph.num_users, graph.num_items)
    rng = np.random.default_rng([config.seed, 1])
    history = []
    for epoch in range(1, config.epochs + 1):
        sums = np.zeros(4)
        count = 0
        for b, batch in enumerate(epoch_batches(graph, config.batch_size, rng)):
            if len(batch) < 2 and config.loss != "bpr_only":
                continue  # in-batch negatives need a second pair
            parts, grads = loss_and_grads(params.tables(), graph, batch, config)
            if not math.isfinite(parts.total):
                raise TrainingDiverged(epoch, b)
            try:
                adam_step(params, grads, config.lr)
            except FloatingPointError as exc:
                raise TrainingDiverged(epoch, b, "gradient") from exc
            sums += (parts.bpr, parts.contrastive, parts.reg, parts.total)
            count += 1
        rec = EpochRecord(epoch, *(sums / max(count, 1)))
        if test is not None and config.eval_every and (
                epoch % config.eval_every == 0 or epoch == config.epochs):
            from .evaluator import evaluate_all
            mean, var = final_embeddings(params, graph, config)
            result = evaluate_all(mean, var, graph, test, config.topk)
            rec.recall20, rec.ndcg20 = result.recall, result.ndcg
        log.info("epoch %d: total %.5f (bpr %.5f, con %.5f, reg %.2e) recall %.4f",
                 epoch, rec.l_total, rec.l_bpr, rec.l_wpc, rec.l_reg, rec.recall20)
        history.append(rec)
        if on_epoch is not None:
            on_epoch(rec, params)
    return params, history


def write_epoch_log(history, path) -> None:
    lines = [EpochRecord.CSV_HEADER] + [r.csv_row() for r in history]
    atomic_write(path, ("\n".join(lines) + "\n").encode())


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: ModelParams, config: TrainConfig, num_users: int,
                    num_items: int) -> None:
    header = CHECKPOINT_MAGIC + _HEADER.pack(
        config.dim, config.layers, num_users, num_items,
        ENCODERS.index(config.encoder), VARIANCE_RULES.index(config.variance_rule),
        LOSS_MODES.index(config.loss))
    body = (params.mean.astype("<f8").tobytes() + params.raw_variance.astype("<f8").tobytes())
    atomic_write(path, header + body)


def load_checkpoint(path):
    """Returns (params, partial TrainConfig, num_users, num_items)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    off = len(CHECKPOINT_MAGIC)
    dim, layers, nu, ni, enc, rule, loss = _HEADER.unpack_from(blob, off)
    off += _HEADER.size
    n = (nu + ni) * dim
    if len(blob) != off + 2 * n * 8:
        raise ValueError(f"{path}: truncated checkpoint")
    tables = np.frombuffer(blob, dtype="<f8", offset=off).astype(np.float64)
    mean = tables[:n].reshape(nu + ni, dim).copy()
    raw = tables[n:].reshape(nu + ni, dim).copy()
    config = TrainConfig(dim=dim, layers=layers, encoder=ENCODERS[enc],
                         variance_rule=VARIANCE_RULES[rule], loss=LOSS_MODES[loss])
    return ModelParams(mean, raw), config, nu, ni

