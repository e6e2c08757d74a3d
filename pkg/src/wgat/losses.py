"""Training objectives: BPR, in-batch Wasserstein contrastive loss, regularisation.

All losses take :class:`~wgat.autodiff.Node` inputs (plain arrays are lifted
onto a fresh tape) and return a scalar Node.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

LOSS_MODES = ("bpr_only", "bpr+wpc", "bpr+kl_contrastive")


@dataclass
class Batch:
    users: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray

    def __len__(self):
        return len(self.users)

    def touched_nodes(self, num_users: int) -> np.ndarray:
        """Unique joint node ids referenced by the batch."""
        return np.unique(np.concatenate([
            self.users, self.positives + num_users, self.negatives + num_users]))


def bpr_loss(pos_scores, neg_scores) -> ad.Node:
    """mean over the batch of -log sigmoid(pos - neg)."""
    pos, neg = ad.lift_all(pos_scores, neg_scores)
    if pos.shape != neg.shape:
        raise ValueError(f"score vectors differ in shape: {pos.shape} vs {neg.shape}")
    return ad.mean(ad.softplus(neg - pos))


def info_nce(scores) -> ad.Node:
    """-(1/B) sum_b [S[b, b] - logsumexp_j S[b, j]] for a (B, B) score matrix.

    Row b pairs user b with its own positive on the diagonal; every other
    column is an in-batch negative. The positive stays in the denominator.
    """
    s = ad.lift(scores)
    if s.value.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ValueError(f"expected a square score matrix, got {s.shape}")
    if s.shape[0] < 2:
        raise ValueError("contrastive loss needs at least two pairs in the batch")
    return ad.mean(ad.logsumexp_rows(s) - ad.diagonal(s))


def grouped_info_nce(scores, rows, cols) -> ad.Node:
    """:func:`info_nce` over the (B, B) matrix S[rows][:, cols], without building it.

    ``scores`` holds one row per distinct user and one column per distinct
    item in the batch. Pair b uses row ``rows[b]`` and column ``cols[b]``. A
    column shared by c pairs appears c times in every full-matrix row, which
    is the same as adding log(c) to it before the log-sum-exp.
    """
    s = ad.lift(scores)
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    if len(rows) != len(cols):
        raise ValueError("rows and cols must have one entry per pair")
    if len(rows) < 2:
        raise ValueError("contrastive loss needs at least two pairs in the batch")
    counts = np.bincount(cols, minlength=s.shape[1])
    with np.errstate(divide="ignore"):
        log_counts = np.log(counts.astype(np.float64))
    lse = ad.logsumexp_rows(s + log_counts[None, :])
    return ad.mean(ad.take(lse, rows) - ad.take_elements(s, rows, cols))


def _contrastive(distance_fn, user_mean, user_var, item_mean, item_var, tau,
                 user_ids=None, item_ids=None):
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if user_ids is None or item_ids is None:
        dist = distance_fn(user_mean, user_var, item_mean, item_var)
        return info_nce(ad.sigmoid(-dist) * (1.0 / tau))
    # score each distinct user against each distinct item once
    _, first_u, rows = np.unique(user_ids, return_index=True, return_inverse=True)
    _, first_i, cols = np.unique(item_ids, return_index=True, return_inverse=True)
    dist = distance_fn(ad.take(user_mean, first_u), ad.take(user_var, first_u),
                       ad.take(item_mean, first_i), ad.take(item_var, first_i))
    return grouped_info_nce(ad.sigmoid(-dist) * (1.0 / tau), rows, cols)


def wpc_loss(user_mean, user_var, item_mean, item_var, tau: float,
             user_ids=None, item_ids=None) -> ad.Node:
    """In-batch contrastive loss with the bounded score (1/tau) * sigmoid(-W2).

    Passing ``user_ids`` / ``item_ids`` gives the same value while scoring
    only the distinct users against the distinct items.
    """
    args = ad.lift_all(user_mean, user_var, item_mean, item_var)
    return _contrastive(ad.w2_pairwise, *args, tau, user_ids, item_ids)


def kl_contrastive_loss(user_mean, user_var, item_mean, item_var, tau: float,
                        user_ids=None, item_ids=None) -> ad.Node:
    """Same shape as :func:`wpc_loss` with the symmetrised KL in place of W2."""
    args = ad.lift_all(user_mean, user_var, item_mean, item_var)
    return _contrastive(ad.jeffreys_pairwise, *args, tau, user_ids, item_ids)


def l2_regularizer(mean_rows, var_rows, lam: float, batch_size: int) -> ad.Node:
    """lam * (||mean||^2 + ||var||^2) / batch_size over the given layer-0 rows."""
    if lam < 0:
        raise ValueError("regularisation strength must be >= 0")
    m, v = ad.lift_all(mean_rows, var_rows)
    return (ad.sum_squares(m) + ad.sum_squares(v)) * (lam / batch_size)


@dataclass
class LossBreakdown:
    bpr: float
    contrastive: float
    reg: float
    total: float


def total_loss(batch: Batch, mean0: ad.Node, var0: ad.Node, final_mean: ad.Node,
               final_var: ad.Node, num_users: int, *, omega: float, tau: float, reg: float,
               loss: str = "bpr+wpc") -> tuple[ad.Node, LossBreakdown]:
    """BPR + omega * contrastive + regularisation on one batch.

    ``mean0`` / ``var0`` are the layer-0 tables (regularised);
    ``final_mean`` / ``final_var`` are the encoder outputs (scored).
    """
    if loss not in LOSS_MODES:
        raise ValueError(f"unknown loss {loss!r}; expected one of {LOSS_MODES}")
    u = batch.users
    i = batch.positives + num_users
    j = batch.negatives + num_users
    mu_u, var_u = ad.take(final_mean, u), ad.take(final_var, u)
    mu_i, var_i = ad.take(final_mean, i), ad.take(final_var, i)
    mu_j, var_j = ad.take(final_mean, j), ad.take(final_var, j)

    pos = -ad.w2_rows(mu_u, var_u, mu_i, var_i)
    neg = -ad.w2_rows(mu_u, var_u, mu_j, var_j)
    l_bpr = bpr_loss(pos, neg)

    nodes = batch.touched_nodes(num_users)
    l_reg = l2_regularizer(ad.take(mean0, nodes), ad.take(var0, nodes), reg, len(batch))
    total = l_bpr + l_reg

    l_con = 0.0
    if loss != "bpr_only" and omega > 0:
        fn = wpc_loss if loss == "bpr+wpc" else kl_contrastive_loss
        con = fn(mu_u, var_u, mu_i, var_i, tau, user_ids=u, item_ids=i)
        l_con = con.item()
        total = total + con * omega
    return total, LossBreakdown(l_bpr.item(), l_con, l_reg.item(), total.item())
