"""Contrast weight matrices, preference losses, and their analytic gradients.

Conventions, shared by everything below:

* A log-ratio is log pi_policy(y|x) - log pi_ref(y|x) for one response; beta
  times a log-ratio is the implicit reward with the per-prompt partition
  constant dropped (treated as shared across prompts; the z-shift diagnostic
  probes that assumption).
* A weight matrix W is M x N, nonnegative, and row-stochastic: each win row
  distributes one unit of contrast mass over the N lose items.
* The score matrix is s_ij = W_ij * beta * (win_i - lose_j), and the
  cross-prompt loss is the mean of -log sigma(s_ij) over all M*N cells.

All math is float64; log sigma goes through the stable softplus and row
softmaxes subtract the row max.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

METHODS = ("rpo", "dpo", "ipo", "kto")
STRATEGIES = ("embedding", "uniform", "diagonal")

DEFAULT_BETA = 0.1
DEFAULT_TAU_PAIRED = 0.5
DEFAULT_TAU_UNPAIRED = 0.75
DEFAULT_ALPHA = 0.8


def sigmoid(x):
    """Numerically stable logistic function, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def softplus(x):
    """log(1 + exp(x)) without overflow; -log sigma(x) == softplus(-x)."""
    return np.logaddexp(0.0, np.asarray(x, dtype=np.float64))


@dataclass(frozen=True)
class AlignConfig:
    """Method/strategy selection and loss hyperparameters.

    tau=None resolves to the paired or unpaired default at use time (0.5
    paired, 0.75 unpaired); every other field has one global default.
    """

    method: str = "rpo"
    strategy: str = "embedding"
    beta: float = DEFAULT_BETA
    tau: Optional[float] = None
    alpha: float = DEFAULT_ALPHA
    kto_weight_desirable: float = 1.0
    kto_weight_undesirable: float = 1.0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.beta <= 0:
            raise ValueError("beta must be > 0")
        if self.tau is not None and self.tau <= 0:
            raise ValueError("tau must be > 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must be in [0, 1]")
        if self.kto_weight_desirable <= 0 or self.kto_weight_undesirable <= 0:
            raise ValueError("kto weights must be > 0")

    def resolved_tau(self, paired: bool) -> float:
        if self.tau is not None:
            return self.tau
        return DEFAULT_TAU_PAIRED if paired else DEFAULT_TAU_UNPAIRED


@dataclass(frozen=True)
class LogRatios:
    """Per-item policy-minus-reference log probabilities for a batch."""

    wins: np.ndarray
    loses: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "wins", np.asarray(self.wins, dtype=np.float64))
        object.__setattr__(self, "loses", np.asarray(self.loses, dtype=np.float64))
        if self.wins.ndim != 1 or self.loses.ndim != 1:
            raise ValueError("log-ratios must be flat vectors")
        if not (np.all(np.isfinite(self.wins)) and np.all(np.isfinite(self.loses))):
            raise ValueError("log-ratios must be finite")

    @property
    def num_wins(self) -> int:
        return self.wins.size

    @property
    def num_loses(self) -> int:
        return self.loses.size


def _require_paired(lr: LogRatios) -> None:
    if lr.num_wins != lr.num_loses:
        raise ValueError(
            f"paired loss needs equal win/lose counts, got {lr.num_wins} vs {lr.num_loses}"
        )


def weights_from_distances(distances: np.ndarray, tau: float) -> np.ndarray:
    """Row-softmax of -d/tau with max subtraction; rows sum to 1.

    Row-shift invariant: adding a constant to every distance in one row
    leaves that row's weights unchanged.
    """
    if tau <= 0:
        raise ValueError("tau must be > 0")
    dist = np.atleast_2d(np.asarray(distances, dtype=np.float64))
    logits = -dist / tau
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=1, keepdims=True)


def weight_embedding(
    win_embs: Sequence[np.ndarray], lose_embs: Sequence[np.ndarray], tau: float
) -> np.ndarray:
    """Contrast weights from cosine distances between win and lose prompt
    embeddings; similar prompts get more weight within each row."""
    win = np.atleast_2d(np.asarray(win_embs, dtype=np.float64))
    lose = np.atleast_2d(np.asarray(lose_embs, dtype=np.float64))
    if win.shape[1] != lose.shape[1]:
        raise ValueError("embedding dims differ between win and lose prompts")
    return weights_from_distances(1.0 - win @ lose.T, tau)


def weight_uniform(m: int, n: int) -> np.ndarray:
    """Every cell 1/N: all cross-prompt contrasts count equally."""
    if m < 1 or n < 1:
        raise ValueError("matrix dims must be >= 1")
    return np.full((m, n), 1.0 / n, dtype=np.float64)


def weight_diagonal(m: int, alpha: float) -> np.ndarray:
    """Same-prompt cells get alpha, cross-prompt cells split 1-alpha evenly.

    Paired data only (square matrix). For M=1 there are no off-diagonal
    cells, so alpha is ignored and the matrix is [[1]].
    """
    if m < 1:
        raise ValueError("matrix dims must be >= 1")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must be in [0, 1]")
    if m == 1:
        return np.ones((1, 1), dtype=np.float64)
    w = np.full((m, m), (1.0 - alpha) / (m - 1), dtype=np.float64)
    np.fill_diagonal(w, alpha)
    return w


def score_matrix(lr: LogRatios, weights: np.ndarray, beta: float) -> np.ndarray:
    """s_ij = W_ij * beta * (win_i - lose_j)."""
    if beta <= 0:
        raise ValueError("beta must be > 0")
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (lr.num_wins, lr.num_loses):
        raise ValueError(
            f"weight matrix shape {weights.shape} does not match "
            f"({lr.num_wins}, {lr.num_loses})"
        )
    return weights * beta * (lr.wins[:, None] - lr.loses[None, :])


def rpo_loss(scores: np.ndarray) -> float:
    """Mean of -log sigma(s_ij) over all cells of the score matrix."""
    scores = np.asarray(scores, dtype=np.float64)
    return float(softplus(-scores).mean())


def rpo_grad_logratios(
    lr: LogRatios, weights: np.ndarray, beta: float
) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of rpo_loss(score_matrix(lr, W, beta)) w.r.t. the log-ratios.

    W is constant: prompt embeddings do not depend on model parameters.
    """
    s = score_matrix(lr, weights, beta)
    g = np.asarray(weights, dtype=np.float64) * sigmoid(-s) * beta / s.size
    return -g.sum(axis=1), g.sum(axis=0)


def dpo_loss(lr: LogRatios, beta: float) -> float:
    """Mean of -log sigma(beta * (win_i - lose_i)) over same-index pairs."""
    _require_paired(lr)
    return float(softplus(-beta * (lr.wins - lr.loses)).mean())


def dpo_grad_logratios(lr: LogRatios, beta: float) -> tuple[np.ndarray, np.ndarray]:
    _require_paired(lr)
    g = beta * sigmoid(-beta * (lr.wins - lr.loses)) / lr.num_wins
    return -g, g


def ipo_loss(lr: LogRatios, beta: float) -> float:
    """Mean of ((win_i - lose_i) - 1/(2 beta))^2 over same-index pairs."""
    _require_paired(lr)
    err = (lr.wins - lr.loses) - 1.0 / (2.0 * beta)
    return float(np.mean(err**2))


def ipo_grad_logratios(lr: LogRatios, beta: float) -> tuple[np.ndarray, np.ndarray]:
    _require_paired(lr)
    g = 2.0 * ((lr.wins - lr.loses) - 1.0 / (2.0 * beta)) / lr.num_wins
    return g, -g


def kto_reference_point(log_ratios: np.ndarray) -> float:
    """Batch estimate of the reference shift: the KL surrogate, clamped at 0.

    Treated as a constant in the gradient (no gradient flows through it).
    """
    return max(0.0, float(np.mean(log_ratios)))


def kto_loss(
    log_ratios: np.ndarray,
    desirable: np.ndarray,
    beta: float,
    weights: tuple[float, float] = (1.0, 1.0),
    ref_point: Optional[float] = None,
) -> float:
    """Prospect-theory utility loss over independently labeled items.

    Per item: g = beta * lr - beta * ref_point; h = sigma(g) for desirable
    items, sigma(-g) otherwise; the loss is the mean of w(y) * (1 - h) with
    w(y) picked from ``weights`` by label. ``ref_point`` defaults to the
    clamped batch mean of the log-ratios and is held constant.
    """
    log_ratios = np.asarray(log_ratios, dtype=np.float64)
    desirable = np.asarray(desirable, dtype=bool)
    if log_ratios.size < 1:
        raise ValueError("kto needs a non-empty batch")
    if log_ratios.shape != desirable.shape:
        raise ValueError("log_ratios and desirable must share one shape")
    if ref_point is None:
        ref_point = kto_reference_point(log_ratios)
    g = beta * log_ratios - beta * ref_point
    h = np.where(desirable, sigmoid(g), sigmoid(-g))
    w = np.where(desirable, weights[0], weights[1])
    return float(np.mean(w * (1.0 - h)))


def kto_grad_logratios(
    log_ratios: np.ndarray,
    desirable: np.ndarray,
    beta: float,
    weights: tuple[float, float] = (1.0, 1.0),
    ref_point: Optional[float] = None,
) -> np.ndarray:
    """Gradient of kto_loss w.r.t. each log-ratio, ref_point held constant."""
    log_ratios = np.asarray(log_ratios, dtype=np.float64)
    desirable = np.asarray(desirable, dtype=bool)
    if ref_point is None:
        ref_point = kto_reference_point(log_ratios)
    g = beta * log_ratios - beta * ref_point
    sig = sigmoid(g)
    dh_dlr = beta * sig * (1.0 - sig)  # sigma'(g) == sigma'(-g)
    w = np.where(desirable, weights[0], weights[1])
    sign = np.where(desirable, -1.0, 1.0)
    return sign * w * dh_dlr / log_ratios.size


def rpo_loss_zshift(
    scores: np.ndarray,
    weights: np.ndarray,
    z_wins: np.ndarray,
    z_loses: np.ndarray,
    beta: float,
) -> float:
    """Diagnostic loss with explicit per-prompt partition shifts.

    Mean of log(1 + exp(-s_ij - beta * W_ij * (z_win_i - z_lose_j))). Equals
    rpo_loss when the shifts agree; never used in training.
    """
    scores = np.asarray(scores, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    z_wins = np.asarray(z_wins, dtype=np.float64)
    z_loses = np.asarray(z_loses, dtype=np.float64)
    if weights.shape != scores.shape:
        raise ValueError("weights and scores must share one shape")
    if z_wins.shape != (scores.shape[0],) or z_loses.shape != (scores.shape[1],):
        raise ValueError("shift vectors must match the score matrix dims")
    shift = beta * weights * (z_wins[:, None] - z_loses[None, :])
    return float(softplus(-(scores + shift)).mean())
