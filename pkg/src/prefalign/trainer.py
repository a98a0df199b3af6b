"""Training loops: supervised warm start, preference alignment, gradcheck.

One optimizer (RMSProp), one update per batch, float64 end to end. The
alignment loop computes log-ratios against a frozen reference copy of the
policy, turns them into per-item coefficients via the analytic loss
gradients, and back-propagates each coefficient through the policy in a
second pass.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from . import losses
from .embed import EmbeddingProvider, HashedBowProvider
from .losses import AlignConfig, LogRatios
from .policy import GradBuffer, ModelParams, accumulate_logprob_grad, logprob_response
from .prefdata import (
    PairedBatch,
    PreferencePair,
    UnpairedBatch,
    UnpairedExample,
    decompose_to_unpaired,
    make_paired_batches,
    make_unpaired_batches,
)
from .rng import derive_seed, shuffled

# Reference learning rate for a full-size policy; selectable but far too
# small to move the ~1e5-parameter desk model in one epoch.
FULL_SCALE_LR = 5e-7

DEFAULT_DESK_LR = 1e-3


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and schedule settings shared by SFT and alignment."""

    learning_rate: float = DEFAULT_DESK_LR
    epochs: int = 1
    batch_size: int = 64
    seed: int = 0
    rho: float = 0.99
    eps: float = 1e-8
    grad_clip: Optional[float] = None

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.rho < 1.0:
            raise ValueError("rho must be in [0, 1)")
        if self.eps < 0:
            raise ValueError("eps must be >= 0")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError("grad_clip must be > 0 when set")


@dataclass
class TrainReport:
    """Config echo plus loss traces and final margins.

    wall_seconds is the only clock-bound field; serialized reports omit it
    so identical runs write identical bytes.
    """

    method: str
    strategy: Optional[str]
    learning_rate: float
    epochs: int
    batch_size: int
    seed: int
    beta: Optional[float] = None
    tau: Optional[float] = None
    alpha: Optional[float] = None
    num_steps: int = 0
    losses: list = field(default_factory=list)
    epoch_mean_losses: list = field(default_factory=list)
    final_loss: Optional[float] = None
    margin_chosen: Optional[float] = None
    margin_rejected: Optional[float] = None
    warnings: list = field(default_factory=list)
    step_inputs: Optional[list] = None
    wall_seconds: Optional[float] = None


def new_rmsprop_state(params: ModelParams) -> list:
    return [np.zeros_like(a) for a in params.arrays()]


def clip_gradients(grads: GradBuffer, max_norm: float) -> None:
    """Scale all buffers so their joint L2 norm is at most max_norm."""
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.arrays()))
    if total > max_norm:
        grads.scale(max_norm / total)


def rmsprop_step(
    params: ModelParams,
    grads: GradBuffer,
    state: list,
    lr: float,
    rho: float,
    eps: float,
) -> None:
    """s <- rho s + (1-rho) g^2; theta <- theta - lr g / (sqrt(s) + eps).

    With eps == 0 a parameter whose gradient has always been zero hits 0/0;
    its update is defined as zero (the g -> 0 limit).
    """
    for p, g, s in zip(params.arrays(), grads.arrays(), state):
        s *= rho
        s += (1.0 - rho) * g * g
        denom = np.sqrt(s) + eps
        step = np.zeros_like(g)
        np.divide(g, denom, out=step, where=denom > 0.0)
        p -= lr * step


def train_sft(
    params: ModelParams,
    pairs: Sequence[PreferencePair],
    config: TrainConfig,
) -> TrainReport:
    """Maximize log-likelihood of the chosen responses, in place."""
    if not pairs:
        raise ValueError("cannot train on an empty dataset")
    report = TrainReport(
        method="sft",
        strategy=None,
        learning_rate=config.learning_rate,
        epochs=config.epochs,
        batch_size=config.batch_size,
        seed=config.seed,
    )
    started = time.perf_counter()
    state = new_rmsprop_state(params)
    for epoch in range(config.epochs):
        epoch_start = report.num_steps
        order = shuffled(list(pairs), derive_seed(config.seed, epoch))
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            buf = GradBuffer.zeros_like(params)
            total = 0.0
            coeff = -1.0 / len(batch)  # d(-mean logp)/d(logp_i)
            for pair in batch:
                total += accumulate_logprob_grad(
                    params, pair.prompt, pair.chosen, coeff, buf
                )
            loss = -total / len(batch)
            if not math.isfinite(loss):
                raise RuntimeError(f"non-finite loss at step {report.num_steps}")
            if config.grad_clip is not None:
                clip_gradients(buf, config.grad_clip)
            rmsprop_step(params, buf, state, config.learning_rate, config.rho, config.eps)
            report.losses.append(loss)
            report.num_steps += 1
        report.epoch_mean_losses.append(
            float(np.mean(report.losses[epoch_start:]))
        )
    report.final_loss = report.losses[-1] if report.losses else None
    report.wall_seconds = time.perf_counter() - started
    return report


def _logprob_cached(cache: dict, params: ModelParams, prompt: str, response: str) -> float:
    key = (prompt, response)
    if key not in cache:
        cache[key] = logprob_response(params, prompt, response)
    return cache[key]


def _weight_matrix(
    align: AlignConfig,
    win_prompts: Sequence[str],
    lose_prompts: Sequence[str],
    paired: bool,
    provider: Optional[EmbeddingProvider],
) -> np.ndarray:
    m, n = len(win_prompts), len(lose_prompts)
    if align.strategy == "uniform":
        return losses.weight_uniform(m, n)
    if align.strategy == "diagonal":
        if not paired:
            raise ValueError("diagonal weighting needs paired batches")
        return losses.weight_diagonal(m, align.alpha)
    embs_w = provider.embed_many(list(win_prompts))
    embs_l = provider.embed_many(list(lose_prompts))
    return losses.weight_embedding(embs_w, embs_l, align.resolved_tau(paired))


def train_align(
    params: ModelParams,
    data: Sequence[Union[PreferencePair, UnpairedExample]],
    align: AlignConfig,
    config: TrainConfig,
    provider: Optional[EmbeddingProvider] = None,
    reference: Optional[ModelParams] = None,
    log_steps: bool = False,
) -> TrainReport:
    """Run one preference-alignment method over the data, in place.

    dpo and ipo need paired data; kto accepts either and decomposes pairs
    itself; rpo accepts either except that diagonal weighting stays paired.
    The reference defaults to a frozen copy of the incoming parameters.
    log_steps records each step's log-ratios and weight matrix in the report
    so losses can be recomputed offline.
    """
    if not data:
        raise ValueError("cannot train on an empty dataset")
    paired_in = isinstance(data[0], PreferencePair)
    if any(isinstance(item, PreferencePair) != paired_in for item in data):
        raise ValueError("data mixes paired and unpaired items")
    if align.method in ("dpo", "ipo") and not paired_in:
        raise ValueError(f"{align.method} needs paired data")

    if reference is None:
        reference = params.clone(frozen=True)
    if align.method == "rpo" and align.strategy == "embedding" and provider is None:
        provider = HashedBowProvider()

    use_unpaired = align.method == "kto" or not paired_in
    if align.method == "kto" and paired_in:
        data = decompose_to_unpaired(list(data), derive_seed(config.seed, 97))

    report = TrainReport(
        method=align.method,
        strategy=align.strategy if align.method == "rpo" else None,
        learning_rate=config.learning_rate,
        epochs=config.epochs,
        batch_size=config.batch_size,
        seed=config.seed,
        beta=align.beta,
        tau=align.resolved_tau(not use_unpaired) if align.method == "rpo" else None,
        alpha=align.alpha if align.strategy == "diagonal" else None,
        step_inputs=[] if log_steps else None,
    )

    if provider is not None and align.method == "rpo" and align.strategy == "embedding":
        prompts = sorted({item.prompt for item in data})
        provider.embed_many(prompts)  # fail fast and warm the cache

    started = time.perf_counter()
    ref_cache: dict = {}
    state = new_rmsprop_state(params)
    for epoch in range(config.epochs):
        epoch_start = report.num_steps
        epoch_seed = derive_seed(config.seed, epoch)
        if use_unpaired:
            batches = make_unpaired_batches(list(data), config.batch_size, epoch_seed)
        else:
            batches, flags = make_paired_batches(list(data), config.batch_size, epoch_seed)
            report.warnings.extend(flags)
        for batch in batches:
            if align.method == "kto":
                loss = _kto_step(
                    params, reference, batch, align, config, state, ref_cache,
                    report.step_inputs,
                )
            else:
                loss = _contrast_step(
                    params, reference, batch, align, config, state, ref_cache,
                    provider, report.step_inputs,
                )
            if not math.isfinite(loss):
                raise RuntimeError(f"non-finite loss at step {report.num_steps}")
            report.losses.append(loss)
            report.num_steps += 1
        report.epoch_mean_losses.append(float(np.mean(report.losses[epoch_start:])))
    report.final_loss = report.losses[-1] if report.losses else None

    margin_w, margin_l = _final_margins(params, reference, data, align.beta, ref_cache)
    report.margin_chosen = margin_w
    report.margin_rejected = margin_l
    report.wall_seconds = time.perf_counter() - started
    return report


def _final_margins(
    params: ModelParams,
    reference: ModelParams,
    data,
    beta: float,
    ref_cache: dict,
) -> tuple[float, float]:
    """Mean beta-scaled log-ratio of the win and lose sides after training."""
    if isinstance(data[0], PreferencePair):
        win_items = [(p.prompt, p.chosen) for p in data]
        lose_items = [(p.prompt, p.rejected) for p in data]
    else:
        win_items = [(e.prompt, e.response) for e in data if e.desirable]
        lose_items = [(e.prompt, e.response) for e in data if not e.desirable]
    margins = []
    for items in (win_items, lose_items):
        total = 0.0
        for prompt, response in items:
            total += logprob_response(params, prompt, response) - _logprob_cached(
                ref_cache, reference, prompt, response
            )
        margins.append(beta * total / len(items) if items else 0.0)
    return margins[0], margins[1]


def _contrast_step(
    params: ModelParams,
    reference: ModelParams,
    batch: Union[PairedBatch, UnpairedBatch],
    align: AlignConfig,
    config: TrainConfig,
    state: list,
    ref_cache: dict,
    provider: Optional[EmbeddingProvider],
    step_log: Optional[list] = None,
) -> float:
    if isinstance(batch, PairedBatch):
        wins = list(zip(batch.prompts, batch.chosen))
        loses = list(zip(batch.prompts, batch.rejected))
        paired = True
    else:
        wins = list(zip(batch.win_prompts, batch.win_responses))
        loses = list(zip(batch.lose_prompts, batch.lose_responses))
        paired = False

    lr = LogRatios(
        wins=[
            logprob_response(params, p, r) - _logprob_cached(ref_cache, reference, p, r)
            for p, r in wins
        ],
        loses=[
            logprob_response(params, p, r) - _logprob_cached(ref_cache, reference, p, r)
            for p, r in loses
        ],
    )

    weights = None
    if align.method == "rpo":
        weights = _weight_matrix(
            align, [p for p, _ in wins], [p for p, _ in loses], paired, provider
        )
        scores = losses.score_matrix(lr, weights, align.beta)
        loss = losses.rpo_loss(scores)
        g_win, g_lose = losses.rpo_grad_logratios(lr, weights, align.beta)
    elif align.method == "dpo":
        loss = losses.dpo_loss(lr, align.beta)
        g_win, g_lose = losses.dpo_grad_logratios(lr, align.beta)
    elif align.method == "ipo":
        loss = losses.ipo_loss(lr, align.beta)
        g_win, g_lose = losses.ipo_grad_logratios(lr, align.beta)
    else:
        raise ValueError(f"unexpected method {align.method!r}")

    if step_log is not None:
        step_log.append(
            {
                "wins": lr.wins.tolist(),
                "loses": lr.loses.tolist(),
                "weights": weights.tolist() if weights is not None else None,
                "loss": loss,
            }
        )

    buf = GradBuffer.zeros_like(params)
    for (prompt, response), coeff in zip(wins, g_win):
        accumulate_logprob_grad(params, prompt, response, float(coeff), buf)
    for (prompt, response), coeff in zip(loses, g_lose):
        accumulate_logprob_grad(params, prompt, response, float(coeff), buf)
    if config.grad_clip is not None:
        clip_gradients(buf, config.grad_clip)
    rmsprop_step(params, buf, state, config.learning_rate, config.rho, config.eps)
    return loss


def _kto_step(
    params: ModelParams,
    reference: ModelParams,
    batch: UnpairedBatch,
    align: AlignConfig,
    config: TrainConfig,
    state: list,
    ref_cache: dict,
    step_log: Optional[list] = None,
) -> float:
    items = [
        (p, r, True) for p, r in zip(batch.win_prompts, batch.win_responses)
    ] + [(p, r, False) for p, r in zip(batch.lose_prompts, batch.lose_responses)]
    log_ratios = np.array(
        [
            logprob_response(params, p, r) - _logprob_cached(ref_cache, reference, p, r)
            for p, r, _ in items
        ]
    )
    desirable = np.array([d for _, _, d in items], dtype=bool)
    kto_w = (align.kto_weight_desirable, align.kto_weight_undesirable)
    loss = losses.kto_loss(log_ratios, desirable, align.beta, kto_w)
    grads = losses.kto_grad_logratios(log_ratios, desirable, align.beta, kto_w)

    if step_log is not None:
        step_log.append(
            {
                "log_ratios": log_ratios.tolist(),
                "desirable": desirable.tolist(),
                "loss": loss,
            }
        )

    buf = GradBuffer.zeros_like(params)
    for (prompt, response, _), coeff in zip(items, grads):
        accumulate_logprob_grad(params, prompt, response, float(coeff), buf)
    if config.grad_clip is not None:
        clip_gradients(buf, config.grad_clip)
    rmsprop_step(params, buf, state, config.learning_rate, config.rho, config.eps)
    return loss


@dataclass
class GradcheckReport:
    method: str
    strategy: Optional[str]
    step: float
    tolerance: float
    num_parameters: int
    max_rel_err: float
    mean_rel_err: float
    worst_array: str
    per_array_max: dict
    passed: bool


def gradcheck(
    params: ModelParams,
    pairs: Sequence[PreferencePair],
    align: AlignConfig,
    step: float = 1e-5,
    tolerance: float = 1e-5,
    provider: Optional[EmbeddingProvider] = None,
) -> GradcheckReport:
    """Compare analytic and central-difference gradients over every parameter.

    The contrast weights, the reference log-probabilities, and the kto
    reference point are all held at their unperturbed values while finite
    differencing, matching their treatment as constants in the analytic
    gradient. Relative error uses a unit floor:
    |a - n| / max(|a|, |n|, 1).
    """
    if not pairs:
        raise ValueError("gradcheck needs at least one pair")
    reference = params.clone(frozen=True)
    work = params.clone()
    if align.method == "rpo" and align.strategy == "embedding" and provider is None:
        provider = HashedBowProvider()

    wins = [(p.prompt, p.chosen) for p in pairs]
    loses = [(p.prompt, p.rejected) for p in pairs]
    ref_w = np.array([logprob_response(reference, p, r) for p, r in wins])
    ref_l = np.array([logprob_response(reference, p, r) for p, r in loses])

    weights = None
    if align.method == "rpo":
        weights = _weight_matrix(
            align, [p for p, _ in wins], [p for p, _ in loses], True, provider
        )

    def logratios_at(theta: ModelParams) -> LogRatios:
        return LogRatios(
            wins=[logprob_response(theta, p, r) for p, r in wins] - ref_w,
            loses=[logprob_response(theta, p, r) for p, r in loses] - ref_l,
        )

    lr0 = logratios_at(work)
    kto_w = (align.kto_weight_desirable, align.kto_weight_undesirable)
    if align.method == "kto":
        flat0 = np.concatenate([lr0.wins, lr0.loses])
        ref_point = losses.kto_reference_point(flat0)

    def loss_at(theta: ModelParams) -> float:
        lr = logratios_at(theta)
        if align.method == "rpo":
            return losses.rpo_loss(losses.score_matrix(lr, weights, align.beta))
        if align.method == "dpo":
            return losses.dpo_loss(lr, align.beta)
        if align.method == "ipo":
            return losses.ipo_loss(lr, align.beta)
        flat = np.concatenate([lr.wins, lr.loses])
        desirable = np.array([True] * len(wins) + [False] * len(loses))
        return losses.kto_loss(flat, desirable, align.beta, kto_w, ref_point=ref_point)

    if align.method == "rpo":
        g_win, g_lose = losses.rpo_grad_logratios(lr0, weights, align.beta)
    elif align.method == "dpo":
        g_win, g_lose = losses.dpo_grad_logratios(lr0, align.beta)
    elif align.method == "ipo":
        g_win, g_lose = losses.ipo_grad_logratios(lr0, align.beta)
    else:
        desirable = np.array([True] * len(wins) + [False] * len(loses))
        g = losses.kto_grad_logratios(flat0, desirable, align.beta, kto_w, ref_point=ref_point)
        g_win, g_lose = g[: len(wins)], g[len(wins) :]

    analytic = GradBuffer.zeros_like(work)
    for (prompt, response), coeff in zip(wins, g_win):
        accumulate_logprob_grad(work, prompt, response, float(coeff), analytic)
    for (prompt, response), coeff in zip(loses, g_lose):
        accumulate_logprob_grad(work, prompt, response, float(coeff), analytic)

    names = ("emb", "w1", "b1", "w2", "b2")
    per_array_max = {}
    max_err = 0.0
    err_sum = 0.0
    count = 0
    for name, arr, grad in zip(names, work.arrays(), analytic.arrays()):
        worst = 0.0
        flat_a = arr.reshape(-1)
        flat_g = grad.reshape(-1)
        for i in range(flat_a.size):
            old = flat_a[i]
            flat_a[i] = old + step
            hi = loss_at(work)
            flat_a[i] = old - step
            lo = loss_at(work)
            flat_a[i] = old
            numeric = (hi - lo) / (2.0 * step)
            a = flat_g[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1.0)
            worst = max(worst, err)
            err_sum += err
            count += 1
        per_array_max[name] = worst
        max_err = max(max_err, worst)
    worst_array = max(per_array_max, key=per_array_max.get)
    return GradcheckReport(
        method=align.method,
        strategy=align.strategy if align.method == "rpo" else None,
        step=step,
        tolerance=tolerance,
        num_parameters=work.num_parameters,
        max_rel_err=max_err,
        mean_rel_err=err_sum / count,
        worst_array=worst_array,
        per_array_max=per_array_max,
        passed=max_err < tolerance,
    )
