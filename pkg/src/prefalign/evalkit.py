"""Win-rate and reward-margin evaluation against a reward oracle, plus sweeps.

Evaluation decodes one response per prompt from the candidate policy and
scores it against a fixed baseline response for the same prompt. Verdicts
are strict: win only when the candidate's reward is strictly greater, tie
only on exact equality. Ties are reported separately, never split, because
a deterministic numeric judge produces real ties that a forced-choice judge
would hide.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .losses import AlignConfig
from .policy import ModelParams, greedy_decode, logprob_response
from .prefdata import PreferencePair
from .synth import JudgeOracle
from .trainer import TrainConfig, train_align

DEFAULT_MAX_NEW = 24


@dataclass
class EvalReport:
    """Aggregate verdict fractions plus per-prompt records."""

    win_rate: float
    ties: float
    losses: float
    mean_candidate_reward: float
    mean_baseline_reward: float
    num_prompts: int
    temperature: float
    max_new: int
    records: list = field(default_factory=list)


def decode_responses(
    params: ModelParams,
    prompts: Sequence[str],
    max_new: int = DEFAULT_MAX_NEW,
    temperature: float = 0.0,
    seed: int = 0,
) -> dict[str, str]:
    """One decoded response per unique prompt, keyed by prompt."""
    out: dict[str, str] = {}
    for i, prompt in enumerate(prompts):
        if prompt not in out:
            out[prompt] = greedy_decode(params, prompt, max_new, temperature, seed + i)
    return out


def chosen_response_map(pairs: Sequence[PreferencePair]) -> dict[str, str]:
    """Dataset chosen responses as a baseline map (first occurrence wins)."""
    out: dict[str, str] = {}
    for pair in pairs:
        out.setdefault(pair.prompt, pair.chosen)
    return out


def win_rate(
    policy: ModelParams,
    baseline_responses: Mapping[str, str],
    prompts: Sequence[str],
    judge: JudgeOracle,
    temperature: float = 0.0,
    max_new: int = DEFAULT_MAX_NEW,
    seed: int = 0,
    keep_records: bool = True,
) -> EvalReport:
    """Strict-comparison win rate of the policy's decodes over the baselines."""
    if not prompts:
        raise ValueError("evaluation needs at least one prompt")
    missing = [p for p in prompts if p not in baseline_responses]
    if missing:
        raise ValueError(f"no baseline response for prompt: {missing[0]!r}")
    wins = ties = 0
    cand_rewards, base_rewards = [], []
    records = []
    for i, prompt in enumerate(prompts):
        candidate = greedy_decode(policy, prompt, max_new, temperature, seed + i)
        baseline = baseline_responses[prompt]
        r_cand = judge.reward(prompt, candidate)
        r_base = judge.reward(prompt, baseline)
        cand_rewards.append(r_cand)
        base_rewards.append(r_base)
        if r_cand > r_base:
            verdict = "win"
            wins += 1
        elif r_cand == r_base:
            verdict = "tie"
            ties += 1
        else:
            verdict = "loss"
        if keep_records:
            records.append(
                {
                    "prompt": prompt,
                    "candidate_response": candidate,
                    "baseline_response": baseline,
                    "candidate_reward": r_cand,
                    "baseline_reward": r_base,
                    "verdict": verdict,
                }
            )
    n = len(prompts)
    return EvalReport(
        win_rate=wins / n,
        ties=ties / n,
        losses=(n - wins - ties) / n,
        mean_candidate_reward=float(np.mean(cand_rewards)),
        mean_baseline_reward=float(np.mean(base_rewards)),
        num_prompts=n,
        temperature=temperature,
        max_new=max_new,
        records=records,
    )


def reward_margin(
    policy: ModelParams,
    reference: ModelParams,
    pairs: Sequence[PreferencePair],
    beta: float,
) -> tuple[float, float]:
    """(mean beta-scaled chosen log-ratio, mean beta-scaled rejected log-ratio)."""
    if not pairs:
        raise ValueError("reward_margin needs at least one pair")
    chosen = []
    rejected = []
    for pair in pairs:
        chosen.append(
            logprob_response(policy, pair.prompt, pair.chosen)
            - logprob_response(reference, pair.prompt, pair.chosen)
        )
        rejected.append(
            logprob_response(policy, pair.prompt, pair.rejected)
            - logprob_response(reference, pair.prompt, pair.rejected)
        )
    return beta * float(np.mean(chosen)), beta * float(np.mean(rejected))


SWEEP_AXES = ("tau", "beta", "batch_size", "temperature")


def sweep(
    axis: str,
    values: Sequence,
    base_params: ModelParams,
    data,
    prompts: Sequence[str],
    judge: JudgeOracle,
    align: AlignConfig,
    train: TrainConfig,
    provider=None,
    max_new: int = DEFAULT_MAX_NEW,
    eval_seed: int = 0,
) -> list[dict]:
    """Train and evaluate once per value of one axis, all else fixed.

    Every cell starts from a fresh copy of base_params and is judged against
    the untouched base's temperature-0 decodes. A failing cell records its
    error string and the sweep continues.
    """
    if axis not in SWEEP_AXES:
        raise ValueError(f"axis must be one of {SWEEP_AXES}, got {axis!r}")
    if not values:
        raise ValueError("sweep needs at least one value")
    baseline = decode_responses(base_params, prompts, max_new, 0.0, eval_seed)
    rows = []
    for value in values:
        cell_align, cell_train, temperature = align, train, 0.0
        if axis == "tau":
            cell_align = dataclasses.replace(align, tau=float(value))
        elif axis == "beta":
            cell_align = dataclasses.replace(align, beta=float(value))
        elif axis == "batch_size":
            cell_train = dataclasses.replace(train, batch_size=int(value))
        else:
            temperature = float(value)
        row = {
            "axis": axis,
            "value": value,
            "method": cell_align.method,
            "strategy": cell_align.strategy if cell_align.method == "rpo" else None,
        }
        try:
            params = base_params.clone()
            report = train_align(params, data, cell_align, cell_train, provider=provider)
            ev = win_rate(
                params,
                baseline,
                prompts,
                judge,
                temperature=temperature,
                max_new=max_new,
                seed=eval_seed,
                keep_records=False,
            )
            row.update(
                win_rate=ev.win_rate,
                ties=ev.ties,
                final_loss=report.final_loss,
                error=None,
            )
        except Exception as exc:  # keep sweeping past bad cells
            row.update(win_rate=None, ties=None, final_loss=None, error=f"{type(exc).__name__}: {exc}")
        rows.append(row)
    return rows
