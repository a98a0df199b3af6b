"""Synthetic clustered preference data with a known ground-truth reward.

Prompts are template strings built from disjoint per-cluster content-word
sets, so any bag-of-words embedder places same-cluster prompts close together.
Each prompt gets responses assembled from per-cluster "good" and "bad" tokens
plus shared neutral filler; the generating reward scores token quality minus a
byte-length penalty, and chosen/rejected labels are drawn from the preference
probability sigma(r_a - r_b), so labels carry realistic noise. The generating
reward doubles as the evaluation judge.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Union

from .prefdata import PreferencePair
from .rng import SplitMix64, derive_seed, shuffled

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"

_NUM_CONTENT = 3
_NUM_GOOD = 4
_NUM_BAD = 2
_NUM_NEUTRAL = 8

GOOD_BONUS = 1.0
BAD_PENALTY = 1.0
BYTE_PENALTY = 0.02


def bt_probability(reward_w: float, reward_l: float) -> float:
    """Probability that the first response is preferred: sigma(r_w - r_l)."""
    if not (math.isfinite(reward_w) and math.isfinite(reward_l)):
        raise ValueError("rewards must be finite")
    gap = reward_w - reward_l
    if gap >= 0:
        return 1.0 / (1.0 + math.exp(-gap))
    e = math.exp(gap)
    return e / (1.0 + e)


def sample_bt_winner(reward_a: float, reward_b: float, rng: SplitMix64) -> bool:
    """Draw one preference label; True means the first response wins."""
    return rng.random() < bt_probability(reward_a, reward_b)


@dataclass(frozen=True)
class SynthConfig:
    num_clusters: int = 20
    prompts_per_cluster: int = 100
    responses_per_prompt: int = 2
    reward_seed: int = 0
    sample_seed: int = 0
    vocab: str = "cvcv"  # 4-letter consonant-vowel words from a fixed alphabet

    def __post_init__(self):
        if self.num_clusters < 2:
            raise ValueError("num_clusters must be >= 2")
        if self.prompts_per_cluster < 1:
            raise ValueError("prompts_per_cluster must be >= 1")
        if self.responses_per_prompt < 2:
            raise ValueError("responses_per_prompt must be >= 2")


@dataclass(frozen=True)
class JudgeOracle:
    """Deterministic ground-truth reward r*(response | prompt).

    The prompt's cluster is identified from its content words; the reward then
    credits good tokens, penalizes bad tokens, and charges per byte of length.
    Total over arbitrary text, including raw model decodes.
    """

    cluster_words: tuple[tuple[str, ...], ...]
    good_tokens: tuple[tuple[str, ...], ...]
    bad_tokens: tuple[tuple[str, ...], ...]
    good_bonus: float = GOOD_BONUS
    bad_penalty: float = BAD_PENALTY
    byte_penalty: float = BYTE_PENALTY

    def cluster_of(self, prompt: str) -> int | None:
        """Cluster with the most content-word hits; ties to the lowest id."""
        tokens = prompt.lower().split()
        best, best_hits = None, 0
        for cid, words in enumerate(self.cluster_words):
            hits = sum(tokens.count(w) for w in words)
            if hits > best_hits:
                best, best_hits = cid, hits
        return best

    def reward(self, prompt: str, response: str) -> float:
        cid = self.cluster_of(prompt)
        r = -self.byte_penalty * len(response.encode("utf-8", "surrogateescape"))
        if cid is not None:
            tokens = response.lower().split()
            r += self.good_bonus * sum(tokens.count(w) for w in self.good_tokens[cid])
            r -= self.bad_penalty * sum(tokens.count(w) for w in self.bad_tokens[cid])
        return r

    def save(self, path: Union[str, Path]) -> None:
        payload = {
            "cluster_words": [list(w) for w in self.cluster_words],
            "good_tokens": [list(w) for w in self.good_tokens],
            "bad_tokens": [list(w) for w in self.bad_tokens],
            "good_bonus": self.good_bonus,
            "bad_penalty": self.bad_penalty,
            "byte_penalty": self.byte_penalty,
        }
        Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "JudgeOracle":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(
            cluster_words=tuple(tuple(w) for w in payload["cluster_words"]),
            good_tokens=tuple(tuple(w) for w in payload["good_tokens"]),
            bad_tokens=tuple(tuple(w) for w in payload["bad_tokens"]),
            good_bonus=payload["good_bonus"],
            bad_penalty=payload["bad_penalty"],
            byte_penalty=payload["byte_penalty"],
        )


def _word_pool() -> list[str]:
    """All 4-letter cv+cv words over the fixed alphabet, in lexical order."""
    syllables = [c + v for c in _CONSONANTS for v in _VOWELS]
    return [a + b for a in syllables for b in syllables]


def _draw_response(
    rng: SplitMix64, good: tuple[str, ...], bad: tuple[str, ...], neutral: list[str]
) -> str:
    n_tokens = 2 + rng.randrange(2)
    tokens = []
    for _ in range(n_tokens):
        u = rng.random()
        if u < 0.45:
            tokens.append(good[rng.randrange(len(good))])
        elif u < 0.80:
            tokens.append(bad[rng.randrange(len(bad))])
        else:
            tokens.append(neutral[rng.randrange(len(neutral))])
    return " ".join(tokens)


def generate(config: SynthConfig) -> tuple[list[PreferencePair], JudgeOracle]:
    """Build a clustered preference dataset and its generating reward.

    The token world (cluster content words and good/bad sets) is fixed by
    reward_seed; prompts and response draws by sample_seed. Two configs that
    share reward_seed share one oracle, so a held-out evaluation set is just
    the same config with a different sample_seed.

    Within one cluster the good and bad tokens all start with distinct
    letters, and good mass is spread over twice as many words as bad mass, so
    the single most frequent response token is a bad one. Imitating the data
    therefore differs visibly from optimizing the preference signal.
    """
    pool = shuffled(_word_pool(), config.reward_seed)
    c = config.num_clusters
    cursor = 0
    skipped: list[str] = []

    def take(n: int, distinct_from: set = None) -> list[str]:
        nonlocal cursor
        out: list[str] = []
        while len(out) < n:
            if cursor >= len(pool):
                raise ValueError("word pool exhausted; reduce num_clusters")
            word = pool[cursor]
            cursor += 1
            if distinct_from is not None and word[0] in distinct_from:
                skipped.append(word)
                continue
            if distinct_from is not None:
                distinct_from.add(word[0])
            out.append(word)
        return out

    cluster_words, good_tokens, bad_tokens = [], [], []
    for _ in range(c):
        initials: set = set()
        cluster_words.append(tuple(take(_NUM_CONTENT)))
        good_tokens.append(tuple(take(_NUM_GOOD, initials)))
        bad_tokens.append(tuple(take(_NUM_BAD, initials)))
    remaining = skipped + pool[cursor:]
    neutral = remaining[:_NUM_NEUTRAL]
    filler_pool = remaining[_NUM_NEUTRAL:]

    total_prompts = c * config.prompts_per_cluster
    if total_prompts > len(filler_pool):
        raise ValueError("requested more prompts than available filler words")
    fillers = shuffled(filler_pool, derive_seed(config.sample_seed, 0))[:total_prompts]

    oracle = JudgeOracle(
        cluster_words=tuple(cluster_words),
        good_tokens=tuple(good_tokens),
        bad_tokens=tuple(bad_tokens),
    )

    rng = SplitMix64(derive_seed(config.sample_seed, 1))
    pairs: list[PreferencePair] = []
    prompt_idx = 0
    for cid in range(c):
        content = cluster_words[cid]
        for _ in range(config.prompts_per_cluster):
            filler = fillers[prompt_idx]
            prompt_idx += 1
            # Keyword last: an autoregressive model sees the cluster marker in
            # its final context window when generation starts.
            prompt = f"describe {content[1]} {content[2]} with {filler} {content[0]}"
            responses = [
                _draw_response(rng, good_tokens[cid], bad_tokens[cid], neutral)
                for _ in range(config.responses_per_prompt)
            ]
            for a_idx in range(0, config.responses_per_prompt - 1, 2):
                resp_a = responses[a_idx]
                resp_b = responses[a_idx + 1]
                for _ in range(20):
                    if resp_b != resp_a:
                        break
                    resp_b = _draw_response(rng, good_tokens[cid], bad_tokens[cid], neutral)
                if resp_b == resp_a:
                    resp_b = resp_a + " " + neutral[0]
                r_a = oracle.reward(prompt, resp_a)
                r_b = oracle.reward(prompt, resp_b)
                if sample_bt_winner(r_a, r_b, rng):
                    chosen, rejected = resp_a, resp_b
                else:
                    chosen, rejected = resp_b, resp_a
                pairs.append(PreferencePair(prompt, chosen, rejected))
    return pairs, oracle
