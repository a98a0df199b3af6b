"""Preference-record ingestion, validation, and deterministic batching.

File format is JSON Lines, one record per line, UTF-8:

* paired records:   {"prompt": ..., "chosen": ..., "rejected": ...}
* unpaired records: {"prompt": ..., "response": ..., "desirable": true/false}

Blank lines are ignored. All shuffling is a pure function of (input, seed),
driven by the SplitMix64 Fisher-Yates shuffle in :mod:`prefalign.rng`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Union

from .rng import derive_seed, shuffled


class DatasetError(ValueError):
    """Malformed preference records or invalid batching requests."""


@dataclass(frozen=True)
class PreferencePair:
    """One (prompt, chosen, rejected) triplet."""

    prompt: str
    chosen: str
    rejected: str

    def __post_init__(self):
        for name in ("prompt", "chosen", "rejected"):
            if not getattr(self, name).strip():
                raise DatasetError(f"field {name!r} is empty")
        if self.chosen == self.rejected:
            raise DatasetError("chosen and rejected are identical")


@dataclass(frozen=True)
class UnpairedExample:
    """One labeled (prompt, response) example; desirable=True marks a win."""

    prompt: str
    response: str
    desirable: bool

    def __post_init__(self):
        for name in ("prompt", "response"):
            if not getattr(self, name).strip():
                raise DatasetError(f"field {name!r} is empty")


@dataclass(frozen=True)
class PairedBatch:
    """A mini-batch of M triplets; contrast matrices built from it are M x M."""

    prompts: tuple[str, ...]
    chosen: tuple[str, ...]
    rejected: tuple[str, ...]
    flagged: bool = False

    def __post_init__(self):
        if not (len(self.prompts) == len(self.chosen) == len(self.rejected)):
            raise DatasetError("paired batch arrays must share one length")
        if len(self.prompts) < 1:
            raise DatasetError("paired batch must be non-empty")

    @property
    def size(self) -> int:
        return len(self.prompts)


@dataclass(frozen=True)
class UnpairedBatch:
    """A mini-batch of M win and N lose items; contrast matrices are M x N."""

    win_prompts: tuple[str, ...]
    win_responses: tuple[str, ...]
    lose_prompts: tuple[str, ...]
    lose_responses: tuple[str, ...]
    flagged: bool = False

    def __post_init__(self):
        if len(self.win_prompts) != len(self.win_responses):
            raise DatasetError("win arrays must share one length")
        if len(self.lose_prompts) != len(self.lose_responses):
            raise DatasetError("lose arrays must share one length")
        if len(self.win_prompts) < 1 or len(self.lose_prompts) < 1:
            raise DatasetError("unpaired batch needs at least one win and one lose")

    @property
    def num_wins(self) -> int:
        return len(self.win_prompts)

    @property
    def num_loses(self) -> int:
        return len(self.lose_prompts)


def _parse_line(line: str, lineno: int, fields: tuple[str, ...]) -> dict:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
    if not isinstance(rec, dict):
        raise DatasetError(f"line {lineno}: record is not an object")
    for field in fields:
        if field not in rec:
            raise DatasetError(f"line {lineno}: missing field {field!r}")
    return rec


def load_paired(path: Union[str, Path]) -> list[PreferencePair]:
    """Load (prompt, chosen, rejected) records in file order.

    Raises DatasetError naming the line and field for any malformed record;
    I/O problems propagate as OSError.
    """
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            rec = _parse_line(line, lineno, ("prompt", "chosen", "rejected"))
            try:
                pairs.append(
                    PreferencePair(
                        prompt=str(rec["prompt"]),
                        chosen=str(rec["chosen"]),
                        rejected=str(rec["rejected"]),
                    )
                )
            except DatasetError as exc:
                raise DatasetError(f"line {lineno}: {exc}") from exc
    return pairs


def load_unpaired(path: Union[str, Path]) -> list[UnpairedExample]:
    """Load labeled (prompt, response, desirable) records in file order."""
    examples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            rec = _parse_line(line, lineno, ("prompt", "response", "desirable"))
            if not isinstance(rec["desirable"], bool):
                raise DatasetError(f"line {lineno}: field 'desirable' must be a boolean")
            try:
                examples.append(
                    UnpairedExample(
                        prompt=str(rec["prompt"]),
                        response=str(rec["response"]),
                        desirable=rec["desirable"],
                    )
                )
            except DatasetError as exc:
                raise DatasetError(f"line {lineno}: {exc}") from exc
    return examples


def save_paired(pairs: Iterable[PreferencePair], path: Union[str, Path]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in pairs:
            fh.write(
                json.dumps(
                    {"prompt": p.prompt, "chosen": p.chosen, "rejected": p.rejected},
                    ensure_ascii=False,
                )
                + "\n"
            )


def save_unpaired(examples: Iterable[UnpairedExample], path: Union[str, Path]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in examples:
            fh.write(
                json.dumps(
                    {"prompt": e.prompt, "response": e.response, "desirable": e.desirable},
                    ensure_ascii=False,
                )
                + "\n"
            )


def decompose_to_unpaired(pairs: list[PreferencePair], seed: int) -> list[UnpairedExample]:
    """Split each triplet into one desirable and one undesirable example and
    shuffle the combined list (seed-deterministic)."""
    if not pairs:
        raise DatasetError("cannot decompose an empty dataset")
    examples: list[UnpairedExample] = []
    for p in pairs:
        examples.append(UnpairedExample(p.prompt, p.chosen, desirable=True))
        examples.append(UnpairedExample(p.prompt, p.rejected, desirable=False))
    return shuffled(examples, seed)


def make_paired_batches(
    pairs: list[PreferencePair], batch_size: int, seed: int
) -> tuple[list[PairedBatch], list[str]]:
    """Shuffle and partition into batches of ``batch_size`` triplets.

    The final batch may be smaller; every record appears exactly once. Batches
    of size < 2 cannot form cross-prompt contrasts and are flagged, with a
    warning string returned alongside.
    """
    if batch_size < 1:
        raise DatasetError("batch_size must be >= 1")
    if not pairs:
        raise DatasetError("cannot batch an empty dataset")
    order = shuffled(pairs, seed)
    batches: list[PairedBatch] = []
    warnings: list[str] = []
    for start in range(0, len(order), batch_size):
        chunk = order[start : start + batch_size]
        flagged = len(chunk) < 2
        if flagged:
            warnings.append(
                f"batch {len(batches)} has size {len(chunk)} < 2; "
                "cross-prompt contrast degenerates"
            )
        batches.append(
            PairedBatch(
                prompts=tuple(p.prompt for p in chunk),
                chosen=tuple(p.chosen for p in chunk),
                rejected=tuple(p.rejected for p in chunk),
                flagged=flagged,
            )
        )
    return batches, warnings


def make_unpaired_batches(
    examples: list[UnpairedExample], per_side: int, seed: int
) -> list[UnpairedBatch]:
    """Batch labeled examples into (wins, loses) groups of up to ``per_side`` each.

    Win and lose pools are shuffled independently (seed-deterministic) and
    consumed in order. Once the shorter side is exhausted, leftover items on
    the longer side still form batches, each paired with one recycled item
    from the exhausted side (cycling through its shuffled order); those
    batches are flagged.
    """
    if per_side < 1:
        raise DatasetError("per_side must be >= 1")
    wins = [e for e in examples if e.desirable]
    loses = [e for e in examples if not e.desirable]
    if not wins or not loses:
        raise DatasetError("need at least one desirable and one undesirable example")
    wins = shuffled(wins, derive_seed(seed, 0))
    loses = shuffled(loses, derive_seed(seed, 1))

    batches: list[UnpairedBatch] = []
    wi = li = 0
    recycle = 0
    while wi < len(wins) or li < len(loses):
        w_chunk = wins[wi : wi + per_side]
        l_chunk = loses[li : li + per_side]
        wi += len(w_chunk)
        li += len(l_chunk)
        flagged = False
        if not w_chunk:
            w_chunk = [wins[recycle % len(wins)]]
            recycle += 1
            flagged = True
        elif not l_chunk:
            l_chunk = [loses[recycle % len(loses)]]
            recycle += 1
            flagged = True
        batches.append(
            UnpairedBatch(
                win_prompts=tuple(e.prompt for e in w_chunk),
                win_responses=tuple(e.response for e in w_chunk),
                lose_prompts=tuple(e.prompt for e in l_chunk),
                lose_responses=tuple(e.response for e in l_chunk),
                flagged=flagged,
            )
        )
    return batches
