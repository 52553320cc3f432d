"""Randomized copy-task instances and their single-token corruptions.

Template (``L + 1`` distinct fillers ``x_0 .. x_L``)::

    x_0 .. x_n, PREFIX, COPY, x_{n+1} .. x_L, PREFIX

The model is scored on COPY at the final PREFIX position.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .numerics import RngStream


class CopyTaskError(ValueError):
    pass


@dataclass(frozen=True)
class CopyTaskInstance:
    clean: tuple[int, ...]
    prefix_token: int
    copy_token: int
    first_pair_pos: int
    final_prefix_pos: int

    @property
    def target(self) -> int:
        return self.copy_token

    @property
    def copy_pos(self) -> int:
        return self.first_pair_pos + 1

    def to_json(self) -> str:
        return json.dumps(
            {
                "clean": list(self.clean),
                "prefix_token": self.prefix_token,
                "copy_token": self.copy_token,
                "first_pair_pos": self.first_pair_pos,
                "final_prefix_pos": self.final_prefix_pos,
                "target": self.target,
            },
            sort_keys=True,
            separators=(",", ":"),
        )


@dataclass(frozen=True)
class CorruptedInstance:
    tokens: tuple[int, ...]
    replacement: int
    position: int


def make_copy_instance(vocab_size: int, L: int, n: int, rng: RngStream) -> CopyTaskInstance:
    if L < 1 or not 0 <= n < L:
        raise CopyTaskError(f"need L >= 1 and 0 <= n < L, got L={L}, n={n}")
    if vocab_size < L + 3:
        raise CopyTaskError(f"vocab_size {vocab_size} too small for {L + 3} distinct tokens")
    drawn = rng.sample(range(vocab_size), L + 3)
    prefix, copy, fillers = drawn[0], drawn[1], drawn[2:]
    seq = fillers[: n + 1] + [prefix, copy] + fillers[n + 1 :] + [prefix]
    return CopyTaskInstance(tuple(seq), prefix, copy, n + 1, len(seq) - 1)


def make_copy_instances(count: int, vocab_size: int, rng: RngStream, L: int = 16) -> list[CopyTaskInstance]:
    """``count`` instances with ``n`` drawn uniformly from ``[0, L)``."""
    return [make_copy_instance(vocab_size, L, rng.randbelow(L), rng) for _ in range(count)]


def corrupt_instance(inst: CopyTaskInstance, rng: RngStream, vocab_size: int) -> CorruptedInstance:
    """Replace COPY with a token drawn uniformly from the vocabulary minus COPY."""
    r = rng.randbelow(vocab_size - 1)
    if r >= inst.copy_token:
        r += 1
    tokens = list(inst.clean)
    tokens[inst.copy_pos] = r
    return CorruptedInstance(tuple(tokens), r, inst.copy_pos)


def parse_template(seq) -> tuple[list[int], int, int, list[int]]:
    """Split a sequence back into ``(before, prefix, copy, after)``; raise if it does not fit."""
    seq = list(seq)
    if len(seq) < 5:
        raise CopyTaskError("sequence too short for the template")
    prefix = seq[-1]
    hits = [i for i, t in enumerate(seq[:-1]) if t == prefix]
    if len(hits) != 1:
        raise CopyTaskError(f"prefix token occurs {len(hits)} times before the end")
    i = hits[0]
    if i == 0 or i + 2 >= len(seq) - 1:
        raise CopyTaskError("prefix/copy pair must have fillers on both sides")
    before, copy, after = seq[:i], seq[i + 1], seq[i + 2 : -1]
    body = before + after + [prefix, copy]
    if len(set(body)) != len(body):
        raise CopyTaskError("tokens are not pairwise distinct")
    return before, prefix, copy, after
