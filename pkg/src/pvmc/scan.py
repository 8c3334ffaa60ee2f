"""Tree-shaped reductions and scans over an arbitrary associative operator.

Both routines proceed level by level. All combines inside a level are
independent, so the number of levels is the span of the computation and
the combines of one level may be dispatched concurrently through an
``concurrent.futures.Executor``. The tree shape depends only on the
number of elements, never on the executor, so floating point results
are reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence, TypeVar

E = TypeVar("E")


@dataclass
class ScanPlan:
    """Instrumentation collected while a scan or reduction runs."""

    element_count: int
    depth: int = 0
    combine_invocations: int = 0

    def depth_bound(self) -> int:
        return math.ceil(math.log2(self.element_count)) + 1 if self.element_count > 1 else 1


class _Level:
    """Collects the combines of one tree level and evaluates them together."""

    def __init__(self, combine, plan, executor):
        self.combine = combine
        self.plan = plan
        self.executor = executor
        self.pairs = []

    def add(self, left, right) -> int:
        self.pairs.append((left, right))
        return len(self.pairs) - 1

    def run(self) -> list:
        if not self.pairs:
            return []
        self.plan.depth += 1
        self.plan.combine_invocations += len(self.pairs)
        if self.executor is None:
            return [self.combine(a, b) for a, b in self.pairs]
        lefts, rights = zip(*self.pairs)
        return list(self.executor.map(self.combine, lefts, rights))


def parallel_reduce(
    elements: Sequence[E],
    combine: Callable[[E, E], E],
    executor=None,
    with_plan: bool = False,
):
    """Fold ``elements`` with ``combine`` using a balanced pairwise tree.

    Adjacent pairs are combined at each level; an odd trailing element is
    carried to the next level unchanged. ``ceil(log2(T))`` levels are
    used for ``T`` elements.
    """
    items = list(elements)
    if not items:
        raise ValueError("parallel_reduce needs at least one element")
    plan = ScanPlan(element_count=len(items))
    while len(items) > 1:
        level = _Level(combine, plan, executor)
        for j in range(len(items) // 2):
            level.add(items[2 * j], items[2 * j + 1])
        reduced = level.run()
        if len(items) % 2:
            reduced.append(items[-1])
        items = reduced
    if with_plan:
        return items[0], plan
    return items[0]


def prefix_suffix_scan(
    elements: Sequence[E],
    combine: Callable[[E, E], E],
    identity: E,
    executor=None,
    check_identity: Callable[[E, E], bool] | None = None,
):
    """All inclusive prefix and suffix aggregates in one fused pass.

    Returns ``(prefix, suffix, plan)`` where ``prefix[t]`` is
    ``a[0] + ... + a[t]`` and ``suffix[t]`` is ``a[t] + ... + a[-1]``.

    Every working sequence is split into a pairwise reduction ``B`` and a
    shifted pairwise reduction ``C``; after the last halving the working
    sequence ``i`` holds ``(prefix[i], suffix[i + 1])``. ``identity`` pads
    the tail of ``B`` when the sequence length is even, so it only ever
    appears as a right operand and only ``e + identity == e`` is required.
    One final level joins the two complete reductions.

    ``check_identity(a, b)`` compares elements; when given, the right
    identity law is verified on the first element before scanning.
    """
    a = list(elements)
    T = len(a)
    if T == 0:
        raise ValueError("prefix_suffix_scan needs at least one element")
    if check_identity is not None and not check_identity(combine(a[0], identity), a[0]):
        raise ValueError("identity is not a right identity for combine")

    plan = ScanPlan(element_count=T)
    if T == 1:
        return [a[0]], [a[0]], plan

    sequences = [a]
    S = T
    while S > 2:
        Q = math.ceil((S + 1) / 2)
        level = _Level(combine, plan, executor)
        layout = []
        for seq in sequences:
            b_slots = [level.add(seq[2 * j], seq[2 * j + 1]) for j in range(S // 2)]
            b_tail = seq[S - 1] if S % 2 else identity
            c_slots = [level.add(seq[2 * k - 1], seq[2 * k]) for k in range(1, (S - 1) // 2 + 1)]
            c_tail = seq[S - 1] if S % 2 == 0 else None
            layout.append((seq[0], b_slots, b_tail, c_slots, c_tail))
        results = level.run()

        b_seqs, c_seqs = [], []
        for head, b_slots, b_tail, c_slots, c_tail in layout:
            b_seqs.append([results[i] for i in b_slots] + [b_tail])
            c_seq = [head] + [results[i] for i in c_slots]
            if c_tail is not None:
                c_seq.append(c_tail)
            c_seqs.append(c_seq)
        sequences = c_seqs + b_seqs
        S = Q

    prefix = [sequences[i][0] for i in range(T - 1)]
    suffix = [sequences[i][1] for i in range(T - 1)]
    level = _Level(combine, plan, executor)
    level.add(prefix[-1], a[-1])
    level.add(a[0], suffix[0])
    total_from_prefix, total_from_suffix = level.run()
    prefix.append(total_from_prefix)
    suffix.insert(0, total_from_suffix)
    return prefix, suffix, plan
