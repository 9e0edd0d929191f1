"""Annealed pruning of one layer's parameters.

At the end of each training epoch the controller ranks the layer's currently
unmasked parameters by magnitude and masks enough of them (the largest, by
default) to hit an annealed nonzero budget.  A random share of the masked
entries is then released again so they can compete at later iterations.  On
the last iteration the mask becomes permanent: masked entries stay exactly
zero and stop receiving updates.

The mask covers the layer's weights and biases flattened and concatenated in
registry order (``W`` then ``b``); ``True`` marks an entry selected for
pruning.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .network import Network
from .tensor import Rng, rng_uniform

PRUNE_LARGEST = "prune-largest"
PRUNE_SMALLEST = "prune-smallest"
MODES = (PRUNE_LARGEST, PRUNE_SMALLEST)


class ScheduleError(RuntimeError):
    """The nonzero budget exceeds what is still unmasked."""


class ProtocolError(RuntimeError):
    """The epoch-end hook was called out of order."""


@dataclass(frozen=True)
class ScheduleParams:
    M: int
    k: int
    n: int
    mu: float

    def __post_init__(self):
        if not 0 < self.k <= self.M:
            raise ValueError(f"need 0 < k <= M, got k={self.k}, M={self.M}")
        if self.n < 1:
            raise ValueError(f"need at least one pruning iteration, got n={self.n}")
        if not self.mu > 0:
            raise ValueError(f"annealing rate must be positive, got {self.mu}")

    @classmethod
    def from_hyper(cls, M: int, p: float, mu: float, start: int, post: int,
                   total_epochs: int) -> "ScheduleParams":
        return cls(M=M, k=keep_count(M, p), n=total_epochs - post - start + 1, mu=mu)


def keep_count(M: int, p: float) -> int:
    # exact rational floor so p=0.1 on 1,180,160 gives 118,016 without float drift
    return math.floor(Fraction(str(p)) * M)


@dataclass(frozen=True)
class ApHyperparams:
    p: float = 0.1
    mu: float = 1.0
    start: int = 3
    post: int = 3
    b0: float = 0.5
    mode: str = PRUNE_LARGEST

    def __post_init__(self):
        if not 0 < self.p < 1:
            raise ValueError(f"keep fraction p must lie in (0, 1), got {self.p}")
        if not self.mu > 0:
            raise ValueError(f"mu must be positive, got {self.mu}")
        if self.start < 1:
            raise ValueError(f"start must be >= 1, got {self.start}")
        if self.post < 0:
            raise ValueError(f"post must be >= 0, got {self.post}")
        if not 0 <= self.b0 < 1:
            raise ValueError(f"reentry bound b0 must lie in [0, 1), got {self.b0}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")

    def schedule(self, M: int, total_epochs: int) -> ScheduleParams:
        return ScheduleParams.from_hyper(M, self.p, self.mu, self.start, self.post, total_epochs)


def scheduled_nonzero(i: int, s: ScheduleParams) -> int:
    """Nonzero budget after pruning iteration ``i`` (1-based)."""
    if i < 1:
        raise ValueError(f"iteration must be >= 1, got {i}")
    if i >= s.n:
        return s.k
    # exact rationals: float division floors 90 * (3/9) to 29
    frac = Fraction(s.n - i) / (2 * i * Fraction(s.mu) + s.n)
    return s.k + math.floor((s.M - s.k) * frac)


def rank_for_pruning(values: np.ndarray, candidates: np.ndarray, mode: str) -> np.ndarray:
    """Candidates ordered from first-to-prune to last; ties by ascending index."""
    mags = np.abs(values[candidates])
    primary = -mags if mode == PRUNE_LARGEST else mags
    return candidates[np.lexsort((candidates, primary))]


def select_for_pruning(values: np.ndarray, mask: np.ndarray, M_e: int,
                       mode: str = PRUNE_LARGEST) -> np.ndarray:
    """Mask unmasked entries until exactly ``M_e`` remain unmasked.

    Updates ``mask`` in place and returns the newly masked flat indices.
    """
    unpruned = np.flatnonzero(~mask)
    excess = len(unpruned) - M_e
    if excess < 0:
        raise ScheduleError(f"scheduled nonzero count {M_e} exceeds {len(unpruned)} unmasked entries")
    if excess == 0:
        return np.zeros(0, dtype=np.int64)
    chosen = rank_for_pruning(values, unpruned, mode)[:excess]
    mask[chosen] = True
    return chosen


def apply_mask(values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Zero masked entries in place; returns ``values``."""
    values[mask] = 0
    return values


def reentry_bound(i: int, n: int, b0: float) -> float:
    return max(0.0, b0 * (1.0 - i / n))


def reentry(mask: np.ndarray, i: int, n: int, b0: float, rng: Rng,
            pruned_ct: int | None = None) -> np.ndarray:
    """Release ``floor(pruned_ct * a)`` masked entries, ``a ~ U(0, b_i)``.

    ``pruned_ct`` defaults to the current number of masked entries; the
    epoch-end hook passes the count from before the iteration's selection.
    The released entries are sampled uniformly without replacement from all
    masked entries.  Returns their flat indices.
    """
    bound = reentry_bound(i, n, b0)
    if bound == 0.0:
        return np.zeros(0, dtype=np.int64)
    pruned = np.flatnonzero(mask)
    if pruned_ct is None:
        pruned_ct = len(pruned)
    if pruned_ct > len(pruned):
        raise ValueError(f"pruned_ct {pruned_ct} exceeds {len(pruned)} masked entries")
    a = rng_uniform(rng, 0.0, bound)
    count = math.floor(pruned_ct * a)
    if count == 0:
        return np.zeros(0, dtype=np.int64)
    released = np.sort(rng.generator.choice(pruned, size=count, replace=False))
    mask[released] = False
    return released


@dataclass
class IterationRecord:
    epoch: int
    iteration: int
    scheduled: int
    unmasked_after_select: int
    newly_masked: int
    pruned_before: int
    released: int
    bound: float


@dataclass
class MaskState:
    """Pruning state of one target layer."""

    layer: int
    hyper: ApHyperparams
    total_epochs: int
    schedule: ScheduleParams
    mask: np.ndarray
    rng: Rng
    frozen: bool = False
    last_epoch: int = 0
    history: list[IterationRecord] = field(default_factory=list)

    @classmethod
    def for_layer(cls, net: Network, layer: int, hyper: ApHyperparams, total_epochs: int,
                  rng: Rng) -> "MaskState":
        keys = net.layer_params(layer)
        if not keys:
            raise ValueError(f"layer {layer} ({net.specs[layer].kind}) has no parameters to prune")
        M = net.layer_param_count(layer)
        schedule = hyper.schedule(M, total_epochs)
        return cls(layer=layer, hyper=hyper, total_epochs=total_epochs, schedule=schedule,
                   mask=np.zeros(M, dtype=bool), rng=rng)

    @property
    def mode(self) -> str:
        return self.hyper.mode

    @property
    def first_epoch(self) -> int:
        return self.hyper.start

    @property
    def freeze_epoch(self) -> int:
        return self.hyper.start + self.schedule.n - 1

    def iteration(self, epoch: int) -> int:
        return epoch - self.hyper.start + 1


def _flat_values(net: Network, layer: int) -> np.ndarray:
    return np.concatenate([net.params[k].ravel() for k in net.layer_params(layer)])


def _write_masked_zero(net: Network, layer: int, mask: np.ndarray):
    offset = 0
    for key in net.layer_params(layer):
        p = net.params[key]
        part = mask[offset:offset + p.size].reshape(p.shape)
        apply_mask(p, part)
        offset += p.size


def _freeze(net: Network, state: MaskState):
    offset = 0
    for key in net.layer_params(state.layer):
        p = net.params[key]
        net.freeze(key, state.mask[offset:offset + p.size].reshape(p.shape))
        offset += p.size
    state.frozen = True


def ap_epoch_end(net: Network, state: MaskState, epoch: int) -> IterationRecord | None:
    """Epoch-end pruning hook; call once per epoch with epoch = 1, 2, ..., N.

    Returns the iteration record when a pruning iteration ran, else None.
    """
    if not 1 <= epoch <= state.total_epochs:
        raise ProtocolError(f"epoch {epoch} outside 1..{state.total_epochs}")
    if epoch != state.last_epoch + 1:
        raise ProtocolError(f"expected epoch {state.last_epoch + 1}, got {epoch}")
    state.last_epoch = epoch
    i = state.iteration(epoch)
    n = state.schedule.n
    if not 1 <= i <= n:
        return None
    if state.frozen:
        raise ProtocolError("pruning iteration requested after the mask was frozen")
    M_e = scheduled_nonzero(i, state.schedule)
    values = _flat_values(net, state.layer)
    pruned_ct = int(state.mask.sum())
    newly = select_for_pruning(values, state.mask, M_e, state.mode)
    unmasked = int(state.mask.size - state.mask.sum())
    _write_masked_zero(net, state.layer, state.mask)
    bound = reentry_bound(i, n, state.hyper.b0)
    released = reentry(state.mask, i, n, state.hyper.b0, state.rng, pruned_ct)
    record = IterationRecord(epoch, i, M_e, unmasked, len(newly), pruned_ct, len(released), bound)
    state.history.append(record)
    if i == n:
        _freeze(net, state)
    return record


def nonzero_count(net: Network, layer: int) -> int:
    return int(sum(np.count_nonzero(net.params[k]) for k in net.layer_params(layer)))


def nonzero_fraction(net: Network, layer: int) -> float:
    return nonzero_count(net, layer) / net.layer_param_count(layer)


def schedule_table(hyper: ApHyperparams, M: int, total_epochs: int) -> list[tuple[int, int, int, float]]:
    """(epoch, iteration, M_e, M_e / M) for every pruning epoch."""
    s = hyper.schedule(M, total_epochs)
    rows = []
    for i in range(1, s.n + 1):
        M_e = scheduled_nonzero(i, s)
        rows.append((hyper.start + i - 1, i, M_e, M_e / M))
    return rows
