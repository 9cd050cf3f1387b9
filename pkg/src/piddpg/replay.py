"""Rank-based prioritized experience replay.

Stored transitions are ranked by absolute TD error, largest first. A
transition that has never been trained on is "fresh" and outranks every
trained one; ties (including between fresh items) go to the newer insertion.
Item ``j`` is drawn with probability ``(1/rank_j)^alpha / sum_k (1/rank_k)^alpha``
and weighted by ``(S * P_j)^-beta``, normalized so the largest weight in the
batch is 1. ``S`` is the number of stored transitions.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .agent import Batch
from .errors import DomainError, StateError
from .neural import DTYPE

BUFFER_FORMAT = "piddpg.replay/1"


@dataclass
class Transition:
    s: np.ndarray
    h: np.ndarray
    a: np.ndarray
    r: float
    s2: np.ndarray
    h2: np.ndarray
    terminal: bool
    last_abs_td: float | None = None

    def __post_init__(self):
        a = np.asarray(self.a)
        if np.any(a < 0) or np.any(a > 1):
            raise DomainError("transition action components must lie in [0, 1]")
        if not np.isfinite(self.r):
            raise DomainError("transition reward must be finite")


class PerBuffer:
    def __init__(self, capacity: int = 50_000, alpha: float = 0.7, beta: float = 0.5, seed=None):
        if capacity < 1:
            raise DomainError("capacity must be >= 1")
        self.capacity = int(capacity)
        self.alpha = float(alpha)
        self.beta = float(beta)
        self.rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.items: list = []
        self._priority = np.zeros(self.capacity)
        self._seq = np.zeros(self.capacity, dtype=np.int64)
        self._next = 0
        self._counter = 0
        self._probs = None

    def __len__(self):
        return len(self.items)

    def insert(self, transition: Transition) -> int:
        """Store with top priority; evicts the oldest item when full. Returns the slot."""
        slot = self._next
        transition.last_abs_td = None
        if len(self.items) < self.capacity:
            self.items.append(transition)
        else:
            self.items[slot] = transition
        self._priority[slot] = np.inf
        self._seq[slot] = self._counter
        self._counter += 1
        self._next = (slot + 1) % self.capacity
        self._probs = None
        return slot

    def order(self) -> np.ndarray:
        """Slots sorted from rank 1 downwards."""
        n = len(self.items)
        return np.lexsort((-self._seq[:n], -self._priority[:n]))

    def ranks(self) -> np.ndarray:
        """``ranks()[slot]`` is the 1-based rank of the item in ``slot``."""
        order = self.order()
        out = np.empty(len(order), dtype=np.int64)
        out[order] = np.arange(1, len(order) + 1)
        return out

    def probabilities(self) -> np.ndarray:
        if self._probs is None:
            n = len(self.items)
            if n == 0:
                raise StateError("buffer is empty")
            d = 1.0 / self.ranks().astype(np.float64)
            p = d**self.alpha
            self._probs = p / p.sum()
        return self._probs

    def probability(self, slot: int) -> float:
        if not 0 <= slot < len(self.items):
            raise DomainError(f"slot {slot} is not stored")
        return float(self.probabilities()[slot])

    def weights(self, slots) -> np.ndarray:
        p = self.probabilities()[np.asarray(slots)]
        raw = (len(self.items) * p) ** (-self.beta)
        return raw / raw.max()

    def sample(self, n: int | None = None, max_batch: int = 128):
        """Draw ``n`` slots i.i.d. by priority (default ``min(len, max_batch)``).

        Returns ``(transitions, slots, weights)``.
        """
        if not self.items:
            raise StateError("cannot sample from an empty buffer")
        if n is None:
            n = min(len(self.items), max_batch)
        p = self.probabilities()
        slots = self.rng.choice(len(self.items), size=n, replace=True, p=p)
        return [self.items[j] for j in slots], slots, self.weights(slots)

    def update_priorities(self, slots, abs_td_errors) -> None:
        errs = np.asarray(abs_td_errors, dtype=np.float64)
        slots = np.asarray(slots)
        if np.any(errs < 0) or np.any(~np.isfinite(errs)):
            raise DomainError("|TD error| values must be finite and non-negative")
        n = len(self.items)
        if np.any(slots < 0) or np.any(slots >= n):
            raise DomainError("slot index out of range")
        for j, e in zip(slots, errs):
            self._priority[j] = e
            self.items[j].last_abs_td = float(e)
        self._probs = None

    def sample_batch(self, n: int | None = None, max_batch: int = 128) -> Batch:
        items, slots, w = self.sample(n, max_batch)
        return collate(items, weights=w, indices=slots)

    def save(self, path) -> Path:
        path = Path(path)
        n = len(self.items)
        arrays = {
            f"{k}": np.stack([getattr(t, k) for t in self.items]) for k in ("s", "h", "a", "s2", "h2")
        } if n else {}
        if n:
            arrays["r"] = np.array([t.r for t in self.items])
            arrays["terminal"] = np.array([t.terminal for t in self.items])
        arrays["priority"] = self._priority[:n]
        arrays["seq"] = self._seq[:n]
        header = {
            "format": BUFFER_FORMAT,
            "capacity": self.capacity,
            "alpha": self.alpha,
            "beta": self.beta,
            "next": self._next,
            "counter": self._counter,
            "size": n,
            "rng": self.rng.bit_generator.state,
        }
        arrays["__header__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)
        return path

    @classmethod
    def load(cls, path) -> "PerBuffer":
        with np.load(Path(path), allow_pickle=False) as data:
            header = json.loads(bytes(data["__header__"]).decode())
            if header.get("format") != BUFFER_FORMAT:
                raise StateError(f"unsupported buffer format {header.get('format')!r}")
            buf = cls(header["capacity"], header["alpha"], header["beta"])
            buf.rng.bit_generator.state = header["rng"]
            n = header["size"]
            for j in range(n):
                pr = float(data["priority"][j])
                buf.items.append(
                    Transition(
                        data["s"][j], data["h"][j], data["a"][j], float(data["r"][j]),
                        data["s2"][j], data["h2"][j], bool(data["terminal"][j]),
                        None if np.isinf(pr) else pr,
                    )
                )
            buf._priority[:n] = data["priority"]
            buf._seq[:n] = data["seq"]
            buf._next = header["next"]
            buf._counter = header["counter"]
        return buf


def collate(items, weights=None, indices=None) -> Batch:
    def stack(key):
        return torch.from_numpy(np.stack([np.asarray(getattr(t, key), dtype=np.float64) for t in items]))

    return Batch(
        s=stack("s"),
        h=stack("h"),
        a=stack("a"),
        r=torch.tensor([t.r for t in items], dtype=DTYPE),
        s2=stack("s2"),
        h2=stack("h2"),
        terminal=torch.tensor([float(t.terminal) for t in items], dtype=DTYPE),
        weights=None if weights is None else torch.as_tensor(weights, dtype=DTYPE),
        indices=indices,
    )
