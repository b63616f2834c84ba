"""Reproducible Brownian motion.

Three sources share the :class:`BrownianSource` interface (``increment(s, t)``):

* :class:`BrownianPath` stores every sample it has produced.
* :class:`VirtualBrownianTree` descends a fixed dyadic seed tree to a tolerance.
* :class:`BrownianInterval` keeps a binary tree of (interval, seed) nodes with
  an LRU value cache and returns exact increments.

Randomness comes from a splittable :class:`Seed`: children are derived by
hashing the parent key with the child index, so any node value can be
recomputed from the root seed alone.
"""

from __future__ import annotations

import hashlib
import math
import struct
from collections import OrderedDict

import numpy as np

from .errors import ConfigurationError, ContractError

__all__ = [
    "Seed",
    "split_seed",
    "bridge_point",
    "bridge_interval",
    "BrownianSource",
    "BrownianPath",
    "VirtualBrownianTree",
    "BrownianInterval",
    "IntervalNode",
    "make_source",
]

_MASK128 = (1 << 128) - 1
_TWO_PI = 2.0 * math.pi
_INV_2_53 = 1.0 / (1 << 53)


class Seed:
    """128-bit splittable key."""

    __slots__ = ("key",)

    def __init__(self, key: int):
        self.key = int(key) & _MASK128

    def __repr__(self):
        return f"Seed(0x{self.key:032x})"

    def __eq__(self, other):
        return isinstance(other, Seed) and other.key == self.key

    def __hash__(self):
        return hash(self.key)

    def _digest(self, tag: bytes, size: int) -> bytes:
        return hashlib.blake2b(self.key.to_bytes(16, "little") + tag, digest_size=size).digest()

    def child(self, index: int) -> "Seed":
        return Seed(int.from_bytes(self._digest(b"c" + index.to_bytes(8, "little"), 16), "little"))

    def split(self, n: int = 2) -> list:
        if n < 1:
            raise ContractError("n must be at least 1")
        return [self.child(i) for i in range(n)]

    def normal(self, shape=()) -> np.ndarray | float:
        """Standard normals determined by the key alone."""
        shape = tuple(np.atleast_1d(shape)) if shape != () else ()
        size = int(np.prod(shape)) if shape else 1
        if size <= 8:
            # hash-based Box-Muller; far cheaper than building a generator
            words = struct.unpack("<8Q", self._digest(b"n", 64))
            out = []
            for i in range(0, 2 * ((size + 1) // 2), 2):
                u1 = ((words[i] >> 11) + 1) * _INV_2_53  # in (0, 1]
                u2 = (words[i + 1] >> 11) * _INV_2_53
                rad = math.sqrt(-2.0 * math.log(u1))
                out.append(rad * math.cos(_TWO_PI * u2))
                out.append(rad * math.sin(_TWO_PI * u2))
            vals = np.array(out[:size])
        else:
            vals = np.random.Generator(np.random.Philox(key=self.key)).standard_normal(size)
        return vals.reshape(shape) if shape else float(vals[0])

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(key=self.key))

    @classmethod
    def from_int(cls, seed: int) -> "Seed":
        return cls(int.from_bytes(hashlib.blake2b(int(seed).to_bytes(16, "little", signed=True),
                                                  digest_size=16).digest(), "little"))


def split_seed(seed: Seed, n: int) -> list:
    return seed.split(n)


def _as_seed(seed) -> Seed:
    return seed if isinstance(seed, Seed) else Seed.from_int(seed)


def bridge_point(s, t, u, w_s, w_u, seed, shape=None):
    """Sample W(t) given W(s) and W(u), s < t < u."""
    if not u > s:
        raise ContractError("bridge needs u > s")
    if not s <= t <= u:
        raise ContractError("bridge needs s <= t <= u")
    w_s = np.asarray(w_s, dtype=float)
    w_u = np.asarray(w_u, dtype=float)
    shape = np.broadcast(w_s, w_u).shape if shape is None else shape
    mean = w_s + (t - s) / (u - s) * (w_u - w_s)
    var = max((u - t) * (t - s) / (u - s), 0.0)
    return mean + math.sqrt(var) * np.asarray(_as_seed(seed).normal(shape))


def bridge_interval(s, t, u, w_su, seed):
    """Split the increment over [s, u] at t. Returns ``(w_st, w_tu)`` with ``w_st + w_tu = w_su``."""
    if not u > s:
        raise ContractError("bridge needs u > s")
    if not s <= t <= u:
        raise ContractError("bridge needs s <= t <= u")
    w_su = np.asarray(w_su, dtype=float)
    var = max((u - t) * (t - s) / (u - s), 0.0)
    w_st = (t - s) / (u - s) * w_su + math.sqrt(var) * np.asarray(_as_seed(seed).normal(w_su.shape))
    return w_st, w_su - w_st


class BrownianSource:
    """Common interface: ``increment(s, t)`` returns W(t) - W(s)."""

    t0: float
    t1: float
    shape: tuple

    def increment(self, s, t):
        raise NotImplementedError

    def __call__(self, s, t):
        return self.increment(s, t)

    def _check_range(self, s, t):
        if s < self.t0 or t > self.t1:
            raise ContractError(f"query [{s}, {t}] outside [{self.t0}, {self.t1}]")


class BrownianPath(BrownianSource):
    """Store-everything Brownian motion with bridging between stored points."""

    def __init__(self, t0=0.0, t1=1.0, shape=(), seed=0):
        self.t0, self.t1 = float(t0), float(t1)
        self.shape = tuple(np.atleast_1d(shape)) if shape != () else ()
        self._gen = _as_seed(seed).generator()
        self._ts = [self.t0]
        self._ws = [np.zeros(self.shape)]
        self.n_samples = 0

    def _normal(self):
        return self._gen.standard_normal(self.shape) if self.shape else self._gen.standard_normal()

    def value(self, t):
        t = float(t)
        if t < self.t0 or t > self.t1:
            raise ContractError(f"time {t} outside [{self.t0}, {self.t1}]")
        i = np.searchsorted(self._ts, t)
        if i < len(self._ts) and self._ts[i] == t:
            return self._ws[i]
        self.n_samples += 1
        if i == len(self._ts):
            s = self._ts[-1]
            w = self._ws[-1] + math.sqrt(t - s) * np.asarray(self._normal())
        else:
            s, u = self._ts[i - 1], self._ts[i]
            ws, wu = self._ws[i - 1], self._ws[i]
            mean = ws + (t - s) / (u - s) * (wu - ws)
            w = mean + math.sqrt((u - t) * (t - s) / (u - s)) * np.asarray(self._normal())
        self._ts.insert(i, t)
        self._ws.insert(i, w)
        return w

    def increment(self, s, t):
        if s > t:
            raise ContractError("need s <= t")
        self._check_range(s, t)
        if s == t:
            return np.zeros(self.shape)
        return self.value(t) - self.value(s)


class VirtualBrownianTree(BrownianSource):
    """Dyadic seed tree; points are snapped to the first dyadic midpoint within ``tol``."""

    def __init__(self, t0=0.0, t1=1.0, shape=(), seed=0, tol=1e-6):
        if tol <= 0:
            raise ConfigurationError("tol must be positive")
        self.t0, self.t1 = float(t0), float(t1)
        self.shape = tuple(np.atleast_1d(shape)) if shape != () else ()
        self.tol = float(tol)
        self._rho, rho_hat = _as_seed(seed).split(2)
        self._w_end = math.sqrt(self.t1 - self.t0) * np.asarray(rho_hat.normal(self.shape))
        self.n_levels = 0

    def value(self, t):
        t = float(t)
        if t < self.t0 or t > self.t1:
            raise ContractError(f"time {t} outside [{self.t0}, {self.t1}]")
        if t == self.t0:
            return np.zeros(self.shape)
        if t == self.t1:
            return self._w_end
        s, u = self.t0, self.t1
        ws, wu = np.zeros(self.shape), self._w_end
        rho = self._rho
        while True:
            tau = s + (u - s) / 2
            w_tau = bridge_point(s, tau, u, ws, wu, rho, self.shape)
            self.n_levels += 1
            if abs(tau - t) <= self.tol or tau in (s, u):
                return w_tau
            right, left = rho.split(2)
            if t > tau:
                s, ws, rho = tau, w_tau, right
            else:
                u, wu, rho = tau, w_tau, left

    def increment(self, s, t):
        if s > t:
            raise ContractError("need s <= t")
        self._check_range(s, t)
        return self.value(t) - self.value(s)


class IntervalNode:
    __slots__ = ("a", "b", "seed", "parent", "left", "right", "__weakref__")

    def __init__(self, a, b, seed, parent=None):
        self.a, self.b, self.seed, self.parent = a, b, seed, parent
        self.left = self.right = None

    @property
    def is_leaf(self):
        return self.left is None

    def __repr__(self):
        return f"IntervalNode([{self.a}, {self.b}])"


class BrownianInterval(BrownianSource):
    """Exact Brownian increments from a lazily grown binary tree of seeds.

    Internally times are normalised to ``[0, 1]``. Splitting a node ``[a, b]`` at
    ``m`` draws the left child's increment from the bridge law, using the left
    child's seed, and sets the right child's increment to the remainder.

    ``split="dyadic"`` (default) only ever splits at midpoints and descends until
    query points become node boundaries. Every double in ``[0, 1]`` is a dyadic
    rational, so the descent terminates, and a value depends only on the root
    seed and the queried times. ``split="query"`` splits leaves directly at the
    queried points: fewer nodes, but values then depend on the query history.
    """

    def __init__(self, t0=0.0, t1=1.0, shape=(), seed=0, cache_size=128, split="dyadic"):
        if split not in ("dyadic", "query"):
            raise ConfigurationError(f"unknown split mode {split!r}; valid: ['dyadic', 'query']")
        if cache_size < 1:
            raise ConfigurationError("cache_size must be positive")
        self.t0, self.t1 = float(t0), float(t1)
        if not self.t1 > self.t0:
            raise ContractError("need t1 > t0")
        self.shape = tuple(np.atleast_1d(shape)) if shape != () else ()
        self.split = split
        self.cache_size = int(cache_size)
        self._scale = math.sqrt(self.t1 - self.t0)
        self.root = IntervalNode(0.0, 1.0, _as_seed(seed))
        self.hint = self.root
        self._cache: OrderedDict = OrderedDict()
        self.stats = {"bridge_samples": 0, "cache_hits": 0, "traverse_steps": 0}

    # coordinates

    def _u(self, t):
        if t == self.t0:
            return 0.0
        if t == self.t1:
            return 1.0
        return (float(t) - self.t0) / (self.t1 - self.t0)

    # tree growth

    def _bisect(self, node: IntervalNode, m: float):
        left_seed, right_seed = node.seed.split(2)
        node.left = IntervalNode(node.a, m, left_seed, node)
        node.right = IntervalNode(m, node.b, right_seed, node)

    def _traverse(self, s, t):
        """Return the nodes partitioning [s, t], growing the tree as needed."""
        node = self.hint
        while not (node.a <= s and t <= node.b):
            node = node.parent
            self.stats["traverse_steps"] += 1
        out = []
        stack = [(node, s, t)]
        while stack:
            node, s, t = stack.pop()
            self.stats["traverse_steps"] += 1
            if node.a == s and node.b == t:
                out.append(node)
                continue
            if node.is_leaf:
                if self.split == "dyadic":
                    m = node.a + (node.b - node.a) / 2
                    if m <= node.a or m >= node.b:
                        out.append(node)  # float resolution exhausted
                        continue
                    self._bisect(node, m)
                else:
                    if s > node.a:
                        self._bisect(node, s)
                        stack.append((node.right, s, t))
                        continue
                    self._bisect(node, t)
                    stack.append((node.left, s, t))
                    continue
            m = node.left.b
            if t <= m:
                stack.append((node.left, s, t))
            elif s >= m:
                stack.append((node.right, s, t))
            else:
                # right piece pushed first so the left piece is resolved first
                stack.append((node.right, m, t))
                stack.append((node.left, s, m))
        return out

    def _cache_get(self, node):
        val = self._cache.get(node)
        if val is not None:
            self._cache.move_to_end(node)
            self.stats["cache_hits"] += 1
        return val

    def _cache_put(self, node, val):
        self._cache[node] = val
        self._cache.move_to_end(node)
        while len(self._cache) > self.cache_size:
            self._cache.popitem(last=False)

    def _sample(self, node: IntervalNode):
        """Increment over ``node``, recomputed from the nearest cached ancestor."""
        val = self._cache_get(node)
        if val is not None:
            return val
        chain = []
        cur = node
        while True:
            chain.append(cur)
            if cur.parent is None:
                val = self._scale * np.asarray(cur.seed.normal(self.shape))
                chain.pop()
                self._cache_put(cur, val)
                break
            cur = cur.parent
            val = self._cache_get(cur)
            if val is not None:
                break
        # walk back down from the resolved ancestor
        for child in reversed(chain):
            parent = child.parent
            left = parent.left
            var = (left.b - left.a) * (parent.b - left.b) / (parent.b - parent.a)
            frac = (left.b - left.a) / (parent.b - parent.a)
            noise = np.asarray(left.seed.normal(self.shape))
            w_left = frac * val + math.sqrt(var) * self._scale * noise
            self.stats["bridge_samples"] += 1
            val = w_left if child is left else val - w_left
            self._cache_put(child, val)
        return val

    # public API

    def increment(self, s, t):
        s, t = float(s), float(t)
        if not s < t:
            raise ContractError("need s < t")
        self._check_range(s, t)
        nodes = self._traverse(self._u(s), self._u(t))
        total = None
        for node in nodes:
            v = self._sample(node)
            total = v.copy() if total is None else total + v
        self.hint = nodes[-1]
        return total

    def clear_cache(self):
        self._cache.clear()

    def prebuild_dyadic(self, avg_step: float, cache_capacity: int | None = None):
        """Split the tree dyadically until leaves are at most ``0.8 * avg_step * capacity`` wide."""
        if avg_step <= 0:
            raise ContractError("avg_step must be positive")
        cap = self.cache_size if cache_capacity is None else cache_capacity
        width = 0.8 * avg_step * cap / (self.t1 - self.t0)
        stack = [self.root]
        while stack:
            node = stack.pop()
            if node.b - node.a <= width:
                continue
            if node.is_leaf:
                self._bisect(node, node.a + (node.b - node.a) / 2)
            stack.append(node.right)
            stack.append(node.left)

    def n_nodes(self) -> int:
        count, stack = 0, [self.root]
        while stack:
            node = stack.pop()
            count += 1
            if not node.is_leaf:
                stack.extend((node.left, node.right))
        return count


SOURCES = {"path": BrownianPath, "tree": VirtualBrownianTree, "interval": BrownianInterval}


def make_source(kind: str, **kwargs) -> BrownianSource:
    try:
        cls = SOURCES[kind]
    except KeyError:
        raise ConfigurationError(f"unknown Brownian source {kind!r}; valid: {sorted(SOURCES)}") from None
    return cls(**kwargs)
