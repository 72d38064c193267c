"""Prolific backbone: a continuous-time Galton-Watson tree.

Individuals live for Exp(q) times with ``q = psi'(lambda_star)`` and are replaced
by ``N >= 2`` children drawn from the backbone offspring law. Many independent
trees (one per replicate) are grown together, generation by generation, in a
:class:`Forest`; a single tree is a forest with one replicate.

A node is alive at ``t`` when ``birth <= t < death``. Nodes still alive at the
horizon have ``death = inf`` and no offspring count.

Explosion guard: once a replicate has at least ``live_cap`` individuals alive
at some time, it stops being grown past the first such time ``cap_time``. The
tree is complete on ``[0, cap_time)`` and counts at later times are reported
as ``-1``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .mechanism import BranchingMechanism


class PopulationCapExceeded(RuntimeError):
    """Raised by :func:`sample_backbone` when the live count reaches the cap."""

    def __init__(self, message: str, tree: "BackboneTree", capped_from: float):
        super().__init__(message)
        self.tree = tree
        self.capped_from = capped_from


@dataclass(frozen=True)
class Motion:
    """Brownian marks: position increments are ``N(0, sigma**2 * dt)`` per coordinate."""

    dimension: int = 1
    sigma: float = 1.0

    def __post_init__(self):
        if self.dimension < 1 or self.sigma <= 0.0:
            raise ValueError("motion needs dimension >= 1 and sigma > 0")


@dataclass(frozen=True)
class BackboneNode:
    label: str
    parent: str | None
    birth: float
    death: float
    offspring: int | None
    birth_position: tuple | None = None
    death_position: tuple | None = None

    def as_dict(self) -> dict:
        return {
            "id": self.label,
            "parent": self.parent,
            "birth": self.birth,
            "death": None if math.isinf(self.death) else self.death,
            "n": self.offspring,
            "birth_position": self.birth_position,
            "death_position": self.death_position,
        }


@dataclass
class Forest:
    """Column store of nodes for many independent trees, in generation order."""

    replicate: np.ndarray
    parent: np.ndarray
    child_index: np.ndarray
    birth: np.ndarray
    death: np.ndarray
    offspring: np.ndarray
    generation: np.ndarray
    horizon: float
    initial_counts: np.ndarray
    cap_time: np.ndarray
    live_cap: int
    birth_position: np.ndarray | None = None
    death_position: np.ndarray | None = None
    seed_record: dict = field(default_factory=dict)

    @property
    def n_replicates(self) -> int:
        return int(self.initial_counts.size)

    @property
    def size(self) -> int:
        return int(self.birth.size)

    @property
    def capped(self) -> np.ndarray:
        return np.isfinite(self.cap_time)

    def segment_ends(self) -> np.ndarray:
        return np.minimum(self.death, self.horizon)

    def branch_nodes(self) -> np.ndarray:
        """Indices of nodes that branched before the horizon."""
        return np.flatnonzero(np.isfinite(self.death))

    def prolific_counts(self, times) -> np.ndarray:
        """Alive counts, shape ``(n_replicates, len(times))``; ``-1`` past a cap."""
        times = np.atleast_1d(np.asarray(times, dtype=float))
        if np.any(times < 0.0) or np.any(times > self.horizon * (1 + 1e-12)):
            raise ValueError(f"times must lie in [0, {self.horizon}]")
        out = np.empty((self.n_replicates, times.size), dtype=np.int64)
        for k, t in enumerate(times):
            alive = (self.birth <= t) & (t < self.death)
            out[:, k] = np.bincount(self.replicate[alive], minlength=self.n_replicates)
        out[self.cap_time[:, None] <= times[None, :]] = -1
        return out

    def subtree(self, r: int) -> "BackboneTree":
        """Nodes of replicate ``r`` as a standalone tree."""
        idx = np.flatnonzero(self.replicate == r)
        remap = np.full(self.size, -1, dtype=np.int64)
        remap[idx] = np.arange(idx.size)
        parent = np.where(self.parent[idx] >= 0, remap[np.maximum(self.parent[idx], 0)], -1)
        pos = lambda a: None if a is None else a[idx]
        return BackboneTree(
            replicate=np.zeros(idx.size, dtype=np.int64),
            parent=parent,
            child_index=self.child_index[idx],
            birth=self.birth[idx],
            death=self.death[idx],
            offspring=self.offspring[idx],
            generation=self.generation[idx],
            horizon=self.horizon,
            initial_counts=self.initial_counts[r:r + 1].copy(),
            cap_time=self.cap_time[r:r + 1].copy(),
            live_cap=self.live_cap,
            birth_position=pos(self.birth_position),
            death_position=pos(self.death_position),
            seed_record=dict(self.seed_record, replicate=int(r)),
        )


class BackboneTree(Forest):
    """A single tree (one replicate)."""

    def prolific_count(self, t: float) -> int:
        return int(self.prolific_counts([t])[0, 0])

    def labels(self) -> list[str]:
        """Ulam-Harris labels: roots ``"1", "2", ...``; children append ``".k"``."""
        labels: list[str] = []
        for p, k in zip(self.parent.tolist(), self.child_index.tolist()):
            labels.append(str(k) if p < 0 else f"{labels[p]}.{k}")
        return labels

    def nodes(self) -> Iterator[BackboneNode]:
        labels = self.labels()
        for i, lab in enumerate(labels):
            p = int(self.parent[i])
            dead = math.isfinite(self.death[i])
            yield BackboneNode(
                label=lab,
                parent=labels[p] if p >= 0 else None,
                birth=float(self.birth[i]),
                death=float(self.death[i]),
                offspring=int(self.offspring[i]) if dead else None,
                birth_position=None if self.birth_position is None else tuple(self.birth_position[i].tolist()),
                death_position=None if self.death_position is None else tuple(self.death_position[i].tolist()),
            )

    def to_jsonl(self, path: Path) -> Path:
        path = Path(path)
        with path.open("w") as fh:
            for node in self.nodes():
                fh.write(json.dumps(node.as_dict()) + "\n")
        return path


def poissonize_initial(lambda_star: float, x: float, rng: np.random.Generator, size=None):
    """Initial backbone size: Poisson(``lambda_star * x``)."""
    if x <= 0.0:
        raise ValueError("initial mass must be positive")
    return rng.poisson(lambda_star * x, size=size)


def _child_slots(counts: np.ndarray) -> np.ndarray:
    """``1..counts[i]`` for each i, concatenated."""
    total = int(counts.sum())
    if total == 0:
        return np.empty(0, dtype=np.int64)
    starts = np.repeat(np.cumsum(counts) - counts, counts)
    return np.arange(total, dtype=np.int64) - starts + 1


def _first_crossing(birth: np.ndarray, death: np.ndarray, level: int) -> float:
    """First time the alive count of known nodes reaches ``level`` (inf if never)."""
    finite = np.isfinite(death)
    times = np.concatenate([birth, death[finite]])
    delta = np.concatenate([np.ones(birth.size, dtype=np.int64), -np.ones(int(finite.sum()), dtype=np.int64)])
    order = np.lexsort((delta, times))
    running = np.cumsum(delta[order])
    hit = np.flatnonzero(running >= level)
    return float(times[order][hit[0]]) if hit.size else math.inf


def sample_forest(
    mech: BranchingMechanism,
    counts,
    T: float,
    rng: np.random.Generator,
    live_cap: int = 1_000_000,
    motion: Motion | None = None,
    motion_rng: np.random.Generator | None = None,
) -> Forest:
    """Grow one backbone per entry of ``counts`` up to the horizon ``T``.

    Lifetimes and offspring counts come from ``rng``; positions (if ``motion``)
    come from ``motion_rng`` so the genealogy does not depend on whether marks
    are requested.
    """
    if T <= 0.0:
        raise ValueError("horizon must be positive")
    counts = np.asarray(counts, dtype=np.int64).reshape(-1)
    if np.any(counts < 0):
        raise ValueError("initial counts must be non-negative")
    if live_cap < 1:
        raise ValueError("live_cap must be positive")
    if motion is not None and motion_rng is None:
        raise ValueError("motion requires motion_rng")
    n_rep = counts.size
    q = mech.q
    bound = np.full(n_rep, math.inf)
    per_rep = counts.copy()
    next_check = np.full(n_rep, live_cap, dtype=np.int64)

    cols: dict[str, list] = {k: [] for k in ("rep", "par", "kid", "birth", "death", "off", "gen", "bpos", "dpos")}
    rep = np.repeat(np.arange(n_rep, dtype=np.int64), counts)
    par = np.full(rep.size, -1, dtype=np.int64)
    kid = _child_slots(counts)
    birth = np.zeros(rep.size)
    bpos = np.zeros((rep.size, motion.dimension)) if motion else None
    offset = 0
    gen = 0

    while rep.size:
        death = birth + rng.exponential(1.0 / q, rep.size)
        dies = death <= T
        death[~dies] = math.inf
        off = np.zeros(rep.size, dtype=np.int64)
        if dies.any():
            off[dies] = mech.sample_offspring(rng, int(dies.sum()))
        # a single branching with >= live_cap children certifies the cap on its own
        big = dies & (off >= live_cap)
        if big.any():
            np.minimum.at(bound, rep[big], death[big])
        dpos = None
        if motion is not None:
            span = np.minimum(death, T) - birth
            dpos = bpos + motion.sigma * np.sqrt(span)[:, None] * motion_rng.standard_normal(bpos.shape)

        for key, val in (("rep", rep), ("par", par), ("kid", kid), ("birth", birth), ("death", death), ("off", off), ("gen", np.full(rep.size, gen, dtype=np.int32)), ("bpos", bpos), ("dpos", dpos)):
            cols[key].append(val)
        idx = offset + np.arange(rep.size, dtype=np.int64)
        offset += rep.size

        expand = dies & (death < bound[rep])
        n_kids = off[expand]
        kids_per_rep = np.bincount(rep[expand], weights=n_kids, minlength=n_rep).astype(np.int64)
        per_rep += kids_per_rep

        # geometric back-off keeps the certification cost amortised
        heavy = np.flatnonzero(per_rep >= next_check)
        if heavy.size:
            _certify(cols, heavy, bound, live_cap)
            next_check[heavy] = (per_rep[heavy] * 3) // 2
            expand &= death < bound[rep]
            n_kids = off[expand]

        rep = np.repeat(rep[expand], n_kids)
        par = np.repeat(idx[expand], n_kids)
        kid = _child_slots(n_kids)
        birth = np.repeat(death[expand], n_kids)
        if motion is not None:
            bpos = np.repeat(dpos[expand], n_kids, axis=0)
        gen += 1

    cat = {k: (np.concatenate(v) if v and v[0] is not None else None) for k, v in cols.items()}
    if cat["rep"] is None:
        cat.update(rep=np.empty(0, np.int64), par=np.empty(0, np.int64), kid=np.empty(0, np.int64), birth=np.empty(0), death=np.empty(0), off=np.empty(0, np.int64), gen=np.empty(0, np.int32))
    heavy = np.flatnonzero(np.isfinite(bound) | (np.bincount(cat["rep"], minlength=n_rep) >= live_cap))
    if heavy.size:
        _certify({"rep": [cat["rep"]], "birth": [cat["birth"]], "death": [cat["death"]]}, heavy, bound, live_cap)

    keep = cat["birth"] < bound[cat["rep"]]
    if not keep.all():
        remap = np.cumsum(keep) - 1
        cat["par"] = np.where(cat["par"] >= 0, remap[np.maximum(cat["par"], 0)], -1)
        cat = {k: (None if v is None else v[keep]) for k, v in cat.items()}

    return Forest(
        replicate=cat["rep"],
        parent=cat["par"],
        child_index=cat["kid"],
        birth=cat["birth"],
        death=cat["death"],
        offspring=cat["off"],
        generation=cat["gen"],
        horizon=float(T),
        initial_counts=counts,
        cap_time=bound,
        live_cap=int(live_cap),
        birth_position=cat["bpos"],
        death_position=cat["dpos"],
    )


def _certify(cols: dict, heavy: np.ndarray, bound: np.ndarray, live_cap: int) -> None:
    """Tighten ``bound`` for replicates whose known nodes already reach the cap."""
    rep = np.concatenate(cols["rep"])
    sel = np.flatnonzero(np.isin(rep, heavy))
    sel = sel[np.argsort(rep[sel], kind="stable")]
    birth = np.concatenate(cols["birth"])[sel]
    death = np.concatenate(cols["death"])[sel]
    groups = rep[sel]
    cuts = np.flatnonzero(np.diff(groups)) + 1
    for lo, hi in zip(np.r_[0, cuts], np.r_[cuts, groups.size]):
        r = groups[lo]
        b, d = birth[lo:hi], death[lo:hi]
        keep = b < bound[r]
        if keep.sum() >= live_cap:
            bound[r] = min(bound[r], _first_crossing(b[keep], d[keep], live_cap))


def sample_backbone(
    mech: BranchingMechanism,
    initial_count: int,
    T: float,
    rng: np.random.Generator,
    motion: Motion | None = None,
    motion_rng: np.random.Generator | None = None,
    cap: int = 1_000_000,
) -> BackboneTree:
    """One backbone tree from ``initial_count`` roots.

    Raises:
        PopulationCapExceeded: the live count reached ``cap``; the exception
            carries the tree (complete before ``capped_from``).
    """
    if initial_count < 0:
        raise ValueError("initial_count must be non-negative")
    forest = sample_forest(mech, [initial_count], T, rng, cap, motion, motion_rng)
    tree = forest.subtree(0)
    if tree.capped[0]:
        raise PopulationCapExceeded(
            f"live backbone count reached {cap} at t={tree.cap_time[0]:.6g}",
            tree,
            float(tree.cap_time[0]),
        )
    return tree
