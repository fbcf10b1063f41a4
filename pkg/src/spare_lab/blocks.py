"""Kinematic block-pushing surrogate: stacks of blocks plus distractors.

Pushing a block translates it and everything stacked on it along the
gripper-to-target direction.  Shapes and heights never change.  A stack
that runs into a distractor stops at contact and the distractor takes the
remaining displacement.  Noise is one Gaussian perturbation of the push
distance per action.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import _kernels
from .relational import (
    ActionInstance,
    ActionTemplate,
    Domain,
    Experience,
    ProblemInstance,
    ReferenceFunction,
    State,
)

PROPS = ("width", "length", "height", "x", "y", "z")
DIMS = [0, 1, 2]
XYZ = [3, 4, 5]
STACK_TOL = 1e-6


class GenerationError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# reference functions
# --------------------------------------------------------------------------


def support_matrix(state: State) -> np.ndarray:
    """sup[i, j] is True when block j rests directly on block i."""
    vals = state.values
    return state.memo("support", lambda s: _kernels.support_matrix(
        np.ascontiguousarray(vals[:, XYZ]), np.ascontiguousarray(vals[:, DIMS]), STACK_TOL))


def _above(state, args):
    (objs,) = args
    sup = support_matrix(state)
    return {int(j) for i in objs for j in np.nonzero(sup[i])[0]}


def _below(state, args):
    (objs,) = args
    sup = support_matrix(state)
    return {int(i) for j in objs for i in np.nonzero(sup[:, j])[0]}


def above_closure(state: State, objs) -> set[int]:
    found: set[int] = set()
    frontier = set(objs)
    while frontier:
        frontier = _above(state, (frontier,)) - found
        found |= frontier
    return found


def _above_star(state, args):
    (objs,) = args
    return above_closure(state, objs)


def _nearest(state, args):
    (objs,) = args
    d2 = state.memo("sqdist", lambda s: _kernels.pairwise_sqdist(np.ascontiguousarray(s.values[:, XYZ])))
    best, arg = np.inf, -1
    for i in sorted(objs):
        for j in range(state.n_objects):
            if j in objs:
                continue
            if d2[i, j] < best:
                best, arg = d2[i, j], j
    return {arg} if arg >= 0 else set()


REFERENCES = (
    ReferenceFunction("above", 1, _above),
    ReferenceFunction("above*", 1, _above_star),
    ReferenceFunction("below", 1, _below),
    ReferenceFunction("nearest", 1, _nearest),
)

PUSH = ActionTemplate("push", param_dim=4, arity=1, program="push")

DOMAIN = Domain(PROPS, REFERENCES, (PUSH,))


# --------------------------------------------------------------------------
# scenes
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Block:
    id: str
    width: float
    length: float
    height: float
    x: float
    y: float
    z: float = 0.0

    def __post_init__(self):
        if min(self.width, self.length, self.height) <= 0 or self.z < 0:
            raise ValueError(f"block {self.id}: bad dimensions or pose")

    def row(self):
        return [self.width, self.length, self.height, self.x, self.y, self.z]


@dataclass(frozen=True)
class PushAction:
    gripper: tuple[float, float, float]
    distance: float
    target: int

    def __post_init__(self):
        if self.distance < 0:
            raise ValueError("push distance must be >= 0")

    def to_action(self) -> ActionInstance:
        return ActionInstance("push", (*self.gripper, self.distance), (self.target,))


@dataclass(frozen=True)
class SceneConfig:
    stack_height: int = 3
    n_extra: int = 0
    edge_range: tuple[float, float] = (0.04, 0.10)
    table_half: float = 0.5
    stack_center_half: float = 0.02
    # max center offset of a block from the one below, as a fraction of that
    # block's half extent
    stack_offset_frac: float = 0.5
    push_range: tuple[float, float] = (0.02, 0.15)
    gripper_radius: tuple[float, float] = (0.08, 0.15)
    gripper_z: tuple[float, float] = (0.0, 0.05)
    noise_std: float = 0.005
    clearance: float = 0.4
    distractor_spacing: float = 0.15
    target: str = "bottom"  # or "any"
    shuffle_objects: bool = True
    max_tries: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.stack_height < 1 or self.n_extra < 0 or self.noise_std < 0:
            raise ValueError("invalid scene config")
        for lo, hi in (self.edge_range, self.push_range, self.gripper_radius, self.gripper_z):
            if hi < lo:
                raise ValueError("empty sampling range")
        if self.target not in ("bottom", "any"):
            raise ValueError(f"unknown target policy {self.target!r}")


def sample_blocks(cfg: SceneConfig, rng: np.random.Generator) -> list[Block]:
    lo, hi = cfg.edge_range
    blocks = []
    cx, cy = rng.uniform(-cfg.stack_center_half, cfg.stack_center_half, size=2)
    z = 0.0
    below = None
    for k in range(cfg.stack_height):
        w, l, h = rng.uniform(lo, hi, size=3)
        if below is not None:
            fx, fy = rng.uniform(-cfg.stack_offset_frac, cfg.stack_offset_frac, size=2)
            cx = below.x + fx * 0.5 * below.width
            cy = below.y + fy * 0.5 * below.length
        blk = Block(f"s{k}", w, l, h, cx, cy, z)
        blocks.append(blk)
        z += h
        below = blk
    base = blocks[0]
    extras: list[Block] = []
    for k in range(cfg.n_extra):
        for _ in range(cfg.max_tries):
            x, y = rng.uniform(-cfg.table_half, cfg.table_half, size=2)
            if np.hypot(x - base.x, y - base.y) < cfg.clearance:
                continue
            if any(np.hypot(x - e.x, y - e.y) < cfg.distractor_spacing for e in extras):
                continue
            w, l, h = rng.uniform(lo, hi, size=3)
            extras.append(Block(f"d{k}", w, l, h, x, y, 0.0))
            break
        else:
            raise GenerationError(f"could not place distractor {k} after {cfg.max_tries} tries")
    return blocks + extras


def sample_instance(cfg: SceneConfig, rng: np.random.Generator, instance_id: str = ""):
    blocks = sample_blocks(cfg, rng)
    if cfg.shuffle_objects:
        blocks = [blocks[i] for i in rng.permutation(len(blocks))]
    inst = ProblemInstance(DOMAIN, tuple(b.id for b in blocks), instance_id)
    return inst, State(inst, np.array([b.row() for b in blocks]))


def stack_members(state: State, target: int) -> list[int]:
    """The target plus everything stacked on it, bottom-up."""
    members = [target] + sorted(above_closure(state, [target]), key=lambda o: state.values[o, 5])
    return members


def stack_height_of(exp: Experience) -> int:
    return len(stack_members(exp.state, exp.action.targets[0]))


def sample_push(cfg: SceneConfig, state: State, rng: np.random.Generator) -> ActionInstance:
    if cfg.target == "bottom":
        target = _bottom_of_stack(state)
    else:
        stack = stack_members(state, _bottom_of_stack(state))
        target = stack[int(rng.integers(len(stack)))]
    tx, ty = state.values[target, 3], state.values[target, 4]
    theta = rng.uniform(0.0, 2 * np.pi)
    r = rng.uniform(*cfg.gripper_radius)
    zg = rng.uniform(*cfg.gripper_z)
    d = rng.uniform(*cfg.push_range)
    return PushAction((tx + r * np.cos(theta), ty + r * np.sin(theta), zg), d, target).to_action()


def _bottom_of_stack(state: State) -> int:
    # the tallest stack resting on the table; ids starting with "s" mark it
    ids = state.instance.objects
    for o, oid in enumerate(ids):
        if oid == "s0":
            return o
    heights = [len(above_closure(state, [o])) if state.values[o, 5] == 0 else -1 for o in range(state.n_objects)]
    return int(np.argmax(heights))


def _contact_time(p, half, u, limit):
    """Earliest s in [0, limit) at which a box offset by p + s*u overlaps."""
    t_in, t_out = -np.inf, np.inf
    for a in range(2):
        if u[a] == 0.0:
            if abs(p[a]) >= half[a]:
                return None
            continue
        t1 = (-half[a] - p[a]) / u[a]
        t2 = (half[a] - p[a]) / u[a]
        t_in = max(t_in, min(t1, t2))
        t_out = min(t_out, max(t1, t2))
    if t_in >= t_out or t_out <= 0.0 or t_in >= limit:
        return None
    return max(t_in, 0.0)


def step(state: State, action, noise_std: float, rng: np.random.Generator) -> State:
    """Apply a push; returns the next state."""
    if isinstance(action, PushAction):
        action = action.to_action()
    vals = state.values
    target = action.targets[0]
    xg, yg, _zg, d = action.alpha
    u = np.array([vals[target, 3] - xg, vals[target, 4] - yg])
    norm = float(np.hypot(u[0], u[1]))
    u = u / norm if norm > 0 else np.array([1.0, 0.0])
    eps = noise_std * rng.standard_normal()
    dist = d + eps
    moving = [target, *sorted(above_closure(state, [target]))]
    new = vals.copy()
    travel, hit = dist, None
    if dist > 0:
        still = [k for k in range(state.n_objects) if k not in moving]
        for m in moving:
            for k in still:
                if vals[m, 5] >= vals[k, 5] + vals[k, 2] or vals[k, 5] >= vals[m, 5] + vals[m, 2]:
                    continue
                p = vals[m, 3:5] - vals[k, 3:5]
                half = 0.5 * (vals[m, 0:2] + vals[k, 0:2])
                s = _contact_time(p, half, u, travel)
                if s is not None and s < travel:
                    travel, hit = s, k
    new[moving, 3] += travel * u[0]
    new[moving, 4] += travel * u[1]
    if hit is not None:
        new[hit, 3] += (dist - travel) * u[0]
        new[hit, 4] += (dist - travel) * u[1]
    return State(state.instance, new)


def parse_mix(text: str) -> dict[int, float]:
    """Parse ``"2:0.15,3:0.15,4:0.70"`` into {height: fraction}."""
    mix = {}
    for part in text.split(","):
        h, frac = part.split(":")
        mix[int(h)] = float(frac)
    total = sum(mix.values())
    if total <= 0:
        raise ValueError(f"bad mix {text!r}")
    return {h: f / total for h, f in mix.items()}


def mix_counts(mix: dict[int, float], count: int) -> dict[int, int]:
    """Largest-remainder split of ``count`` in proportion to ``mix``."""
    total = sum(mix.values())
    if total <= 0 or any(f < 0 for f in mix.values()):
        raise ValueError("mix weights must be >= 0 with a positive sum")
    raw = {h: f / total * count for h, f in mix.items()}
    counts = {h: int(np.floor(v)) for h, v in raw.items()}
    rest = count - sum(counts.values())
    for h in sorted(raw, key=lambda h: (counts[h] - raw[h], h))[:rest]:
        counts[h] += 1
    return counts


def generate_dataset(cfg: SceneConfig, count: int, mix: dict[int, float] | None = None,
                     start: int = 0) -> list[Experience]:
    """``count`` experiences; each derives its own generator from (seed, index).

    With ``mix``, stack heights are allocated in the given proportions and
    assigned to indices in a seeded random order.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    heights = [cfg.stack_height] * count
    if mix:
        counts = mix_counts(mix, count)
        heights = [h for h in sorted(counts) for _ in range(counts[h])]
        order = np.random.default_rng([cfg.seed, 0x6D6978]).permutation(count)
        heights = [heights[i] for i in order]
    out = []
    for i in range(count):
        idx = start + i
        rng = np.random.default_rng([cfg.seed, idx])
        c = replace(cfg, stack_height=heights[i]) if heights[i] != cfg.stack_height else cfg
        inst, state = sample_instance(c, rng, instance_id=f"{cfg.seed}-{idx}")
        action = sample_push(c, state, rng)
        nxt = step(state, action, c.noise_std, rng)
        out.append(Experience(state, action, nxt, inst.instance_id))
    return out
