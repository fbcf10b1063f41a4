"""Relational domain model: objects, states, deictic references, features.

States are stored object-major: ``state.values[o, p]`` is property ``p`` of
the object at position ``o`` in the instance.  Object sets are frozensets of
those positions.  Action targets are positions as well; the dataset reader
and writer translate to and from object ids.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class DomainError(ValueError):
    """Raised on unknown names or malformed domain objects."""


ObjectSet = frozenset

# --------------------------------------------------------------------------
# aggregators
# --------------------------------------------------------------------------


def _agg_mean(rows: np.ndarray) -> np.ndarray:
    return rows.mean(axis=0)


def _agg_max(rows: np.ndarray) -> np.ndarray:
    return rows.max(axis=0)


def _agg_cardinality(rows: np.ndarray) -> np.ndarray:
    return np.full(rows.shape[1], float(rows.shape[0]))


AGGREGATORS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "mean": _agg_mean,
    "max": _agg_max,
    "cardinality": _agg_cardinality,
}


# --------------------------------------------------------------------------
# domain
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ReferenceFunction:
    """A deictic reference function F(O_1..O_m) -> set of objects.

    ``select(state, args)`` receives one object set per argument and returns
    the positions of every object satisfying the underlying relation.
    """

    name: str
    arity: int
    select: Callable[["State", tuple], Iterable[int]] = field(compare=False)
    aggregator: str = "mean"

    def __post_init__(self):
        if self.arity < 1:
            raise DomainError(f"reference {self.name!r}: arity must be >= 1")
        if self.aggregator not in AGGREGATORS:
            raise DomainError(f"reference {self.name!r}: unknown aggregator {self.aggregator!r}")


def relation_reference(name: str, arity: int, relation, aggregator: str = "mean") -> ReferenceFunction:
    """Build a reference from a predicate ``relation(state, o, *arg_objects)``.

    Set-valued arguments are treated existentially: ``o`` is selected if the
    relation holds for some choice of members.  Argument objects themselves
    are never selected.
    """

    def select(state, args):
        used = frozenset().union(*args)
        found = []
        for o in range(state.n_objects):
            if o in used:
                continue
            if any(relation(state, o, *combo) for combo in _product(args)):
                found.append(o)
        return found

    return ReferenceFunction(name, arity, select, aggregator)


def _product(sets):
    if not sets:
        yield ()
        return
    head, *rest = sets
    for h in sorted(head):
        for tail in _product(rest):
            yield (h, *tail)


def within_radius(radius: float, loc: Sequence[int], name: str | None = None) -> ReferenceFunction:
    """Objects whose location is strictly closer than ``radius`` to the argument."""
    loc = list(loc)

    def rel(state, o, o1):
        d = state.values[o, loc] - state.values[o1, loc]
        return float(np.sqrt(d @ d)) < radius

    return relation_reference(name or f"within{radius:g}", 1, rel)


@dataclass(frozen=True)
class ActionTemplate:
    name: str
    param_dim: int
    arity: int
    program: str = ""

    def __post_init__(self):
        if self.arity < 1 or self.param_dim < 0:
            raise DomainError(f"template {self.name!r}: bad arity/param_dim")


@dataclass(frozen=True)
class Domain:
    properties: tuple[str, ...]
    references: tuple[ReferenceFunction, ...]
    templates: tuple[ActionTemplate, ...]

    def __post_init__(self):
        if len(set(self.properties)) != len(self.properties):
            raise DomainError("property names must be unique")
        names = [r.name for r in self.references]
        if len(set(names)) != len(names):
            raise DomainError("reference names must be unique")

    @property
    def n_props(self) -> int:
        return len(self.properties)

    def reference(self, name: str) -> ReferenceFunction:
        for r in self.references:
            if r.name == name:
                return r
        raise DomainError(f"unknown reference function {name!r}")

    def template(self, name: str) -> ActionTemplate:
        for t in self.templates:
            if t.name == name:
                return t
        raise DomainError(f"unknown action template {name!r}")

    def prop_index(self, name: str) -> int:
        return self.properties.index(name)


@dataclass(frozen=True)
class ProblemInstance:
    domain: Domain
    objects: tuple[str, ...]
    instance_id: str = ""

    def __post_init__(self):
        if len(self.objects) < 1:
            raise DomainError("a problem instance needs at least one object")
        if len(set(self.objects)) != len(self.objects):
            raise DomainError("object ids must be distinct")


@dataclass(frozen=True, eq=False)
class State:
    instance: ProblemInstance
    values: np.ndarray
    _memo: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.float64)
        if vals.shape != (len(self.instance.objects), self.instance.domain.n_props):
            raise DomainError(f"state shape {vals.shape} does not match instance")
        if not np.all(np.isfinite(vals)):
            raise DomainError("state entries must be finite")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def n_objects(self) -> int:
        return self.values.shape[0]

    def __getitem__(self, key):
        o, p = key
        if isinstance(p, str):
            p = self.instance.domain.prop_index(p)
        return self.values[o, p]

    def memo(self, key, fn):
        """Cache a derived quantity (relation matrices and the like)."""
        try:
            return self._memo[key]
        except KeyError:
            val = self._memo[key] = fn(self)
            return val


@dataclass(frozen=True)
class ActionInstance:
    template: str
    alpha: tuple[float, ...]
    targets: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "alpha", tuple(float(a) for a in self.alpha))
        object.__setattr__(self, "targets", tuple(int(t) for t in self.targets))


@dataclass(frozen=True, eq=False)
class Experience:
    state: State
    action: ActionInstance
    next_state: State
    instance_id: str = ""

    def __post_init__(self):
        if self.state.instance.objects != self.next_state.instance.objects:
            raise DomainError("state and next state must share one problem instance")
        if any(t < 0 or t >= self.state.n_objects for t in self.action.targets):
            raise DomainError("action targets must be objects of the instance")


# --------------------------------------------------------------------------
# reference lists
# --------------------------------------------------------------------------


@dataclass(frozen=True, order=True)
class RefStep:
    """One deictic reference: apply ``function`` to earlier slots ``args``."""

    function: str
    args: tuple[int, ...]

    def __str__(self):
        return f"{self.function}({','.join(f'O{a}' for a in self.args)})"

    def to_json(self):
        return {"function": self.function, "args": list(self.args)}

    @classmethod
    def from_json(cls, d):
        return cls(d["function"], tuple(int(a) for a in d["args"]))


ReferenceList = tuple  # tuple[RefStep, ...]


def refs_str(refs: ReferenceList) -> str:
    return "[" + ", ".join(str(r) for r in refs) + "]"


def check_reference_list(domain: Domain, refs: ReferenceList, n_targets: int, max_len: int | None = None):
    if max_len is not None and len(refs) > max_len:
        raise DomainError(f"reference list longer than {max_len}")
    for t, step in enumerate(refs, start=1):
        fn = domain.reference(step.function)
        if len(step.args) != fn.arity:
            raise DomainError(f"{step}: expected {fn.arity} arguments")
        if any(k < 0 or k >= n_targets + t - 1 for k in step.args):
            raise DomainError(f"{step}: argument refers to an undesignated slot")


def apply_reference(domain: Domain, name: str, state: State, args: tuple) -> frozenset:
    fn = domain.reference(name)
    if len(args) != fn.arity:
        raise DomainError(f"{name}: expected {fn.arity} arguments, got {len(args)}")
    return frozenset(int(o) for o in fn.select(state, tuple(frozenset(a) for a in args)))


def extend_object_lists(domain: Domain, lists: list, step: RefStep, state: State):
    """Append the result of ``step`` to ``lists``; None if it is empty."""
    found = apply_reference(domain, step.function, state, tuple(lists[k] for k in step.args))
    if not found:
        return None
    return [*lists, found]


def build_object_lists(domain: Domain, refs: ReferenceList, targets: Sequence[int], state: State):
    """Designated object sets for ``refs``, or None when the rule does not apply."""
    lists = [frozenset([int(t)]) for t in targets]
    for step in refs:
        lists = extend_object_lists(domain, lists, step, state)
        if lists is None:
            return None
    return lists


def slot_aggregators(domain: Domain, refs: ReferenceList, n_targets: int) -> list[str]:
    return ["mean"] * n_targets + [domain.reference(s.function).aggregator for s in refs]


def input_dim(domain: Domain, refs: ReferenceList, template: str) -> int:
    t = domain.template(template)
    return t.param_dim + domain.n_props * (t.arity + len(refs))


def output_dim(domain: Domain, refs: ReferenceList, template: str) -> int:
    t = domain.template(template)
    return domain.n_props * (t.arity + len(refs))


def extract_input(domain: Domain, refs: ReferenceList, lists: list, state: State, action: ActionInstance) -> np.ndarray:
    """x = [alpha, aggregated properties of slot 0, slot 1, ...]."""
    aggs = slot_aggregators(domain, refs, len(action.targets))
    if len(aggs) != len(lists):
        raise RuntimeError(f"{len(lists)} object slots for a signature with {len(aggs)}")
    parts = [np.asarray(action.alpha, dtype=np.float64)]
    for agg, objs in zip(aggs, lists):
        parts.append(AGGREGATORS[agg](state.values[sorted(objs)]))
    return np.concatenate(parts)


def extract_output(lists: list, next_state: State) -> np.ndarray:
    """y = mean-aggregated next-state properties of every output slot."""
    if not lists:
        raise RuntimeError("empty output object list")
    return np.concatenate([next_state.values[sorted(objs)].mean(axis=0) for objs in lists])


def score_rule(domain: Domain, rule, state: State, action: ActionInstance) -> int:
    """0 if ``rule`` does not apply to (state, action), else N_gamma + N_delta + 1."""
    if rule.template != action.template:
        return 0
    if build_object_lists(domain, rule.gamma, action.targets, state) is None:
        return 0
    if build_object_lists(domain, rule.delta, action.targets, state) is None:
        return 0
    return len(rule.gamma) + len(rule.delta) + 1


# --------------------------------------------------------------------------
# dataset io (line-delimited json)
# --------------------------------------------------------------------------

DATASET_FIELDS = ("instance", "objects", "props", "state", "action", "next_state")


def _num(x: float) -> str:
    x = float(x)
    if not math.isfinite(x):
        raise ValueError("non-finite value in dataset")
    return format(x, ".17g")


def _table(vals: np.ndarray) -> str:
    return "[" + ",".join("[" + ",".join(_num(v) for v in row) + "]" for row in vals) + "]"


def experience_to_json(exp: Experience) -> str:
    inst = exp.state.instance
    objs = inst.objects
    action = (
        '{"template":' + json.dumps(exp.action.template)
        + ',"alpha":[' + ",".join(_num(a) for a in exp.action.alpha) + "]"
        + ',"targets":' + json.dumps([objs[t] for t in exp.action.targets], separators=(",", ":")) + "}"
    )
    return (
        '{"instance":' + json.dumps(exp.instance_id or inst.instance_id)
        + ',"objects":' + json.dumps(list(objs), separators=(",", ":"))
        + ',"props":' + json.dumps(list(inst.domain.properties), separators=(",", ":"))
        + ',"state":' + _table(exp.state.values)
        + ',"action":' + action
        + ',"next_state":' + _table(exp.next_state.values)
        + "}"
    )


def experience_from_json(line: str, domain: Domain) -> Experience:
    d = json.loads(line)
    if tuple(d["props"]) != domain.properties:
        raise DomainError(f"dataset properties {d['props']} do not match domain")
    inst = ProblemInstance(domain, tuple(str(o) for o in d["objects"]), str(d["instance"]))
    index = {o: i for i, o in enumerate(inst.objects)}
    a = d["action"]
    domain.template(a["template"])
    action = ActionInstance(a["template"], tuple(a["alpha"]), tuple(index[str(t)] for t in a["targets"]))
    return Experience(State(inst, np.array(d["state"], dtype=np.float64)), action,
                      State(inst, np.array(d["next_state"], dtype=np.float64)), inst.instance_id)


def write_dataset(path, experiences: Iterable[Experience]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for exp in experiences:
            fh.write(experience_to_json(exp))
            fh.write("\n")


def read_dataset(path, domain: Domain) -> list[Experience]:
    with open(path, encoding="utf-8") as fh:
        return [experience_from_json(line, domain) for line in fh if line.strip()]
