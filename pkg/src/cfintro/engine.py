"""Counterfactual search over generator inputs.

The classifier ``C`` and generator ``G`` stay frozen; only the generator input
(a latent code or an attribute vector) moves. For a query image ``I`` and a
target class ``t`` the penalized objective is

    total(v) = lam * CE(C(G(v)), t) + ||I - G(v)||_1

minimized by projected gradient descent. Criticisms use a target different
from the predicted class; prototypes use the predicted class itself with a
high confidence threshold. :func:`minimal_change_bisect` searches ``lam`` for
the smallest change that still flips the prediction.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Any, Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var

LATENT_BOUND = 3.0
DEFAULT_STEP = {"latent": 0.05, "attribute": 0.02}
DEFAULT_LAMBDA = 10.0
CRITICISM_THRESHOLD = 0.5
PROTOTYPE_THRESHOLD = 0.99


class QueryError(ValueError):
    """Invalid counterfactual query."""


class OptimizationError(RuntimeError):
    """Non-finite objective or gradient during descent."""

    def __init__(self, message: str, step: int):
        super().__init__(f"{message} at step {step}")
        self.step = step


class NoFlipError(RuntimeError):
    """No probed penalty weight produced the target class."""

    def __init__(self, message: str, sweep: list[dict]):
        super().__init__(message)
        self.sweep = sweep


class IdentityGenerator:
    """``G(I; A) = A`` reshaped to the image shape; a test fixture."""

    kind = "identity"

    def __init__(self, image_shape):
        self.image_shape = tuple(image_shape)

    @property
    def attribute_count(self) -> int:
        return int(np.prod(self.image_shape))

    def edit_var(self, image, attributes: Var) -> Var:
        return ad.reshape(attributes, self.image_shape)

    def edit(self, image, attributes) -> np.ndarray:
        return np.asarray(attributes, dtype=np.float64).reshape(self.image_shape)


@dataclass
class VariableSpace:
    """What the search moves: ``latent`` codes or ``attribute`` vectors.

    ``generator`` is a :class:`~cfintro.models.LatentGenerator` for the latent
    kind, or an editor exposing ``edit_var(image, attrs)`` for the attribute
    kind (an :class:`~cfintro.models.AttributeEditor` or the identity fixture).
    """

    kind: str
    generator: Any
    lower: np.ndarray
    upper: np.ndarray
    names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("latent", "attribute"):
            raise QueryError(f"unknown variable space kind {self.kind!r}")
        if self.kind == "latent" and not hasattr(self.generator, "generate"):
            raise QueryError("latent variables need a LatentGenerator")
        if self.kind == "attribute" and not hasattr(self.generator, "edit_var"):
            raise QueryError("attribute variables need an attribute editor")
        self.lower = np.asarray(self.lower, dtype=np.float64)
        self.upper = np.asarray(self.upper, dtype=np.float64)
        if self.lower.shape != self.upper.shape or self.lower.ndim != 1:
            raise QueryError("bounds must be two vectors of equal length")
        if np.any(self.lower > self.upper):
            raise QueryError("lower bound exceeds upper bound")
        if not self.names:
            self.names = [f"v{i}" for i in range(self.dim)]

    @property
    def dim(self) -> int:
        return len(self.lower)

    @classmethod
    def latent(cls, generator, bound: float = LATENT_BOUND) -> "VariableSpace":
        d = generator.latent_dim
        return cls("latent", generator, np.full(d, -bound), np.full(d, bound))

    @classmethod
    def attribute(cls, editor, lower=0.0, upper=1.0) -> "VariableSpace":
        n = editor.attribute_count
        names = list(getattr(editor, "attribute_names", []))
        return cls("attribute", editor, np.full(n, lower), np.full(n, upper), names)

    def render(self, variables: Var, image: np.ndarray) -> Var:
        if self.kind == "latent":
            return self.generator.generate(variables)
        return self.generator.edit_var(image, variables)

    def clip(self, v: np.ndarray) -> np.ndarray:
        return np.clip(v, self.lower, self.upper)

    def mask_for(self, frozen_names: Iterable[str]) -> np.ndarray:
        mask = np.zeros(self.dim, dtype=bool)
        for name in frozen_names:
            if name not in self.names:
                raise QueryError(f"unknown variable {name!r}; known: {', '.join(self.names)}")
            mask[self.names.index(name)] = True
        return mask


@dataclass
class CounterfactualQuery:
    image: np.ndarray
    mode: str
    target_class: int
    space: VariableSpace
    initial: np.ndarray
    lam: float = DEFAULT_LAMBDA
    frozen: np.ndarray | None = None
    max_steps: int = 2000
    step_size: float | None = None
    threshold: float | None = None
    p: int = 1
    seed: int = 0

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        self.initial = np.asarray(self.initial, dtype=np.float64)
        if self.frozen is None:
            self.frozen = np.zeros(self.space.dim, dtype=bool)
        self.frozen = np.asarray(self.frozen, dtype=bool)
        if self.step_size is None:
            self.step_size = DEFAULT_STEP[self.space.kind]
        if self.threshold is None:
            self.threshold = PROTOTYPE_THRESHOLD if self.mode == "prototype" else CRITICISM_THRESHOLD

    def with_lambda(self, lam: float) -> "CounterfactualQuery":
        return replace(self, lam=float(lam))


def validate(query: CounterfactualQuery, classifier) -> None:
    """Check a query against the frozen models; raises :class:`QueryError`."""
    if query.mode not in ("criticism", "prototype"):
        raise QueryError(f"mode must be 'criticism' or 'prototype', got {query.mode!r}")
    if query.p != 1:
        raise QueryError(f"only the L1 distance (p=1) is implemented, got p={query.p}")
    dim = query.space.dim
    if query.initial.shape != (dim,):
        raise QueryError(f"initial variables have shape {query.initial.shape}, expected ({dim},)")
    if query.frozen.shape != (dim,):
        raise QueryError(f"frozen mask has length {len(query.frozen)}, expected {dim}")
    if not (query.lam >= 0 and math.isfinite(query.lam)):
        raise QueryError(f"lambda must be a finite non-negative number, got {query.lam}")
    if not 0.0 < query.threshold < 1.0:
        raise QueryError(f"threshold must lie in (0, 1), got {query.threshold}")
    if query.max_steps < 0 or query.step_size <= 0:
        raise QueryError("max_steps must be >= 0 and step_size > 0")
    k = classifier.num_classes
    if not 0 <= query.target_class < k:
        raise QueryError(f"target class {query.target_class} outside [0, {k})")
    current = int(np.argmax(_probs_of_image(classifier, query.image)))
    if query.mode == "criticism" and query.target_class == current:
        raise QueryError(f"target class {current} is already the predicted class; "
                         "use prototype mode to reinforce it")
    if query.mode == "prototype" and query.target_class != current:
        raise QueryError(f"prototype target must be the predicted class {current}")


def _probs_of_image(classifier, image) -> np.ndarray:
    tape = Tape()
    return classifier.forward(tape.constant(image)).value


def apply_frozen_mask(gradient, mask) -> np.ndarray:
    gradient = np.asarray(gradient, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if gradient.shape != mask.shape:
        raise ad.ShapeError("apply_frozen_mask", gradient.shape, mask.shape)
    return np.where(mask, 0.0, gradient)


@dataclass
class Evaluation:
    total: float
    cls_term: float
    dist_term: float
    image: np.ndarray
    probs: np.ndarray
    gradient: np.ndarray


def _build(variables: Var, query: CounterfactualQuery, classifier):
    image_var = query.space.render(variables, query.image)
    probs = classifier.forward(image_var)
    cls_term = ad.cross_entropy(probs, query.target_class)
    dist_term = ad.l1_distance(image_var, query.image)
    total = ad.add(ad.mul(cls_term, query.lam), dist_term)
    return total, cls_term, dist_term, image_var, probs


def evaluate(variables: np.ndarray, query: CounterfactualQuery, classifier) -> Evaluation:
    tape = Tape()
    v = tape.variable(variables)
    total, cls_term, dist_term, image_var, probs = _build(v, query, classifier)
    grad = tape.backward(total)[v]
    return Evaluation(total.item(), cls_term.item(), dist_term.item(),
                      image_var.value, probs.value, grad)


def objective(variables: np.ndarray, query: CounterfactualQuery, classifier
              ) -> tuple[float, float, float]:
    """``(total, classification term, distance term)`` at ``variables``."""
    v = np.asarray(variables, dtype=np.float64)
    if v.shape != (query.space.dim,):
        raise QueryError(f"variables have shape {v.shape}, expected ({query.space.dim},)")
    e = evaluate(v, query, classifier)
    return e.total, e.cls_term, e.dist_term


def objective_var(variables: Var, query: CounterfactualQuery, classifier) -> Var:
    """Differentiable total objective, for gradient checking."""
    return _build(variables, query, classifier)[0]


@dataclass
class TrajectoryStep:
    step: int
    variables: np.ndarray
    image: np.ndarray
    probs: np.ndarray
    objective: float
    cls_term: float
    dist_term: float

    def record(self) -> dict:
        return {"step": self.step, "variables": self.variables.tolist(),
                "probs": self.probs.tolist(), "objective": self.objective,
                "cls_term": self.cls_term, "dist_term": self.dist_term}


@dataclass
class Trajectory:
    steps: list[TrajectoryStep]
    outcome: str
    lam: float
    target_class: int
    mode: str = "criticism"

    @property
    def final(self) -> TrajectoryStep:
        return self.steps[-1]

    @property
    def succeeded(self) -> bool:
        return self.outcome == "success"

    @property
    def delta(self) -> float:
        return self.final.dist_term

    def to_jsonl(self) -> str:
        lines = [json.dumps(s.record()) for s in self.steps]
        lines.append(json.dumps({"outcome": self.outcome, "delta": self.delta, "lambda": self.lam}))
        return "\n".join(lines) + "\n"


def read_trajectory_jsonl(text: str) -> tuple[list[dict], dict]:
    """Parse a serialized trajectory into ``(step records, summary record)``."""
    records = [json.loads(line) for line in text.splitlines() if line.strip()]
    step_keys = {"step", "variables", "probs", "objective", "cls_term", "dist_term"}
    steps, summary = records[:-1], records[-1]
    for r in steps:
        if set(r) != step_keys:
            raise ValueError(f"malformed step record: {sorted(r)}")
    if set(summary) != {"outcome", "delta", "lambda"}:
        raise ValueError(f"malformed summary record: {sorted(summary)}")
    return steps, summary


def _succeeded(probs: np.ndarray, query: CounterfactualQuery) -> bool:
    p = probs[query.target_class]
    if query.mode == "prototype":
        return bool(p >= query.threshold)
    return bool(int(np.argmax(probs)) == query.target_class and p >= query.threshold)


def optimize(query: CounterfactualQuery, classifier) -> Trajectory:
    """Projected gradient descent on the penalized objective.

    Each step evaluates the current variables, records them, stops if the
    success test holds, and otherwise moves against the gradient with frozen
    coordinates zeroed, then clips to the box.
    """
    validate(query, classifier)
    v = query.space.clip(query.initial.copy())
    steps: list[TrajectoryStep] = []
    outcome = "budget_exhausted"
    for i in range(query.max_steps + 1):
        e = evaluate(v, query, classifier)
        if not (np.isfinite(e.total) and np.all(np.isfinite(e.gradient))):
            raise OptimizationError("non-finite objective or gradient", i)
        steps.append(TrajectoryStep(i, v.copy(), e.image, e.probs, e.total, e.cls_term, e.dist_term))
        if _succeeded(e.probs, query):
            outcome = "success"
            break
        if i == query.max_steps:
            break
        g = apply_frozen_mask(e.gradient, query.frozen)
        v = np.where(query.frozen, v, query.space.clip(v - query.step_size * g))
    return Trajectory(steps, outcome, query.lam, query.target_class, query.mode)


def prototype_optimize(query: CounterfactualQuery, classifier) -> Trajectory:
    if query.mode != "prototype":
        query = replace(query, mode="prototype", threshold=PROTOTYPE_THRESHOLD)
    return optimize(query, classifier)


@dataclass
class MinimalChangeResult:
    lam: float
    delta: float
    trajectory: Trajectory
    sweep: list[dict]
    iterations: int

    def summary(self) -> dict:
        return {"lambda": self.lam, "delta": self.delta, "iterations": self.iterations,
                "sweep": self.sweep}


def minimal_change_bisect(query: CounterfactualQuery, classifier, lam_lo: float, lam_hi: float,
                          iterations: int = 20, expand: float = 10.0, cap: float = 1e6
                          ) -> MinimalChangeResult:
    """Search the penalty weight for the smallest prediction-flipping change.

    ``lam_hi`` is grown by ``expand`` until a run flips the prediction (up to
    ``cap``), then ``[lam_lo, lam_hi]`` is bisected on the predicate "the run
    at this weight succeeds". Every probe lands in the sweep log. Among
    flipping probes the one with the smallest distance wins, ties going to
    the smaller weight; when distance grows with the weight this is the
    smallest flipping weight.
    """
    if query.mode != "criticism":
        raise QueryError("minimal-change search applies to criticism queries")
    if not 0 <= lam_lo <= lam_hi:
        raise QueryError(f"need 0 <= lambda_lo <= lambda_hi, got {lam_lo}, {lam_hi}")
    validate(query, classifier)
    sweep: list[dict] = []
    runs: dict[float, Trajectory] = {}

    def probe(lam: float) -> bool:
        traj = optimize(query.with_lambda(lam), classifier)
        runs[lam] = traj
        sweep.append({"lambda": lam, "flipped": traj.succeeded, "delta": traj.delta,
                      "steps": len(traj.steps)})
        return traj.succeeded

    hi = float(lam_hi)
    while not probe(hi):
        if hi >= cap:
            raise NoFlipError(f"no flip for lambda up to {cap:g}", sweep)
        hi = min(hi * expand, cap) if hi > 0 else 1.0
    lo = float(lam_lo)
    used = 0
    if lo < hi:
        for _ in range(iterations):
            mid = 0.5 * (lo + hi)
            used += 1
            if probe(mid):
                hi = mid
            else:
                lo = mid
    flips = [(s["delta"], s["lambda"]) for s in sweep if s["flipped"]]
    delta, lam = min(flips)
    return MinimalChangeResult(lam, delta, runs[lam], sweep, used)


def invert_to_latent(image: np.ndarray, generator, refine_steps: int = 200,
                     step_size: float = 0.05, bound: float = LATENT_BOUND
                     ) -> tuple[np.ndarray, float]:
    """Encode ``image`` then refine the code by descent on ``||I - G(L)||_1``.

    A step is only accepted when it lowers the reconstruction error; a rejected
    step halves the step size. Returns the code and its mean per-pixel error.
    """
    image = np.asarray(image, dtype=np.float64)
    z = generator.encode(image)

    def err_and_grad(z):
        tape = Tape()
        zv = tape.variable(z)
        d = ad.l1_distance(generator.generate(zv), image)
        return d.item(), tape.backward(d)[zv]

    err, grad = err_and_grad(z)
    eta = step_size
    for _ in range(refine_steps):
        cand = np.clip(z - eta * grad, -bound, bound)
        cerr, cgrad = err_and_grad(cand)
        if cerr < err:
            z, err, grad = cand, cerr, cgrad
            eta *= 1.2
        else:
            eta *= 0.5
    return z, err / image.size
