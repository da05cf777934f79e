"""Finite-difference audit of every autodiff primitive and of the composed
counterfactual objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .engine import CounterfactualQuery, VariableSpace, objective_var
from .models import (AttributeEditor, AttributePredictor, Classifier, LatentGenerator, MlpSpec,
                     init_mlp)

PRIMITIVE_TOL = 1e-5
COMPOSED_TOL = 1e-4
KINK_MARGIN = 1e-3

_RNG = np.random.default_rng(123)
_W = _RNG.normal(size=(3, 3))
_B = _RNG.normal(size=3)
_M = _RNG.normal(size=(3, 5))
_C = _RNG.normal(size=(4, 1))
_WEIGHTS = _RNG.normal(size=(4, 3))

# Each primitive wrapped into a smooth scalar function of a (4, 3) input.
PRIMITIVES = {
    "add": lambda x: ad.sum_(ad.mul(ad.add(x, _C), _WEIGHTS)),
    "sub": lambda x: ad.sum_(ad.mul(ad.sub(1.5, x), _WEIGHTS)),
    "mul_elementwise": lambda x: ad.sum_(ad.mul(ad.mul(x, x), _WEIGHTS)),
    "matmul": lambda x: ad.sum_(ad.tanh(ad.matmul(x, _M))),
    "affine": lambda x: ad.sum_(ad.tanh(ad.affine(x, _W, _B))),
    "relu": lambda x: ad.sum_(ad.mul(ad.relu(x), _WEIGHTS)),
    "tanh": lambda x: ad.sum_(ad.mul(ad.tanh(x), _WEIGHTS)),
    "sigmoid": lambda x: ad.sum_(ad.mul(ad.sigmoid(x), _WEIGHTS)),
    "softmax": lambda x: ad.sum_(ad.mul(ad.softmax(x), _WEIGHTS)),
    "concat": lambda x: ad.sum_(ad.mul(ad.concat(x, ad.mul(x, x), axis=0),
                                       np.vstack([_WEIGHTS, _WEIGHTS]))),
    "reshape": lambda x: ad.sum_(ad.mul(ad.reshape(x, (3, 4)), _WEIGHTS.reshape(3, 4))),
    "sum": lambda x: ad.sum_(ad.mul(ad.sum_(ad.mul(x, x), axis=0), _B)),
    "mean": lambda x: ad.mul(ad.mean(ad.mul(x, _WEIGHTS)), 2.0),
    "l1_distance": lambda x: ad.l1_distance(x, _WEIGHTS),
    "cross_entropy": lambda x: ad.cross_entropy(ad.softmax(x), np.array([0, 1, 2, 1])),
    "log": lambda x: ad.sum_(ad.log(ad.sigmoid(x))),
    "exp": lambda x: ad.sum_(ad.mul(ad.exp(ad.mul(x, 0.5)), _WEIGHTS)),
    "abs": lambda x: ad.sum_(ad.abs_(x)),
}

# points closer than KINK_MARGIN to a kink are pushed away
KINKS = {"relu": 0.0, "abs": 0.0, "l1_distance": _WEIGHTS}


@dataclass(frozen=True)
class CheckRow:
    name: str
    max_rel_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_err < self.tolerance)


def check_primitive(name: str, points: int = 100, seed: int = 0) -> CheckRow:
    rng = np.random.default_rng([seed, sorted(PRIMITIVES).index(name)])
    worst = 0.0
    for _ in range(points):
        x = rng.normal(size=(4, 3))
        if name in KINKS:
            x = np.where(np.abs(x - KINKS[name]) < KINK_MARGIN, x + 0.5, x)
        worst = max(worst, ad.grad_check(PRIMITIVES[name], x))
    return CheckRow(name, worst, PRIMITIVE_TOL)


def fixture_models(seed: int = 0, image_shape=(16, 16)):
    """Untrained but seeded classifier, latent generator and attribute editor."""
    n_pix = int(np.prod(image_shape))
    clf = Classifier(init_mlp(MlpSpec((n_pix, 32, 2), head="softmax"), seed))
    gen = LatentGenerator(init_mlp(MlpSpec((4, 32, n_pix), head="sigmoid"), seed + 1),
                          image_shape)
    names = ("a0", "a1", "a2")
    pred = AttributePredictor(init_mlp(MlpSpec((n_pix, 16, 3), head="sigmoid"), seed + 2), names)
    editor = AttributeEditor(init_mlp(MlpSpec((n_pix, 16, 6), head="linear"), seed + 3),
                             init_mlp(MlpSpec((6 + 3, 32, n_pix), head="sigmoid"), seed + 4),
                             names, image_shape, predictor=pred)
    return clf, gen, editor


def _away_from_l1_kinks(space: VariableSpace, v: np.ndarray, image: np.ndarray) -> bool:
    tape = ad.Tape()
    rendered = space.render(tape.constant(v), image).value
    return bool(np.all(np.abs(rendered - image) > KINK_MARGIN))


def check_composed(kind: str, points: int = 20, seed: int = 0, lam: float = 1.0) -> CheckRow:
    """Gradient of the full objective w.r.t. the search variables, ``kind`` in
    ``{"latent", "attribute"}``."""
    clf, gen, editor = fixture_models(seed)
    rng = np.random.default_rng([seed, 7])
    image = rng.uniform(0.0, 1.0, size=(16, 16))
    if kind == "latent":
        space = VariableSpace.latent(gen)
    elif kind == "attribute":
        space = VariableSpace.attribute(editor)
    else:
        raise ValueError(f"unknown variable space {kind!r}")
    target = 1 - int(np.argmax(clf.probs(image)))
    worst, done = 0.0, 0
    while done < points:
        v = rng.uniform(space.lower, space.upper)
        if not _away_from_l1_kinks(space, v, image):
            continue
        query = CounterfactualQuery(image, "criticism", target, space, v, lam=lam)
        worst = max(worst, ad.grad_check(lambda var: objective_var(var, query, clf), v))
        done += 1
    return CheckRow(f"objective[{kind}]", worst, COMPOSED_TOL)


def run_gradcheck(points: int = 100, composed_points: int = 20, seed: int = 0) -> list[CheckRow]:
    rows = [check_primitive(name, points, seed) for name in sorted(PRIMITIVES)]
    rows += [check_composed(kind, composed_points, seed) for kind in ("latent", "attribute")]
    return rows


def format_table(rows: list[CheckRow]) -> str:
    width = max(len(r.name) for r in rows)
    lines = [f"{'check':<{width}}  {'max_rel_err':>12}  {'tol':>8}  result"]
    for r in rows:
        lines.append(f"{r.name:<{width}}  {r.max_rel_err:12.3e}  {r.tolerance:8.0e}  "
                     f"{'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
