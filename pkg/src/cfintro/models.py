"""MLP building blocks and the three frozen networks used for introspection.

* :class:`Classifier`          - image -> class probabilities
* :class:`LatentGenerator`     - latent code -> image (decoder of an autoencoder,
                                 with the paired encoder kept for inversion)
* :class:`AttributeEditor`     - (image, attribute vector) -> edited image
* :class:`AttributePredictor`  - image -> per-attribute probabilities (auxiliary)

All forward passes run on an :class:`~cfintro.autodiff.Tape` so gradients can
flow either into the weights (training) or into the inputs (introspection).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var

HEADS = ("softmax", "sigmoid", "linear")
ACTIVATIONS = ("relu", "tanh")


class ModelSpecError(ValueError):
    pass


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths including input and output, e.g. ``(256, 128, 10)``."""

    widths: tuple[int, ...]
    activations: tuple[str, ...] = ()
    head: str = "linear"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        object.__setattr__(self, "widths", widths)
        if len(widths) < 3:
            raise ModelSpecError("an MLP needs an input, at least one hidden layer and an output")
        if any(w <= 0 for w in widths):
            raise ModelSpecError(f"layer widths must be positive, got {widths}")
        acts = tuple(self.activations) or ("relu",) * (len(widths) - 2)
        if len(acts) != len(widths) - 2:
            raise ModelSpecError("one activation per hidden layer")
        for a in acts:
            if a not in ACTIVATIONS:
                raise ModelSpecError(f"unknown activation {a!r}")
        object.__setattr__(self, "activations", acts)
        if self.head not in HEADS:
            raise ModelSpecError(f"unknown head {self.head!r}")

    @property
    def n_in(self) -> int:
        return self.widths[0]

    @property
    def n_out(self) -> int:
        return self.widths[-1]

    def param_shapes(self) -> list[tuple[int, ...]]:
        shapes = []
        for fan_in, fan_out in zip(self.widths[:-1], self.widths[1:]):
            shapes += [(fan_in, fan_out), (fan_out,)]
        return shapes

    def param_count(self) -> int:
        return sum(int(np.prod(s)) for s in self.param_shapes())

    def to_dict(self) -> dict:
        return {"widths": list(self.widths), "activations": list(self.activations), "head": self.head}

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSpec":
        return cls(tuple(d["widths"]), tuple(d.get("activations", ())), d.get("head", "linear"))


class Mlp:
    def __init__(self, spec: MlpSpec, params: Sequence[np.ndarray]):
        shapes = spec.param_shapes()
        if len(params) != len(shapes):
            raise ModelSpecError(f"expected {len(shapes)} parameter arrays, got {len(params)}")
        for p, s in zip(params, shapes):
            if p.shape != s:
                raise ModelSpecError(f"parameter shape {p.shape} does not match spec {s}")
        self.spec = spec
        self.params = [np.asarray(p, dtype=np.float64) for p in params]

    def forward(self, x, params: Sequence[Var] | None = None) -> Var:
        """Forward pass. ``params`` overrides the stored weights (for training)."""
        tape = x.tape
        if params is None:
            params = [tape.constant(p) for p in self.params]
        h = x
        n_layers = len(params) // 2
        for i in range(n_layers):
            h = ad.affine(h, params[2 * i], params[2 * i + 1])
            if i < n_layers - 1:
                h = ad.relu(h) if self.spec.activations[i] == "relu" else ad.tanh(h)
        if self.spec.head == "softmax":
            return ad.softmax(h)
        if self.spec.head == "sigmoid":
            return ad.sigmoid(h)
        return h

    def __call__(self, x: np.ndarray) -> np.ndarray:
        tape = Tape()
        return self.forward(tape.constant(x)).value


def init_mlp(spec: MlpSpec, seed: int) -> Mlp:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    params = []
    for fan_in, fan_out in zip(spec.widths[:-1], spec.widths[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        params.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        params.append(np.zeros(fan_out))
    return Mlp(spec, params)


init_model = init_mlp


class Adam:
    def __init__(self, params: list[np.ndarray], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, (p, g) in enumerate(zip(self.params, grads)):
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            mhat = self.m[i] / (1 - b1 ** self.t)
            vhat = self.v[i] / (1 - b2 ** self.t)
            p -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class TrainConfig:
    epochs: int = 20
    batch: int = 64
    lr: float = 1e-3
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


# -- models -----------------------------------------------------------------


class Classifier:
    kind = "classifier"

    def __init__(self, mlp: Mlp, metrics: dict | None = None):
        if mlp.spec.head != "softmax":
            raise ModelSpecError("classifier needs a softmax head")
        self.mlp = mlp
        self.metrics = metrics or {}

    @property
    def num_classes(self) -> int:
        return self.mlp.spec.n_out

    @property
    def n_inputs(self) -> int:
        return self.mlp.spec.n_in

    def forward(self, x: Var) -> Var:
        """Class probabilities for a flat image (or a batch of them)."""
        if x.shape[-1] != self.n_inputs:
            x = ad.reshape(x, x.shape[:-2] + (self.n_inputs,)) if x.ndim >= 2 else x
        return self.mlp.forward(x)

    def probs(self, images: np.ndarray) -> np.ndarray:
        x = np.asarray(images, dtype=np.float64)
        flat = x.reshape(-1, self.n_inputs) if x.size != self.n_inputs else x.reshape(self.n_inputs)
        return self.mlp(flat)

    def predict(self, images: np.ndarray) -> np.ndarray:
        return np.argmax(self.probs(images), axis=-1)

    def components(self) -> dict[str, Mlp]:
        return {"mlp": self.mlp}


class LinearClassifier:
    """Softmax over ``W x + b``; a closed-form fixture for oracle checks."""

    kind = "linear_classifier"

    def __init__(self, weights, bias=None):
        self.W = np.asarray(weights, dtype=np.float64)
        self.b = np.zeros(self.W.shape[0]) if bias is None else np.asarray(bias, dtype=np.float64)

    @property
    def num_classes(self) -> int:
        return self.W.shape[0]

    def forward(self, x: Var) -> Var:
        x = ad.reshape(x, (x.value.size,)) if x.ndim != 1 else x
        return ad.softmax(ad.add(ad.matmul(self.W, x), self.b))

    def logits(self, images: np.ndarray) -> np.ndarray:
        x = np.asarray(images, dtype=np.float64)
        return x.reshape(-1, self.W.shape[1]) @ self.W.T + self.b

    def probs(self, images: np.ndarray) -> np.ndarray:
        out = ad.softmax_array(self.logits(images))
        return out[0] if np.asarray(images).ndim <= 1 else out


class LatentGenerator:
    """Decoder ``G(L)`` with an optional paired encoder for inversion."""

    kind = "latent_generator"

    def __init__(self, decoder: Mlp, image_shape: tuple[int, int], encoder: Mlp | None = None,
                 metrics: dict | None = None):
        if decoder.spec.head != "sigmoid":
            raise ModelSpecError("generator decoder needs a sigmoid head")
        if decoder.spec.n_out != image_shape[0] * image_shape[1]:
            raise ModelSpecError("decoder output size does not match image shape")
        self.decoder = decoder
        self.encoder = encoder
        self.image_shape = tuple(image_shape)
        self.metrics = metrics or {}

    @property
    def latent_dim(self) -> int:
        return self.decoder.spec.n_in

    def generate(self, latent: Var) -> Var:
        return ad.reshape(self.decoder.forward(latent), self.image_shape)

    def decode(self, latent: np.ndarray) -> np.ndarray:
        out = self.decoder(np.asarray(latent, dtype=np.float64))
        return out.reshape(out.shape[:-1] + self.image_shape)

    def encode(self, image: np.ndarray) -> np.ndarray:
        if self.encoder is None:
            raise ModelSpecError("this generator has no paired encoder")
        x = np.asarray(image, dtype=np.float64)
        n = self.image_shape[0] * self.image_shape[1]
        flat = x.reshape(-1, n) if x.size != n else x.reshape(n)
        return self.encoder(flat)

    def components(self) -> dict[str, Mlp]:
        out = {"decoder": self.decoder}
        if self.encoder is not None:
            out["encoder"] = self.encoder
        return out


class AttributePredictor:
    """Per-attribute sigmoid scores; used as a frozen critic during editor training."""

    kind = "attribute_predictor"

    def __init__(self, mlp: Mlp, attribute_names: Sequence[str], metrics: dict | None = None):
        if mlp.spec.head != "sigmoid":
            raise ModelSpecError("attribute predictor needs a sigmoid head")
        if mlp.spec.n_out != len(attribute_names):
            raise ModelSpecError("one output per attribute name")
        self.mlp = mlp
        self.attribute_names = list(attribute_names)
        self.metrics = metrics or {}

    def forward(self, x: Var) -> Var:
        n = self.mlp.spec.n_in
        if x.shape[-1] != n:
            x = ad.reshape(x, x.shape[:-2] + (n,))
        return self.mlp.forward(x)

    def predict(self, images: np.ndarray) -> np.ndarray:
        x = np.asarray(images, dtype=np.float64)
        n = self.mlp.spec.n_in
        return self.mlp(x.reshape(-1, n) if x.size != n else x.reshape(n))

    def components(self) -> dict[str, Mlp]:
        return {"mlp": self.mlp}


class AttributeEditor:
    """Conditioned autoencoder: ``edit(I, A) = dec([enc(I), A])``."""

    kind = "attribute_editor"

    def __init__(self, encoder: Mlp, decoder: Mlp, attribute_names: Sequence[str],
                 image_shape: tuple[int, int], predictor: AttributePredictor | None = None,
                 metrics: dict | None = None):
        n_attr = len(attribute_names)
        if decoder.spec.n_in != encoder.spec.n_out + n_attr:
            raise ModelSpecError("decoder input must be code size + attribute count")
        if decoder.spec.head != "sigmoid":
            raise ModelSpecError("editor decoder needs a sigmoid head")
        self.encoder = encoder
        self.decoder = decoder
        self.attribute_names = list(attribute_names)
        self.image_shape = tuple(image_shape)
        self.predictor = predictor
        self.metrics = metrics or {}

    @property
    def attribute_count(self) -> int:
        return len(self.attribute_names)

    def code(self, image: np.ndarray) -> np.ndarray:
        x = np.asarray(image, dtype=np.float64)
        n = self.encoder.spec.n_in
        return self.encoder(x.reshape(-1, n) if x.size != n else x.reshape(n))

    def edit_from_code(self, code, attributes: Var) -> Var:
        if attributes.shape[-1] != self.attribute_count:
            raise ad.ShapeError("edit", attributes.shape, (self.attribute_count,),
                                detail="attribute vector length")
        h = ad.concat(attributes.tape.lift(code), attributes, axis=-1)
        out = self.decoder.forward(h)
        return ad.reshape(out, out.shape[:-1] + self.image_shape)

    def edit_var(self, image: np.ndarray, attributes: Var) -> Var:
        return self.edit_from_code(self.code(image), attributes)

    def edit(self, image: np.ndarray, attributes) -> np.ndarray:
        tape = Tape()
        return self.edit_var(image, tape.constant(attributes)).value

    def components(self) -> dict[str, Mlp]:
        out = {"encoder": self.encoder, "decoder": self.decoder}
        if self.predictor is not None:
            out["predictor"] = self.predictor.mlp
        return out


# -- training ---------------------------------------------------------------


def _flat(images: np.ndarray) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    _check_dataset(images)
    return images.reshape(len(images), -1)


def _check_dataset(images, *others):
    if len(images) == 0:
        raise ValueError("empty dataset")
    for o in others:
        if len(o) != len(images):
            raise ValueError("dataset arrays disagree in length")


def _fit(params: list[np.ndarray], n: int, config: TrainConfig, loss_fn) -> list[float]:
    """Minibatch Adam over ``params`` in place; returns per-epoch mean loss.

    ``loss_fn(tape, param_vars, batch_idx, rng)`` builds the scalar loss.
    """
    rng = np.random.default_rng(config.seed)
    opt = Adam(params, lr=config.lr)
    history = []
    for _ in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch):
            idx = order[start:start + config.batch]
            tape = Tape()
            pv = [tape.variable(p) for p in params]
            loss = loss_fn(tape, pv, idx, rng)
            grads = tape.backward(loss)
            opt.step([grads[v] for v in pv])
            total += loss.item() * len(idx)
        history.append(total / n)
    return history


def accuracy(model, images: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(model.predict(images) == np.asarray(labels)))


def train_classifier(images, labels, num_classes: int, config: TrainConfig | None = None,
                     hidden: Sequence[int] = (128,), test: tuple | None = None) -> Classifier:
    config = config or TrainConfig()
    x = _flat(images)
    y = np.asarray(labels, dtype=np.int64)
    _check_dataset(x, y)
    if num_classes < 2:
        raise ValueError("need at least two classes")
    if y.min() < 0 or y.max() >= num_classes:
        raise ValueError(f"label out of range [0, {num_classes})")
    spec = MlpSpec((x.shape[1], *hidden, num_classes), head="softmax")
    mlp = init_mlp(spec, config.seed)

    def loss_fn(tape, pv, idx, rng):
        probs = mlp.forward(tape.constant(x[idx]), pv)
        return ad.cross_entropy(probs, y[idx])

    history = _fit(mlp.params, len(x), config, loss_fn)
    clf = Classifier(mlp)
    clf.metrics = {"train_accuracy": accuracy(clf, x, y), "final_loss": history[-1]}
    if test is not None:
        clf.metrics["test_accuracy"] = accuracy(clf, _flat(test[0]), test[1])
    return clf


def train_latent_generator(images, config: TrainConfig | None = None, latent_dim: int = 10,
                           hidden: Sequence[int] = (64, 128), code_penalty: float = 1e-3,
                           test=None) -> LatentGenerator:
    """Autoencoder whose decoder serves as ``G(L)``.

    ``code_penalty`` is a small L2 pull on the codes that keeps them inside the
    latent search box.
    """
    config = config or TrainConfig()
    images = np.asarray(images, dtype=np.float64)
    _check_dataset(images)
    shape = images.shape[1:]
    x = _flat(images)
    n_pix = x.shape[1]
    enc = init_mlp(MlpSpec((n_pix, *reversed(hidden), latent_dim), head="linear"), config.seed)
    dec = init_mlp(MlpSpec((latent_dim, *hidden, n_pix), head="sigmoid"), config.seed + 1)
    n_enc = len(enc.params)

    def loss_fn(tape, pv, idx, rng):
        xb = tape.constant(x[idx])
        z = enc.forward(xb, pv[:n_enc])
        out = dec.forward(z, pv[n_enc:])
        recon = ad.mean(ad.abs_(ad.sub(out, xb)))
        return ad.add(recon, ad.mul(ad.mean(ad.mul(z, z)), code_penalty))

    params = enc.params + dec.params
    history = _fit(params, len(x), config, loss_fn)
    gen = LatentGenerator(dec, shape, encoder=enc)
    gen.metrics = {"final_loss": history[-1], "train_recon_l1": reconstruction_error(gen, images)}
    if test is not None:
        gen.metrics["test_recon_l1"] = reconstruction_error(gen, test)
    return gen


def reconstruction_error(gen: LatentGenerator, images) -> float:
    images = np.asarray(images, dtype=np.float64)
    recon = gen.decode(gen.encode(images))
    return float(np.mean(np.abs(recon.reshape(images.shape) - images)))


def _bce(p: Var, t) -> Var:
    t = p.tape.lift(t)
    pos = ad.mul(t, ad.log(p))
    neg = ad.mul(ad.sub(1.0, t), ad.log(ad.sub(1.0, p)))
    return ad.mul(ad.mean(ad.add(pos, neg)), -1.0)


binary_cross_entropy = _bce


def train_attribute_predictor(images, attributes, names: Sequence[str],
                              config: TrainConfig | None = None, hidden: Sequence[int] = (128,),
                              test=None) -> AttributePredictor:
    config = config or TrainConfig()
    x = _flat(images)
    a = np.asarray(attributes, dtype=np.float64)
    _check_dataset(x, a)
    if a.shape[1] != len(names):
        raise ValueError("attribute vector length mismatch")
    mlp = init_mlp(MlpSpec((x.shape[1], *hidden, a.shape[1]), head="sigmoid"), config.seed)

    def loss_fn(tape, pv, idx, rng):
        return _bce(mlp.forward(tape.constant(x[idx]), pv), a[idx])

    history = _fit(mlp.params, len(x), config, loss_fn)
    pred = AttributePredictor(mlp, names)
    pred.metrics = {"final_loss": history[-1]}
    if test is not None:
        pred.metrics["test_attribute_accuracy"] = attribute_accuracy(pred, *test).tolist()
    return pred


def attribute_accuracy(pred: AttributePredictor, images, attributes) -> np.ndarray:
    """Per-attribute agreement after thresholding both sides at 0.5."""
    p = pred.predict(_flat(images))
    a = np.asarray(attributes)
    return np.mean((p >= 0.5) == (a >= 0.5), axis=0)


def _flip_targets(a: np.ndarray, flip_index: int, rng, soft: float = 0.0) -> np.ndarray:
    """Random edit targets: resample continuous attributes, flip the binary one
    for half the rows. A ``soft`` fraction of rows instead gets a uniform value
    for the binary attribute, so the decoder also learns the path between 0 and 1
    that gradient descent walks along."""
    tgt = rng.uniform(0.0, 1.0, size=a.shape)
    u = rng.random(len(a))
    binary = np.where(u < 0.5, 1.0 - a[:, flip_index], a[:, flip_index])
    tgt[:, flip_index] = np.where(u >= 1.0 - soft, tgt[:, flip_index], binary)
    return tgt


def train_attribute_editor(images, attributes, names: Sequence[str], predictor: AttributePredictor,
                           config: TrainConfig | None = None, code_dim: int = 16,
                           hidden: Sequence[int] = (256,), gamma: float = 1.0,
                           binary_attribute: str | None = None, code_dropout: float = 0.5,
                           soft_targets: float = 0.25, test=None) -> AttributeEditor:
    """Conditioned autoencoder trained against a frozen attribute predictor.

    Loss per batch: ``mean|edit(I, A) - I| + gamma * BCE(P(edit(I, A~)), A~)``
    where ``A~`` are random target attributes. The predictor's weights enter the
    tape as constants and never move.

    With probability ``code_dropout`` a row's code is zeroed for the whole step,
    so the decoder has to draw from the attributes rather than copy the input
    through the code. Without it edits tend to be small adversarial patterns
    that satisfy the predictor but look nothing like the requested change.
    ``soft_targets`` is the fraction of rows whose binary target is drawn
    uniformly from [0, 1] rather than being 0 or 1.
    """
    config = config or TrainConfig()
    images = np.asarray(images, dtype=np.float64)
    x = _flat(images)
    a = np.asarray(attributes, dtype=np.float64)
    _check_dataset(x, a)
    n_attr = len(names)
    if a.shape[1] != n_attr:
        raise ValueError(f"attribute vector length mismatch: {a.shape[1]} != {n_attr}")
    flip_index = names.index(binary_attribute) if binary_attribute else n_attr - 1
    n_pix = x.shape[1]
    enc = init_mlp(MlpSpec((n_pix, *reversed(hidden), code_dim), head="linear"), config.seed)
    dec = init_mlp(MlpSpec((code_dim + n_attr, *hidden, n_pix), head="sigmoid"), config.seed + 1)
    n_enc = len(enc.params)
    frozen = [p.copy() for p in predictor.mlp.params]

    def loss_fn(tape, pv, idx, rng):
        xb = tape.constant(x[idx])
        keep = (rng.random((len(idx), 1)) >= code_dropout).astype(np.float64)
        code = ad.mul(enc.forward(xb, pv[:n_enc]), tape.constant(keep))
        rec = dec.forward(ad.concat(code, tape.constant(a[idx]), axis=-1), pv[n_enc:])
        recon = ad.mean(ad.abs_(ad.sub(rec, xb)))
        tgt = _flip_targets(a[idx], flip_index, rng, soft_targets)
        edited = dec.forward(ad.concat(code, tape.constant(tgt), axis=-1), pv[n_enc:])
        critic = _bce(predictor.mlp.forward(edited), tgt)
        return ad.add(recon, ad.mul(critic, gamma))

    history = _fit(enc.params + dec.params, len(x), config, loss_fn)
    assert all(np.array_equal(p, q) for p, q in zip(frozen, predictor.mlp.params))
    editor = AttributeEditor(enc, dec, names, images.shape[1:], predictor=predictor)
    editor.metrics = {"final_loss": history[-1]}
    if test is not None:
        timg, tattr = test
        editor.metrics["test_recon_l1"] = editor_reconstruction_error(editor, timg, tattr)
        editor.metrics["controllability"] = editor_controllability(editor, timg, tattr, flip_index)
    return editor


def editor_reconstruction_error(editor: AttributeEditor, images, attributes) -> float:
    images = np.asarray(images, dtype=np.float64)
    tape = Tape()
    out = editor.edit_var(images, tape.constant(attributes)).value
    return float(np.mean(np.abs(out - images)))


def editor_controllability(editor: AttributeEditor, images, attributes, flip_index: int,
                           predictor: AttributePredictor | None = None) -> float:
    """Mean predictor probability that ``edit(I, A with one attribute flipped)`` shows the flip."""
    predictor = predictor or editor.predictor
    a = np.asarray(attributes, dtype=np.float64).copy()
    target = 1.0 - np.round(a[:, flip_index])
    a[:, flip_index] = target
    tape = Tape()
    out = editor.edit_var(images, tape.constant(a)).value
    p = predictor.predict(out)[:, flip_index]
    return float(np.mean(np.where(target >= 0.5, p, 1.0 - p)))
