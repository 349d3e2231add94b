"""Per-resolution binary classifiers split into a hidden map and a prediction head."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numcore as nc
from .numcore import Tape, Tensor

EPS = 1e-7


@dataclass(frozen=True)
class ModelSpec:
    kind: str = "logreg"
    input_dim: int = 1
    hidden_dim: int = 8
    init_scale: float = 0.1

    def __post_init__(self):
        if self.kind not in ("logreg", "mlp1"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if self.kind == "mlp1" and self.hidden_dim < 1:
            raise ValueError("hidden_dim must be >= 1 for mlp1")

    @property
    def out_dim(self) -> int:
        """Length of the hidden representation."""
        return self.hidden_dim if self.kind == "mlp1" else self.input_dim

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        if self.kind == "logreg":
            return {"w": (self.input_dim,), "b": ()}
        return {
            "W1": (self.input_dim, self.hidden_dim),
            "b1": (self.hidden_dim,),
            "w2": (self.hidden_dim,),
            "b2": (),
        }

    def describe(self) -> str:
        return (
            f"kind={self.kind} input_dim={self.input_dim} "
            f"hidden_dim={self.hidden_dim} init_scale={format(self.init_scale, '.17g')}"
        )

    @classmethod
    def parse(cls, line: str) -> "ModelSpec":
        kv = dict(tok.split("=", 1) for tok in line.split())
        return cls(kv["kind"], int(kv["input_dim"]), int(kv["hidden_dim"]), float(kv["init_scale"]))


@dataclass
class Classifier:
    """Parameters ``w_k`` of one resolution's model, stored as plain arrays.

    ``bind`` exposes them on a tape for a differentiable forward pass; the
    ``hidden``/``head``/``predict`` shortcuts evaluate without recording.
    """

    spec: ModelSpec
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def bind(self, tape: Tape | None = None, prefix: str = "") -> "BoundClassifier":
        if tape is None:
            return BoundClassifier(self.spec, {k: Tensor(v) for k, v in self.params.items()})
        return BoundClassifier(
            self.spec, {k: tape.parameter(prefix + k, v) for k, v in self.params.items()}
        )

    def hidden(self, x) -> np.ndarray:
        return _evaluate(self, x, "hidden")

    def head(self, h) -> np.ndarray:
        return _evaluate(self, h, "head")

    def predict(self, x) -> np.ndarray:
        return _evaluate(self, x, "predict")

    @property
    def n_params(self) -> int:
        return sum(int(v.size) for v in self.params.values())

    def copy(self) -> "Classifier":
        return Classifier(self.spec, {k: v.copy() for k, v in self.params.items()})


def _evaluate(model: Classifier, x, which: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    bound = model.bind()
    out = getattr(bound, which)(Tensor(arr[None, :] if single else arr)).value
    return out[0] if single else out


@dataclass
class BoundClassifier:
    """A classifier whose parameters are tensors, possibly recorded on a tape.

    All methods take a batch of rows.
    """

    spec: ModelSpec
    params: dict[str, Tensor]

    def hidden(self, x: Tensor) -> Tensor:
        x = nc.as_tensor(x)
        if x.value.ndim != 2 or x.shape[1] != self.spec.input_dim:
            raise nc.ShapeError(f"expected rows of length {self.spec.input_dim}, got shape {x.shape}")
        if self.spec.kind == "logreg":
            return x
        p = self.params
        return nc.tanh(nc.add_bias(nc.matmul(x, p["W1"]), p["b1"]))

    def head(self, h: Tensor) -> Tensor:
        h = nc.as_tensor(h)
        if h.value.ndim != 2 or h.shape[1] != self.spec.out_dim:
            raise nc.ShapeError(f"expected hidden rows of length {self.spec.out_dim}, got shape {h.shape}")
        if self.spec.kind == "logreg":
            w, b = self.params["w"], self.params["b"]
        else:
            w, b = self.params["w2"], self.params["b2"]
        return nc.sigmoid(nc.add(nc.matmul(h, w), b))

    def predict(self, x: Tensor) -> Tensor:
        return self.head(self.hidden(x))


def init(spec: ModelSpec, seed: int | np.random.Generator) -> Classifier:
    """Weights uniform on ``[-s, s]``, biases zero."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in spec.param_shapes().items():
        if name.startswith("b"):
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.uniform(-spec.init_scale, spec.init_scale, size=shape)
    return Classifier(spec, params)


def cross_entropy_loss(model: BoundClassifier, x, y) -> Tensor:
    """Mean binary cross-entropy with predictions clipped to ``[EPS, 1 - EPS]``."""
    y = np.asarray(y, dtype=np.float64)
    if y.size == 0:
        raise ValueError("cross-entropy over an empty batch")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("cross-entropy batch contains unlabeled instances")
    p = nc.clip(model.predict(x), EPS, 1.0 - EPS)
    pos = nc.mul(Tensor(y), nc.log(p))
    neg = nc.mul(Tensor(1.0 - y), nc.log(nc.sub(1.0, p)))
    return nc.mul(nc.mean(nc.add(pos, neg)), -1.0)


# -- checkpoints -------------------------------------------------------------


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def write_params(path, descriptor: str, params: dict[str, np.ndarray]) -> None:
    lines = [descriptor]
    for name, arr in params.items():
        shape = "x".join(str(s) for s in arr.shape) or "scalar"
        lines.append(" ".join([name, shape, *(_fmt(v) for v in np.ravel(arr))]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_params(path) -> tuple[str, dict[str, np.ndarray]]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ValueError(f"{path}: empty checkpoint")
    params = {}
    for n, line in enumerate(lines[1:], start=2):
        name, shape_tok, *vals = line.split()
        shape = () if shape_tok == "scalar" else tuple(int(s) for s in shape_tok.split("x"))
        arr = np.array([float(v) for v in vals])
        if arr.size != int(np.prod(shape)):
            raise ValueError(f"{path}:{n}: {arr.size} values for shape {shape}")
        params[name] = arr.reshape(shape)
    return lines[0], params


def save_checkpoint(model: Classifier, path) -> None:
    write_params(path, model.spec.describe(), model.params)


def load_checkpoint(path) -> Classifier:
    descriptor, params = read_params(path)
    spec = ModelSpec.parse(descriptor)
    expected = spec.param_shapes()
    if {k: v.shape for k, v in params.items()} != expected:
        raise ValueError(f"{path}: parameters do not match {spec.describe()}")
    return Classifier(spec, params)
