"""Component-split networks with blocked gradients between components.

A network is an ordered list of components. Hidden components own an encoder,
a projection head and a contrastive objective; the last component owns the
classifier and a cross-entropy objective. Every component trains on its own
tape from a detached copy of its input, so a local backward can only reach
that component's parameters.
"""

from __future__ import annotations

import dataclasses
import io
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .layers import (
    Conv2d,
    Flatten,
    Layer,
    Linear,
    Parameter,
    ProjectionHead,
    ReLU,
    Sequential,
    Tanh,
    LeakyReLU,
    init_params,
    read_params,
    write_params,
)
from .losses import cross_entropy, supcon_loss, supcon_loss_alg1

ACTIVATIONS = {"relu": ReLU, "tanh": Tanh, "leaky_relu": LeakyReLU}
CONVNET_CHANNELS = (3, 128, 256, 512)
CONVNET_SIZE = 32


@dataclass
class NetworkTemplate:
    """Declarative network shape.

    ``mlp`` uses ``dims = [input, hidden_1, ..., hidden_H, classes]``; the
    ``vanilla_convnet`` defaults reproduce the three-conv-block reference
    network (channels 3-128-256-512 on 32x32 inputs, 10 classes).
    """

    kind: str = "mlp"
    dims: tuple = ()
    channels: tuple = CONVNET_CHANNELS
    image_size: int = CONVNET_SIZE
    num_classes: int = 10
    projection_head: str = "mlp"
    head_hidden: int = 512
    head_out: int = 1024
    activation: str = "relu"

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.channels = tuple(int(c) for c in self.channels)
        if self.kind == "mlp":
            if len(self.dims) < 2 or min(self.dims) < 1:
                raise ValueError(f"mlp template needs >= 2 positive dims, got {list(self.dims)}")
            self.num_classes = self.dims[-1]
        elif self.kind == "vanilla_convnet":
            if len(self.channels) < 2 or min(self.channels) < 1 or self.image_size < 1:
                raise ValueError("vanilla_convnet needs >= 2 positive channels and image_size >= 1")
        else:
            raise ValueError(f"unknown template kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")

    @property
    def hidden_components(self) -> int:
        return len(self.dims) - 2 if self.kind == "mlp" else len(self.channels) - 1

    @property
    def input_shape(self) -> tuple:
        if self.kind == "mlp":
            return (self.dims[0],)
        return (self.channels[0], self.image_size, self.image_size)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkTemplate":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown template keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Component:
    index: int  # 1-based; H+1 is the output component
    encoder: Sequential
    head: Optional[Sequential]
    objective: str  # "scl" or "ce"
    in_shape: tuple
    out_shape: tuple
    optimizer: object = field(default=None, repr=False)

    @property
    def is_output(self) -> bool:
        return self.head is None

    def encoder_params(self) -> list[Parameter]:
        return self.encoder.params()

    def head_params(self) -> list[Parameter]:
        return self.head.params() if self.head is not None else []

    def params(self) -> list[Parameter]:
        return self.encoder_params() + self.head_params()


@dataclass
class StepResult:
    output: np.ndarray  # detached encoder output handed to the next component
    loss: float
    grads: dict  # Parameter -> gradient, only for buffers the backward allocated
    tape: Tape
    depth: int  # longest op chain from the local loss to a leaf


def _loss_for(c: Component, tape: Optional[Tape], r: Tensor, labels, tau: float, variant: str) -> Tensor:
    if c.is_output:
        return cross_entropy(r, labels)
    out = c.head.forward(r, tape)
    if c.objective == "ce":
        return cross_entropy(out, labels)
    if variant == "alg1":
        return supcon_loss_alg1(out, labels, tau)
    return supcon_loss(out, labels, tau)


def component_forward(c: Component, inputs) -> tuple[Tape, Tensor]:
    """Encoder forward of one component on a fresh tape from detached inputs."""
    if isinstance(inputs, Tensor):
        if inputs.tracked:
            raise ValueError(f"component {c.index}: input is still attached to a tape; detach it first")
        inputs = inputs.data
    x = np.asarray(inputs, dtype=np.float64)
    if tuple(x.shape[1:]) != tuple(c.in_shape):
        raise ad.ShapeError(f"component {c.index} expects inputs of shape (*, {', '.join(map(str, c.in_shape))}), got {x.shape}")
    tape = Tape()
    return tape, c.encoder.forward(Tensor(x), tape)


def component_backward(c: Component, tape: Tape, r: Tensor, labels, tau: float = 0.1,
                       loss_variant: str = "eq") -> StepResult:
    loss = _loss_for(c, tape, r, labels, tau, loss_variant)
    if not loss.tracked:  # parameter-free component: nothing to differentiate
        return StepResult(ad.detach(r).data, loss.item(), {}, tape, 0)
    tape.backward(loss)
    return StepResult(ad.detach(r).data, loss.item(), tape.param_grads(), tape, tape.depth(loss))


def component_step(c: Component, inputs, labels, tau: float = 0.1, loss_variant: str = "eq") -> StepResult:
    """Forward, local loss and local backward for one component.

    ``inputs`` must carry no tape linkage. The caller applies the update.
    """
    tape, r = component_forward(c, inputs)
    return component_backward(c, tape, r, labels, tau, loss_variant)


def blocking_violations(c: Component, tape: Tape) -> list[Parameter]:
    """Parameters with a gradient buffer on ``tape`` that ``c`` does not own."""
    owned = {id(p) for p in c.params()}
    return [p for p in tape.param_grads() if id(p) not in owned]


class ScplNetwork:
    def __init__(self, components: Sequence[Component], template: Optional[NetworkTemplate] = None, seed=None):
        if not components or not components[-1].is_output:
            raise ValueError("the last component must be the output component")
        for prev, cur in zip(components, components[1:]):
            if tuple(prev.out_shape) != tuple(cur.in_shape):
                raise ad.ShapeError(f"component {cur.index} input {cur.in_shape} != component {prev.index} output {prev.out_shape}")
        self.components = list(components)
        self.template = template
        self.seed = seed

    @property
    def H(self) -> int:
        return len(self.components) - 1

    @property
    def output(self) -> Component:
        return self.components[-1]

    def effective_params(self) -> list[Parameter]:
        """Parameters on the inference path (encoders and classifier)."""
        return [p for c in self.components for p in c.encoder_params()]

    def affiliated_params(self) -> list[Parameter]:
        """Training-only parameters (projection heads / auxiliary classifiers)."""
        return [p for c in self.components for p in c.head_params()]

    def params(self) -> list[Parameter]:
        return self.effective_params() + self.affiliated_params()

    def effective_param_count(self) -> int:
        return sum(p.size for p in self.effective_params())

    def forward_all(self, x, tape: Optional[Tape] = None) -> Tensor:
        """Encoders composed end to end (one tape when given): inference and BP path."""
        out = ad.as_tensor(x)
        for c in self.components:
            out = c.encoder.forward(out, tape)
        return out

    def infer(self, x) -> np.ndarray:
        return self.forward_all(np.asarray(x, dtype=np.float64)).data

    def predict(self, x) -> np.ndarray:
        return self.infer(x).argmax(axis=1)

    def local_losses(self, x, labels, tau: float = 0.1, loss_variant: str = "eq") -> list[float]:
        """Forward-only local loss of every component, in order."""
        out = Tensor(np.asarray(x, dtype=np.float64))
        losses = []
        for c in self.components:
            r = c.encoder.forward(out, None)
            losses.append(_loss_for(c, None, r, labels, tau, loss_variant).item())
            out = ad.detach(r)
        return losses

    def global_loss(self, x, labels, tau: float = 0.1) -> float:
        """Sum of all local contrastive losses plus the output cross-entropy. Logging only."""
        return float(sum(self.local_losses(x, labels, tau)))

    def with_early_exit_heads(self, seed=0) -> "ScplNetwork":
        """Swap every hidden projection head for a linear auxiliary classifier with CE."""
        classes = self.output.out_shape[0]
        comps = []
        for c in self.components:
            if c.is_output:
                comps.append(c)
                continue
            dim = int(np.prod(c.out_shape))
            head = Sequential(Flatten(), Linear(dim, classes)).rename(f"c{c.index}.aux")
            if c.encoder_params() and c.encoder_params()[0].value is not None:
                init_params(head, [_seed_int(seed), c.index, 2])
            comps.append(dataclasses.replace(c, head=head, objective="ce", optimizer=None))
        return ScplNetwork(comps, self.template, self.seed)

    # -- checkpoints ---------------------------------------------------------

    def header(self, include_heads: bool) -> dict:
        return {
            "template": self.template.to_dict() if self.template else None,
            "H": self.H,
            "seed": self.seed,
            "heads": include_heads,
        }

    def save(self, path, include_heads: bool = True) -> None:
        params = self.params() if include_heads else self.effective_params()
        with open(path, "wb") as f:
            write_params(f, params, self.header(include_heads))

    def to_bytes(self, include_heads: bool = True) -> bytes:
        buf = io.BytesIO()
        params = self.params() if include_heads else self.effective_params()
        write_params(buf, params, self.header(include_heads))
        return buf.getvalue()

    @classmethod
    def load(cls, path) -> "ScplNetwork":
        with open(path, "rb") as f:
            return cls._from_stream(f)

    @classmethod
    def from_bytes(cls, data: bytes) -> "ScplNetwork":
        return cls._from_stream(io.BytesIO(data))

    @classmethod
    def _from_stream(cls, f) -> "ScplNetwork":
        header, arrays = read_params(f)
        if header.get("template") is None:
            raise ValueError("checkpoint has no template header")
        net = build_from_template(NetworkTemplate.from_dict(header["template"]), header.get("seed"), allocate=False)
        by_name = {p.name: p for p in net.params()}
        for name, arr in arrays.items():
            p = by_name.get(name)
            if p is None:
                raise ValueError(f"checkpoint parameter {name!r} does not exist in the template")
            if arr.shape != p.shape:
                raise ValueError(f"checkpoint parameter {name!r} has shape {arr.shape}, expected {p.shape}")
            p.value = arr.copy()
        missing = [p.name for p in net.effective_params() if p.value is None]
        if missing:
            raise ValueError(f"checkpoint lacks inference parameters: {missing}")
        return net


def _seed_int(seed) -> int:
    return 0 if seed is None else int(seed)


def build_from_template(t: NetworkTemplate, seed=0, allocate: bool = True) -> ScplNetwork:
    """Deterministic construction; ``allocate=False`` builds shapes only (for counting)."""
    act = ACTIVATIONS[t.activation]
    comps: list[Component] = []
    if t.kind == "mlp":
        shapes = [(d,) for d in t.dims]
        encoders = [Sequential(Linear(a, b), act()) for a, b in zip(t.dims[:-2], t.dims[1:-1])]
        classifier = Sequential(Linear(t.dims[-2], t.dims[-1]))
    else:
        s = t.image_size
        shapes = [(ch, s, s) for ch in t.channels] + [(t.num_classes,)]
        encoders = [Sequential(Conv2d(a, b), act()) for a, b in zip(t.channels[:-1], t.channels[1:])]
        classifier = Sequential(Flatten(), Linear(s * s * t.channels[-1], t.num_classes))
    for i, enc in enumerate(encoders, start=1):
        dim = int(np.prod(shapes[i]))
        head = ProjectionHead(t.projection_head, dim, t.head_hidden, t.head_out)
        comps.append(Component(i, enc.rename(f"c{i}.f"), head.rename(f"c{i}.g"), "scl", shapes[i - 1], shapes[i]))
    k = len(encoders) + 1
    comps.append(Component(k, classifier.rename(f"c{k}.f"), None, "ce", shapes[-2], shapes[-1]))
    if allocate:
        for c in comps:
            init_params(c.encoder, [_seed_int(seed), c.index, 0])
            if c.head is not None:
                init_params(c.head, [_seed_int(seed), c.index, 1])
    return ScplNetwork(comps, t, seed)


def build_bp_network(t: NetworkTemplate, seed=0, allocate: bool = True) -> Sequential:
    """The plain end-to-end network for a template: encoders and classifier, no heads."""
    act = ACTIVATIONS[t.activation]
    layers: list[Layer] = []
    if t.kind == "mlp":
        for a, b in zip(t.dims[:-2], t.dims[1:-1]):
            layers += [Linear(a, b), act()]
        layers.append(Linear(t.dims[-2], t.dims[-1]))
    else:
        for a, b in zip(t.channels[:-1], t.channels[1:]):
            layers += [Conv2d(a, b), act()]
        layers += [Flatten(), Linear(t.image_size ** 2 * t.channels[-1], t.num_classes)]
    net = Sequential(*layers)
    if allocate:
        init_params(net, _seed_int(seed))
    return net
