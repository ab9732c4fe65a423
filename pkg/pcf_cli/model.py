"""Parametrized convex function model.

The model is an input-convex network in the variable x whose weights are emitted by a
hypernetwork psi of the parameter theta:

    z1 = phi(V1 x + w1),  zl = phi(Wl z(l-1) + Vl x + wl),  y = WL z(L-1) + VL x + wL [+ x'Qx]

Every Wl comes out of a nonnegative head activation, so y is convex in x for every theta.
"""

import dataclasses
import functools
import math

import numpy as np

from pcf_cli.constants import DEFAULT_BLOCK_SIZE
from pcf_cli.constants import W_HEAD_INIT_OFFSET
from pcf_cli.error import InvalidInputError
from pcf_cli.error import NonFiniteError
from pcf_cli.error import UnsupportedCombinationError
from pcf_cli.types import Activation
from pcf_cli.types import Monotonicity
from pcf_cli.types import Quadratic
from pcf_cli.types import QuadraticKind

DEFAULT_LAYERS = 3

DEFAULT_PSI_LAYERS = 3

MONOTONE_SIGNS = {Monotonicity.none: 0.0, Monotonicity.increasing: 1.0, Monotonicity.decreasing: -1.0}


def relu(a: np.ndarray) -> np.ndarray:
    return np.maximum(a, 0.0)


def softplus(a: np.ndarray) -> np.ndarray:
    return np.log1p(np.exp(-np.abs(a))) + np.maximum(a, 0.0)


def sigmoid(a: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def activate(kind: Activation, a: np.ndarray) -> np.ndarray:
    if kind == Activation.relu:
        return relu(a)
    return softplus(a)


def activate_prime(kind: Activation, a: np.ndarray) -> np.ndarray:
    # relu'(0) is taken as 0
    if kind == Activation.relu:
        return (a > 0.0).astype(a.dtype)
    return sigmoid(a)


def activate_second(kind: Activation, a: np.ndarray) -> np.ndarray:
    if kind == Activation.relu:
        return np.zeros_like(a)
    s = sigmoid(a)
    return s * (1.0 - s)


@dataclasses.dataclass(frozen=True)
class Block:
    name: str
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return math.prod(self.shape)

    @property
    def stop(self) -> int:
        return self.offset + self.size


@dataclasses.dataclass(frozen=True)
class PcfArchitecture:
    n: int
    p: int
    d: int
    widths: tuple[int, ...]
    activation: Activation
    psi_widths: tuple[int, ...]
    monotonicity: tuple[Monotonicity, ...]
    quadratic: Quadratic
    scaling: bool
    psi_activation: Activation
    weight_activation: Activation

    @classmethod
    def create(
        cls,
        n: int,
        p: int,
        d: int,
        layers: int | None = None,
        widths: list[int] | None = None,
        activation: Activation = Activation.relu,
        psi_layers: int | None = None,
        psi_widths: list[int] | None = None,
        monotonicity: list[Monotonicity] | Monotonicity | None = None,
        quadratic: Quadratic | None = None,
        scaling: bool = False,
        psi_activation: Activation | None = None,
        weight_activation: Activation = Activation.relu,
    ) -> "PcfArchitecture":
        """Fill in defaults and validate.

        Defaults: L = 3 layers of width 2 * floor((n + d) / 2) (at least 2), psi with M = 3 layers
        whose hidden layers are floor((p + m) / 2) wide. With p = 0 psi is a learned constant.
        """
        for name, value in (("n", n), ("p", p), ("d", d)):
            if not isinstance(value, int) or value < 0:
                raise InvalidInputError(f"Dimension {name} must be a nonnegative integer, got {value}.", name=name)
        if d < 1:
            raise InvalidInputError(f"Output dimension d must be at least 1, got {d}.", name="d")

        if widths is None:
            layers = DEFAULT_LAYERS if layers is None else layers
            if layers < 2:
                raise InvalidInputError(f"Layer count L must be at least 2, got {layers}.", name="layers")
            width = max(2, 2 * ((n + d) // 2))
            widths = [width] * (layers - 1)
        elif layers is not None and layers != len(widths) + 1:
            raise InvalidInputError(
                f"Layer count L={layers} does not match {len(widths)} hidden widths (expected L-1).", name="layers"
            )
        if len(widths) < 1:
            raise InvalidInputError("Layer count L must be at least 2 (one hidden width).", name="widths")
        for i, width in enumerate(widths):
            if not isinstance(width, int) or width < 1:
                raise InvalidInputError(f"Width n{i + 1} must be a positive integer, got {width}.", name="widths")

        if monotonicity is None:
            monotonicity = Monotonicity.none
        if isinstance(monotonicity, str):
            monotonicity = [Monotonicity(monotonicity)] * n
        monotonicity = tuple(Monotonicity(m) for m in monotonicity)
        if len(monotonicity) != n:
            raise InvalidInputError(
                f"Monotonicity has {len(monotonicity)} entries, expected n={n}.", name="monotonicity"
            )

        quadratic = Quadratic() if quadratic is None else quadratic
        if quadratic.kind != QuadraticKind.none and any(m != Monotonicity.none for m in monotonicity):
            raise UnsupportedCombinationError(
                f"A {quadratic} quadratic term is not monotone in x; use quadratic=none with monotonicity."
            )
        activation = Activation(activation)
        psi_activation = activation if psi_activation is None else Activation(psi_activation)

        arch = cls(
            n=n,
            p=p,
            d=d,
            widths=tuple(widths),
            activation=activation,
            psi_widths=(),
            monotonicity=monotonicity,
            quadratic=quadratic,
            scaling=bool(scaling),
            psi_activation=psi_activation,
            weight_activation=Activation(weight_activation),
        )

        if p == 0:
            psi_widths = []
        elif psi_widths is None:
            psi_layers = DEFAULT_PSI_LAYERS if psi_layers is None else psi_layers
            if psi_layers < 1:
                raise InvalidInputError(f"psi needs at least one layer, got {psi_layers}.", name="psi_layers")
            hidden = max(1, (p + arch.emitted_size) // 2)
            psi_widths = [hidden] * (psi_layers - 1)
        for i, width in enumerate(psi_widths):
            if not isinstance(width, int) or width < 1:
                raise InvalidInputError(
                    f"psi width {i + 1} must be a positive integer, got {width}.", name="psi_widths"
                )

        return dataclasses.replace(arch, psi_widths=tuple(psi_widths))

    @property
    def layers(self) -> int:
        return len(self.widths) + 1

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return self.widths + (self.d,)

    @property
    def rank(self) -> int:
        return self.quadratic.resolved_rank(self.n)

    @functools.cached_property
    def emitted_layout(self) -> "EmittedLayout":
        return EmittedLayout.create(self)

    @property
    def emitted_size(self) -> int:
        return self.emitted_layout.size

    @functools.cached_property
    def psi_layout(self) -> "PsiLayout":
        return PsiLayout.create(self)

    @functools.cached_property
    def head_signs(self) -> np.ndarray:
        """Per emitted entry: 0 for a linear head, +1 for phi_W, -1 for -phi_W."""
        return self.emitted_layout.head_signs(self)

    @property
    def weight_count(self) -> int:
        return self.psi_layout.size

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "p": self.p,
            "d": self.d,
            "widths": list(self.widths),
            "activation": self.activation.value,
            "psi_widths": list(self.psi_widths),
            "psi_activation": self.psi_activation.value,
            "weight_activation": self.weight_activation.value,
            "monotonicity": [m.value for m in self.monotonicity],
            "quadratic": str(self.quadratic),
            "scaling": self.scaling,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PcfArchitecture":
        arch = cls.create(
            n=data["n"],
            p=data["p"],
            d=data["d"],
            widths=list(data["widths"]),
            activation=Activation(data["activation"]),
            psi_widths=list(data["psi_widths"]),
            monotonicity=[Monotonicity(m) for m in data["monotonicity"]],
            quadratic=Quadratic.parse(data["quadratic"]),
            scaling=data["scaling"],
            psi_activation=Activation(data["psi_activation"]),
            weight_activation=Activation(data["weight_activation"]),
        )
        return arch


@dataclasses.dataclass(frozen=True)
class EmittedLayout:
    """Flat layout of psi's output: [W2..WL, V1..VL, w1..wL, U | (F, diag)], each block row-major."""

    blocks: tuple[Block, ...]
    size: int

    @classmethod
    def create(cls, arch: PcfArchitecture) -> "EmittedLayout":
        sizes = arch.layer_sizes
        shapes = []
        for k in range(1, arch.layers):
            shapes.append((f"W{k + 1}", (sizes[k], sizes[k - 1])))
        for k in range(arch.layers):
            shapes.append((f"V{k + 1}", (sizes[k], arch.n)))
        for k in range(arch.layers):
            shapes.append((f"omega{k + 1}", (sizes[k],)))
        match arch.quadratic.kind:
            case QuadraticKind.full:
                shapes.append(("U", (arch.d, arch.n * (arch.n + 1) // 2)))
            case QuadraticKind.low_rank:
                shapes.append(("F", (arch.d, arch.rank, arch.n)))
                shapes.append(("diag", (arch.d, arch.n)))

        blocks = []
        offset = 0
        for name, shape in shapes:
            block = Block(name, shape, offset)
            blocks.append(block)
            offset = block.stop
        return cls(tuple(blocks), offset)

    def block(self, name: str) -> Block:
        for block in self.blocks:
            if block.name == name:
                return block
        raise KeyError(name)

    def unflatten(self, flat: np.ndarray) -> dict[str, np.ndarray]:
        batch = flat.shape[:-1]
        return {block.name: flat[..., block.offset : block.stop].reshape(batch + block.shape) for block in self.blocks}

    def flatten(self, blocks: dict[str, np.ndarray]) -> np.ndarray:
        parts = []
        for block in self.blocks:
            value = blocks[block.name]
            batch = value.shape[: value.ndim - len(block.shape)]
            parts.append(value.reshape(batch + (block.size,)))
        return np.concatenate(parts, axis=-1)

    def head_signs(self, arch: PcfArchitecture) -> np.ndarray:
        signs = np.zeros(self.size)
        monotone = np.array([MONOTONE_SIGNS[m] for m in arch.monotonicity])
        for block in self.blocks:
            if block.name.startswith("W"):
                signs[block.offset : block.stop] = 1.0
            elif block.name.startswith("V"):
                rows = block.shape[0]
                signs[block.offset : block.stop] = np.tile(monotone, rows)
        return signs


@dataclasses.dataclass(frozen=True)
class PsiLayer:
    A: Block
    B: Block | None
    c: Block


@dataclasses.dataclass(frozen=True)
class PsiLayout:
    """Layout of the trainable weight vector w: per psi layer the matrix A, the theta feedforward B
    (from the second layer on) and the offset c."""

    layers: tuple[PsiLayer, ...]
    size: int

    @classmethod
    def create(cls, arch: PcfArchitecture) -> "PsiLayout":
        outputs = list(arch.psi_widths) + [arch.emitted_size]
        layers = []
        offset = 0
        fan_in = arch.p
        for j, width in enumerate(outputs):
            A = Block(f"A{j + 1}", (width, fan_in), offset)
            offset = A.stop
            B = None
            if j > 0:
                B = Block(f"B{j + 1}", (width, arch.p), offset)
                offset = B.stop
            c = Block(f"c{j + 1}", (width,), offset)
            offset = c.stop
            layers.append(PsiLayer(A, B, c))
            fan_in = width
        return cls(tuple(layers), offset)

    def view(self, w: np.ndarray, block: Block) -> np.ndarray:
        return w[block.offset : block.stop].reshape(block.shape)


def _pick(a: np.ndarray | None, index: int) -> np.ndarray | None:
    return None if a is None else a[index]


def _repeat(a: np.ndarray | None, size: int) -> np.ndarray | None:
    return None if a is None else np.broadcast_to(a, (size,) + a.shape)


@dataclasses.dataclass(frozen=True)
class MaterializedLayers:
    """Per-theta weight blocks. Arrays carry a leading batch axis when materialized for many thetas."""

    W: tuple[np.ndarray, ...]
    V: tuple[np.ndarray, ...]
    omega: tuple[np.ndarray, ...]
    U: np.ndarray | None = None
    F: np.ndarray | None = None
    diag: np.ndarray | None = None

    def take(self, index: int) -> "MaterializedLayers":
        return MaterializedLayers(
            W=tuple(a[index] for a in self.W),
            V=tuple(a[index] for a in self.V),
            omega=tuple(a[index] for a in self.omega),
            U=_pick(self.U, index),
            F=_pick(self.F, index),
            diag=_pick(self.diag, index),
        )

    def batched(self, size: int) -> "MaterializedLayers":
        """Repeat single-theta layers along a new leading batch axis (read-only views)."""
        return MaterializedLayers(
            W=tuple(_repeat(a, size) for a in self.W),
            V=tuple(_repeat(a, size) for a in self.V),
            omega=tuple(_repeat(a, size) for a in self.omega),
            U=_repeat(self.U, size),
            F=_repeat(self.F, size),
            diag=_repeat(self.diag, size),
        )

    @property
    def is_batched(self) -> bool:
        return self.omega[0].ndim == 2


@dataclasses.dataclass(frozen=True)
class PsiTape:
    """Intermediate values of a batched psi pass, kept for the backward pass."""

    thetas: np.ndarray
    inputs: tuple[np.ndarray, ...]
    pre: tuple[np.ndarray, ...]
    out: np.ndarray
    emitted: np.ndarray


def upper_from_packed(packed: np.ndarray, n: int) -> np.ndarray:
    rows, cols = np.triu_indices(n)
    full = np.zeros(packed.shape[:-1] + (n, n))
    full[..., rows, cols] = packed
    return full


def packed_from_upper(full: np.ndarray) -> np.ndarray:
    n = full.shape[-1]
    rows, cols = np.triu_indices(n)
    return full[..., rows, cols]


def check_weights(arch: PcfArchitecture, w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    if w.ndim != 1 or w.shape[0] != arch.weight_count:
        raise InvalidInputError(
            f"Weight vector has shape {w.shape}, expected ({arch.weight_count},).", name="weights"
        )
    return w


def check_batch(values: np.ndarray, size: int, name: str) -> tuple[np.ndarray, bool]:
    values = np.asarray(values, dtype=float)
    single = values.ndim == 1
    if single:
        values = values[None, :]
    if values.ndim != 2 or values.shape[1] != size:
        raise InvalidInputError(
            f"{name} has trailing dimension {values.shape[-1] if values.ndim else 0}, expected {size}.", name=name
        )
    if not np.all(np.isfinite(values)):
        raise NonFiniteError(f"Input {name} contains non-finite values.")
    return values, single


def psi_tape(arch: PcfArchitecture, w: np.ndarray, thetas: np.ndarray) -> PsiTape:
    layout = arch.psi_layout
    h = thetas
    inputs = []
    pre = []
    out = None
    last = len(layout.layers) - 1
    for j, layer in enumerate(layout.layers):
        inputs.append(h)
        s = h @ layout.view(w, layer.A).T + layout.view(w, layer.c)
        if layer.B is not None:
            s = s + thetas @ layout.view(w, layer.B).T
        if j < last:
            pre.append(s)
            h = activate(arch.psi_activation, s)
        else:
            out = s
    signs = arch.head_signs
    emitted = np.where(signs == 0.0, out, signs * activate(arch.weight_activation, out))
    return PsiTape(thetas=thetas, inputs=tuple(inputs), pre=tuple(pre), out=out, emitted=emitted)


def layers_from_emitted(arch: PcfArchitecture, emitted: np.ndarray) -> MaterializedLayers:
    blocks = arch.emitted_layout.unflatten(emitted)
    U = F = diag = None
    match arch.quadratic.kind:
        case QuadraticKind.full:
            U = upper_from_packed(blocks["U"], arch.n)
        case QuadraticKind.low_rank:
            F = blocks["F"]
            diag = blocks["diag"]
    return MaterializedLayers(
        W=tuple(blocks[f"W{k + 1}"] for k in range(1, arch.layers)),
        V=tuple(blocks[f"V{k + 1}"] for k in range(arch.layers)),
        omega=tuple(blocks[f"omega{k + 1}"] for k in range(arch.layers)),
        U=U,
        F=F,
        diag=diag,
    )


def psi_forward(arch: PcfArchitecture, w: np.ndarray, theta: np.ndarray) -> MaterializedLayers:
    """Materialize the network weights for one theta (1-D) or a batch of thetas (2-D)."""
    w = check_weights(arch, w)
    thetas, single = check_batch(theta, arch.p, "theta")
    layers = layers_from_emitted(arch, psi_tape(arch, w, thetas).emitted)
    return layers.take(0) if single else layers


@dataclasses.dataclass(frozen=True)
class IcnnTape:
    x: np.ndarray
    pre: tuple[np.ndarray, ...]
    hidden: tuple[np.ndarray, ...]
    y: np.ndarray


def matvec(A: np.ndarray, v: np.ndarray) -> np.ndarray:
    return np.einsum("bij,bj->bi", A, v)


def quadratic_value(arch: PcfArchitecture, layers: MaterializedLayers, x: np.ndarray) -> np.ndarray | None:
    match arch.quadratic.kind:
        case QuadraticKind.full:
            Ux = np.einsum("bkij,bj->bki", layers.U, x)
            return np.sum(Ux * Ux, axis=-1)
        case QuadraticKind.low_rank:
            Fx = np.einsum("bkrj,bj->bkr", layers.F, x)
            return np.sum(Fx * Fx, axis=-1) + np.sum(layers.diag**2 * (x * x)[:, None, :], axis=-1)
    return None


def icnn_tape(arch: PcfArchitecture, layers: MaterializedLayers, x: np.ndarray) -> IcnnTape:
    pre = []
    hidden = []
    z = None
    for k in range(arch.layers):
        u = matvec(layers.V[k], x) + layers.omega[k]
        if k > 0:
            u = u + matvec(layers.W[k - 1], z)
        if k == arch.layers - 1:
            y = u
        else:
            pre.append(u)
            z = activate(arch.activation, u)
            hidden.append(z)
    quad = quadratic_value(arch, layers, x)
    if quad is not None:
        y = y + quad
    return IcnnTape(x=x, pre=tuple(pre), hidden=tuple(hidden), y=y)


def icnn_forward(layers: MaterializedLayers, arch: PcfArchitecture, x: np.ndarray) -> np.ndarray:
    """Evaluate the input-convex network for materialized layers (single or batched)."""
    xs, single = check_batch(x, arch.n, "x")
    if not layers.is_batched:
        layers = layers.batched(xs.shape[0])
    elif layers.omega[0].shape[0] != xs.shape[0]:
        count = layers.omega[0].shape[0]
        raise InvalidInputError(f"Got {xs.shape[0]} x rows for {count} materialized thetas.", name="x")
    y = icnn_tape(arch, layers, xs).y
    if not np.all(np.isfinite(y)):
        raise NonFiniteError("Network output is non-finite.")
    return y[0] if single else y


def icnn_jacobians(arch: PcfArchitecture, layers: MaterializedLayers, tape: IcnnTape) -> tuple[np.ndarray, ...]:
    """Forward-mode Jacobians dz_l/dx of every hidden layer, shape (batch, n_l, n)."""
    jacobians = []
    for k in range(arch.layers - 1):
        M = layers.V[k]
        if k > 0:
            M = M + np.einsum("bij,bjk->bik", layers.W[k - 1], jacobians[-1])
        jacobians.append(activate_prime(arch.activation, tape.pre[k])[:, :, None] * M)
    return tuple(jacobians)


def quadratic_gradient(arch: PcfArchitecture, layers: MaterializedLayers, x: np.ndarray) -> np.ndarray | None:
    match arch.quadratic.kind:
        case QuadraticKind.full:
            Ux = np.einsum("bkij,bj->bki", layers.U, x)
            return 2.0 * np.einsum("bkij,bki->bkj", layers.U, Ux)
        case QuadraticKind.low_rank:
            Fx = np.einsum("bkrj,bj->bkr", layers.F, x)
            return 2.0 * np.einsum("bkrj,bkr->bkj", layers.F, Fx) + 2.0 * layers.diag**2 * x[:, None, :]
    return None


def icnn_gradient(arch: PcfArchitecture, layers: MaterializedLayers, tape: IcnnTape) -> tuple[np.ndarray, tuple]:
    """Gradient of every output with respect to x, shape (batch, d, n), plus the hidden Jacobians."""
    jacobians = icnn_jacobians(arch, layers, tape)
    G = layers.V[-1] + np.einsum("bij,bjk->bik", layers.W[-1], jacobians[-1])
    quad = quadratic_gradient(arch, layers, tape.x)
    if quad is not None:
        G = G + quad
    return G, jacobians


@dataclasses.dataclass(frozen=True)
class Scaling:
    """Per-coordinate affine standardization of x, theta and y."""

    x_shift: np.ndarray
    x_scale: np.ndarray
    theta_shift: np.ndarray
    theta_scale: np.ndarray
    y_shift: np.ndarray
    y_scale: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray, theta: np.ndarray, y: np.ndarray, scale_y: bool = True) -> "Scaling":
        def shift_scale(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
            if values.shape[1] == 0:
                return np.zeros(0), np.ones(0)
            std = values.std(axis=0)
            return values.mean(axis=0), np.where(std > 0.0, std, 1.0)

        x_shift, x_scale = shift_scale(x)
        theta_shift, theta_scale = shift_scale(theta)
        if scale_y:
            y_shift, y_scale = shift_scale(y)
        else:
            y_shift, y_scale = np.zeros(y.shape[1]), np.ones(y.shape[1])
        return cls(x_shift, x_scale, theta_shift, theta_scale, y_shift, y_scale)

    def apply_x(self, x: np.ndarray) -> np.ndarray:
        return (x - self.x_shift) / self.x_scale

    def apply_theta(self, theta: np.ndarray) -> np.ndarray:
        return (theta - self.theta_shift) / self.theta_scale

    def apply_y(self, y: np.ndarray) -> np.ndarray:
        return (y - self.y_shift) / self.y_scale

    def invert_y(self, y: np.ndarray) -> np.ndarray:
        return y * self.y_scale + self.y_shift

    def to_dict(self) -> dict:
        return {field.name: getattr(self, field.name).tolist() for field in dataclasses.fields(self)}

    @classmethod
    def from_dict(cls, data: dict) -> "Scaling":
        return cls(**{field.name: np.asarray(data[field.name], dtype=float) for field in dataclasses.fields(cls)})


@dataclasses.dataclass(frozen=True, eq=False)
class PcfModel:
    arch: PcfArchitecture
    weights: np.ndarray
    scaling: Scaling | None = None

    def __post_init__(self):
        weights = check_weights(self.arch, self.weights).copy()
        if not np.all(np.isfinite(weights)):
            raise NonFiniteError("Model weights contain non-finite values.")
        weights.flags.writeable = False
        object.__setattr__(self, "weights", weights)


def init_weights(arch: PcfArchitecture, rng: np.random.Generator) -> np.ndarray:
    """Glorot-uniform psi matrices, zero offsets except +0.1 in front of the nonnegative heads."""
    layout = arch.psi_layout
    w = np.zeros(layout.size)
    for j, layer in enumerate(layout.layers):
        for block in (layer.A, layer.B):
            if block is None or block.size == 0:
                continue
            fan_out, fan_in = block.shape
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            w[block.offset : block.stop] = rng.uniform(-bound, bound, size=block.size)
        if j == len(layout.layers) - 1:
            signs = arch.head_signs
            w[layer.c.offset : layer.c.stop] = np.where(signs != 0.0, W_HEAD_INIT_OFFSET, 0.0)
    return w


def _blocks(count: int, block_size: int):
    for start in range(0, count, block_size):
        yield slice(start, min(start + block_size, count))


def evaluate(model: PcfModel, x: np.ndarray, theta: np.ndarray, block_size: int = DEFAULT_BLOCK_SIZE) -> np.ndarray:
    """f(x, theta) for one sample (1-D inputs) or a batch (2-D inputs, one row per sample)."""
    arch = model.arch
    xs, single = check_batch(x, arch.n, "x")
    thetas, _ = check_batch(theta, arch.p, "theta")
    if thetas.shape[0] != xs.shape[0]:
        raise InvalidInputError(f"Got {xs.shape[0]} x rows but {thetas.shape[0]} theta rows.", name="theta")
    if model.scaling is not None:
        xs = model.scaling.apply_x(xs)
        thetas = model.scaling.apply_theta(thetas)

    y = np.empty((xs.shape[0], arch.d))
    for rows in _blocks(xs.shape[0], block_size):
        layers = layers_from_emitted(arch, psi_tape(arch, model.weights, thetas[rows]).emitted)
        y[rows] = icnn_tape(arch, layers, xs[rows]).y
    if model.scaling is not None:
        y = model.scaling.invert_y(y)
    if not np.all(np.isfinite(y)):
        raise NonFiniteError("Model output is non-finite.")
    return y[0] if single else y


def grad_x(model: PcfModel, x: np.ndarray, theta: np.ndarray, block_size: int = DEFAULT_BLOCK_SIZE) -> np.ndarray:
    """Jacobian of f with respect to x: (d, n) for one sample, (batch, d, n) for a batch.

    Row i is a subgradient of f_i(., theta); exact gradient for softplus networks."""
    arch = model.arch
    xs, single = check_batch(x, arch.n, "x")
    thetas, _ = check_batch(theta, arch.p, "theta")
    if thetas.shape[0] != xs.shape[0]:
        raise InvalidInputError(f"Got {xs.shape[0]} x rows but {thetas.shape[0]} theta rows.", name="theta")
    if model.scaling is not None:
        xs = model.scaling.apply_x(xs)
        thetas = model.scaling.apply_theta(thetas)

    G = np.empty((xs.shape[0], arch.d, arch.n))
    for rows in _blocks(xs.shape[0], block_size):
        layers = layers_from_emitted(arch, psi_tape(arch, model.weights, thetas[rows]).emitted)
        G[rows], _ = icnn_gradient(arch, layers, icnn_tape(arch, layers, xs[rows]))
    if model.scaling is not None:
        G = G * model.scaling.y_scale[None, :, None] / model.scaling.x_scale[None, None, :]
    if not np.all(np.isfinite(G)):
        raise NonFiniteError("Model gradient is non-finite.")
    return G[0] if single else G
