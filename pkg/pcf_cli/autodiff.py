"""Hand-written reverse mode for the training objective.

Gradients flow from the loss (or the argmin penalty) back into the emitted weight blocks, and from
there through psi into the flat weight vector w. Everything is batched over samples and processed in
blocks of at most `block_size` rows; block results are summed, so the value does not depend on the
block size beyond floating-point reassociation.
"""

import dataclasses

import numpy as np

from pcf_cli.config import LossConfig
from pcf_cli.config import RegularizationConfig
from pcf_cli.constants import DEFAULT_BLOCK_SIZE
from pcf_cli.data import Dataset
from pcf_cli.error import InvalidInputError
from pcf_cli.error import NonFiniteError
from pcf_cli.error import UnsupportedCombinationError
from pcf_cli.model import IcnnTape
from pcf_cli.model import MaterializedLayers
from pcf_cli.model import PcfArchitecture
from pcf_cli.model import PsiTape
from pcf_cli.model import activate_prime
from pcf_cli.model import activate_second
from pcf_cli.model import check_weights
from pcf_cli.model import icnn_gradient
from pcf_cli.model import icnn_tape
from pcf_cli.model import layers_from_emitted
from pcf_cli.model import packed_from_upper
from pcf_cli.model import psi_tape
from pcf_cli.types import Activation
from pcf_cli.types import LossKind
from pcf_cli.types import QuadraticKind
from pcf_cli.types import RegKind


@dataclasses.dataclass(frozen=True)
class ArgminTargets:
    """Per-sample targets of the argmin penalty: grad_x f(points[k], thetas[k]) should equal tilts[k]."""

    thetas: np.ndarray
    points: np.ndarray
    tilts: np.ndarray | None
    rho_min: float
    weights: np.ndarray | None = None


def pointwise_loss(loss: LossConfig, f: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Loss per entry and its derivative with respect to the prediction f."""
    match loss.kind:
        case LossKind.quadratic:
            r = f - y
            return r * r, 2.0 * r
        case LossKind.l1:
            r = f - y
            return np.abs(r), np.sign(r)
        case LossKind.huber:
            r = f - y
            delta = loss.huber_delta
            small = np.abs(r) <= delta
            values = np.where(small, 0.5 * r * r, delta * (np.abs(r) - 0.5 * delta))
            return values, np.clip(r, -delta, delta)
        case LossKind.logistic:
            margin = -y * f
            # d/df log(1 + exp(-y f)) = -y * sigmoid(-y f)
            return np.logaddexp(0.0, margin), -y * 0.5 * (1.0 + np.tanh(0.5 * margin))
    raise InvalidInputError(f"Unknown loss kind: {loss.kind}", name="loss")


def regularizer_and_grad(reg: RegularizationConfig, w: np.ndarray) -> tuple[float, np.ndarray]:
    if reg.lambda_ == 0.0 or reg.kind == RegKind.none:
        return 0.0, np.zeros_like(w)
    match reg.kind:
        case RegKind.l2:
            value, grad = w @ w, 2.0 * w
        case RegKind.l1:
            value, grad = np.sum(np.abs(w)), np.sign(w)
        case RegKind.elastic_net:
            value = reg.alpha_l2 * (w @ w) + reg.alpha_l1 * np.sum(np.abs(w))
            grad = 2.0 * reg.alpha_l2 * w + reg.alpha_l1 * np.sign(w)
    return reg.lambda_ * float(value), reg.lambda_ * grad


def check_tapes(tape: PsiTape, itape: IcnnTape):
    if not np.all(np.isfinite(tape.emitted)):
        raise NonFiniteError("Hypernetwork output is non-finite.", layer=0)
    for k, u in enumerate(itape.pre):
        if not np.all(np.isfinite(u)):
            raise NonFiniteError("Pre-activation is non-finite.", layer=k + 1)
    if not np.all(np.isfinite(itape.y)):
        raise NonFiniteError("Network output is non-finite.", layer=len(itape.pre) + 1)


def outer(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a[:, :, None] * b[:, None, :]


def emitted_blocks_like(arch: PcfArchitecture, batch: int) -> dict[str, np.ndarray]:
    return {block.name: np.zeros((batch,) + block.shape) for block in arch.emitted_layout.blocks}


def icnn_backward(
    arch: PcfArchitecture, layers: MaterializedLayers, tape: IcnnTape, y_bar: np.ndarray
) -> dict[str, np.ndarray]:
    """Gradient of sum(y_bar * y) with respect to every emitted block, per sample."""
    grads = emitted_blocks_like(arch, tape.x.shape[0])
    x = tape.x

    match arch.quadratic.kind:
        case QuadraticKind.full:
            Ux = np.einsum("bkij,bj->bki", layers.U, x)
            U_bar = 2.0 * y_bar[:, :, None, None] * Ux[:, :, :, None] * x[:, None, None, :]
            grads["U"] = packed_from_upper(U_bar)
        case QuadraticKind.low_rank:
            Fx = np.einsum("bkrj,bj->bkr", layers.F, x)
            grads["F"] = 2.0 * y_bar[:, :, None, None] * Fx[:, :, :, None] * x[:, None, None, :]
            grads["diag"] = 2.0 * y_bar[:, :, None] * layers.diag * (x * x)[:, None, :]

    u_bar = y_bar
    for k in reversed(range(arch.layers)):
        grads[f"V{k + 1}"] = outer(u_bar, x)
        grads[f"omega{k + 1}"] = u_bar
        if k == 0:
            break
        z = tape.hidden[k - 1]
        grads[f"W{k + 1}"] = outer(u_bar, z)
        z_bar = np.einsum("bij,bi->bj", layers.W[k - 1], u_bar)
        u_bar = z_bar * activate_prime(arch.activation, tape.pre[k - 1])
    return grads


def gradient_backward(
    arch: PcfArchitecture,
    layers: MaterializedLayers,
    tape: IcnnTape,
    jacobians: tuple[np.ndarray, ...],
    G_bar: np.ndarray,
) -> dict[str, np.ndarray]:
    """Gradient of sum(G_bar * grad_x y) with respect to every emitted block, per sample.

    Differentiates the forward Jacobian recursion J_k = D_k (W_k J_(k-1) + V_k) with D_k = diag(phi'(u_k)),
    so the pre-activations u_k pick up a phi'' term next to the usual first-order path.
    """
    grads = emitted_blocks_like(arch, tape.x.shape[0])
    x = tape.x
    last = arch.layers - 1

    match arch.quadratic.kind:
        case QuadraticKind.full:
            U = layers.U
            Ux = np.einsum("bkij,bj->bki", U, x)
            Ug = np.einsum("bkij,bkj->bki", U, G_bar)
            U_bar = 2.0 * (Ux[:, :, :, None] * G_bar[:, :, None, :] + Ug[:, :, :, None] * x[:, None, None, :])
            grads["U"] = packed_from_upper(U_bar)
        case QuadraticKind.low_rank:
            F = layers.F
            Fx = np.einsum("bkrj,bj->bkr", F, x)
            Fg = np.einsum("bkrj,bkj->bkr", F, G_bar)
            grads["F"] = 2.0 * (Fx[:, :, :, None] * G_bar[:, :, None, :] + Fg[:, :, :, None] * x[:, None, None, :])
            grads["diag"] = 4.0 * G_bar * layers.diag * x[:, None, :]

    grads[f"V{last + 1}"] = G_bar.copy()
    grads[f"W{last + 1}"] = np.einsum("bij,bkj->bik", G_bar, jacobians[last - 1])
    J_bar = np.einsum("bij,bik->bjk", layers.W[last - 1], G_bar)
    z_bar = np.zeros_like(tape.hidden[last - 1])

    for k in reversed(range(last)):
        u = tape.pre[k]
        M = layers.V[k]
        if k > 0:
            M = M + np.einsum("bij,bjk->bik", layers.W[k - 1], jacobians[k - 1])
        D_bar = np.sum(J_bar * M, axis=-1)
        M_bar = activate_prime(arch.activation, u)[:, :, None] * J_bar
        u_bar = activate_second(arch.activation, u) * D_bar + activate_prime(arch.activation, u) * z_bar

        grads[f"V{k + 1}"] = M_bar + outer(u_bar, x)
        grads[f"omega{k + 1}"] = u_bar
        if k > 0:
            z = tape.hidden[k - 1]
            grads[f"W{k + 1}"] = np.einsum("bij,bkj->bik", M_bar, jacobians[k - 1]) + outer(u_bar, z)
            J_bar = np.einsum("bij,bik->bjk", layers.W[k - 1], M_bar)
            z_bar = np.einsum("bij,bi->bj", layers.W[k - 1], u_bar)
    return grads


def psi_backward(arch: PcfArchitecture, w: np.ndarray, tape: PsiTape, emitted_bar: np.ndarray) -> np.ndarray:
    """Pull a per-sample gradient on psi's emitted vector back to the flat weight vector (summed over samples)."""
    layout = arch.psi_layout
    grad = np.zeros_like(w)

    signs = arch.head_signs
    s_bar = np.where(signs == 0.0, emitted_bar, emitted_bar * signs * activate_prime(arch.weight_activation, tape.out))

    for j in reversed(range(len(layout.layers))):
        layer = layout.layers[j]
        h = tape.inputs[j]
        grad[layer.A.offset : layer.A.stop] += (s_bar.T @ h).ravel()
        grad[layer.c.offset : layer.c.stop] += s_bar.sum(axis=0)
        if layer.B is not None:
            grad[layer.B.offset : layer.B.stop] += (s_bar.T @ tape.thetas).ravel()
        if j > 0:
            h_bar = s_bar @ layout.view(w, layer.A)
            s_bar = h_bar * activate_prime(arch.psi_activation, tape.pre[j - 1])
    return grad


def _blocks(count: int, block_size: int):
    if block_size < 1:
        raise InvalidInputError(f"Block size must be positive, got {block_size}.", name="block_size")
    for start in range(0, count, block_size):
        yield slice(start, min(start + block_size, count))


def data_loss_and_grad(
    arch: PcfArchitecture,
    w: np.ndarray,
    batch: Dataset,
    loss: LossConfig,
    block_size: int = DEFAULT_BLOCK_SIZE,
) -> tuple[float, np.ndarray]:
    """Mean loss over all N * d entries and its gradient with respect to w."""
    w = check_weights(arch, w)
    if batch.size == 0:
        raise InvalidInputError("Batch is empty.", name="batch")
    if (batch.n, batch.p, batch.d) != (arch.n, arch.p, arch.d):
        raise InvalidInputError(
            f"Batch dimensions (n={batch.n}, p={batch.p}, d={batch.d}) do not match the architecture "
            + f"(n={arch.n}, p={arch.p}, d={arch.d}).",
            name="batch",
        )

    scale = 1.0 / (batch.size * arch.d)
    total = 0.0
    grad = np.zeros_like(w)
    for rows in _blocks(batch.size, block_size):
        tape = psi_tape(arch, w, batch.theta[rows])
        layers = layers_from_emitted(arch, tape.emitted)
        itape = icnn_tape(arch, layers, batch.x[rows])
        check_tapes(tape, itape)

        values, y_bar = pointwise_loss(loss, itape.y, batch.y[rows])
        total += float(np.sum(values))
        grads = icnn_backward(arch, layers, itape, scale * y_bar)
        grad += psi_backward(arch, w, tape, arch.emitted_layout.flatten(grads))

    value = scale * total
    if not np.isfinite(value) or not np.all(np.isfinite(grad)):
        raise NonFiniteError("Loss or its gradient is non-finite.")
    return value, grad


def loss_and_grad(
    arch: PcfArchitecture,
    w: np.ndarray,
    batch: Dataset,
    loss: LossConfig,
    reg: RegularizationConfig,
    block_size: int = DEFAULT_BLOCK_SIZE,
) -> tuple[float, np.ndarray]:
    """(1/N) sum of losses + lambda * r(w), with its gradient in the layout of w."""
    value, grad = data_loss_and_grad(arch, w, batch, loss, block_size)
    reg_value, reg_grad = regularizer_and_grad(reg, w)
    return value + reg_value, grad + reg_grad


def argmin_reg_and_grad(
    arch: PcfArchitecture,
    w: np.ndarray,
    thetas: np.ndarray,
    g_targets: np.ndarray,
    tilt_targets: np.ndarray | None,
    rho_min: float,
    block_size: int = DEFAULT_BLOCK_SIZE,
    weights: np.ndarray | None = None,
) -> tuple[float, np.ndarray]:
    """(rho_min / N) * sum_k |grad_x f(g_k, theta_k) - q_k|^2 and its gradient with respect to w.

    Tilts are (N, n), shared by all outputs, or (N, d, n). Optional per-sample weights count repeated
    thetas once; N is then the sum of the weights.
    """
    w = check_weights(arch, w)
    if rho_min < 0.0:
        raise InvalidInputError(f"rho_min must be nonnegative, got {rho_min}.", name="rho_min")
    if rho_min == 0.0:
        return 0.0, np.zeros_like(w)
    if arch.activation != Activation.softplus:
        raise UnsupportedCombinationError(
            "The argmin regularizer needs second derivatives and is only available for softplus networks."
        )

    thetas = np.asarray(thetas, dtype=float).reshape(-1, arch.p)
    points = np.asarray(g_targets, dtype=float).reshape(-1, arch.n)
    if thetas.shape[0] != points.shape[0]:
        raise InvalidInputError(f"Got {thetas.shape[0]} thetas but {points.shape[0]} argmin targets.", name="g_targets")
    count = thetas.shape[0]
    if tilt_targets is not None:
        tilt_targets = np.asarray(tilt_targets, dtype=float)
        if tilt_targets.ndim == 2:
            tilt_targets = tilt_targets[:, None, :]
        tilt_targets = np.broadcast_to(tilt_targets, (count, arch.d, arch.n))
    weights = np.ones(count) if weights is None else np.asarray(weights, dtype=float).reshape(count)

    scale = rho_min / np.sum(weights)
    total = 0.0
    grad = np.zeros_like(w)
    for rows in _blocks(count, block_size):
        tape = psi_tape(arch, w, thetas[rows])
        layers = layers_from_emitted(arch, tape.emitted)
        itape = icnn_tape(arch, layers, points[rows])
        check_tapes(tape, itape)

        G, jacobians = icnn_gradient(arch, layers, itape)
        residual = G
        if tilt_targets is not None:
            residual = G - tilt_targets[rows]
        weight = weights[rows][:, None, None]

        total += float(np.sum(weight * residual * residual))
        grads = gradient_backward(arch, layers, itape, jacobians, 2.0 * scale * weight * residual)
        grad += psi_backward(arch, w, tape, arch.emitted_layout.flatten(grads))

    value = scale * total
    if not np.isfinite(value) or not np.all(np.isfinite(grad)):
        raise NonFiniteError("Argmin penalty or its gradient is non-finite.")
    return value, grad


def objective_and_grad(
    arch: PcfArchitecture,
    w: np.ndarray,
    batch: Dataset,
    loss: LossConfig,
    reg: RegularizationConfig,
    argmin: ArgminTargets | None = None,
    block_size: int = DEFAULT_BLOCK_SIZE,
) -> tuple[float, np.ndarray]:
    value, grad = loss_and_grad(arch, w, batch, loss, reg, block_size)
    if argmin is not None and argmin.rho_min > 0.0:
        extra, extra_grad = argmin_reg_and_grad(
            arch, w, argmin.thetas, argmin.points, argmin.tilts, argmin.rho_min, block_size, argmin.weights
        )
        value += extra
        grad = grad + extra_grad
    return value, grad
