"""Export of fitted models to a convexity-certified expression graph, and source emission from it.

The graph only uses operations that preserve convexity in x: affine maps of x, products with
elementwise nonnegative matrices, nondecreasing convex activations, sums of squares of affine
maps and sums. In bound mode every matrix is a literal; in symbolic mode the weights are
`parameter_constant` nodes whose values come from the psi preamble and must be recomputed
whenever theta changes.
"""

import dataclasses
import json
import logging
import string
import tomllib
from pathlib import Path

import numpy as np

from pcf_cli.constants import GRAPH_FORMAT_VERSION
from pcf_cli.data import format_float
from pcf_cli.error import CertificationError
from pcf_cli.error import EmissionError
from pcf_cli.error import InvalidInputError
from pcf_cli.error import UnsupportedCombinationError
from pcf_cli.model import MaterializedLayers
from pcf_cli.model import PcfArchitecture
from pcf_cli.model import PcfModel
from pcf_cli.model import check_batch
from pcf_cli.model import psi_forward
from pcf_cli.model import relu
from pcf_cli.model import softplus
from pcf_cli.model_file import encode
from pcf_cli.model_file import load_model
from pcf_cli.types import Activation
from pcf_cli.types import Curvature
from pcf_cli.types import ExportMode
from pcf_cli.types import NodeKind
from pcf_cli.types import QuadraticKind

logger = logging.getLogger(__name__)

TEMPLATE_DIR = Path(__file__).parent / "templates"

TEMPLATE_KEYS = ("header", "footer", "literal", "matmul", "output", "output_separator", "add_separator")


@dataclasses.dataclass(frozen=True)
class Operand:
    """A matrix or vector attached to a node: a literal value, or a reference to a parameter_constant node."""

    value: np.ndarray | None = None
    ref: int | None = None

    def to_dict(self) -> dict:
        if self.ref is not None:
            return {"ref": self.ref}
        return {"value": self.value.tolist()}


@dataclasses.dataclass(frozen=True, eq=False)
class Node:
    id: int
    kind: NodeKind
    size: int
    inputs: tuple[int, ...] = ()
    operands: dict[str, Operand] = dataclasses.field(default_factory=dict)
    attrs: dict = dataclasses.field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "kind": self.kind.value,
            "size": self.size,
            "inputs": list(self.inputs),
            "operands": {name: operand.to_dict() for name, operand in self.operands.items()},
            "attrs": dict(self.attrs),
        }


@dataclasses.dataclass(frozen=True, eq=False)
class PsiPreamble:
    """Everything needed to compute the parameter_constant values of a symbolic graph from theta."""

    model: PcfModel

    def to_dict(self) -> dict:
        scaling = self.model.scaling
        return {
            "architecture": self.model.arch.to_dict(),
            "weights": [float(value) for value in self.model.weights],
            "theta_shift": None if scaling is None else scaling.theta_shift.tolist(),
            "theta_scale": None if scaling is None else scaling.theta_scale.tolist(),
        }


@dataclasses.dataclass(frozen=True, eq=False)
class ExprGraph:
    mode: ExportMode
    n: int
    p: int
    d: int
    nodes: tuple[Node, ...]
    outputs: tuple[tuple[int, int], ...]
    theta: np.ndarray | None = None
    psi: PsiPreamble | None = None

    def node(self, id: int) -> Node:
        return self.nodes[id]

    def kinds(self) -> list[NodeKind]:
        return [node.kind for node in self.nodes]

    def to_dict(self) -> dict:
        return {
            "format_version": GRAPH_FORMAT_VERSION,
            "mode": self.mode.value,
            "n": self.n,
            "p": self.p,
            "d": self.d,
            "theta": None if self.theta is None else self.theta.tolist(),
            "nodes": [node.to_dict() for node in self.nodes],
            "outputs": [list(output) for output in self.outputs],
            "psi": None if self.psi is None else self.psi.to_dict(),
        }

    def dumps(self) -> str:
        return encode(self.to_dict()) + "\n"


class GraphBuilder:
    def __init__(self):
        self.nodes: list[Node] = []

    def add(self, kind: NodeKind, size: int, inputs=(), operands=None, **attrs) -> int:
        node = Node(len(self.nodes), kind, size, tuple(inputs), operands or {}, attrs)
        self.nodes.append(node)
        return node.id

    def total(self, terms: list[int], size: int) -> int:
        return terms[0] if len(terms) == 1 else self.add(NodeKind.add, size, terms)


def quadratic_factors(arch: PcfArchitecture, layers: MaterializedLayers) -> np.ndarray | None:
    """Per-output matrices M_i with x'Q_i x = |M_i x|^2, shape (..., d, rows, n)."""
    match arch.quadratic.kind:
        case QuadraticKind.full:
            return layers.U
        case QuadraticKind.low_rank:
            diagonals = layers.diag[..., :, None] * np.eye(arch.n)
            return np.concatenate([layers.F, diagonals], axis=-2)
    return None


def weight_blocks(arch: PcfArchitecture, layers: MaterializedLayers) -> dict[str, np.ndarray]:
    """Named matrices and vectors the graph refers to, single theta or batched."""
    blocks = {}
    for k in range(arch.layers):
        blocks[f"V{k + 1}"] = layers.V[k]
        blocks[f"omega{k + 1}"] = layers.omega[k]
        if k > 0:
            blocks[f"W{k + 1}"] = layers.W[k - 1]
    factors = quadratic_factors(arch, layers)
    if factors is not None:
        for i in range(arch.d):
            blocks[f"Q{i + 1}"] = factors[..., i, :, :]
    return blocks


def _operand_for(builder: GraphBuilder, blocks: dict, refs: dict, name: str) -> Operand:
    if refs is None:
        return Operand(value=np.array(blocks[name]))
    if name not in refs:
        value = blocks[name]
        refs[name] = builder.add(
            NodeKind.parameter_constant,
            int(np.prod(value.shape)),
            block=name,
            shape=list(value.shape),
            nonneg=name.startswith("W"),
        )
    return Operand(ref=refs[name])


def _is_zero(operand: Operand) -> bool:
    return operand.ref is None and not np.any(operand.value)


def to_expr_graph(model: PcfModel, mode: ExportMode, theta: np.ndarray | None = None) -> ExprGraph:
    """Build the expression graph of f(., theta).

    bound_theta materializes the weights for the given theta and drops zero products; symbolic_theta
    keeps every weight as a parameter_constant node fed by the psi preamble.
    """
    arch = model.arch
    if arch.activation not in (Activation.relu, Activation.softplus):
        raise UnsupportedCombinationError(f"Cannot export activation '{arch.activation}'.")
    if arch.weight_activation not in (Activation.relu, Activation.softplus):
        raise UnsupportedCombinationError(f"Weight activation '{arch.weight_activation}' is not nonnegative.")

    bound = mode == ExportMode.bound_theta
    if bound:
        if theta is None:
            raise InvalidInputError("Bound export needs a theta value.", name="theta")
        theta, single = check_batch(theta, arch.p, "theta")
        if not single and theta.shape[0] != 1:
            raise InvalidInputError("Bound export takes exactly one theta.", name="theta")
        theta = theta[0]
        scaled = theta if model.scaling is None else model.scaling.apply_theta(theta)
        blocks = weight_blocks(arch, psi_forward(arch, model.weights, scaled))
        refs = None
    else:
        blocks = weight_blocks(arch, psi_forward(arch, model.weights, np.zeros(arch.p)))
        refs = {}

    builder = GraphBuilder()
    x = builder.add(NodeKind.variable, arch.n, name="x")
    if model.scaling is not None:
        x = builder.add(
            NodeKind.affine,
            arch.n,
            [x],
            {
                "matrix": Operand(value=np.diag(1.0 / model.scaling.x_scale)),
                "offset": Operand(value=-model.scaling.x_shift / model.scaling.x_scale),
            },
        )

    z = None
    sizes = arch.layer_sizes
    for k in range(arch.layers):
        size = sizes[k]
        V = _operand_for(builder, blocks, refs, f"V{k + 1}")
        omega = _operand_for(builder, blocks, refs, f"omega{k + 1}")
        if _is_zero(V):
            terms = [builder.add(NodeKind.affine, size, (), {"offset": omega})]
        else:
            terms = [builder.add(NodeKind.affine, size, [x], {"matrix": V, "offset": omega})]
        if k > 0:
            W = _operand_for(builder, blocks, refs, f"W{k + 1}")
            if not _is_zero(W):
                terms.append(builder.add(NodeKind.nonneg_matmul, size, [z], {"matrix": W}))
        u = builder.total(terms, size)
        if k < arch.layers - 1:
            z = builder.add(NodeKind(arch.activation.value), size, [u])
        else:
            y = u

    if arch.quadratic.kind != QuadraticKind.none:
        factors = {f"factor{i}": _operand_for(builder, blocks, refs, f"Q{i + 1}") for i in range(arch.d)}
        quadratic = builder.add(NodeKind.sum_of_squares, arch.d, [x], factors)
        y = builder.total([y, quadratic], arch.d)

    if model.scaling is not None:
        y = builder.add(
            NodeKind.affine,
            arch.d,
            [y],
            {
                "matrix": Operand(value=np.diag(model.scaling.y_scale)),
                "offset": Operand(value=np.array(model.scaling.y_shift, dtype=float)),
            },
        )

    nodes, outputs = prune(builder.nodes, [(y, i) for i in range(arch.d)])
    graph = ExprGraph(
        mode=mode,
        n=arch.n,
        p=arch.p,
        d=arch.d,
        nodes=nodes,
        outputs=outputs,
        theta=theta if bound else None,
        psi=None if bound else PsiPreamble(model),
    )
    certify(graph)
    logger.debug("exported %s graph with %d nodes", mode.value, len(nodes))
    return graph


def _dependencies(node: Node) -> list[int]:
    return list(node.inputs) + [operand.ref for operand in node.operands.values() if operand.ref is not None]


def prune(nodes: list[Node], outputs: list[tuple[int, int]]) -> tuple[tuple[Node, ...], tuple[tuple[int, int], ...]]:
    """Drop nodes the outputs do not depend on and renumber the rest in creation order."""
    live = set()
    stack = [id for id, _ in outputs]
    while stack:
        id = stack.pop()
        if id in live:
            continue
        live.add(id)
        stack.extend(_dependencies(nodes[id]))

    renumber = {old: new for new, old in enumerate(sorted(live))}
    kept = []
    for old in sorted(live):
        node = nodes[old]
        operands = {
            name: operand if operand.ref is None else Operand(ref=renumber[operand.ref])
            for name, operand in node.operands.items()
        }
        kept.append(
            dataclasses.replace(
                node, id=renumber[old], inputs=tuple(renumber[i] for i in node.inputs), operands=operands
            )
        )
    return tuple(kept), tuple((renumber[id], index) for id, index in outputs)


def certify(graph: ExprGraph) -> dict[int, Curvature]:
    """Curvature of every node under the convex composition rules; raises if a rule is violated."""
    curvature: dict[int, Curvature] = {}

    def nonneg(operand: Operand) -> bool:
        if operand.ref is not None:
            return bool(graph.node(operand.ref).attrs.get("nonneg", False))
        return bool(np.all(operand.value >= 0.0))

    for node in graph.nodes:
        inputs = [curvature[i] for i in node.inputs]
        match node.kind:
            case NodeKind.variable:
                result = Curvature.affine
            case NodeKind.parameter_constant:
                result = Curvature.constant
            case NodeKind.affine:
                if len(inputs) == 0:
                    result = Curvature.constant
                elif inputs[0] != Curvature.convex:
                    result = Curvature.affine
                elif nonneg(node.operands["matrix"]):
                    result = Curvature.convex
                else:
                    raise CertificationError(f"Node {node.id}: affine map of a convex node needs a nonnegative matrix.")
            case NodeKind.nonneg_matmul:
                if not nonneg(node.operands["matrix"]):
                    raise CertificationError(f"Node {node.id}: nonneg_matmul matrix is not certified nonnegative.")
                result = Curvature.convex
            case NodeKind.relu | NodeKind.softplus:
                result = Curvature.convex
            case NodeKind.sum_of_squares:
                if inputs[0] == Curvature.convex:
                    raise CertificationError(f"Node {node.id}: sum_of_squares needs an affine argument.")
                result = Curvature.convex
            case NodeKind.add:
                result = Curvature.convex if Curvature.convex in inputs else Curvature.affine
        curvature[node.id] = result
    return curvature


def parameter_values(graph: ExprGraph, theta: np.ndarray) -> dict[str, np.ndarray]:
    """Values of the parameter_constant nodes of a symbolic graph at theta (one row or a batch)."""
    if graph.psi is None:
        raise InvalidInputError("Only symbolic graphs have parameter values.", name="theta")
    model = graph.psi.model
    thetas = np.asarray(theta, dtype=float)
    if model.scaling is not None:
        thetas = model.scaling.apply_theta(thetas)
    return weight_blocks(model.arch, psi_forward(model.arch, model.weights, thetas))


def _matmul(matrix: np.ndarray, values: np.ndarray) -> np.ndarray:
    if matrix.ndim == 2:
        return values @ matrix.T
    return np.einsum("bij,bj->bi", matrix, values)


def evaluate_graph(graph: ExprGraph, x: np.ndarray, theta: np.ndarray | None = None) -> np.ndarray:
    """Evaluate the graph at x (one row or a batch); symbolic graphs also need theta."""
    xs, single = check_batch(x, graph.n, "x")
    params = {}
    if graph.mode == ExportMode.symbolic_theta:
        if theta is None:
            raise InvalidInputError("Symbolic graphs need theta to evaluate.", name="theta")
        thetas, _ = check_batch(theta, graph.p, "theta")
        if thetas.shape[0] != xs.shape[0]:
            raise InvalidInputError(f"Got {xs.shape[0]} x rows but {thetas.shape[0]} theta rows.", name="theta")
        params = parameter_values(graph, thetas)

    values: dict[int, np.ndarray] = {}

    def resolve(operand: Operand) -> np.ndarray:
        return operand.value if operand.ref is None else values[operand.ref]

    batch = xs.shape[0]
    for node in graph.nodes:
        inputs = [values[i] for i in node.inputs]
        match node.kind:
            case NodeKind.variable:
                result = xs
            case NodeKind.parameter_constant:
                result = params[node.attrs["block"]]
            case NodeKind.affine:
                offset = resolve(node.operands["offset"])
                if len(inputs) == 0:
                    result = np.broadcast_to(offset, (batch, node.size))
                else:
                    result = _matmul(resolve(node.operands["matrix"]), inputs[0]) + offset
            case NodeKind.nonneg_matmul:
                result = _matmul(resolve(node.operands["matrix"]), inputs[0])
            case NodeKind.relu:
                result = relu(inputs[0])
            case NodeKind.softplus:
                result = softplus(inputs[0])
            case NodeKind.sum_of_squares:
                columns = []
                for i in range(node.size):
                    projected = _matmul(resolve(node.operands[f"factor{i}"]), inputs[0])
                    columns.append(np.sum(projected * projected, axis=-1))
                result = np.stack(columns, axis=-1)
            case NodeKind.add:
                result = sum(inputs[1:], inputs[0])
        values[node.id] = result

    y = np.stack([values[id][:, index] for id, index in graph.outputs], axis=-1)
    return y[0] if single else y


def load_template(template: str | Path) -> dict:
    """A shipped template by name (`cvxpy`, `numpy`) or a TOML file path."""
    path = Path(template)
    if not path.suffix:
        path = TEMPLATE_DIR / f"{template}.toml"
    if not path.exists():
        shipped = sorted(p.stem for p in TEMPLATE_DIR.glob("*.toml"))
        raise FileNotFoundError(f"Template '{template}' not found. Shipped templates: {', '.join(shipped)}.")
    try:
        return tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as e:
        raise InvalidInputError(f"Invalid template '{path}': {e}", name="template") from None


def render_literal(value: np.ndarray) -> str:
    value = np.asarray(value, dtype=float)
    if value.ndim == 0:
        return format_float(float(value))
    return "[" + ", ".join(render_literal(item) for item in value) + "]"


def _required_snippets(graph: ExprGraph) -> list[str]:
    required = {node.kind.value for node in graph.nodes}
    if NodeKind.sum_of_squares in graph.kinds():
        required.add("sum_of_squares_term")
    return sorted(required)


def emit_code(graph: ExprGraph, template: dict) -> str:
    """Render the graph node by node with the template's snippets; the output is deterministic."""
    snippets = template.get("snippets", {})
    missing = [key for key in TEMPLATE_KEYS if key not in template]
    missing += [kind for kind in _required_snippets(graph) if kind not in snippets]
    if len(missing) > 0:
        raise EmissionError(missing)

    def fill(text: str, **values) -> str:
        try:
            return string.Template(text).substitute(values)
        except (KeyError, ValueError) as e:
            raise InvalidInputError(f"Bad placeholder in template snippet {text!r}: {e}", name="template") from None

    def name(id: int) -> str:
        return f"v{id}"

    def operand(op: Operand) -> str:
        if op.ref is not None:
            return name(op.ref)
        return fill(template["literal"], values=render_literal(op.value))

    lines = [fill(template["header"], n=graph.n, p=graph.p, d=graph.d, mode=graph.mode.value)]
    for node in graph.nodes:
        values = {"name": name(node.id), "size": node.size}
        if len(node.inputs) > 0:
            values["input"] = name(node.inputs[0])
        match node.kind:
            case NodeKind.variable:
                values["variable"] = node.attrs["name"]
            case NodeKind.parameter_constant:
                values["block"] = node.attrs["block"]
                values["shape"] = tuple(node.attrs["shape"])
                values["nonneg"] = node.attrs["nonneg"]
            case NodeKind.affine:
                parts = []
                if len(node.inputs) > 0:
                    matrix = operand(node.operands["matrix"])
                    parts.append(fill(template["matmul"], matrix=matrix, input=values["input"]))
                parts.append(operand(node.operands["offset"]))
                values["expr"] = template["add_separator"].join(parts)
            case NodeKind.nonneg_matmul:
                matrix = operand(node.operands["matrix"])
                values["expr"] = fill(template["matmul"], matrix=matrix, input=values["input"])
            case NodeKind.sum_of_squares:
                term = snippets["sum_of_squares_term"]
                factors = [operand(node.operands[f"factor{i}"]) for i in range(node.size)]
                terms = [fill(term, factor=factor, input=values["input"]) for factor in factors]
                values["terms"] = ", ".join(terms)
            case NodeKind.add:
                values["terms"] = template["add_separator"].join(name(i) for i in node.inputs)
        lines.append(fill(snippets[node.kind.value], **values))

    outputs = template["output_separator"].join(
        fill(template["output"], node=name(id), index=index) for id, index in graph.outputs
    )
    lines.append(fill(template["footer"], outputs=outputs))
    return "\n".join(line.rstrip("\n") for line in lines) + "\n"


def execute_export(
    model_path: Path,
    mode: ExportMode,
    out: Path | None,
    theta: list[float] | None = None,
    template: str | None = None,
) -> str:
    """Export a saved model; writes to out when given and returns the text (graph JSON or emitted code)."""
    model = load_model(model_path)
    graph = to_expr_graph(model, mode, None if theta is None else np.asarray(theta, dtype=float))
    logger.info("exported graph nodes: %s", graph_summary(graph))
    text = graph.dumps() if template is None else emit_code(graph, load_template(template))
    if out is not None:
        out = Path(out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
    return text


def graph_summary(graph: ExprGraph) -> str:
    counts = {}
    for kind in graph.kinds():
        counts[kind.value] = counts.get(kind.value, 0) + 1
    return json.dumps(counts, sort_keys=True)
