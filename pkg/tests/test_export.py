import json

import numpy as np
import pytest
from conftest import random_model
from conftest import small_arch

from pcf_cli.error import CertificationError
from pcf_cli.error import EmissionError
from pcf_cli.error import InvalidInputError
from pcf_cli.export import TEMPLATE_DIR
from pcf_cli.export import ExprGraph
from pcf_cli.export import Node
from pcf_cli.export import Operand
from pcf_cli.export import certify
from pcf_cli.export import emit_code
from pcf_cli.export import evaluate_graph
from pcf_cli.export import execute_export
from pcf_cli.export import load_template
from pcf_cli.export import parameter_values
from pcf_cli.export import to_expr_graph
from pcf_cli.model import PcfModel
from pcf_cli.model import Scaling
from pcf_cli.model import evaluate
from pcf_cli.model_file import save_model
from pcf_cli.types import Activation
from pcf_cli.types import Curvature
from pcf_cli.types import ExportMode
from pcf_cli.types import Monotonicity
from pcf_cli.types import NodeKind

THETA = np.array([0.3, -0.7])


def with_scaling(model: PcfModel) -> PcfModel:
    arch = model.arch
    scaling = Scaling(
        x_shift=np.linspace(-0.5, 0.5, arch.n),
        x_scale=np.linspace(0.5, 2.0, arch.n),
        theta_shift=np.full(arch.p, 0.25),
        theta_scale=np.full(arch.p, 1.5),
        y_shift=np.arange(arch.d, dtype=float),
        y_scale=np.full(arch.d, 0.8),
    )
    return PcfModel(small_arch(arch.activation, str(arch.quadratic), d=arch.d, scaling=True), model.weights, scaling)


MODELS = {
    "relu": lambda: random_model(small_arch(Activation.relu), seed=1),
    "softplus_full": lambda: random_model(small_arch(Activation.softplus, "full"), seed=2),
    "low_rank_two_outputs": lambda: random_model(small_arch(Activation.relu, "low_rank(1)", d=2), seed=3),
    "monotone": lambda: random_model(
        small_arch(Activation.softplus, monotonicity=[Monotonicity.increasing, Monotonicity.decreasing]), seed=4
    ),
    "scaled": lambda: with_scaling(random_model(small_arch(Activation.softplus, "full", d=2), seed=5)),
}


@pytest.fixture(params=sorted(MODELS))
def model(request) -> PcfModel:
    return MODELS[request.param]()


def sample_x(count: int, n: int = 2) -> np.ndarray:
    return np.random.default_rng(7).uniform(-2.0, 2.0, size=(count, n))


def run_numpy_code(code: str):
    namespace = {}
    exec(code, namespace)
    return namespace["pcf_expression"]


class TestParity:
    def test_bound_graph_matches_the_model(self, model):
        x = sample_x(25)

        graph = to_expr_graph(model, ExportMode.bound_theta, THETA)

        expected = evaluate(model, x, np.tile(THETA, (25, 1)))
        np.testing.assert_allclose(evaluate_graph(graph, x), expected, rtol=1e-10, atol=1e-10)

    def test_symbolic_graph_matches_the_model(self, model):
        x = sample_x(25)
        thetas = np.random.default_rng(8).uniform(-1.0, 1.0, size=(25, 2))

        graph = to_expr_graph(model, ExportMode.symbolic_theta)

        np.testing.assert_allclose(evaluate_graph(graph, x, thetas), evaluate(model, x, thetas), rtol=1e-10, atol=1e-10)

    def test_single_point(self, model):
        graph = to_expr_graph(model, ExportMode.bound_theta, THETA)

        assert evaluate_graph(graph, np.zeros(2)).shape == (model.arch.d,)

    def test_emitted_numpy_code_matches_the_model(self, model):
        graph = to_expr_graph(model, ExportMode.bound_theta, THETA)
        pcf_expression = run_numpy_code(emit_code(graph, load_template("numpy")))

        for x in sample_x(5):
            np.testing.assert_allclose(pcf_expression(x), evaluate(model, x, THETA), rtol=1e-10, atol=1e-10)

    def test_emitted_symbolic_code_takes_parameter_values(self, model):
        graph = to_expr_graph(model, ExportMode.symbolic_theta)
        pcf_expression = run_numpy_code(emit_code(graph, load_template("numpy")))
        theta = np.array([-0.4, 0.9])

        params = parameter_values(graph, theta)

        x = np.array([0.5, -1.0])
        np.testing.assert_allclose(pcf_expression(x, params), evaluate(model, x, theta), rtol=1e-10, atol=1e-10)


class TestStructure:
    def test_only_convexity_preserving_nodes(self, model):
        graph = to_expr_graph(model, ExportMode.bound_theta, THETA)

        assert graph.kinds()[0] == NodeKind.variable
        assert set(graph.kinds()) <= set(NodeKind) - {NodeKind.parameter_constant}

    def test_certified_convex(self, model):
        graph = to_expr_graph(model, ExportMode.symbolic_theta)

        curvature = certify(graph)

        for id, _ in graph.outputs:
            assert curvature[id] in (Curvature.affine, Curvature.convex)
        for node in graph.nodes:
            if node.kind in (NodeKind.relu, NodeKind.softplus, NodeKind.nonneg_matmul):
                assert curvature[node.id] == Curvature.convex

    def test_parameter_constants_describe_their_blocks(self):
        model = random_model(small_arch(Activation.relu, "full"))

        graph = to_expr_graph(model, ExportMode.symbolic_theta)

        params = {node.attrs["block"]: node.attrs for node in graph.nodes if node.kind == NodeKind.parameter_constant}
        assert sorted(params) == ["Q1", "V1", "V2", "V3", "W2", "W3", "omega1", "omega2", "omega3"]
        assert params["W2"]["shape"] == [3, 3]
        assert params["W3"]["shape"] == [1, 3]
        assert params["Q1"]["shape"] == [2, 2]
        assert params["W2"]["nonneg"]
        assert not params["V1"]["nonneg"]
        assert graph.psi is not None

    def test_constant_model_is_a_single_affine_node(self):
        arch = small_arch(Activation.relu)
        model = PcfModel(arch, np.zeros(arch.weight_count))

        graph = to_expr_graph(model, ExportMode.bound_theta, THETA)

        assert graph.kinds() == [NodeKind.affine]
        assert graph.nodes[0].inputs == ()
        np.testing.assert_array_equal(evaluate_graph(graph, sample_x(3)), np.zeros((3, 1)))

    def test_node_inputs_come_first(self, model):
        graph = to_expr_graph(model, ExportMode.symbolic_theta)

        for node in graph.nodes:
            refs = [op.ref for op in node.operands.values() if op.ref is not None]
            assert all(i < node.id for i in list(node.inputs) + refs)

    def test_json_document(self, model):
        graph = to_expr_graph(model, ExportMode.bound_theta, THETA)

        document = json.loads(graph.dumps())

        assert document["format_version"] == 1
        assert document["mode"] == "bound_theta"
        assert document["theta"] == THETA.tolist()
        assert len(document["nodes"]) == len(graph.nodes)
        assert document["psi"] is None


class TestCertify:
    def graph(self, *nodes: Node) -> ExprGraph:
        return ExprGraph(
            mode=ExportMode.bound_theta, n=1, p=0, d=1, nodes=nodes, outputs=((len(nodes) - 1, 0),), theta=np.zeros(0)
        )

    def test_rejects_negative_weights_on_a_convex_node(self):
        graph = self.graph(
            Node(0, NodeKind.variable, 1, attrs={"name": "x"}),
            Node(1, NodeKind.relu, 1, (0,)),
            Node(2, NodeKind.nonneg_matmul, 1, (1,), {"matrix": Operand(value=np.array([[-1.0]]))}),
        )

        with pytest.raises(CertificationError):
            certify(graph)

    def test_rejects_affine_map_with_negative_matrix_of_a_convex_node(self):
        graph = self.graph(
            Node(0, NodeKind.variable, 1, attrs={"name": "x"}),
            Node(1, NodeKind.softplus, 1, (0,)),
            Node(
                2,
                NodeKind.affine,
                1,
                (1,),
                {"matrix": Operand(value=np.array([[-2.0]])), "offset": Operand(value=np.zeros(1))},
            ),
        )

        with pytest.raises(CertificationError):
            certify(graph)

    def test_rejects_squares_of_a_convex_node(self):
        graph = self.graph(
            Node(0, NodeKind.variable, 1, attrs={"name": "x"}),
            Node(1, NodeKind.relu, 1, (0,)),
            Node(2, NodeKind.sum_of_squares, 1, (1,), {"factor0": Operand(value=np.eye(1))}),
        )

        with pytest.raises(CertificationError):
            certify(graph)

    def test_affine_of_x_may_have_any_sign(self):
        graph = self.graph(
            Node(0, NodeKind.variable, 1, attrs={"name": "x"}),
            Node(
                1,
                NodeKind.affine,
                1,
                (0,),
                {"matrix": Operand(value=np.array([[-2.0]])), "offset": Operand(value=np.ones(1))},
            ),
        )

        assert certify(graph)[1] == Curvature.affine


class TestThetaHandling:
    def test_bound_needs_theta(self):
        with pytest.raises(InvalidInputError):
            to_expr_graph(random_model(small_arch()), ExportMode.bound_theta)

    def test_bound_takes_one_theta(self):
        with pytest.raises(InvalidInputError):
            to_expr_graph(random_model(small_arch()), ExportMode.bound_theta, np.zeros((2, 2)))

    def test_theta_of_wrong_size(self):
        with pytest.raises(InvalidInputError):
            to_expr_graph(random_model(small_arch()), ExportMode.bound_theta, np.zeros(3))

    def test_symbolic_evaluation_needs_theta(self):
        graph = to_expr_graph(random_model(small_arch()), ExportMode.symbolic_theta)

        with pytest.raises(InvalidInputError):
            evaluate_graph(graph, np.zeros(2))

    def test_bound_graph_has_no_parameter_values(self):
        graph = to_expr_graph(random_model(small_arch()), ExportMode.bound_theta, THETA)

        with pytest.raises(InvalidInputError):
            parameter_values(graph, THETA)


class TestEmission:
    def test_cvxpy_uses_convex_atoms(self):
        graph = to_expr_graph(random_model(small_arch(Activation.relu, "full")), ExportMode.bound_theta, THETA)

        code = emit_code(graph, load_template("cvxpy"))

        assert "import cvxpy as cp" in code
        assert "cp.pos(" in code
        assert "cp.sum_squares(" in code

    def test_symbolic_cvxpy_reads_params(self):
        graph = to_expr_graph(random_model(small_arch(Activation.softplus)), ExportMode.symbolic_theta)

        code = emit_code(graph, load_template("cvxpy"))

        assert 'params["W2"]' in code
        assert "cp.logistic(" in code

    def test_deterministic(self, model):
        graph = to_expr_graph(model, ExportMode.symbolic_theta)
        template = load_template("cvxpy")

        assert emit_code(graph, template) == emit_code(to_expr_graph(model, ExportMode.symbolic_theta), template)

    def test_missing_snippets_are_listed(self):
        template = load_template("numpy")
        del template["snippets"]["relu"]
        del template["snippets"]["add"]
        graph = to_expr_graph(random_model(small_arch(Activation.relu)), ExportMode.bound_theta, THETA)

        with pytest.raises(EmissionError) as error:
            emit_code(graph, template)

        assert error.value.missing == ["add", "relu"]

    def test_unknown_template(self):
        with pytest.raises(FileNotFoundError, match="cvxpy, numpy"):
            load_template("julia")

    def test_template_from_a_path(self, tmp_path):
        path = tmp_path / "custom.toml"
        path.write_text((TEMPLATE_DIR / "numpy.toml").read_text())

        assert load_template(path) == load_template("numpy")

    def test_invalid_toml(self, tmp_path):
        path = tmp_path / "broken.toml"
        path.write_text("header = ")

        with pytest.raises(InvalidInputError):
            load_template(path)


class TestExecuteExport:
    def test_writes_graph_json(self, tmp_path):
        model_path = tmp_path / "model.json"
        save_model(random_model(small_arch()), model_path)
        out = tmp_path / "graph.json"

        text = execute_export(model_path, ExportMode.bound_theta, out, theta=[0.1, 0.2])

        assert out.read_text() == text
        assert json.loads(text)["theta"] == [0.1, 0.2]

    def test_emits_code(self, tmp_path):
        model_path = tmp_path / "model.json"
        model = random_model(small_arch())
        save_model(model, model_path)

        text = execute_export(model_path, ExportMode.bound_theta, None, theta=[0.1, 0.2], template="numpy")

        x = np.array([0.3, 0.4])
        theta = np.array([0.1, 0.2])
        np.testing.assert_allclose(run_numpy_code(text)(x), evaluate(model, x, theta), rtol=1e-10, atol=1e-10)
