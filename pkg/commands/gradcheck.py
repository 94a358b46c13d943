"""
Finite-difference audit of every differentiable layer and loss.

Each check builds a scalar function of one input tensor, compares its
reverse-mode gradient with central differences and records the worst error
seen over all instances. Pass or fail is decided on the error scaled by the
gradient's largest entry; the element-wise relative error is reported
alongside.
"""
import json
import logging
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import click
import numpy as np

from diffcore import (
    Tensor,
    add_bias,
    backward,
    finite_diff_grad,
    frobenius_norm,
    log_softmax,
    matmul,
    mul,
    relative_error,
    relu,
    row_norm,
    scaled_error,
    sum as tensor_sum,
)
from ega import (
    combine_terms,
    cross_entropy,
    edge_loss,
    edge_matrix,
    ega_loss,
    ega_terms,
    kd_loss,
    node_loss,
    node_matrix,
    pearson,
    total_loss,
)
from errors import AcceptanceFailure, ConfigError
from models import NetworkSpec, embed_batch, init_network, network_forward
from commands.utils import parse_values

logger = logging.getLogger(__name__)

TOLERANCE = 1e-5
STEP = 1e-6
DEFAULT_INSTANCES = 20
BATCH_RANGE = (3, 8)
DIM_RANGE = (4, 16)
# analytic gradients of the corrupted op are scaled by this factor
CORRUPTION = 1.01

# builder(rng, B, D) -> (scalar function of one tensor, point to check)
Builder = Callable[[np.random.Generator, int, int], Tuple[Callable[[Tensor], Tensor], np.ndarray]]


def _weighted(out: Tensor, weights: np.ndarray) -> Tensor:
    return tensor_sum(mul(out, Tensor(weights)))


def _linear(rng, b, d):
    x, bias = rng.normal(size=(b, d)), rng.normal(size=d + 1)
    weights = rng.normal(size=(b, d + 1))
    return (lambda w: _weighted(add_bias(matmul(Tensor(x), w), Tensor(bias)), weights)), rng.normal(size=(d, d + 1))


def _relu(rng, b, d):
    x = rng.normal(size=(b, d))
    # keep every entry away from the kink
    x = x + np.where(x >= 0, 0.1, -0.1)
    weights = rng.normal(size=(b, d))
    return (lambda t: _weighted(relu(t), weights)), x


def _row_norm(rng, b, d):
    weights = rng.normal(size=(b, 1))
    return (lambda t: _weighted(row_norm(t), weights)), rng.normal(size=(b, d))


def _log_softmax(rng, b, d):
    weights = rng.normal(size=(b, d))
    return (lambda t: _weighted(log_softmax(t), weights)), rng.normal(size=(b, d))


def _frobenius(rng, b, d):
    return frobenius_norm, rng.normal(size=(b, d))


def _pearson(rng, b, d):
    y = rng.normal(size=d)
    return (lambda t: pearson(t, Tensor(y))), rng.normal(size=d)


def _edge_matrix(rng, b, d):
    weights = rng.normal(size=(b, b))
    return (lambda t: _weighted(edge_matrix(t).values, weights)), rng.normal(size=(b, d))


def _node_matrix(rng, b, d):
    teacher, weights = rng.normal(size=(b, d)), rng.normal(size=(b, b))
    return (lambda t: _weighted(node_matrix(Tensor(teacher), t).values, weights)), rng.normal(size=(b, d))


def _edge_loss(rng, b, d):
    teacher_edges = edge_matrix(Tensor(rng.normal(size=(b, d))))
    return (lambda t: edge_loss(teacher_edges, edge_matrix(t))), rng.normal(size=(b, d))


def _node_loss(rng, b, d):
    teacher = Tensor(rng.normal(size=(b, d)))
    return (lambda t: node_loss(node_matrix(teacher, t))), rng.normal(size=(b, d))


def _ega_loss(rng, b, d):
    teacher = Tensor(rng.normal(size=(b, d)))
    return (lambda t: ega_loss(teacher, t, lam=0.3)), rng.normal(size=(b, d))


def _cross_entropy(rng, b, d):
    labels = rng.integers(d, size=b)
    return (lambda t: cross_entropy(t, labels)), rng.normal(size=(b, d))


def _kd_loss(rng, b, d):
    teacher_logits = rng.normal(size=(b, d))
    return (lambda t: kd_loss(t, Tensor(teacher_logits), temperature=4.0)), rng.normal(size=(b, d))


def _student_objective(rng, b, d):
    """L_ce + λ_EGA·(L_node + λ·L_edge) + L_kd through a one-hidden-layer student."""
    classes = 3
    spec = NetworkSpec(input_dim=d, hidden_dims=(6,), num_classes=classes, embed_dim=d)
    student = init_network(spec, seed=int(rng.integers(2**31)))
    x = Tensor(rng.normal(size=(b, d)))
    labels = rng.integers(classes, size=b)
    teacher_embed = Tensor(rng.normal(size=(b, d)))
    teacher_logits = Tensor(rng.normal(size=(b, classes)))

    def objective(w: Tensor) -> Tensor:
        student.backbone[0].weight = w
        features, logits = network_forward(student, x)
        l_node, l_edge = ega_terms(teacher_embed, embed_batch(student, features))
        ega = combine_terms(l_node, l_edge, lam=0.3)
        return total_loss(cross_entropy(logits, labels), ega, 0.8, kd_loss(logits, teacher_logits), 1.0)

    return objective, student.backbone[0].weight.data.copy()


CHECKS: Dict[str, Builder] = {
    "linear": _linear,
    "relu": _relu,
    "row_norm": _row_norm,
    "log_softmax": _log_softmax,
    "frobenius_norm": _frobenius,
    "pearson": _pearson,
    "edge_matrix": _edge_matrix,
    "node_matrix": _node_matrix,
    "edge_loss": _edge_loss,
    "node_loss": _node_loss,
    "ega_loss": _ega_loss,
    "cross_entropy": _cross_entropy,
    "kd_loss": _kd_loss,
    "student_objective": _student_objective,
}


def analytic_grad(f: Callable[[Tensor], Tensor], point: np.ndarray) -> np.ndarray:
    x = Tensor(point, requires_grad=True)
    backward(f(x))
    return x.grad


def instance_sizes(rng: np.random.Generator, instances: int,
                   sizes: Optional[Sequence[Tuple[int, int]]] = None) -> List[Tuple[int, int]]:
    if sizes:
        return [tuple(sizes[i % len(sizes)]) for i in range(instances)]
    return [(int(rng.integers(BATCH_RANGE[0], BATCH_RANGE[1] + 1)),
             int(rng.integers(DIM_RANGE[0], DIM_RANGE[1] + 1))) for _ in range(instances)]


def check_op(name: str, seed: int = 0, instances: int = DEFAULT_INSTANCES,
             sizes: Optional[Sequence[Tuple[int, int]]] = None, corrupt: Optional[str] = None,
             tolerance: float = TOLERANCE) -> Dict:
    if name not in CHECKS:
        raise ConfigError(f"unknown op '{name}'; known: {', '.join(CHECKS)}")
    index = list(CHECKS).index(name)
    shapes = instance_sizes(np.random.default_rng([seed, index]), instances, sizes)
    worst, worst_shape, worst_elementwise = 0.0, None, 0.0
    for i, (b, d) in enumerate(shapes):
        rng = np.random.default_rng([seed, index, i])
        f, point = CHECKS[name](rng, b, d)
        analytic = analytic_grad(f, point)
        if name == corrupt:
            analytic = analytic * CORRUPTION
        numeric = finite_diff_grad(f, point, step=STEP)
        err = scaled_error(analytic, numeric)
        worst_elementwise = max(worst_elementwise, relative_error(analytic, numeric))
        if err >= worst:
            worst, worst_shape = err, [b, d]
    record = {
        "op": name,
        "instances": len(shapes),
        "max_scaled_error": worst,
        "max_relative_error": worst_elementwise,
        "worst_shape": worst_shape,
        "tolerance": tolerance,
        "passed": worst <= tolerance,
    }
    logger.info("gradcheck %-18s scaled err %.3e elementwise %.3e %s", name, worst, worst_elementwise,
                "ok" if record["passed"] else "FAIL")
    return record


def run_gradcheck(seed: int = 0, instances: int = DEFAULT_INSTANCES,
                  sizes: Optional[Sequence[Tuple[int, int]]] = None, ops: Optional[Sequence[str]] = None,
                  corrupt: Optional[str] = None) -> List[Dict]:
    return [check_op(name, seed, instances, sizes, corrupt) for name in (ops or CHECKS)]


def parse_sizes(text: Optional[str]) -> Optional[List[Tuple[int, int]]]:
    """'4x8,6x12' -> [(4, 8), (6, 12)]."""
    if text is None:
        return None
    sizes = []
    for part in parse_values(text, str):
        try:
            b, d = (int(v) for v in part.lower().split("x"))
        except ValueError as e:
            raise ConfigError(f"size '{part}' is not of the form BxD") from e
        if b < 2 or d < 2:
            raise ConfigError(f"size '{part}' needs B >= 2 and D >= 2")
        sizes.append((b, d))
    return sizes


@click.command("gradcheck")
@click.option("--seed", type=int, default=0)
@click.option("--sizes", default=None, help="Comma-separated BxD sizes (default: random B in 3..8, D in 4..16).")
@click.option("--instances", type=click.IntRange(min=1), default=DEFAULT_INSTANCES)
@click.option("--op", "ops", multiple=True, type=click.Choice(list(CHECKS)), help="Restrict to these ops.")
@click.option("--out", type=click.Path(file_okay=False), default=None, help="Directory for gradcheck.ndjson.")
@click.option("--corrupt-op", type=click.Choice(list(CHECKS)), default=None, hidden=True)
def gradcheck_command(seed, sizes, instances, ops, out, corrupt_op):
    """Compare analytic and finite-difference gradients of every op."""
    records = run_gradcheck(seed, instances, parse_sizes(sizes), list(ops) or None, corrupt_op)
    lines = [json.dumps(r, separators=(",", ":")) for r in records]
    for line in lines:
        click.echo(line)
    if out is not None:
        path = Path(out)
        path.mkdir(parents=True, exist_ok=True)
        (path / "gradcheck.ndjson").write_text("\n".join(lines) + "\n", encoding="utf-8")
    failed = [r["op"] for r in records if not r["passed"]]
    if failed:
        raise AcceptanceFailure(f"gradient check failed for: {', '.join(failed)}", failed)
