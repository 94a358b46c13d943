"""
Teacher and student MLPs with node-embedding projection heads.

A network is three parameter groups: the ReLU backbone, the classifier head
and the node-embedding layer. Groups listed in `frozen` are held with
requires_grad=False so no gradient ever reaches them.
"""
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Literal, Sequence, Set, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from diffcore import Tensor, add_bias, matmul, relu
from ega import EmbeddingBatch, Origin
from errors import ConfigError, ShapeError

logger = logging.getLogger(__name__)

GROUPS = ("backbone", "head", "embed")
NEW_LAYERS = ("head", "embed")
CHECKPOINT_VERSION = 1


class Role(str, Enum):
    TEACHER = "teacher"
    STUDENT = "student"


class NetworkSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    input_dim: int = Field(gt=0)
    hidden_dims: Tuple[int, ...] = ()
    num_classes: int = Field(gt=0)
    # Pearson over two dimensions is always ±1, so graphs need at least three.
    embed_dim: int = Field(16, ge=3)
    role: Role = Role.STUDENT

    @field_validator("hidden_dims")
    @classmethod
    def _positive_widths(cls, dims):
        if any(d <= 0 for d in dims):
            raise ValueError("hidden layer widths must be positive")
        return dims

    @property
    def feature_dim(self) -> int:
        return self.hidden_dims[-1] if self.hidden_dims else self.input_dim


def teacher_spec(input_dim: int = 20, num_classes: int = 4, embed_dim: int = 16) -> NetworkSpec:
    return NetworkSpec(input_dim=input_dim, hidden_dims=(64, 64), num_classes=num_classes,
                       embed_dim=embed_dim, role=Role.TEACHER)


def student_spec(input_dim: int = 20, num_classes: int = 4, embed_dim: int = 16) -> NetworkSpec:
    return NetworkSpec(input_dim=input_dim, hidden_dims=(8,), num_classes=num_classes,
                       embed_dim=embed_dim, role=Role.STUDENT)


@dataclass
class Linear:
    weight: Tensor  # fan_in × fan_out
    bias: Tensor    # fan_out

    def params(self) -> List[Tensor]:
        return [self.weight, self.bias]

    def __call__(self, x: Tensor) -> Tensor:
        return add_bias(matmul(x, self.weight), self.bias)


@dataclass
class NetworkState:
    spec: NetworkSpec
    backbone: List[Linear]
    head: Linear
    embed: Linear
    frozen: Set[str] = field(default_factory=set)
    metadata: Dict[str, float] = field(default_factory=dict)

    def layers(self, group: str) -> List[Linear]:
        if group == "backbone":
            return list(self.backbone)
        if group == "head":
            return [self.head]
        if group == "embed":
            return [self.embed]
        raise ConfigError(f"unknown parameter group '{group}'")

    def params(self, group: str) -> List[Tensor]:
        return [p for layer in self.layers(group) for p in layer.params()]

    def named_params(self) -> List[Tuple[str, Tensor]]:
        named = []
        for group in GROUPS:
            for i, layer in enumerate(self.layers(group)):
                named.append((f"{group}.{i}.weight", layer.weight))
                named.append((f"{group}.{i}.bias", layer.bias))
        return named


def _linear(rng: np.random.Generator, fan_in: int, fan_out: int, requires_grad: bool) -> Linear:
    bound = 1.0 / np.sqrt(fan_in)
    weight = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    return Linear(Tensor(weight, requires_grad), Tensor(np.zeros(fan_out), requires_grad))


def set_frozen(state: NetworkState, groups: Iterable[str]) -> NetworkState:
    """Replace the frozen mask and align requires_grad with it."""
    groups = set(groups)
    unknown = groups - set(GROUPS)
    if unknown:
        raise ConfigError(f"unknown parameter groups {sorted(unknown)}")
    state.frozen = groups
    for group in GROUPS:
        for p in state.params(group):
            p.requires_grad = group not in groups
            p.grad = None
    return state


def init_network(spec: NetworkSpec, seed: int) -> NetworkState:
    """Uniform(±1/√fan_in) weights, zero biases; teachers start with a frozen backbone."""
    rng = np.random.default_rng(seed)
    widths = [spec.input_dim, *spec.hidden_dims]
    backbone = [_linear(rng, widths[i], widths[i + 1], True) for i in range(len(spec.hidden_dims))]
    head = _linear(rng, spec.feature_dim, spec.num_classes, True)
    embed = _linear(rng, spec.feature_dim, spec.embed_dim, True)
    state = NetworkState(spec=spec, backbone=backbone, head=head, embed=embed)
    return set_frozen(state, {"backbone"} if spec.role == Role.TEACHER else set())


def reset_new_layers(state: NetworkState, seed: int) -> NetworkState:
    """Fresh head and embed layers on top of the existing backbone."""
    rng = np.random.default_rng(seed)
    fresh = NetworkState(
        spec=state.spec,
        backbone=[Linear(Tensor(l.weight.data), Tensor(l.bias.data)) for l in state.backbone],
        head=_linear(rng, state.spec.feature_dim, state.spec.num_classes, True),
        embed=_linear(rng, state.spec.feature_dim, state.spec.embed_dim, True),
        metadata={k: v for k, v in state.metadata.items() if k.startswith("backbone_")},
    )
    return set_frozen(fresh, state.frozen)


def clone_state(state: NetworkState) -> NetworkState:
    def copy(layer: Linear) -> Linear:
        return Linear(Tensor(layer.weight.data), Tensor(layer.bias.data))

    cloned = NetworkState(
        spec=state.spec,
        backbone=[copy(l) for l in state.backbone],
        head=copy(state.head),
        embed=copy(state.embed),
        metadata=dict(state.metadata),
    )
    return set_frozen(cloned, state.frozen)


def snapshot(state: NetworkState) -> Dict[str, np.ndarray]:
    return {name: p.data.copy() for name, p in state.named_params()}


def network_forward(state: NetworkState, batch: Tensor) -> Tuple[Tensor, Tensor]:
    """Return (last hidden activations, logits). Rows never interact."""
    if batch.data.ndim != 2 or batch.shape[1] != state.spec.input_dim:
        raise ShapeError("network_forward", batch.shape, (None, state.spec.input_dim))
    h = batch
    for layer in state.backbone:
        h = relu(layer(h))
    return h, state.head(h)


def node_embed(features: Tensor, embed: Linear, origin: Origin = Origin.STUDENT) -> EmbeddingBatch:
    if features.data.ndim != 2 or features.shape[1] != embed.weight.shape[0]:
        raise ShapeError("node_embed", features.shape, embed.weight.shape)
    return EmbeddingBatch(embed(features), origin)


def embed_batch(state: NetworkState, features: Tensor) -> EmbeddingBatch:
    origin = Origin.TEACHER if state.spec.role == Role.TEACHER else Origin.STUDENT
    return node_embed(features, state.embed, origin)


def trainable_params(state: NetworkState, exclude: Sequence[str] = ()) -> List[Tensor]:
    return [p for group in GROUPS if group not in state.frozen and group not in exclude
            for p in state.params(group)]


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

class ParamArray(BaseModel):
    model_config = ConfigDict(extra="forbid")

    shape: List[int]
    values: List[float]


class CheckpointFile(BaseModel):
    model_config = ConfigDict(extra="forbid")

    version: Literal[1]
    spec: NetworkSpec
    frozen: List[str]
    metadata: Dict[str, float] = {}
    params: Dict[str, ParamArray]


def save_checkpoint(state: NetworkState, path: Path) -> Path:
    path = Path(path)
    doc = CheckpointFile(
        version=CHECKPOINT_VERSION,
        spec=state.spec,
        frozen=sorted(state.frozen),
        metadata=state.metadata,
        params={name: ParamArray(shape=list(p.shape), values=p.data.reshape(-1).tolist())
                for name, p in state.named_params()},
    )
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(doc.model_dump_json())
    tmp.replace(path)
    logger.info("Checkpoint written: %s", path)
    return path


def load_checkpoint(path: Path) -> NetworkState:
    path = Path(path)
    try:
        doc = CheckpointFile.model_validate_json(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"checkpoint not found: {path}")
    except ValidationError as e:
        logger.error("Invalid checkpoint %s: %s", path, e, exc_info=True)
        raise ConfigError(f"invalid checkpoint {path}: {e.error_count()} validation error(s)")

    state = init_network(doc.spec, seed=0)
    expected = dict(state.named_params())
    if set(expected) != set(doc.params):
        raise ConfigError(f"checkpoint {path} parameter names do not match its spec")
    for name, p in expected.items():
        arr = doc.params[name]
        if tuple(arr.shape) != p.shape:
            raise ShapeError("load_checkpoint", p.shape, arr.shape, detail=name)
        p.data = np.array(arr.values, dtype=np.float64).reshape(arr.shape)
    state.metadata = dict(doc.metadata)
    return set_frozen(state, doc.frozen)
