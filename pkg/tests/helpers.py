"""Builders shared by the test modules."""
from data import MixtureSpec
from diffcore import SgdConfig
from train import PretrainConfig, TrainConfig

TINY_MIXTURE = MixtureSpec(num_classes=3, input_dim=5, clusters_per_class=1, cluster_spread=0.5,
                           center_scale=2.0, train_per_class=20, test_per_class=10, seed=3)


def tiny_train_config(**overrides) -> TrainConfig:
    values = dict(batch_size=16, seed=0,
                  sgd=SgdConfig(initial_lr=0.05, decay_start_epoch=2, decay_every=1, total_epochs=3))
    values.update(overrides)
    return TrainConfig(**values)


def tiny_pretrain_config(epochs: int = 2, **overrides) -> PretrainConfig:
    values = dict(batch_size=16, seed=0,
                  sgd=SgdConfig(initial_lr=0.05, decay_start_epoch=epochs, decay_every=1, total_epochs=epochs))
    values.update(overrides)
    return PretrainConfig(**values)


def tiny_config_doc(**train_overrides) -> dict:
    """JSON-ready experiment document that trains in well under a second."""
    pretrain = {"sgd": {"initial_lr": 0.05, "decay_start_epoch": 2, "decay_every": 1, "total_epochs": 2},
                "batch_size": 16, "seed": 0}
    train = {"batch_size": 16, "seed": 0, "lambda": 0.3, "lambda_ega": 0.8,
             "sgd": {"initial_lr": 0.05, "decay_start_epoch": 2, "decay_every": 1, "total_epochs": 3}}
    train.update(train_overrides)
    return {
        "schema_version": 1,
        "label": "tiny",
        "mixture": TINY_MIXTURE.model_dump(),
        "teacher": {"input_dim": 5, "hidden_dims": [12], "num_classes": 3, "embed_dim": 4, "role": "teacher"},
        "student": {"input_dim": 5, "hidden_dims": [4], "num_classes": 3, "embed_dim": 4, "role": "student"},
        "teacher_backbone": {**pretrain, "train_backbone": True},
        "teacher_head": pretrain,
        "train": train,
    }


def pearson_oracle(x, y, eps=1e-8) -> float:
    """Scalar double-loop Pearson correlation."""
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    cov = sum((x[i] - mx) * (y[i] - my) for i in range(n))
    sx = sum((x[i] - mx) ** 2 for i in range(n)) ** 0.5
    sy = sum((y[i] - my) ** 2 for i in range(n)) ** 0.5
    return cov / (sx * sy + eps)
