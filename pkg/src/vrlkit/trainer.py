"""Training loops for ERM and the Mixup/CutMix strategy family, plus seed
ensembles and accuracy-driven grid search.

Every run derives all of its randomness from TrainConfig.seed through
labelled RngState streams (init / shuffle / mixing / coin), so two runs with
the same config produce byte-identical ExperimentRecords, and strategies that
degenerate to ERM (eta=0, forced lambda=1) replay the exact same batches.
"""

import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .datagen import Dataset, split
from .tensor import RngState
from .vicinal import BetaParams, cutmix_batch, mixup_batch, regmix_loss

STRATEGIES = (
    "erm",
    "mixup",
    "regmixup",
    "cutmix",
    "regcutmix",
    "mixup_plus_cutmix",
    "reg_mixup_plus_regcutmix",
)

_MIXING = {s for s in STRATEGIES if s != "erm"}
_REGULARIZED = {"regmixup", "regcutmix", "reg_mixup_plus_regcutmix"}
_NEEDS_IMAGES = {"cutmix", "regcutmix", "mixup_plus_cutmix", "reg_mixup_plus_regcutmix"}
_ALTERNATING = {"mixup_plus_cutmix", "reg_mixup_plus_regcutmix"}

# RngState stream labels; keeping them distinct makes shuffling independent
# of how many draws the mixing ops consume.
_S_INIT, _S_SHUFFLE, _S_MIX, _S_COIN = 0, 1, 2, 3

# Hyperparameter grids used for cross-validation presets.
MIXUP_ALPHA_GRID = (0.1, 0.2, 0.3, 0.4, 0.5, 1.0, 5.0, 10.0, 20.0)
REGMIXUP_ALPHA_GRID = (0.1, 0.2, 0.3, 0.4, 0.5, 1.0, 5.0, 10.0, 15.0, 20.0, 30.0)
REGMIXUP_ETA_GRID = (0.1, 1.0, 2.0)


def deterministic_mode() -> bool:
    """True when VRL_DETERMINISTIC=1: single worker, no wall-clock in records."""
    return os.environ.get("VRL_DETERMINISTIC", "") == "1"


@dataclass(frozen=True)
class TrainConfig:
    strategy: str
    hidden_dims: tuple = (64, 64)
    activation: str = "relu"
    alpha: float | None = None
    eta: float | None = None
    epochs: int = 100
    batch_size: int = 128
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    schedule: str = "cosine"
    seed: int = 0
    lambda_mode: str = "per_batch"
    force_lambda: float | None = None  # test hook: pins the mixing factor

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.strategy in _MIXING and (self.alpha is None or self.alpha <= 0):
            raise ValueError(f"strategy {self.strategy} requires alpha > 0")
        if self.strategy in _REGULARIZED and (self.eta is None or self.eta < 0):
            raise ValueError(f"strategy {self.strategy} requires eta >= 0")
        if self.epochs < 1 or self.batch_size < 2:
            raise ValueError("need epochs >= 1 and batch_size >= 2")

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "hidden_dims": ",".join(str(h) for h in self.hidden_dims),
            "activation": self.activation,
            "alpha": self.alpha,
            "eta": self.eta,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "schedule": self.schedule,
            "seed": self.seed,
            "lambda_mode": self.lambda_mode,
            "force_lambda": self.force_lambda,
        }


@dataclass
class ExperimentRecord:
    """Persisted result of one training run (versioned text document)."""

    config: dict
    epoch_losses: list
    metrics: dict
    seed: int
    wall_clock_s: float
    checkpoint: str = "-"

    def to_text(self) -> str:
        lines = ["vrlkit-record v1", "[config]"]
        for key in sorted(self.config):
            lines.append(f"{key} = {_fmt(self.config[key])}")
        lines.append("[epoch_losses]")
        for i, loss in enumerate(self.epoch_losses):
            lines.append(f"{i} = {_fmt(loss)}")
        lines.append("[metrics]")
        for key in sorted(self.metrics):
            lines.append(f"{key} = {_fmt(self.metrics[key])}")
        lines.append("[meta]")
        lines.append(f"seed = {self.seed}")
        lines.append(f"wall_clock_s = {_fmt(self.wall_clock_s)}")
        lines.append(f"checkpoint = {self.checkpoint}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ExperimentRecord":
        header, *lines = text.strip().split("\n")
        if header != "vrlkit-record v1":
            raise ValueError(f"unknown record version: {header!r}")
        section = None
        config, losses, metrics, meta = {}, {}, {}, {}
        for line in lines:
            if line.startswith("["):
                section = line.strip("[]")
                continue
            key, _, value = line.partition(" = ")
            target = {
                "config": config,
                "epoch_losses": losses,
                "metrics": metrics,
                "meta": meta,
            }[section]
            target[key] = value
        return cls(
            config={k: _parse(v) for k, v in config.items()},
            epoch_losses=[float(losses[str(i)]) for i in range(len(losses))],
            metrics={k: float(v) for k, v in metrics.items()},
            seed=int(meta["seed"]),
            wall_clock_s=float(meta["wall_clock_s"]),
            checkpoint=meta.get("checkpoint", "-"),
        )

    def train_config(self) -> TrainConfig:
        c = self.config
        return TrainConfig(
            strategy=c["strategy"],
            hidden_dims=tuple(int(h) for h in str(c["hidden_dims"]).split(",") if h),
            activation=c["activation"],
            alpha=c["alpha"],
            eta=c["eta"],
            epochs=int(c["epochs"]),
            batch_size=int(c["batch_size"]),
            learning_rate=c["learning_rate"],
            momentum=c["momentum"],
            weight_decay=c["weight_decay"],
            schedule=c["schedule"],
            seed=int(c["seed"]),
            lambda_mode=c["lambda_mode"],
            force_lambda=c["force_lambda"],
        )


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(value: str):
    if value == "none":
        return None
    try:
        return int(value)
    except ValueError:
        pass
    try:
        return float(value)
    except ValueError:
        return value


def build_network(config: TrainConfig, in_dim: int, n_classes: int, rng: RngState) -> nn.Network:
    dims = [in_dim, *config.hidden_dims]
    specs = [
        nn.LayerSpec(a, b, config.activation) for a, b in zip(dims, dims[1:])
    ]
    specs.append(nn.LayerSpec(dims[-1], n_classes, "identity"))
    return nn.Network(specs, rng=rng)


def _batch_bounds(n: int, batch_size: int):
    bounds = list(range(0, n, batch_size)) + [n]
    # Mixing needs >= 2 samples; fold a trailing singleton into its neighbour.
    if len(bounds) > 2 and bounds[-1] - bounds[-2] == 1:
        bounds.pop(-2)
    return list(zip(bounds[:-1], bounds[1:]))


def _mixed_for(op: str, xb, yb, config, mix_rng, image_shape):
    params = BetaParams(config.alpha)
    if op == "mixup":
        return mixup_batch(
            xb, yb, params, config.lambda_mode, mix_rng, lam=config.force_lambda
        )
    return cutmix_batch(xb, yb, params, mix_rng, image_shape, lam=config.force_lambda)


def train(
    config: TrainConfig, train_ds: Dataset, val_ds: Dataset | None
) -> tuple[nn.Network, ExperimentRecord]:
    """Train one network under the configured strategy.

    Returns the trained network and an ExperimentRecord holding the config,
    per-epoch mean training losses, and final validation metrics.
    """
    if train_ds.n < 2:
        raise ValueError("training needs at least 2 samples")
    if config.strategy in _NEEDS_IMAGES and train_ds.image_shape is None:
        raise ValueError(f"strategy {config.strategy} needs image-shaped data")
    if val_ds is not None and val_ds.d != train_ds.d:
        raise ValueError("train/val feature dimensions differ")
    t_start = time.perf_counter()
    root = RngState(config.seed)
    net = build_network(config, train_ds.d, train_ds.k, root.split(_S_INIT))
    opt = nn.OptimState(
        learning_rate=config.learning_rate,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
        schedule=config.schedule,
    )
    y_onehot = train_ds.onehot()
    n = train_ds.n
    bounds = _batch_bounds(n, config.batch_size)
    total_steps = config.epochs * len(bounds)
    epoch_losses = []
    step = 0
    for epoch in range(config.epochs):
        order = root.split(_S_SHUFFLE, epoch).permutation(n)
        loss_sum = 0.0
        for b, (lo, hi) in enumerate(bounds):
            idx = order[lo:hi]
            xb = train_ds.x[idx]
            yb = y_onehot[idx]
            loss, grads = _strategy_step(
                config, net, xb, yb, train_ds.image_shape,
                root.split(_S_MIX, epoch, b), root.split(_S_COIN, epoch, b),
            )
            nn.sgd_step(net, grads, opt, step / total_steps)
            loss_sum += loss * idx.size
            step += 1
        epoch_losses.append(loss_sum / n)
    metrics = {}
    if val_ds is not None:
        logits, _, _ = nn.forward(net, val_ds.x)
        probs = nn.softmax(logits)
        metrics["val_accuracy"] = accuracy_from_logits(logits, val_ds.labels)
        metrics["val_loss"] = nn.cross_entropy_soft(probs, val_ds.onehot())
    wall = 0.0 if deterministic_mode() else time.perf_counter() - t_start
    record = ExperimentRecord(
        config=config.to_dict(),
        epoch_losses=epoch_losses,
        metrics=metrics,
        seed=config.seed,
        wall_clock_s=wall,
    )
    return net, record


def _strategy_step(config, net, xb, yb, image_shape, mix_rng, coin_rng):
    strategy = config.strategy
    if strategy == "erm":
        logits, _, cache = nn.forward(net, xb)
        loss = nn.cross_entropy_soft(nn.softmax(logits), yb)
        return loss, nn.backward(net, cache, yb)
    if strategy in _ALTERNATING:
        op = "mixup" if coin_rng.uniform(1)[0] < 0.5 else "cutmix"
    else:
        op = "cutmix" if strategy in ("cutmix", "regcutmix") else "mixup"
    mixed = _mixed_for(op, xb, yb, config, mix_rng, image_shape)
    if strategy in _REGULARIZED:
        return regmix_loss(net, xb, yb, mixed, config.eta)
    logits, _, cache = nn.forward(net, mixed.x_mixed)
    loss = nn.cross_entropy_soft(nn.softmax(logits), mixed.y_mixed)
    return loss, nn.backward(net, cache, mixed.y_mixed)


def accuracy_from_logits(logits, labels) -> float:
    preds = np.asarray(logits).argmax(axis=1)
    return float((preds == np.asarray(labels)).mean())


def accuracy(net: nn.Network, ds: Dataset) -> float:
    logits, _, _ = nn.forward(net, ds.x)
    return accuracy_from_logits(logits, ds.labels)


def cross_validate(
    grid: list, train_ds: Dataset, metric: str = "accuracy",
    split_seed: int | None = None,
) -> TrainConfig:
    """Pick the grid config with the best validation accuracy.

    Each config is trained on a stratified 90% split and scored on the held
    out 10%; ties break toward the earliest grid entry.
    """
    if not grid:
        raise ValueError("empty grid")
    if metric != "accuracy":
        raise ValueError("selection metric must be accuracy")
    if split_seed is None:
        split_seed = grid[0].seed
    tr, val = split(train_ds, 0.9, stratified=True, rng=RngState(split_seed).split(9))
    best_config, best_score = None, -1.0
    for config in grid:
        net, _ = train(config, tr, None)
        score = accuracy(net, val)
        if score > best_score:
            best_config, best_score = config, score
    return best_config


def default_search_grid(base: TrainConfig) -> list:
    """Strategy-appropriate hyperparameter grid around a base config."""
    if base.strategy == "mixup":
        return [replace(base, alpha=a) for a in MIXUP_ALPHA_GRID]
    if base.strategy == "regmixup":
        return [
            replace(base, alpha=a, eta=e)
            for a in REGMIXUP_ALPHA_GRID
            for e in REGMIXUP_ETA_GRID
        ]
    return [base]


@dataclass
class EnsembleModel:
    """Independently seeded members sharing one architecture."""

    members: list = field(default_factory=list)

    def __post_init__(self):
        if not self.members:
            raise ValueError("ensemble needs at least one member")
        shapes = {tuple((s.in_dim, s.out_dim, s.activation) for s in m.layers)
                  for m in self.members}
        if len(shapes) != 1:
            raise ValueError("members must share an architecture")


def train_ensemble(
    config: TrainConfig, n_members: int, train_ds: Dataset, val_ds: Dataset | None
) -> EnsembleModel:
    """Train n members with seeds seed, seed+1, ... and identical configs."""
    if n_members < 1:
        raise ValueError("n_members must be >= 1")
    members = []
    for i in range(n_members):
        net, _ = train(replace(config, seed=config.seed + i), train_ds, val_ds)
        members.append(net)
    return EnsembleModel(members)


def ensemble_predict(
    ens: EnsembleModel, x, mode: str = "mean_logit"
) -> tuple[np.ndarray, np.ndarray]:
    """Aggregate member predictions.

    mean_prob averages member softmax outputs; mean_logit averages logits and
    applies softmax once (the form temperature scaling expects).  Returns
    (probs, mean_logits).
    """
    if mode not in ("mean_prob", "mean_logit"):
        raise ValueError(f"unknown mode {mode!r}")
    logit_list = [nn.forward(m, x)[0] for m in ens.members]
    mean_logits = np.mean(logit_list, axis=0)
    if mode == "mean_prob":
        probs = np.mean([nn.softmax(l) for l in logit_list], axis=0)
    else:
        probs = nn.softmax(mean_logits)
    return probs, mean_logits
