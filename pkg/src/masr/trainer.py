"""Two-phase SGD training of the MASR heads.

Epochs ``0 .. epochs_phase1-1`` train the scene head on features alone;
from ``epochs_phase1`` on the joint objective is optimised.  Plain SGD with
a per-group learning rate that decays by ``lr_decay`` every ``lr_step``
epochs on one global epoch clock.  Shuffling and initialisation are derived
from ``(seed, epoch)`` so a restored checkpoint replays bit-exactly.
"""

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import load_dataclass
from .errors import ConfigError, NonFiniteLossError, ParseError, SchemaError
from .model import (
    BETA_MODES,
    MasrParams,
    ModelShape,
    compute_regularizer,
    loss_and_grad,
    param_group,
    read_checkpoint,
    write_checkpoint,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs_phase1: int = 15
    epochs_total: int = 100
    lr_classifier: float = 0.01
    lr_base: float = 0.001
    lr_decay: float = 0.1
    lr_step: int = 20
    batch_size: int = 128
    seed: int = 0
    cascade_depth: int = 2
    attr_hidden: int = 0
    adapter: bool = False
    beta_mode: str = "positive"
    mean_over_attributes: bool = True
    xi: float = 0.8

    def validate(self):
        if not 0 <= self.epochs_phase1 < self.epochs_total:
            raise ConfigError(
                f"need 0 <= epochs_phase1 < epochs_total, got {self.epochs_phase1} and {self.epochs_total}"
            )
        if not 0 < self.lr_decay <= 1:
            raise ConfigError(f"lr_decay must lie in (0, 1], got {self.lr_decay}")
        if self.lr_step < 1:
            raise ConfigError("lr_step must be at least 1")
        if self.lr_classifier < 0 or self.lr_base < 0:
            raise ConfigError("learning rates must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.cascade_depth < 1:
            raise ConfigError("cascade_depth must be at least 1")
        if self.attr_hidden < 0:
            raise ConfigError("attr_hidden must be non-negative")
        if self.beta_mode not in BETA_MODES:
            raise ConfigError(f"beta_mode must be one of {BETA_MODES}")
        if not 0 <= self.xi < 1:
            raise ConfigError("xi must lie in [0, 1)")
        return self


def read_config(path=None, **overrides):
    """TrainConfig from a ``key = value`` file plus non-None overrides."""
    return load_dataclass(TrainConfig, path, **overrides).validate()


def lr_at(epoch, config):
    """``(lr_classifier, lr_base)`` for a 0-based epoch."""
    if epoch < 0:
        raise ConfigError("epoch must be non-negative")
    factor = config.lr_decay ** (epoch // config.lr_step)
    return config.lr_classifier * factor, config.lr_base * factor


def mode_at(epoch, config):
    return "scene_only" if epoch < config.epochs_phase1 else "joint"


@dataclass
class TrainState:
    epoch: int
    params: MasrParams
    rng_state: int  # the seed; every epoch's permutation derives from (seed, epoch)
    loss_history: list = field(default_factory=list)  # (epoch, L_cls, L_att, L_MASR)


def _rng(seed, *key):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def model_shape(config, dataset):
    return ModelShape(
        d=dataset.d, m=dataset.m, K=dataset.K, depth=config.cascade_depth,
        attr_hidden=config.attr_hidden, adapter=config.adapter,
    )


def init_state(config, dataset):
    config.validate()
    params = MasrParams.init(model_shape(config, dataset), _rng(config.seed, 0))
    return TrainState(0, params, config.seed)


def regularizer_for(dataset):
    return compute_regularizer(dataset.Ahat, dataset.y, dataset.K)


def train_epoch(state, dataset, mode, config, reg=None):
    """One seeded pass over ``dataset``; returns a new state."""
    if len(dataset) == 0:
        raise ConfigError("cannot train on an empty dataset")
    reg = regularizer_for(dataset) if reg is None else reg
    epoch = state.epoch
    lr = dict(zip(("classifier", "base"), lr_at(epoch, config)))
    order = _rng(state.rng_state, 1, epoch).permutation(len(dataset))
    params = state.params.copy()
    sums = [0.0, 0.0, 0.0]
    for b, start in enumerate(range(0, len(order), config.batch_size)):
        idx = order[start:start + config.batch_size]
        # non-finite values are reported below with their epoch and batch
        with np.errstate(all="ignore"):
            terms, grads = loss_and_grad(
                params, dataset.X[idx], dataset.A[idx], dataset.Ahat[idx], dataset.y[idx], reg,
                mode=mode, beta_mode=config.beta_mode, mean_over_attributes=config.mean_over_attributes,
            )
        for name, value in (("L_cls", terms.cls), ("L_att", terms.att), ("L_MASR", terms.total)):
            if not math.isfinite(value):
                raise NonFiniteLossError(epoch, b, name, value)
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteLossError(epoch, b, f"gradient of {name}", float("nan"))
            params.arrays[name] = params.arrays[name] - lr[param_group(name)] * g
        sums[0] += terms.cls * len(idx)
        sums[1] += terms.att * len(idx)
        sums[2] += terms.total * len(idx)
    n = len(dataset)
    row = (epoch, sums[0] / n, sums[1] / n, sums[2] / n)
    log.debug("epoch %d %s L_cls=%.5f L_att=%.5f L_MASR=%.5f", epoch, mode, *row[1:])
    return TrainState(epoch + 1, params, state.rng_state, state.loss_history + [row])


def run(config, dataset, state=None, until=None, on_epoch=None):
    """Train from ``state`` (fresh when None) up to epoch ``until`` (default: all)."""
    config.validate()
    if state is None:
        state = init_state(config, dataset)
    expected = model_shape(config, dataset)
    if state.params.shape != expected:
        raise SchemaError(f"checkpoint shape {state.params.shape} does not match data/config {expected}")
    until = config.epochs_total if until is None else min(until, config.epochs_total)
    reg = regularizer_for(dataset)
    while state.epoch < until:
        state = train_epoch(state, dataset, mode_at(state.epoch, config), config, reg)
        if on_epoch is not None:
            on_epoch(state)
    return state


def save_state(path, state, config, category_names=(), attribute_labels=()):
    extra = {
        "epoch": state.epoch,
        "rng_state": state.rng_state,
        "config": dataclasses.asdict(config),
        "loss_history": [list(r) for r in state.loss_history],
        "category_names": list(category_names),
        "attribute_labels": list(attribute_labels),
    }
    write_checkpoint(path, state.params, extra)


def load_state(path):
    """Return ``(state, config, extra)``; ``extra`` also holds label names."""
    params, extra = read_checkpoint(path)
    try:
        config = TrainConfig(**extra["config"]).validate()
        history = [(int(r[0]), float(r[1]), float(r[2]), float(r[3])) for r in extra["loss_history"]]
        state = TrainState(int(extra["epoch"]), params, int(extra["rng_state"]), history)
    except (KeyError, TypeError, IndexError, ValueError) as exc:
        raise SchemaError(f"{path}: not a training checkpoint ({exc})") from None
    if len(history) != state.epoch:
        raise SchemaError(f"{path}: loss history has {len(history)} rows for epoch {state.epoch}")
    return state, config, extra


def write_loss_history(history, path):
    lines = ["epoch\tL_cls\tL_att\tL_MASR\n"]
    lines += [f"{e}\t{c!r}\t{a!r}\t{t!r}\n" for e, c, a, t in history]
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_loss_history(path):
    rows = []
    with open(path, encoding="utf-8") as fh:
        next(fh, None)
        for lineno, line in enumerate(fh, 2):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 4:
                raise ParseError(path, lineno, "expected epoch<TAB>L_cls<TAB>L_att<TAB>L_MASR")
            rows.append((int(parts[0]), float(parts[1]), float(parts[2]), float(parts[3])))
    return rows
