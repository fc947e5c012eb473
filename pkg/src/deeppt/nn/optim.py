"""Adam with L2 weight decay and a two-part learning-rate schedule."""
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .layers import ShapeError

BETA2 = 0.999
EPSILON = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and loop settings.

    ``momentum`` is used as Adam's first-moment coefficient. The learning
    rate decays per optimizer step as ``lr / (1 + lr_decay * step)`` and
    is further multiplied by ``step_factor`` once per ``step_every``
    epochs completed after ``step_start``.
    """

    lr: float = 1e-2
    lr_decay: float = 1e-7
    weight_decay: float = 1e-4
    momentum: float = 0.9
    step_factor: float = 0.2
    step_every: int = 30
    step_start: int = 120
    epochs: int = 200
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        for name in ("lr", "lr_decay", "weight_decay", "momentum", "step_factor"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.step_every < 1:
            raise ValueError("step_every must be >= 1")

    def replace(self, **changes):
        return replace(self, **changes)

    def to_dict(self):
        return asdict(self)


TRACKER_CONFIG = TrainConfig()
SCORE_CONFIG = TrainConfig(
    lr=1e-3, lr_decay=1e-7, weight_decay=1e-5, momentum=0.85, step_factor=0.1
)


def lr_schedule(config, epoch, iteration):
    """Effective learning rate at ``epoch`` after ``iteration`` optimizer steps."""
    if epoch < 0 or iteration < 0:
        raise ValueError("epoch and iteration must be >= 0")
    rate = config.lr / (1.0 + config.lr_decay * iteration)
    steps = max(0, (epoch - config.step_start) // config.step_every)
    return rate * config.step_factor**steps


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_params(cls, named):
        return cls(
            m={k: np.zeros_like(a) for k, a in named.items()},
            v={k: np.zeros_like(a) for k, a in named.items()},
        )


def adam_update(params, grads, state, config, epoch):
    """Apply one Adam step in place to ``params`` for every name in ``grads``.

    ``params`` is a :class:`~deeppt.nn.network.NetworkParams` or a plain
    dict of arrays. Names absent from ``grads`` (frozen layers) are left
    untouched. Returns the learning rate used.
    """
    named = params if isinstance(params, dict) else params.named_arrays()
    lr = lr_schedule(config, epoch, state.step)
    state.step += 1
    t = state.step
    b1 = config.momentum
    c1 = 1.0 - b1**t
    c2 = 1.0 - BETA2**t
    for name, grad in grads.items():
        p = named[name]
        if grad.shape != p.shape:
            raise ShapeError(f"{name}: gradient {grad.shape} vs parameter {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        g = grad + config.weight_decay * p if config.weight_decay else grad
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= BETA2
        v += (1.0 - BETA2) * g * g
        step = lr * (m / c1) / (np.sqrt(v / c2) + EPSILON)
        p -= step.astype(p.dtype, copy=False)
    return lr
