"""L-infinity bounded attacks in raw [0, 1] pixel space."""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import ConfigError, ContractError

LOSS_KINDS = ("ce", "cw")


@dataclass(frozen=True)
class AttackConfig:
    """Perturbation set and optimizer settings for PGD-style attacks.

    ``budget == 0`` is the degenerate attack whose perturbation set is ``{0}``;
    the input is returned unchanged.
    """

    budget: float = 8 / 255
    step_size: float = 1 / 255
    steps: int = 10
    random_init: bool = False
    loss_kind: str = "ce"
    margin_kappa: float = 0.0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not np.isfinite(self.budget) or self.budget < 0:
            raise ConfigError(f"attack budget must be >= 0, got {self.budget}")
        if self.steps < 1:
            raise ConfigError(f"attack steps must be >= 1, got {self.steps}")
        if self.budget > 0 and not 0 < self.step_size <= self.budget:
            raise ConfigError(
                f"attack step_size must lie in (0, budget={self.budget}], got {self.step_size}")
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigError(f"attack loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        if self.margin_kappa < 0:
            raise ConfigError(f"margin_kappa must be >= 0, got {self.margin_kappa}")

    def to_dict(self):
        return asdict(self)


def pgd10(budget=8 / 255, step_size=1 / 255, random_init=False):
    return AttackConfig(budget, step_size, 10, random_init, "ce")


def cw20(budget=8 / 255, step_size=1 / 255, kappa=0.0):
    return AttackConfig(budget, step_size, 20, False, "cw", kappa)


def cw_margin_loss(logits, labels, kappa=0.0):
    """Negated batch-mean margin ``max(z_y - max_{i != y} z_i, -kappa)``.

    Larger values mean the true class is closer to being overtaken, so
    attacks ascend this loss.  Among tied runner-up classes the lowest index
    wins and receives the subgradient.
    """
    logits = ad.as_tensor(logits)
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise ContractError(f"cw_margin_loss needs [b, k>=2] logits, got {logits.shape}")
    if kappa < 0:
        raise ConfigError(f"kappa must be >= 0, got {kappa}")
    b, k = logits.shape
    labels = ad._check_labels(labels, k, b)
    others = logits.data.copy()
    others[np.arange(b), labels] = -np.inf
    runner_up = np.argmax(others, axis=1)
    margin = ad.pick(logits, labels) - ad.pick(logits, runner_up)
    return -ad.tensor_mean(ad.maximum(margin, -kappa))


def attack_loss(logits, labels, cfg: AttackConfig):
    if cfg.loss_kind == "cw":
        return cw_margin_loss(logits, labels, cfg.margin_kappa)
    return ad.softmax_cross_entropy(logits, labels)


def input_gradient(model, x, y, cfg: AttackConfig):
    """Gradient of the attack loss w.r.t. the input pixels, plus the loss value."""
    with Tape() as tape:
        xt = Tensor(x, requires_grad=True)
        loss = attack_loss(model(xt), y, cfg)
        tape.backward(loss)
    return xt.grad, loss.item()


def project(x_adv, x, budget):
    """Clip into the budget ball around ``x`` and into [0, 1].

    Afterwards ``abs(x_adv - x) <= budget`` holds in floating point, not only
    in exact arithmetic.
    """
    out = np.clip(x_adv, x - budget, x + budget)
    over = np.abs(out - x) > budget
    while over.any():
        out[over] = np.nextafter(out[over], x[over])
        over = np.abs(out - x) > budget
    return np.clip(out, 0.0, 1.0)


def pgd(model, x, y, cfg: AttackConfig, rng=None):
    """Projected sign-gradient ascent on the attack loss.

    ``model`` is any callable mapping an image tensor to logits (a
    :class:`~caat.vit.ParameterStore` works).  Neither ``x`` nor the model
    parameters are modified.
    """
    cfg.validate()
    x = np.asarray(x, dtype=np.float64)
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise ContractError("pgd inputs must lie in [0, 1]")
    if cfg.budget == 0:
        return x.copy()
    if cfg.random_init:
        rng = rng if rng is not None else np.random.default_rng(0)
        x_adv = project(x + rng.uniform(-cfg.budget, cfg.budget, size=x.shape), x, cfg.budget)
    else:
        x_adv = x.copy()
    for _ in range(cfg.steps):
        grad, _ = input_gradient(model, x_adv, y, cfg)
        x_adv = project(x_adv + cfg.step_size * np.sign(grad), x, cfg.budget)
    return x_adv


def fgsm(model, x, y, cfg: AttackConfig, rng=None):
    """Single full-budget signed step; identical to PGD-1 without random start."""
    single = replace(cfg, steps=1, step_size=cfg.budget if cfg.budget > 0 else cfg.step_size,
                     random_init=False)
    return pgd(model, x, y, single, rng)


def mean_loss(model, x, y, cfg: AttackConfig):
    return attack_loss(model(Tensor(x)), y, cfg).item()
