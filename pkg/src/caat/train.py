"""Adversarial training: the full-parameter baseline and criticality-aware tuning."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .attacks import AttackConfig, pgd
from .autodiff import Tape, Tensor
from .data import Dataset
from .errors import ConfigError, ContractError, DimensionError, DivergenceError
from .peft import (AdapterModule, AllocationPlan, LoRAAdapter, init_adapter, init_lora,
                   layer_of, merge_lora)
from .vit import ParameterStore, count_parameters, forward

log = logging.getLogger(__name__)

SCHEDULES = ("cosine", "constant")
OPTIMIZERS = ("adamw", "sgd")
REGEN_MODES = ("per-batch", "static-dataset")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    peft_learning_rate: float | None = None  # caat/mask/lora runs; None reuses learning_rate
    weight_decay: float = 1e-4
    lr_schedule: str = "cosine"
    optimizer: str = "adamw"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    tau: float = 0.05
    rank: int = 16
    sigma_tre_mode: str = "corrected"
    indirect: str = "lora"
    head_trainable: bool = False
    attack: AttackConfig = field(default_factory=lambda: AttackConfig(random_init=True))
    adversarial_regen: str = "per-batch"
    eval_every: int = 1
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.peft_learning_rate is not None and not self.peft_learning_rate > 0:
            raise ConfigError(f"peft_learning_rate must be > 0, got {self.peft_learning_rate}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.lr_schedule not in SCHEDULES:
            raise ConfigError(f"lr_schedule must be one of {SCHEDULES}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}")
        if self.adversarial_regen not in REGEN_MODES:
            raise ConfigError(f"adversarial_regen must be one of {REGEN_MODES}")
        if self.rank < 1:
            raise ConfigError(f"rank must be >= 1, got {self.rank}")


def cosine_lr(step, total_steps, base_lr):
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return base_lr
    return base_lr * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0


def masked_update(theta, grad, mask, lr):
    """Plain masked gradient step ``theta - lr * grad`` on mask entries only."""
    theta = np.asarray(theta, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if theta.shape != grad.shape or theta.shape != mask.shape:
        raise DimensionError(
            f"masked_update: theta {theta.shape}, grad {grad.shape}, mask {mask.shape} differ")
    out = theta.copy()
    idx = np.flatnonzero(mask)
    flat = out.reshape(-1)
    flat[idx] = flat[idx] - lr * grad.reshape(-1)[idx]
    return out


@dataclass
class _Slot:
    array: np.ndarray  # updated in place
    index: np.ndarray | None  # flat positions that train; None means all
    decay: bool


class Optimizer:
    """AdamW-style or SGD updates restricted to each slot's trainable entries.

    Moment buffers are sized to the trainable entries only.
    """

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.moments = {}
        self.t = 0

    def step(self, slots, grads, lr):
        self.t += 1
        cfg = self.cfg
        for key, slot in slots.items():
            flat = slot.array.reshape(-1)
            g = grads[key].reshape(-1)
            if slot.index is not None:
                g = g[slot.index]
                current = flat[slot.index]
            else:
                current = flat
            if cfg.optimizer == "adamw":
                m, v = self.moments.get(key, (np.zeros_like(g), np.zeros_like(g)))
                m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
                v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g
                self.moments[key] = (m, v)
                m_hat = m / (1.0 - cfg.beta1 ** self.t)
                v_hat = v / (1.0 - cfg.beta2 ** self.t)
                update = m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
            else:
                update = g
            if slot.decay and cfg.weight_decay:
                update = update + cfg.weight_decay * current
            new = current - lr * update
            if slot.index is not None:
                flat[slot.index] = new
            else:
                flat[:] = new


class PeftModel:
    """A parameter store plus the LoRA and adapter modules trained alongside it."""

    def __init__(self, store: ParameterStore, loras=None, adapters=None):
        self.store = store
        self.config = store.config
        self.loras = dict(loras or {})
        self.adapters = dict(adapters or {})

    def arrays(self):
        out = dict(self.store.items())
        for layer, lora in self.loras.items():
            out[f"{layer}.lora.down"] = lora.down
            out[f"{layer}.lora.up"] = lora.up
        for layer, module in self.adapters.items():
            out[f"{layer}.adapter.down"] = module.down
            out[f"{layer}.adapter.up"] = module.up
        return out

    def param_map(self, trainable=()):
        return {k: Tensor(v, requires_grad=k in trainable) for k, v in self.arrays().items()}

    def __call__(self, images):
        return forward(self.arrays(), images, self.config)

    def merged(self) -> ParameterStore:
        """Store with LoRA folded into its weights and adapters kept as entries."""
        entries = []
        for path, value in self.store.items():
            layer = layer_of(path) if path.endswith(".weight") else None
            if layer in self.loras:
                value = merge_lora(value, self.loras[layer])
            entries.append((path, value.copy()))
        for layer, module in self.adapters.items():
            entries += [(f"{layer}.adapter.down", module.down.copy()),
                        (f"{layer}.adapter.up", module.up.copy())]
        return ParameterStore(entries, self.config)


@dataclass
class EvalResult:
    clean_acc: float
    robust_acc: dict
    count: int

    def to_dict(self):
        return {"clean_acc": self.clean_acc, "robust_acc": dict(self.robust_acc),
                "count": self.count}


def attack_name(cfg: AttackConfig):
    return f"{'cw' if cfg.loss_kind == 'cw' else 'pgd'}-{cfg.steps}"


def _accuracy(model, x, y):
    return int(np.sum(np.argmax(model(x).data, axis=1) == y))


def evaluate(model, data: Dataset, attacks=(), batch_size=64, seed=0) -> EvalResult:
    """Clean and per-attack robust accuracy in percent, rounded to 2 decimals."""
    if len(data) == 0:
        raise ContractError("evaluate needs a non-empty test set")
    if not isinstance(attacks, dict):
        attacks = {attack_name(a): a for a in attacks}
    correct = 0
    robust = {name: 0 for name in attacks}
    rng = np.random.default_rng(seed)
    for x, y in data.batches(batch_size):
        correct += _accuracy(model, x, y)
        for name, cfg in attacks.items():
            robust[name] += _accuracy(model, pgd(model, x, y, cfg, rng), y)
    n = len(data)
    return EvalResult(round(100.0 * correct / n, 2),
                      {k: round(100.0 * v / n, 2) for k, v in robust.items()}, n)


@dataclass
class TrainResult:
    store: ParameterStore
    log: list
    model: PeftModel
    plan: AllocationPlan | None = None

    @property
    def final(self):
        return self.log[-1] if self.log else None


def write_metrics(path, records):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_metrics(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _gradients(model: PeftModel, x, y, trainable):
    with Tape() as tape:
        params = model.param_map(trainable)
        loss = ad.softmax_cross_entropy(forward(params, x, model.config), y)
        tape.backward(loss)
    return loss.item(), {k: params[k].grad for k in trainable}


def _run(model: PeftModel, slots, train: Dataset, cfg: TrainConfig, test, eval_attacks,
         trainable_params, total_params):
    if len(train) == 0:
        raise ContractError("training set is empty")
    order_rng = np.random.default_rng([cfg.seed, 1])
    attack_rng = np.random.default_rng([cfg.seed, 2])
    opt = Optimizer(cfg)
    n_batches = math.ceil(len(train) / cfg.batch_size)
    total_steps = cfg.epochs * n_batches
    static = None
    if slots and cfg.adversarial_regen == "static-dataset":
        static = np.concatenate([pgd(model, x, y, cfg.attack, attack_rng)
                                 for x, y in train.batches(cfg.batch_size)])
    step = 0
    records = []
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        lr = cfg.learning_rate
        if slots:
            order = order_rng.permutation(len(train))
            for start in range(0, len(order), cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                x, y = train.images[idx], train.labels[idx]
                if static is not None:
                    x_adv = static[idx]
                else:
                    x_adv = pgd(model, x, y, cfg.attack, attack_rng)
                loss, grads = _gradients(model, x_adv, y, set(slots))
                if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                    raise DivergenceError(
                        f"non-finite loss {loss} at epoch {epoch}, step {step} (lr {lr:.3g})")
                if cfg.lr_schedule == "cosine":
                    lr = cosine_lr(step, total_steps, cfg.learning_rate)
                opt.step(slots, grads, lr)
                losses.append(loss)
                step += 1
        record = {
            "epoch": epoch,
            "train_loss": float(np.mean(losses)) if losses else None,
            "lr": lr,
            "trainable_params": int(trainable_params),
            "tuned_fraction": trainable_params / total_params,
            "clean_acc": None,
            "robust_acc": None,
        }
        last = epoch == cfg.epochs
        if test is not None and (last or (cfg.eval_every and epoch % cfg.eval_every == 0)):
            result = evaluate(model, test, eval_attacks, seed=cfg.seed)
            record["clean_acc"] = result.clean_acc
            record["robust_acc"] = result.robust_acc
        log.info("epoch %d loss %s clean %s robust %s", epoch, record["train_loss"],
                 record["clean_acc"], record["robust_acc"])
        records.append(record)
    return records


def full_at_train(store: ParameterStore, train: Dataset, cfg: TrainConfig, test=None,
                  eval_attacks=()) -> TrainResult:
    """Every parameter trainable; inner maximization by ``cfg.attack``.

    With a zero attack budget this is ordinary clean training.
    """
    cfg.validate()
    work = store.copy()
    model = PeftModel(work)
    slots = {p: _Slot(work[p], None, work[p].ndim == 2) for p in work.paths}
    total = work.size
    records = _run(model, slots, train, cfg, test, eval_attacks, total, total)
    return TrainResult(work, records, model)


def caat_train(store: ParameterStore, train: Dataset, plan: AllocationPlan, cfg: TrainConfig,
               test=None, eval_attacks=()) -> TrainResult:
    """Train only what ``plan`` allows; frozen entries are never written.

    Returns the store with LoRA updates merged in (adapter modules are kept as
    extra store entries) alongside the unmerged model used during training.
    """
    cfg.validate()
    plan.check_store(store)
    if cfg.peft_learning_rate is not None:
        cfg = replace(cfg, learning_rate=cfg.peft_learning_rate)
    work = store.copy()
    rng = np.random.default_rng([cfg.seed, 3])
    loras, adapters, slots = {}, {}, {}
    for entry in plan:
        if entry.branch == "mask":
            slots[entry.path] = _Slot(work[entry.path], np.asarray(entry.mask_offsets, np.int64),
                                      len(entry.shape) == 2)
        elif entry.branch == "lora":
            layer = layer_of(entry.path)
            loras[layer] = init_lora(layer, *entry.shape, entry.rank, rng)
        elif entry.branch == "adapter":
            layer = layer_of(entry.path)
            adapters[layer] = init_adapter(layer, entry.shape[1], entry.rank, rng)
    for layer, lora in loras.items():
        slots[f"{layer}.lora.down"] = _Slot(lora.down, None, True)
        slots[f"{layer}.lora.up"] = _Slot(lora.up, None, True)
    for layer, module in adapters.items():
        slots[f"{layer}.adapter.down"] = _Slot(module.down, None, True)
        slots[f"{layer}.adapter.up"] = _Slot(module.up, None, True)
    model = PeftModel(work, loras, adapters)
    total = plan.total_params or count_parameters(store.config)
    records = _run(model, slots, train, cfg, test, eval_attacks, plan.trainable_params, total)
    return TrainResult(model.merged(), records, model, plan)
