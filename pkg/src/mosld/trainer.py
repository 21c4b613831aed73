"""Training loops and the single-vs-mixture comparison grid.

pretrain_base gives the backbone weak general competence on a small
slice of every in-domain task, then the base is frozen and each method
arm fine-tunes its own trainable set on either one task ("single") or
the concatenation of all in-domain tasks ("mixture"). run_grid sweeps
arms x settings x seeds and reports the mixture-minus-single accuracy
delta per arm, the quantity that separates a lone adapter pair from a
routed mixture of experts.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .accounting import METHODS, SITE_KIND_FOR
from .adapters import AdapterHyper, Mode
from .backbone import AdaptedModel, Backbone, BackboneConfig, \
    attach_adapters, build_backbone
from .errors import ConfigError, NumericsError, require
from .rng import Rng
from .routing import resolve_allocation
from .tape import Tape, Tensor
from .tasks import (IN_DOMAIN_TASKS, OOD_TASK, DatasetSplit, accuracy,
                    default_specs, encode_batch, gen_task, make_mixture)

OPTIMIZERS = ("adam", "sgd")
MIXTURE_SETTING = "mixture"


@dataclass(frozen=True)
class TrainConfig:
    """Optimization and adapter hyperparameters for one run."""

    lr: float = 3e-4
    epochs: int = 10
    batch_size: int = 32
    balance_weight: float = 0.01
    optimizer: str = "adam"
    seed: int = 0
    rank: int = 8
    alpha: float = 16.0
    drop_p: float = 0.1
    allocation: str = "ascending"
    top_k: int = 2
    n_train: int = 1000
    n_test: int = 500
    pretrain_slice: int = 200
    backbone: BackboneConfig = field(default_factory=BackboneConfig)

    def __post_init__(self):
        require(self.lr > 0, ConfigError, "lr must be > 0")
        require(self.epochs >= 1, ConfigError, "epochs must be >= 1")
        require(self.batch_size >= 1, ConfigError,
                "batch_size must be >= 1")
        require(self.balance_weight >= 0, ConfigError,
                "balance_weight must be >= 0")
        require(self.optimizer in OPTIMIZERS, ConfigError,
                f"optimizer must be one of {OPTIMIZERS}, "
                f"got {self.optimizer!r}")
        require(0.0 <= self.drop_p < 1.0, ConfigError,
                "drop_p must lie in [0, 1)")
        require(self.rank >= 1, ConfigError, "rank must be >= 1")
        require(self.n_train >= 1 and self.n_test >= 1, ConfigError,
                "dataset sizes must be >= 1")
        require(self.pretrain_slice >= 1, ConfigError,
                "pretrain_slice must be >= 1")


@dataclass(frozen=True)
class MethodArm:
    """A method under comparison: site kind plus its dropout setting.

    Only the shared-A arm with dropout carries p > 0; the ablation arm
    (shared A, p = 0) and every other method run mask-free, which is
    what makes the two shared arms bit-identical at p = 0.
    """

    name: str
    drop_p: float = 0.0

    def __post_init__(self):
        require(self.name in METHODS, ConfigError,
                f"unknown arm {self.name!r}; expected one of {METHODS}")
        require(0.0 <= self.drop_p < 1.0, ConfigError,
                "drop_p must lie in [0, 1)")
        require(self.drop_p == 0.0 or self.name == "mosld", ConfigError,
                f"arm {self.name!r} must run with drop_p = 0")

    @property
    def site_kind(self) -> str:
        return SITE_KIND_FOR[self.name]


def as_arm(arm, cfg: TrainConfig) -> MethodArm:
    """Accept an arm name or a MethodArm; names get cfg's dropout."""
    if isinstance(arm, MethodArm):
        return arm
    return MethodArm(arm, cfg.drop_p if arm == "mosld" else 0.0)


@dataclass(frozen=True)
class TaskData:
    """All train/test splits, one pair per task."""

    train: dict[str, DatasetSplit]
    test: dict[str, DatasetSplit]


def build_task_data(cfg: TrainConfig, rng: Rng) -> TaskData:
    specs = default_specs(cfg.n_train, cfg.n_test)
    train, test = {}, {}
    for i, (name, spec) in enumerate(sorted(specs.items())):
        train[name], test[name] = gen_task(spec, rng.split(i))
    return TaskData(train, test)


def training_split(data: TaskData, setting: str, rng: Rng) -> DatasetSplit:
    if setting == MIXTURE_SETTING:
        return make_mixture([data.train[t] for t in IN_DOMAIN_TASKS], rng)
    require(setting in data.train, ConfigError,
            f"unknown setting {setting!r}; expected a task name "
            f"or {MIXTURE_SETTING!r}")
    return data.train[setting]


def state_hash(state: dict[str, np.ndarray]) -> str:
    """Content hash of a named-tensor state, order-independent."""
    h = hashlib.sha256()
    for name in sorted(state):
        h.update(name.encode("utf-8"))
        h.update(np.asarray(state[name], np.float64).tobytes())
    return h.hexdigest()


def clone_backbone(base: Backbone) -> Backbone:
    """Fresh tensors with copied values, so runs never share storage."""
    params = {name: Tensor(t.value.copy(), t.requires_grad, name)
              for name, t in base.params.items()}
    return Backbone(base.cfg, params)


# ------------------------------------------------------------- optimizers

class _Sgd:
    def __init__(self, params: list[Tensor], lr: float):
        self.params = params
        self.lr = lr

    def step(self, grads) -> None:
        for p in self.params:
            g = grads.get(p)
            if g is not None:
                p.value = p.value - self.lr * g


class _Adam:
    def __init__(self, params: list[Tensor], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.value) for p in params]
        self.v = [np.zeros_like(p.value) for p in params]
        self.t = 0

    def step(self, grads) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = grads.get(p)
            if g is None:
                continue  # expert not routed to in this batch
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.value = p.value - self.lr * (m / bc1) / (np.sqrt(v / bc2)
                                                       + self.eps)


def _make_optimizer(cfg: TrainConfig, params: list[Tensor]):
    if cfg.optimizer == "adam":
        return _Adam(params, cfg.lr)
    return _Sgd(params, cfg.lr)


# ------------------------------------------------------------ inner loops

def _batch_loss(model: AdaptedModel, batch, balance_weight: float,
                mode: Mode, rng) -> Tensor:
    inputs, targets, mask = encode_batch(batch)
    logits, aux, _ = model.forward(inputs, mode, rng)
    flat = ops.reshape(logits, (-1, logits.shape[-1]))
    ce = ops.cross_entropy(flat, targets, mask)
    return ops.add(ce, ops.scale(aux, balance_weight))


def _fit(model: AdaptedModel, split: DatasetSplit, cfg: TrainConfig,
         shuffle_rng: Rng, drop_rng: Rng) -> tuple[float, ...]:
    """Run the optimization loop; returns the per-step loss history."""
    params = model.trainable()
    require(len(params) > 0, ConfigError, "nothing to train")
    opt = _make_optimizer(cfg, params)
    history: list[float] = []
    step = 0
    examples = split.examples
    for epoch in range(cfg.epochs):
        order = shuffle_rng.split(epoch).permutation(len(examples))
        for start in range(0, len(order), cfg.batch_size):
            batch = [examples[int(i)]
                     for i in order[start:start + cfg.batch_size]]
            with Tape() as tape:
                loss = _batch_loss(model, batch, cfg.balance_weight,
                                   Mode.TRAIN, drop_rng.split(step))
            loss_val = float(loss.value)
            if not np.isfinite(loss_val):
                exc = NumericsError(
                    f"training loss became non-finite at step {step}")
                exc.last_good = {k: t.value.copy() for k, t
                                 in _named_trainable(model).items()}
                raise exc
            opt.step(tape.backward(loss))
            history.append(loss_val)
            step += 1
    return tuple(history)


def dataset_ce(model: AdaptedModel, split: DatasetSplit,
               batch_size: int = 256) -> float:
    """Mean answer-token cross entropy over a split, evaluation mode."""
    total, count = 0.0, 0
    examples = split.examples
    for start in range(0, len(examples), batch_size):
        batch = examples[start:start + batch_size]
        inputs, targets, mask = encode_batch(batch)
        logits, _, _ = model.forward(inputs, Mode.EVAL, None)
        flat = ops.reshape(logits, (-1, logits.shape[-1]))
        ce = ops.cross_entropy(flat, targets, mask)
        n = int(mask.sum())
        total += float(ce.value) * n
        count += n
    return total / count


def _named_trainable(model: AdaptedModel) -> dict[str, Tensor]:
    if model.kind == "fp":
        return dict(model.base.params)
    return model.site_named_tensors()


def routing_report(model: AdaptedModel, split: DatasetSplit,
                   batch_size: int = 256):
    """Expert token fractions per routed site and their mean CV.

    Returns (mean_cv, {site: fractions}); (None, {}) for router-free
    models. CV is the population std of the fractions over their mean,
    so 0 is perfectly balanced and sqrt(N-1) is total collapse.
    """
    if model.kind not in ("shared", "unshared"):
        return None, {}
    counts: dict[str, np.ndarray] = {}
    examples = split.examples
    for start in range(0, len(examples), batch_size):
        batch = examples[start:start + batch_size]
        inputs, _, _ = encode_batch(batch)
        _, _, stats = model.forward(inputs, Mode.EVAL, None)
        for (layer, target), (idx, probs) in stats.items():
            key = f"l{layer}.{target}"
            n_experts = probs.shape[-1]
            got = np.bincount(idx.ravel(), minlength=n_experts)
            if key in counts:
                counts[key] += got
            else:
                counts[key] = got.astype(np.int64)
    fractions, cvs = {}, []
    for key in sorted(counts):
        f = counts[key] / counts[key].sum()
        fractions[key] = tuple(float(x) for x in f)
        if len(f) > 1:
            cvs.append(float(np.std(f) / np.mean(f)))
    mean_cv = float(np.mean(cvs)) if cvs else 0.0
    return mean_cv, fractions


# ----------------------------------------------------------------- runs

@dataclass(frozen=True, eq=False)
class PretrainResult:
    base: Backbone
    ce_initial: float
    ce_final: float
    loss_history: tuple[float, ...]
    base_hash: str


def pretrain_base(cfg: TrainConfig, train_splits: dict[str, DatasetSplit],
                  rng: Rng) -> PretrainResult:
    """Train a fresh backbone on a small slice of each in-domain task.

    The slice keeps the base weakly competent with clear headroom, so
    fine-tuning gains are measurable. The held-out task never appears.
    """
    require(OOD_TASK not in train_splits, ConfigError,
            f"pretraining must not see the held-out task {OOD_TASK!r}")
    require(len(train_splits) >= 2, ConfigError,
            "pretraining expects several tasks")
    slices = []
    for name in sorted(train_splits):
        split = train_splits[name]
        require(split.role == "train", ConfigError,
                "pretraining consumes train splits only")
        slices.append(DatasetSplit(split.examples[:cfg.pretrain_slice],
                                   split.setting, split.role))
    mixture = make_mixture(slices, rng.split(0))
    base = build_backbone(cfg.backbone, rng.split(1))
    model = attach_adapters(base, None, None, None, kind="fp")
    ce_initial = dataset_ce(model, mixture)
    history = _fit(model, mixture, cfg, rng.split(2), rng.split(3))
    ce_final = dataset_ce(model, mixture)
    require(np.isfinite(ce_final), NumericsError,
            "pretraining diverged: non-finite final loss")
    return PretrainResult(base, ce_initial, ce_final, history,
                          state_hash(base.state()))


def build_adapted(arm: MethodArm, cfg: TrainConfig, base: Backbone,
                  rng: Rng) -> AdaptedModel:
    kind = arm.site_kind
    if kind == "fp":
        return attach_adapters(base, None, None, None, kind)
    hyper = AdapterHyper(rank=cfg.rank, alpha=cfg.alpha,
                         drop_p=arm.drop_p)
    if kind == "lora":
        return attach_adapters(base, None, hyper, rng, kind)
    allocation = resolve_allocation(cfg.allocation,
                                    cfg.backbone.n_layers, cfg.top_k)
    return attach_adapters(base, allocation, hyper, rng, kind)


@dataclass(frozen=True, eq=False)
class RunResult:
    """One fine-tuning run. Everything except wall_clock is a pure
    function of (arm, setting, cfg, seed)."""

    arm: str
    setting: str
    seed: int
    per_task: dict[str, float]
    macro: float
    ce_initial: float
    ce_final: float
    routing_cv: float | None
    expert_fractions: dict[str, tuple[float, ...]]
    loss_history: tuple[float, ...]
    base_hash_start: str
    base_hash_end: str
    trainable_state: dict[str, np.ndarray]
    wall_clock: float

    @property
    def own_accuracy(self) -> float:
        """Score on the trained objective: macro for mixtures, the
        task's own accuracy for singles."""
        if self.setting == MIXTURE_SETTING:
            return self.macro
        return self.per_task[self.setting]

    def fingerprint(self) -> str:
        """Content hash of every reproducible field."""
        h = hashlib.sha256()
        h.update(repr((self.arm, self.setting, self.seed)).encode())
        for k in sorted(self.per_task):
            h.update(k.encode())
            h.update(float(self.per_task[k]).hex().encode())
        for x in (self.macro, self.ce_initial, self.ce_final):
            h.update(float(x).hex().encode())
        h.update(b"none" if self.routing_cv is None
                 else float(self.routing_cv).hex().encode())
        for k in sorted(self.expert_fractions):
            h.update(k.encode())
            h.update(np.asarray(self.expert_fractions[k]).tobytes())
        h.update(np.asarray(self.loss_history).tobytes())
        h.update(self.base_hash_start.encode())
        h.update(self.base_hash_end.encode())
        for k in sorted(self.trainable_state):
            h.update(k.encode())
            h.update(self.trainable_state[k].tobytes())
        return h.hexdigest()


def finetune(arm, setting: str, cfg: TrainConfig, base: Backbone,
             rng: Rng) -> RunResult:
    """Fine-tune one arm on one setting and evaluate it per task.

    The base is cloned first, so the caller's backbone is never touched
    (the full-tuning arm trains its own copy). Derived streams: 0 data,
    1 adapter init, 2 shuffling, 3 dropout, 4 mixture order.
    """
    arm = as_arm(arm, cfg)
    t0 = time.perf_counter()
    base_hash_start = state_hash(base.state())
    data = build_task_data(cfg, rng.split(0))
    split = training_split(data, setting, rng.split(4))
    work = clone_backbone(base)
    model = build_adapted(arm, cfg, work, rng.split(1))
    ce_initial = dataset_ce(model, split)
    history = _fit(model, split, cfg, rng.split(2), rng.split(3))
    ce_final = dataset_ce(model, split)
    require(np.isfinite(ce_final), NumericsError,
            "fine-tuning diverged: non-finite final loss")
    tasks_to_eval = list(IN_DOMAIN_TASKS)
    if setting == OOD_TASK:
        tasks_to_eval.append(OOD_TASK)
    per_task = {t: accuracy(model, data.test[t])[t]
                for t in tasks_to_eval}
    macro = float(np.mean([per_task[t] for t in IN_DOMAIN_TASKS]))
    routing_cv, fractions = routing_report(model, split)
    return RunResult(
        arm=arm.name, setting=setting, seed=rng.seed,
        per_task=per_task, macro=macro,
        ce_initial=ce_initial, ce_final=ce_final,
        routing_cv=routing_cv, expert_fractions=fractions,
        loss_history=history,
        base_hash_start=base_hash_start,
        base_hash_end=state_hash(model.base.state()),
        trainable_state={k: t.value.copy() for k, t
                         in _named_trainable(model).items()},
        wall_clock=time.perf_counter() - t0,
    )


@dataclass(frozen=True, eq=False)
class GridResult:
    """Full cross-product of runs plus per-(arm, seed) mixture deltas."""

    rows: tuple[RunResult, ...]
    deltas: dict[tuple[str, int], float]

    def delta_mean(self, arm_name: str) -> float:
        vals = [v for (a, _), v in self.deltas.items() if a == arm_name]
        require(len(vals) > 0, ConfigError,
                f"no deltas recorded for arm {arm_name!r}")
        return float(np.mean(vals))

    def row(self, arm_name: str, setting: str, seed: int) -> RunResult:
        for r in self.rows:
            if (r.arm, r.setting, r.seed) == (arm_name, setting, seed):
                return r
        raise KeyError((arm_name, setting, seed))


def run_grid(arms, settings, seeds, cfg: TrainConfig,
             base: Backbone) -> GridResult:
    """Sweep arms x settings x seeds; deltas need a mixture setting.

    delta(arm, seed) = mixture macro accuracy minus the mean over the
    single settings of each run's own-task accuracy.
    """
    arms = [as_arm(a, cfg) for a in arms]
    require(len(set(a.name for a in arms)) == len(arms), ConfigError,
            "duplicate arms in grid")
    require(len(settings) == len(set(settings)), ConfigError,
            "duplicate settings in grid")
    rows = []
    for arm in arms:
        for setting in settings:
            for seed in seeds:
                rows.append(finetune(arm, setting, cfg, base, Rng(seed)))
    singles = [s for s in settings if s != MIXTURE_SETTING]
    deltas: dict[tuple[str, int], float] = {}
    if MIXTURE_SETTING in settings and singles:
        for arm in arms:
            for seed in seeds:
                mix = next(r for r in rows
                           if (r.arm, r.setting, r.seed)
                           == (arm.name, MIXTURE_SETTING, seed))
                own = [r.own_accuracy for r in rows
                       if r.arm == arm.name and r.seed == seed
                       and r.setting in singles]
                deltas[(arm.name, seed)] = float(mix.macro - np.mean(own))
    return GridResult(tuple(rows), deltas)
