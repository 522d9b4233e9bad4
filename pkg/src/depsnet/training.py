"""Update rules, schedules and end-to-end training strategies.

Three update rules share one gradient path:

* ``step_no_shrink``   G = grad of the full model's loss
* ``step_shrink``      G = sum of grads over the sampled configs
* ``step_eps_shrink``  G = G_full + eps * (sum of grads over the other sampled configs)

Per-config gradients are computed in isolation and then combined in float64 in
the sampled order (a_full first), which makes the reductions between the rules
bit-exact: eps=1 reproduces ``step_shrink(force_full=True)`` and dropping the
subnet terms reproduces ``step_no_shrink``.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, ValidationError
from .rng import substream
from .supernet import (ArchConfig, ArchSpace, Minibatch, SupernetWeights, forward_subnet,
                       sample_uniform, sandwich_sample, select_subnet)

STRATEGIES = ("DEPS", "EARLY", "PROGRESSIVE", "NO_SHRINK")
DISTILL_MODES = ("inplace_kd", "vanilla_kd_frozen_teacher", "none")


# -- schedules ---------------------------------------------------------------------


@dataclass(frozen=True)
class EpsilonSchedule:
    epsilon0: float = 1e-4
    warmup_steps: int = 1

    def __post_init__(self):
        if not 0.0 < self.epsilon0 <= 1.0:
            raise ValidationError("epsilon0", f"must lie in (0, 1], got {self.epsilon0}")
        if self.warmup_steps < 1:
            raise ValidationError("epsilon_warmup_steps", "must be >= 1")

    def at(self, t: int) -> float:
        return epsilon_at(self, t)


def epsilon_at(schedule: EpsilonSchedule, t: int) -> float:
    """min(1, eps0 + t * (1 - eps0) / warmup_steps), t counted in shrink-phase steps."""
    if t < 0:
        raise ContractError(f"step must be >= 0, got {t}")
    if t >= schedule.warmup_steps:
        return 1.0
    inc = (1.0 - schedule.epsilon0) / schedule.warmup_steps
    return min(1.0, schedule.epsilon0 + t * inc)


@dataclass(frozen=True)
class LrSchedule:
    kind: str = "cosine"
    eta0: float = 0.1
    total_steps: int = 1
    floor_fraction: float = 0.05

    def __post_init__(self):
        if self.kind not in ("cosine", "cosine_constant_ending"):
            raise ValidationError("lr.kind", f"unknown schedule {self.kind!r}")
        if self.total_steps < 1 or self.eta0 < 0:
            raise ValidationError("lr", "total_steps must be >= 1 and eta0 >= 0")

    def at(self, t: int) -> float:
        eta = self.eta0 * (1.0 + math.cos(math.pi * min(t, self.total_steps) / self.total_steps)) / 2.0
        if self.kind == "cosine_constant_ending":
            eta = max(eta, self.floor_fraction * self.eta0)
        return eta


# -- optimizer ---------------------------------------------------------------------


class NesterovSGD:
    """SGD with Nesterov momentum and L2 weight decay added to the gradient.

    ``decay_mask`` (name -> bool array) restricts where decay applies.
    """

    def __init__(self, weights: SupernetWeights, momentum=0.9, weight_decay=3e-5, nesterov=True):
        self.weights = weights
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.nesterov = nesterov
        self.buffers = {n: np.zeros_like(weights[n].data) for n in weights.order}

    def step(self, grads: dict, lr: float, decay_mask=None):
        mu = self.momentum
        for name in self.weights.order:
            p = self.weights[name]
            w = p.data.astype(np.float64)
            d = np.asarray(grads[name], dtype=np.float64)
            if self.weight_decay:
                wd = self.weight_decay * w
                if decay_mask is not None:
                    wd = np.where(decay_mask[name], wd, 0.0)
                d = d + wd
            buf = mu * self.buffers[name].astype(np.float64) + d
            self.buffers[name] = buf.astype(p.dtype)
            upd = d + mu * buf if self.nesterov else buf
            p.data[...] = (w - lr * upd).astype(p.dtype)


# -- plan / records ----------------------------------------------------------------


@dataclass
class ShrinkingPlan:
    strategy: str = "DEPS"
    total_epochs: int = 40
    fm_warmup_fraction: float = 0.5
    k: int = 4
    epsilon0: float = 1e-4
    epsilon_warmup_steps: Optional[int] = None  # None = one epoch of steps
    distill: str = "inplace_kd"
    kd_blend: float = 0.0
    label_smoothing: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 3e-5
    weight_decay_scope: str = "all"  # "all" | "full_view"
    progressive_phase_lengths: Optional[list] = None  # [full, depth, width] epochs
    batch_size: int = 32
    checkpoint_interval: int = 0
    log_every_steps: int = 0

    def validate(self):
        if self.strategy not in STRATEGIES:
            raise ValidationError("plan.strategy", f"unknown strategy {self.strategy!r}")
        if self.distill not in DISTILL_MODES:
            raise ValidationError("plan.distill", f"unknown distillation mode {self.distill!r}")
        if self.total_epochs < 1:
            raise ValidationError("plan.total_epochs", "must be >= 1")
        if self.k < 1:
            raise ValidationError("plan.k", "must be >= 1")
        if not 0.0 <= self.fm_warmup_fraction < 1.0:
            raise ValidationError("plan.fm_warmup_fraction", "must lie in [0, 1)")
        if not 0.0 < self.epsilon0 <= 1.0:
            raise ValidationError("plan.epsilon0", "must lie in (0, 1]")
        if self.epsilon_warmup_steps is not None and self.epsilon_warmup_steps < 1:
            raise ValidationError("plan.epsilon_warmup_steps", "must be >= 1")
        if not 0.0 <= self.kd_blend <= 1.0:
            raise ValidationError("plan.kd_blend", "must lie in [0, 1]")
        if self.weight_decay_scope not in ("all", "full_view"):
            raise ValidationError("plan.weight_decay_scope", "must be 'all' or 'full_view'")
        if self.batch_size < 2:
            raise ValidationError("plan.batch_size", "must be >= 2")
        if self.strategy == "DEPS":
            onset = self.fm_warmup_fraction * self.total_epochs
            if abs(onset - round(onset)) > 1e-9:
                raise ValidationError("plan.fm_warmup_fraction",
                                      f"P^fm * total_epochs = {onset} is not an integer epoch")
            if self.k < 2:
                raise ValidationError("plan.k", "DEPS needs k >= 2")
            if self.distill == "vanilla_kd_frozen_teacher":
                raise ValidationError("plan.distill", "DEPS distills in place from the live full model")
        if self.strategy == "EARLY" and self.distill == "vanilla_kd_frozen_teacher":
            raise ValidationError("plan.distill", "EARLY distills in place")
        if self.strategy == "PROGRESSIVE":
            if self.distill != "vanilla_kd_frozen_teacher":
                raise ValidationError("plan.distill", "PROGRESSIVE uses a frozen teacher")
            lengths = self.phase_lengths()
            if len(lengths) != 3 or min(lengths) < 0 or sum(lengths) != self.total_epochs or lengths[0] < 1:
                raise ValidationError("plan.progressive_phase_lengths",
                                      f"need [full>=1, depth, width] summing to {self.total_epochs}")

    @property
    def onset_epoch(self):
        if self.strategy == "DEPS":
            return int(round(self.fm_warmup_fraction * self.total_epochs))
        if self.strategy == "EARLY":
            return 0
        if self.strategy == "PROGRESSIVE":
            return self.phase_lengths()[0]
        return None

    def phase_lengths(self):
        if self.progressive_phase_lengths is not None:
            return [int(x) for x in self.progressive_phase_lengths]
        # half the budget for the teacher, the rest split 145:145 (25+120 each)
        full = self.total_epochs // 2
        rest = self.total_epochs - full
        depth = rest // 2
        return [full, depth, rest - depth]

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class StepReport:
    step: int
    epoch: int
    epsilon: float
    eta: float
    configs: list
    loss_full: Optional[float]
    loss_subnets: list
    forward_count: int
    norm_no_shrink: float = 0.0
    norm_shrink: float = 0.0
    norm_eps_shrink: float = 0.0
    teacher_logits: Optional[np.ndarray] = field(default=None, repr=False)

    def record(self):
        return {"step": self.step, "epoch": self.epoch, "eta": self.eta, "epsilon": self.epsilon,
                "loss_full": self.loss_full, "loss_subnets": list(self.loss_subnets),
                "forward_count": self.forward_count, "configs": list(self.configs),
                "norm_no_shrink": self.norm_no_shrink, "norm_shrink": self.norm_shrink,
                "norm_eps_shrink": self.norm_eps_shrink}


# -- per-config gradients ----------------------------------------------------------


def ikd_targets(full_logits: Optional[Tensor], full_digest: Optional[str] = None) -> Tensor:
    """Detached copy of the full model's same-step logits (in-place KD teacher)."""
    if full_logits is None:
        raise ContractError("in-place KD targets requested before the full model's forward")
    if full_digest is not None and full_logits.tag != full_digest:
        raise ContractError(f"teacher logits come from config {full_logits.tag}, not the full model")
    return full_logits.detach()


@dataclass
class _Term:
    config: ArchConfig
    grads: dict
    loss: float
    logits: Tensor


def _subnet_loss(logits, labels, teacher, smoothing, kd_blend):
    if teacher is None:
        return ad.loss_ce_smoothed(logits, labels, smoothing)
    kd = ad.loss_kd_soft(logits, teacher)
    if kd_blend == 0.0:
        return kd
    ce = ad.loss_ce_smoothed(logits, labels, smoothing)
    return ad.add(ad.mul(kd, Tensor(np.asarray(1.0 - kd_blend, dtype=kd.dtype))),
                  ad.mul(ce, Tensor(np.asarray(kd_blend, dtype=ce.dtype))))


def config_gradient(weights: SupernetWeights, config: ArchConfig, batch: Minibatch, teacher=None,
                    smoothing=0.1, kd_blend=0.0, update_stats=True, rng=None) -> _Term:
    """Gradient of one config's loss, computed in isolation (weights.grad left clear).

    ``teacher`` selects the loss: None -> smoothed hard-label CE, otherwise soft
    KD against the given detached logits.
    """
    weights.zero_grad()
    view = select_subnet(weights, config)
    with ad.Tape():
        logits = forward_subnet(view, batch, "train", update_stats=update_stats, rng=rng)
        loss = _subnet_loss(logits, batch.labels, teacher, smoothing, kd_blend)
        ad.backward(loss)
    grads = weights.grads()
    weights.zero_grad()
    return _Term(config, grads, loss.item(), logits)


def compute_terms(weights, batch, configs, distill="inplace_kd", smoothing=0.1, kd_blend=0.0,
                  teacher=None, update_stats=True, dropout_rng=None):
    """Per-config gradient terms in sampled order.

    The full model always trains on hard labels.  Other configs use in-place KD
    from the full model's logits of this step, the supplied frozen ``teacher``
    logits, or hard labels, depending on ``distill``.
    """
    full = weights.space.full()
    terms = []
    full_logits = None
    for cfg in configs:
        is_full = cfg == full and full_logits is None
        if is_full:
            t = config_gradient(weights, cfg, batch, None, smoothing, 0.0, update_stats, dropout_rng)
            full_logits = t.logits
        else:
            if distill == "inplace_kd":
                target = ikd_targets(full_logits, full.digest)
            elif distill == "vanilla_kd_frozen_teacher":
                if teacher is None:
                    raise ContractError("vanilla KD needs frozen teacher logits")
                target = teacher
            else:
                target = None
            t = config_gradient(weights, cfg, batch, target, smoothing, kd_blend, update_stats)
        terms.append(t)
    return terms


def combine(terms, scale=1.0, include_subnets=True):
    """G = g_0 + scale * g_1 + scale * g_2 + ... accumulated in float64, in order."""
    total = {n: g.astype(np.float64, copy=True) for n, g in terms[0].grads.items()}
    if include_subnets:
        for t in terms[1:]:
            for n, g in t.grads.items():
                total[n] += scale * g.astype(np.float64)
    return total


def global_norm(grads: dict) -> float:
    return math.sqrt(sum(float(np.dot(g.ravel(), g.ravel())) for g in grads.values()))


def _decay_mask(weights, scope):
    if scope == "all":
        return None
    return select_subnet(weights, weights.space.full()).coverage_mask()


def _report(step, epoch, eps, lr, terms, norms, teacher=None, has_full=True):
    full_loss = terms[0].loss if has_full else None
    subs = [t.loss for t in (terms[1:] if has_full else terms)]
    return StepReport(step, epoch, eps, lr, [t.config.digest for t in terms], full_loss, subs,
                      len(terms), *norms, teacher_logits=teacher)


def _norms(terms, eps):
    g_no = global_norm(terms[0].grads)
    if len(terms) == 1:
        return g_no, g_no, g_no
    return g_no, global_norm(combine(terms, 1.0)), global_norm(combine(terms, eps))


# -- update rules ------------------------------------------------------------------


def step_no_shrink(weights, optimizer, batch, lr, smoothing=0.1, decay_mask=None, dropout_rng=None,
                   step=0, epoch=0) -> StepReport:
    full = weights.space.full()
    terms = compute_terms(weights, batch, [full], smoothing=smoothing, dropout_rng=dropout_rng)
    optimizer.step(combine(terms), lr, decay_mask)
    return _report(step, epoch, 0.0, lr, terms, _norms(terms, 0.0))


def shrink_sample_set(space: ArchSpace, k: int, rng, force_full=True):
    """Configs for one shrinking step.

    k=4 uses sandwich sampling; with ``force_full`` the random members are
    drawn from A minus a_full.  Other k draw uniformly (a_full first when forced).
    """
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    full = space.full()
    if k == 4:
        return sandwich_sample(space, rng, exclude_full_from_random=force_full)
    if force_full:
        if k == 1:
            return [full]
        return [full] + sample_uniform(space, k - 1, rng, exclude=(full.digest,))
    return sample_uniform(space, k, rng)


def step_shrink(weights, optimizer, batch, lr, k, force_full, rng, distill="inplace_kd",
                smoothing=0.1, kd_blend=0.0, teacher=None, decay_mask=None, dropout_rng=None,
                configs=None, step=0, epoch=0) -> StepReport:
    """One update with G = sum of per-config gradients (largest first)."""
    if configs is None:
        configs = shrink_sample_set(weights.space, k, rng, force_full)
    full = weights.space.full()
    order = sorted(range(len(configs)), key=lambda i: configs[i] != full)
    configs = [configs[i] for i in order]
    terms = compute_terms(weights, batch, configs, distill, smoothing, kd_blend, teacher,
                          dropout_rng=dropout_rng)
    optimizer.step(combine(terms, 1.0), lr, decay_mask)
    has_full = configs[0] == full
    norms = _norms(terms, 1.0) if has_full else (0.0, global_norm(combine(terms)), 0.0)
    t_logits = terms[0].logits.data if has_full else teacher.data if teacher is not None else None
    return _report(step, epoch, 1.0, lr, terms, norms, t_logits, has_full)


def step_eps_shrink(weights, optimizer, batch, lr, eps, k, rng, distill="inplace_kd", smoothing=0.1,
                    kd_blend=0.0, decay_mask=None, dropout_rng=None, include_subnets=True,
                    step=0, epoch=0) -> StepReport:
    """One update with G(eps) = G_noShrink + eps * sum over U_{k-1}(A minus a_full)."""
    if not 0.0 < eps <= 1.0:
        raise ContractError(f"epsilon must lie in (0, 1], got {eps}")
    if k < 2:
        raise ContractError("epsilon-shrinking needs k >= 2")
    configs = shrink_sample_set(weights.space, k, rng, force_full=True)
    if not include_subnets:
        configs = configs[:1]
    terms = compute_terms(weights, batch, configs, distill, smoothing, kd_blend,
                          dropout_rng=dropout_rng)
    optimizer.step(combine(terms, eps, include_subnets), lr, decay_mask)
    return _report(step, epoch, eps, lr, terms, _norms(terms, eps), terms[0].logits.data)


# -- metrics log -------------------------------------------------------------------


EPOCH_FIELDS = ("epoch", "step", "eta", "epsilon", "loss_full", "loss_subnets", "forward_count",
                "total_forward_count", "eval_acc_full", "config_digest")


@dataclass
class MetricsLog:
    epochs: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def column(self, name):
        return [r[name] for r in self.epochs]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(EPOCH_FIELDS)
        for r in self.epochs:
            w.writerow([_fmt(r[f]) for f in EPOCH_FIELDS])
        return buf.getvalue()

    def to_jsonl(self) -> str:
        lines = [json.dumps({"kind": "meta", **self.meta}, sort_keys=True)] if self.meta else []
        lines += [json.dumps({"kind": "epoch", **r}, sort_keys=True) for r in self.epochs]
        lines += [json.dumps({"kind": "step", **r}, sort_keys=True) for r in self.steps]
        return "".join(line + "\n" for line in lines)

    def write(self, directory):
        from pathlib import Path
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "metrics.csv").write_text(self.to_csv())
        (d / "metrics.jsonl").write_text(self.to_jsonl())

    @classmethod
    def read_jsonl(cls, path):
        from pathlib import Path
        log = cls()
        for line in Path(path).read_text().splitlines():
            rec = json.loads(line)
            kind = rec.pop("kind")
            if kind == "meta":
                log.meta = rec
            else:
                (log.epochs if kind == "epoch" else log.steps).append(rec)
        return log


def _fmt(v):
    if isinstance(v, list):
        return ";".join(_fmt(x) for x in v)
    if v is None:
        return ""
    return repr(v) if isinstance(v, float) else str(v)


# -- end-to-end --------------------------------------------------------------------


class SubSpace:
    """A space with some dimensions pinned; only used for sampling."""

    def __init__(self, space: ArchSpace, elastic: set):
        self.space = space
        self._dims = [(n, c if any(tag in n for tag in elastic) else c[-1:])
                      for n, c in space.dimensions()]

    def dimensions(self):
        return self._dims

    def cardinality(self):
        return math.prod(len(c) for _, c in self._dims)

    def from_values(self, values):
        return self.space.from_values(values)


def evaluate_full(weights, split, batch_size=250):
    """Top-1 accuracy of a_full in eval mode with its stored BN statistics."""
    view = select_subnet(weights, weights.space.full())
    correct = 0
    for b in split.batches(batch_size):
        with ad.no_grad():
            logits = forward_subnet(view, b, "eval")
        correct += int((np.argmax(logits.data, axis=1) == b.labels).sum())
    return correct / len(split)


def run_training(space: ArchSpace, dataset, plan: ShrinkingPlan, lr_schedule: Optional[LrSchedule],
                 seed: int, checkpoint_dir=None, on_step: Optional[Callable] = None,
                 eval_split=None):
    """Train a supernet with ``plan.strategy``; returns (weights, MetricsLog).

    ``lr_schedule.total_steps`` is overridden by epochs * steps_per_epoch.
    ``on_step(report, weights)`` is called after every optimizer step.
    Full-model eval accuracy is recorded per epoch on ``eval_split`` (default:
    the dataset's test split).
    """
    from .checkpoint import save_supernet

    plan.validate()
    if dataset.resolution not in space.resolution_choices:
        raise ValidationError("dataset.resolution",
                              f"{dataset.resolution} not in {list(space.resolution_choices)}")
    if dataset.channels != space.in_channels or dataset.num_classes != space.num_classes:
        raise ValidationError("dataset", "channels/classes do not match the architecture space")
    steps_per_epoch = dataset.steps_per_epoch(plan.batch_size)
    if steps_per_epoch < 1:
        raise ValidationError("plan.batch_size", "larger than the training split")
    total_steps = plan.total_epochs * steps_per_epoch
    lr_schedule = lr_schedule or LrSchedule("cosine", 0.1, total_steps)
    lr_schedule = LrSchedule(lr_schedule.kind, lr_schedule.eta0, total_steps, lr_schedule.floor_fraction)
    eps_sched = EpsilonSchedule(plan.epsilon0, plan.epsilon_warmup_steps or steps_per_epoch)
    eval_split = dataset.test if eval_split is None else eval_split

    weights = SupernetWeights.init(space, substream(seed, "init"))
    opt = NesterovSGD(weights, plan.momentum, plan.weight_decay)
    sample_rng = substream(seed, "sampling")
    dropout_rng = substream(seed, "dropout")
    decay_mask = _decay_mask(weights, plan.weight_decay_scope)
    onset = plan.onset_epoch
    log = MetricsLog(meta={"seed": seed, "plan": plan.to_dict(), "lr": lr_schedule.__dict__,
                           "steps_per_epoch": steps_per_epoch,
                           "epsilon_warmup_steps": eps_sched.warmup_steps, "onset_epoch": onset})
    common = dict(smoothing=plan.label_smoothing, decay_mask=decay_mask, dropout_rng=dropout_rng)

    teacher_weights = None
    phases = plan.phase_lengths() if plan.strategy == "PROGRESSIVE" else None
    step = 0
    shrink_step = 0
    total_forwards = 0

    def checkpoint(tag):
        if checkpoint_dir is not None:
            from pathlib import Path
            Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
            save_supernet(Path(checkpoint_dir) / f"{tag}.ckpt", weights,
                          meta={"seed": seed, "step": step, "tag": tag})

    for epoch in range(plan.total_epochs):
        if onset is not None and epoch == onset and plan.strategy != "EARLY":
            checkpoint(f"onset_epoch{epoch:04d}")
            if plan.strategy == "PROGRESSIVE":
                teacher_weights = weights.copy()
        sub_space = None
        if plan.strategy == "PROGRESSIVE" and epoch >= phases[0]:
            elastic = {"depth", "kernel"} if epoch < phases[0] + phases[1] else {"depth", "kernel", "width"}
            sub_space = SubSpace(space, elastic)
        losses_full, losses_sub, digests, forwards = [], [], [], 0
        last_eps = 0.0
        for batch in dataset.train_batches(epoch, seed, plan.batch_size):
            lr = lr_schedule.at(step)
            s = plan.strategy
            if s == "NO_SHRINK" or (s in ("DEPS", "PROGRESSIVE") and epoch < onset):
                rep = step_no_shrink(weights, opt, batch, lr, step=step, epoch=epoch, **common)
            elif s == "DEPS":
                eps = eps_sched.at(shrink_step)
                distill = plan.distill
                last_eps = eps
                rep = step_eps_shrink(weights, opt, batch, lr, eps, plan.k, sample_rng, distill,
                                      kd_blend=plan.kd_blend, step=step, epoch=epoch, **common)
                shrink_step += 1
            elif s == "EARLY":
                last_eps = 1.0
                rep = step_shrink(weights, opt, batch, lr, plan.k, False, sample_rng, plan.distill,
                                  kd_blend=plan.kd_blend, step=step, epoch=epoch, **common)
                shrink_step += 1
            else:
                with ad.no_grad():
                    view = select_subnet(teacher_weights, space.full())
                    teacher = Tensor(forward_subnet(view, batch, "eval").data)
                configs = sample_uniform(sub_space, plan.k, sample_rng)
                last_eps = 1.0
                rep = step_shrink(weights, opt, batch, lr, plan.k, False, sample_rng, plan.distill,
                                  kd_blend=plan.kd_blend, teacher=teacher, configs=configs,
                                  step=step, epoch=epoch, **common)
                shrink_step += 1
            forwards += rep.forward_count
            if rep.loss_full is not None:
                losses_full.append(rep.loss_full)
            losses_sub.append(rep.loss_subnets)
            digests.extend(rep.configs)
            if plan.log_every_steps and step % plan.log_every_steps == 0:
                log.steps.append(rep.record())
            if on_step is not None:
                on_step(rep, weights)
            step += 1
        total_forwards += forwards
        width = max((len(x) for x in losses_sub), default=0)
        sub_means = [float(np.mean([x[i] for x in losses_sub if len(x) > i])) for i in range(width)]
        log.epochs.append({
            "epoch": epoch,
            "step": step,
            "eta": lr_schedule.at(step - 1),
            "epsilon": last_eps,
            "loss_full": float(np.mean(losses_full)) if losses_full else None,
            "loss_subnets": sub_means,
            "forward_count": forwards,
            "total_forward_count": total_forwards,
            "eval_acc_full": evaluate_full(weights, eval_split) if len(eval_split) else None,
            "config_digest": hashlib.sha256(",".join(digests).encode()).hexdigest()[:12],
        })
        if plan.checkpoint_interval and (epoch + 1) % plan.checkpoint_interval == 0:
            checkpoint(f"epoch{epoch + 1:04d}")
    return weights, log


def count_forwards(plan: ShrinkingPlan, steps_per_epoch: int) -> int:
    """Training forwards implied by a plan (closed form)."""
    plan.validate()
    e, s, k = plan.total_epochs, steps_per_epoch, plan.k
    if plan.strategy == "NO_SHRINK":
        return e * s
    onset = plan.onset_epoch
    return onset * s + (e - onset) * s * k
