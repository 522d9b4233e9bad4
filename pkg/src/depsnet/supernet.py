"""Elastic supernet: architecture space, shared weight store and subnet slicing.

Every block has the same residual shape::

    x -> conv_a (KxK, stride s, in -> mid) -> BN -> hard_swish
      -> conv_b (1x1, mid -> out) -> BN -> (+ x when shapes allow) -> relu

``mid`` is the elastic width (a channel prefix of ``max_mid``), ``K`` the
elastic kernel (a centered window of ``K_max``) and a stage runs its first
``depth`` blocks; skipped blocks are identity.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import CalibrationRequiredError, ContractError, ValidationError


@dataclass(frozen=True)
class StageSpec:
    max_depth: int
    depth_choices: tuple
    width: int
    max_mid: int
    width_fraction_choices: tuple
    kernel_choices: tuple
    stride: int = 1

    def __post_init__(self):
        for name in ("depth_choices", "width_fraction_choices", "kernel_choices"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

    @property
    def max_kernel(self):
        return max(self.kernel_choices)


@dataclass(frozen=True)
class ArchSpace:
    stages: tuple
    num_classes: int
    in_channels: int = 1
    stem_width: int = 8
    stem_kernel: int = 3
    stem_stride: int = 1
    resolution_choices: tuple = (16,)
    head_dropout: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(
            s if isinstance(s, StageSpec) else StageSpec(**s) for s in self.stages))
        object.__setattr__(self, "resolution_choices", tuple(self.resolution_choices))
        self.validate()

    def validate(self):
        if not self.stages:
            raise ValidationError("stages", "at least one stage is required")
        if self.num_classes < 2:
            raise ValidationError("num_classes", "need at least 2 classes")
        if self.stem_kernel % 2 != 1:
            raise ValidationError("stem_kernel", "kernel must be odd")
        if self.stem_stride < 1:
            raise ValidationError("stem_stride", "stride must be positive")
        if not 0.0 <= self.head_dropout < 1.0:
            raise ValidationError("head_dropout", "must lie in [0, 1)")
        _check_choices("resolution_choices", self.resolution_choices, lambda r: r >= 1)
        for i, st in enumerate(self.stages):
            p = f"stages[{i}]"
            if st.max_depth < 1 or st.width < 1 or st.max_mid < 1 or st.stride < 1:
                raise ValidationError(p, "max_depth, width, max_mid and stride must be positive")
            _check_choices(f"{p}.depth_choices", st.depth_choices,
                           lambda d: isinstance(d, int) and 1 <= d <= st.max_depth)
            _check_choices(f"{p}.width_fraction_choices", st.width_fraction_choices,
                           lambda f: 0.0 < f <= 1.0)
            _check_choices(f"{p}.kernel_choices", st.kernel_choices, lambda k: k in (1, 3, 5))
        if self.cardinality() < 2:
            raise ValidationError("space", "architecture space must contain at least 2 configs")

    def dimensions(self):
        """Ordered (name, choices) list of every elastic dimension."""
        dims = []
        for i, st in enumerate(self.stages):
            dims.append((f"stages[{i}].depth", st.depth_choices))
            for b in range(st.max_depth):
                dims.append((f"stages[{i}].blocks[{b}].width_fraction", st.width_fraction_choices))
                dims.append((f"stages[{i}].blocks[{b}].kernel", st.kernel_choices))
        dims.append(("resolution", self.resolution_choices))
        return dims

    def cardinality(self):
        return math.prod(len(c) for _, c in self.dimensions())

    def _pick(self, which):
        return ArchConfig(
            depths=tuple(which(s.depth_choices) for s in self.stages),
            widths=tuple(tuple(which(s.width_fraction_choices) for _ in range(s.max_depth))
                         for s in self.stages),
            kernels=tuple(tuple(which(s.kernel_choices) for _ in range(s.max_depth))
                          for s in self.stages),
            resolution=which(self.resolution_choices),
        )

    def full(self) -> "ArchConfig":
        return self._pick(lambda c: c[-1])

    def minimal(self) -> "ArchConfig":
        return self._pick(lambda c: c[0])

    def from_values(self, values) -> "ArchConfig":
        """Build a config from one value per entry of :meth:`dimensions`."""
        it = iter(values)
        depths, widths, kernels = [], [], []
        for st in self.stages:
            depths.append(next(it))
            w, k = [], []
            for _ in range(st.max_depth):
                w.append(next(it))
                k.append(next(it))
            widths.append(tuple(w))
            kernels.append(tuple(k))
        return ArchConfig(tuple(depths), tuple(widths), tuple(kernels), next(it))

    def enumerate(self):
        """Every config of the space (only sensible for small spaces)."""
        choices = [c for _, c in self.dimensions()]
        for values in itertools.product(*choices):
            yield self.from_values(values)

    def to_dict(self):
        d = asdict(self)
        d["stages"] = [asdict(s) for s in self.stages]
        return _listify(d)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["stages"] = tuple(StageSpec(**s) for s in d["stages"])
        return cls(**d)


def _check_choices(name, choices, ok):
    if len(choices) == 0:
        raise ValidationError(name, "choice list is empty")
    if list(choices) != sorted(choices) or len(set(choices)) != len(choices):
        raise ValidationError(name, f"choices {list(choices)} must be strictly ascending")
    bad = [c for c in choices if not ok(c)]
    if bad:
        raise ValidationError(name, f"invalid choices {bad}")


def _listify(x):
    if isinstance(x, (list, tuple)):
        return [_listify(v) for v in x]
    if isinstance(x, dict):
        return {k: _listify(v) for k, v in x.items()}
    return x


@dataclass(frozen=True)
class ArchConfig:
    depths: tuple
    widths: tuple
    kernels: tuple
    resolution: int

    def __post_init__(self):
        object.__setattr__(self, "depths", tuple(int(d) for d in self.depths))
        object.__setattr__(self, "widths", tuple(tuple(float(w) for w in ws) for ws in self.widths))
        object.__setattr__(self, "kernels", tuple(tuple(int(k) for k in ks) for ks in self.kernels))
        object.__setattr__(self, "resolution", int(self.resolution))

    def values(self):
        out = []
        for d, ws, ks in zip(self.depths, self.widths, self.kernels):
            out.append(d)
            for w, k in zip(ws, ks):
                out.extend((w, k))
        out.append(self.resolution)
        return out

    def to_dict(self):
        return {"depths": list(self.depths), "widths": [list(w) for w in self.widths],
                "kernels": [list(k) for k in self.kernels], "resolution": self.resolution}

    @classmethod
    def from_dict(cls, d):
        return cls(d["depths"], d["widths"], d["kernels"], d["resolution"])

    @property
    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


def validate_config(space: ArchSpace, config: ArchConfig):
    if len(config.depths) != len(space.stages):
        raise ValidationError("depths", f"expected {len(space.stages)} stages, got {len(config.depths)}")
    for i, st in enumerate(space.stages):
        if len(config.widths[i]) != st.max_depth or len(config.kernels[i]) != st.max_depth:
            raise ValidationError(f"stages[{i}]", f"expected {st.max_depth} per-block entries")
    for (name, choices), value in zip(space.dimensions(), config.values()):
        if value not in choices:
            raise ValidationError(name, f"value {value} not in choices {list(choices)}")


def mid_channels(max_mid, fraction):
    return max(1, math.ceil(fraction * max_mid - 1e-9))


def kernel_window(k_max, k):
    lo = (k_max - k) // 2
    return slice(lo, lo + k)


# -- weight store ---------------------------------------------------------------


def _layer_plan(space: ArchSpace):
    """Static description of every parameter tensor at maximal shape."""
    plan = [("stem.conv", (space.stem_width, space.in_channels, space.stem_kernel, space.stem_kernel)),
            ("stem.bn.gamma", (space.stem_width,)), ("stem.bn.beta", (space.stem_width,))]
    cin = space.stem_width
    for i, st in enumerate(space.stages):
        for b in range(st.max_depth):
            p = f"stages.{i}.blocks.{b}"
            plan += [(f"{p}.conv_a", (st.max_mid, cin, st.max_kernel, st.max_kernel)),
                     (f"{p}.bn_a.gamma", (st.max_mid,)), (f"{p}.bn_a.beta", (st.max_mid,)),
                     (f"{p}.conv_b", (st.width, st.max_mid, 1, 1)),
                     (f"{p}.bn_b.gamma", (st.width,)), (f"{p}.bn_b.beta", (st.width,))]
            cin = st.width
    plan += [("head.weight", (cin, space.num_classes)), ("head.bias", (space.num_classes,))]
    return plan


class SupernetWeights:
    """Shared parameter store W_o plus per-config BatchNorm running statistics.

    ``bn_stats`` maps a config digest to ``{bn_layer: (mean, var)}`` at that
    config's sliced width.  Training-mode forwards update only the buckets
    already present (a_full and a_min at creation); every other config needs
    calibration before eval-mode use.
    """

    def __init__(self, space: ArchSpace, params: dict, bn_stats: Optional[dict] = None):
        self.space = space
        self.order = [name for name, _ in _layer_plan(space)]
        for name, shape in _layer_plan(space):
            if name not in params or tuple(params[name].shape) != shape:
                got = None if name not in params else tuple(params[name].shape)
                raise ContractError(f"parameter {name}: expected shape {shape}, got {got}")
        self.params = {n: params[n] for n in self.order}
        if bn_stats is None:
            bn_stats = {}
            for cfg in (space.full(), space.minimal()):
                bn_stats[cfg.digest] = fresh_bn_stats(space, cfg, self.dtype)
        self.bn_stats = bn_stats
        self.calibrated = set()

    @classmethod
    def init(cls, space: ArchSpace, rng: np.random.Generator, dtype=np.float32):
        params = {}
        for name, shape in _layer_plan(space):
            if name.endswith(("conv", "conv_a", "conv_b")):
                fan_in = shape[1] * shape[2] * shape[3]
                arr = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
            elif name == "head.weight":
                bound = 1.0 / math.sqrt(shape[0])
                arr = rng.uniform(-bound, bound, size=shape)
            elif name.endswith("gamma"):
                arr = np.ones(shape)
            else:
                arr = np.zeros(shape)
            params[name] = Tensor(arr.astype(dtype), requires_grad=True)
        return cls(space, params)

    @property
    def dtype(self):
        return self.params["stem.conv"].dtype

    def __getitem__(self, name) -> Tensor:
        return self.params[name]

    def arrays(self):
        return {n: self.params[n].data for n in self.order}

    def num_parameters(self):
        return sum(self.params[n].size for n in self.order)

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def grads(self):
        """Gradient arrays (zeros where no gradient reached)."""
        return {n: (t.grad if t.grad is not None else np.zeros_like(t.data))
                for n, t in self.params.items()}

    def copy(self):
        params = {n: Tensor(t.data.copy(), requires_grad=True) for n, t in self.params.items()}
        stats = {d: {l: (m.copy(), v.copy()) for l, (m, v) in s.items()}
                 for d, s in self.bn_stats.items()}
        return SupernetWeights(self.space, params, stats)

    def astype(self, dtype):
        params = {n: Tensor(t.data.astype(dtype), requires_grad=True) for n, t in self.params.items()}
        stats = {d: {l: (m.astype(dtype), v.astype(dtype)) for l, (m, v) in s.items()}
                 for d, s in self.bn_stats.items()}
        return SupernetWeights(self.space, params, stats)


def bn_layers(space: ArchSpace, config: ArchConfig):
    """(bn layer name, active width) for every BN layer the config uses."""
    out = [("stem.bn", space.stem_width)]
    for i, st in enumerate(space.stages):
        for b in range(config.depths[i]):
            p = f"stages.{i}.blocks.{b}"
            out.append((f"{p}.bn_a", mid_channels(st.max_mid, config.widths[i][b])))
            out.append((f"{p}.bn_b", st.width))
    return out


def fresh_bn_stats(space, config, dtype=np.float32):
    return {name: (np.zeros(w, dtype=dtype), np.ones(w, dtype=dtype))
            for name, w in bn_layers(space, config)}


# -- views ----------------------------------------------------------------------


@dataclass
class SubnetView:
    """S(W_o, a): index ranges into the shared store, never copies."""

    weights: SupernetWeights
    config: ArchConfig
    slices: dict = field(default_factory=dict)

    def param(self, name) -> np.ndarray:
        """Numpy view of the active slice of ``name``; writes mutate W_o."""
        return self.weights[name].data[self.slices[name]]

    def params(self):
        return {n: self.param(n) for n in self.slices}

    def coverage_mask(self):
        masks = {}
        for n in self.weights.order:
            m = np.zeros(self.weights[n].shape, dtype=bool)
            if n in self.slices:
                m[self.slices[n]] = True
            masks[n] = m
        return masks


def _resolve_slices(space: ArchSpace, config: ArchConfig):
    sl = {"stem.conv": (slice(None),) * 4, "stem.bn.gamma": (slice(None),),
          "stem.bn.beta": (slice(None),)}
    for i, st in enumerate(space.stages):
        for b in range(config.depths[i]):
            p = f"stages.{i}.blocks.{b}"
            mid = mid_channels(st.max_mid, config.widths[i][b])
            win = kernel_window(st.max_kernel, config.kernels[i][b])
            sl[f"{p}.conv_a"] = (slice(0, mid), slice(None), win, win)
            sl[f"{p}.bn_a.gamma"] = (slice(0, mid),)
            sl[f"{p}.bn_a.beta"] = (slice(0, mid),)
            sl[f"{p}.conv_b"] = (slice(None), slice(0, mid), slice(None), slice(None))
            sl[f"{p}.bn_b.gamma"] = (slice(None),)
            sl[f"{p}.bn_b.beta"] = (slice(None),)
    sl["head.weight"] = (slice(None), slice(None))
    sl["head.bias"] = (slice(None),)
    return sl


def select_subnet(weights: SupernetWeights, config: ArchConfig) -> SubnetView:
    validate_config(weights.space, config)
    return SubnetView(weights, config, _resolve_slices(weights.space, config))


# -- forward --------------------------------------------------------------------


@dataclass
class Minibatch:
    inputs: np.ndarray
    labels: np.ndarray

    @property
    def batch_size(self):
        return len(self.labels)


def _run_network(space, config, get_param, bn_running, x, mode, update_stats, capture, rng):
    training = mode == "train"

    def bn(h, name):
        mean, var = bn_running(name)
        cap = None
        if capture is not None:
            cap = capture.setdefault(name, [])
        return ad.batchnorm(h, get_param(f"{name}.gamma"), get_param(f"{name}.beta"),
                            mean, var, training=training, update_stats=update_stats,
                            capture=cap)

    h = ad.conv2d(x, get_param("stem.conv"), stride=space.stem_stride, padding=space.stem_kernel // 2)
    h = ad.hard_swish(bn(h, "stem.bn"))
    cin = space.stem_width
    for i, st in enumerate(space.stages):
        for b in range(config.depths[i]):
            p = f"stages.{i}.blocks.{b}"
            stride = st.stride if b == 0 else 1
            k = config.kernels[i][b]
            out = ad.conv2d(h, get_param(f"{p}.conv_a"), stride=stride, padding=k // 2)
            out = ad.hard_swish(bn(out, f"{p}.bn_a"))
            out = ad.conv2d(out, get_param(f"{p}.conv_b"), stride=1, padding=0)
            out = bn(out, f"{p}.bn_b")
            if stride == 1 and cin == st.width:
                out = ad.add(out, h)
            h = ad.relu(out)
            cin = st.width
    feats = ad.global_avg_pool(h)
    if training and space.head_dropout > 0 and rng is not None:
        keep = (rng.random(feats.shape) >= space.head_dropout) / (1.0 - space.head_dropout)
        feats = ad.mul(feats, Tensor(keep.astype(feats.dtype)))
    logits = ad.add(ad.matmul(feats, get_param("head.weight")), get_param("head.bias"))
    return logits


def _as_input(batch, dtype):
    inputs = batch.inputs if isinstance(batch, Minibatch) else batch
    if isinstance(inputs, Tensor):
        return inputs
    return Tensor(np.asarray(inputs, dtype=dtype))


def forward_subnet(view: SubnetView, batch, mode="train", update_stats=True, capture=None,
                   rng=None, bn_stats=None) -> Tensor:
    """Logits of subnet ``view.config`` on ``batch``.

    mode="train" normalizes with batch statistics and, when ``update_stats``
    is set, folds them into the config's stored BN bucket if one exists.
    mode="eval" uses the stored bucket and raises CalibrationRequiredError if
    there is none.  ``bn_stats`` substitutes a private bucket for the stored
    one.  ``capture`` (a dict) collects per-layer batch statistics.
    """
    if mode not in ("train", "eval"):
        raise ContractError(f"mode must be 'train' or 'eval', got {mode!r}")
    weights, config = view.weights, view.config
    space = weights.space
    x = _as_input(batch, weights.dtype)
    if x.data.ndim != 4 or x.shape[1] != space.in_channels:
        raise ContractError(f"input shape {x.shape} does not match [B,{space.in_channels},H,W]")
    if x.shape[2] != config.resolution or x.shape[3] != config.resolution:
        raise ContractError(f"batch resolution {x.shape[2:]} != config resolution {config.resolution}")
    stats = weights.bn_stats.get(config.digest) if bn_stats is None else bn_stats
    if mode == "eval" and stats is None:
        raise CalibrationRequiredError(f"no BN statistics for config {config.digest}; run bn_calibrate")

    def get_param(name):
        return ad.slice_(weights[name], view.slices[name])

    def bn_running(name):
        if stats is None or name not in stats:
            if mode == "eval":
                raise CalibrationRequiredError(f"BN layer {name} has no statistics for {config.digest}")
            return None, None
        return stats[name]

    logits = _run_network(space, config, get_param, bn_running, x, mode,
                          update_stats and stats is not None, capture, rng)
    logits.tag = config.digest
    return logits


# -- sampling -------------------------------------------------------------------


def sample_uniform(space: ArchSpace, k: int, rng: np.random.Generator, exclude=()):
    """k configs, each elastic dimension drawn independently and uniformly.

    Configs whose digest is in ``exclude`` are redrawn.
    """
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    exclude = set(exclude)
    if exclude and space.cardinality() <= len(exclude):
        raise ContractError("exclusion leaves nothing to sample")
    dims = [c for _, c in space.dimensions()]
    out = []
    while len(out) < k:
        cfg = space.from_values([c[rng.integers(len(c))] for c in dims])
        if cfg.digest in exclude:
            continue
        out.append(cfg)
    return out


def sandwich_sample(space: ArchSpace, rng: np.random.Generator, exclude_full_from_random=False):
    """[a_full, a_min, r1, r2]."""
    full = space.full()
    exclude = (full.digest,) if exclude_full_from_random else ()
    return [full, space.minimal()] + sample_uniform(space, 2, rng, exclude=exclude)


# -- MACs -----------------------------------------------------------------------


def count_macs(space: ArchSpace, config: ArchConfig) -> int:
    """Multiply-accumulates per sample: conv out_h*out_w*out_c*in_c*K*K plus in*out for the head."""
    validate_config(space, config)
    res = ad.conv_output_extent(config.resolution, space.stem_kernel, space.stem_stride,
                                space.stem_kernel // 2)
    total = res * res * space.stem_width * space.in_channels * space.stem_kernel ** 2
    cin = space.stem_width
    for i, st in enumerate(space.stages):
        for b in range(config.depths[i]):
            stride = st.stride if b == 0 else 1
            k = config.kernels[i][b]
            res = ad.conv_output_extent(res, k, stride, k // 2)
            mid = mid_channels(st.max_mid, config.widths[i][b])
            total += res * res * mid * cin * k * k
            total += res * res * st.width * mid
            cin = st.width
    total += cin * space.num_classes
    return int(total)


# -- standalone extraction ------------------------------------------------------


class StandaloneModel:
    """Dense copy of one subnet's parameters and BN statistics."""

    def __init__(self, space: ArchSpace, config: ArchConfig, params: dict, bn_stats: dict):
        self.space = space
        self.config = config
        self.params = params
        self.bn_stats = bn_stats

    def forward(self, batch) -> Tensor:
        dtype = self.params["stem.conv"].dtype
        x = _as_input(batch, dtype)
        if x.shape[2] != self.config.resolution or x.shape[3] != self.config.resolution:
            raise ContractError(f"batch resolution {x.shape[2:]} != config resolution {self.config.resolution}")
        return _run_network(self.space, self.config, lambda n: Tensor(self.params[n]),
                            lambda n: self.bn_stats[n], x, "eval", False, None, None)

    __call__ = forward

    def num_parameters(self):
        return sum(a.size for a in self.params.values())


def extract_standalone(weights: SupernetWeights, config: ArchConfig) -> StandaloneModel:
    view = select_subnet(weights, config)
    stats = weights.bn_stats.get(config.digest)
    if stats is None:
        raise CalibrationRequiredError(f"no BN statistics for config {config.digest}; run bn_calibrate")
    params = {n: np.ascontiguousarray(view.param(n)).copy() for n in view.slices}
    bn = {n: (m.copy(), v.copy()) for n, (m, v) in stats.items()}
    return StandaloneModel(weights.space, config, params, bn)
