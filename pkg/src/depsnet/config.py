"""Run configuration files (TOML, schema version 1) and built-in recipes.

Layout::

    schema_version = 1
    seed = 0
    output_dir = "runs/deps"        # relative paths resolve against the output root
    checkpoint_interval = 0

    [dataset]                       # kind = "synthetic" | "idx"
    kind = "synthetic"
    ...SyntheticDatasetSpec / IdxDatasetSpec fields

    [arch]                          # ArchSpace fields, [[arch.stages]] tables
    [plan]                          # ShrinkingPlan fields
    [lr]                            # kind, eta0, floor_fraction

Optional values (``epsilon_warmup_steps``, ``progressive_phase_lengths``) are
omitted from the file when unset.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Union

import tomli
import tomli_w

from .data import IdxDatasetSpec, SyntheticDatasetSpec
from .errors import ValidationError
from .supernet import ArchSpace, StageSpec
from .training import LrSchedule, ShrinkingPlan

SCHEMA_VERSION = 1
OUTPUT_ENV = "DEPSNET_OUTPUT_DIR"
DEFAULT_OUTPUT_ROOT = "depsnet-out"


def output_root() -> Path:
    """Root directory for CLI outputs: $DEPSNET_OUTPUT_DIR or ./depsnet-out."""
    return Path(os.environ.get(OUTPUT_ENV, DEFAULT_OUTPUT_ROOT))


def desk_space(num_classes=10, resolution=16, in_channels=1) -> ArchSpace:
    """The desk-scale search space: 2 stages, |A| = 5184."""
    return ArchSpace(
        stages=(StageSpec(2, (1, 2), 12, 16, (0.25, 0.5, 1.0), (3, 5), 1),
                StageSpec(2, (1, 2), 16, 24, (0.25, 0.5, 1.0), (3, 5), 2)),
        num_classes=num_classes, in_channels=in_channels, stem_width=8, stem_stride=2,
        resolution_choices=(resolution,))


def small_space(num_classes=4, resolution=8) -> ArchSpace:
    """A tiny space with |A| = 64, small enough to enumerate exhaustively."""
    return ArchSpace(
        stages=(StageSpec(2, (1, 2), 6, 8, (0.5, 1.0), (1, 3), 1),
                StageSpec(1, (1,), 8, 8, (0.5, 1.0), (3,), 2)),
        num_classes=num_classes, in_channels=1, stem_width=4, stem_stride=1,
        resolution_choices=(resolution,))


@dataclass
class RunConfig:
    dataset: Union[SyntheticDatasetSpec, IdxDatasetSpec] = field(default_factory=SyntheticDatasetSpec)
    arch: ArchSpace = field(default_factory=desk_space)
    plan: ShrinkingPlan = field(default_factory=ShrinkingPlan)
    lr: LrSchedule = field(default_factory=LrSchedule)
    seed: int = 0
    output_dir: str = "run"
    checkpoint_interval: int = 0

    def validate(self):
        self.arch.validate()
        self.plan.validate()
        if self.seed < 0:
            raise ValidationError("seed", "must be >= 0")
        if self.checkpoint_interval < 0:
            raise ValidationError("checkpoint_interval", "must be >= 0")
        ds = self.dataset
        if isinstance(ds, SyntheticDatasetSpec):
            if ds.resolution not in self.arch.resolution_choices:
                raise ValidationError("dataset.resolution",
                                      f"{ds.resolution} not in {list(self.arch.resolution_choices)}")
            if ds.channels != self.arch.in_channels:
                raise ValidationError("dataset.channels", "does not match arch.in_channels")
        if ds.num_classes != self.arch.num_classes:
            raise ValidationError("dataset.num_classes", "does not match arch.num_classes")
        return self

    def effective_plan(self) -> ShrinkingPlan:
        return replace(self.plan, checkpoint_interval=self.checkpoint_interval)

    def to_dict(self) -> dict:
        if isinstance(self.dataset, SyntheticDatasetSpec):
            ds = {"kind": "synthetic", **asdict(self.dataset)}
        else:
            ds = {"kind": "idx", **asdict(self.dataset)}
        lr = {"kind": self.lr.kind, "eta0": self.lr.eta0, "floor_fraction": self.lr.floor_fraction}
        plan = {k: v for k, v in self.plan.to_dict().items()
                if v is not None and k != "checkpoint_interval"}
        if "progressive_phase_lengths" in plan:
            plan["progressive_phase_lengths"] = list(plan["progressive_phase_lengths"])
        return {"schema_version": SCHEMA_VERSION, "seed": self.seed, "output_dir": self.output_dir,
                "checkpoint_interval": self.checkpoint_interval, "dataset": ds,
                "arch": self.arch.to_dict(), "plan": plan, "lr": lr}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        version = d.pop("schema_version", None)
        if version != SCHEMA_VERSION:
            raise ValidationError("schema_version", f"expected {SCHEMA_VERSION}, got {version!r}")
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValidationError(sorted(extra)[0], "unknown top-level key")
        kw = {k: v for k, v in d.items() if k in ("seed", "output_dir", "checkpoint_interval")}
        if "dataset" in d:
            kw["dataset"] = _dataset_from_dict(d["dataset"])
        if "arch" in d:
            kw["arch"] = _build("arch", ArchSpace.from_dict, d["arch"])
        if "plan" in d:
            kw["plan"] = _build("plan", lambda p: ShrinkingPlan(**p), d["plan"])
        if "lr" in d:
            kw["lr"] = _build("lr", lambda p: LrSchedule(**p), d["lr"])
        return cls(**kw).validate()

    def dumps(self) -> str:
        return tomli_w.dumps(self.to_dict())

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        try:
            data = tomli.loads(text)
        except tomli.TOMLDecodeError as e:
            raise ValidationError("config", f"TOML syntax error: {e}") from None
        return cls.from_dict(data)

    def save(self, path):
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.loads(Path(path).read_text())


def _build(section, ctor, payload):
    if not isinstance(payload, dict):
        raise ValidationError(section, "must be a table")
    try:
        return ctor(payload)
    except TypeError as e:
        raise ValidationError(section, str(e)) from None


def _dataset_from_dict(d):
    d = dict(d)
    kind = d.pop("kind", "synthetic")
    if kind == "synthetic":
        return _build("dataset", lambda p: SyntheticDatasetSpec(**p), d)
    if kind == "idx":
        return _build("dataset", lambda p: IdxDatasetSpec(**p), d)
    raise ValidationError("dataset.kind", f"unknown dataset kind {kind!r}")


# -- recipes -----------------------------------------------------------------------

# desk-scale defaults: noise 3.0 keeps the full model well short of 100% accuracy
DESK_DATASET = SyntheticDatasetSpec(num_classes=10, resolution=16, train_size=640, test_size=1000,
                                    noise=3.0, seed=0)


def recipe(name: str, seed=0, total_epochs=40, **plan_overrides) -> RunConfig:
    """Built-in recipes: deps, deps_no_eps, early, progressive, no_shrink."""
    name = name.lower()
    lr = LrSchedule("cosine", 0.1, 1)
    if name == "deps":
        plan = ShrinkingPlan("DEPS", total_epochs)
    elif name == "deps_no_eps":
        plan = ShrinkingPlan("DEPS", total_epochs, epsilon0=1.0)
    elif name == "early":
        plan = ShrinkingPlan("EARLY", total_epochs)
        lr = LrSchedule("cosine_constant_ending", 0.1, 1, 0.05)
    elif name == "progressive":
        plan = ShrinkingPlan("PROGRESSIVE", total_epochs, distill="vanilla_kd_frozen_teacher")
    elif name == "no_shrink":
        plan = ShrinkingPlan("NO_SHRINK", total_epochs)
    else:
        raise ValidationError("recipe", f"unknown recipe {name!r}")
    plan = replace(plan, **plan_overrides)
    return RunConfig(DESK_DATASET, desk_space(), plan, lr, seed, f"{name}-s{seed}").validate()
