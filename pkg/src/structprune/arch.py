"""Declarative network descriptors and the channel profiles derived from pruning.

A descriptor lists every prunable block as ``(block, n_i, n_o, n_m, stride)``:
``n_i`` input channels, ``n_o`` intermediate slots, ``n_m`` active
intermediate channels. Residual blocks take their output width from
``stage_widths``; dense bottleneck blocks always emit ``growth_rate``
channels that are concatenated onto their input.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from importlib import resources
from typing import Sequence

SCHEMA_VERSION = "structprune.arch/1"
PROFILE_SCHEMA_VERSION = "structprune.profile/1"
FAMILIES = ("wrn", "densenet-bc", "resnet")
RESNET_STAGES = {9: (1, 1, 1, 1), 18: (2, 2, 2, 2), 34: (3, 4, 6, 3)}
BUILTIN_NAMES = ("wrn-40-2", "resnet9", "resnet18", "resnet34", "densenet-bc-100-12")


class ConfigurationError(ValueError):
    pass


class DescriptorFormatError(ConfigurationError):
    """A descriptor or profile file that cannot be parsed."""


def round_half_up(x) -> int:
    return math.floor(Fraction(x) + Fraction(1, 2))


def _frac(x) -> Fraction:
    if isinstance(x, float):
        return Fraction(x).limit_denominator(10**6)
    return Fraction(x)


@dataclass(frozen=True)
class BlockProfile:
    block: int
    n_i: int
    n_o: int
    n_m: int
    stride: int = 1


@dataclass(frozen=True)
class ArchDescriptor:
    family: str
    depth: int
    width: float
    growth_rate: int | None
    transition_rate: float | None
    bottleneck: float
    profile: tuple[BlockProfile, ...]
    stages: tuple[int, ...]
    stage_widths: tuple[int, ...] | None
    resolution: int
    classes: int
    name: str | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigurationError(f"unknown family {self.family!r}")
        if sum(self.stages) != len(self.profile):
            raise ConfigurationError("stage block counts do not add up to the profile length")
        for i, b in enumerate(self.profile):
            if b.block != i:
                raise ConfigurationError(f"profile entry {i} has block id {b.block}")
            if not 1 <= b.n_m <= b.n_o:
                raise ConfigurationError(f"block {i}: need 1 <= n_m <= n_o, got n_m={b.n_m}, n_o={b.n_o}")
            if b.n_i < 1 or b.stride < 1:
                raise ConfigurationError(f"block {i}: invalid n_i or stride")
        if self.family == "densenet-bc":
            if not self.growth_rate:
                raise ConfigurationError("densenet-bc needs a growth rate")
        elif self.stage_widths is None or len(self.stage_widths) != len(self.stages):
            raise ConfigurationError("residual families need one width per stage")
        self._check_chain()

    # -- topology helpers --------------------------------------------------

    def stage_of(self, block: int) -> int:
        acc = 0
        for s, count in enumerate(self.stages):
            acc += count
            if block < acc:
                return s
        raise IndexError(block)

    def is_stage_end(self, block: int) -> bool:
        return block + 1 in set(_cumsum(self.stages))

    def block_out(self, block: int) -> int:
        """Channels leaving block ``block``."""
        b = self.profile[block]
        if self.family == "densenet-bc":
            return b.n_i + self.growth_rate
        return self.stage_widths[self.stage_of(block)]

    def transition_out(self, channels: int) -> int:
        return int(math.floor(channels * self.transition_rate))

    @property
    def stem_channels(self) -> int:
        return self.profile[0].n_i

    @property
    def final_channels(self) -> int:
        return self.block_out(len(self.profile) - 1)

    def _check_chain(self):
        for j in range(len(self.profile) - 1):
            out = self.block_out(j)
            if self.family == "densenet-bc" and self.is_stage_end(j):
                out = self.transition_out(out)
            if self.profile[j + 1].n_i != out:
                raise ConfigurationError(
                    f"block {j + 1} expects {self.profile[j + 1].n_i} input channels but block {j} emits {out}"
                )

    @property
    def n_m(self) -> tuple[int, ...]:
        return tuple(b.n_m for b in self.profile)

    @property
    def n_o(self) -> tuple[int, ...]:
        return tuple(b.n_o for b in self.profile)

    def with_channels(self, n_m: Sequence[int], n_o: Sequence[int] | None = None, name: str | None = None):
        n_o = self.n_o if n_o is None else n_o
        if len(n_m) != len(self.profile) or len(n_o) != len(self.profile):
            raise ConfigurationError("channel list length must match block count")
        prof = tuple(replace(b, n_m=int(m), n_o=int(o)) for b, m, o in zip(self.profile, n_m, n_o))
        return replace(self, profile=prof, name=name if name is not None else self.name)

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        d = asdict(self)
        d["profile"] = [asdict(b) for b in self.profile]
        d["stages"] = list(self.stages)
        d["stage_widths"] = None if self.stage_widths is None else list(self.stage_widths)
        return {"schema": SCHEMA_VERSION, **d}

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), indent=kw.pop("indent", 2), **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchDescriptor":
        d = dict(d)
        schema = d.pop("schema", SCHEMA_VERSION)
        d.pop("cost", None)
        if schema != SCHEMA_VERSION:
            raise DescriptorFormatError(f"unsupported descriptor schema {schema!r}")
        try:
            d["profile"] = tuple(BlockProfile(**b) for b in d["profile"])
            d["stages"] = tuple(d["stages"])
            if d.get("stage_widths") is not None:
                d["stage_widths"] = tuple(d["stage_widths"])
            return cls(**d)
        except (KeyError, TypeError) as exc:
            raise DescriptorFormatError(f"malformed descriptor: {exc}") from exc

    @classmethod
    def from_json(cls, text: str) -> "ArchDescriptor":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise DescriptorFormatError(f"descriptor is not valid JSON: {exc}") from exc


def _cumsum(xs):
    out, acc = [], 0
    for x in xs:
        acc += x
        out.append(acc)
    return out


# -- families ---------------------------------------------------------------


def _residual_profile(stage_blocks, widths, first_in, first_strides, z):
    profile, n_in, j = [], first_in, 0
    for count, width, stride in zip(stage_blocks, widths, first_strides):
        for b in range(count):
            s = stride if b == 0 else 1
            n_m = max(1, round_half_up(_frac(z) * width))
            profile.append(BlockProfile(j, n_in, width, min(n_m, width), s))
            n_in, j = width, j + 1
    return tuple(profile)


def make_wrn(d: int, w=1, z=1, classes: int = 10, resolution: int = 32) -> ArchDescriptor:
    """WRN-d-w with an optional uniform intermediate bottleneck ``z``."""
    if d < 10 or (d - 4) % 6:
        raise ConfigurationError(f"WRN depth must satisfy (d - 4) % 6 == 0, got {d}")
    wf, zf = _frac(w), _frac(z)
    if wf <= 0:
        raise ConfigurationError("width multiplier must be positive")
    if not 0 < zf <= 1:
        raise ConfigurationError("bottleneck multiplier must be in (0, 1]")
    n = (d - 4) // 6
    widths = tuple(math.ceil(base * wf) for base in (16, 32, 64))
    profile = _residual_profile((n, n, n), widths, 16, (1, 2, 2), zf)
    return ArchDescriptor(
        family="wrn", depth=d, width=float(w), growth_rate=None, transition_rate=None,
        bottleneck=float(z), profile=profile, stages=(n, n, n), stage_widths=widths,
        resolution=resolution, classes=classes, name=f"wrn-{d}-{_fmt(w)}" + ("" if zf == 1 else f"-z{_fmt(z)}"),
    )


def make_densenet_bc(depth: int = 100, k: int = 12, transition_rate=0.5, z=1, classes: int = 10,
                     resolution: int = 32) -> ArchDescriptor:
    if depth < 10 or (depth - 4) % 6:
        raise ConfigurationError(f"DenseNet-BC depth must satisfy (depth - 4) % 6 == 0, got {depth}")
    if k < 1 or not 0 < transition_rate <= 1:
        raise ConfigurationError("growth rate must be >= 1 and transition rate in (0, 1]")
    zf = _frac(z)
    if not 0 < zf <= 1:
        raise ConfigurationError("bottleneck multiplier must be in (0, 1]")
    n = (depth - 4) // 6
    slots = 4 * k
    n_m = min(slots, max(1, round_half_up(zf * slots)))
    profile, c, j = [], 2 * k, 0
    for stage in range(3):
        for _ in range(n):
            profile.append(BlockProfile(j, c, slots, n_m, 1))
            c += k
            j += 1
        if stage < 2:
            c = int(math.floor(c * transition_rate))
    return ArchDescriptor(
        family="densenet-bc", depth=depth, width=1.0, growth_rate=k, transition_rate=float(transition_rate),
        bottleneck=float(z), profile=tuple(profile), stages=(n, n, n), stage_widths=None,
        resolution=resolution, classes=classes,
        name=f"densenet-bc-{depth}-{k}" + ("" if zf == 1 else f"-z{_fmt(z)}"),
    )


def make_resnet(variant: int, classes: int = 1000, resolution: int = 224) -> ArchDescriptor:
    """Basic-block ImageNet ResNet (7x7 stem, max-pool, four stages)."""
    if variant not in RESNET_STAGES:
        raise ConfigurationError(f"unsupported ResNet variant {variant}; choose from {sorted(RESNET_STAGES)}")
    stages = RESNET_STAGES[variant]
    widths = (64, 128, 256, 512)
    profile = _residual_profile(stages, widths, 64, (1, 2, 2, 2), 1)
    return ArchDescriptor(
        family="resnet", depth=variant, width=1.0, growth_rate=None, transition_rate=None, bottleneck=1.0,
        profile=profile, stages=stages, stage_widths=widths, resolution=resolution, classes=classes,
        name=f"resnet{variant}",
    )


def _fmt(x) -> str:
    f = float(x)
    return str(int(f)) if f.is_integer() else f"{f:g}"


# -- profiles and copycats ----------------------------------------------------


@dataclass(frozen=True)
class ProfileVector:
    """Per-block (N_m, N_o) snapshot plus the descriptor it was taken from."""

    base: ArchDescriptor
    n_m: tuple[int, ...]
    n_o: tuple[int, ...]
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not (len(self.n_m) == len(self.n_o) == len(self.base.profile)):
            raise ConfigurationError("profile length does not match the descriptor")
        for m, o in zip(self.n_m, self.n_o):
            if not 1 <= m <= o:
                raise ConfigurationError(f"invalid profile entry n_m={m}, n_o={o}")

    @property
    def ratios(self) -> tuple[float, ...]:
        return tuple(m / o for m, o in zip(self.n_m, self.n_o))

    @property
    def channels_removed(self) -> int:
        return sum(o - m for m, o in zip(self.n_m, self.n_o))

    def descriptor(self) -> ArchDescriptor:
        return self.base.with_channels(self.n_m, self.n_o)

    def to_dict(self) -> dict:
        return {
            "schema": PROFILE_SCHEMA_VERSION,
            "blocks": [{"block": j, "n_m": m, "n_o": o} for j, (m, o) in enumerate(zip(self.n_m, self.n_o))],
            "descriptor": self.base.to_dict(),
            "meta": self.meta,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "ProfileVector":
        if d.get("schema") != PROFILE_SCHEMA_VERSION:
            raise DescriptorFormatError(f"unsupported profile schema {d.get('schema')!r}")
        try:
            blocks = sorted(d["blocks"], key=lambda b: b["block"])
            return cls(
                ArchDescriptor.from_dict(d["descriptor"]),
                tuple(int(b["n_m"]) for b in blocks),
                tuple(int(b["n_o"]) for b in blocks),
                dict(d.get("meta", {})),
            )
        except (KeyError, TypeError) as exc:
            raise DescriptorFormatError(f"malformed profile: {exc}") from exc

    @classmethod
    def from_json(cls, text: str) -> "ProfileVector":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise DescriptorFormatError(f"profile is not valid JSON: {exc}") from exc


def extract_profile(network) -> ProfileVector:
    """Snapshot the active intermediate channels of every block in ``network``."""
    return ProfileVector(
        network.arch,
        tuple(b.mask.active for b in network.blocks),
        tuple(b.slots for b in network.blocks),
    )


def make_copycat(profile: ProfileVector, alpha) -> ArchDescriptor:
    """Scale every block's intermediate width to ``alpha * N_m``.

    Widths are rounded half-up and floored at one; the slot count grows
    with them when ``alpha > 1`` would overflow it.
    """
    a = _frac(alpha)
    if a <= 0:
        raise ConfigurationError("alpha must be positive")
    n_m = [max(1, round_half_up(a * m)) for m in profile.n_m]
    n_o = [max(o, m) for o, m in zip(profile.n_o, n_m)]
    base = profile.base.name or profile.base.family
    return profile.base.with_channels(n_m, n_o, name=f"copycat-{base}-a{_fmt(alpha)}")


# -- builtins -------------------------------------------------------------------


def builtin_factories() -> dict:
    return {
        "wrn-40-2": lambda: make_wrn(40, 2),
        "resnet9": lambda: make_resnet(9),
        "resnet18": lambda: make_resnet(18),
        "resnet34": lambda: make_resnet(34),
        "densenet-bc-100-12": lambda: make_densenet_bc(100, 12, 0.5),
    }


def load_builtin(name: str) -> ArchDescriptor:
    """Read a shipped descriptor fixture by name."""
    if name not in BUILTIN_NAMES:
        raise ConfigurationError(f"unknown builtin {name!r}; choose from {', '.join(BUILTIN_NAMES)}")
    text = resources.files("structprune").joinpath(f"builtins/{name}.json").read_text(encoding="utf-8")
    return ArchDescriptor.from_json(text)
