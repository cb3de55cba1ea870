"""Double-supervision mean teacher: two students and an EMA-assembled teacher.

The fully-supervised student is a class-agnostic R-CNN head over ``C_f + 1``
classes (background last).  The weakly-supervised student is a two-stream
MIL head: a classification stream softmaxed over categories and a detection
stream softmaxed over proposals, multiplied and summed per image.  The
teacher has the full student's layout but ``C_w + 1`` classes and is never
trained; :func:`ema_update` moves it toward a source assembled from both
students.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor
from .boxes import decode as decode_boxes, encode as encode_boxes  # noqa: F401
from .sgcn import fuse
from .synthetic import ConfigError

TRUNK_SOURCES = ("mean", "full", "weak")


@dataclass
class Linear:
    W: Tensor
    b: Tensor

    def __call__(self, x) -> Tensor:
        return ad.matmul(x, self.W) + self.b

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.W": self.W, f"{prefix}.b": self.b}


def _linear_normal(rng, fan_in, fan_out, std) -> Linear:
    return Linear(Tensor(rng.normal(0.0, std, size=(fan_in, fan_out)), requires_grad=True),
                  Tensor(np.zeros((1, fan_out)), requires_grad=True))


@dataclass
class Trunk:
    fc1: Linear
    fc2: Linear

    def __call__(self, x) -> Tensor:
        return ad.relu(self.fc2(ad.relu(self.fc1(x))))

    def named(self, prefix: str = "trunk") -> dict[str, Tensor]:
        return {**self.fc1.named(f"{prefix}.fc1"), **self.fc2.named(f"{prefix}.fc2")}


@dataclass
class FullStudent:
    trunk: Trunk
    cls: Linear
    reg: Linear

    def named(self) -> dict[str, Tensor]:
        return {**self.trunk.named(), **self.cls.named("cls"), **self.reg.named("reg")}


@dataclass
class WeakStudent:
    trunk: Trunk
    phi_c: Linear
    phi_d: Linear

    def named(self) -> dict[str, Tensor]:
        return {**self.trunk.named(), **self.phi_c.named("phi_c"), **self.phi_d.named("phi_d")}


@dataclass
class Teacher:
    trunk: Trunk
    cls: Linear
    reg: Linear

    def named(self) -> dict[str, Tensor]:
        return {**self.trunk.named(), **self.cls.named("cls"), **self.reg.named("reg")}


@dataclass(frozen=True)
class OverlapMap:
    """Shared-category correspondence; background is ``c_f`` <-> ``c_w``."""

    pairs: tuple[tuple[int, int], ...]
    c_f: int
    c_w: int

    def __post_init__(self):
        fs = [f for f, _ in self.pairs]
        ws = [w for _, w in self.pairs]
        if len(set(fs)) != len(fs) or len(set(ws)) != len(ws):
            raise ConfigError("overlap map must be injective")
        if any(not 0 <= f < self.c_f for f in fs) or any(not 0 <= w < self.c_w for w in ws):
            raise ConfigError("overlap map index out of range")

    @property
    def full_bg(self) -> int:
        return self.c_f

    @property
    def weak_bg(self) -> int:
        return self.c_w

    def full_indices(self) -> list[int]:
        return [f for f, _ in self.pairs]

    def weak_indices(self) -> list[int]:
        return [w for _, w in self.pairs]

    def weak_to_full(self) -> dict[int, int]:
        return {w: f for f, w in self.pairs}


def _linear_he(rng, fan_in, fan_out) -> Linear:
    return _linear_normal(rng, fan_in, fan_out, np.sqrt(2.0 / fan_in))


def init_trunk(rng, d_in: int, d: int) -> Trunk:
    """He-normal so relu activations keep the scale of the region features."""
    return Trunk(_linear_he(rng, d_in, d), _linear_he(rng, d, d))


def _copy_trunk(t: Trunk) -> Trunk:
    def cp(lin):
        return Linear(Tensor(lin.W.data.copy(), requires_grad=True),
                      Tensor(lin.b.data.copy(), requires_grad=True))
    return Trunk(cp(t.fc1), cp(t.fc2))


def init_branches(rng, d_in: int, d: int, c_f: int, c_w: int):
    """Both students start from the same trunk; heads use R-CNN style inits."""
    trunk = init_trunk(rng, d_in, d)
    full = FullStudent(_copy_trunk(trunk), _linear_normal(rng, d, c_f + 1, 0.01),
                       _linear_normal(rng, d, 4, 0.001))
    weak = WeakStudent(_copy_trunk(trunk), _linear_normal(rng, d, c_w, 0.01),
                       _linear_normal(rng, d, c_w, 0.01))
    teacher = Teacher(_copy_trunk(trunk), _linear_normal(rng, d, c_w + 1, 0.01),
                      _linear_normal(rng, d, 4, 0.001))
    for t in teacher.named().values():
        t.requires_grad = False
        t.grad = None
    return full, weak, teacher


# --------------------------------------------------------------------------
# forward passes
# --------------------------------------------------------------------------


def _check_features(F_p, d_in: int) -> Tensor:
    F_p = ad.as_tensor(F_p)
    if F_p.shape[1] != d_in:
        raise DimensionError(f"region features have {F_p.shape[1]} columns, expected {d_in}")
    return F_p


def _maybe_fuse(F, fusion):
    if fusion is None:
        return F
    H, g = fusion
    return fuse(F, H, g)


def full_student_forward(F_p, student: FullStudent, fusion=None) -> tuple[Tensor, Tensor]:
    """Class logits ``r x (C_f+1)`` and class-agnostic deltas ``r x 4``.

    ``fusion`` is ``(H_f, g)`` or None; it feeds the classifier only.
    """
    F_p = _check_features(F_p, student.trunk.fc1.W.shape[0])
    F = student.trunk(F_p)
    return student.cls(_maybe_fuse(F, fusion)), student.reg(F)


@dataclass
class MilOutput:
    image_scores: Tensor      # batch x C_w
    region_scores: Tensor     # r_total x C_w
    cls_stream: Tensor        # softmax over categories
    det_stream: Tensor        # softmax over the proposals of each image


def weak_student_forward(F_p, student: WeakStudent, offsets: Sequence[int] | None = None,
                         fusion=None) -> MilOutput:
    """Two-stream MIL head over one or more stacked images.

    ``offsets`` delimits images inside ``F_p`` (``[0, r]`` for a single one).
    """
    F_p = _check_features(F_p, student.trunk.fc1.W.shape[0])
    r = F_p.shape[0]
    if r == 0:
        raise DimensionError("weak_student_forward needs at least one proposal")
    offsets = [0, r] if offsets is None else list(offsets)
    if offsets[0] != 0 or offsets[-1] != r:
        raise DimensionError(f"offsets {offsets} do not cover {r} proposals")
    F = _maybe_fuse(student.trunk(F_p), fusion)
    sc = ad.softmax_axis(student.phi_c(F), "cols")
    sd = ad.segment_softmax_rows(student.phi_d(F), offsets)
    region = sc * sd
    return MilOutput(ad.clamp_unit(ad.segment_sum_rows(region, offsets)), region, sc, sd)


def teacher_forward(F_p, teacher: Teacher) -> tuple[np.ndarray, np.ndarray]:
    """Softmax class probabilities ``r x (C_w+1)`` and deltas; no gradients."""
    F_p = _check_features(F_p, teacher.trunk.fc1.W.shape[0])
    X = F_p.data
    t = teacher.trunk
    h = np.maximum(X @ t.fc1.W.data + t.fc1.b.data, 0.0)
    h = np.maximum(h @ t.fc2.W.data + t.fc2.b.data, 0.0)
    logits = h @ teacher.cls.W.data + teacher.cls.b.data
    z = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs = z / z.sum(axis=1, keepdims=True)
    return probs, h @ teacher.reg.W.data + teacher.reg.b.data


# --------------------------------------------------------------------------
# EMA assembly
# --------------------------------------------------------------------------


def assemble_source(teacher: Teacher, full: FullStudent, weak: WeakStudent,
                    overlap: OverlapMap, trunk_source: str = "mean",
                    use_full: bool = True) -> dict[str, np.ndarray]:
    """Student weights each teacher parameter is pulled toward.

    With ``use_full=False`` (plain mean teacher) the trunk and category
    columns come from the weak student alone and the background column and
    regression head have no source, so they keep the teacher's own values.
    """
    if trunk_source not in TRUNK_SOURCES:
        raise ConfigError(f"teacher_trunk_source must be one of {TRUNK_SOURCES}")
    if not use_full:
        trunk_source = "weak"
    tn, fn, wn = teacher.named(), full.named(), weak.named()
    src = {}
    for name in teacher.trunk.named():
        if trunk_source == "mean":
            src[name] = 0.5 * (fn[name].data + wn[name].data)
        elif trunk_source == "full":
            src[name] = fn[name].data.copy()
        else:
            src[name] = wn[name].data.copy()

    w2f = overlap.weak_to_full() if use_full else {}
    c_w = overlap.c_w
    for part, key in (("W", "cls.W"), ("b", "cls.b")):
        cols = np.empty_like(tn[key].data)
        phi = wn[f"phi_c.{part}"].data
        cls_f = fn[f"cls.{part}"].data
        for j in range(c_w):
            if j in w2f:
                cols[:, j] = 0.5 * (phi[:, j] + cls_f[:, w2f[j]])
            else:
                cols[:, j] = phi[:, j]
        cols[:, c_w] = cls_f[:, overlap.full_bg] if use_full else tn[key].data[:, c_w]
        src[key] = cols
    for key in ("reg.W", "reg.b"):
        src[key] = fn[key].data.copy() if use_full else tn[key].data.copy()
    return src


def ema_update(teacher: Teacher, full: FullStudent, weak: WeakStudent, overlap: OverlapMap,
               alpha: float, trunk_source: str = "mean", use_full: bool = True) -> None:
    """theta_t <- alpha * theta_t + (1 - alpha) * source, for every teacher weight."""
    if not 0.0 <= alpha < 1.0:
        raise ConfigError(f"ema alpha must be in [0, 1), got {alpha}")
    src = assemble_source(teacher, full, weak, overlap, trunk_source, use_full)
    for name, t in teacher.named().items():
        t.data = alpha * t.data + (1.0 - alpha) * src[name]
