"""Composite loss, SGD with momentum, and the per-iteration choreography.

One iteration: forward both students (and the SGCN when enabled) on their
own batches, run the teacher on both batches as a constant target, take
one backward pass of ``L_mil + lambda_full L_full + lambda_cons L_cons``,
one SGD step on the trainable parameters, then one EMA step on the teacher.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .boxes import encode
from .config import TrainConfig
from .dsmt import (FullStudent, OverlapMap, Teacher, WeakStudent, assemble_source, ema_update,
                   full_student_forward, init_branches, teacher_forward, weak_student_forward)
from .evaluation import evaluate
from .graph import SemanticGraph, build_graph
from .sgcn import SgcnParams, init_sgcn, normalize_adjacency, sgcn_forward
from .synthetic import ConfigError, DatasetBundle, training_view

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "cattransfer-checkpoint"
CHECKPOINT_VERSION = 1
LOG_COLUMNS = ("step", "l_mil", "l_full", "l_cons_f", "l_cons_w", "loss",
               "map", "corloc", "corloc_train")


class NumericalError(ArithmeticError):
    pass


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------


def loss_mil(y_hat, y) -> Tensor:
    """Image-level binary cross-entropy averaged over categories (and images)."""
    return ad.bce(y_hat, y)


def loss_full(cls_logits, deltas, cls_targets, fg_mask, delta_targets) -> Tensor:
    """R-CNN loss: cross-entropy over all proposals + smooth-l1 on foreground deltas."""
    cls_term = ad.cross_entropy(cls_logits, cls_targets)
    fg = np.flatnonzero(np.asarray(fg_mask, dtype=bool))
    if fg.size == 0:
        return cls_term
    box = ad.smooth_l1(ad.take_rows(deltas, fg), np.asarray(delta_targets).reshape(-1, 4))
    return cls_term + box


def loss_cons_full(student_deltas, student_logits, teacher_deltas, teacher_probs,
                   overlap: OverlapMap) -> Tensor:
    """MSE between box deltas + smooth-l1 between overlapping-category scores.

    Teacher values are constants.
    """
    box = ad.mse(student_deltas, teacher_deltas)
    if not overlap.pairs:
        return box
    probs = ad.softmax_axis(student_logits, "cols")
    s = ad.take_cols(probs, overlap.full_indices())
    t = np.asarray(teacher_probs)[:, overlap.weak_indices()]
    return box + ad.smooth_l1(s, t)


def loss_cons_weak(y_hat, teacher_image_scores) -> Tensor:
    return ad.smooth_l1(y_hat, teacher_image_scores)


def teacher_image_aggregate(probs: np.ndarray, offsets=None, mode: str = "max") -> np.ndarray:
    """Image-level teacher scores from region probabilities (background dropped)."""
    probs = np.asarray(probs)
    offsets = [0, probs.shape[0]] if offsets is None else list(offsets)
    fg = probs[:, :-1]
    if mode == "max":
        return np.maximum.reduceat(fg, offsets[:-1], axis=0)
    if mode == "sum_clamped":
        return np.minimum(np.add.reduceat(fg, offsets[:-1], axis=0), 1.0)
    raise ConfigError(f"unknown teacher_aggregate {mode!r}")


# --------------------------------------------------------------------------
# optimiser
# --------------------------------------------------------------------------


@dataclass
class SGD:
    """SGD with momentum and L2 weight decay (PyTorch update order)."""

    lr: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: dict[str, Tensor], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for name, p in params.items():
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            buf = self.buffers.get(name)
            buf = g.copy() if buf is None else self.momentum * buf + g
            self.buffers[name] = buf
            p.data = p.data - lr * buf

    @staticmethod
    def zero_grad(params: dict[str, Tensor]) -> None:
        for p in params.values():
            p.grad = np.zeros_like(p.data)


# --------------------------------------------------------------------------
# batches
# --------------------------------------------------------------------------


@dataclass
class FullBatch:
    features: np.ndarray
    cls_targets: np.ndarray
    fg_mask: np.ndarray
    delta_targets: np.ndarray


@dataclass
class WeakBatch:
    features: np.ndarray
    offsets: list[int]
    labels: np.ndarray


def _full_targets(img, c_f: int):
    ex = training_view(img)
    fg = ex.assigned_gt >= 0
    cls = np.full(ex.assigned_gt.shape[0], c_f, dtype=np.intp)
    cls[fg] = ex.gt_labels[ex.assigned_gt[fg]]
    deltas = encode(ex.proposals[fg], ex.gt_boxes[ex.assigned_gt[fg]]) if fg.any() \
        else np.zeros((0, 4))
    return ex.features, cls, fg, deltas


def make_full_batch(images, c_f: int) -> FullBatch:
    parts = [_full_targets(img, c_f) for img in images]
    return FullBatch(np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]),
                     np.concatenate([p[2] for p in parts]), np.concatenate([p[3] for p in parts]))


def make_weak_batch(images) -> WeakBatch:
    views = [training_view(img) for img in images]
    offsets = np.cumsum([0] + [v.features.shape[0] for v in views]).tolist()
    return WeakBatch(np.concatenate([v.features for v in views]), offsets,
                     np.stack([v.labels for v in views]))


def batch_indices(n: int, size: int, step: int, seed: int, stream: int) -> list[int]:
    """Indices for ``step``: consecutive slices of per-epoch permutations."""
    out = []
    pos = step * size
    while len(out) < size:
        epoch, offset = divmod(pos, n)
        perm = np.random.default_rng(np.random.SeedSequence([seed, stream, epoch])).permutation(n)
        take = min(size - len(out), n - offset)
        out.extend(int(i) for i in perm[offset:offset + take])
        pos += take
    return out


# --------------------------------------------------------------------------
# trainer
# --------------------------------------------------------------------------


@dataclass
class GraphInputs:
    A_hat_f: Tensor
    A_hat_w: Tensor
    B: Tensor
    H0_f: Tensor
    H0_w: Tensor


@dataclass
class TrainerState:
    config: TrainConfig
    full: FullStudent
    weak: WeakStudent
    teacher: Teacher
    sgcn: SgcnParams
    overlap: OverlapMap
    graph: GraphInputs
    optimizer: SGD
    step: int = 0

    def all_params(self) -> dict[str, Tensor]:
        out = {}
        for prefix, part in (("full", self.full), ("weak", self.weak), ("teacher", self.teacher),
                             ("sgcn", self.sgcn)):
            out.update({f"{prefix}.{k}": v for k, v in part.named().items()})
        return out

    def trainable(self) -> dict[str, Tensor]:
        """Student and SGCN weights that the optimiser updates under the flags."""
        out = {f"weak.{k}": v for k, v in self.weak.named().items()}
        if self.config.enable_dsmt:
            out.update({f"full.{k}": v for k, v in self.full.named().items()})
        if self.config.enable_sgcn:
            out.update({f"sgcn.{k}": v for k, v in self.sgcn.named().items()})
        return out

    def current_lr(self) -> float:
        cfg = self.config
        if cfg.lr_decay_steps:
            return cfg.lr * cfg.lr_decay_gamma ** (self.step // cfg.lr_decay_steps)
        return cfg.lr

    def ema(self) -> None:
        ema_update(self.teacher, self.full, self.weak, self.overlap, self.config.ema_alpha,
                   self.config.teacher_trunk_source, use_full=self.config.enable_dsmt)


def graph_from_bundle(bundle: DatasetBundle, cfg: TrainConfig, relations=None,
                      emb_full=None, emb_weak=None) -> SemanticGraph:
    world = bundle.world
    cs = world.categories
    return build_graph(
        [img.present() for img in bundle.full_train], [img.present() for img in bundle.weak_train],
        cs.full_categories, cs.weak_categories,
        emb_full=world.embed_full if emb_full is None else emb_full,
        emb_weak=world.embed_weak if emb_weak is None else emb_weak,
        relations=cs.relation_list if relations is None else relations,
        tau=cfg.tau, edge_mode=cfg.edge_mode)


def init_state(cfg: TrainConfig, bundle: DatasetBundle, graph: SemanticGraph | None = None,
               emb_full=None, emb_weak=None) -> TrainerState:
    world = bundle.world
    cs = world.categories
    if (cs.c_f, cs.c_w) != (cfg.c_f, cfg.c_w):
        raise ConfigError(f"bundle has {cs.c_f}/{cs.c_w} categories, config says {cfg.c_f}/{cfg.c_w}")
    graph = graph or graph_from_bundle(bundle, cfg, emb_full=emb_full, emb_weak=emb_weak)
    ef = world.embed_full if emb_full is None else np.asarray(emb_full)
    ew = world.embed_weak if emb_weak is None else np.asarray(emb_weak)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1000]))
    full, weak, teacher = init_branches(rng, world.d_in, cfg.d, cs.c_f, cs.c_w)
    sg = init_sgcn(rng, ef.shape[1], cfg.hidden, cfg.d, cs.c_f, cs.c_w)
    overlap = OverlapMap(tuple(tuple(p) for p in cs.overlap_map), cs.c_f, cs.c_w)
    gi = GraphInputs(normalize_adjacency(graph.A_f), normalize_adjacency(graph.A_w),
                     Tensor(graph.B), Tensor(ef), Tensor(ew))
    state = TrainerState(cfg, full, weak, teacher, sg, overlap, gi,
                         SGD(cfg.lr, cfg.momentum, cfg.weight_decay))
    # teacher starts as its assembled source
    src = assemble_source(teacher, full, weak, overlap, cfg.teacher_trunk_source, cfg.enable_dsmt)
    for name, t in teacher.named().items():
        t.data = src[name].copy()
    return state


@dataclass
class LossReport:
    l_mil: float
    l_full: float
    l_cons_f: float
    l_cons_w: float
    loss: float


def compute_loss(state: TrainerState, fb: FullBatch | None, wb: WeakBatch):
    """Total loss tensor and its named terms (as tensors)."""
    cfg = state.config
    sem = None
    if cfg.enable_sgcn:
        g = state.graph
        sem = sgcn_forward(g.A_hat_f, g.A_hat_w, g.B, g.H0_f, g.H0_w, state.sgcn)
    fusion_w = (sem.H_w, state.sgcn.g_w) if sem else None
    mil = weak_student_forward(wb.features, state.weak, wb.offsets, fusion_w)
    terms = {"l_mil": loss_mil(mil.image_scores, wb.labels)}
    t_probs_w, _ = teacher_forward(wb.features, state.teacher)
    t_img = teacher_image_aggregate(t_probs_w, wb.offsets, cfg.teacher_aggregate)
    terms["l_cons_w"] = loss_cons_weak(mil.image_scores, t_img)
    total = terms["l_mil"]
    cons = terms["l_cons_w"]
    if cfg.enable_dsmt:
        fusion_f = (sem.H_f, state.sgcn.g_f) if sem else None
        logits, deltas = full_student_forward(fb.features, state.full, fusion_f)
        terms["l_full"] = loss_full(logits, deltas, fb.cls_targets, fb.fg_mask, fb.delta_targets)
        t_probs_f, t_deltas_f = teacher_forward(fb.features, state.teacher)
        terms["l_cons_f"] = loss_cons_full(deltas, logits, t_deltas_f, t_probs_f, state.overlap)
        total = total + ad.scale(terms["l_full"], cfg.lambda_full)
        cons = terms["l_cons_f"] + cons
    total = total + ad.scale(cons, cfg.lambda_cons)
    terms["loss"] = total
    return total, terms


def _batches(state: TrainerState, bundle: DatasetBundle):
    cfg = state.config
    fi = batch_indices(len(bundle.full_train), cfg.batch_full, state.step, cfg.seed, 1)
    wi = batch_indices(len(bundle.weak_train), cfg.batch_weak, state.step, cfg.seed, 2)
    fb = make_full_batch([bundle.full_train[i] for i in fi], cfg.c_f) if cfg.enable_dsmt else None
    return fb, make_weak_batch([bundle.weak_train[i] for i in wi])


def train_step(state: TrainerState, fb: FullBatch | None, wb: WeakBatch) -> LossReport:
    params = state.trainable()
    SGD.zero_grad(params)
    with Tape() as tape:
        total, terms = compute_loss(state, fb, wb)
        for name in ("l_mil", "l_full", "l_cons_f", "l_cons_w", "loss"):
            if name in terms and not math.isfinite(terms[name].item()):
                raise NumericalError(f"non-finite {name} = {terms[name].item()} "
                                     f"at step {state.step}")
        tape.backward(total)
    state.optimizer.step(params, state.current_lr())
    state.ema()
    state.step += 1
    return LossReport(**{n: terms[n].item() if n in terms else 0.0
                         for n in ("l_mil", "l_full", "l_cons_f", "l_cons_w", "loss")})


def step_on_bundle(state: TrainerState, bundle: DatasetBundle) -> LossReport:
    fb, wb = _batches(state, bundle)
    return train_step(state, fb, wb)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


def save_checkpoint(state: TrainerState, path) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
        "step": state.step,
        "config": state.config.to_text(),
        "params": {k: v.data.tolist() for k, v in state.all_params().items()},
        "momentum": {k: v.tolist() for k, v in sorted(state.optimizer.buffers.items())},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def _read_checkpoint(path) -> dict:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not a checkpoint ({exc.msg})") from None
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT \
            or doc.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint format")
    return doc


def checkpoint_config_text(path) -> str:
    return _read_checkpoint(path)["config"]


def load_checkpoint(state: TrainerState, path) -> TrainerState:
    """Restore parameters, momentum buffers and step counter into ``state``."""
    doc = _read_checkpoint(path)
    params = state.all_params()
    if set(doc["params"]) != set(params):
        raise ConfigError(f"{path}: parameter names do not match this model")
    for k, t in params.items():
        arr = np.array(doc["params"][k], dtype=np.float64).reshape(t.shape)
        t.data = arr
    state.optimizer.buffers = {k: np.array(v, dtype=np.float64).reshape(params[k].shape)
                               for k, v in doc["momentum"].items()}
    state.step = int(doc["step"])
    return state


# --------------------------------------------------------------------------
# full runs
# --------------------------------------------------------------------------


def metrics_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_COLUMNS)
    for r in rows:
        w.writerow([r["step"]] + [repr(float(r[c])) for c in LOG_COLUMNS[1:]])
    return buf.getvalue()


def run_training(cfg: TrainConfig, bundle: DatasetBundle, state: TrainerState | None = None,
                 progress=None) -> tuple[TrainerState, list[dict]]:
    """Train for ``cfg.steps`` steps, evaluating every ``cfg.eval_every``.

    Returns the final state and metric rows (one per evaluation point;
    losses are averaged since the previous point).
    """
    state = state or init_state(cfg, bundle)
    rows: list[dict] = []
    acc = np.zeros(5)
    n_acc = 0
    names = bundle.world.categories.weak_categories
    while state.step < cfg.steps:
        rep = step_on_bundle(state, bundle)
        acc += [rep.l_mil, rep.l_full, rep.l_cons_f, rep.l_cons_w, rep.loss]
        n_acc += 1
        at_eval = cfg.eval_every and state.step % cfg.eval_every == 0
        if at_eval or state.step == cfg.steps:
            test = evaluate(state.teacher, bundle.weak_test, names, cfg.nms_threshold)
            train = evaluate(state.teacher, bundle.weak_train, names, cfg.nms_threshold,
                             with_ap=False)
            mean = acc / n_acc
            row = dict(zip(LOG_COLUMNS[1:6], mean.tolist()), step=state.step, map=test.mAP,
                       corloc=test.mean_corloc, corloc_train=train.mean_corloc)
            rows.append(row)
            acc[:] = 0
            n_acc = 0
            log.info("step %d loss %.4f mAP %.4f CorLoc %.4f", state.step, row["loss"],
                     row["map"], row["corloc"])
            if progress:
                progress(row)
    return state, rows
