"""Synthetic two-dataset world standing in for images, backbone and RPN.

A :class:`World` holds one unit-norm prototype per category, a background
vector, co-occurrence scene templates for each dataset and a semantic
embedding table.  Images are sampled from it as lists of proposals with
pooled "region features": a foreground proposal carries its object's
prototype plus the box delta to that object, a background proposal carries
the background vector.  Everything is deterministic given a seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .boxes import encode, iou_matrix

BUNDLE_FORMAT = "cattransfer-bundle"
BUNDLE_VERSION = 1
RELATION_KINDS = ("subclass", "includes", "similar")
FG_IOU = 0.5


class ConfigError(ValueError):
    """Invalid or infeasible configuration."""


class BundleFormatError(ValueError):
    def __init__(self, line: int, msg: str):
        super().__init__(f"line {line}: {msg}")
        self.line = line


@dataclass
class WorldConfig:
    c_f: int = 12
    c_w: int = 8
    n_overlap: int = 3
    d_p: int = 32
    k: int = 48
    n_templates_full: int | None = None
    n_templates_weak: int | None = None
    n_relations: int = 3
    sigma_feat: float = 0.1
    embed_noise: float = 0.3
    r_min: int = 8
    r_max: int = 32
    max_objects: int = 4

    def validate(self) -> None:
        if self.c_f < 1 or self.c_w < 1:
            raise ConfigError("c_f and c_w must be positive")
        if not 0 <= self.n_overlap <= min(self.c_f, self.c_w):
            raise ConfigError(
                f"n_overlap={self.n_overlap} infeasible for c_f={self.c_f}, c_w={self.c_w}")
        if self.d_p < 2 or self.k < 2:
            raise ConfigError("d_p and k must be at least 2")
        if self.max_objects < 1:
            raise ConfigError("max_objects must be positive")
        if not self.max_objects <= self.r_min <= self.r_max:
            raise ConfigError("need max_objects <= r_min <= r_max")
        if self.sigma_feat < 0:
            raise ConfigError("sigma_feat must be non-negative")


@dataclass
class CategorySpace:
    full_categories: list[str]
    weak_categories: list[str]
    overlap_map: list[tuple[int, int]]
    relation_list: list[tuple[int, int, str]] = field(default_factory=list)

    def __post_init__(self):
        fs = [f for f, _ in self.overlap_map]
        ws = [w for _, w in self.overlap_map]
        if len(set(fs)) != len(fs) or len(set(ws)) != len(ws):
            raise ConfigError("overlap_map must be injective on both sides")
        if any(not 0 <= f < len(self.full_categories) for f in fs) or \
                any(not 0 <= w < len(self.weak_categories) for w in ws):
            raise ConfigError("overlap_map index out of range")

    @property
    def c_f(self) -> int:
        return len(self.full_categories)

    @property
    def c_w(self) -> int:
        return len(self.weak_categories)

    @property
    def n_overlap(self) -> int:
        return len(self.overlap_map)


@dataclass
class World:
    config: WorldConfig
    categories: CategorySpace
    proto_full: np.ndarray
    proto_weak: np.ndarray
    background: np.ndarray
    templates_full: list[tuple[tuple[int, ...], float]]
    templates_weak: list[tuple[tuple[int, ...], float]]
    embed_full: np.ndarray
    embed_weak: np.ndarray
    seed: int

    @property
    def d_in(self) -> int:
        return self.config.d_p + 4

    def templates(self, mode: str):
        return self.templates_full if mode == "full" else self.templates_weak

    def prototypes(self, mode: str) -> np.ndarray:
        return self.proto_full if mode == "full" else self.proto_weak

    def expected_cooccurrence(self, mode: str) -> np.ndarray:
        """Image-level P_ij implied by the scene templates."""
        c = self.categories.c_f if mode == "full" else self.categories.c_w
        return template_cooccurrence(self.templates(mode), c)

    def to_dict(self) -> dict:
        cs = self.categories
        return {
            "config": vars(self.config).copy(),
            "full_categories": cs.full_categories,
            "weak_categories": cs.weak_categories,
            "overlap_map": [list(p) for p in cs.overlap_map],
            "relation_list": [list(r) for r in cs.relation_list],
            "proto_full": self.proto_full.tolist(),
            "proto_weak": self.proto_weak.tolist(),
            "background": self.background.tolist(),
            "templates_full": [[list(t), w] for t, w in self.templates_full],
            "templates_weak": [[list(t), w] for t, w in self.templates_weak],
            "embed_full": self.embed_full.tolist(),
            "embed_weak": self.embed_weak.tolist(),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "World":
        cs = CategorySpace(
            list(d["full_categories"]), list(d["weak_categories"]),
            [tuple(p) for p in d["overlap_map"]],
            [(int(f), int(w), str(k)) for f, w, k in d["relation_list"]])
        return cls(
            config=WorldConfig(**d["config"]),
            categories=cs,
            proto_full=np.array(d["proto_full"], dtype=np.float64),
            proto_weak=np.array(d["proto_weak"], dtype=np.float64),
            background=np.array(d["background"], dtype=np.float64),
            templates_full=[(tuple(t), float(w)) for t, w in d["templates_full"]],
            templates_weak=[(tuple(t), float(w)) for t, w in d["templates_weak"]],
            embed_full=np.array(d["embed_full"], dtype=np.float64).reshape(cs.c_f, -1),
            embed_weak=np.array(d["embed_weak"], dtype=np.float64).reshape(cs.c_w, -1),
            seed=int(d["seed"]),
        )


def template_cooccurrence(templates, c: int) -> np.ndarray:
    mi = np.zeros(c)
    mij = np.zeros((c, c))
    for cats, w in templates:
        idx = np.array(sorted(set(cats)), dtype=np.intp)
        mi[idx] += w
        mij[np.ix_(idx, idx)] += w
    with np.errstate(invalid="ignore", divide="ignore"):
        p = np.where(mi[:, None] > 0, mij / mi[:, None], 0.0)
    return p


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _templates(rng, c: int, count: int | None, max_size: int):
    """Scene templates covering every category with non-trivial co-occurrence."""
    count = c if count is None else count
    if count < 1:
        raise ConfigError("template count must be positive")
    biggest = min(3, max_size)
    for _ in range(200):
        perm = [int(i) for i in rng.permutation(c)]
        groups = []
        while perm:
            size = int(rng.integers(2, biggest + 1)) if biggest >= 2 else 1
            groups.append(tuple(sorted(perm[:size])))
            perm = perm[size:]
        while len(groups) < count:
            size = 1 if rng.random() < 0.6 or c == 1 else 2
            groups.append(tuple(sorted(int(i) for i in rng.choice(c, size, replace=False))))
        templates = [(g, float(rng.uniform(0.5, 1.5))) for g in groups]
        if c < 2:
            return templates
        p = template_cooccurrence(templates, c)
        off = p[~np.eye(c, dtype=bool)]
        if off.max() >= 0.5 and (c < 3 or off.min() <= 0.1):
            return templates
    raise ConfigError(f"could not build non-trivial scene templates for {c} categories")


def gen_world(config: WorldConfig | None = None, seed: int = 0) -> World:
    """Sample a world.

    Independent random streams drive category pairing, prototypes, background,
    embeddings and each dataset's templates.  Shared categories are a prefix
    of a fixed category ordering and related pairs come from its tail, so a
    different ``n_overlap`` with the same seed changes only which categories
    are shared.
    """
    config = config or WorldConfig()
    config.validate()
    r_pair, r_proto, r_bg, r_emb, r_tf, r_tw = (
        np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(6))
    c_f, c_w, n = config.c_f, config.c_w, config.n_overlap

    order_f = [int(i) for i in r_pair.permutation(c_f)]
    order_w = [int(j) for j in r_pair.permutation(c_w)]
    kinds = r_pair.integers(len(RELATION_KINDS), size=min(c_f, c_w))
    overlap = sorted(zip(order_f[:n], order_w[:n]))
    n_rel = min(config.n_relations, c_f - n, c_w - n)
    relations = [(order_f[-1 - t], order_w[-1 - t], RELATION_KINDS[int(kinds[t])])
                 for t in range(n_rel)]

    full_names = [f"full{i:02d}" for i in range(c_f)]
    weak_names = [f"weak{j:02d}" for j in range(c_w)]
    for s, (i, j) in enumerate(overlap):
        full_names[i] = weak_names[j] = f"shared{s:02d}"
    categories = CategorySpace(full_names, weak_names, overlap, relations)
    shared_w = [j for _, j in overlap]

    for _ in range(1000):
        pf = _unit(r_proto.standard_normal((c_f, config.d_p)))
        pw = _unit(r_proto.standard_normal((c_w, config.d_p)))
        for i, j in overlap:
            pw[j] = pf[i]
        # related categories look alike (cos 0.6) but stay separable
        for i, j, _ in relations:
            other = pw[j] - (pw[j] @ pf[i]) * pf[i]
            pw[j] = _unit(0.6 * pf[i] + 0.8 * _unit(other))
        uniq = np.concatenate([pf, np.delete(pw, shared_w, axis=0)])
        cos = uniq @ uniq.T
        np.fill_diagonal(cos, -1.0)
        if cos.max() < 0.8:
            break
    else:
        raise ConfigError("could not place separable prototypes; raise d_p")

    for _ in range(1000):
        background = _unit(r_bg.standard_normal(config.d_p))
        if np.max(uniq @ background) < 0.3:
            break
    else:
        raise ConfigError("could not place a background vector; raise d_p")

    # semantic vectors: a fixed random linear view of the prototypes plus
    # noise, so that semantic similarity tracks visual similarity
    proj = r_emb.standard_normal((config.d_p, config.k)) / np.sqrt(config.k)
    scale = config.embed_noise / np.sqrt(config.k)
    ef = _unit(pf @ proj + scale * r_emb.standard_normal((c_f, config.k)))
    ew = _unit(pw @ proj + scale * r_emb.standard_normal((c_w, config.k)))
    for i, j in overlap:
        ew[j] = ef[i]
    for i, j, _ in relations:
        while ew[j] @ ef[i] < 0.7:
            ew[j] = _unit(ew[j] + ef[i])

    return World(
        config=config,
        categories=categories,
        proto_full=pf,
        proto_weak=pw,
        background=background,
        templates_full=_templates(r_tf, c_f, config.n_templates_full, config.max_objects),
        templates_weak=_templates(r_tw, c_w, config.n_templates_weak, config.max_objects),
        embed_full=ef,
        embed_weak=ew,
        seed=int(seed),
    )


# --------------------------------------------------------------------------
# images
# --------------------------------------------------------------------------


@dataclass
class SyntheticImage:
    image_id: str
    mode: str
    proposals: np.ndarray
    features: np.ndarray
    gt_boxes: np.ndarray
    gt_labels: np.ndarray
    labels: np.ndarray
    assigned_gt: np.ndarray
    assigned_iou: np.ndarray

    @property
    def num_proposals(self) -> int:
        return self.proposals.shape[0]

    def present(self) -> list[int]:
        return [int(c) for c in np.flatnonzero(self.labels)]

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "mode": self.mode,
            "proposals": self.proposals.tolist(),
            "features": self.features.tolist(),
            "gt_boxes": self.gt_boxes.tolist(),
            "gt_labels": self.gt_labels.tolist(),
            "labels": self.labels.tolist(),
            "assigned_gt": self.assigned_gt.tolist(),
            "assigned_iou": self.assigned_iou.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticImage":
        return cls(
            image_id=str(d["image_id"]),
            mode=str(d["mode"]),
            proposals=np.array(d["proposals"], dtype=np.float64).reshape(-1, 4),
            features=np.array(d["features"], dtype=np.float64),
            gt_boxes=np.array(d["gt_boxes"], dtype=np.float64).reshape(-1, 4),
            gt_labels=np.array(d["gt_labels"], dtype=np.intp),
            labels=np.array(d["labels"], dtype=np.float64),
            assigned_gt=np.array(d["assigned_gt"], dtype=np.intp),
            assigned_iou=np.array(d["assigned_iou"], dtype=np.float64),
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, SyntheticImage):
            return NotImplemented
        return (self.image_id == other.image_id and self.mode == other.mode and all(
            np.array_equal(getattr(self, f), getattr(other, f))
            for f in ("proposals", "features", "gt_boxes", "gt_labels", "labels",
                      "assigned_gt", "assigned_iou")))


@dataclass(frozen=True)
class FullExample:
    """What the trainer may see of a fully-annotated image."""

    proposals: np.ndarray
    features: np.ndarray
    gt_boxes: np.ndarray
    gt_labels: np.ndarray
    assigned_gt: np.ndarray


@dataclass(frozen=True)
class WeakExample:
    """What the trainer may see of a weakly-annotated image: no boxes."""

    proposals: np.ndarray
    features: np.ndarray
    labels: np.ndarray


def training_view(img: SyntheticImage) -> FullExample | WeakExample:
    if img.mode == "full":
        return FullExample(img.proposals, img.features, img.gt_boxes, img.gt_labels,
                           img.assigned_gt)
    return WeakExample(img.proposals, img.features, img.labels)


def _clip_box(b: np.ndarray) -> np.ndarray | None:
    b = np.clip(b, 0.0, 1.0)
    if b[2] - b[0] < 0.02 or b[3] - b[1] < 0.02:
        return None
    return b


def _jitter(rng, box: np.ndarray, shift: float, scale: float) -> np.ndarray | None:
    w, h = box[2] - box[0], box[3] - box[1]
    cx = 0.5 * (box[0] + box[2]) + rng.normal(0, shift) * w
    cy = 0.5 * (box[1] + box[3]) + rng.normal(0, shift) * h
    w *= np.exp(rng.normal(0, scale))
    h *= np.exp(rng.normal(0, scale))
    return _clip_box(np.array([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2]))


def _contains(a: np.ndarray, b: np.ndarray) -> bool:
    return a[0] <= b[0] and a[1] <= b[1] and a[2] >= b[2] and a[3] >= b[3]


def _layout(rng, cats: list[int]) -> np.ndarray:
    for _ in range(100):
        boxes = []
        for _c in cats:
            for _try in range(100):
                w, h = rng.uniform(0.15, 0.45, size=2)
                x, y = rng.uniform(0, 1 - w), rng.uniform(0, 1 - h)
                b = np.array([x, y, x + w, y + h])
                if all(iou_matrix(b, o)[0, 0] < 0.3 and not _contains(b, o) and not _contains(o, b)
                       for o in boxes):
                    boxes.append(b)
                    break
            else:
                break
        if len(boxes) == len(cats):
            return np.array(boxes)
    raise RuntimeError("failed to lay out objects")  # unreachable for <= 4 objects


def gen_image(world: World, mode: str, seed, image_id: str = "img") -> SyntheticImage:
    if mode not in ("full", "weak"):
        raise ValueError(f"mode must be 'full' or 'weak', got {mode!r}")
    cfg = world.config
    rng = np.random.default_rng(seed)
    templates = world.templates(mode)
    weights = np.array([w for _, w in templates])
    cats = list(templates[int(rng.choice(len(templates), p=weights / weights.sum()))][0])
    while len(cats) < cfg.max_objects and rng.random() < 0.3:
        cats.append(cats[int(rng.integers(len(cats)))])
    gt = _layout(rng, cats)
    m = len(cats)
    r = int(rng.integers(cfg.r_min, cfg.r_max + 1))

    props: list[np.ndarray] = []
    budget = r - m
    for g in range(m):
        k = 1 + min(int(rng.integers(0, 3)), budget)
        budget -= k - 1
        got = 0
        while got < k:
            p = _jitter(rng, gt[g], 0.06, 0.1)
            if p is None:
                continue
            ious = iou_matrix(p, gt)[0]
            if ious[g] >= FG_IOU and int(np.argmax(ious)) == g:
                props.append(p)
                got += 1
    n_near = (r - len(props)) // 3
    while n_near > 0:
        g = int(rng.integers(m))
        p = _jitter(rng, gt[g], 0.35, 0.45)
        if p is not None and iou_matrix(p, gt)[0].max() < FG_IOU:
            props.append(p)
            n_near -= 1
    while len(props) < r:
        w, h = rng.uniform(0.05, 0.6, size=2)
        x, y = rng.uniform(0, 1 - w), rng.uniform(0, 1 - h)
        p = np.array([x, y, x + w, y + h])
        if iou_matrix(p, gt)[0].max() < FG_IOU:
            props.append(p)
    proposals = np.array(props)[rng.permutation(r)]

    ious = iou_matrix(proposals, gt)
    best = ious.argmax(axis=1)
    best_iou = ious[np.arange(r), best]
    fg = best_iou >= FG_IOU
    assigned = np.where(fg, best, -1)

    protos = world.prototypes(mode)
    labels_arr = np.array(cats, dtype=np.intp)
    sigma = cfg.sigma_feat
    visual = np.where(fg[:, None], protos[labels_arr[best]], world.background[None, :])
    visual = visual + sigma * rng.standard_normal((r, cfg.d_p))
    delta = np.zeros((r, 4))
    if fg.any():
        delta[fg] = encode(proposals[fg], gt[best[fg]])
    delta = delta + sigma * rng.standard_normal((r, 4))

    n_cat = world.categories.c_f if mode == "full" else world.categories.c_w
    presence = np.zeros(n_cat)
    presence[labels_arr] = 1.0
    return SyntheticImage(
        image_id=image_id, mode=mode, proposals=proposals,
        features=np.concatenate([visual, delta], axis=1),
        gt_boxes=gt, gt_labels=labels_arr, labels=presence,
        assigned_gt=assigned, assigned_iou=best_iou,
    )


# --------------------------------------------------------------------------
# bundles
# --------------------------------------------------------------------------

SPLITS = ("full_train", "full_test", "weak_train", "weak_test")


@dataclass
class DatasetBundle:
    world: World
    full_train: list[SyntheticImage]
    full_test: list[SyntheticImage]
    weak_train: list[SyntheticImage]
    weak_test: list[SyntheticImage]
    seed: int = 0

    def split(self, name: str) -> list[SyntheticImage]:
        if name not in SPLITS:
            raise KeyError(name)
        return getattr(self, name)

    def __eq__(self, other) -> bool:
        if not isinstance(other, DatasetBundle):
            return NotImplemented
        return (self.seed == other.seed
                and json.dumps(self.world.to_dict()) == json.dumps(other.world.to_dict())
                and all(self.split(s) == other.split(s) for s in SPLITS))


def gen_bundle(world: World, sizes=(400, 100, 800, 200), seed: int = 0) -> DatasetBundle:
    """Generate the four splits; ``sizes`` follows :data:`SPLITS` order."""
    sizes = tuple(int(s) for s in sizes)
    if len(sizes) != 4 or any(s < 1 for s in sizes):
        raise ConfigError(f"sizes must be four positive counts, got {sizes}")
    out = {}
    for code, (name, size) in enumerate(zip(SPLITS, sizes)):
        mode = name.split("_")[0]
        out[name] = [gen_image(world, mode, np.random.SeedSequence([seed, code, i]),
                               f"{name}/{i:05d}") for i in range(size)]
    return DatasetBundle(world=world, seed=int(seed), **out)


def save_bundle(bundle: DatasetBundle, path) -> None:
    """Write one JSON record per line: header, then one record per image.

    JSON floats use the shortest repr that round-trips, so load is bit-exact.
    """
    with open(path, "w") as fh:
        header = {"format": BUNDLE_FORMAT, "version": BUNDLE_VERSION, "seed": bundle.seed,
                  "sizes": [len(bundle.split(s)) for s in SPLITS],
                  "world": bundle.world.to_dict()}
        fh.write(json.dumps(header) + "\n")
        for s in SPLITS:
            for img in bundle.split(s):
                rec = {"split": s, **img.to_dict()}
                fh.write(json.dumps(rec) + "\n")


def load_bundle(path) -> DatasetBundle:
    splits: dict[str, list] = {s: [] for s in SPLITS}
    header = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise BundleFormatError(lineno, f"invalid JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise BundleFormatError(lineno, "record is not an object")
            try:
                if header is None:
                    if rec.get("format") != BUNDLE_FORMAT:
                        raise BundleFormatError(lineno, "missing bundle header")
                    if rec.get("version") != BUNDLE_VERSION:
                        raise BundleFormatError(lineno, f"unsupported version {rec.get('version')}")
                    header = rec
                    world = World.from_dict(rec["world"])
                    continue
                split = rec["split"]
                if split not in splits:
                    raise BundleFormatError(lineno, f"unknown split {split!r}")
                splits[split].append(SyntheticImage.from_dict(rec))
            except BundleFormatError:
                raise
            except (KeyError, TypeError, ValueError) as exc:
                raise BundleFormatError(lineno, f"malformed record ({exc!r})") from None
    if header is None:
        raise BundleFormatError(1, "empty bundle file")
    sizes = header.get("sizes")
    if sizes is not None and [len(splits[s]) for s in SPLITS] != list(sizes):
        raise BundleFormatError(lineno, "split sizes disagree with header")
    return DatasetBundle(world=world, seed=int(header.get("seed", 0)), **splits)
