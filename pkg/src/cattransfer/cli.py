"""``cattransfer`` command line: gen-data, build-graph, train, eval, gradcheck.

Exit codes: 0 success, 1 gradient check failed, 2 config or input error,
3 numerical failure during training.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError
from .boxes import BoxError
from .config import TrainConfig, load_config, parse_config_text
from .evaluation import evaluate
from .graph import (GraphInputError, SemanticGraph, read_embedding_file, read_relation_file)
from .synthetic import (SPLITS, BundleFormatError, ConfigError, gen_bundle, gen_world,
                        load_bundle, save_bundle)
from . import training as tr

log = logging.getLogger("cattransfer")

EXIT_OK, EXIT_GRADCHECK, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2, 3
INPUT_ERRORS = (ConfigError, BundleFormatError, GraphInputError, DimensionError, BoxError, OSError)

GRADCHECK_TOLERANCE = 1e-4
TINY_CONFIG = dict(c_f=4, c_w=3, n_overlap=2, n_relations=1, d_p=6, k=5, r_min=3, r_max=6,
                   max_objects=2, d=8, hidden1=6, hidden2=8, n_full_train=6, n_full_test=2,
                   n_weak_train=6, n_weak_test=2, batch_full=2, batch_weak=2, steps=2,
                   eval_every=0)


def _overrides(args) -> dict[str, str]:
    out = {}
    for item in args.set or ():
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    if args.seed is not None:
        out["seed"] = str(args.seed)
    return out


def _resolve(args, base: dict | None = None) -> TrainConfig:
    overrides = {**(base or {}), **_overrides(args)}
    return load_config(args.config, overrides)


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_config(out: Path, cfg: TrainConfig) -> None:
    (out / "config.txt").write_text(cfg.to_text())


def _bundle_for(args, cfg: TrainConfig):
    if args.bundle:
        bundle = load_bundle(args.bundle)
    else:
        bundle = gen_bundle(gen_world(cfg.world_config(), cfg.seed), cfg.sizes, cfg.seed)
    return bundle


def _embeddings(args, bundle):
    cs = bundle.world.categories
    if not getattr(args, "embeddings", None):
        return None, None
    return (read_embedding_file(args.embeddings, cs.full_categories),
            read_embedding_file(args.embeddings, cs.weak_categories))


def _relations(args, bundle):
    cs = bundle.world.categories
    if not getattr(args, "relations", None):
        return None
    return read_relation_file(args.relations, cs.full_categories, cs.weak_categories)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _resolve(args)
    out = _outdir(args)
    world = gen_world(cfg.world_config(), cfg.seed)
    bundle = gen_bundle(world, cfg.sizes, cfg.seed)
    save_bundle(bundle, out / "bundle.jsonl")
    _write_config(out, cfg)
    print(f"wrote {out / 'bundle.jsonl'} "
          f"({', '.join(f'{s}={len(bundle.split(s))}' for s in SPLITS)})")
    return EXIT_OK


def cmd_build_graph(args) -> int:
    cfg = _resolve(args)
    out = _outdir(args)
    bundle = _bundle_for(args, cfg)
    ef, ew = _embeddings(args, bundle)
    graph = tr.graph_from_bundle(bundle, cfg, relations=_relations(args, bundle),
                                 emb_full=ef, emb_weak=ew)
    graph.save(out / "graph.json")
    _write_config(out, cfg)
    print(f"wrote {out / 'graph.json'} (A_f edges {int(graph.A_f.sum())}, "
          f"A_w edges {int(graph.A_w.sum())}, B mass {float(graph.B.sum()):.4f})")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve(args)
    out = _outdir(args)
    _write_config(out, cfg)
    bundle = _bundle_for(args, cfg)
    ef, ew = _embeddings(args, bundle)
    if args.graph:
        graph = SemanticGraph.load(args.graph)
    else:
        graph = tr.graph_from_bundle(bundle, cfg, relations=_relations(args, bundle),
                                     emb_full=ef, emb_weak=ew)
    state = tr.init_state(cfg, bundle, graph, emb_full=ef, emb_weak=ew)
    t0 = time.perf_counter()
    _, rows = tr.run_training(cfg, bundle, state)
    (out / "metrics.csv").write_text(tr.metrics_csv(rows))
    tr.save_checkpoint(state, out / "checkpoint.json")
    log.info("trained %d steps in %.1fs", cfg.steps, time.perf_counter() - t0)
    if rows:
        last = rows[-1]
        print(f"step {last['step']}: weak-test mAP {100 * last['map']:.1f} "
              f"CorLoc {100 * last['corloc']:.1f}")
    else:
        print("0 steps: wrote initial checkpoint")
    return EXIT_OK


def cmd_eval(args) -> int:
    text = tr.checkpoint_config_text(args.checkpoint)
    cfg = _resolve(args, parse_config_text(text, str(args.checkpoint)))
    out = _outdir(args)
    bundle = _bundle_for(args, cfg)
    ef, ew = _embeddings(args, bundle)
    state = tr.init_state(cfg, bundle, emb_full=ef, emb_weak=ew)
    tr.load_checkpoint(state, args.checkpoint)
    report = evaluate(state.teacher, bundle.split(args.split),
                      bundle.world.categories.weak_categories, cfg.nms_threshold)
    (out / f"eval_{args.split}.csv").write_text(report.to_csv())
    _write_config(out, cfg)
    sys.stdout.write(report.to_csv())
    return EXIT_OK


def gradcheck_errors(cfg: TrainConfig, h: float = 1e-6) -> dict[str, float]:
    """Relative error of every trainable parameter's gradient of the full loss."""
    bundle = gen_bundle(gen_world(cfg.world_config(), cfg.seed), cfg.sizes, cfg.seed)
    state = tr.init_state(cfg, bundle)
    rng = np.random.default_rng(cfg.seed)
    for t in (state.sgcn.g_f, state.sgcn.g_w):
        t.data = rng.normal(0.0, 0.5, size=t.shape)
    for _ in range(cfg.steps):
        tr.step_on_bundle(state, bundle)
    fb, wb = tr._batches(state, bundle)
    return ad.grad_check_many(lambda: tr.compute_loss(state, fb, wb)[0], state.trainable(), h)


def cmd_gradcheck(args) -> int:
    cfg = _resolve(args, {k: str(v) for k, v in TINY_CONFIG.items()})
    if not 1e-6 <= args.h <= 1e-4:
        raise ConfigError(f"--h must lie in [1e-6, 1e-4], got {args.h}")
    if not (cfg.enable_dsmt and cfg.enable_sgcn):
        log.warning("gradcheck with a module disabled covers only the enabled terms")
    t0 = time.perf_counter()
    errs = gradcheck_errors(cfg, args.h)
    worst = max(errs.values())
    for name, e in errs.items():
        flag = "ok" if e < GRADCHECK_TOLERANCE else "FAIL"
        print(f"{flag:4s} {e:.3e} {name}")
    ok = worst < GRADCHECK_TOLERANCE
    print(f"{'PASS' if ok else 'FAIL'}: {len(errs)} parameters, max relative error {worst:.3e} "
          f"({time.perf_counter() - t0:.1f}s)")
    if args.out:
        out = _outdir(args)
        _write_config(out, cfg)
    return EXIT_OK if ok else EXIT_GRADCHECK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="cattransfer",
                                description="Cross-dataset detector training on synthetic worlds.")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_, out_default="."):
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.add_argument("--out", default=out_default, help="output directory")
        sp.set_defaults(fn=fn)
        return sp

    add("gen-data", cmd_gen_data, "generate a world and write the bundle")

    sp = add("build-graph", cmd_build_graph, "build and dump the semantic graph")
    sp.add_argument("--bundle")
    sp.add_argument("--embeddings", help="token v1 ... vk per line")
    sp.add_argument("--relations", help="full<TAB>weak<TAB>kind per line")

    sp = add("train", cmd_train, "train and write metrics.csv + checkpoint.json")
    sp.add_argument("--bundle")
    sp.add_argument("--graph", help="graph.json from build-graph")
    sp.add_argument("--embeddings")
    sp.add_argument("--relations")

    sp = add("eval", cmd_eval, "evaluate the teacher of a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--bundle")
    sp.add_argument("--embeddings")
    sp.add_argument("--split", default="weak_test", choices=SPLITS)

    sp = add("gradcheck", cmd_gradcheck, "finite-difference check of the full loss",
             out_default=None)
    sp.add_argument("--h", type=float, default=1e-5, help="central difference step")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except tr.NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
