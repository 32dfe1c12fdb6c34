"""Command-line interface.

Exit codes: 0 success, 1 usage, 2 configuration or shape mismatch, 3 I/O or
file format, 4 numeric failure.  Results go to stdout, diagnostics to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import config as cf
from . import gpr_sim as sim
from . import io
from . import network as net
from . import numerics as nx
from . import retrieval as rt
from . import training as tr
from .errors import ConfigError, FormatError, UsageError

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3, 4
GRADCHECK_TOL = 1e-3
GRADCHECK_STEP = 1e-5

log = logging.getLogger("edenet")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _out(line: str) -> None:
    sys.stdout.write(line + "\n")


def _load_config(path) -> cf.ExperimentConfig:
    return cf.load(path) if path else cf.builtin("experiment")


def _encode(seq: sim.GprSequence, model: net.EDENet | None, window: int) -> net.Encoded:
    if model is None:
        return net.encode_energy_profile(seq, window)
    return net.encode_sequence(seq, window, model)


def _model_and_window(args) -> tuple[net.EDENet | None, int]:
    if args.baseline == "energy":
        if args.window is None:
            raise UsageError("--baseline energy needs --window")
        return None, args.window
    if not args.checkpoint:
        raise UsageError("--checkpoint is required unless --baseline energy is given")
    model = io.load_checkpoint(args.checkpoint).build()
    if args.window not in (None, model.cfg.window):
        raise ConfigError(f"checkpoint network takes {model.cfg.window}-frame windows, got --window {args.window}")
    return model, model.cfg.window


# -- commands


def cmd_config(args) -> int:
    _out(cf.builtin(args.name).to_json())
    return EXIT_OK


def cmd_simulate(args) -> int:
    exp = _load_config(args.config)
    seed = exp.seed if args.scene_seed is None else args.scene_seed
    d = exp.dataset
    map_seq, queries = sim.make_dataset(seed, d.n_locations, exp.sim, d.map_epsilon, d.query_epsilon,
                                        d.query_noise, d.interference, d.density)
    io.write_gsf(args.out_map, map_seq)
    io.write_gsf(args.out_queries, queries)
    _out(json.dumps({"scene_seed": seed, "frames": map_seq.S, "depth": map_seq.D, "channels": map_seq.C,
                     "map_rms": sim.rms(map_seq), "query_rms": sim.rms(queries)}, sort_keys=True))
    return EXIT_OK


def cmd_train(args) -> int:
    exp = _load_config(args.config)
    if len(args.map) != len(args.queries):
        raise UsageError(f"{len(args.map)} --map files but {len(args.queries)} --queries files")
    pairs = [(io.read_gsf(m), io.read_gsf(q)) for m, q in zip(args.map, args.queries)]
    log_fh = open(args.log, "w") if args.log else None
    try:
        def record(rec):
            line = json.dumps(rec, sort_keys=True)
            if log_fh:
                log_fh.write(line + "\n")
                log_fh.flush()
            print(line, file=sys.stderr)

        res = tr.train(pairs, exp.train, exp.net, on_record=record)
    finally:
        if log_fh:
            log_fh.close()
    io.save_checkpoint(args.out, tr.Checkpoint.of(res.net, res.step))
    if res.skipped:
        log.warning("%d queries skipped for lack of positives or negatives", res.skipped)
    return EXIT_OK


def cmd_encode(args) -> int:
    model, window = _model_and_window(args)
    seq = io.read_gsf(args.input)
    enc = _encode(seq, model, window)
    io.save_descriptors(args.out, enc.descriptors, enc.poses, enc.frame_ids, {"window": window})
    _out(f"{len(enc.descriptors)},{enc.descriptors.shape[1]}")
    return EXIT_OK


def cmd_index(args) -> int:
    parts = [io.load_descriptors(p) for p in args.descriptors]
    dims = {p[0].shape[1] for p in parts}
    if len(dims) != 1:
        raise ConfigError(f"descriptor files have different dimensions {sorted(dims)}")
    desc = np.concatenate([p[0] for p in parts])
    poses = np.concatenate([p[1] for p in parts])
    ids = np.concatenate([p[2] for p in parts])
    rt.DescriptorIndex(desc, poses, ids)  # validates shape and unit norm
    io.save_descriptors(args.out, desc, poses, ids, {"index": True})
    _out(f"{len(desc)},{desc.shape[1]}")
    return EXIT_OK


def cmd_query(args) -> int:
    desc, poses, ids, _ = io.load_descriptors(args.index)
    if len(desc) == 0:
        raise UsageError("index is empty")
    index = rt.DescriptorIndex(desc, poses, ids)
    Q, _, q_ids, _ = io.load_descriptors(args.descriptors)
    if Q.shape[1] != index.dim:
        raise ConfigError(f"queries have dimension {Q.shape[1]}, index has {index.dim}")
    _out("query,rank,frame,distance,utm_x,utm_y")
    for qid, res in zip(q_ids, rt.query_batch(index, Q, min(args.topk, len(index)))):
        for rank, (f, dist, pose) in enumerate(zip(res.frame_ids, res.distances, res.poses), start=1):
            _out(f"{qid},{rank},{f},{dist:.9g},{float(pose[0])!r},{float(pose[1])!r}")
    return EXIT_OK


def cmd_eval(args) -> int:
    exp = _load_config(args.config)
    model, window = _model_and_window(args)
    map_seq, queries = io.read_gsf(args.map), io.read_gsf(args.queries)
    m, q = _encode(map_seq, model, window), _encode(queries, model, window)
    index = rt.DescriptorIndex(m.descriptors, m.poses, m.frame_ids)
    ks = exp.eval.ks
    recall = rt.evaluate_recall(index, q.descriptors, q.poses, ks, exp.eval.dist_thresh)
    _out(",".join(f"recall@{k}" for k in ks))
    _out(",".join(f"{recall[k]:.6f}" for k in ks))
    return EXIT_OK


def gradcheck_report(model: net.EDENet, seed: int = 0, h: float = GRADCHECK_STEP) -> dict[str, float]:
    """Max relative gradient error per named parameter, through a triplet loss on random windows."""
    cfg = model.cfg
    rng = np.random.default_rng(seed)
    X = nx.Tensor(rng.normal(size=(6,) + (cfg.channels, cfg.depth, cfg.window)))

    def loss():
        F = model.forward(X, train=True)
        # a margin wider than any unit-vector distance keeps every hinge active
        return tr.triplet_loss(F[0], F[1], F[2:], margin=2.5)

    params = model.params()
    errs = nx.grad_check_report(loss, params, h=h)
    return {p.name: e for p, e in zip(params, errs)}


def cmd_gradcheck(args) -> int:
    if args.checkpoint:
        model = io.load_checkpoint(args.checkpoint).build()
    else:
        exp = cf.load(args.config) if args.config else cf.builtin("tiny")
        model = net.EDENet(exp.net, seed=exp.seed)
    report = gradcheck_report(model, seed=args.seed)
    _out("parameter,max_rel_err")
    for name, err in report.items():
        _out(f"{name},{err:.3e}")
    worst = max(report.values())
    if not worst < GRADCHECK_TOL:
        print(f"gradient check failed: max relative error {worst:.3e} >= {GRADCHECK_TOL}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def _timed(fn, trials: int) -> np.ndarray:
    fn()  # warm-up
    out = np.empty(trials)
    for i in range(trials):
        t = time.perf_counter()
        fn()
        out[i] = time.perf_counter() - t
    return out * 1e3


def cmd_bench(args) -> int:
    if args.trials < 1:
        raise UsageError("--trials must be >= 1")
    if args.index_size < 1:
        raise UsageError("--index-size must be >= 1: cannot query an empty index")
    if args.checkpoint:
        model = io.load_checkpoint(args.checkpoint).build()
    else:
        model = net.EDENet(net.preset(args.preset), seed=0)
    cfg = model.cfg
    rng = np.random.default_rng(args.seed)
    window = rng.normal(size=(1, cfg.channels, cfg.depth, cfg.window))
    enc = _timed(lambda: model.encode_windows(window), args.trials)
    X = rng.normal(size=(args.index_size, cfg.descriptor_dim))
    X /= np.linalg.norm(X, axis=1, keepdims=True)
    index = rt.DescriptorIndex(X, rng.uniform(0, 1000, (args.index_size, 2)))
    q = X[rng.integers(args.index_size)] + 0.01 * rng.normal(size=cfg.descriptor_dim)
    q /= np.linalg.norm(q)
    topk = min(10, args.index_size)
    qry = _timed(lambda: rt.query(index, q, topk), args.trials)
    _out("metric,mean_ms,std_ms,trials")
    _out(f"encode_window_{cfg.window}f,{enc.mean():.3f},{enc.std():.3f},{args.trials}")
    _out(f"query_{args.index_size}x{cfg.descriptor_dim},{qry.mean():.3f},{qry.std():.3f},{args.trials}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="edenet", description="GPR place recognition with direction-encoding descriptors.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("config", help="print a builtin experiment config as JSON")
    s.add_argument("name", choices=sorted(cf.BUILTIN))
    s.set_defaults(fn=cmd_config)

    s = sub.add_parser("simulate", help="render a map pass and a query pass of one scene")
    s.add_argument("--config", help="experiment JSON (default: builtin 'experiment')")
    s.add_argument("--scene-seed", type=int, help="scene seed (default: the config seed)")
    s.add_argument("--out-map", required=True)
    s.add_argument("--out-queries", required=True)
    s.set_defaults(fn=cmd_simulate)

    s = sub.add_parser("train", help="triplet training; repeat --map/--queries for more scenes")
    s.add_argument("--config")
    s.add_argument("--map", action="append", required=True)
    s.add_argument("--queries", action="append", required=True)
    s.add_argument("--out", required=True, help="checkpoint (.ntc)")
    s.add_argument("--log", help="JSON-lines training log")
    s.set_defaults(fn=cmd_train)

    def model_args(s):
        s.add_argument("--checkpoint")
        s.add_argument("--baseline", choices=["energy"], help="use the energy-profile baseline")
        s.add_argument("--window", type=int, help="window length (baseline only)")

    s = sub.add_parser("encode", help="descriptors for every window of a sequence")
    model_args(s)
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_encode)

    s = sub.add_parser("index", help="merge descriptor files into an index")
    s.add_argument("descriptors", nargs="+")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_index)

    s = sub.add_parser("query", help="top-k matches for every descriptor in a file")
    s.add_argument("--index", required=True)
    s.add_argument("--descriptors", required=True)
    s.add_argument("--topk", type=int, default=5)
    s.set_defaults(fn=cmd_query)

    s = sub.add_parser("eval", help="recall@k of queries against the map")
    model_args(s)
    s.add_argument("--config")
    s.add_argument("--map", required=True)
    s.add_argument("--queries", required=True)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference check of every parameter gradient")
    s.add_argument("--config", help="experiment JSON (default: builtin 'tiny')")
    s.add_argument("--checkpoint")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("bench", help="encode and query latency")
    s.add_argument("--checkpoint")
    s.add_argument("--preset", default="default", choices=["default", "four_scale", "tiny", "experiment"])
    s.add_argument("--index-size", type=int, default=10_000)
    s.add_argument("--trials", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_bench)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, nx.DimensionError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except BrokenPipeError:
        # reader closed early (e.g. `| head`); silence the flush at interpreter exit
        os.dup2(os.open(os.devnull, os.O_WRONLY), sys.stdout.fileno())
        return EXIT_OK
    except (FormatError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (nx.NumericError, nx.DegenerateInputError, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
