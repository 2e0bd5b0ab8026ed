"""Command-line entry point: ``python -m care_reid <subcommand>``.

Artifacts go under ``$CARE_OUTPUT_ROOT`` (default ``./care_runs``) in
``<config digest>/seed<seed>/``, so runs with different configs never share
a directory.  Exit codes: 0 success, 1 failed gradcheck, 2 invalid config,
3 non-finite loss.
"""

import argparse
import csv
import itertools
import json
import logging
import os
import sys

import numpy as np

from . import config as config_mod
from . import experiment, gradcheck, synthdata
from .config import ConfigError, ExperimentConfig
from .epr import SCORE_FIELDS
from .metrics import REPORT_HEADER, report_row
from .model import NonFiniteError, PeerModel

log = logging.getLogger("care_reid")

OUTPUT_ROOT_ENV = "CARE_OUTPUT_ROOT"
SCORE_HEADER = ["sample_id", "epoch", "delta", "lambda", "instant_cam", "cam_acc",
                "delta_h", "lambda_h", "cosw", "cosw_acc"]
SWEEP_KEYS = {"lambda": "lam", "alpha": "alpha", "beta": "beta", "batch_size": "batch_size"}
EXIT_GRADCHECK, EXIT_CONFIG, EXIT_NONFINITE = 1, 2, 3


def output_root():
    return os.environ.get(OUTPUT_ROOT_ENV, os.path.join(os.getcwd(), "care_runs"))


def config_dir(cfg):
    """``<root>/<digest>``, holding a copy of the config; refuses a mismatching copy."""
    path = os.path.join(output_root(), cfg.digest())
    os.makedirs(path, exist_ok=True)
    ini = os.path.join(path, "config.ini")
    text = cfg.replace(seeds=(0,)).to_ini()
    if os.path.exists(ini):
        with open(ini) as f:
            if f.read() != text:
                raise ConfigError("config", f"{ini} holds a different configuration")
    else:
        with open(ini, "w") as f:
            f.write(text)
    return path


def run_dir(cfg, seed, *parts):
    path = os.path.join(config_dir(cfg), f"seed{seed}", *parts)
    os.makedirs(path, exist_ok=True)
    return path


def _seed(args, cfg):
    return cfg.seeds[0] if args.seed is None else args.seed


def _fmt(v):
    return f"{v:.10g}"


# -- subcommands -----------------------------------------------------------

def cmd_gen_data(args, cfg):
    seed = _seed(args, cfg)
    out = args.out or run_dir(cfg, seed, "data")
    synthdata.save(experiment.clean_dataset(cfg, seed), out)
    print(out)


def cmd_inject_noise(args, cfg):
    seed = _seed(args, cfg)
    ds = synthdata.load(args.data)
    noisy = experiment.apply_noise(cfg, ds, seed)
    out = args.out or args.data
    synthdata.save(noisy, out)
    print(f"{out}: {int(noisy.train.corrupted.sum())} of {len(noisy.train)} labels corrupted")


class _EpochWriter:
    """Per-epoch metrics rows, JSON-lines logs and optional score dumps."""

    def __init__(self, out, ds, seed, dump_scores):
        self.ds, self.seed = ds, seed
        self.metrics = open(os.path.join(out, "metrics.csv"), "w", newline="")
        self.metrics_csv = csv.writer(self.metrics, lineterminator="\n")
        self.metrics_csv.writerow(REPORT_HEADER)
        self.logs = open(os.path.join(out, "log.jsonl"), "w")
        self.out = out
        self.dump_scores = dump_scores
        self.score_files = {}

    def __call__(self, stage, epoch, models, books, entries):
        rep, v_c, v_a, auc = experiment.evaluate(models, self.ds, books)
        self.metrics_csv.writerow(report_row(stage, epoch, rep, v_c, v_a, auc, self.seed))
        for e in entries:
            self.logs.write(json.dumps(e, sort_keys=True) + "\n")
        if self.dump_scores:
            for k, book in enumerate(books, start=1):
                self._dump(k, epoch, book)

    def _dump(self, net, epoch, book):
        if net not in self.score_files:
            f = open(os.path.join(self.out, f"scores_net{net}.csv"), "w", newline="")
            w = csv.writer(f, lineterminator="\n")
            w.writerow(SCORE_HEADER)
            self.score_files[net] = (f, w)
        _, w = self.score_files[net]
        s = book.last
        cam_acc, cosw_acc = book.cam.accumulated(epoch), book.certainty(epoch)
        for i, sid in enumerate(self.ds.train.sample_id):
            w.writerow([int(sid), epoch] + [_fmt(s[f][i]) for f in SCORE_FIELDS[:3]] + [_fmt(cam_acc[i])]
                       + [_fmt(s[f][i]) for f in SCORE_FIELDS[3:]] + [_fmt(cosw_acc[i])])

    def close(self):
        self.metrics.close()
        self.logs.close()
        for f, _ in self.score_files.values():
            f.close()


def _dump_embeddings(path, models, ds):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        d = models[0].d_emb
        w.writerow(["split", "sample_id", "true_label", "noisy_label"] + [f"e{j}" for j in range(d)])
        for name in synthdata.SPLITS:
            split = getattr(ds, name)
            emb = experiment.embed(models, split.features)
            for sid, t, n, e in zip(split.sample_id, split.true_label, split.noisy_label, emb):
                w.writerow([name, int(sid), int(t), int(n)] + [_fmt(v) for v in e])


def cmd_train(args, cfg):
    seed = _seed(args, cfg)
    out = run_dir(cfg, seed, args.method)
    ds = synthdata.load(args.data) if args.data else experiment.make_dataset(cfg, seed)
    writer = _EpochWriter(out, ds, seed, args.dump_scores)
    try:
        result = experiment.run(cfg, seed, args.method, dataset=ds, on_epoch=writer)
    except NonFiniteError as exc:
        dump = os.path.join(out, "nonfinite.json")
        with open(dump, "w") as f:
            json.dump({"error": str(exc), "diagnostics": exc.diagnostics, "seed": seed,
                       "method": args.method, "config": cfg.to_dict()}, f, indent=2, default=str)
        print(f"non-finite loss: {exc}; diagnostics in {dump}", file=sys.stderr)
        return EXIT_NONFINITE
    finally:
        writer.close()
    for k, m in enumerate(result.models, start=1):
        m.save(os.path.join(out, f"net{k}.ckpt"))
    if args.dump_embeddings:
        _dump_embeddings(os.path.join(out, "embeddings.csv"), result.models, ds)
    print(f"{out}: rank1={result.rank1:.4f} map={result.map:.4f}")
    return 0


def cmd_eval(args, cfg):
    seed = _seed(args, cfg)
    models = [PeerModel.load(p, kappa=cfg.kappa) for p in args.checkpoint]
    ds = synthdata.load(args.data) if args.data else experiment.make_dataset(cfg, seed)
    rep, v_c, v_a, auc = experiment.evaluate(models, ds, [])
    out = args.out or os.path.join(os.path.dirname(os.path.abspath(args.checkpoint[0])), "eval.csv")
    with open(out, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        w.writerow(report_row("eval", "", rep, v_c, v_a, auc, seed))
    print(f"{out}: rank1={rep.rank1:.4f} rank5={rep.rank5:.4f} rank10={rep.rank10:.4f} map={rep.map:.4f}")


def cmd_gradcheck(args, cfg):
    results = gradcheck.run_all(seed=args.seed or 0, instances=args.instances)
    print(gradcheck.format_report(results))
    return 0 if all(r.passed for r in results) else EXIT_GRADCHECK


def _parse_grid(items):
    grid = []
    for item in items:
        if "=" not in item:
            raise ConfigError(item, "grid entries look like name=v1,v2,...")
        key, raw = item.split("=", 1)
        if key not in SWEEP_KEYS:
            raise ConfigError(key, f"sweep supports {sorted(SWEEP_KEYS)}")
        conv = int if key == "batch_size" else float
        try:
            values = [conv(v) for v in raw.split(",") if v.strip()]
        except ValueError:
            raise ConfigError(key, f"cannot parse {raw!r}") from None
        grid.append((key, values))
    if not grid:
        raise ConfigError("grid", "give at least one --grid entry")
    return grid


def cmd_sweep(args, cfg):
    grid = _parse_grid(args.grid)
    seeds = args.seeds or [_seed(args, cfg)]
    keys = [k for k, _ in grid]
    rows = []
    for point in itertools.product(*[v for _, v in grid]):
        point_cfg = cfg.replace(**{SWEEP_KEYS[k]: v for k, v in zip(keys, point)})
        for seed in seeds:
            r = experiment.run(point_cfg, seed, args.method)
            rows.append(list(point) + [seed, _fmt(r.rank1), _fmt(r.rank5), _fmt(r.rank10),
                                       _fmt(r.map), "" if r.auc is None else _fmt(r.auc)])
            log.info("sweep %s seed=%d map=%.4f", dict(zip(keys, point)), seed, r.map)
    name = "sweep-" + "-".join(keys) + f"-{args.method}.csv"
    out = args.out or os.path.join(config_dir(cfg), name)
    with open(out, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(keys + ["seed", "rank1", "rank5", "rank10", "map", "auc"])
        w.writerows(rows)
    print(f"{out}: {len(rows)} rows")


# -- argument parsing ------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="care-reid", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file (defaults apply when omitted)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. noise.rate=0.5 (repeatable)")
    common.add_argument("--seed", type=int, help="seed (default: first seed of the config)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", parents=[common], help="write a clean synthetic dataset")
    s.add_argument("--out", help="output directory")
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("inject-noise", parents=[common], help="corrupt a dataset's train labels")
    s.add_argument("--data", required=True, help="dataset directory")
    s.add_argument("--out", help="output directory (default: rewrite in place)")
    s.set_defaults(func=cmd_inject_noise)

    s = sub.add_parser("train", parents=[common], help="train one method and log every epoch")
    s.add_argument("--method", choices=experiment.METHODS, default="care")
    s.add_argument("--data", help="dataset directory (default: generate from the config)")
    s.add_argument("--dump-scores", action="store_true", help="write per-sample scores each epoch")
    s.add_argument("--dump-embeddings", action="store_true", help="write final embeddings")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="evaluate checkpoints on the test split")
    s.add_argument("--checkpoint", action="append", required=True,
                   help="checkpoint file; repeat to average several networks")
    s.add_argument("--data", help="dataset directory (default: generate from the config)")
    s.add_argument("--out", help="report CSV path")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    s.add_argument("--instances", type=int, default=10)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("sweep", parents=[common], help="grid over lambda/alpha/beta/batch_size")
    s.add_argument("--grid", action="append", default=[], metavar="NAME=V1,V2,...")
    s.add_argument("--method", choices=experiment.METHODS, default="care")
    s.add_argument("--seeds", type=int, nargs="+", help="seeds per grid point")
    s.add_argument("--out", help="result CSV path")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.config:
            cfg = config_mod.load(args.config, args.set)
        else:
            cfg = config_mod.loads("", args.set)
        return args.func(args, cfg) or 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (synthdata.DataFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
