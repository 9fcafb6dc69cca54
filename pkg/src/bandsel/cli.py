"""``bandsel`` command line: generate data, build and query tables, search, train SCOS, report.

Exit codes: 0 success, 1 I/O or corrupt input, 2 usage or config error, 3 key not found.
Any flag may also come from ``--config FILE`` (JSON object keyed by flag
destination names, e.g. ``{"algo": "ga", "seed": 3}``); explicit flags win.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

from . import bench, scos, search
from .bench import SchemaError
from .evaluators import TableEvaluator, live_evaluator
from .hsi import FormatError, format_bc, load_cube, load_labels, parse_bc, save_cube, save_labels, task_spec
from .stats import stats_scatter, write_scatter_csv
from .synth import SynthConfig, gen_synth_classification, gen_synth_reconstruction

log = logging.getLogger("bandsel")

EXIT_IO, EXIT_USAGE, EXIT_NOT_FOUND = 1, 2, 3
DEFAULT_NOISE = {"classification": 0.05, "reconstruction": 0.01}


class UsageError(Exception):
    pass


class NotFound(Exception):
    pass


def _seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in str(text).split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"bad seed list {text!r}; expected e.g. 0,1,2") from None


def _bc(text: str):
    try:
        return parse_bc(text)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


# ---------------------------------------------------------------- commands


def cmd_gen(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    kind = task_spec(args.task).kind
    noise = args.noise if args.noise is not None else DEFAULT_NOISE[kind]
    cfg = SynthConfig(
        num_bands=args.bands,
        side=args.side,
        num_classes=args.classes,
        rank=args.rank,
        n_informative=args.n_informative,
        informative=_bc(args.informative) if args.informative else None,
        noise=noise,
        seed=args.seed,
    )
    truth = {"task": kind, "seed": args.seed, "num_bands": args.bands}
    if truth["task"] == "classification":
        cube, labels, informative = gen_synth_classification(cfg)
        save_labels(labels, out / "labels.bssl")
        truth.update(informative=list(informative), num_classes=args.classes, noise=cfg.noise)
    else:
        cube = gen_synth_reconstruction(cfg)
        truth.update(rank=args.rank, noise=cfg.noise)
    save_cube(cube, out / "cube.bssc")
    with open(out / "truth.json", "w") as fh:
        json.dump(truth, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {out / 'cube.bssc'}")
    return 0


def _evaluator(args, table=None):
    """The table when one is given (a cube then only feeds band statistics), else a live evaluator."""
    if table is not None:
        return TableEvaluator(table)
    if not getattr(args, "cube", None):
        raise UsageError("need --cube (live evaluation) or --table")
    cube = load_cube(args.cube)
    labels = load_labels(args.labels) if args.labels else None
    return live_evaluator(args.task, cube, labels, args.backbone)


def cmd_bench_build(args) -> int:
    if args.bands_list:
        bcs = [_bc(b) for b in args.bands_list.split(",")]
    else:
        cube = load_cube(args.cube)
        bcs = bench.all_combinations(cube.num_bands, args.k)
    table = bench.build_table(_evaluator(args), bcs, _seeds(args.seeds), workers=args.workers)
    bench.save_table(table, args.out)
    print(f"records={len(table)} out={args.out}")
    return 0


def cmd_bench_query(args) -> int:
    table = bench.load_table(args.table)
    bc = _bc(args.bands)
    if bc not in table:
        raise NotFound(f"bands={format_bc(bc)}")
    for metric, value in bench.query(table, bc).items():
        print(f"{metric}={value!r}")
    return 0


def cmd_bench_oracle(args) -> int:
    table = bench.load_table(args.table)
    metric = args.metric or table.task.primary_metric
    if metric not in table.task.metrics:
        raise UsageError(f"unknown metric {metric!r} for {table.task.kind}; valid: {list(table.task.metrics)}")
    bc, value = bench.oracle(table, metric)
    print(f"bands={format_bc(bc)} {metric}={value!r}")
    return 0


def _space(args, cube, table):
    if table is not None:
        bcs = table.bands()
        k = len(bcs[0])
        n = cube.num_bands if cube is not None else max(max(b) for b in bcs) + 1
        full = len(bcs) == math.comb(n, k)
        return search.SearchSpace(n, k, None if full else tuple(sorted(bcs)))
    return search.SearchSpace(cube.num_bands, args.k)


def _summary(result, table) -> str:
    line = f"algo={result.algorithm} bands={format_bc(result.bands)} score={result.score!r} evals={result.evaluations}"
    if table is not None:
        line += f" regret={bench.regret(table, result.bands, result.metric)!r}"
    return line


def cmd_search(args) -> int:
    if args.algo not in search.ALGORITHMS:
        raise UsageError(f"unknown algorithm {args.algo!r}; valid: {', '.join(search.ALGORITHMS)}")
    table = bench.load_table(args.table) if args.table else None
    evaluator = _evaluator(args, table)
    cube = load_cube(args.cube) if args.cube else None
    space = _space(args, cube, table)
    metric = args.metric
    if args.algo == "exhaustive":
        result = search.exhaustive(evaluator, space, metric)
    elif args.algo == "random":
        result = search.random_search(evaluator, space, args.M, metric, seed=args.seed)
    elif args.algo == "sffs":
        result = search.sffs(evaluator, space, metric, seed=args.seed)
    elif args.algo == "ga":
        cfg = search.GAConfig(args.population, args.generations)
        result = search.genetic(evaluator, space, cfg, metric, seed=args.seed)
    elif args.algo == "predictor":
        result = search.predictor_search(evaluator, space, metric=metric, seed=args.seed, cube=cube)
    else:
        if cube is None:
            raise UsageError("--algo stats needs --cube for band statistics")
        result = search.stats_ranked_search(evaluator, cube, space, args.M, metric)
    if args.out:
        search.write_result(result, args.out)
    print(_summary(result, table))
    return 0


def _scos_data(args):
    cube = load_cube(args.cube)
    labels = load_labels(args.labels) if args.labels else None
    if task_spec(args.task).kind == "classification" and labels is None:
        raise UsageError("classification needs --labels")
    if task_spec(args.task).kind == "reconstruction":
        labels = None
    return scos.make_patches(cube, labels, args.patch)


def cmd_scos_train(args) -> int:
    data = _scos_data(args)
    cfg = scos.ScosTrainConfig(
        iterations=args.iterations,
        batch_size=args.batch,
        learning_rate=args.lr,
        patch=args.patch,
        k=args.k,
        val_frac=args.val_frac,
        seed=args.seed,
        pe_kind=args.pe,
        clip_norm=args.clip_norm if args.clip_norm and args.clip_norm > 0 else None,
    )
    cfg.validate(data.num_bands)
    train, _ = scos.split_data(data, cfg.val_frac, cfg.seed)
    rows: list = []
    params = scos.train_one_shot(train, cfg, log=rows)
    params.save(args.out)
    if args.log:
        scos.write_training_log(rows, args.log)
    print(f"pe={params.pe_kind} steps={params.steps} out={args.out}")
    return 0


def cmd_scos_search(args) -> int:
    params = scos.SupernetParams.load(args.params)
    args.patch = int(round(math.sqrt(params.hw)))
    if args.patch**2 != params.hw:
        raise UsageError(f"parameter spatial size {params.hw} is not a square patch")
    data = _scos_data(args)
    if data.num_bands != params.n_bands:
        raise UsageError(f"cube has {data.num_bands} bands, parameters expect {params.n_bands}")
    if data.task.kind != params.task:
        raise UsageError(f"parameters were trained for {params.task}, data is {data.task.kind}")
    _, val = scos.split_data(data, args.val_frac, params.seed if args.split_seed is None else args.split_seed)
    space = search.SearchSpace(data.num_bands, args.k)
    m = args.M
    if m > space.size:
        log.warning("M=%d exceeds the search space size %d; clipping", m, space.size)
        m = space.size
    result = scos.scos_search(params, val, space, m, seed=args.seed)
    if args.out:
        search.write_result(result, args.out)
    table = bench.load_table(args.table) if args.table else None
    print(_summary(result, table))
    return 0


def cmd_report(args) -> int:
    out = args.out
    if args.kind == "regret":
        if not args.table or not args.results:
            raise UsageError("regret report needs --table and --results")
        table = bench.load_table(args.table)
        with open(out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["algorithm", "seed", "bands", "score", "evaluations", "regret"])
            for path in args.results:
                res = search.read_result(path)
                if tuple(res["bands"]) not in table:
                    raise UsageError(f"{path}: bands {format_bc(res['bands'])} not in table {args.table}")
                reg = bench.regret(table, res["bands"], res["metric"] or None)
                w.writerow([res["algorithm"], res["seed"], format_bc(res["bands"]), repr(res["score"]), res["evaluations"], repr(reg)])
    elif args.kind == "scatter":
        if not args.table or not args.cube:
            raise UsageError("scatter report needs --table and --cube")
        table = bench.load_table(args.table)
        rows = stats_scatter(load_cube(args.cube), table.bands(), table, args.metric, args.frac)
        write_scatter_csv(rows, out)
    elif args.kind == "overlap":
        if not args.table or not args.table_b:
            raise UsageError("overlap report needs --table and --table-b")
        a, b = bench.load_table(args.table), bench.load_table(args.table_b)
        if a.task != b.task:
            raise UsageError("overlap report needs two tables of the same task")
        jac = bench.top_overlap(a, b, args.metric, args.frac)
        try:
            rho = repr(bench.rank_correlation(a, b, args.metric))
        except ValueError:
            rho = ""
        with open(out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["top_frac", "jaccard", "spearman"])
            w.writerow([args.frac, repr(jac), rho])
    else:
        raise UsageError(f"unknown report kind {args.kind!r}")
    print(f"wrote {out}")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bandsel", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="JSON file of default flag values")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def data_flags(sp, task_required=False):
        sp.add_argument("--task", required=task_required, default=None if task_required else "cls", help="cls or rec")
        sp.add_argument("--cube")
        sp.add_argument("--labels")
        sp.add_argument("--backbone", default=None)

    g = sub.add_parser("gen", help="write a synthetic cube, label map and ground-truth sidecar")
    g.add_argument("--task", required=True, choices=["cls", "rec", "classification", "reconstruction"])
    g.add_argument("--bands", type=int, default=16)
    g.add_argument("--side", type=int, default=32)
    g.add_argument("--classes", type=int, default=4)
    g.add_argument("--rank", type=int, default=3)
    g.add_argument("--n-informative", type=int, default=3)
    g.add_argument("--informative", help="explicit informative bands, e.g. 2-9-13")
    g.add_argument("--noise", type=float, default=None)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", default=".")
    g.set_defaults(func=cmd_gen)

    b = sub.add_parser("bench-build", help="evaluate combinations and write a benchmark table")
    data_flags(b)
    b.add_argument("--k", type=int, default=3)
    b.add_argument("--bands-list", help="comma-separated combinations instead of the full space")
    b.add_argument("--seeds", default="0")
    b.add_argument("--workers", type=int, default=None)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_bench_build)

    q = sub.add_parser("bench-query", help="print seed-averaged metrics of one combination")
    q.add_argument("--table", required=True)
    q.add_argument("--bands", required=True)
    q.set_defaults(func=cmd_bench_query)

    o = sub.add_parser("bench-oracle", help="print the best combination in a table")
    o.add_argument("--table", required=True)
    o.add_argument("--metric")
    o.set_defaults(func=cmd_bench_oracle)

    s = sub.add_parser("search", help="run a search algorithm")
    s.add_argument("--algo", required=True)
    s.add_argument("--table", help="table-backed evaluator, and regret in the summary")
    data_flags(s)
    s.add_argument("--k", type=int, default=3)
    s.add_argument("--M", type=int, default=100)
    s.add_argument("--population", type=int, default=20)
    s.add_argument("--generations", type=int, default=20)
    s.add_argument("--metric")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_search)

    t = sub.add_parser("scos-train", help="one-shot supernet training")
    data_flags(t)
    t.add_argument("--pe", default="slpe", choices=list(scos.PE_KINDS))
    t.add_argument("--iterations", type=int, default=scos.ScosTrainConfig.iterations)
    t.add_argument("--batch", type=int, default=scos.ScosTrainConfig.batch_size)
    t.add_argument("--lr", type=float, default=scos.ScosTrainConfig.learning_rate)
    t.add_argument("--patch", type=int, default=scos.ScosTrainConfig.patch)
    t.add_argument("--k", type=int, default=scos.ScosTrainConfig.k)
    t.add_argument("--val-frac", type=float, default=scos.ScosTrainConfig.val_frac)
    t.add_argument("--clip-norm", type=float, default=scos.ScosTrainConfig.clip_norm, help="gradient norm cap; 0 disables")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.add_argument("--log", help="training log CSV")
    t.set_defaults(func=cmd_scos_train)

    ss = sub.add_parser("scos-search", help="training-free search with a trained supernet")
    ss.add_argument("--params", required=True)
    data_flags(ss)
    ss.add_argument("--k", type=int, default=3)
    # full-scale runs sample 1,000 or 10,000 combinations; 200 suits the 560-combination desk space
    ss.add_argument("--M", type=int, default=200)
    ss.add_argument("--val-frac", type=float, default=scos.ScosTrainConfig.val_frac)
    ss.add_argument("--split-seed", type=int, default=None, help="defaults to the training seed")
    ss.add_argument("--seed", type=int, default=0)
    ss.add_argument("--table", help="table for the regret column")
    ss.add_argument("--out")
    ss.set_defaults(func=cmd_scos_search)

    r = sub.add_parser("report", help="CSV reports for external plotting")
    r.add_argument("--kind", required=True, choices=["regret", "scatter", "overlap"])
    r.add_argument("--table")
    r.add_argument("--table-b")
    r.add_argument("--results", nargs="*")
    r.add_argument("--cube")
    r.add_argument("--metric")
    r.add_argument("--frac", type=float, default=0.05)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)
    return p


def parse_args(argv):
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    pre, rest = pre.parse_known_args(argv)
    subparsers = parser._subparsers._group_actions[0].choices
    command = next((a for a in rest if a in subparsers), None)
    if pre.config and command:
        try:
            with open(pre.config) as fh:
                config = json.load(fh)
        except OSError as exc:
            parser.error(f"cannot read config: {exc}")
        except json.JSONDecodeError as exc:
            parser.error(f"config {pre.config} is not valid JSON: {exc}")
        if not isinstance(config, dict):
            parser.error("config must be a JSON object")
        sub = subparsers[command]
        known = {a.dest for a in sub._actions} - {"help"}
        unknown = sorted(set(config) - known)
        if unknown:
            parser.error(f"unknown config keys for {command}: {unknown}")
        sub.set_defaults(**config)
        # required flags are satisfied by the config
        for action in sub._actions:
            if action.dest in config:
                action.required = False
    return parser.parse_args(argv)


def main(argv=None) -> int:
    args = parse_args(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except NotFound as exc:
        print(f"not found: {exc}", file=sys.stderr)
        return EXIT_NOT_FOUND
    except (FormatError, SchemaError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (UsageError, ValueError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KeyError as exc:
        print(f"not found: {exc.args[0] if exc.args else exc}", file=sys.stderr)
        return EXIT_NOT_FOUND


if __name__ == "__main__":
    sys.exit(main())
