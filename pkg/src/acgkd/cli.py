"""Command-line entry point: ``acgkd <command> [--config FILE] [--key value ...]``.

Every RunConfig key is also a ``--key`` flag (dashes or underscores). Outputs
go to ``<outdir>/<run-id>/{config.resolved, checkpoints/, traces/, metrics/,
exports/}``. Exit codes: 0 ok, 1 config error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import baselines
from .checkpoint import CheckpointError, load_container, save_container
from .config import ConfigError, RunConfig, load_config
from .distillation import (DistillState, distill, embeddings, evaluate, load_student, save_student,
                           write_embeddings_csv, write_metrics_csv)
from .generation import generate_batch, generate_dataset, harden_graph, write_trace_csv
from .graphs import DataFormatError, GraphBatch, StratificationError, export_graph, load_dataset, split_train_test
from .models import GnnModel, TrainingError, accuracy, train_teacher
from .tensor import NumericError

log = logging.getLogger("acgkd")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
COMMANDS = ("train-teacher", "generate", "distill", "bench", "eval", "export-embeddings")
_KEYS = [f.name for f in dataclasses.fields(RunConfig)]


class DataError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# shared plumbing


def run_dir(cfg: RunConfig, command: str) -> Path:
    rid = cfg.run_id or f"{command}-{cfg.dataset}-s{cfg.seed}"
    d = Path(cfg.outdir) / rid
    for sub in ("checkpoints", "traces", "metrics", "exports"):
        (d / sub).mkdir(parents=True, exist_ok=True)
    cfg.write(d / "config.resolved")
    return d


def load_split(cfg: RunConfig):
    """(train, test, records) for the configured dataset and split."""
    try:
        records = load_dataset(cfg.dataset, cfg.data_root or None, cfg.degree_scheme, cfg.max_degree)
        split = split_train_test([r.label for r in records], cfg.split_ratio, cfg.split_seed)
    except (FileNotFoundError, DataFormatError, StratificationError) as exc:
        raise DataError(str(exc)) from exc
    return [records[i] for i in split.train], [records[i] for i in split.test], records


def default_nodes(cfg: RunConfig, records) -> int:
    return cfg.n_nodes or int(round(np.mean([r.node_count for r in records])))


def load_teacher(cfg: RunConfig) -> GnnModel:
    if not cfg.teacher_ckpt:
        raise ConfigError("teacher_ckpt is required for this command")
    try:
        return GnnModel.load(cfg.teacher_ckpt)
    except (OSError, CheckpointError, ValueError) as exc:
        raise DataError(f"cannot load teacher checkpoint: {exc}") from exc


def save_pseudo(batches: list[GraphBatch], path, extra: dict | None = None) -> Path:
    arrays = {}
    for t, b in enumerate(batches):
        arrays[f"batch{t}.features"] = b.features
        arrays[f"batch{t}.adjacency"] = b.adjacency
        arrays[f"batch{t}.node_weights"] = b.node_weights
        arrays[f"batch{t}.labels"] = b.labels.astype(np.float64)
    return save_container(path, {"kind": "pseudo_graphs", "num_batches": len(batches), "extra": extra or {}}, arrays)


def load_pseudo(path) -> list[GraphBatch]:
    header, arrays = load_container(path)
    if header.get("kind") != "pseudo_graphs":
        raise CheckpointError(f"{path} is not a pseudo-graph archive")
    out = []
    for t in range(header["num_batches"]):
        w = arrays[f"batch{t}.node_weights"]
        out.append(GraphBatch(arrays[f"batch{t}.features"], arrays[f"batch{t}.adjacency"], np.ones(w.shape, bool),
                              arrays[f"batch{t}.labels"].astype(int), node_weights=w))
    return out


def make_pseudo(cfg: RunConfig, teacher: GnnModel, n_nodes: int, seed: int):
    """Generated batches for the configured method, plus the generation trace if any."""
    gen = cfg.gen_config()
    if cfg.method == "acgkd":
        batches, params, trace = generate_dataset(teacher, n_nodes, cfg.m_graphs, cfg.curriculum_schedule(), gen,
                                                  seed)
        return batches, trace, params
    if cfg.method == "bernoulli":
        batches, trace = baselines.bernoulli_generate_dataset(teacher, n_nodes, cfg.m_graphs,
                                                              cfg.curriculum_schedule(), gen, seed)
        return batches, trace, None
    if cfg.method == "dg":
        return baselines.deep_inversion_dataset(teacher, n_nodes, cfg.m_graphs, cfg.num_batches, gen, seed), None, None
    return baselines.random_dataset(teacher, n_nodes, cfg.m_graphs, cfg.num_batches, seed), None, None


def _write_rows(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    return path


# ---------------------------------------------------------------------------
# commands


def cmd_train_teacher(cfg: RunConfig) -> dict:
    train, test, _ = load_split(cfg)
    spec = cfg.teacher_spec(max(r.label for r in train + test) + 1, train[0].features.shape[1])
    out = run_dir(cfg, "train-teacher")
    model, hist = train_teacher(train, spec, cfg.teacher_config(), seed=cfg.seed, test=test)
    ckpt = model.save(out / "checkpoints" / "teacher.ckpt", extra={"dataset": cfg.dataset})
    _write_rows(out / "metrics" / "teacher.csv", ("epoch", "loss", "train_acc", "test_acc"), hist.rows)
    acc = hist.final_test_acc
    print(f"teacher {spec.name} on {cfg.dataset}: test_acc={acc:.4f} checkpoint={ckpt}")
    return {"test_acc": acc, "checkpoint": str(ckpt), "dir": str(out)}


def cmd_generate(cfg: RunConfig) -> dict:
    teacher = load_teacher(cfg)
    _, _, records = load_split(cfg)
    if records[0].features.shape[1] != teacher.spec.input_dim:
        raise ConfigError("teacher input dim does not match the dataset features")
    out = run_dir(cfg, "generate")
    n = default_nodes(cfg, records)
    batches, trace, params = make_pseudo(cfg, teacher, n, cfg.seed)
    archive = save_pseudo(batches, out / "checkpoints" / "pseudo.ckpt", {"method": cfg.method, "n_nodes": n})
    if trace is not None:
        write_trace_csv(trace, out / "traces" / "generation.csv")
    exported = 0
    for t, p in enumerate(params or []):
        for i, g in enumerate(harden_graph(p)):
            if exported >= cfg.export_graphs:
                break
            for fmt in ("json", "dot"):
                export_graph(g, fmt, out / "exports" / "graphs" / f"b{t:03d}_g{i:03d}.{fmt}")
            exported += 1
    print(f"generated {len(batches)} batches of {cfg.m_graphs} graphs (n={n}) archive={archive}")
    return {"archive": str(archive), "dir": str(out), "num_batches": len(batches)}


def _distill_one(cfg: RunConfig) -> dict:
    teacher = load_teacher(cfg)
    train, test, records = load_split(cfg)
    spec = cfg.student_spec(teacher.spec.num_classes, teacher.spec.input_dim)
    out = run_dir(cfg, "distill")
    if cfg.pseudo:
        try:
            batches = load_pseudo(cfg.pseudo)
        except (OSError, CheckpointError, KeyError) as exc:
            raise DataError(f"cannot load pseudo-graph archive: {exc}") from exc
    else:
        batches, trace, _ = make_pseudo(cfg, teacher, default_nodes(cfg, records), cfg.seed)
        if trace is not None:
            write_trace_csv(trace, out / "traces" / "generation.csv")
    state = distill(teacher, batches, spec, cfg.distill_config(), seed=cfg.seed, test=test)
    save_student(state, out / "checkpoints" / "student.ckpt", {"dataset": cfg.dataset})
    write_metrics_csv(state.history, out / "metrics" / "distill.csv")
    acc = state.history[-1][-1]
    print(f"student {spec.name} ({cfg.method}) on {cfg.dataset}: test_acc={acc:.4f}")
    return {"test_acc": acc, "dir": str(out)}


def cmd_distill(cfg: RunConfig) -> dict:
    if cfg.parallel_seeds <= 1:
        return _distill_one(cfg)
    # fan out seeds seed .. seed+k-1, each into its own run directory
    cfgs = [dataclasses.replace(cfg, seed=cfg.seed + k, parallel_seeds=1,
                                run_id=f"{cfg.run_id or 'distill-' + cfg.dataset}-s{cfg.seed + k}")
            for k in range(cfg.parallel_seeds)]
    with ProcessPoolExecutor(cfg.parallel_seeds) as pool:
        results = list(pool.map(_distill_one, cfgs))
    accs = [r["test_acc"] for r in results]
    print(f"mean test_acc={np.mean(accs):.4f} std={np.std(accs):.4f} over {len(accs)} seeds")
    return {"runs": results, "mean": float(np.mean(accs)), "std": float(np.std(accs))}


def cmd_bench(cfg: RunConfig) -> dict:
    teacher = load_teacher(cfg)
    _, _, records = load_split(cfg)
    out = run_dir(cfg, "bench")
    n = default_nodes(cfg, records)
    gen = cfg.gen_config()
    sched = dataclasses.replace(cfg.curriculum_schedule(), enabled=False)
    times = {"concrete": [], "bernoulli": [], "dg": []}
    counters = {}
    for k in range(cfg.bench_seeds):
        rng_seed = np.random.SeedSequence([cfg.seed, k])
        _, _, tr = generate_batch(teacher, n, cfg.m_graphs, 0, sched, gen, np.random.default_rng(rng_seed))
        times["concrete"].append(tr.wall_time)
        counters["concrete"] = (tr.forwards_per_iter, tr.noise_per_iter)
        _, _, tr = baselines.bernoulli_generate_batch(teacher, n, cfg.m_graphs, 0, sched, gen,
                                                      np.random.default_rng(rng_seed))
        times["bernoulli"].append(tr.wall_time)
        counters["bernoulli"] = (tr.forwards_per_iter, tr.noise_per_iter)
        _, tr = baselines.deep_inversion_graphs(teacher, n, cfg.m_graphs, gen, np.random.default_rng(rng_seed),
                                                return_trace=True)
        times["dg"].append(tr.wall_time)
        counters["dg"] = (tr.forwards_per_iter, tr.noise_per_iter)
    inst = baselines.bernoulli_params(np.random.default_rng(cfg.seed), 1, 4, teacher.spec.input_dim,
                                      teacher.spec.num_classes)
    conc, bern = baselines.variance_bench(teacher, inst, cfg.bench_repeats, seed=cfg.seed)
    variance = {"concrete": conc.gradient_variance, "bernoulli": bern.gradient_variance, "dg": float("nan")}
    rows = []
    for method in ("concrete", "bernoulli", "dg"):
        fw, noise = counters[method]
        for k, wall in enumerate(times[method]):
            rows.append({"method": method, "dataset": cfg.dataset, "teacher": teacher.spec.name,
                         "forwards_per_iter": fw, "noise_per_iter": noise, "wall_time_s": wall,
                         "grad_variance": variance[method], "accuracy_mean": float("nan"),
                         "accuracy_std": float("nan"), "seed": k})
        print(f"{method:10s} forwards/iter={fw:.0f} noise/iter={noise:.0f} "
              f"wall={np.mean(times[method]):.2f}s grad_var={variance[method]:.3g}")
    path = baselines.write_benchmark_csv(rows, out / "metrics" / "bench.csv")
    return {"csv": str(path), "times": times, "counters": counters, "variance": variance}


def _load_any(cfg: RunConfig):
    """Teacher model, or a student state when student_ckpt is given."""
    teacher = load_teacher(cfg)
    if not cfg.student_ckpt:
        return teacher
    try:
        return load_student(cfg.student_ckpt, teacher)
    except (OSError, CheckpointError, KeyError, ValueError) as exc:
        raise DataError(f"cannot load student checkpoint: {exc}") from exc


def cmd_eval(cfg: RunConfig) -> dict:
    model = _load_any(cfg)
    _, test, _ = load_split(cfg)
    acc = evaluate(model, test) if isinstance(model, DistillState) else accuracy(model, test)
    which = "student" if isinstance(model, DistillState) else "teacher"
    print(f"{which} test_acc={acc:.4f}")
    return {"test_acc": acc}


def cmd_export_embeddings(cfg: RunConfig) -> dict:
    model = _load_any(cfg)
    _, test, _ = load_split(cfg)
    out = run_dir(cfg, "export-embeddings")
    which = "student" if isinstance(model, DistillState) else "teacher"
    path = write_embeddings_csv(embeddings(model, test), test, out / "exports" / f"{which}_embeddings.csv")
    print(f"wrote {len(test)} {which} embeddings to {path}")
    return {"csv": str(path), "rows": len(test)}


HANDLERS = {"train-teacher": cmd_train_teacher, "generate": cmd_generate, "distill": cmd_distill,
            "bench": cmd_bench, "eval": cmd_eval, "export-embeddings": cmd_export_embeddings}


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="acgkd", description="Data-free graph knowledge distillation.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
        p.add_argument("--model", dest="alias_model", help="teacher spec (train-teacher) or student spec (distill)")
        p.add_argument("--checkpoint", dest="alias_checkpoint", help="teacher or student checkpoint")
        p.add_argument("--no-dt", dest="alias_no_dt", action="store_true", help="fixed temperature")
        p.add_argument("--no-cl", dest="alias_no_cl", action="store_true", help="no curriculum")
        p.add_argument("--no-cr", dest="alias_no_cr", action="store_true", help="student trains its own classifier")
        for key in _KEYS:
            flags = [f"--{key.replace('_', '-')}"] + ([f"--{key}"] if "_" in key else [])
            p.add_argument(*flags, dest=f"key_{key}", metavar="VALUE")
    return parser


def overrides_from_args(args) -> dict:
    out = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    for key in _KEYS:
        v = getattr(args, f"key_{key}")
        if v is not None:
            out[key] = v
    if args.alias_model:
        out["student" if args.command == "distill" else "teacher"] = args.alias_model
    if args.alias_checkpoint:
        if args.command in ("eval", "export-embeddings") and "teacher_ckpt" in out:
            out["student_ckpt"] = args.alias_checkpoint
        else:
            out["teacher_ckpt"] = args.alias_checkpoint
    if args.alias_no_dt:
        out["dt"] = "false"
    if args.alias_no_cl:
        out["cl"] = "false"
        out["curriculum"] = "false"
    if args.alias_no_cr:
        out["cr"] = "false"
    return out


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse signals usage errors with 2, which is the data-error code here
        return EXIT_CONFIG if exc.code == 2 else int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = load_config(args.config, overrides_from_args(args))
        HANDLERS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError, DataFormatError, StratificationError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, TrainingError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
