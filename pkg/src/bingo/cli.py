"""Pipeline driver: ``python -m bingo <subcommand>``.

Every stage reads a flat ``key = value`` config (``--config``) whose keys
can be overridden by flags of the same name. A JSON manifest describing
the invocation is written to the run directory (``--run-dir``, else
``$BINGO_RUN_DIR``, else ``./runs``) whether the stage succeeds or not.

Exit codes: 0 success, 2 usage error, 3 invalid input, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime as dt
import json
import logging
import os
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import bagging, metrics
from .dataio import (
    Dataset,
    EvalReport,
    FormatError,
    atomic_write,
    fingerprint,
    gen_blobs,
    load_bags,
    load_checkpoint,
    load_embeddings,
    load_idx,
    save_bags,
    save_checkpoint,
    save_embeddings,
    save_reports,
)
from .nets import DegenerateRowError
from .tensor import NonFiniteError
from .train import NumericError, TrainConfig, config_text, distill, pretrain_teacher

log = logging.getLogger("bingo")

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3, 4
SUBCOMMANDS = ("gen-data", "pretrain", "embed", "bag", "distill", "eval", "sweep")
EVAL_MODES = ("knn", "probe", "finetune", "bagdis", "icd")

_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}
_DEFAULTS = TrainConfig()
# short spellings used on the command line
_ALIASES = {"relation": "relation_source", "strategy": "bag_strategy", "k": "bag_param", "c": "bag_param",
            "lam": "lam_inter"}


class UsageError(Exception):
    pass


class _Formatter(argparse.ArgumentDefaultsHelpFormatter):
    def _get_help_string(self, action):
        if action.default is None or isinstance(action.default, bool):
            return action.help
        return super()._get_help_string(action)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _coerce(key, text):
    default = getattr(_DEFAULTS, key)
    try:
        if isinstance(default, tuple):
            return tuple(int(v) for v in str(text).split(",") if v.strip())
        if isinstance(default, bool):
            return str(text).lower() in ("1", "true", "yes")
        return type(default)(text)
    except ValueError:
        raise UsageError(f"config key {key}: cannot read {text!r} as {type(default).__name__}") from None


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        key = _ALIASES.get(key, key)
        if not sep or key not in _FIELDS:
            raise UsageError(f"{path}:{n}: unknown config line {raw!r}")
        out[key] = _coerce(key, value.strip())
    return out


def _add_config_keys(p):
    group = p.add_argument_group("config keys (override --config; mode is set by the subcommand)")
    for name in _FIELDS:
        if name == "mode":
            continue
        default = getattr(_DEFAULTS, name)
        shown = ",".join(map(str, default)) if isinstance(default, tuple) else default
        group.add_argument(f"--{name.replace('_', '-')}", dest=f"cfg_{name}", metavar="V",
                           help=f"default: {shown}")
    group.add_argument("--relation", dest="cfg_relation_source", metavar="V", help="alias of --relation-source")
    group.add_argument("--lam", dest="cfg_lam_inter", metavar="V", help="alias of --lam-inter")
    group.add_argument("--strategy", dest="cfg_bag_strategy", metavar="V", help="alias of --bag-strategy")
    group.add_argument("--k", "--c", dest="cfg_bag_param", metavar="V", help="alias of --bag-param (K or C)")


def _common(p):
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--run-dir", help="artifact root for manifests and metric streams (default: $BINGO_RUN_DIR or ./runs)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    _add_config_keys(p)


def _data_args(p, required=True):
    p.add_argument("--data", required=required, help="dataset directory from gen-data, or an IDX image file")
    p.add_argument("--labels", help="IDX label file paired with an IDX --data file")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bingo", description="Bag-based relational distillation pipeline.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    fmt = {"formatter_class": _Formatter}

    p = sub.add_parser("gen-data", help="synthesize Gaussian blobs", **fmt)
    p.add_argument("--n", type=int, default=5000, help="instances")
    p.add_argument("--dim", type=int, default=32, help="feature width")
    p.add_argument("--classes", type=int, default=10, help="number of blobs")
    p.add_argument("--class-sep", type=float, default=3.0, help="distance of blob centers from the origin")
    p.add_argument("--noise", type=float, default=1.0, help="isotropic noise std")
    p.add_argument("--val-fraction", type=float, default=0.2, help="held-out share per class")
    p.add_argument("--out", required=True, help="output dataset directory")
    _common(p)

    p = sub.add_parser("pretrain", help="contrastive pretraining of a teacher (or no-distill student)", **fmt)
    _data_args(p)
    p.add_argument("--arch", choices=("teacher", "student"), default="teacher", help="which hidden sizes to train")
    p.add_argument("--out", required=True, help="checkpoint path")
    _common(p)

    p = sub.add_parser("embed", help="embed a dataset with a checkpoint", **fmt)
    _data_args(p)
    p.add_argument("--ckpt", required=True, help="checkpoint to embed with")
    p.add_argument("--split", choices=("train", "val", "all"), default="train", help="rows to embed")
    p.add_argument("--out", required=True, help="embedding file")
    _common(p)

    p = sub.add_parser("bag", help="build bags from embeddings (knn, kmeans) or labels", **fmt)
    p.add_argument("--emb", help="embedding file (knn, kmeans)")
    _data_args(p, required=False)
    p.add_argument("--out", required=True, help="bag file")
    _common(p)

    p = sub.add_parser("distill", help="distill a student from a teacher checkpoint", **fmt)
    _data_args(p)
    p.add_argument("--teacher", help="teacher checkpoint")
    p.add_argument("--bags", help="bag file (required for relation_source=teacher)")
    p.add_argument("--out", required=True, help="student checkpoint path")
    _common(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint", **fmt)
    _data_args(p)
    p.add_argument("--ckpt", help="checkpoint (omit for a random-init fine-tuning baseline)")
    p.add_argument("--mode", choices=EVAL_MODES, default="knn", help="metric")
    p.add_argument("--knn-k", type=int, default=10, help="neighbors for knn accuracy")
    p.add_argument("--fraction", type=float, default=0.01, help="label fraction for finetune")
    p.add_argument("--bags", help="bag file for bagdis")
    p.add_argument("--out", help="report file (also printed)")
    _common(p)

    p = sub.add_parser("sweep", help="distill once per bag parameter value and report 10-NN accuracy", **fmt)
    _data_args(p)
    p.add_argument("--teacher", required=True, help="teacher checkpoint")
    p.add_argument("--param", choices=("k", "c"), required=True, help="k: knn bags, c: kmeans bags")
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--jobs", type=int, default=1, help="parallel runs (default serial)")
    p.add_argument("--out-dir", required=True, help="directory for bags, students and reports.txt")
    _common(p)
    return parser


def resolve_config(args) -> TrainConfig:
    values = {}
    if args.config:
        values.update(read_config_file(args.config))
    values.pop("mode", None)
    for name in _FIELDS:
        flag = getattr(args, f"cfg_{name}", None)
        if flag is not None:
            values[name] = _coerce(name, flag)
    if args.command == "pretrain":
        values["mode"] = "pretrain-teacher"
    elif args.command in ("distill", "sweep"):
        values["mode"] = "distill"
    return TrainConfig(**values)


def load_dataset(path, labels=None) -> Dataset:
    path = Path(path)
    if path.is_dir():
        X = np.load(path / "X.npy")
        y = np.load(path / "y.npy") if (path / "y.npy").exists() else None
        split = np.load(path / "split.npy") if (path / "split.npy").exists() else None
        return Dataset(X, y, split)
    return load_idx(path, labels)


def save_dataset(data: Dataset, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for name, arr in (("X", data.X), ("y", data.y), ("split", data.split)):
        if arr is not None:
            tmp = path / f".{name}.npy.tmp"
            with open(tmp, "wb") as fh:
                np.save(fh, arr, allow_pickle=False)
            os.replace(tmp, path / f"{name}.npy")


class MetricStream:
    """Writes ``step= lr= loss= loss_intra= loss_inter=`` lines to a file and stdout."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.fh = open(self.path, "w")

    def __call__(self, entry):
        line = (f"step={entry['step']} lr={entry['lr']!r} loss={entry['loss']!r} "
                f"loss_intra={entry['loss_intra']!r} loss_inter={entry['loss_inter']!r}")
        self.fh.write(line + "\n")
        self.fh.flush()
        print(line, flush=True)

    def close(self):
        self.fh.close()


def _run_dir(args) -> Path:
    return Path(args.run_dir or os.environ.get("BINGO_RUN_DIR") or "runs")


def _train_split(data: Dataset) -> Dataset:
    tr = data.train()
    if tr.n == 0:
        raise ValueError("dataset has no train rows")
    return tr


def _cmd_gen_data(args, config, outputs):
    data = gen_blobs(args.n, args.dim, args.classes, args.class_sep, args.noise, config.seed, args.val_fraction)
    save_dataset(data, args.out)
    outputs.append(args.out)


def _cmd_pretrain(args, config, outputs):
    data = _train_split(load_dataset(args.data, args.labels))
    stream = MetricStream(_run_dir(args) / f"{Path(args.out).name}.metrics")
    try:
        ckpt = pretrain_teacher(config, data, arch=args.arch, on_step=stream)
    finally:
        stream.close()
    save_checkpoint(ckpt, args.out)
    outputs += [args.out, str(stream.path)]


def _select(data: Dataset, split: str) -> Dataset:
    return data if split == "all" else data.subset(data.split == split)


def _cmd_embed(args, config, outputs):
    ckpt = load_checkpoint(args.ckpt)
    data = _select(load_dataset(args.data, args.labels), args.split)
    save_embeddings(bagging.extract_embeddings(ckpt.params, data.X, output=config.bag_features), args.out)
    outputs.append(args.out)


def _cmd_bag(args, config, outputs):
    if config.bag_strategy == "labels":
        if not args.data:
            raise UsageError("label bags need --data")
        data = _train_split(load_dataset(args.data, args.labels))
        if data.y is None:
            raise ValueError("label bags need a labeled dataset")
        bags = bagging.bag_labels(data.y)
    else:
        if not args.emb:
            raise UsageError(f"{config.bag_strategy} bags need --emb")
        emb, delta = load_embeddings(args.emb)
        log.info("embeddings renormalized, max delta %.3g", delta)
        if config.bag_strategy == "knn":
            bags = bagging.bag_knn(emb, config.bag_param)
        else:
            bags = bagging.bag_kmeans(emb, config.bag_param, seed=config.seed)[1]
    save_bags(bags, args.out)
    outputs.append(args.out)


def _cmd_distill(args, config, outputs):
    data = _train_split(load_dataset(args.data, args.labels))
    teacher = load_checkpoint(args.teacher) if args.teacher else None
    bags = load_bags(args.bags) if args.bags else None
    stream = MetricStream(_run_dir(args) / f"{Path(args.out).name}.metrics")
    try:
        ckpt = distill(config, teacher, bags, data, on_step=stream)
    finally:
        stream.close()
    save_checkpoint(ckpt, args.out)
    outputs += [args.out, str(stream.path)]


def evaluate_mode(mode, params, data: Dataset, config: TrainConfig, knn_k=10, fraction=0.01, bags=None):
    """Compute one metric; returns ``(value, n_train, n_test)``."""
    tr, va = data.train(), data.val()
    if mode in ("knn", "probe", "icd") and (va.n == 0 or va.y is None):
        raise ValueError(f"{mode} evaluation needs a labeled val split")
    if mode == "knn":
        value = metrics.knn_eval(bagging.extract_embeddings(params, tr.X), tr.y,
                                 bagging.extract_embeddings(params, va.X), va.y, knn_k)
        return value, tr.n, va.n
    if mode == "probe":
        value = metrics.linear_probe(bagging.extract_embeddings(params, tr.X), tr.y,
                                     bagging.extract_embeddings(params, va.X), va.y,
                                     metrics.ProbeConfig(seed=config.seed))
        return value, tr.n, va.n
    if mode == "finetune":
        spec = params.spec if params is not None else config.encoder_spec(data.input_dim, "student")
        value = metrics.finetune_fraction(params, data, fraction, metrics.FinetuneConfig(seed=config.seed), spec)
        return value, tr.n, va.n
    if mode == "bagdis":
        if bags is None:
            raise ValueError("bagdis needs --bags")
        return metrics.bag_distance(params, bags, tr.X), tr.n, 0
    if mode == "icd":
        return metrics.intra_class_distance(bagging.extract_embeddings(params, va.X), va.y), 0, va.n
    raise ValueError(f"unknown eval mode {mode!r}")


def _cmd_eval(args, config, outputs):
    data = load_dataset(args.data, args.labels)
    ckpt = load_checkpoint(args.ckpt) if args.ckpt else None
    if ckpt is None and args.mode != "finetune":
        raise UsageError(f"--mode {args.mode} needs --ckpt")
    bags = load_bags(args.bags) if args.bags else None
    params = ckpt.params if ckpt else None
    value, n_tr, n_te = evaluate_mode(args.mode, params, data, config, args.knn_k, args.fraction, bags)
    name = args.mode if args.mode != "finetune" else f"finetune@{args.fraction:g}"
    report = EvalReport(name, value, config.seed, ckpt.fingerprint if ckpt else fingerprint(config_text(config)),
                        n_tr, n_te)
    print(report.line(), flush=True)
    if args.out:
        save_reports([report], args.out)
        outputs.append(args.out)


def _sweep_one(job):
    param, value, config, teacher_path, data_path, labels, out_dir = job
    data = load_dataset(data_path, labels)
    tr = _train_split(data)
    teacher = load_checkpoint(teacher_path)
    emb = bagging.extract_embeddings(teacher.params, tr.X, output=config.bag_features)
    if param == "k":
        bags = bagging.bag_knn(emb, value)
        cfg = config.replace(bag_strategy="knn", bag_param=value)
    else:
        bags = bagging.bag_kmeans(emb, value, seed=config.seed)[1]
        cfg = config.replace(bag_strategy="kmeans", bag_param=value)
    out = Path(out_dir)
    save_bags(bags, out / f"bags-{param}{value}.tsv")
    ckpt = distill(cfg, teacher, bags, tr)
    save_checkpoint(ckpt, out / f"student-{param}{value}.ckpt")
    acc, n_tr, n_te = evaluate_mode("knn", ckpt.params, data, cfg)
    return EvalReport(f"knn@{param}={value}", acc, cfg.seed, ckpt.fingerprint, n_tr, n_te)


def _cmd_sweep(args, config, outputs):
    try:
        values = [int(v) for v in args.values.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--values must be comma-separated integers, got {args.values!r}") from None
    if not values:
        raise UsageError("--values is empty")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(args.param, v, config, args.teacher, args.data, args.labels, str(out)) for v in values]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            reports = list(pool.map(_sweep_one, jobs))
    else:
        reports = [_sweep_one(j) for j in jobs]
    for r in reports:
        print(r.line(), flush=True)
    save_reports(reports, out / "reports.txt")
    outputs.append(str(out / "reports.txt"))


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "pretrain": _cmd_pretrain,
    "embed": _cmd_embed,
    "bag": _cmd_bag,
    "distill": _cmd_distill,
    "eval": _cmd_eval,
    "sweep": _cmd_sweep,
}


def _now():
    return dt.datetime.now(dt.timezone.utc).isoformat()


def _write_manifest(run_dir: Path, manifest: dict):
    run_dir.mkdir(parents=True, exist_ok=True)
    stamp = manifest["start"].replace(":", "").replace("-", "").replace("+0000", "")
    path = run_dir / f"manifest-{manifest['subcommand']}-{stamp}-{os.getpid()}.json"
    atomic_write(path, (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())
    return path


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    manifest = {"subcommand": argv[0] if argv else None, "argv": argv, "start": _now(), "config": None,
                "inputs": {}, "outputs": [], "seed": None, "exit_status": None, "error": None}
    run_dir = Path(os.environ.get("BINGO_RUN_DIR") or "runs")
    code = EXIT_OK
    try:
        try:
            args = build_parser().parse_args(argv)
        except SystemExit as exc:  # --help
            code = int(exc.code or 0)
            return code
        run_dir = _run_dir(args)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        config = resolve_config(args)
        manifest["config"] = dict(line.split(" = ", 1) for line in config_text(config).splitlines())
        manifest["seed"] = config.seed
        manifest["inputs"] = {k: v for k, v in vars(args).items()
                              if not k.startswith("cfg_") and k not in ("command", "verbose") and v is not None}
        _COMMANDS[args.command](args, config, manifest["outputs"])
    except UsageError as exc:
        sys.stderr.write(f"{exc}\n")
        manifest["error"] = str(exc)
        code = EXIT_USAGE
    except (NumericError, NonFiniteError, FloatingPointError) as exc:
        sys.stderr.write(f"numeric failure: {exc}\n")
        manifest["error"] = str(exc)
        code = EXIT_NUMERIC
    except (FormatError, DegenerateRowError, ValueError, OSError) as exc:
        sys.stderr.write(f"invalid input: {exc}\n")
        log.debug("%s", traceback.format_exc())
        manifest["error"] = str(exc)
        code = EXIT_INPUT
    finally:
        manifest["end"] = _now()
        manifest["exit_status"] = code
        if code != EXIT_OK or manifest["config"] is not None:
            try:
                _write_manifest(run_dir, manifest)
            except OSError as exc:  # pragma: no cover
                sys.stderr.write(f"could not write manifest: {exc}\n")
    return code


if __name__ == "__main__":
    sys.exit(main())
