"""Command-line entry point: ``dvp <command> [options]``.

Commands and the artifacts they write under ``--out``::

    synth                 task directory (manifest.json, *_images.bin, *_labels.txt,
                          descriptions.txt, embeddings.emb, encoder.npz, factors.npy)
    partition cse|cls     partition.txt, partition_report.json
    train                 checkpoint.npz, history.csv, prm.csv, train.json
    eval                  eval.json
    risk                  risk.json
    diagnose hsic         hsic.csv, hsic.json, hsic.txt
    diagnose causes       causes.json, causes.txt
    diagnose clusters     clusters.json, clusters.txt
    rerun RUN_JSON        repeats the command recorded in a run.json

Every command also writes run.json with the resolved configuration.

Config files are flat ``key = value`` lines; ``#`` starts a comment and keys
are the long flag names with dashes or underscores. Precedence, lowest first:
built-in defaults, ``--profile``, the config file, explicit flags.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__, kernels
from .descriptions import (
    Partitioning,
    kmeans_partition,
    partition_by_cause,
    validate_partitioning,
)
from .diagnostics import (
    DEFAULT_GAMMA,
    cause_text,
    cause_weights,
    cluster_nearest_classes,
    cluster_text,
    hsic_text,
    pairwise_hsic,
    write_hsic_csv,
    write_json,
)
from .errors import ConfigError, DataError, DVPError, FormatError, UsageError
from .reprogram import PromptSet, export_prm_csv
from .synth import SynthSpec, generate_task, load_task, save_task
from .training import (
    METHODS,
    TrainConfig,
    empirical_risk,
    evaluate_accuracy,
    load_checkpoint,
    run_training,
    save_checkpoint,
    write_history_csv,
)

log = logging.getLogger("dvp")

TRAIN_KEYS = [f.name for f in fields(TrainConfig)]
SYNTH_KEYS = [f.name for f in fields(SynthSpec) if f.name != "seed"]

# hyper-parameters sized for the 24x24 synthetic tasks; see README
PROFILES = {
    "full": {},
    "desk": {"learning_rate": 0.1, "frame_width": 2, "tau": 0.05},
}

@dataclass
class RunConfig:
    command: str
    task: str | None = None
    out: str | None = None
    checkpoint: str | None = None
    partition_file: str | None = None
    mode: str | None = None  # partition strategy or diagnose report
    split: str = "test"
    tied: bool = False
    top_n: int = 3
    gamma: float = DEFAULT_GAMMA
    threads: int = 1
    profile: str = "full"
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: dict = field(default_factory=dict)

    def to_dict(self):
        d = asdict(self)
        d["train"] = asdict(self.train)
        return d


def _bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _none_or(conv):
    def f(text):
        return None if str(text).strip().lower() in ("none", "") else conv(text)
    return f


def _converters() -> dict:
    conv = {}
    for f in fields(TrainConfig):
        conv[f.name] = {"int": int, "float": float, "str": str}.get(str(f.type), str)
    conv["reweighting"] = _none_or(str)
    for f in fields(SynthSpec):
        t = str(f.type)
        conv.setdefault(f.name, {"int": int, "float": float, "bool": _bool}.get(t, str))
    conv.update({"top_n": int, "gamma": float, "threads": int, "tied": _bool, "split": str,
                 "task": str, "out": str, "checkpoint": str, "partition_file": str,
                 "profile": str})
    return conv


CONVERTERS = _converters()


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines into a dict of typed values."""
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config file {p}: {exc}") from exc
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        s = line.split("#", 1)[0].strip()
        if not s:
            continue
        if "=" not in s:
            raise UsageError(f"{p}:{lineno}: expected key = value, got {s!r}")
        key, value = (t.strip() for t in s.split("=", 1))
        key = key.replace("-", "_")
        if key not in CONVERTERS:
            raise UsageError(f"{p}:{lineno}: unknown key {key!r}")
        try:
            out[key] = CONVERTERS[key](value)
        except ValueError as exc:
            raise UsageError(f"{p}:{lineno}: bad value for {key}: {exc}") from exc
    return out


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add_train_flags(p):
    g = p.add_argument_group("training")
    g.add_argument("--method", choices=METHODS, default=None)
    g.add_argument("--epochs", type=int, default=None)
    g.add_argument("--learning-rate", "--lr", dest="learning_rate", type=float, default=None)
    g.add_argument("--momentum", type=float, default=None)
    g.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    g.add_argument("--k", type=int, default=None)
    g.add_argument("--v", type=int, default=None)
    g.add_argument("--tau", type=float, default=None)
    g.add_argument("--frame-width", dest="frame_width", type=int, default=None)
    g.add_argument("--reweighting", choices=("prm", "avg", "max"), default=None)


def _add_common(p):
    p.add_argument("--config", default=None, help="flat key = value file")
    p.add_argument("--profile", choices=sorted(PROFILES), default=None,
                   help="preset hyper-parameters: full (default) or desk")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None,
                   help="BLAS threads; 1 gives bit-reproducible runs (default 1)")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dvp", description=__doc__.split("\n\n")[0],
                     epilog=__doc__.split("\n\n", 1)[1],
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"dvp {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic task directory")
    _add_common(p)
    g = p.add_argument_group("generator")
    for f in fields(SynthSpec):
        if f.name == "seed":
            continue
        flag = "--" + f.name.replace("_", "-")
        conv = CONVERTERS[f.name]
        g.add_argument(flag, dest=f.name, type=conv, default=None)

    p = sub.add_parser("partition", help="split descriptions by cause or by K-means")
    p.add_argument("mode", choices=("cse", "cls"))
    p.add_argument("--task", default=None)
    p.add_argument("--v", type=int, default=None)
    _add_common(p)

    p = sub.add_parser("train", help="train prompts (and PRM) on a task")
    p.add_argument("--task", default=None)
    p.add_argument("--partition-file", dest="partition_file", default=None,
                   help="partition.txt from the partition command")
    _add_common(p)
    _add_train_flags(p)

    p = sub.add_parser("eval", help="accuracy of a checkpoint on a split")
    p.add_argument("--task", default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--split", choices=("train", "val", "test"), default=None)
    _add_common(p)

    p = sub.add_parser("risk", help="single-prompt and decoupled training risks")
    p.add_argument("--task", default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--tied", action="store_true", default=None,
                   help="copy prompt 0 into every slot before scoring")
    p.add_argument("--split", choices=("train", "val", "test"), default=None)
    _add_common(p)

    p = sub.add_parser("diagnose", help="post-hoc reports on a trained run")
    p.add_argument("mode", choices=("hsic", "causes", "clusters"))
    p.add_argument("--task", default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--partition-file", dest="partition_file", default=None)
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--top-n", dest="top_n", type=int, default=None)
    p.add_argument("--split", choices=("train", "val", "test"), default=None)
    _add_common(p)

    p = sub.add_parser("rerun", help="repeat the command recorded in a run.json")
    p.add_argument("run_json")
    p.add_argument("--out", default=None, help="output directory (default: the recorded one)")
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def parse_config(argv=None) -> RunConfig:
    """Resolve defaults, profile, config file and flags into a RunConfig."""
    ns = build_parser().parse_args(argv)
    if ns.command is None:
        raise UsageError("no command given; see dvp --help")
    if ns.command == "rerun":
        return _config_from_run(ns)
    flags = {k: v for k, v in vars(ns).items() if v is not None and k not in ("config", "verbose")}
    filed = read_config_file(ns.config) if ns.config else {}
    profile = flags.get("profile", filed.get("profile", "full"))
    merged = dict(PROFILES[profile])
    merged.update(filed)
    merged.update(flags)
    merged["profile"] = profile
    return _build(merged)


def _build(merged: dict) -> RunConfig:
    tk = {k: merged[k] for k in TRAIN_KEYS if k in merged}
    try:
        train = TrainConfig(**tk)
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc
    synth = {k: merged[k] for k in SYNTH_KEYS if k in merged}
    if "seed" in merged:
        synth["seed"] = merged["seed"]
    rc = RunConfig(
        command=merged["command"],
        task=merged.get("task"),
        out=merged.get("out"),
        checkpoint=merged.get("checkpoint"),
        partition_file=merged.get("partition_file"),
        mode=merged.get("mode"),
        split=merged.get("split", "test"),
        tied=bool(merged.get("tied", False)),
        top_n=merged.get("top_n", 3),
        gamma=merged.get("gamma", DEFAULT_GAMMA),
        threads=merged.get("threads", 1),
        profile=merged.get("profile", "full"),
        train=train,
        synth=synth,
    )
    _check_paths(rc)
    return rc


def _config_from_run(ns) -> RunConfig:
    try:
        rec = json.loads(Path(ns.run_json).read_text(encoding="utf-8"))
        cfg = rec["config"]
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot read run record {ns.run_json}: {exc}") from exc
    merged = {k: v for k, v in cfg.items() if k not in ("train", "synth")}
    merged.update(cfg.get("train", {}))
    merged.update(cfg.get("synth", {}))
    if ns.out is not None:
        merged["out"] = ns.out
    if ns.threads is not None:
        merged["threads"] = ns.threads
    return _build(merged)


def _check_paths(rc: RunConfig) -> None:
    need_task = rc.command in ("partition", "train", "eval", "risk", "diagnose")
    if need_task and not rc.task:
        raise UsageError(f"{rc.command} needs --task")
    if need_task and not Path(rc.task, "manifest.json").is_file():
        raise UsageError(f"--task {rc.task} is not a task directory (no manifest.json)")
    if rc.command in ("eval", "risk") or (rc.command == "diagnose" and rc.mode in ("hsic", "causes")):
        if rc.command != "risk" and not rc.checkpoint:
            raise UsageError(f"{rc.command} needs --checkpoint")
    if rc.checkpoint and not Path(rc.checkpoint).is_file():
        raise UsageError(f"checkpoint {rc.checkpoint} does not exist")
    if rc.partition_file and not Path(rc.partition_file).is_file():
        raise UsageError(f"partition file {rc.partition_file} does not exist")
    if rc.command == "synth" and not rc.out:
        raise UsageError("synth needs --out")
    if rc.threads < 1:
        raise UsageError("--threads must be at least 1")
    if rc.top_n < 1:
        raise UsageError("--top-n must be at least 1")


# ----------------------------------------------------------------- commands


def _out_dir(rc: RunConfig) -> Path:
    out = Path(rc.out or ".")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc}") from exc
    return out


def write_partition_file(part: Partitioning, dset, path) -> None:
    lines = [f"partitions {part.v} {part.provenance}"]
    lines += [f"{k} {part.assignment[k]}" for k in dset.ids]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_partition_file(path, dset) -> Partitioning:
    rows = [ln.split() for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not rows or rows[0][0] != "partitions" or len(rows[0]) != 3:
        raise FormatError(f"{path}: first line must be 'partitions <v> <provenance>'")
    v, prov = int(rows[0][1]), rows[0][2]
    assignment = {}
    for r in rows[1:]:
        if len(r) != 2:
            raise FormatError(f"{path}: bad line {' '.join(r)!r}")
        assignment[r[0]] = int(r[1])
    part = Partitioning(v, assignment, prov)
    validate_partitioning(dset, part)
    if prov == "cluster":
        lab = part.labels_for(dset)
        part.centers = np.stack([dset.embeddings[lab == i].mean(axis=0) if np.any(lab == i)
                                 else np.zeros(dset.embeddings.shape[1]) for i in range(v)])
    return part


def _partition_for(rc: RunConfig, task) -> Partitioning:
    dset = task.descriptions
    cfg = rc.train
    if rc.partition_file:
        return read_partition_file(rc.partition_file, dset)
    if cfg.method in ("vr-avg", "vr-max"):
        return Partitioning.single(dset)
    if cfg.method == "dvp-cls":
        return kmeans_partition(dset, cfg.v, seed=cfg.seed)
    if cfg.method == "dvplite":
        # bands go to partitions; descriptions still split by cause
        return partition_by_cause(dset, v=cfg.v)
    return partition_by_cause(dset, v=cfg.v)


def cmd_synth(rc: RunConfig) -> dict:
    spec = SynthSpec(**rc.synth)
    task = generate_task(spec)
    out = save_task(task, _out_dir(rc))
    from .synth import bayes_oracle_accuracy

    bayes = bayes_oracle_accuracy(task)
    print(f"wrote task to {out} (bayes oracle test accuracy {bayes:.4f})")
    return {"bayes_oracle_accuracy": bayes, "encoder_hash": task.encoder.param_hash()}


def cmd_partition(rc: RunConfig) -> dict:
    task = load_task(rc.task)
    dset = task.descriptions
    if rc.mode == "cse":
        part = partition_by_cause(dset, v=rc.train.v)
    else:
        part = kmeans_partition(dset, rc.train.v, seed=rc.train.seed)
    report = validate_partitioning(dset, part)
    out = _out_dir(rc)
    write_partition_file(part, dset, out / "partition.txt")
    rep = report.to_dict()
    rep["warnings"] = part.warnings
    rep["inertia_history"] = part.inertia_history
    (out / "partition_report.json").write_text(json.dumps(rep, indent=2) + "\n")
    print(f"{part.provenance} partition into {part.v}: sizes {report.partition_sizes}")
    if report.missing_pairs:
        print(f"classes absent from some partition: {report.missing_pairs}")
    return {"partition_sizes": report.partition_sizes}


def cmd_train(rc: RunConfig) -> dict:
    task = load_task(rc.task)
    part = _partition_for(rc, task)
    if part.v != rc.train.v and rc.train.method not in ("vr-avg", "vr-max"):
        log.info("using v=%d from the partition", part.v)
    state = run_training(task.train, task.descriptions, part, task.encoder, rc.train)
    out = _out_dir(rc)
    save_checkpoint(state, task.descriptions, out / "checkpoint.npz")
    write_history_csv(state.history, out / "history.csv")
    export_prm_csv(state.omega, task.descriptions, out / "prm.csv")
    last = state.history[-1]
    res = {"final": last, "prompt_parameters": state.prompts.num_parameters}
    (out / "train.json").write_text(json.dumps(res, indent=2) + "\n")
    print(f"trained {rc.train.method} for {rc.train.epochs} epochs: "
          f"risk {last['risk_dvp_integrated']:.6f}, train accuracy {last['accuracy']:.4f}")
    return res


def _split(task, name):
    return {"train": task.train, "val": task.val, "test": task.test}[name]


def cmd_eval(rc: RunConfig) -> dict:
    task = load_task(rc.task)
    state = load_checkpoint(rc.checkpoint, task.descriptions)
    acc = evaluate_accuracy(_split(task, rc.split), state, task.descriptions, task.encoder)
    out = _out_dir(rc)
    res = {"split": rc.split, "accuracy": acc, "method": state.config.method}
    (out / "eval.json").write_text(json.dumps(res, indent=2) + "\n")
    print(f"{rc.split} accuracy {acc:.4f}")
    return res


def cmd_risk(rc: RunConfig) -> dict:
    task = load_task(rc.task)
    dset = task.descriptions
    if rc.checkpoint:
        state = load_checkpoint(rc.checkpoint, dset)
    else:
        from .training import init_state

        state = init_state(rc.train, dset, _partition_for(rc, task), task.encoder)
    if rc.tied:
        state.prompts = PromptSet.tied(state.prompts[0], state.v)
    split = rc.split if rc.split else "train"
    rep = empirical_risk(_split(task, split), state, dset, task.encoder)
    out = _out_dir(rc)
    res = rep.to_dict()
    res.update({"split": split, "tied": rc.tied, "omega_kind": state.omega.kind})
    (out / "risk.json").write_text(json.dumps(res, indent=2) + "\n")
    print(f"risk_vr {rep.risk_vr!r}\nrisk_dvp_sum {rep.risk_dvp_sum!r}\n"
          f"risk_dvp_integrated {rep.risk_dvp_integrated!r}")
    return res


def cmd_diagnose(rc: RunConfig) -> dict:
    task = load_task(rc.task)
    dset = task.descriptions
    out = _out_dir(rc)
    if rc.mode == "hsic":
        state = load_checkpoint(rc.checkpoint, dset)
        rep = pairwise_hsic(_split(task, rc.split).images, state.prompts, task.encoder, rc.gamma)
        write_hsic_csv(rep, out / "hsic.csv")
        write_json(rep, out / "hsic.json")
        text = hsic_text(rep)
        (out / "hsic.txt").write_text(text)
    elif rc.mode == "causes":
        state = load_checkpoint(rc.checkpoint, dset)
        part = Partitioning(state.v, dict(zip(dset.ids, state.partition.tolist())), "cause")
        rep = cause_weights(state.omega, part, dset)
        write_json(rep, out / "causes.json")
        text = cause_text(rep)
        (out / "causes.txt").write_text(text)
    else:
        if rc.partition_file:
            part = read_partition_file(rc.partition_file, dset)
        else:
            part = kmeans_partition(dset, rc.train.v, seed=rc.train.seed)
        rep = cluster_nearest_classes(part, dset, rc.top_n)
        write_json(rep, out / "clusters.json")
        text = cluster_text(rep)
        (out / "clusters.txt").write_text(text)
    print(text, end="")
    return rep.to_dict()


HANDLERS = {"synth": cmd_synth, "partition": cmd_partition, "train": cmd_train,
            "eval": cmd_eval, "risk": cmd_risk, "diagnose": cmd_diagnose}


def run(rc: RunConfig) -> dict:
    """Execute one resolved command and record run.json next to its artifacts."""
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=rc.threads):
        result = HANDLERS[rc.command](rc)
    record = {
        "dvp_version": __version__,
        "numpy_version": np.__version__,
        "kernel_backend": kernels.BACKEND,
        "config": rc.to_dict(),
        "seeds": _seeds(rc),
        "result": result,
    }
    (_out_dir(rc) / "run.json").write_text(json.dumps(record, indent=2, default=_jsonable) + "\n")
    return result


def _seeds(rc: RunConfig) -> dict:
    if rc.command == "synth":
        return {"synth": rc.synth.get("seed", 0)}
    seeds = {"train": rc.train.seed}
    try:
        seeds["task"] = json.loads(Path(rc.task, "manifest.json").read_text())["spec"]["seed"]
    except (OSError, ValueError, KeyError, TypeError):
        pass
    return seeds


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"{type(o).__name__} is not JSON serializable")


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    logging.basicConfig(level=logging.INFO if ("-v" in argv or "--verbose" in argv)
                        else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        rc = parse_config(argv)
        if rc.command == "rerun":
            raise UsageError("run record names no command")
        run(rc)
    except DVPError as exc:
        print(f"dvp: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"dvp: error: {exc}", file=sys.stderr)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
