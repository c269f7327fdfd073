"""Command-line entry point: generate data, train, evaluate, and run the sweeps.

Every command writes ``run_manifest.json`` next to its outputs. The manifest
holds the fully resolved configuration, the seeds, absolute paths and content
hashes of inputs and outputs, and ``temporal-mp rerun MANIFEST`` replays the
command and checks the outputs are byte-identical. Wall-clock timings go to a
separate ``timings.json`` so they never disturb that comparison.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import synthgen
from .errors import ConfigError, ParseError
from .graph import (MANIFEST_NAME, DatasetSchema, TransactionGraph, load_dataset, normalize_features, parse_key_values,
                    temporal_split, write_dataset)
from .metrics import EvalReport
from .model import BACKENDS, MODES, REDUCERS, ModelConfig, fit_pna_delta, fit_time_scale
from .training import TrainConfig, evaluate_split, load_checkpoint, prepare, save_checkpoint, train, write_trace

log = logging.getLogger("temporal_mp")

RUN_MANIFEST = "run_manifest.json"
TIMINGS = "timings.json"


class UsageError(Exception):
    """Bad flags, config or missing inputs: exit code 2."""


class ReproductionError(Exception):
    """A rerun produced different bytes: exit code 1."""


# ---------------------------------------------------------------------------
# options: one table drives argparse, config files and defaults
# ---------------------------------------------------------------------------

def _on_off(text) -> bool:
    if isinstance(text, bool):
        return text
    v = str(text).strip().lower()
    if v in ("on", "true", "1", "yes"):
        return True
    if v in ("off", "false", "0", "no"):
        return False
    raise ValueError(f"expected on|off, got {text!r}")


def _fanout_list(text) -> list[list[int]]:
    if isinstance(text, list):
        return [[int(a), int(b)] for a, b in text]
    out = []
    for item in str(text).split(","):
        a, sep, b = item.strip().partition("/")
        if not sep:
            raise ValueError(f"fanout pairs look like 5/5, got {item!r}")
        out.append([int(a), int(b)])
    if not out:
        raise ValueError("empty fanout list")
    return out


def _name_list(text) -> list[str]:
    if isinstance(text, list):
        return [str(t) for t in text]
    return [t.strip() for t in str(text).split(",") if t.strip()]


@dataclass(frozen=True)
class Opt:
    name: str
    kind: object
    default: object
    help: str
    choices: tuple | None = None


_DATA = Opt("data", str, None, "dataset directory (or its manifest file)")
_OUT = Opt("out", str, None, "output directory")
_SEED = Opt("seed", int, 0, "rng seed")

_MODEL_OPTS = [
    Opt("task", str, None, "node or edge; defaults to the dataset's labels", ("node", "edge")),
    Opt("mode", str, "with_agg", "parallel-edge handling", MODES),
    Opt("backend", str, "gin", "aggregation backend", BACKENDS),
    Opt("timestamp_reducer", str, "max", "reducer for a pair's effective timestamp", REDUCERS),
    Opt("temporal", _on_off, True, "temporal weighting on|off"),
    Opt("layers", int, 2, "message-passing layers"),
    Opt("hidden", int, 64, "hidden width"),
    Opt("tau", float, 5.0, "softmax sharpness over one typical neighbourhood time span"),
    Opt("fanout1", int, 100, "first-hop neighbour cap"),
    Opt("fanout2", int, 100, "second-hop neighbour cap"),
    _SEED,
    Opt("lr", float, 1e-3, "Adam learning rate"),
    Opt("weight_decay", float, 1e-5, "L2 strength"),
    Opt("batch_size", int, 128, "seed items per minibatch"),
    Opt("max_epochs", int, 100, "epoch cap"),
    Opt("patience", int, 10, "early-stopping patience"),
    Opt("class_weights", _on_off, False, "inverse-frequency class weights on|off"),
    Opt("eval_batch_size", int, 512, "items per evaluation chunk"),
    Opt("eval_seed", int, 12345, "sampling seed for evaluation"),
]

_GEN_OPTS = [
    _OUT,
    _SEED,
    Opt("num_nodes", int, 2000, "accounts"),
    Opt("edges_per_node", float, 10.0, "target E/N"),
    Opt("horizon_days", float, 90.0, "time horizon in days"),
    Opt("illicit_ratio", float, 0.02, "target illicit edge ratio"),
    Opt("motifs", _name_list, list(synthgen.MOTIFS), "comma-separated motif shapes"),
    Opt("burst_hours", float, 6.0, "burst window width in hours"),
    Opt("intensity", float, 1.5, "target mean transactions per motif pair"),
    Opt("decoy_ratio", float, 3.0, "routine look-alike motifs per laundering motif"),
    Opt("noise_dims", int, 0, "extra pure-noise node feature columns"),
    Opt("task", str, "edge", "label edges or nodes", ("node", "edge")),
]

COMMAND_OPTS: dict[str, list[Opt]] = {
    "generate": _GEN_OPTS,
    "train": [_DATA, _OUT, *_MODEL_OPTS],
    "evaluate": [Opt("checkpoint", str, None, "checkpoint written by train"), _DATA, _OUT,
                 Opt("split", str, "test", "which temporal split", ("train", "val", "test"))],
    "ablate-timestamps": [_DATA, _OUT, *_MODEL_OPTS,
                          Opt("reducers", _name_list, list(REDUCERS), "comma-separated reducers"),
                          Opt("jobs", int, 1, "parallel worker processes")],
    "fanout-sweep": [_DATA, _OUT, *_MODEL_OPTS,
                     Opt("fanouts", _fanout_list, [[5, 5], [20, 20], [50, 50], [100, 100]],
                         "comma-separated f1/f2 pairs"),
                     Opt("jobs", int, 1, "parallel worker processes")],
}
REQUIRED = {"generate": ("out",), "train": ("data", "out"), "evaluate": ("checkpoint", "data", "out"),
            "ablate-timestamps": ("data", "out"), "fanout-sweep": ("data", "out")}


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="temporal-mp", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for command, opts in COMMAND_OPTS.items():
        p = sub.add_parser(command, argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="key=value file; flags win on conflict")
        for o in opts:
            p.add_argument(_flag(o.name), dest=o.name, type=o.kind, choices=o.choices,
                           help=f"{o.help} (default: {o.default})" if o.default is not None else o.help)
    rerun = sub.add_parser("rerun", help="replay a run manifest and check outputs are identical")
    rerun.add_argument("manifest")
    rerun.add_argument("--out", help="write the replay here instead of the original directory")
    return parser


def resolve_config(command: str, flags: dict, config_text: str | None = None) -> dict:
    """Defaults, then config-file values, then explicit flags."""
    opts = {o.name: o for o in COMMAND_OPTS[command]}
    cfg = {name: o.default for name, o in opts.items()}
    if config_text is not None:
        for key, raw in parse_key_values(config_text).items():
            name = key.replace("-", "_")
            if name not in opts:
                raise UsageError(f"unknown config key {key!r} for {command}")
            o = opts[name]
            try:
                value = o.kind(raw)
            except ValueError as exc:
                raise UsageError(f"config key {key}: {exc}") from None
            if o.choices and value not in o.choices:
                raise UsageError(f"config key {key} must be one of {o.choices}, got {value!r}")
            cfg[name] = value
    cfg.update({k: v for k, v in flags.items() if k in opts})
    missing = [_flag(k) for k in REQUIRED[command] if cfg.get(k) is None]
    if missing:
        raise UsageError(f"{command} needs {', '.join(missing)}")
    for key in ("data", "out", "checkpoint"):
        if cfg.get(key) is not None:
            cfg[key] = str(Path(cfg[key]).resolve())
    return cfg


# ---------------------------------------------------------------------------
# hashing and manifests
# ---------------------------------------------------------------------------

def blob_hash(data: bytes) -> str:
    """Git-style object hash (sha256 over ``blob <len>\\0<data>``)."""
    return hashlib.sha256(b"blob %d\0" % len(data) + data).hexdigest()


def file_hash(path) -> str:
    return blob_hash(Path(path).read_bytes())


def tree_hash(entries: dict[str, str]) -> str:
    body = "".join(f"{name}\0{digest}\n" for name, digest in sorted(entries.items())).encode()
    return hashlib.sha256(b"tree %d\0" % len(body) + body).hexdigest()


def dataset_files(path) -> dict[str, Path]:
    path = Path(path)
    manifest = path / MANIFEST_NAME if path.is_dir() else path
    if not manifest.is_file():
        raise UsageError(f"no dataset at {path}")
    schema = DatasetSchema.from_manifest(manifest.read_text())
    files = {manifest.name: manifest, schema.edge_file: manifest.parent / schema.edge_file}
    if schema.node_file:
        files[schema.node_file] = manifest.parent / schema.node_file
    return files


@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: dict
    inputs: dict = field(default_factory=dict)     # role -> {"path", "sha256"}
    outputs: dict = field(default_factory=dict)    # file name -> sha256
    input_hash: str = ""
    version: str = __version__

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> RunManifest:
        return cls(**json.loads(text))

    @classmethod
    def load(cls, path) -> RunManifest:
        return cls.from_json(Path(path).read_text())


def _input_entries(cfg: dict) -> dict:
    entries = {}
    if cfg.get("data"):
        for name, p in dataset_files(cfg["data"]).items():
            entries[f"data/{name}"] = {"path": str(p), "sha256": file_hash(p)}
    if cfg.get("checkpoint"):
        entries["checkpoint"] = {"path": cfg["checkpoint"], "sha256": file_hash(cfg["checkpoint"])}
    return entries


def _write_manifest(command: str, cfg: dict, seeds: dict, inputs: dict, out: Path, produced: list[str]) -> RunManifest:
    rm = RunManifest(
        command=command, config=cfg, seeds=seeds, inputs=inputs,
        outputs={name: file_hash(out / name) for name in sorted(produced)},
        input_hash=tree_hash({k: v["sha256"] for k, v in inputs.items()}),
    )
    (out / RUN_MANIFEST).write_text(rm.to_json())
    return rm


def _write_timings(out: Path, timings: dict) -> None:
    (out / TIMINGS).write_text(json.dumps(timings, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# shared pipeline pieces
# ---------------------------------------------------------------------------

def _load_data(cfg: dict) -> tuple[TransactionGraph, DatasetSchema]:
    path = Path(cfg["data"])
    if not (path / MANIFEST_NAME if path.is_dir() else path).exists():
        raise UsageError(f"no dataset at {path}")
    g, schema = load_dataset(path)
    task = cfg.get("task")
    if task is not None and task != schema.task:
        raise UsageError(f"--task {task} but {path} carries {schema.task} labels")
    return g, schema


def _configs(cfg: dict, g: TransactionGraph, splits, reducer: str, fanout: tuple[int, int]) -> tuple[ModelConfig, TrainConfig]:
    mode = cfg["mode"]
    if splits.level == "edge":
        nodes = np.zeros(g.num_nodes, bool)
        nodes[g.src[splits.train]] = True
        nodes[g.dst[splits.train]] = True
    else:
        nodes = splits.train
    mcfg = ModelConfig(
        node_in=g.node_features.shape[1], edge_in=g.edge_features.shape[1], layers=cfg["layers"],
        hidden=cfg["hidden"], mode=mode, backend=cfg["backend"], timestamp_reducer=reducer,
        temporal=cfg["temporal"], task=g.task, tau=cfg["tau"],
        time_scale=fit_time_scale(g, reducer, mode), pna_delta=fit_pna_delta(g, nodes, mode),
    )
    tcfg = TrainConfig(
        lr=cfg["lr"], weight_decay=cfg["weight_decay"], batch_size=cfg["batch_size"],
        max_epochs=cfg["max_epochs"], patience=cfg["patience"], class_weights=cfg["class_weights"],
        seed=cfg["seed"], fanout1=fanout[0], fanout2=fanout[1],
        eval_batch_size=cfg["eval_batch_size"], eval_seed=cfg["eval_seed"],
    )
    return mcfg, tcfg


def _check_width(g: TransactionGraph) -> None:
    if g.node_features.shape[1] == 0 or g.edge_features.shape[1] == 0:
        raise UsageError("datasets need at least one node and one edge feature column")


def train_and_test(g: TransactionGraph, splits, mcfg: ModelConfig, tcfg: TrainConfig) -> tuple[EvalReport, float]:
    """Train on normalised ``g``; test-split report of the best checkpoint, and wall seconds."""
    t0 = time.perf_counter()
    ckpt, _ = train(g, splits, mcfg, tcfg)
    report = evaluate_split(g, splits.test, ckpt.model_params(), mcfg, tcfg)
    return report, time.perf_counter() - t0


def _run_grid(jobs: list[tuple], n_workers: int) -> list[tuple[EvalReport, float]]:
    if n_workers < 1:
        raise UsageError("--jobs must be >= 1")
    if n_workers == 1 or len(jobs) == 1:
        return [train_and_test(*job) for job in jobs]
    with ProcessPoolExecutor(max_workers=n_workers) as pool:
        return list(pool.map(_star_train_and_test, jobs))


def _star_train_and_test(job):
    return train_and_test(*job)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def gen_spec_from(cfg: dict) -> synthgen.GenSpec:
    unknown = [m for m in cfg["motifs"] if m not in synthgen.MOTIFS]
    if unknown:
        raise UsageError(f"unknown motifs {unknown}; choose from {synthgen.MOTIFS}")
    return synthgen.GenSpec(
        num_nodes=cfg["num_nodes"], edges_per_node=cfg["edges_per_node"],
        horizon=cfg["horizon_days"] * synthgen.DAY, illicit_ratio=cfg["illicit_ratio"],
        motif_mix={m: 1.0 for m in cfg["motifs"]}, burst_window=cfg["burst_hours"] * 3600.0,
        intensity=cfg["intensity"], decoy_ratio=cfg["decoy_ratio"], noise_dims=cfg["noise_dims"],
        task=cfg["task"], seed=cfg["seed"],
    )


def cmd_generate(cfg: dict) -> RunManifest:
    spec = gen_spec_from(cfg)
    out = Path(cfg["out"])
    g = synthgen.generate(spec)
    schema = write_dataset(g, out, log_features=("amount",))
    (out / "genspec.json").write_text(synthgen.spec_manifest(spec))
    s = synthgen.stats(g)
    print(f"wrote {s['nodes']} nodes, {s['edges']} edges, illicit ratio {s['illicit_ratio']:.4f} to {out}")
    produced = [MANIFEST_NAME, schema.edge_file, schema.node_file, "genspec.json"]
    return _write_manifest("generate", cfg, {"generate": spec.seed}, {}, out, produced)


def cmd_train(cfg: dict) -> RunManifest:
    inputs = _input_entries(cfg)
    g, schema = _load_data(cfg)
    _check_width(g)
    splits = temporal_split(g)
    for w in splits.warnings:
        log.warning(w)
    gn, stats = prepare(g, splits, schema.log_features)
    mcfg, tcfg = _configs(cfg, g, splits, cfg["timestamp_reducer"], (cfg["fanout1"], cfg["fanout2"]))
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    ckpt, trace = train(gn, splits, mcfg, tcfg)
    seconds = time.perf_counter() - t0
    ckpt.stats = stats
    save_checkpoint(ckpt, out / "checkpoint.npz")
    write_trace(trace, out / "trace.csv")
    report = evaluate_split(gn, splits.val, ckpt.model_params(), mcfg, tcfg)
    metrics = {"best_epoch": ckpt.epoch, "epochs_run": len(trace), "split": "val", **report.to_dict()}
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    print(f"best epoch {ckpt.epoch} of {len(trace)}: val f1_min {report.f1_min:.4f} "
          f"macro_f1 {report.macro_f1:.4f} pr_auc {report.pr_auc:.4f}")
    _write_timings(out, {"train_seconds": seconds})
    seeds = {"init": tcfg.seed, "sampling": tcfg.seed, "eval": tcfg.eval_seed}
    return _write_manifest("train", cfg, seeds, inputs, out, ["checkpoint.npz", "trace.csv", "metrics.json"])


def cmd_evaluate(cfg: dict) -> RunManifest:
    if not Path(cfg["checkpoint"]).is_file():
        raise UsageError(f"checkpoint {cfg['checkpoint']} not found")
    inputs = _input_entries(cfg)
    ckpt = load_checkpoint(cfg["checkpoint"])
    g, _ = _load_data({**cfg, "task": ckpt.model_config.task})
    if ckpt.stats is None:
        raise UsageError("checkpoint carries no feature statistics")
    gn = normalize_features(g, ckpt.stats)
    splits = temporal_split(g)
    report = evaluate_split(gn, splits.mask(cfg["split"]), ckpt.model_params(), ckpt.model_config, ckpt.train_config)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json() + "\n")
    (out / "report.csv").write_text("split," + EvalReport.csv_header() + "\n" + f"{cfg['split']}," + report.csv_row() + "\n")
    print(f"{cfg['split']}: " + report.to_json())
    seeds = {"eval": ckpt.train_config.eval_seed}
    return _write_manifest("evaluate", cfg, seeds, inputs, out, ["report.json", "report.csv"])


def _grid_command(cfg: dict, command: str, rows: list[dict], header: str, table: str) -> RunManifest:
    inputs = _input_entries(cfg)
    g, schema = _load_data(cfg)
    _check_width(g)
    splits = temporal_split(g)
    gn, _ = prepare(g, splits, schema.log_features)
    jobs = []
    for row in rows:
        mcfg, tcfg = _configs(cfg, g, splits, row["reducer"], (row["fanout1"], row["fanout2"]))
        jobs.append((gn, splits, mcfg, tcfg))
    results = _run_grid(jobs, cfg["jobs"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    keys = header.split(",")
    lines = [header]
    for row, (report, _) in zip(rows, results):
        values = {**row, **report.to_dict()}
        lines.append(",".join(repr(values[k]) if isinstance(values[k], float) else str(values[k]) for k in keys))
    (out / table).write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    _write_timings(out, {"rows": [{**row, "seconds": sec} for row, (_, sec) in zip(rows, results)]})
    return _write_manifest(command, cfg, {"init": cfg["seed"], "sampling": cfg["seed"], "eval": cfg["eval_seed"]},
                           inputs, out, [table])


def cmd_ablate_timestamps(cfg: dict) -> RunManifest:
    bad = [r for r in cfg["reducers"] if r not in REDUCERS]
    if bad:
        raise UsageError(f"unknown reducers {bad}; choose from {REDUCERS}")
    rows = [{"reducer": r, "fanout1": cfg["fanout1"], "fanout2": cfg["fanout2"]} for r in cfg["reducers"]]
    rm = _grid_command(cfg, "ablate-timestamps", rows, "reducer,f1_min,macro_f1,pr_auc", "ablation.csv")
    table = (Path(cfg["out"]) / "ablation.csv").read_text().splitlines()[1:]
    scores = {line.split(",")[0]: float(line.split(",")[1]) for line in table}
    low = min(scores.values())
    worst = [r for r, v in scores.items() if v == low]
    print(f"lowest f1_min: {', '.join(worst)}" + (" (sum is the worst here)" if worst == ["sum"] else ""))
    return rm


def cmd_fanout_sweep(cfg: dict) -> RunManifest:
    if any(a < 1 or b < 1 for a, b in cfg["fanouts"]):
        raise UsageError("fanouts must be >= 1")
    rows = [{"reducer": cfg["timestamp_reducer"], "fanout1": a, "fanout2": b} for a, b in cfg["fanouts"]]
    return _grid_command(cfg, "fanout-sweep", rows, "fanout1,fanout2,f1_min,macro_f1,pr_auc", "fanout_sweep.csv")


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "ablate-timestamps": cmd_ablate_timestamps,
    "fanout-sweep": cmd_fanout_sweep,
}


def run(command: str, cfg: dict) -> RunManifest:
    return COMMANDS[command](cfg)


def cmd_rerun(manifest_path: str, out: str | None = None) -> RunManifest:
    path = Path(manifest_path)
    if not path.is_file():
        raise UsageError(f"run manifest {path} not found")
    old = RunManifest.load(path)
    if old.command not in COMMANDS:
        raise UsageError(f"manifest names unknown command {old.command!r}")
    cfg = dict(old.config)
    if out is not None:
        cfg["out"] = str(Path(out).resolve())
    for role, entry in old.inputs.items():
        if not Path(entry["path"]).exists():
            raise UsageError(f"input {role} missing at {entry['path']}")
        if file_hash(entry["path"]) != entry["sha256"]:
            raise ReproductionError(f"input {role} changed since the original run")
    new = run(old.command, cfg)
    diff = sorted(k for k in set(old.outputs) | set(new.outputs) if old.outputs.get(k) != new.outputs.get(k))
    if diff:
        raise ReproductionError(f"outputs differ from the manifest: {', '.join(diff)}")
    print(f"reproduced {len(new.outputs)} output(s) bit-identically")
    return new


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "rerun":
            cmd_rerun(args.manifest, args.out)
            return 0
        flags = {k: v for k, v in vars(args).items() if k not in ("command", "verbose", "config")}
        config_text = None
        if getattr(args, "config", None):
            cpath = Path(args.config)
            if not cpath.is_file():
                raise UsageError(f"config file {cpath} not found")
            config_text = cpath.read_text()
        run(args.command, resolve_config(args.command, flags, config_text))
        return 0
    except (UsageError, ConfigError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
