"""
Command line: ingest, split, train, eval, macs, kernel-dump

Results go to files under ``--out`` and a short JSON summary to stdout; logs
and error diagnostics go to stderr.
"""

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, NoReturn, Optional, Sequence

import numpy as np

from hsi_rcnet import __version__
from hsi_rcnet.config import RCNetConfig
from hsi_rcnet.core.complexity import SWEEP_COLUMNS, macs_sweep, network_macs
from hsi_rcnet.core.kernel_dump import dump_kernels
from hsi_rcnet.core.metrics import metrics_report
from hsi_rcnet.core.model import NetworkConfig, build_network, macs_breakdown
from hsi_rcnet.core.training import OptimizerState, TrainConfig, Trainer, evaluate, predict
from hsi_rcnet.data.cache import PatchCache
from hsi_rcnet.data.checkpoint import load_checkpoint, load_side_state, save_checkpoint, save_side_state
from hsi_rcnet.data.hypercube import (
    HyperCube,
    Split,
    SplitSpec,
    extract_patch,
    ingest_triplet,
    load_hypercube,
    save_hypercube,
    split_train_test,
    standardize_bands,
)
from hsi_rcnet.errors import CheckpointError, ConfigError, PatchError, RCNetError, UsageError

logger = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.json"
NETWORK_FILE = "network.json"
SPLIT_FILE = "split.json"
LOG_FILE = "train_log.jsonl"
BEST_CKPT = "best.ckpt"
FINAL_CKPT = "final.ckpt"
OPTIMIZER_FILE = "optimizer.msgpack"
METRICS_FILE = "metrics.json"


@dataclass
class RunManifest:
    """Everything needed to replay a training run"""

    config: Dict[str, Any]
    seed: int
    dataset: str
    out_dir: str
    version: str = __version__
    split_file: Optional[str] = None
    extra: Dict[str, Any] = field(default_factory=dict)

    def save(self, path: Path) -> None:
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, path: Path) -> "RunManifest":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
            return cls(**data)
        except (OSError, json.JSONDecodeError, TypeError) as e:
            raise ConfigError(f"cannot read run manifest {path}: {e}")


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _load_config(args: argparse.Namespace) -> RCNetConfig:
    cfg = RCNetConfig.load(args.config) if args.config else RCNetConfig()
    if args.seed is not None:
        for key in ("train.seed", "split.seed"):
            cfg.set(key, args.seed)
    return cfg


def _apply_overrides(cfg: RCNetConfig, args: argparse.Namespace, mapping: Dict[str, str]) -> None:
    for attr, key in mapping.items():
        value = getattr(args, attr, None)
        if value is not None:
            cfg.set(key, value)


def _prepare_cube(path: str, cfg: RCNetConfig) -> HyperCube:
    cube = load_hypercube(path)
    return standardize_bands(cube) if cfg.get("data.standardize", True) else cube


def _emit(payload: Dict[str, Any]) -> None:
    sys.stdout.write(json.dumps(payload, sort_keys=True) + "\n")


def _out_dir(args: argparse.Namespace, default: Optional[str] = None) -> Path:
    target = args.out or default
    if target is None:
        raise ConfigError("--out is required")
    path = Path(target)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _read_log(path: Path) -> List[Dict[str, Any]]:
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_ingest(args: argparse.Namespace) -> int:
    if not args.out:
        raise ConfigError("--out <file.hsicube> is required")
    cube = ingest_triplet(args.dims, args.data, args.labels)
    save_hypercube(cube, args.out)
    # Round-trip check
    loaded = load_hypercube(args.out)
    _emit({"path": str(args.out), "h": loaded.height, "w": loaded.width, "s": loaded.bands, "k": loaded.num_classes})
    return 0


def _make_split(cube: HyperCube, cfg: RCNetConfig) -> Split:
    spec = SplitSpec.from_settings(cfg.get("split"), cube.num_classes)
    return split_train_test(cube, spec)


def cmd_split(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    _apply_overrides(cfg, args, {"protocol": "split.protocol", "train_per_class": "split.train_per_class"})
    cube = load_hypercube(args.cube)
    split = _make_split(cube, cfg)
    out = _out_dir(args)
    (out / SPLIT_FILE).write_text(json.dumps(split.to_dict()), encoding="utf-8")
    _emit({"split": str(out / SPLIT_FILE), "train": len(split.train), "test": len(split.test)})
    return 0


_TRAIN_OVERRIDES = {
    "epochs": "train.epochs",
    "batch_size": "train.batch_size",
    "lr": "train.base_lr",
    "weight_decay": "train.weight_decay",
    "warmup": "train.warmup_epochs",
    "lr_floor": "train.lr_floor",
    "workers": "train.workers",
    "patch_size": "train.patch_size",
}


def cmd_train(args: argparse.Namespace) -> int:
    if args.manifest:
        manifest = RunManifest.load(args.manifest)
        cfg = RCNetConfig(manifest.config)
        dataset = manifest.dataset
        split_file = manifest.split_file
        out = _out_dir(args, manifest.out_dir)
    else:
        if not args.cube:
            raise ConfigError("train needs --cube or --manifest")
        cfg = _load_config(args)
        _apply_overrides(cfg, args, _TRAIN_OVERRIDES)
        dataset = args.cube
        split_file = args.split
        out = _out_dir(args)

    cube = _prepare_cube(dataset, cfg)
    if args.reduced:
        cfg.set("network", NetworkConfig.reduced().to_settings())
    cfg.set("network.patch_size", cfg.get("train.patch_size"))
    cfg.set("network.bands", cube.bands)
    cfg.set("network.num_classes", cube.num_classes)
    net_cfg = NetworkConfig.from_settings(cfg.get("network"))
    train_cfg = TrainConfig.from_settings(cfg.get("train"))

    if split_file:
        split = Split.from_dict(json.loads(Path(split_file).read_text(encoding="utf-8")))
    else:
        split = _make_split(cube, cfg)
    (out / SPLIT_FILE).write_text(json.dumps(split.to_dict()), encoding="utf-8")

    net = build_network(net_cfg, seed=train_cfg.seed)
    net_cfg.save(out / NETWORK_FILE)

    start_epoch = 0
    optimizer_state = None
    prior_log: List[Dict[str, Any]] = []
    if args.resume:
        if not (out / FINAL_CKPT).exists() or not (out / OPTIMIZER_FILE).exists():
            raise CheckpointError(f"nothing to resume in {out}")
        net.load_state_dict(load_checkpoint(out / FINAL_CKPT))
        side = load_side_state(out / OPTIMIZER_FILE)
        optimizer_state = OptimizerState.from_dict(side)
        start_epoch = int(side.get("epoch", 0))
        prior_log = _read_log(out / LOG_FILE)[:start_epoch]
        logger.info(f"Resuming {out} at epoch {start_epoch}")

    cache = None
    if cfg.get("runtime.cache_enabled", True):
        cache = PatchCache(cube, train_cfg.patch_size, int(cfg.get("runtime.cache_size", 4096)))
    trainer = Trainer(net, cube, split.train, train_cfg, cache)
    best_prior = min((r["loss"] for r in prior_log), default=float("inf"))
    result = trainer.run(start_epoch, optimizer_state, best_loss=best_prior)

    if result.best_epoch is not None or not (out / BEST_CKPT).exists():
        save_checkpoint(out / BEST_CKPT, result.best_state)
    save_checkpoint(out / FINAL_CKPT, result.final_state)
    side_state = result.optimizer.to_dict()
    side_state["epoch"] = start_epoch + len(result.log)
    save_side_state(out / OPTIMIZER_FILE, side_state)
    with open(out / LOG_FILE, "w", encoding="utf-8") as f:
        for record in prior_log + [r.to_dict() for r in result.log]:
            f.write(json.dumps(record) + "\n")

    RunManifest(
        config=cfg.as_dict(),
        seed=train_cfg.seed,
        dataset=str(dataset),
        out_dir=str(out),
        split_file=str(out / SPLIT_FILE),
    ).save(out / MANIFEST_FILE)

    last = result.log[-1].to_dict() if result.log else None
    _emit({"out": str(out), "epochs_run": len(result.log), "best_epoch": result.best_epoch, "last": last})
    return 0


def _load_run(run_dir: Path, checkpoint: Optional[str]):
    manifest = RunManifest.load(run_dir / MANIFEST_FILE)
    cfg = RCNetConfig(manifest.config)
    net_cfg = NetworkConfig.load(run_dir / NETWORK_FILE)
    net = build_network(net_cfg, seed=manifest.seed)
    net.load_state_dict(load_checkpoint(Path(checkpoint) if checkpoint else run_dir / BEST_CKPT))
    return manifest, cfg, net


def cmd_eval(args: argparse.Namespace) -> int:
    run_dir = Path(args.run)
    manifest, cfg, net = _load_run(run_dir, args.checkpoint)
    cube = _prepare_cube(args.cube or manifest.dataset, cfg)
    split_path = Path(args.split) if args.split else run_dir / SPLIT_FILE
    split = Split.from_dict(json.loads(split_path.read_text(encoding="utf-8")))
    batch_size = int(cfg.get("runtime.eval_batch_size", 256))

    cm = evaluate(net, split.test, cube, batch_size)
    report = metrics_report(cm, cube.class_names)
    out = _out_dir(args, str(run_dir))
    (out / METRICS_FILE).write_text(json.dumps(report, indent=2), encoding="utf-8")

    if args.predict_map:
        grid = np.zeros((cube.height, cube.width), dtype=np.int64)
        if len(split.test):
            grid[split.test[:, 0], split.test[:, 1]] = predict(net, cube, split.test, batch_size)
        np.savetxt(args.predict_map, grid, fmt="%d", delimiter=",")
        logger.info(f"Wrote prediction map {args.predict_map}")

    _emit({"oa": report["oa"], "aa": report["aa"], "kappa": report["kappa"], "metrics": str(out / METRICS_FILE)})
    return 0


def _int_list(text: str) -> List[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def cmd_macs(args: argparse.Namespace) -> int:
    if args.breakdown:
        cfg = _load_config(args)
        net = build_network(NetworkConfig.from_settings(cfg.get("network")), seed=cfg.get("train.seed", 0))
        rows = macs_breakdown(net)
        _emit(
            {
                "layers": [r.to_dict() for r in rows],
                "table_macs": network_macs(rows),
                "total_macs": network_macs(rows, include_beyond=True),
                "params": net.param_count(),
            }
        )
        return 0

    rows = macs_sweep(_int_list(args.ns), _int_list(args.cs), _int_list(args.ks))
    stream = open(args.out, "w", encoding="utf-8", newline="") if args.out else sys.stdout
    try:
        writer = csv.DictWriter(stream, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    finally:
        if args.out:
            stream.close()
    return 0


def _parse_position(text: str) -> Sequence[int]:
    values = _int_list(text)
    if len(values) != 3:
        raise ConfigError(f"position must be 'row,col,band', got {text!r}")
    return values


def cmd_kernel_dump(args: argparse.Namespace) -> int:
    run_dir = Path(args.run)
    manifest, cfg, net = _load_run(run_dir, args.checkpoint)
    s, bands = net.cfg.patch_size, net.cfg.bands
    if args.random_patch:
        seed = manifest.seed if args.seed is None else args.seed
        patch = np.random.default_rng(seed).uniform(-1.0, 1.0, size=(s, s, bands))
    else:
        if args.row is None or args.col is None:
            raise PatchError("kernel-dump needs --row/--col or --random-patch")
        cube = _prepare_cube(args.cube or manifest.dataset, cfg)
        patch = extract_patch(cube, args.row, args.col, s).cube.data

    positions = [_parse_position(p) for p in args.position] if args.position else None
    dump = dump_kernels(net, patch, args.layer, positions)
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="") as f:
            dump.to_csv(f)
    else:
        dump.to_csv(sys.stdout)
    return 0


# ---------------------------------------------------------------------------
# Parser and entry point
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    """Raises UsageError instead of printing usage and exiting"""

    def error(self, message: str) -> NoReturn:
        raise UsageError(message, {"usage": self.format_usage().strip()})


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="seed for splits, initialisation and shuffling")
    common.add_argument("--config", default=None, help="JSON configuration file")
    common.add_argument("--out", default=None, help="output file or directory")
    common.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR")

    parser = _Parser(
        prog="hsi-rcnet", description="Relational convolution networks for hyperspectral classification"
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="convert a text triplet into an HSICUBE file")
    p.add_argument("--dims", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--labels", required=True)
    p.set_defaults(handler=cmd_ingest)

    p = sub.add_parser("split", parents=[common], help="draw a per-class train/test split")
    p.add_argument("--cube", required=True)
    p.add_argument("--protocol", choices=["uniform", "indian_pines", "pavia_university", "houston2013"])
    p.add_argument("--train-per-class", type=int)
    p.set_defaults(handler=cmd_split)

    p = sub.add_parser("train", parents=[common], help="train a network")
    p.add_argument("--cube")
    p.add_argument("--split", help="split JSON written by the split command")
    p.add_argument("--manifest", help="replay a run manifest")
    p.add_argument("--resume", action="store_true", help="continue from final.ckpt in --out")
    p.add_argument("--reduced", action="store_true", help="use the reduced network preset")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--warmup", type=int)
    p.add_argument("--lr-floor", type=float)
    p.add_argument("--workers", type=int)
    p.add_argument("--patch-size", type=int)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a trained run on its test pixels")
    p.add_argument("--run", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--cube")
    p.add_argument("--split")
    p.add_argument("--predict-map", help="CSV grid of predicted ids for test pixels")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("macs", parents=[common], help="analytic MACs sweep as CSV")
    p.add_argument("--ns", default="8,27,64,512,4096")
    p.add_argument("--cs", default="16,32,64")
    p.add_argument("--ks", default="3,5,7")
    p.add_argument("--breakdown", action="store_true", help="per-layer costs of the configured network")
    p.set_defaults(handler=cmd_macs)

    p = sub.add_parser("kernel-dump", parents=[common], help="dump aggregation kernels of one layer")
    p.add_argument("--run", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--cube")
    p.add_argument("--layer", required=True)
    p.add_argument("--row", type=int)
    p.add_argument("--col", type=int)
    p.add_argument("--random-patch", action="store_true")
    p.add_argument("--position", action="append", help="output location 'row,col,band' (repeatable)")
    p.set_defaults(handler=cmd_kernel_dump)
    return parser


def _configure_logging(args: argparse.Namespace) -> None:
    level = args.log_level
    if level is None and getattr(args, "config", None):
        try:
            level = RCNetConfig.load(args.config).get("logging.level")
        except ConfigError:
            level = None
    logging.basicConfig(
        stream=sys.stderr,
        level=getattr(logging, str(level or "INFO").upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def _report_error(record: Dict[str, Any]) -> None:
    sys.stderr.write(json.dumps(record, default=str) + "\n")


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        _report_error(e.to_dict())
        return 2
    _configure_logging(args)
    try:
        return args.handler(args)
    except RCNetError as e:
        logger.debug("Command failed", exc_info=True)
        _report_error(e.to_dict())
        return 2
    except Exception as e:
        logger.debug("Unexpected failure", exc_info=True)
        _report_error({"error": "internal_error", "message": str(e), "details": {"type": type(e).__name__}})
        return 1


if __name__ == "__main__":
    sys.exit(main())
