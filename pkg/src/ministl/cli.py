"""Command line entry point: ``ministl {gen-data,train,eval,bench,report}``.

Exit status: 0 success, 1 invalid config/arguments, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import config as C
from .core import ConfigError, ContractError, RegistryError, stable_hash

log = logging.getLogger("ministl")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ministl", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", required=True, help="YAML run configuration")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--device")
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--out", help="output root (default: config 'out' or ./runs)")
        sp.add_argument("--dry-run", action="store_true", help="validate and print the resolved plan only")
        sp.add_argument("-v", "--verbose", action="store_true")
        return sp

    g = common(sub.add_parser("gen-data", help="materialise dataset splits to the array container"))
    g.add_argument("--split", choices=("test", "train", "both"), default="test")
    common(sub.add_parser("train", help="train one model (or the lr x drop-path grid)"))
    e = common(sub.add_parser("eval", help="evaluate a checkpoint on the test split"))
    e.add_argument("--checkpoint")
    common(sub.add_parser("bench", help="train/evaluate a suite and write the report"))
    r = common(sub.add_parser("report", help="re-render report files from a report.json"))
    r.add_argument("--input")
    return p


def _print(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True, default=str))


def cmd_gen_data(args, cfg: C.ResolvedConfig) -> int:
    from .datagen import build_dataset, materialize

    splits = ("test", "train") if args.split == "both" else (args.split,)
    specs = []
    for split in splits:
        spec = cfg.train.dataset.replace(split=split)
        if split == "test":
            spec = cfg.train.test_spec()
        specs.append(spec)
    targets = [Path(cfg.out) / "data" / f"{s.variant}_{s.split}" for s in specs]
    if args.dry_run:
        _print({"datasets": [s.to_dict() for s in specs], "outputs": [f"{t}.npz" for t in targets]})
        return 0
    for spec, target in zip(specs, targets):
        meta = materialize(build_dataset(spec), target)
        print(f"wrote {target}.npz ({spec.count} sequences, sha256 {meta['content_hash'][:16]})")
    return 0


def cmd_train(args, cfg: C.ResolvedConfig) -> int:
    from .harness import grid_configs, train, train_grid

    if args.dry_run:
        plan = cfg.plan()
        if cfg.train.grid:
            plan["grid_runs"] = [{"lr": c.lr, "drop_path": c.drop_path, "hash": c.hash()}
                                 for c in grid_configs(cfg.train)]
        _print(plan)
        return 0
    if cfg.train.grid:
        best, records = train_grid(cfg.train, cfg.out)
        print(f"grid of {len(records)} runs; best lr={best.lr} drop_path={best.drop_path} -> {best.run_dir}")
        return 0
    rec = train(cfg.train, cfg.out, progress=args.verbose)
    print(f"run {rec.config_hash}: best checkpoint {rec.best_checkpoint} (val mse {rec.best_val_mse})")
    return 0


def cmd_eval(args, cfg: C.ResolvedConfig) -> int:
    from .datagen import PerturbedDataset, build_dataset
    from .harness import evaluate, report

    ev = cfg.raw.get("eval", {})
    ckpt = args.checkpoint or ev.get("checkpoint")
    if ckpt is None:
        ckpt = str(Path(cfg.out) / cfg.train.hash() / "checkpoints" / "best.npz")
    metrics = ev.get("metrics", ["quality", "params", "flops", "fps"])
    out = Path(args.out) / "eval" if args.out else Path(ckpt).parent.parent
    if args.dry_run:
        _print({"checkpoint": ckpt, "test_dataset": cfg.train.test_spec().to_dict(),
                "metrics": metrics, "out": str(out)})
        return 0
    if not Path(ckpt).exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    data = build_dataset(cfg.train.test_spec())
    if cfg.train.perturbation:
        data = PerturbedDataset(data, cfg.train.perturbation)
    fps_kwargs = {k: ev[f"fps_{k}"] for k in ("batch", "warmup", "repeats") if f"fps_{k}" in ev}
    rep = evaluate(ckpt, data, metrics, cfg.train.batch_size, cfg.train.device, fps_kwargs)
    (out).mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(json.dumps(rep.to_dict(), indent=2))
    row = {"model": Path(ckpt).stem, "category": "", "condition": "clean", "params_m": rep.params_m,
           "flops_g": rep.flops_g, "fps": rep.fps, "mse": rep.mse_paper, "mae": rep.mae_paper,
           "ssim": rep.ssim, "psnr": rep.psnr_db, "status": "ok"}
    report([row], out)
    _print(rep.to_dict())
    return 0


def cmd_bench(args, cfg: C.ResolvedConfig) -> int:
    from .harness import benchmark, report

    out = Path(cfg.out) / f"bench-{stable_hash(cfg.plan())[:12]}"
    if args.dry_run:
        plan = cfg.plan()
        plan["report_dir"] = str(out)
        _print(plan)
        return 0
    ev = cfg.raw.get("eval", {})
    fps_kwargs = {k: ev[f"fps_{k}"] for k in ("batch", "warmup", "repeats") if f"fps_{k}" in ev}
    samples = cfg.raw.get("report", {}).get("samples", 1)
    res = benchmark(cfg.suite, cfg.train, cfg.perturbations, cfg.out, fps_kwargs, num_samples=samples)
    files = report(res.rows, out, res.samples)
    print(f"wrote {len(files)} report files to {out}")
    return 2 if res.failed else 0


def cmd_report(args, cfg: C.ResolvedConfig) -> int:
    from .harness import report

    src = args.input or cfg.raw.get("report", {}).get("input")
    if src is None:
        raise ConfigError("report needs --input or report.input pointing at a report.json")
    out = Path(args.out) if args.out else Path(src).parent
    if args.dry_run:
        _print({"input": src, "out": str(out)})
        return 0
    rows = json.loads(Path(src).read_text())["rows"]
    for r in rows:
        for k, v in r.items():
            if v in ("inf", "-inf", "nan"):
                r[k] = float(v)
    files = report(rows, out)
    print(f"wrote {len(files)} report files to {out}")
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "bench": cmd_bench, "report": cmd_report}


def main(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = C.load(args.config, seed=args.seed, device=args.device, epochs=args.epochs, out=args.out)
    except (ConfigError, RegistryError, ContractError, TypeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
