"""Training, evaluation, benchmarking and report writing."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import os
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
import yaml

from . import metrics as M
from .core import (DROP_PATH_GRID, LR_GRID, ConfigError, ContractError, ModelConfig, SeedSpec,
                   build_model, derive_rng, from_uint8, registry_entry, resolve_config, stable_hash,
                   torch_seed)
from .datagen import (ArrayDataset, DatasetSpec, PerturbationSpec, PerturbedDataset, build_dataset)
from .models import load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

TABLE_COLUMNS = ("model", "category", "condition", "params_m", "flops_g", "fps",
                 "mse", "mae", "ssim", "psnr", "status")


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Configs and records
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    model_name: str = "metavp-gated_attention"
    model: ModelConfig = field(default_factory=ModelConfig)
    dataset: DatasetSpec = field(default_factory=lambda: DatasetSpec(split="train"))
    test_count: int = 1000
    perturbation: Optional[PerturbationSpec] = None
    lr: float = 1e-3
    drop_path: float = 0.0
    epochs: int = 200
    batch_size: int = 16
    val_fraction: float = 0.05
    seed: SeedSpec = field(default_factory=SeedSpec)
    device: str = "cpu"
    grid: bool = False

    def __post_init__(self):
        if self.grid:
            if self.lr not in LR_GRID:
                raise ConfigError(f"lr {self.lr} not in grid {LR_GRID}")
            if self.drop_path not in DROP_PATH_GRID:
                raise ConfigError(f"drop_path {self.drop_path} not in grid {DROP_PATH_GRID}")
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("epochs >= 0, batch_size >= 1 and lr > 0 required")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in [0, 1)")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def resolved_model(self) -> ModelConfig:
        """Model config with the dataset's frame shape/lengths and this run's drop path."""
        ds = self.dataset
        cfg = self.model.replace(frame_spec=ds.frame_spec, T=ds.T, T_prime=ds.T_prime,
                                 drop_path=self.drop_path)
        return resolve_config(self.model_name, cfg)

    def test_spec(self) -> DatasetSpec:
        return self.dataset.replace(split="test", count=self.test_count)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"] = self.resolved_model().to_dict()
        d["dataset"] = self.dataset.to_dict()
        d["perturbation"] = self.perturbation.to_dict() if self.perturbation else None
        return d

    def hash(self) -> str:
        return stable_hash(self.to_dict())[:16]


@dataclass
class RunRecord:
    config_hash: str
    run_dir: str
    train_loss: list = field(default_factory=list)
    val_history: list = field(default_factory=list)
    best_checkpoint: Optional[str] = None
    best_epoch: Optional[int] = None
    best_val_mse: Optional[float] = None
    wall_clock_s: float = 0.0
    environment: dict = field(default_factory=dict)
    lr: Optional[float] = None
    drop_path: Optional[float] = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def save(self, path) -> None:
        _atomic_write_text(Path(path), json.dumps(self.to_dict(), indent=2))


def environment_fingerprint(device: str) -> dict:
    return {"python": platform.python_version(), "platform": platform.platform(),
            "torch": torch.__version__, "numpy": np.__version__, "device": device,
            "threads": torch.get_num_threads()}


def _atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# Data helpers
# ---------------------------------------------------------------------------

def _load_arrays(dataset) -> tuple[np.ndarray, np.ndarray]:
    ctx, tgt = dataset.arrays()
    if ctx is None:
        fs = dataset.frame_spec if hasattr(dataset, "frame_spec") else dataset.spec.frame_spec
        return np.zeros((0, 1, *fs.shape), np.uint8), np.zeros((0, 1, *fs.shape), np.uint8)
    return ctx, tgt


def _to_tensor(a: np.ndarray, device) -> torch.Tensor:
    a = from_uint8(a) if a.dtype == np.uint8 else a.astype(np.float32)
    return torch.from_numpy(a).to(device)


def dataset_for(spec: DatasetSpec, perturbation: Optional[PerturbationSpec] = None):
    ds = build_dataset(spec)
    return PerturbedDataset(ds, perturbation) if perturbation else ds


class CopyLastFrame(nn.Module):
    """Baseline that repeats the last context frame T' times."""

    category = "baseline"
    registry_name = "copy-last"

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config

    def forward(self, context):
        return context[:, -1:].expand(-1, self.config.T_prime, -1, -1, -1).clone()

    def macs(self, inputs, output):
        return 0


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@torch.no_grad()
def predict_arrays(model: nn.Module, context: np.ndarray, batch_size: int = 16, device="cpu") -> np.ndarray:
    model.eval()
    out = []
    for s in range(0, len(context), batch_size):
        out.append(model(_to_tensor(context[s:s + batch_size], device)).float().cpu().numpy())
    return np.concatenate(out) if out else np.zeros((0,), np.float32)


def _check_compatible(model: nn.Module, ctx: np.ndarray, tgt: np.ndarray) -> None:
    cfg = model.config
    want_c = (cfg.T, *cfg.frame_spec.shape)
    want_t = (cfg.T_prime, *cfg.frame_spec.shape)
    if tuple(ctx.shape[1:]) != want_c or tuple(tgt.shape[1:]) != want_t:
        raise ContractError(f"model expects context {want_c} / target {want_t}, "
                            f"dataset provides {tuple(ctx.shape[1:])} / {tuple(tgt.shape[1:])}")


def evaluate(model, dataset, metrics: Iterable[str] = ("quality",), batch_size: int = 16,
             device: str = "cpu", fps_kwargs: Optional[dict] = None) -> M.MetricReport:
    """Single deterministic pass over ``dataset``.

    ``model`` may be a module or a checkpoint path. ``metrics`` chooses among
    "quality", "params", "flops" and "fps".
    """
    if isinstance(model, (str, Path)):
        model = load_checkpoint(model)
    model = model.to(device)
    metrics = set(metrics)
    ctx, tgt = _load_arrays(dataset)
    report = M.MetricReport()
    if "quality" in metrics and len(ctx):
        _check_compatible(model, ctx, tgt)
        acc = M.QualityAccumulator()
        model.eval()
        with torch.no_grad():
            for s in range(0, len(ctx), batch_size):
                pred = model(_to_tensor(ctx[s:s + batch_size], device)).double().cpu().numpy()
                acc.update(pred, from_uint8(tgt[s:s + batch_size]) if tgt.dtype == np.uint8
                           else tgt[s:s + batch_size])
        report = acc.report()
    if "params" in metrics:
        report.params_m = M.count_params(model) / 1e6
    if "flops" in metrics:
        report.flops_g = M.estimate_flops(model) / 1e9
    if "fps" in metrics:
        report.fps = M.measure_fps(model, device=device, **(fps_kwargs or {}))
        report.device = device
    return report


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _split_train_val(n: int, val_fraction: float) -> tuple[np.ndarray, np.ndarray]:
    n_val = int(math.ceil(n * val_fraction)) if n > 1 and val_fraction > 0 else 0
    idx = np.arange(n)
    return idx[:n - n_val], idx[n - n_val:]


def train(cfg: TrainConfig, runs_root="runs", progress: bool = False) -> RunRecord:
    """Minibatch Adam on per-pixel MSE; keeps the best-by-validation checkpoint.

    Data order, initialisation and stochastic depth are all derived from
    ``cfg.seed``, so a rerun of the same config reproduces the run.
    """
    t0 = time.perf_counter()
    run_dir = Path(runs_root) / cfg.hash()
    ckpt_dir = run_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    _atomic_write_text(run_dir / "config.yaml", yaml.safe_dump(cfg.to_dict(), sort_keys=True))
    device = cfg.device

    torch.manual_seed(torch_seed(cfg.seed.child(0)))
    model = build_model(cfg.model_name, cfg.resolved_model()).to(device)

    data = dataset_for(cfg.dataset, cfg.perturbation)
    ctx_all, tgt_all = _load_arrays(data)
    tr_idx, val_idx = _split_train_val(len(ctx_all), cfg.val_fraction)
    val = ArrayDataset(ctx_all[val_idx], tgt_all[val_idx]) if len(val_idx) else None

    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(0.9, 0.999))
    record = RunRecord(cfg.hash(), str(run_dir), lr=cfg.lr, drop_path=cfg.drop_path,
                       environment=environment_fingerprint(device))
    best_path = ckpt_dir / "best.npz"
    save_checkpoint(model, best_path, {"epoch": 0})
    record.best_checkpoint, record.best_epoch = str(best_path), 0

    for epoch in range(1, cfg.epochs + 1):
        model.train()
        order = tr_idx[derive_rng(cfg.seed.child(1000 + epoch)).permutation(len(tr_idx))]
        torch.manual_seed(torch_seed(cfg.seed.child(2000 + epoch)))
        losses = []
        for b, s in enumerate(range(0, len(order), cfg.batch_size)):
            idx = np.sort(order[s:s + cfg.batch_size])
            x = _to_tensor(ctx_all[idx], device)
            y = _to_tensor(tgt_all[idx], device)
            loss = F.mse_loss(model(x), y)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {b}, lr {cfg.lr}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append((loss.item(), len(idx)))
        epoch_loss = sum(l * n for l, n in losses) / max(1, sum(n for _, n in losses))
        record.train_loss.append(epoch_loss)

        if val is not None:
            rep = evaluate(model, val, ("quality",), cfg.batch_size, device)
            record.val_history.append({"epoch": epoch, **rep.to_dict()})
            if record.best_val_mse is None or rep.mse_paper < record.best_val_mse:
                record.best_val_mse, record.best_epoch = rep.mse_paper, epoch
                save_checkpoint(model, best_path, {"epoch": epoch, "val_mse_paper": rep.mse_paper})
        else:
            record.best_epoch = epoch
            save_checkpoint(model, best_path, {"epoch": epoch})
        save_checkpoint(model, ckpt_dir / "last.npz", {"epoch": epoch})
        if progress:
            log.info("epoch %d loss %.6f val_mse %s", epoch, epoch_loss, record.best_val_mse)

    if cfg.epochs == 0:
        save_checkpoint(model, ckpt_dir / "last.npz", {"epoch": 0})
    record.wall_clock_s = time.perf_counter() - t0
    record.save(run_dir / "history.json")
    return record


def grid_configs(cfg: TrainConfig) -> list[TrainConfig]:
    return [cfg.replace(lr=lr, drop_path=dp, grid=True) for lr in LR_GRID for dp in DROP_PATH_GRID]


def train_grid(cfg: TrainConfig, runs_root="runs") -> tuple[RunRecord, list[RunRecord]]:
    """Runs the full learning-rate x drop-path grid; the best validation MSE wins."""
    records = [train(c, runs_root) for c in grid_configs(cfg)]
    scored = [r for r in records if r.best_val_mse is not None] or records
    best = min(scored, key=lambda r: r.best_val_mse if r.best_val_mse is not None else math.inf)
    return best, records


# ---------------------------------------------------------------------------
# Benchmark
# ---------------------------------------------------------------------------

def _row(name, category, condition, rep: Optional[M.MetricReport], status="ok") -> dict:
    if rep is None:
        return {"model": name, "category": category, "condition": condition, "params_m": None,
                "flops_g": None, "fps": None, "mse": None, "mae": None, "ssim": None, "psnr": None,
                "status": status}
    return {"model": name, "category": category, "condition": condition,
            "params_m": rep.params_m, "flops_g": rep.flops_g, "fps": rep.fps,
            "mse": rep.mse_paper, "mae": rep.mae_paper, "ssim": rep.ssim, "psnr": rep.psnr_db,
            "status": status}


@dataclass
class BenchmarkResult:
    rows: list
    samples: list  # strip samples: dicts with name/context/prediction/target
    failed: bool = False


def benchmark(suite: Sequence[tuple[str, dict]], base: TrainConfig,
              perturbations: Sequence[PerturbationSpec] = (), runs_root="runs",
              fps_kwargs: Optional[dict] = None, num_samples: int = 1) -> BenchmarkResult:
    """Train (or reuse a finished run of) each suite entry, then evaluate it on
    the clean test split and on each perturbed copy of it."""
    rows, samples, failed = [], [], False
    test_spec = base.test_spec()
    conditions = [("clean", None)] + [(p.label, p) for p in perturbations]
    test_sets = {}
    for label, p in conditions:
        try:
            test_sets[label] = ArrayDataset(*_load_arrays(dataset_for(test_spec, p)))
        except Exception as exc:  # noqa: BLE001 - reported as failed rows
            test_sets[label] = exc
    for name, overrides in suite:
        try:
            category = registry_entry(name).category
        except KeyError:
            category = "unknown"
        try:
            cfg = base.replace(model_name=name, model=base.model.replace(**overrides))
            best = Path(runs_root) / cfg.hash() / "checkpoints" / "best.npz"
            hist = best.parent.parent / "history.json"
            if not (best.exists() and hist.exists()):
                train(cfg, runs_root)
            model = load_checkpoint(best)
        except Exception as exc:  # noqa: BLE001
            failed = True
            log.error("benchmark entry %s failed: %s", name, exc)
            rows.extend(_row(name, category, label, None, f"failed: {exc}") for label, _ in conditions)
            continue
        for k, (label, _) in enumerate(conditions):
            data = test_sets[label]
            if isinstance(data, Exception):
                failed = True
                rows.append(_row(name, category, label, None, f"failed: {data}"))
                continue
            try:
                wanted = ("quality", "params", "flops", "fps") if k == 0 else ("quality",)
                rep = evaluate(model, data, wanted, base.batch_size, base.device, fps_kwargs)
                if k:
                    clean = rows[-k]
                    rep.params_m, rep.flops_g, rep.fps = clean["params_m"], clean["flops_g"], clean["fps"]
                rows.append(_row(name, category, label, rep))
                if len(data):
                    n = min(num_samples, len(data))
                    ctx, tgt = data.arrays(range(n))
                    pred = predict_arrays(model, ctx, device=base.device)
                    for i in range(n):
                        samples.append({"name": f"{name}_{label}_{i}", "context": from_uint8(ctx[i]),
                                        "prediction": pred[i], "target": from_uint8(tgt[i])})
            except Exception as exc:  # noqa: BLE001
                failed = True
                rows.append(_row(name, category, label, None, f"failed: {exc}"))
    return BenchmarkResult(rows, samples, failed)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def _json_safe(v):
    if isinstance(v, float) and not math.isfinite(v):
        return repr(v)
    return v


def _parse_cell(s: str):
    if s == "":
        return None
    try:
        return float(s)
    except ValueError:
        return s


def read_report_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return [{k: _parse_cell(v) for k, v in row.items()} for row in csv.DictReader(f)]


def _fmt(v, digits=4):
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.{digits}f}" if math.isfinite(v) else repr(v)
    return str(v)


def strip_image(context: np.ndarray, prediction: np.ndarray, target: np.ndarray) -> np.ndarray:
    """uint8 image with rows context | prediction | target, frames side by side.

    Rows shorter than the longest are padded with black frames.
    """
    rows = [np.asarray(a, dtype=np.float64) for a in (context, prediction, target)]
    n = max(len(r) for r in rows)
    C, H, W = rows[0].shape[1:]
    out = np.zeros((3 * H, n * W, C))
    for r, frames in enumerate(rows):
        for t, f in enumerate(frames):
            out[r * H:(r + 1) * H, t * W:(t + 1) * W] = np.transpose(f, (1, 2, 0))
    img = np.rint(np.clip(out, 0.0, 1.0) * 255.0).astype(np.uint8)
    if C == 1:
        return img[..., 0]
    if C == 3:
        return img
    return img[..., 0]


def report(table: Sequence[dict], out_dir, samples: Sequence[dict] = ()) -> list[Path]:
    """Writes report.csv, report.json, report.md and one PNG strip per sample."""
    from PIL import Image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    try:
        rows = [{c: _json_safe(r.get(c)) for c in TABLE_COLUMNS} for r in table]
        p = out / "report.csv"
        with open(p, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=TABLE_COLUMNS)
            w.writeheader()
            for r in rows:
                w.writerow({k: ("" if v is None else v) for k, v in r.items()})
        written.append(p)
        p = out / "report.json"
        p.write_text(json.dumps({"columns": list(TABLE_COLUMNS), "rows": rows,
                                 "conventions": {"mse_convention": M.MSE_CONVENTION,
                                                 "flops_convention": M.FLOPS_CONVENTION,
                                                 "averaging": M.AVERAGING}}, indent=2))
        written.append(p)
        lines = ["| Method | Category | Condition | Params (M) | FLOPs (G) | FPS | MSE | MAE | SSIM | PSNR | Status |",
                 "|" + "---|" * 11]
        for r in table:
            lines.append("| " + " | ".join([
                str(r["model"]), str(r["category"]), str(r["condition"]), _fmt(r["params_m"], 2),
                _fmt(r["flops_g"], 2), _fmt(r["fps"], 1), _fmt(r["mse"], 2), _fmt(r["mae"], 2),
                _fmt(r["ssim"], 4), _fmt(r["psnr"], 2), str(r["status"])]) + " |")
        lines.append("")
        lines.append("MSE/MAE: per-frame sums over channels and pixels, averaged over frames. "
                     "FLOPs: multiply-accumulates.")
        p = out / "report.md"
        p.write_text("\n".join(lines) + "\n")
        written.append(p)
        if samples:
            (out / "strips").mkdir(exist_ok=True)
        for s in samples:
            p = out / "strips" / f"{s['name']}.png"
            Image.fromarray(strip_image(s["context"], s["prediction"], s["target"])).save(p)
            written.append(p)
    except OSError as exc:
        raise OSError(f"failed writing report under {out}: {exc}") from exc
    return written
