"""RMSProp training loop, evaluation protocols and checkpointing."""

from __future__ import annotations

import csv
import io
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .data import Dataset, mean_sem, nmse, psnr, ssim, volume_mask
from .fourier import INFINITE, add_complex_noise, apply_mask, fft2c, ifft2c, make_rng
from .io import atomic_write, decode_checkpoint, encode_checkpoint
from .model import ForwardResult, McstraConfig, McstraParams, forward, report
from .validation import ShapeError

logger = logging.getLogger(__name__)

ACCEL_SWEEP = (4, 6, 8, 10, 12)
SNR_SWEEP = (INFINITE, 50.0, 20.0, 15.0, 10.0, 5.0, 0.0)
MASK_SWEEP = ("random", "equispaced")


# --------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    """RMSProp accumulators keyed by parameter name."""

    lr: float = 1e-4
    rho: float = 0.99
    eps: float = 1e-8
    step: int = 0
    sq_avg: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_config(cls, cfg: McstraConfig) -> "OptimizerState":
        return cls(cfg.learning_rate, cfg.rho, cfg.eps_opt)


def rmsprop_step(params, grads, state: OptimizerState):
    """One in-place RMSProp update.

    ``params`` is a list of ``(name, tensor)`` pairs (or bare tensors) and
    ``grads`` the matching gradient arrays. Aborts before touching anything
    if a gradient is not finite.
    """
    named = [(p if isinstance(p, tuple) else (str(i), p)) for i, p in enumerate(params)]
    if len(named) != len(grads):
        raise ValueError("params and grads differ in length")
    for (name, p), g in zip(named, grads):
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}; step aborted")
    for (name, p), g in zip(named, grads):
        g = np.asarray(g, dtype=np.float64)
        v = state.sq_avg.get(name)
        if v is None:
            v = np.zeros(p.shape, dtype=np.float64)
        v = (state.rho * v + (1.0 - state.rho) * g * g).astype(np.float32)
        state.sq_avg[name] = v
        upd = p.data.astype(np.float64) - state.lr * g / (np.sqrt(v, dtype=np.float64) + state.eps)
        p.data[...] = upd.astype(p.data.dtype)
    state.step += 1
    return [p for _, p in named]


def clip_global_norm(grads: list[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))
    if max_norm > 0 and norm > max_norm:
        s = max_norm / (norm + 1e-12)
        grads = [g * s for g in grads]
    return grads, norm


# --------------------------------------------------------------------------
# logging


LOG_FIELDS = ("step", "epoch", "split", "loss", "nmse", "psnr", "ssim", "stage")


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)

    def add(self, **row) -> None:
        for k in ("loss", "nmse", "psnr", "ssim"):
            v = row.get(k)
            if v is not None and not math.isfinite(v):
                raise FloatingPointError(f"non-finite {k} logged at step {row.get('step')}")
        self.rows.append({k: row.get(k, "") for k in LOG_FIELDS})

    def __len__(self):
        return len(self.rows)

    @property
    def train_losses(self) -> list[float]:
        return [r["loss"] for r in self.rows if r["split"] == "train"]

    def val_rows(self, stage="final") -> list[dict]:
        return [r for r in self.rows if r["split"] == "val" and r["stage"] == stage]

    def stage_nmse(self, epoch: int | None = None) -> dict[int, float]:
        """Per-stage validation NMSE of the last (or given) epoch."""
        rows = [r for r in self.rows if r["split"] == "val" and isinstance(r["stage"], int)]
        if not rows:
            return {}
        ep = rows[-1]["epoch"] if epoch is None else epoch
        return {r["stage"]: r["nmse"] for r in rows if r["epoch"] == ep}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=LOG_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerows(self.rows)
        return buf.getvalue()

    def write_csv(self, path) -> None:
        atomic_write(path, self.to_csv().encode())


# --------------------------------------------------------------------------
# batches


def make_batch(records, masks, noise_snr: float = INFINITE, noise_seed: int = 0):
    """Fully sampled and masked k-space for a list of records."""
    y_full = fft2c(np.stack([r.image for r in records]).astype(np.complex128))
    y_hat = np.stack([apply_mask(y, m) for y, m in zip(y_full, masks)])
    if noise_snr != INFINITE:
        y_hat = np.stack([
            add_complex_noise(y, noise_snr, noise_seed + 7919 * i, mask=m)
            for i, (y, m) in enumerate(zip(y_hat, masks))
        ])
    return y_full, y_hat


def zero_filled(y_hat: np.ndarray) -> np.ndarray:
    return np.abs(ifft2c(y_hat))


# --------------------------------------------------------------------------
# training


def _all_params(params: McstraParams):
    return list(params.named_parameters())


def train(cfg: McstraConfig, dataset: Dataset, epochs: int | None = None, batch: int | None = None,
          seed: int | None = None, *, max_steps: int | None = None, params: McstraParams | None = None,
          state: OptimizerState | None = None, on_step: Callable[[int, ForwardResult, np.ndarray, list], None] | None = None,
          validate: bool = True):
    """Train McSTRA with RMSProp.

    Returns ``(params, log, state)``. ``max_steps`` stops early (and, when
    ``epochs`` is None, determines how many epochs run). Masks are redrawn
    per volume and epoch unless the dataset uses fixed masks.
    """
    seed = cfg.seed if seed is None else seed
    batch = batch or cfg.batch_size
    max_steps = cfg.max_steps if max_steps is None else max_steps
    train_recs = dataset.split("train") or dataset.records
    steps_per_epoch = math.ceil(len(train_recs) / batch)
    if epochs is None:
        epochs = math.ceil(max_steps / steps_per_epoch) if max_steps else cfg.epochs
    params = params if params is not None else McstraParams(cfg, seed)
    state = state if state is not None else OptimizerState.from_config(cfg)
    named = _all_params(params)
    plist = [p for _, p in named]
    log = TrainLog()
    rng = make_rng(seed ^ 0x5DEECE66D)
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(len(train_recs))
        for start in range(0, len(order), batch):
            recs = [train_recs[i] for i in order[start:start + batch]]
            masks = [dataset.mask_for(r.volume_id, epoch, "train") for r in recs]
            y_full, y_hat = make_batch(recs, masks)
            for p in plist:
                p.grad = None
            with ad.GradientTape() as tape:
                res = forward(params, cfg, y_hat, masks, y_full)
            loss = res.loss.item()
            if not math.isfinite(loss):
                raise FloatingPointError(f"loss diverged at step {step} (epoch {epoch}): {loss}")
            grads = tape.backward(res.loss, plist)
            grads, _ = clip_global_norm(grads, cfg.clip_norm)
            rmsprop_step(named, grads, state)
            log.add(step=step, epoch=epoch, split="train", loss=loss)
            if on_step is not None:
                on_step(step, res, y_hat, masks)
            step += 1
            if max_steps and step >= max_steps:
                break
        if validate and dataset.split("val"):
            _log_validation(params, cfg, dataset, log, step, epoch)
        if max_steps and step >= max_steps:
            break
    return params, log, state


def _log_validation(params, cfg, dataset, log: TrainLog, step: int, epoch: int) -> None:
    rep, loss = validation_report(params, cfg, dataset)
    log.add(step=step, epoch=epoch, split="val", loss=loss, nmse=float(np.mean(rep["nmse"])),
            psnr=float(np.mean(rep["psnr"])), ssim=float(np.mean(rep["ssim"])), stage="final")
    for t, vals in enumerate(rep["stage_nmse"], 1):
        log.add(step=step, epoch=epoch, split="val", nmse=float(np.mean(vals)), stage=t)
    logger.info("epoch %d step %d val loss %.4f nmse %.4f", epoch, step, loss, np.mean(rep["nmse"]))


def validation_report(params, cfg, dataset: Dataset, batch: int = 4):
    recs = dataset.split("val") or dataset.records
    agg = {"nmse": [], "psnr": [], "ssim": [], "stage_nmse": [[] for _ in range(cfg.cascade_length)],
           "zf_nmse": [], "zf_psnr": []}
    losses = []
    for start in range(0, len(recs), batch):
        chunk = recs[start:start + batch]
        masks = [dataset.mask_for(r.volume_id, 0, "val") for r in chunk]
        y_full, y_hat = make_batch(chunk, masks)
        res = forward(params, cfg, y_hat, masks, y_full)
        rep = report(res, y_full)
        losses.append(res.loss.item() * len(chunk))
        for k in ("nmse", "psnr", "ssim"):
            agg[k].extend(getattr(rep, k))
        for t, vals in enumerate(rep.stage_nmse):
            agg["stage_nmse"][t].extend(vals)
        ref = np.abs(ifft2c(y_full))
        zf = zero_filled(y_hat)
        agg["zf_nmse"].extend(nmse(a, b) for a, b in zip(zf, ref))
        agg["zf_psnr"].extend(psnr(a, b) for a, b in zip(zf, ref))
    return agg, sum(losses) / len(recs)


# --------------------------------------------------------------------------
# evaluation sweeps

EVAL_FIELDS = ("volume", "slice", "protocol", "param", "nmse", "psnr", "ssim", "zf_nmse", "zf_psnr", "zf_ssim")


@dataclass
class EvalReport:
    rows: list[dict] = field(default_factory=list)

    def points(self) -> list[tuple[str, str]]:
        seen = []
        for r in self.rows:
            key = (r["protocol"], r["param"])
            if key not in seen:
                seen.append(key)
        return seen

    def select(self, protocol: str, param) -> list[dict]:
        return [r for r in self.rows if r["protocol"] == protocol and r["param"] == str(param)]

    def summary(self) -> list[dict]:
        """Volume-wise means, then mean and standard error over volumes."""
        out = []
        for proto, param in self.points():
            rows = self.select(proto, param)
            entry = {"protocol": proto, "param": param, "n_slices": len(rows)}
            vols = sorted({r["volume"] for r in rows})
            for k in ("nmse", "psnr", "ssim", "zf_nmse", "zf_psnr", "zf_ssim"):
                per_vol = [np.mean([r[k] for r in rows if r["volume"] == v]) for v in vols]
                entry[k], entry[k + "_sem"] = mean_sem(per_vol)
                entry[k + "_slice_mean"] = float(np.mean([r[k] for r in rows]))
            out.append(entry)
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=EVAL_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerows(self.rows)
        return buf.getvalue()

    def summary_csv(self) -> str:
        rows = self.summary()
        buf = io.StringIO()
        if rows:
            w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
        return buf.getvalue()


def protocol_points(protocol: str):
    if protocol == "clean":
        return [("clean", "-")]
    if protocol == "accel":
        return [("accel", a) for a in ACCEL_SWEEP]
    if protocol == "snr":
        return [("snr", s) for s in SNR_SWEEP]
    if protocol == "mask":
        return [("mask", k) for k in MASK_SWEEP]
    if protocol == "all":
        return [p for name in ("clean", "accel", "snr", "mask") for p in protocol_points(name)]
    raise ValueError(f"unknown protocol {protocol!r}; expected clean, accel, snr, mask or all")


def _param_text(v) -> str:
    if isinstance(v, float) and math.isinf(v):
        return "inf"
    if isinstance(v, float) and v.is_integer():
        return str(int(v))
    return str(v)


def _worker_count() -> int:
    env = os.environ.get("MCSTRA_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def evaluate(params: McstraParams | None, cfg: McstraConfig, dataset: Dataset, protocol: str = "clean",
             batch: int = 4, seed: int = 0) -> EvalReport:
    """Per-slice metrics for every point of a protocol sweep.

    ``params=None`` evaluates only the zero-filled baseline (model columns
    then repeat it). Validation masks are fixed per volume; noise is seeded
    per slice so every point is reproducible.
    """
    recs = dataset.split("val") or dataset.records
    jobs = []
    for proto, value in protocol_points(protocol):
        kind, accel, snr = cfg.mask_kind, cfg.accel, INFINITE
        if proto == "accel":
            accel = float(value)
        elif proto == "snr":
            snr = value
        elif proto == "mask":
            kind = value
        for start in range(0, len(recs), batch):
            jobs.append((proto, value, kind, accel, snr, recs[start:start + batch]))

    def run(job):
        proto, value, kind, accel, snr, chunk = job
        masks = [volume_mask(cfg.width, kind, accel, cfg.center_frac, dataset.seed, r.volume_id, 2 ** 32 - 1)
                 for r in chunk]
        noise_seed = seed * 1_000_003 + chunk[0].volume_id * 1009 + chunk[0].slice_index
        y_full, y_hat = make_batch(chunk, masks, snr, noise_seed)
        ref = np.abs(ifft2c(y_full))
        zf = zero_filled(y_hat)
        pred = zf if params is None else forward(params, cfg, y_hat, masks).x_tail.data.astype(np.float64)
        rows = []
        for i, r in enumerate(chunk):
            rows.append({
                "volume": r.volume_id, "slice": r.slice_index, "protocol": proto, "param": _param_text(value),
                "nmse": nmse(pred[i], ref[i]), "psnr": psnr(pred[i], ref[i]), "ssim": ssim(pred[i], ref[i]),
                "zf_nmse": nmse(zf[i], ref[i]), "zf_psnr": psnr(zf[i], ref[i]), "zf_ssim": ssim(zf[i], ref[i]),
            })
        return rows

    workers = min(_worker_count(), len(jobs)) or 1
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            chunks = list(pool.map(run, jobs))
    else:
        chunks = [run(j) for j in jobs]
    return EvalReport([row for c in chunks for row in c])


# --------------------------------------------------------------------------
# checkpoints

_OPT_PREFIX = "rmsprop.sq_avg/"
_OPT_STEP = "rmsprop.step"


def checkpoint_bytes(params: McstraParams, state: OptimizerState | None = None) -> bytes:
    entries = [(name, p.data) for name, p in params.named_parameters()]
    if state is not None:
        entries.append((_OPT_STEP, np.asarray(float(state.step), dtype=np.float32)))
        for name, _ in params.named_parameters():
            if name in state.sq_avg:
                entries.append((_OPT_PREFIX + name, state.sq_avg[name]))
    return encode_checkpoint(entries)


def checkpoint_save(params: McstraParams, state: OptimizerState | None, path) -> None:
    atomic_write(path, checkpoint_bytes(params, state))


def checkpoint_load(path, cfg: McstraConfig) -> tuple[McstraParams, OptimizerState]:
    """Rebuild parameters for ``cfg`` and fill them from an MCKP1 file."""
    path = Path(path)
    entries = decode_checkpoint(path.read_bytes(), str(path))
    params = McstraParams(cfg)
    state = OptimizerState.from_config(cfg)
    named = dict(params.named_parameters())
    seen = set()
    for name, arr in entries:
        if name == _OPT_STEP:
            state.step = int(arr)
            continue
        if name.startswith(_OPT_PREFIX):
            state.sq_avg[name[len(_OPT_PREFIX):]] = arr.astype(np.float32)
            continue
        if name not in named:
            raise ShapeError(f"{path}: checkpoint parameter {name!r} does not exist in this configuration")
        p = named[name]
        if arr.shape != p.shape:
            raise ShapeError(f"{path}: parameter {name!r} has shape {arr.shape}, configuration expects {p.shape}")
        p.data = arr.astype(p.data.dtype).copy()
        seen.add(name)
    missing = [n for n in named if n not in seen]
    if missing:
        raise ShapeError(f"{path}: checkpoint lacks parameter {missing[0]!r}")
    return params, state
