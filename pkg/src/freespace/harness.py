"""Training, evaluation, and ablation driver.

One optimizer step per batch of frames, a halving learning-rate schedule,
early stopping on validation F-score, and fully seeded determinism: the
same (config, seed, dataset) reproduces every logged number on a platform.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import metrics as metrics_mod
from . import nn
from .config import TrainConfig
from .data import Box, Decal, SceneSpec, augment, render
from .errors import ContractError, NumericalAbort
from .geometry import CameraIntrinsics
from .losses import total_loss
from .model import ModelState, build_model, forward, forward_tensor, load_state, save_state

log = logging.getLogger(__name__)


def lr_at_epoch(lr0: float, decay: float, interval: int, epoch: int) -> float:
    """Stepped schedule: the rate halves (by ``decay``) every ``interval``
    epochs, so epochs 1..interval run at ``lr0``."""
    return lr0 * decay ** ((epoch - 1) // interval)


def dataset_fingerprint(samples) -> str:
    digest = hashlib.sha256()
    for s in samples:
        digest.update(s.labels.tobytes())
        digest.update(np.nan_to_num(s.depth.values).tobytes())
        digest.update(s.rgb.tobytes())
    return digest.hexdigest()[:16]


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_fsc: float
    wall_time: float


@dataclass
class RunRecord:
    epochs: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_fsc: float = 0.0
    stopped_early: bool = False
    checkpoint_path: str = None
    dataset_hash: str = ""

    @property
    def train_losses(self):
        return [e.train_loss for e in self.epochs]

    def to_json(self) -> str:
        out = asdict(self)
        return json.dumps(out, indent=2)


def _split(dataset, val_fraction: float, seed: int):
    n = len(dataset)
    n_val = max(1, int(round(n * val_fraction)))
    if n_val >= n:
        raise ContractError(f"dataset of {n} frames cannot spare {n_val} for validation")
    order = np.random.default_rng(seed).permutation(n)
    val_idx = set(order[:n_val].tolist())
    train = [dataset[i] for i in range(n) if i not in val_idx]
    val = [dataset[i] for i in range(n) if i in val_idx]
    return train, val


def _snapshot(state: ModelState):
    return ([p.data.copy() for _, p in state.params()],
            [b.copy() for _, b in state.buffers()], state.step)


def _restore(state: ModelState, snap):
    params, buffers, step = snap
    for (_, p), data in zip(state.params(), params):
        p.data = data.copy()
    names = [n for n, _ in state.buffers()]
    for name, data in zip(names, buffers):
        obj = state
        *parts, leaf = name.split(".")
        for part in parts:
            obj = obj[int(part)] if isinstance(obj, list) else getattr(obj, part)
        setattr(obj, leaf, data.copy())
    state.step = step


def _pooled_fsc(state: ModelState, samples) -> float:
    counts = metrics_mod.ConfusionCounts()
    for s in samples:
        p = forward(s.rgb, s.depth, s.intrinsics, state)
        counts = counts + metrics_mod.confusion(p, s.labels, 0.5)
    return metrics_mod.point_metrics(counts)["Fsc"]


def train(cfg: TrainConfig, dataset, out_dir=None) -> RunRecord:
    """Fit a model; returns the per-epoch record with the best state saved.

    The dataset is split train/validation by a seeded permutation; early
    stopping restores the best-validation-Fsc parameters seen.
    """
    if not dataset:
        raise ContractError("training needs a nonempty dataset")
    train_set, val_set = _split(dataset, cfg.val_fraction, cfg.seed)
    state = build_model(replace(cfg.model, seed=cfg.seed))
    opt = nn.Adam(state.params(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed + 1)

    record = RunRecord(dataset_hash=dataset_fingerprint(dataset))
    best_snap = _snapshot(state)
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        opt.lr = lr_at_epoch(cfg.lr, cfg.decay_factor, cfg.decay_interval, epoch)
        order = rng.permutation(len(train_set))
        epoch_loss = 0.0
        pending = 0
        opt.zero_grad()
        for pos, idx in enumerate(order):
            sample = train_set[idx]
            if cfg.augment_ops:
                sample = augment(sample, cfg.augment_ops,
                                 seed=cfg.seed * 1_000_003 + epoch * 1009 + int(idx))
            out = forward_tensor(sample.rgb, sample.depth, sample.intrinsics,
                                 state, training=True)
            p = out.data[0]
            loss, grad = total_loss(p, sample.labels, sample.depth,
                                    sample.intrinsics, cfg.loss)
            if not np.isfinite(loss):
                log.error("non-finite loss: epoch %d, sample %d, p in [%g, %g]",
                          epoch, int(idx), p.min(), p.max())
                raise NumericalAbort(
                    f"non-finite loss at epoch {epoch}, dataset index {int(idx)}")
            epoch_loss += loss
            out.backward(grad[None])
            state.step += 1
            pending += 1
            if pending == cfg.batch_size or pos == len(order) - 1:
                opt.step()
                opt.zero_grad()
                pending = 0

        val_fsc = _pooled_fsc(state, val_set)
        record.epochs.append(EpochRecord(epoch, opt.lr, epoch_loss, val_fsc,
                                         time.perf_counter() - t0))
        log.info("epoch %d lr %.2e loss %.3f val Fsc %.4f",
                 epoch, opt.lr, epoch_loss, val_fsc)
        if val_fsc > record.best_val_fsc or record.best_epoch == 0:
            record.best_val_fsc = val_fsc
            record.best_epoch = epoch
            best_snap = _snapshot(state)
        elif epoch - record.best_epoch >= cfg.patience:
            record.stopped_early = True
            break

    _restore(state, best_snap)
    if out_dir is not None:
        from pathlib import Path
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "best.ckpt"
        save_state(state, path)
        record.checkpoint_path = str(path)
        (out / "run.json").write_text(record.to_json())
    record.state = state
    return record


def evaluate(state_or_path, dataset, per_frame_csv=None) -> dict:
    """Aggregate metrics over a dataset; optionally a per-frame CSV."""
    if not dataset:
        raise ContractError("evaluation needs a nonempty dataset")
    state = state_or_path if isinstance(state_or_path, ModelState) \
        else load_state(state_or_path)
    counts = metrics_mod.ConfusionCounts()
    pos_hist = np.zeros(256, dtype=np.int64)
    neg_hist = np.zeros(256, dtype=np.int64)
    rows = []
    for i, s in enumerate(dataset):
        p = forward(s.rgb, s.depth, s.intrinsics, state)
        frame_counts = metrics_mod.confusion(p, s.labels, 0.5)
        counts = counts + frame_counts
        hp, hn = metrics_mod.score_histograms(p, s.labels)
        pos_hist += hp
        neg_hist += hn
        rows.append((i, metrics_mod.point_metrics(frame_counts)))
    report = metrics_mod.point_metrics(counts)
    curve = metrics_mod.curve_from_histograms(pos_hist, neg_hist)
    report["MaxF"] = float(curve.f_score.max())
    report["AP"] = float(metrics_mod.average_precision(curve))
    report["frames"] = len(dataset)
    if per_frame_csv is not None:
        header = ["frame"] + list(rows[0][1])
        lines = [",".join(header)]
        for i, m in rows:
            lines.append(",".join([str(i)] + [f"{m[k]:.6f}" for k in rows[0][1]]))
        from pathlib import Path
        Path(per_frame_csv).write_text("\n".join(lines) + "\n")
    return report


@dataclass
class AblationCell:
    name: str
    mean_val_fsc: float
    per_seed: list
    error: str = None


def ablate(cells, dataset, base_mapping=None, seeds=(0, 1, 2)) -> list:
    """Run each (name, overrides) cell once per seed; returns summaries
    sorted by mean validation Fsc (failed cells sink to the bottom)."""
    from .config import merged, train_config_from_mapping
    if not cells:
        raise ContractError("ablation grid is empty")
    results = []
    for name, overrides in cells:
        per_seed = []
        error = None
        for seed in seeds:
            mapping = merged(base_mapping, overrides)
            mapping["train.seed"] = seed
            try:
                record = train(train_config_from_mapping(mapping), dataset)
                per_seed.append(record.best_val_fsc)
            except Exception as exc:  # keep the grid going
                log.warning("ablation cell %s seed %d failed: %s", name, seed, exc)
                error = f"{type(exc).__name__}: {exc}"
        mean = float(np.mean(per_seed)) if per_seed else float("-inf")
        results.append(AblationCell(name, mean, per_seed, error))
    results.sort(key=lambda c: c.mean_val_fsc, reverse=True)
    return results


def ablation_table(results) -> str:
    lines = [f"{'cell':<28} {'mean Fsc':>9}  per-seed"]
    for cell in results:
        per = ", ".join(f"{v:.4f}" for v in cell.per_seed) or "-"
        note = f"  [{cell.error}]" if cell.error else ""
        mean = "failed" if cell.mean_val_fsc == float("-inf") \
            else f"{cell.mean_val_fsc:9.4f}"
        lines.append(f"{cell.name:<28} {mean:>9}  {per}{note}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# synthetic splits
# ---------------------------------------------------------------------------

def _hard_scene(seed: int, image_size: int = 64) -> SceneSpec:
    """A frame dense in label transitions, depth variation, and modality
    conflicts: thin obstacles (half of them road-colored, so geometry must
    resolve them), painted ground decals in obstacle colors (so color alone
    misleads), and a ramp in half the frames."""
    rng = np.random.default_rng(seed)
    k = CameraIntrinsics(image_size * 1.1, image_size * 1.1,
                         image_size / 2 - 0.5, round(image_size * 0.36))
    boxes = []
    for _ in range(int(rng.integers(3, 7))):
        gray = rng.random() < 0.5
        shade = float(rng.uniform(0.3, 0.55))
        color = (shade, shade, shade) if gray else tuple(rng.uniform(0.2, 0.8, 3))
        boxes.append(Box(x=float(rng.uniform(-4.0, 4.0)),
                         z=float(rng.uniform(3.5, 16.0)),
                         width=float(rng.uniform(0.15, 0.9)),
                         height=float(rng.uniform(0.4, 1.7)),
                         depth=float(rng.uniform(0.2, 1.0)),
                         color=color))
    decals = tuple(Decal(x=float(rng.uniform(-3.5, 3.5)),
                         z=float(rng.uniform(3.0, 14.0)),
                         width=float(rng.uniform(0.4, 1.6)),
                         depth=float(rng.uniform(0.6, 3.0)),
                         color=tuple(rng.uniform(0.2, 0.9, 3)))
                   for _ in range(int(rng.integers(2, 5))))
    ramp = rng.random() < 0.5
    return SceneSpec(camera_height=1.65,
                     road_width=float(rng.uniform(5.0, 9.0)),
                     intrinsics=k,
                     obstacles=tuple(boxes),
                     decals=decals,
                     ramp_angle_deg=float(rng.uniform(4.0, 14.0)) if ramp else 0.0,
                     ramp_start=float(rng.uniform(6.0, 12.0)),
                     image_size=(image_size, image_size),
                     seed=seed,
                     noise=0.08,
                     stride_multiple=16)


def make_hard_split(n_frames: int, seed: int = 0, image_size: int = 64) -> list:
    """Render the transition-rich synthetic split used by the ablations."""
    return [render(_hard_scene(seed * 10_000 + i, image_size))
            for i in range(n_frames)]


def make_plain_split(n_frames: int, seed: int = 0, image_size: int = 64) -> list:
    """Simpler frames: one or two boxes, no ramp."""
    samples = []
    for i in range(n_frames):
        rng = np.random.default_rng(seed * 10_000 + i)
        k = CameraIntrinsics(image_size * 1.1, image_size * 1.1,
                             image_size / 2 - 0.5, round(image_size * 0.36))
        boxes = tuple(Box(x=float(rng.uniform(-3, 3)), z=float(rng.uniform(5, 14)),
                          width=float(rng.uniform(0.5, 1.5)),
                          height=float(rng.uniform(0.6, 1.4)),
                          depth=float(rng.uniform(0.3, 1.0)))
                      for _ in range(int(rng.integers(1, 3))))
        samples.append(render(SceneSpec(intrinsics=k, obstacles=boxes,
                                        image_size=(image_size, image_size),
                                        seed=seed * 10_000 + i,
                                        stride_multiple=16)))
    return samples
