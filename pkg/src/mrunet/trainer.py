"""Training, sliding-window prediction and cross-validation."""
from __future__ import annotations

import copy
import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import checkpoint
from .losses import combined_loss
from .metrics import MetricsReport, confusion_matrix, report_from_confusion
from .optim import Adam
from .patches import PatchSpec, sample_label_patchset, sample_patchset, tile_centers
from .tensor import no_grad
from .unet import Network, NetworkConfig, build, count_inputs
from .volume import ClassMap, Volume, pad_edge

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    iterations: int = 2000
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    batch_size: int = 2
    seed: int = 0
    foreground_prob: float = 0.5
    val_interval: int = 200
    checkpoint_interval: int = 0  # 0 disables periodic checkpoints
    progress_interval: int = 100
    norm_window: tuple[float, float] | None = None
    predict_batch: int = 8

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.iterations <= 0:
            raise ValueError("iterations must be > 0")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be > 0")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if not 0.0 <= self.foreground_prob <= 1.0:
            raise ValueError("foreground_prob must lie in [0, 1]")
        if self.val_interval < 0 or self.checkpoint_interval < 0:
            raise ValueError("intervals must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        for key in ("betas", "norm_window"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


# -- folds ----------------------------------------------------------------------

@dataclass
class Fold:
    train: list[int]
    val: list[int]
    test: list[int]

    def to_dict(self) -> dict:
        return {"train": self.train, "val": self.val, "test": self.test}


@dataclass
class FoldPlan:
    folds: list[Fold]
    scan_ids: list[int]

    def __post_init__(self):
        self.check()

    def check(self) -> None:
        all_ids = set(self.scan_ids)
        tests: list[int] = []
        for i, f in enumerate(self.folds):
            tr, va, te = set(f.train), set(f.val), set(f.test)
            if tr & va or tr & te or va & te:
                raise ValueError(f"fold {i}: train/val/test sets overlap")
            if tr | va | te != all_ids:
                raise ValueError(f"fold {i}: train/val/test do not cover all scans")
            tests += f.test
        if sorted(tests) != sorted(all_ids):
            raise ValueError("test sets across folds must partition the scans (each scan in exactly one test set)")

    def to_list(self) -> list[dict]:
        return [f.to_dict() for f in self.folds]

    @classmethod
    def from_list(cls, folds: list[dict], scan_ids: Sequence[int] | None = None) -> "FoldPlan":
        fs = [Fold(list(f["train"]), list(f["val"]), list(f["test"])) for f in folds]
        ids = scan_ids if scan_ids is not None else sorted({i for f in fs for i in f.train + f.val + f.test})
        return cls(fs, list(ids))


def make_folds(scan_ids: Sequence[int], n_folds: int = 5, n_val: int = 2, seed: int = 0) -> FoldPlan:
    """k-fold plan: a shuffled partition into test sets; validation scans come from the next test chunk."""
    ids = list(scan_ids)
    if n_folds < 2 or n_folds > len(ids):
        raise ValueError(f"cannot make {n_folds} folds from {len(ids)} scans")
    order = list(np.random.default_rng(seed).permutation(ids))
    order = [int(i) for i in order]
    chunks = [list(c) for c in np.array_split(np.array(order), n_folds)]
    folds = []
    for k in range(n_folds):
        test = [int(i) for i in chunks[k]]
        rest = [i for i in order if i not in test]
        nxt = [int(i) for i in chunks[(k + 1) % n_folds]] + [i for i in rest]
        val = []
        for i in nxt:
            if i not in val and i not in test and len(val) < n_val:
                val.append(i)
        train = [i for i in order if i not in test and i not in val]
        if not train:
            raise ValueError(f"fold {k}: no scans left for training ({len(ids)} scans, {n_folds} folds, {n_val} val)")
        folds.append(Fold(sorted(train), sorted(val), sorted(test)))
    return FoldPlan(folds, sorted(ids))


# -- data preparation -------------------------------------------------------------

def normalize_intensity(data: np.ndarray, window: tuple[float, float] | None = None) -> np.ndarray:
    """Zero mean, unit variance per scan, statistics taken over the voxels inside ``window``."""
    d = np.asarray(data, dtype=np.float64)
    sel = d if window is None else d[(d >= window[0]) & (d <= window[1])]
    if sel.size == 0:
        sel = d
    mu, sd = sel.mean(), sel.std()
    return ((d - mu) / (sd if sd > 0 else 1.0)).astype(np.float32)


@dataclass
class PreparedScan:
    scan_id: int
    image: np.ndarray  # normalised and padded
    labels: np.ndarray  # padded
    dims: tuple[int, int, int]  # original dims
    pad: tuple[int, int, int]
    fg_centers: np.ndarray  # (n, 3) original-coordinate centres with a foreground voxel


def prepare_scan(scan_id: int, image: Volume, labels: Volume | None, spec: PatchSpec,
                 norm_window=None) -> PreparedScan:
    pad = spec.padding
    img = Volume(normalize_intensity(image.data, norm_window), image.spacing)
    img = pad_edge(img, pad).data
    lab = None
    fg = np.zeros((0, 3), dtype=np.int64)
    if labels is not None:
        if labels.dims != image.dims:
            raise ValueError(f"scan {scan_id}: label dims {labels.dims} != image dims {image.dims}")
        lab = pad_edge(labels, pad).data
        half = [s // 2 for s in spec.target_size]
        fgm = np.zeros(labels.dims, dtype=bool)
        inner = tuple(slice(h, n - h + 1) for h, n in zip(half, labels.dims))
        fgm[inner] = labels.data[inner] > 0
        fg = np.argwhere(fgm)
    return PreparedScan(scan_id, img, lab, image.dims, pad, fg)


class PatchSampler:
    """Draws training batches; reproducible from its generator."""

    def __init__(self, scans: Sequence[PreparedScan], spec: PatchSpec, rng: np.random.Generator,
                 foreground_prob: float = 0.5):
        if not scans:
            raise ValueError("no training scans")
        self.scans = list(scans)
        self.spec = spec
        self.rng = rng
        self.foreground_prob = foreground_prob

    def center(self, scan: PreparedScan) -> tuple[int, int, int]:
        if len(scan.fg_centers) and self.rng.random() < self.foreground_prob:
            c = scan.fg_centers[self.rng.integers(len(scan.fg_centers))]
        else:
            half = [s // 2 for s in self.spec.target_size]
            c = [self.rng.integers(h, n - h + 1) for h, n in zip(half, scan.dims)]
        return tuple(int(v) for v in c)

    def batch(self, n: int):
        imgs, labs = [], []
        for _ in range(n):
            scan = self.scans[self.rng.integers(len(self.scans))]
            c = self.center(scan)
            pc = tuple(ci + p for ci, p in zip(c, scan.pad))
            imgs.append(sample_patchset(scan.image, pc, self.spec))
            labs.append(sample_label_patchset(scan.labels, pc, self.spec))
        K = len(self.spec.kappas)
        x_t = np.stack([p.target for p in imgs])[:, None]
        x_c = [np.stack([p.contexts[k] for p in imgs])[:, None] for k in range(K)]
        y_t = np.stack([p.target for p in labs]).astype(np.int64)
        y_c = [np.stack([p.contexts[k] for p in labs]).astype(np.int64) for k in range(K)]
        return x_t, x_c, y_t, y_c


# -- prediction ---------------------------------------------------------------------

def _owner_index(n: int, centers: Sequence[int]) -> np.ndarray:
    """For each coordinate along one axis, the index of the nearest tile centre (ties: lower)."""
    coords = np.arange(n)[:, None] + 0.5
    d = np.abs(coords - np.asarray(centers)[None, :])
    return d.argmin(axis=1)


def predict_prepared(net: Network, scan: PreparedScan, batch: int = 8, return_logits: bool = False):
    spec = PatchSpec.from_config(net.config)
    centers = tile_centers(scan.dims, spec)
    axes = [sorted({c[a] for c in centers}) for a in range(3)]
    owner = [_owner_index(n, ax) for n, ax in zip(scan.dims, axes)]
    out = np.zeros(scan.dims, dtype=np.uint16)
    logits_out = np.zeros((net.config.class_count,) + tuple(scan.dims), dtype=np.float32) if return_logits else None
    S = spec.target_size
    with no_grad():
        for i0 in range(0, len(centers), batch):
            chunk = centers[i0 : i0 + batch]
            sets = [sample_patchset(scan.image, tuple(c + p for c, p in zip(cc, scan.pad)), spec) for cc in chunk]
            xt = np.stack([s.target for s in sets])[:, None]
            xc = [np.stack([s.contexts[k] for s in sets])[:, None] for k in range(len(spec.kappas))]
            logits = net(xt, xc)["target"].data
            pred = logits.argmax(axis=1).astype(np.uint16)
            for j, cc in enumerate(chunk):
                lo = [c - s // 2 for c, s in zip(cc, S)]
                tile_idx = [ax.index(c) for ax, c in zip(axes, cc)]
                # keep only voxels whose nearest tile centre is this one
                sel = [np.nonzero(owner[a][lo[a] : lo[a] + S[a]] == tile_idx[a])[0] for a in range(3)]
                ix = np.ix_(*(lo[a] + sel[a] for a in range(3)))
                out[ix] = pred[j][np.ix_(*sel)]
                if return_logits:
                    logits_out[(slice(None),) + ix] = logits[j][(slice(None),) + np.ix_(*sel)]
    return (out, logits_out) if return_logits else out


def predict(net: Network, image: Volume, norm_window=None, batch: int = 8) -> Volume:
    """Sliding-window segmentation of a whole image; output dims equal input dims."""
    spec = PatchSpec.from_config(net.config)
    if any(n < s for n, s in zip(image.dims, spec.target_size)):
        raise ValueError(f"image dims {image.dims} smaller than target patch {spec.target_size}")
    scan = prepare_scan(-1, image, None, spec, norm_window)
    labels = predict_prepared(net, scan, batch)
    return Volume(labels, image.spacing, classes=net.config.class_count)


def evaluate_scans(net: Network, scans: Sequence[PreparedScan], originals: dict[int, np.ndarray], batch: int = 8):
    C = net.config.class_count
    conf = np.zeros((C, C), dtype=np.int64)
    for s in scans:
        pred = predict_prepared(net, s, batch)
        conf += confusion_matrix(pred, originals[s.scan_id], C)
    return conf


# -- training -----------------------------------------------------------------------

@dataclass
class TrainResult:
    state: dict[str, np.ndarray]  # best-validation parameters (final if no validation)
    final_state: dict[str, np.ndarray]
    history: list[dict]
    val_history: list[dict] = field(default_factory=list)
    best_iteration: int = 0
    sec_per_iter: float = 0.0

    @property
    def final_checksum(self) -> str:
        return checkpoint.checksum(self.final_state)


def _history_row(it: int, report, K: int) -> dict:
    row = {"iter": it, "total": float(report.total.data), "target": report.target_loss}
    ctx = report.context_losses
    for k in range(K):
        row[f"context_{k + 1}"] = ctx[k] if k < len(ctx) else 0.0
    return row


def train(net: Network, train_scans: Sequence[PreparedScan], cfg: TrainConfig, val_scans: Sequence[PreparedScan] = (),
          val_truth: dict[int, np.ndarray] | None = None, out_dir=None,
          progress: Callable[[dict], None] | None = None) -> TrainResult:
    """Adam on the combined loss; keeps the parameters with the best validation median DSC."""
    cfg.validate()
    spec = PatchSpec.from_config(net.config)
    for s in train_scans:
        if s.pad != spec.padding:
            raise ValueError("training scans were padded for a different patch spec")
    rng = np.random.default_rng(cfg.seed)
    sampler = PatchSampler(train_scans, spec, rng, cfg.foreground_prob)
    opt = Adam(net.params, lr=cfg.lr, betas=cfg.betas, eps=cfg.adam_eps)
    K = net.config.K
    history: list[dict] = []
    val_history: list[dict] = []
    best_state = None
    best_score = -math.inf
    best_iter = 0
    out = Path(out_dir) if out_dir is not None else None
    classes = ClassMap.generic(net.config.class_count)
    t0 = time.perf_counter()
    t_last = t0
    eval_time = 0.0  # validation and checkpoint time, excluded from sec_per_iter
    for it in range(1, cfg.iterations + 1):
        x_t, x_c, y_t, y_c = sampler.batch(cfg.batch_size)
        opt.zero_grad()
        outputs = net(x_t, x_c)
        report = combined_loss(outputs, y_t, y_c, net.config)
        _check_finite(report, it)
        report.total.backward()
        opt.step()
        history.append(_history_row(it, report, K))
        if progress is not None and cfg.progress_interval and it % cfg.progress_interval == 0:
            now = time.perf_counter()
            progress({"iter": it, "total_loss": history[-1]["total"],
                      "sec_per_iter": (now - t_last) / cfg.progress_interval})
            t_last = now
        te = time.perf_counter()
        if val_scans and cfg.val_interval and (it % cfg.val_interval == 0 or it == cfg.iterations):
            conf = evaluate_scans(net, val_scans, val_truth, cfg.predict_batch)
            rep = report_from_confusion(conf, classes)
            score = rep.median if not math.isnan(rep.median) else -1.0
            val_history.append({"iter": it, "median": rep.median, "nonzero_fraction": rep.nonzero_fraction})
            if score > best_score:
                best_score, best_iter = score, it
                best_state = copy.deepcopy(net.state())
        if out is not None and cfg.checkpoint_interval and it % cfg.checkpoint_interval == 0:
            checkpoint.save(out / f"checkpoint_{it:06d}.bin", net.state(), {"iteration": it})
        dt = time.perf_counter() - te
        eval_time += dt
        t_last += dt
    elapsed = time.perf_counter() - t0 - eval_time
    final = copy.deepcopy(net.state())
    if best_state is None:
        best_state, best_iter = final, cfg.iterations
    return TrainResult(best_state, final, history, val_history, best_iter, elapsed / cfg.iterations)


def _check_finite(report, it: int) -> None:
    heads = [("target", report.target)] + [(f"context_{k + 1}", h) for k, h in enumerate(report.contexts)]
    for name, h in heads:
        for comp in ("dice", "xent"):
            v = getattr(h, comp)
            if not np.isfinite(v):
                raise TrainingError(f"non-finite loss at iteration {it}: head={name} component={comp} value={v}")


def write_history(history: Sequence[dict], path) -> None:
    if not history:
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(history[0].keys()))
        w.writeheader()
        w.writerows(history)


# -- cross-validation ---------------------------------------------------------------

ABLATION_COLUMNS = ["config", "target_fov", "context_fovs", "median_dsc", "q84_minus", "q16_minus",
                    "nonzero_pct", "params", "input_voxels", "sec_per_iter"]


@dataclass
class AblationRow:
    config: NetworkConfig
    report: MetricsReport
    params: int
    sec_per_iter: float
    fold_results: list[TrainResult] = field(default_factory=list)

    def as_dict(self) -> dict:
        cfg, r = self.config, self.report
        fov = "x".join(str(s) for s in cfg.target_size)
        ctx = "-".join(str(cfg.target_size[0] * 2**k) for k in cfg.kappas) or "---"
        return {
            "config": cfg.config_label,
            "target_fov": fov,
            "context_fovs": ctx,
            "median_dsc": r.median,
            "q84_minus": r.q84 - r.median,
            "q16_minus": r.median - r.q16,
            "nonzero_pct": r.nonzero_fraction,
            "params": self.params,
            "input_voxels": count_inputs(cfg),
            "sec_per_iter": self.sec_per_iter,
        }


def run_cross_validation(configs: Sequence[NetworkConfig], dataset, folds: FoldPlan, train_config: TrainConfig,
                         fold_ids: Sequence[int] | None = None, init_seed: int | None = None,
                         progress: Callable[[dict], None] | None = None) -> list[AblationRow]:
    """Train every config on every selected fold; pool test-scan confusion matrices per config.

    ``dataset`` is a sequence of objects with ``scan_id``, ``image`` and ``labels``.
    """
    by_id = {s.scan_id: s for s in dataset}
    folds.check()
    fold_ids = list(range(len(folds.folds))) if fold_ids is None else list(fold_ids)
    rows = []
    for cfg in configs:
        spec = PatchSpec.from_config(cfg)
        prepared = {i: prepare_scan(i, s.image, s.labels, spec, train_config.norm_window) for i, s in by_id.items()}
        truth = {i: s.labels.data for i, s in by_id.items()}
        C = cfg.class_count
        conf = np.zeros((C, C), dtype=np.int64)
        results = []
        params = 0
        for fi in fold_ids:
            fold = folds.folds[fi]
            if set(fold.train) & set(fold.test):
                raise ValueError(f"fold {fi}: scan in both train and test")
            seed = train_config.seed if init_seed is None else init_seed
            net = build(cfg, seed=seed)
            params = net.count_params()
            res = train(net, [prepared[i] for i in fold.train], train_config,
                        [prepared[i] for i in fold.val], truth, progress=progress)
            net.load_state(res.state)
            conf += evaluate_scans(net, [prepared[i] for i in fold.test], truth, train_config.predict_batch)
            results.append(res)
        classes = ClassMap.generic(C)
        report = report_from_confusion(conf, classes)
        spi = float(np.mean([r.sec_per_iter for r in results])) if results else 0.0
        rows.append(AblationRow(cfg, report, params, spi, results))
    return rows


def write_ablation(rows: Sequence[AblationRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow(r.as_dict())
