"""Submanifold sparse convolution network over grown ROI points.

Active sites are the RAD cells of the sparse point set; the active set is
invariant through the whole network, so the 3x3x3 kernel map is built once
per frame from a coordinate hash and shared by every layer.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import ContractViolation, FormatError, GradientError
from .simulate import NUM_CLASSES

KERNEL_OFFSETS = [
    (dr, da, dd)
    for dr in (-1, 0, 1)
    for da in (-1, 0, 1)
    for dd in (-1, 0, 1)
]
CENTER_OFFSET = KERNEL_OFFSETS.index((0, 0, 0))


class SparseGrid:
    """Active sites (unique integer 3-d coords) with per-site feature vectors."""

    def __init__(self, coords, feats, kernel_map=None):
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        if len({tuple(c) for c in coords.tolist()}) != len(coords):
            raise ContractViolation("duplicate coordinates in sparse grid")
        self.coords = coords
        feats = np.asarray(feats, dtype=np.float64)
        self.feats = feats.reshape(len(coords), -1) if len(coords) else feats.reshape(0, feats.shape[-1] if feats.ndim else 0)
        self._kmap = kernel_map

    def __len__(self):
        return len(self.coords)

    def with_feats(self, feats):
        g = SparseGrid.__new__(SparseGrid)
        g.coords = self.coords
        g.feats = np.asarray(feats, dtype=np.float64)
        g._kmap = self._kmap
        return g

    def kernel_map(self):
        """Per-offset (input site, output site) index pairs; built lazily."""
        if self._kmap is None:
            index = {tuple(c): i for i, c in enumerate(self.coords.tolist())}
            kmap = []
            for off in KERNEL_OFFSETS:
                pairs_in, pairs_out = [], []
                for out_i, c in enumerate(self.coords.tolist()):
                    j = index.get((c[0] + off[0], c[1] + off[1], c[2] + off[2]))
                    if j is not None:
                        pairs_in.append(j)
                        pairs_out.append(out_i)
                kmap.append(
                    (np.asarray(pairs_in, dtype=np.int64), np.asarray(pairs_out, dtype=np.int64))
                )
            total = sum(len(a) for a, _ in kmap)
            assert total <= 27 * len(self), "kernel map exceeds the 27N pair bound"
            self._kmap = kmap
        return self._kmap


def voxelize(points):
    """One active site per ROI point, in point order (exact inverse mapping)."""
    if points.features is None:
        raise ContractViolation("point set has no features; run to_point_cloud first")
    return SparseGrid(points.coords, points.features)


class SubmanifoldConv3(nn.Module):
    """3x3x3 sparse convolution; output active set equals the input active set."""

    def __init__(self, in_ch, out_ch, rng=None):
        super().__init__()
        if rng is None:
            rng = np.random.default_rng(0)
        self.in_ch, self.out_ch = in_ch, out_ch
        fan_in = in_ch * len(KERNEL_OFFSETS)
        self.weight = nn.Parameter(
            nn.kaiming_uniform((len(KERNEL_OFFSETS), in_ch, out_ch), fan_in, rng), "weight"
        )
        self.bias = nn.Parameter(np.zeros(out_ch), "bias")
        self._cache = None

    def forward(self, grid):
        if grid.feats.shape[1] != self.in_ch:
            raise ContractViolation(
                f"grid features have width {grid.feats.shape[1]}, expected {self.in_ch}"
            )
        kmap = grid.kernel_map()
        out = grid.feats @ self.weight.data[CENTER_OFFSET] + self.bias.data
        for o, (src, dst) in enumerate(kmap):
            if o == CENTER_OFFSET or len(src) == 0:
                continue
            np.add.at(out, dst, grid.feats[src] @ self.weight.data[o])
        self._cache = (grid.feats, kmap)
        return grid.with_feats(out)

    def backward(self, gout):
        feats, kmap = self._cache
        gout = np.asarray(gout, dtype=np.float64)
        gfeats = gout @ self.weight.data[CENTER_OFFSET].T
        gw = np.zeros_like(self.weight.data)
        gw[CENTER_OFFSET] = feats.T @ gout
        for o, (src, dst) in enumerate(kmap):
            if o == CENTER_OFFSET or len(src) == 0:
                continue
            gw[o] = feats[src].T @ gout[dst]
            np.add.at(gfeats, src, gout[dst] @ self.weight.data[o].T)
        self.weight.add_grad(gw)
        self.bias.add_grad(gout.sum(axis=0))
        return gfeats


class SparseBlock(nn.Module):
    def __init__(self, in_ch, out_ch, rng):
        super().__init__()
        self.conv = SubmanifoldConv3(in_ch, out_ch, rng)
        self.bn = nn.BatchNorm(out_ch, channel_axis=1)
        self.act = nn.ReLU()

    def forward(self, grid):
        h = self.conv.forward(grid)
        return h.with_feats(self.act.forward(self.bn.forward(h.feats)))

    def backward(self, g):
        return self.conv.backward(self.bn.backward(self.act.backward(g)))


class SegNet(nn.Module):
    """Four sparse conv blocks (16-32-32-16) with two residual links,
    then a site-wise linear classifier to the five class logits."""

    def __init__(self, in_features=4, channels=(16, 32, 32, 16), num_classes=NUM_CLASSES, seed=0):
        super().__init__()
        rng = np.random.default_rng(seed)
        c1, c2, c3, c4 = channels
        if c2 != c3 or c1 != c4:
            raise ContractViolation("residual links require matching channel widths")
        self.in_features = in_features
        self.channels = tuple(channels)
        self.num_classes = num_classes
        self.block1 = SparseBlock(in_features, c1, rng)
        self.block2 = SparseBlock(c1, c2, rng)
        self.block3 = SparseBlock(c2, c3, rng)
        self.block4 = SparseBlock(c3, c4, rng)
        self.classifier = nn.Linear(c4, num_classes, rng)

    def arch(self):
        return {
            "type": "segmenter",
            "in_features": self.in_features,
            "channels": list(self.channels),
            "num_classes": self.num_classes,
        }

    def prunable_bns(self):
        # residual partners share channel fate: (block1, block4) and (block2, block3)
        return {
            "block1": self.block1.bn,
            "block2": self.block2.bn,
            "block3": self.block3.bn,
            "block4": self.block4.bn,
        }

    def forward(self, grid):
        if len(grid) == 0:
            return np.zeros((0, self.num_classes))
        h1 = self.block1.forward(grid)
        h2 = self.block2.forward(h1)
        h3 = self.block3.forward(h2)
        h3s = h3.with_feats(h3.feats + h2.feats)
        h4 = self.block4.forward(h3s)
        out_feats = h4.feats + h1.feats
        return self.classifier.forward(out_feats)

    def backward(self, glogits):
        if glogits.shape[0] == 0:
            return
        g4 = self.classifier.backward(glogits)
        g3s = self.block4.backward(g4)
        g2 = self.block3.backward(g3s) + g3s
        g1 = self.block2.backward(g2) + g4  # residual from block1 output
        self.block1.backward(g1)

    def predict(self, grid):
        logits = self.forward(grid)
        return logits, logits.argmax(axis=1) if len(logits) else np.zeros(0, dtype=np.int64)


def seg_loss(logits, labels, class_weights=None, with_grad=False):
    """Weighted mean softmax cross-entropy over points."""
    logits = np.asarray(logits, dtype=np.float64)
    n = logits.shape[0]
    if n == 0:
        return (0.0, np.zeros_like(logits)) if with_grad else 0.0
    labels = np.asarray(labels, dtype=np.int64)
    w = np.ones(n) if class_weights is None else np.asarray(class_weights)[labels]
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1)) + logits.max(axis=1)
    losses = lse - logits[np.arange(n), labels]
    wsum = w.sum()
    loss = float((w * losses).sum() / wsum)
    if not with_grad:
        return loss
    probs = np.exp(shifted)
    probs /= probs.sum(axis=1, keepdims=True)
    grad = probs
    grad[np.arange(n), labels] -= 1.0
    grad *= (w / wsum)[:, None]
    return loss, grad


def inverse_frequency_weights(all_labels, num_classes=NUM_CLASSES):
    counts = np.bincount(np.concatenate(all_labels), minlength=num_classes).astype(np.float64)
    weights = (counts.sum()) / (num_classes * np.maximum(counts, 1.0))
    return weights / weights.mean()


@dataclass
class SegTrainConfig:
    epochs: int = 60
    lr: float = 0.05
    seed: int = 0
    d_thresh: int = 6
    intensity_fraction: float = 0.5
    val_every_epochs: int = 10
    channels: tuple = (16, 32, 32, 16)
    use_class_weights: bool = True


def build_frame_points(cube, labels, grow_cfg, seeds=None):
    """Grow, featurize and label one frame's ROI point set."""
    from .detector import log_transform
    from .region_growing import grow, label_points, seeds_from_labels, to_point_cloud

    log_cube = log_transform(cube)
    if seeds is None:
        seeds = seeds_from_labels(labels, cube.geometry)
    pts = grow(log_cube, seeds, grow_cfg)
    to_point_cloud(pts, cube.geometry, float(log_cube.max()))
    label_points(pts, labels)
    return pts


def train_segmenter(manifest, cfg, ckpt_path, log_path=None, frames=None, val_frames=None,
                    model=None, step_start=0, log_mode="w"):
    """Train the sparse segmenter with ground-truth seeds (teacher forcing).

    ``frames``/``val_frames`` may carry precomputed (SparseGrid, labels) pairs
    to skip the growing pass. Returns (model, best val mIoU or None).
    """
    from .region_growing import GrowConfig

    grow_cfg = GrowConfig(d_thresh=cfg.d_thresh, intensity_fraction=cfg.intensity_fraction)

    def prepare(split):
        out = []
        for fid in manifest.splits[split]:
            cube, labels = manifest.load_frame(fid)
            pts = build_frame_points(cube, labels, grow_cfg)
            out.append((voxelize(pts), pts.labels, labels, cube.geometry))
        return out

    if frames is None:
        frames = prepare("train")
    if val_frames is None:
        val_frames = prepare("val") if "val" in manifest.splits else []

    weights = (
        inverse_frequency_weights([f[1] for f in frames]) if cfg.use_class_weights else None
    )
    if model is None:
        model = SegNet(channels=cfg.channels, seed=cfg.seed)
    opt = nn.Adam(model.parameters(), lr=cfg.lr)
    log_fh = open(log_path, log_mode, encoding="utf-8") if log_path else None
    best = (-1.0, None)
    last_good = None
    step = step_start
    t0 = time.time()
    try:
        from .detector import iterate_split_order

        for epoch in range(cfg.epochs):
            lr = 0.5 * cfg.lr * (1.0 + math.cos(math.pi * epoch / max(cfg.epochs, 1)))
            opt.lr = lr
            model.train()
            for i in iterate_split_order(len(frames), cfg.seed + 1 + epoch):
                grid, labels_i = frames[i][0], frames[i][1]
                if len(grid) == 0:
                    continue
                model.zero_grad()
                logits = model.forward(grid)
                loss, grad = seg_loss(logits, labels_i, weights, with_grad=True)
                model.backward(grad)
                opt.step()
                step += 1
                if log_fh and step % 50 == 0:
                    log_fh.write(json.dumps(
                        {"epoch": epoch, "step": step, "lr": lr, "loss": round(loss, 6)}) + "\n")
                    log_fh.flush()
            last_good = {k: v.copy() for k, v in model.named_state().items()}
            if val_frames and (
                (epoch + 1) % cfg.val_every_epochs == 0 or epoch == cfg.epochs - 1
            ):
                miou = _val_miou(model, val_frames)
                if log_fh:
                    log_fh.write(json.dumps(
                        {"epoch": epoch, "step": step, "val_mIoU": round(miou, 4),
                         "elapsed_s": round(time.time() - t0, 1)}) + "\n")
                    log_fh.flush()
                if miou > best[0]:
                    best = (miou, {k: v.copy() for k, v in model.named_state().items()})
    except GradientError:
        if last_good is not None:
            model.load_state(last_good)
            nn.save_checkpoint(ckpt_path, model.named_state(), model.arch())
        raise
    finally:
        if log_fh:
            log_fh.close()
    if best[1] is not None:
        model.load_state(best[1])
    nn.save_checkpoint(ckpt_path, model.named_state(), model.arch())
    model.eval()
    return model, (best[0] if best[1] is not None else None)


def _val_miou(model, val_frames):
    from .evaluation import IoUAccumulator, project_to_views, views_from_labels

    model.eval()
    acc_ra = IoUAccumulator()
    acc_rd = IoUAccumulator()
    for grid, _, labels, geometry in val_frames:
        logits, _ = model.predict(grid)
        masks = project_to_views(grid.coords, logits, geometry)
        gt = views_from_labels(labels, geometry)
        acc_ra.add(masks.ra_mask, gt.ra_mask)
        acc_rd.add(masks.rd_mask, gt.rd_mask)
    miou_ra = acc_ra.miou()
    miou_rd = acc_rd.miou()
    vals = [v for v in (miou_ra, miou_rd) if v is not None]
    return float(np.mean(vals)) if vals else 0.0


def load_segmenter(ckpt_path):
    state, meta = nn.load_checkpoint(ckpt_path)
    if meta.get("type") != "segmenter":
        raise FormatError(f"{ckpt_path} is not a segmenter checkpoint")
    model = SegNet(
        in_features=meta["in_features"],
        channels=tuple(meta["channels"]),
        num_classes=meta["num_classes"],
    )
    model.load_state(state)
    model.eval()
    return model
