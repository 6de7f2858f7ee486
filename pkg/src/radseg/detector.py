"""Center-point detector: input preparation, backbone, heads, losses, decoding.

The raw complex cube is log-transformed, its doppler axis is compressed to 3
learned channels, two Cartesian coordinate channels are appended, and a small
encoder-decoder produces stride-4 features feeding three regressor heads:
a sigmoid heatmap of object centers, sub-cell center offsets, and the mean
doppler bin of each object.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import ContractViolation, FormatError, GradientError, ValidationError
from .geometry import bin_to_cartesian

SIGMA_RANGE = 1.0 / 3.0  # heatmap std along the range axis (radius 1)
SIGMA_ANGLE = 1.0 / 2.0  # heatmap std along the angle axis
CLAMP = 1e-7


def log_transform(cube):
    """Power-law compression of the complex cube: 10*log10(|I|^2 + 1)."""
    mag2 = cube.values.real**2 + cube.values.imag**2
    return 10.0 * np.log10(mag2 + 1.0)


@dataclass
class DetectionTargets:
    heatmap: np.ndarray  # (Hs, Ws) in [0, 1], exactly 1 at center cells
    offset: np.ndarray  # (2, Hs, Ws), components in [0, 1)
    doppler: np.ndarray  # (Hs, Ws), mean doppler bin at center cells
    center_mask: np.ndarray  # bool (Hs, Ws)
    stride: int


@dataclass
class Detection:
    x: float
    y: float
    score: float
    doppler: float


def build_targets(labels, stride, geometry):
    rmax, amax = geometry.range_bins, geometry.angle_bins
    if rmax % stride or amax % stride:
        raise ContractViolation("stride must divide the range and angle extents")
    hs, ws = rmax // stride, amax // stride
    heatmap = np.zeros((hs, ws))
    offset = np.zeros((2, hs, ws))
    doppler = np.zeros((hs, ws))
    mask = np.zeros((hs, ws), dtype=bool)
    ii = np.arange(hs)[:, None]
    jj = np.arange(ws)[None, :]
    for obj in labels.objects:
        pb = np.array(obj.center_bins) / stride
        pi, pj = int(math.floor(pb[0])), int(math.floor(pb[1]))
        if not (0 <= pi < hs and 0 <= pj < ws):
            raise ValidationError(f"object center {obj.center_bins} outside the cube")
        kern = np.exp(
            -((ii - pi) ** 2) / (2.0 * SIGMA_RANGE**2)
            - ((jj - pj) ** 2) / (2.0 * SIGMA_ANGLE**2)
        )
        np.maximum(heatmap, kern, out=heatmap)
        offset[0, pi, pj] = pb[0] - pi
        offset[1, pi, pj] = pb[1] - pj
        doppler[pi, pj] = obj.mean_doppler
        mask[pi, pj] = True
    if int(mask.sum()) != len(labels.objects):
        raise ValidationError("low-resolution centers collide between objects")
    return DetectionTargets(heatmap, offset, doppler, mask, stride)


# ---------------------------------------------------------------------------
# Losses (value + gradient w.r.t. the head outputs)
# ---------------------------------------------------------------------------


def _focal(y_hat, heatmap, center_mask, alpha, beta):
    y_hat = np.asarray(y_hat, dtype=np.float64)
    n = int(center_mask.sum())
    grad = np.zeros_like(y_hat)
    if n == 0:
        return 0.0, grad
    yc = np.clip(y_hat, CLAMP, 1.0 - CLAMP)
    inside = (y_hat > CLAMP) & (y_hat < 1.0 - CLAMP)
    pos = center_mask
    neg = ~center_mask
    pos_term = (1.0 - yc) ** alpha * np.log(yc)
    neg_term = (1.0 - heatmap) ** beta * yc**alpha * np.log1p(-yc)
    loss = -(pos_term[pos].sum() + neg_term[neg].sum()) / n
    dpos = -alpha * (1.0 - yc) ** (alpha - 1.0) * np.log(yc) + (1.0 - yc) ** alpha / yc
    dneg = (1.0 - heatmap) ** beta * (
        alpha * yc ** (alpha - 1.0) * np.log1p(-yc) - yc**alpha / (1.0 - yc)
    )
    grad[pos] = -dpos[pos] / n
    grad[neg] = -dneg[neg] / n
    grad *= inside
    return float(loss), grad


def focal_loss(y_hat, targets, alpha=2.0, beta=4.0):
    return _focal(y_hat, targets.heatmap, targets.center_mask, alpha, beta)[0]


def _masked_l1(pred, target, center_mask):
    pred = np.asarray(pred, dtype=np.float64)
    n = int(center_mask.sum())
    grad = np.zeros_like(pred)
    if n == 0:
        return 0.0, grad
    mask = np.broadcast_to(center_mask, pred.shape)
    diff = np.where(mask, pred - target, 0.0)
    loss = np.abs(diff).sum() / n
    grad = np.sign(diff) / n
    return float(loss), grad


def offset_loss(o_hat, targets):
    return _masked_l1(o_hat, targets.offset, targets.center_mask)[0]


def doppler_loss(d_hat, targets):
    return _masked_l1(d_hat, targets.doppler, targets.center_mask)[0]


def total_detection_loss(y_hat, o_hat, d_hat, targets, lambda_o=1.0, lambda_d=1.0):
    return (
        focal_loss(y_hat, targets)
        + lambda_o * offset_loss(o_hat, targets)
        + lambda_d * doppler_loss(d_hat, targets)
    )


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------


class ConvBNReLU(nn.Module):
    def __init__(self, in_ch, out_ch, stride, rng):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, stride=stride, bias=False, rng=rng)
        self.bn = nn.BatchNorm(out_ch)
        self.act = nn.ReLU()

    def forward(self, x):
        return self.act.forward(self.bn.forward(self.conv.forward(x)))

    def backward(self, g):
        return self.conv.backward(self.bn.backward(self.act.backward(g)))


class Head(nn.Module):
    """3x3 conv (64 ch) + ReLU + 1x1 conv; zero-init final layer."""

    def __init__(self, in_ch, hidden, out_ch, rng):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, hidden, 3, rng=rng)
        self.act = nn.ReLU()
        self.proj = nn.Conv2d(hidden, out_ch, 1, rng=rng)
        self.proj.weight.data[...] = 0.0

    def forward(self, x):
        return self.proj.forward(self.act.forward(self.conv.forward(x)))

    def backward(self, g):
        return self.conv.backward(self.act.backward(self.proj.backward(g)))


class DetectorNet(nn.Module):
    """Doppler compression + encoder-decoder backbone + three heads.

    Output stride is 4: the encoder downsamples three times and the decoder
    upsamples once, adding a skip connection from the second-to-last encoder
    block. Channel widths are configurable so pruned variants can be rebuilt.
    """

    STRIDE = 4

    def __init__(self, geometry, channels=(16, 32, 64, 64), head_hidden=64, seed=0):
        super().__init__()
        if geometry.range_bins % 8 or geometry.angle_bins % 8:
            raise ContractViolation("range/angle extents must be divisible by 8")
        rng = np.random.default_rng(seed)
        c1, c2, c3, c4 = channels
        self.geometry = geometry
        self.channels = tuple(channels)
        self.head_hidden = head_hidden
        self.compress = nn.Conv2d(geometry.doppler_bins, 3, 1, rng=rng)
        self.enc1 = ConvBNReLU(5, c1, 1, rng)
        self.enc2 = ConvBNReLU(c1, c2, 2, rng)
        self.enc3 = ConvBNReLU(c2, c3, 2, rng)
        self.enc4 = ConvBNReLU(c3, c4, 2, rng)
        self.up = nn.UpsampleNearest2x()
        self.dec = ConvBNReLU(c4, c3, 1, rng)
        self.heat_head = Head(c3, head_hidden, 1, rng)
        self.off_head = Head(c3, head_hidden, 2, rng)
        self.dop_head = Head(c3, head_hidden, 1, rng)
        self.sigmoid = nn.Sigmoid()
        # constant coordinate channels, normalized to [-1, 1] by max_range
        rr, aa = np.meshgrid(
            np.arange(geometry.range_bins), np.arange(geometry.angle_bins), indexing="ij"
        )
        xs, ys = bin_to_cartesian(rr, aa, geometry)
        self._coords = np.stack([xs, ys]) / geometry.max_range

    def arch(self):
        return {
            "type": "detector",
            "channels": list(self.channels),
            "head_hidden": self.head_hidden,
            "geometry": self.geometry.to_dict(),
        }

    def prunable_bns(self):
        """BN layers whose channels may be removed; join members share a mask."""
        return {
            "enc1": self.enc1.bn,
            "enc2": self.enc2.bn,
            "enc3": self.enc3.bn,
            "enc4": self.enc4.bn,
            "dec": self.dec.bn,
        }

    def prepare_input(self, log_cube):
        """(R,A,D) log cube(s) -> 5-channel map: 3 compressed doppler + (x, y)."""
        lc = np.asarray(log_cube, dtype=np.float64)
        single = lc.ndim == 3
        if single:
            lc = lc[None]
        if lc.shape[1:] != self.geometry.shape:
            raise ContractViolation(
                f"log cube shape {lc.shape[1:]} != geometry {self.geometry.shape}"
            )
        dra = np.ascontiguousarray(np.moveaxis(lc, 3, 1))  # (B, D, R, A)
        comp = self.compress.forward(dra)
        coords = np.broadcast_to(self._coords, (comp.shape[0],) + self._coords.shape)
        out = np.concatenate([comp, coords], axis=1)
        return out[0] if single else out

    def forward(self, x):
        """5-channel input -> (heatmap, offsets, doppler) at stride 4."""
        x, single = (x[None], True) if x.ndim == 3 else (x, False)
        h1 = self.enc1.forward(x)
        h2 = self.enc2.forward(h1)
        h3 = self.enc3.forward(h2)
        h4 = self.enc4.forward(h3)
        feat = self.dec.forward(self.up.forward(h4)) + h3
        y = self.sigmoid.forward(self.heat_head.forward(feat)[:, 0])
        o = self.off_head.forward(feat)
        d = self.dop_head.forward(feat)[:, 0]
        if single:
            return y[0], o[0], d[0]
        return y, o, d

    def backward(self, gy, go, gd):
        if gy.ndim == 2:
            gy, go, gd = gy[None], go[None], gd[None]
        gfeat = self.heat_head.backward(self.sigmoid.backward(gy)[:, None])
        gfeat = gfeat + self.off_head.backward(go)
        gfeat = gfeat + self.dop_head.backward(gd[:, None])
        g4 = self.up.backward(self.dec.backward(gfeat))
        g3 = self.enc4.backward(g4) + gfeat  # skip connection
        gx = self.enc1.backward(self.enc2.backward(self.enc3.backward(g3)))
        return gx

    def backward_to_cube(self, gy, go, gd):
        """Extends backward through the doppler-compression convolution."""
        gx = self.backward(gy, go, gd)
        self.compress.backward(gx[..., :3, :, :] if gx.ndim == 4 else gx[:3])

    def forward_cube(self, log_cube):
        return self.forward(self.prepare_input(log_cube))


def backbone_forward(model, x):
    """Stride-4 feature map for a prepared 5-channel input."""
    x, single = (x[None], True) if x.ndim == 3 else (x, False)
    h3 = model.enc3.forward(model.enc2.forward(model.enc1.forward(x)))
    h4 = model.enc4.forward(h3)
    feat = model.dec.forward(model.up.forward(h4)) + h3
    return feat[0] if single else feat


def decode_peaks(y_hat, o_hat, d_hat, tau_peak, k_max, geometry, stride=DetectorNet.STRIDE):
    """3x3 local maxima above threshold -> center detections in meters."""
    if not (0.0 < tau_peak < 1.0):
        raise ContractViolation("tau_peak must lie in (0, 1)")
    if k_max < 1:
        raise ContractViolation("k_max must be >= 1")
    y = np.asarray(y_hat, dtype=np.float64)
    hs, ws = y.shape
    padded = np.full((hs + 2, ws + 2), -np.inf)
    padded[1:-1, 1:-1] = y
    neigh = np.stack(
        [padded[1 + di : 1 + di + hs, 1 + dj : 1 + dj + ws]
         for di in (-1, 0, 1) for dj in (-1, 0, 1)]
    ).max(axis=0)
    is_peak = (y >= neigh) & (y > tau_peak)
    idx = np.flatnonzero(is_peak)
    order = np.lexsort((idx, -y.ravel()[idx]))
    dets = []
    for flat in idx[order][:k_max]:
        i, j = divmod(int(flat), ws)
        rb = np.clip((i + o_hat[0, i, j]) * stride, 0.0, geometry.range_bins - 1e-9)
        ab = np.clip((j + o_hat[1, i, j]) * stride, 0.0, geometry.angle_bins - 1e-9)
        x, yy = bin_to_cartesian(float(rb), float(ab), geometry)
        dets.append(Detection(x=x, y=yy, score=float(y[i, j]), doppler=float(d_hat[i, j])))
    return dets


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class DetectorTrainConfig:
    epochs: int = 60
    lr: float = 1e-3
    lr_decay: float = 0.1
    decay_every_epochs: int = 20
    batch_size: int = 4
    seed: int = 0
    lambda_offset: float = 1.0
    lambda_doppler: float = 1.0
    lambda_sparsity: float = 0.0
    tau_peak: float = 0.3
    k_max: int = 32
    val_every_epochs: int = 5
    channels: tuple = (16, 32, 64, 64)
    distance_thresholds: tuple = (1.0, 3.0, 5.0)


@dataclass
class FrameTensors:
    log_cube: np.ndarray
    targets: DetectionTargets
    labels: object


def load_split_tensors(manifest, split, stride=DetectorNet.STRIDE):
    geometry = None
    frames = []
    for fid in manifest.splits[split]:
        cube, labels = manifest.load_frame(fid)
        geometry = cube.geometry
        frames.append(
            FrameTensors(log_transform(cube), build_targets(labels, stride, geometry), labels)
        )
    return frames, geometry


def batch_losses(model, batch, cfg, train=True):
    """Forward + loss on a list of FrameTensors; returns parts and head grads."""
    x = np.stack([f.log_cube for f in batch])
    inp = model.prepare_input(x)
    y, o, d = model.forward(inp)
    lh = lo = ld = 0.0
    gy, go, gd = np.zeros_like(y), np.zeros_like(o), np.zeros_like(d)
    for b, f in enumerate(batch):
        t = f.targets
        v, g = _focal(y[b], t.heatmap, t.center_mask, 2.0, 4.0)
        lh += v
        gy[b] = g
        v, g = _masked_l1(o[b], t.offset, t.center_mask)
        lo += v
        go[b] = cfg.lambda_offset * g
        v, g = _masked_l1(d[b], t.doppler, t.center_mask)
        ld += v
        gd[b] = cfg.lambda_doppler * g
    n = len(batch)
    lh, lo, ld = lh / n, lo / n, ld / n
    gy /= n
    go /= n
    gd /= n
    parts = {"L_h": lh, "L_o": lo, "L_D": ld,
             "L_det": lh + cfg.lambda_offset * lo + cfg.lambda_doppler * ld}
    if train:
        model.backward_to_cube(gy, go, gd)
    return parts


def _apply_sparsity(model, lam):
    total = 0.0
    for bn in model.prunable_bns().values():
        g = bn.gamma.data
        total += float(np.abs(g).sum())
        bn.gamma.add_grad(lam * np.sign(g))
    return total


def evaluate_detection_map(model, frames, geometry, cfg):
    """mAP over the configured distance thresholds; import-light helper."""
    from .evaluation import evaluate_detections_ap

    model.eval()
    per_frame = []
    for f in frames:
        y, o, d = model.forward_cube(f.log_cube)
        dets = decode_peaks(y, o, d, cfg.tau_peak, cfg.k_max, geometry)
        per_frame.append((dets, f.labels))
    aps = {k: evaluate_detections_ap(per_frame, k) for k in cfg.distance_thresholds}
    vals = [v for v in aps.values() if v is not None]
    return (float(np.mean(vals)) if vals else None), aps


def train_detector(manifest, cfg, ckpt_path, log_path=None, model=None, geometry=None,
                   train_frames=None, val_frames=None, step_start=0, log_mode="w"):
    """Train the detector; returns (model, best val mAP). Saves the best-mAP
    checkpoint to ``ckpt_path`` and newline-JSON training records to ``log_path``."""
    if train_frames is None:
        train_frames, geometry = load_split_tensors(manifest, "train")
    if val_frames is None:
        val_frames, _ = load_split_tensors(manifest, "val") if "val" in manifest.splits else ([], None)
    if model is None:
        model = DetectorNet(geometry, channels=cfg.channels, seed=cfg.seed)
    opt = nn.Adam(model.parameters(), lr=cfg.lr)
    order_rng = cfg.seed + 1
    log_fh = open(log_path, log_mode, encoding="utf-8") if log_path else None
    best = (-1.0, None)
    last_good = None
    step = step_start
    t0 = time.time()
    try:
        for epoch in range(cfg.epochs):
            lr = cfg.lr * (cfg.lr_decay ** (epoch // cfg.decay_every_epochs))
            opt.lr = lr
            perm = iterate_split_order(len(train_frames), order_rng + epoch)
            model.train()
            for start in range(0, len(train_frames), cfg.batch_size):
                batch = [train_frames[i] for i in perm[start : start + cfg.batch_size]]
                model.zero_grad()
                parts = batch_losses(model, batch, cfg, train=True)
                if cfg.lambda_sparsity > 0:
                    parts["L_det"] += cfg.lambda_sparsity * _apply_sparsity(
                        model, cfg.lambda_sparsity
                    )
                try:
                    opt.step()
                except GradientError:
                    raise
                step += 1
                if log_fh and step % 25 == 0:
                    rec = {"epoch": epoch, "step": step, "lr": lr, "val_mAP": None}
                    rec.update({k: round(v, 6) for k, v in parts.items()})
                    log_fh.write(json.dumps(rec) + "\n")
                    log_fh.flush()
            last_good = {k: v.copy() for k, v in model.named_state().items()}
            if val_frames and (
                (epoch + 1) % cfg.val_every_epochs == 0 or epoch == cfg.epochs - 1
            ):
                vmap, _ = evaluate_detection_map(model, val_frames, geometry, cfg)
                if log_fh:
                    log_fh.write(json.dumps(
                        {"epoch": epoch, "step": step, "lr": lr, "val_mAP": vmap,
                         "elapsed_s": round(time.time() - t0, 1)}) + "\n")
                    log_fh.flush()
                if vmap is not None and vmap > best[0]:
                    best = (vmap, {k: v.copy() for k, v in model.named_state().items()})
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


def iterate_split_order(n, seed):
    rng = np.random.default_rng(seed)
    order = list(range(n))
    for i in range(n - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        order[i], order[j] = order[j], order[i]
    return order


def load_detector(ckpt_path):
    from .geometry import RadarGeometry

    state, meta = nn.load_checkpoint(ckpt_path)
    if meta.get("type") != "detector":
        raise FormatError(f"{ckpt_path} is not a detector checkpoint")
    model = DetectorNet(
        RadarGeometry.from_dict(meta["geometry"]),
        channels=tuple(meta["channels"]),
        head_hidden=meta["head_hidden"],
    )
    model.load_state(state)
    model.eval()
    return model
