"""Channel pruning by batch-norm scale magnitude (network slimming).

Sparsity-train with an L1 penalty on the BN scales, drop the globally
smallest ones, physically rebuild a narrower network, then fine-tune.
Channels joined by a skip or residual are scored and pruned together so
additive merges stay valid; heads and classifiers are never pruned.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .detector import DetectorNet, DetectorTrainConfig, train_detector
from .errors import ContractViolation
from .sparse_seg import SegNet


@dataclass
class PruneSpec:
    lambda_s: float = 1e-4
    prune_fraction: float = 0.4
    fine_tune_epochs: int = 50

    def __post_init__(self):
        if not (0.0 <= self.prune_fraction < 1.0):
            raise ContractViolation("prune_fraction must lie in [0, 1)")


def sparsity_loss(model):
    """Sum of |gamma| over all prunable batch-norm channels."""
    return float(sum(np.abs(bn.gamma.data).sum() for bn in model.prunable_bns().values()))


def _join_groups(model):
    if isinstance(model, DetectorNet):
        return [("enc3", "dec")]
    if isinstance(model, SegNet):
        return [("block1", "block4"), ("block2", "block3")]
    raise ContractViolation(f"no pruning wiring known for {type(model).__name__}")


def select_channels(model, prune_fraction):
    """Smallest-|gamma|-first channel selection under a global budget.

    Channels tied by an additive join (skip or residual) are scored together
    by their mean |gamma| and pruned together, counting every member against
    the budget of floor(fraction * total channels). A unit is skipped when it
    would overshoot the budget; every layer keeps at least one channel.
    """
    if not (0.0 <= prune_fraction < 1.0):
        raise ContractViolation("prune_fraction must lie in [0, 1)")
    bns = model.prunable_bns()
    group_of = {}
    for group in _join_groups(model):
        for n in group:
            group_of[n] = group
    units = []  # (score, [(layer, channel), ...]) in deterministic layer order
    seen = set()
    total = 0
    for name, bn in bns.items():
        total += bn.gamma.data.size
        if name in seen:
            continue
        group = group_of.get(name, (name,))
        seen.update(group)
        score = np.mean([np.abs(bns[n].gamma.data) for n in group], axis=0)
        for ch in range(score.size):
            units.append((float(score[ch]), [(n, ch) for n in group]))
    budget = int(np.floor(prune_fraction * total))
    masks = {n: np.ones(bn.gamma.data.size, dtype=bool) for n, bn in bns.items()}
    order = np.argsort([u[0] for u in units], kind="stable")
    removed = 0
    for idx in order:
        members = units[idx][1]
        if removed + len(members) > budget:
            continue
        if any(masks[n].sum() <= 1 for n, _ in members):
            continue  # never empty a layer
        for n, ch in members:
            masks[n][ch] = False
        removed += len(members)
    return masks


def apply_channel_masks_inplace(model, masks):
    """Zero gamma and beta of the pruned channels (the masked reference model:
    in eval mode its outputs equal the rebuilt pruned model's exactly)."""
    for name, bn in model.prunable_bns().items():
        drop = ~masks[name]
        bn.gamma.data[drop] = 0.0
        bn.beta.data[drop] = 0.0
    return model


def parameter_count(model):
    return int(sum(p.data.size for p in model.parameters()))


def _slice_bn(dst, src, mask):
    dst.gamma.data[...] = src.gamma.data[mask]
    dst.beta.data[...] = src.beta.data[mask]
    dst.running_mean[...] = src.running_mean[mask]
    dst.running_var[...] = src.running_var[mask]


def _copy_conv(dst, src, out_mask=None, in_mask=None):
    w = src.weight.data
    if w.ndim == 3:  # sparse conv layout: (offset, in, out)
        if in_mask is not None:
            w = w[:, in_mask]
        if out_mask is not None:
            w = w[:, :, out_mask]
    else:  # dense conv layout: (out, in, kh, kw)
        if out_mask is not None:
            w = w[out_mask]
        if in_mask is not None:
            w = w[:, in_mask]
    dst.weight.data[...] = w
    if src.bias is not None:
        b = src.bias.data if out_mask is None else src.bias.data[out_mask]
        dst.bias.data[...] = b


def rebuild_pruned(model, masks):
    """New, physically smaller model; pruned slices removed from every tensor."""
    for name, bn in model.prunable_bns().items():
        if masks[name].size != bn.gamma.data.size:
            raise ContractViolation(f"mask for {name} has the wrong length")
    if isinstance(model, DetectorNet):
        return _rebuild_detector(model, masks)
    if isinstance(model, SegNet):
        return _rebuild_segnet(model, masks)
    raise ContractViolation(f"no pruning wiring known for {type(model).__name__}")


def _rebuild_detector(model, masks):
    k1, k2, k3, k4 = masks["enc1"], masks["enc2"], masks["enc3"], masks["enc4"]
    kd = masks["dec"]
    if not np.array_equal(k3, kd):
        raise ContractViolation("skip-connection masks enc3/dec must agree")
    new = DetectorNet(
        model.geometry,
        channels=(int(k1.sum()), int(k2.sum()), int(k3.sum()), int(k4.sum())),
        head_hidden=model.head_hidden,
    )
    _copy_conv(new.compress, model.compress)
    _copy_conv(new.enc1.conv, model.enc1.conv, out_mask=k1)
    _slice_bn(new.enc1.bn, model.enc1.bn, k1)
    _copy_conv(new.enc2.conv, model.enc2.conv, out_mask=k2, in_mask=k1)
    _slice_bn(new.enc2.bn, model.enc2.bn, k2)
    _copy_conv(new.enc3.conv, model.enc3.conv, out_mask=k3, in_mask=k2)
    _slice_bn(new.enc3.bn, model.enc3.bn, k3)
    _copy_conv(new.enc4.conv, model.enc4.conv, out_mask=k4, in_mask=k3)
    _slice_bn(new.enc4.bn, model.enc4.bn, k4)
    _copy_conv(new.dec.conv, model.dec.conv, out_mask=kd, in_mask=k4)
    _slice_bn(new.dec.bn, model.dec.bn, kd)
    for head in ("heat_head", "off_head", "dop_head"):
        _copy_conv(getattr(new, head).conv, getattr(model, head).conv, in_mask=k3)
        _copy_conv(getattr(new, head).proj, getattr(model, head).proj)
    new.eval() if not model.training else new.train()
    return new


def _rebuild_segnet(model, masks):
    k14, k23 = masks["block1"], masks["block2"]
    if not (np.array_equal(k14, masks["block4"]) and np.array_equal(k23, masks["block3"])):
        raise ContractViolation("residual masks must agree within each join group")
    new = SegNet(
        in_features=model.in_features,
        channels=(int(k14.sum()), int(k23.sum()), int(k23.sum()), int(k14.sum())),
        num_classes=model.num_classes,
    )
    _copy_conv(new.block1.conv, model.block1.conv, out_mask=k14)
    _slice_bn(new.block1.bn, model.block1.bn, k14)
    _copy_conv(new.block2.conv, model.block2.conv, out_mask=k23, in_mask=k14)
    _slice_bn(new.block2.bn, model.block2.bn, k23)
    _copy_conv(new.block3.conv, model.block3.conv, out_mask=k23, in_mask=k23)
    _slice_bn(new.block3.bn, model.block3.bn, k23)
    _copy_conv(new.block4.conv, model.block4.conv, out_mask=k14, in_mask=k23)
    _slice_bn(new.block4.bn, model.block4.bn, k14)
    new.classifier.weight.data[...] = model.classifier.weight.data[k14]
    new.classifier.bias.data[...] = model.classifier.bias.data
    new.eval() if not model.training else new.train()
    return new


def prune_report(model, pruned, masks):
    return {
        "per_layer": {
            name: {"kept": int(m.sum()), "total": int(m.size)} for name, m in masks.items()
        },
        "params_before": parameter_count(model),
        "params_after": parameter_count(pruned),
        "param_ratio": parameter_count(pruned) / parameter_count(model),
    }


def fine_tune(pruned_model, manifest, cfg, ckpt_path, log_path=None, **frame_kwargs):
    """Fine-tune a pruned detector; returns (model, best val mAP)."""
    if not isinstance(cfg, DetectorTrainConfig):
        raise ContractViolation("fine_tune expects a DetectorTrainConfig")
    return train_detector(
        manifest, cfg, ckpt_path, log_path=log_path, model=pruned_model, **frame_kwargs
    )
