"""Training orchestration: PK batches, AICL total loss, SGD schedule, logs, checkpoints."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import time

import numpy as np
import torch

from .backbone import build_wrimnet, modality_tensor
from .checkpoint import save_checkpoint
from .config import RunConfig, dump_config
from .data import load_manifest, make_pk_batches, map_ordered, preprocess
from .losses import check_cmkic_batch, cls_loss, cmkic_loss, id_loss_p4, total_loss

__all__ = ["TrainingError", "train", "compute_losses", "build_optimizer", "seed_everything", "DTYPES"]

log = logging.getLogger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}


class TrainingError(RuntimeError):
    """Training aborted (non-finite loss or a batch violating the CMKIC precondition)."""


def seed_everything(seed):
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)
    torch.use_deterministic_algorithms(True, warn_only=True)


def build_optimizer(model, cfg: RunConfig):
    opt = cfg.optimizer
    scale = opt.trunk_lr_scale if cfg.network.pretrained_weights_path else 1.0
    trunk_ids = {id(p) for p in model.trunk_parameters()}
    trunk = [p for p in model.parameters() if p.requires_grad and id(p) in trunk_ids]
    rest = [p for p in model.parameters() if p.requires_grad and id(p) not in trunk_ids]
    groups = [{"params": trunk, "lr_scale": scale}, {"params": rest, "lr_scale": 1.0}]
    if opt.kind == "sgd":
        optimizer = torch.optim.SGD(groups, lr=opt.base_lr, momentum=opt.momentum,
                                    weight_decay=opt.weight_decay)
    else:
        optimizer = torch.optim.Adam(groups, lr=opt.base_lr, weight_decay=opt.weight_decay)
    return optimizer


def _set_lr(optimizer, lr):
    for g in optimizer.param_groups:
        g["lr"] = lr * g["lr_scale"]


def compute_losses(bundle, labels, modality, cfg: RunConfig):
    """Per-step loss terms as tensors: ``cls_p5, cmkic_p5, id_p4, total``."""
    lc = cfg.loss
    zero = bundle.rg.new_zeros(())
    cls5 = cls_loss(bundle.p5_logits, labels, lc.label_smoothing)
    cmkic = cmkic_loss(bundle.z, labels, modality, lc) if lc.lambda1 > 0 else zero
    id4 = id_loss_p4(bundle.qg, bundle.p4_logits, labels, lc) if lc.lambda2 > 0 else zero
    return {"cls_p5": cls5, "cmkic_p5": cmkic, "id_p4": id4, "total": total_loss(cls5, cmkic, id4, lc)}


def _load_batch(records, idx, size, cfg, epoch, step, dtype):
    def one(item):
        j, i = item
        return preprocess(records[i].image_path, train=True, seed=[cfg.seed, epoch, step, j], size=size,
                          augment=cfg.augment)

    images = torch.stack(map_ordered(one, list(enumerate(idx)))).to(dtype)
    return images, [records[i].modality for i in idx]


def train(cfg: RunConfig, log_path=None, progress=None):
    """Train per ``cfg``; returns ``(model, summary dict)``.

    Writes ``train_log.jsonl``, ``config.json``, ``ckpt_epochXXX.wrim`` every
    ``checkpoint_every`` epochs and ``final.wrim`` into ``cfg.output_dir``.
    """
    seed_everything(cfg.seed)
    dtype = DTYPES[cfg.precision]
    records, id_map = load_manifest(cfg.data.train_manifest)
    if not records:
        raise TrainingError(f"{cfg.data.train_manifest}: no training records")
    net_cfg = dataclasses.replace(cfg.network, num_classes=len(id_map))
    cfg = dataclasses.replace(cfg, network=net_cfg)
    labels_all = torch.tensor([id_map[r.person_id] for r in records])

    model = build_wrimnet(net_cfg).to(dtype)
    model.train()
    optimizer = build_optimizer(model, cfg)
    os.makedirs(cfg.output_dir, exist_ok=True)
    dump_config(cfg, os.path.join(cfg.output_dir, "config.json"))
    log_path = log_path or os.path.join(cfg.output_dir, "train_log.jsonl")
    size = (net_cfg.input_height, net_cfg.input_width)
    extra = {"id_map": {str(k): v for k, v in id_map.items()}}

    step = 0
    checkpoints = []
    start = time.time()
    with open(log_path, "w", encoding="utf-8") as log_fh:
        for epoch in range(cfg.epochs):
            lr = cfg.optimizer.base_lr * cfg.optimizer.lr_factor(epoch)
            _set_lr(optimizer, lr)
            for bi, idx in enumerate(make_pk_batches(records, cfg.sampler, epoch)):
                images, modality = _load_batch(records, idx, size, cfg, epoch, bi, dtype)
                labels = labels_all[idx]
                mod_t = modality_tensor(modality)
                if cfg.loss.lambda1 > 0:
                    try:
                        check_cmkic_batch(labels, mod_t, cfg.loss.top_k)
                    except ValueError as exc:
                        raise TrainingError(f"epoch {epoch} batch {bi}: {exc}") from None
                bundle = model(images, mod_t)
                try:
                    losses = compute_losses(bundle, labels, mod_t, cfg)
                except FloatingPointError as exc:
                    raise TrainingError(f"epoch {epoch} batch {bi} (step {step}): {exc}") from None
                optimizer.zero_grad(set_to_none=True)
                losses["total"].backward()
                optimizer.step()
                if step % cfg.log_every == 0:
                    entry = {"step": step, "epoch": epoch, "lr": lr,
                             **{k: float(v.detach()) for k, v in losses.items()}}
                    log_fh.write(json.dumps(entry, sort_keys=True) + "\n")
                    log_fh.flush()
                if progress:
                    progress(step, epoch, losses)
                step += 1
            log.info("epoch %d done, %.1fs elapsed, last total %.4f", epoch, time.time() - start,
                     float(losses["total"].detach()))
            if (epoch + 1) % cfg.checkpoint_every == 0 and epoch + 1 < cfg.epochs:
                path = os.path.join(cfg.output_dir, f"ckpt_epoch{epoch + 1:03d}.wrim")
                checkpoints.append(save_checkpoint(path, model, extra))
    final = save_checkpoint(os.path.join(cfg.output_dir, "final.wrim"), model, extra)
    checkpoints.append(final)
    summary = {"steps": step, "epochs": cfg.epochs, "seconds": time.time() - start,
               "checkpoints": checkpoints, "log": log_path, "num_classes": len(id_map)}
    if not math.isfinite(float(losses["total"].detach())):
        raise TrainingError("final loss is not finite")
    return model, summary
