"""Pretraining and behavior-cloning loops, schedules, and checkpoint plumbing."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import checkpoint as ckpt
from .config import RunConfig
from .data import DatasetManifest, RgbdSample, load_sample
from .losses import bc_loss, instance_loss, pixel_loss, total_loss
from .nets import Encoder, Policy, PretrainModel
from .pairs import build_pair_masks
from .toyenv import (
    ACTION_DIM,
    GOAL_DIM,
    TOY_PROPRIO_SCHEMA,
    Demo,
    evaluate_policy,
)
from .view_aug import make_view_pair

LOG_SCHEMA_VERSION = 1


class DivergenceError(RuntimeError):
    """Raised when a training loss goes non-finite."""


def resolution_for_epoch(epoch: int, total: int, low: int, high: int, frac: float) -> int:
    """Low resolution for the first (1-frac) of epochs, high for the rest."""
    if not 0 <= epoch < total:
        raise ValueError(f"epoch {epoch} out of range [0, {total})")
    switch = math.ceil((1.0 - frac) * total)
    return low if epoch < switch else high


def lr_for_step(step: int, total_steps: int, base_lr: float, final_lr: float,
                warmup_frac: float) -> float:
    """Linear warmup from 0 to base_lr, then cosine decay to final_lr."""
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} out of range [0, {total_steps})")
    warmup_steps = int(round(warmup_frac * total_steps))
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    span = total_steps - 1 - warmup_steps
    if span <= 0:
        return final_lr
    t = (step - warmup_steps) / span
    return final_lr + (base_lr - final_lr) * 0.5 * (1.0 + math.cos(math.pi * t))


class Lars(torch.optim.Optimizer):
    """Layerwise-adaptive-rate SGD with momentum; for large-batch fidelity runs."""

    def __init__(self, params, lr, momentum=0.9, weight_decay=0.0, trust_coeff=0.001):
        defaults = dict(lr=lr, momentum=momentum, weight_decay=weight_decay,
                        trust_coeff=trust_coeff)
        super().__init__(params, defaults)

    @torch.no_grad()
    def step(self, closure=None):
        for group in self.param_groups:
            for p in group["params"]:
                if p.grad is None:
                    continue
                grad = p.grad.add(p, alpha=group["weight_decay"])
                p_norm = p.norm()
                g_norm = grad.norm()
                trust = torch.where(
                    (p_norm > 0) & (g_norm > 0),
                    group["trust_coeff"] * p_norm / g_norm,
                    torch.ones_like(p_norm),
                )
                state = self.state[p]
                buf = state.setdefault("momentum_buffer", torch.zeros_like(p))
                buf.mul_(group["momentum"]).add_(grad, alpha=float(trust * group["lr"]))
                p.add_(buf, alpha=-1.0)


def _make_optimizer(cfg: RunConfig, params):
    pc = cfg.pretrain
    if pc.optimizer == "lars":
        return Lars(params, lr=pc.base_lr, weight_decay=pc.weight_decay)
    return torch.optim.AdamW(params, lr=pc.base_lr, weight_decay=pc.weight_decay)


class SampleCache:
    """In-memory dataset cache holding quantized samples to keep RAM modest."""

    def __init__(self, manifest: DatasetManifest, depth_lo=0.0, depth_hi=65535.0):
        self.rgb8 = []
        self.depth16 = []
        self.ids = []
        for rgb_path, depth_path, sid in manifest.entries:
            s = load_sample(rgb_path, depth_path, sid, depth_lo, depth_hi)
            self.rgb8.append(np.round(s.rgb * 255).astype(np.uint8))
            self.depth16.append(np.round(s.depth.astype(np.float64) * 65535).astype(np.uint16))
            self.ids.append(sid)

    def __len__(self):
        return len(self.ids)

    def get(self, i: int) -> RgbdSample:
        return RgbdSample(
            rgb=self.rgb8[i].astype(np.float32) / 255.0,
            depth=self.depth16[i].astype(np.float32) / 65535.0,
            id=self.ids[i],
        )


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch]))


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    n_batches = max(1, n // batch_size) if n >= batch_size else 1
    for b in range(n_batches):
        yield order[b * batch_size : (b + 1) * batch_size]


def pretrain(
    cfg: RunConfig,
    manifest: DatasetManifest,
    out_dir: Path,
    resume_from: Path | None = None,
) -> tuple[Path, list[dict]]:
    """Run the depth-gated contrastive pretraining loop.

    Writes ``checkpoint.dpr`` and line-delimited ``train_log.jsonl`` records
    under ``out_dir``; returns the checkpoint path and the log records.
    Deterministic for a fixed seed (single worker).
    """
    if len(manifest) == 0:
        raise ValueError("pretraining dataset is empty")
    pc = cfg.pretrain
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    torch.manual_seed(pc.seed)
    model = PretrainModel(cfg.encoder)
    online_params = [p for mod in model.online_branches() for p in mod.parameters()]
    online_params += list(model.inst_pred.parameters())
    optimizer = _make_optimizer(cfg, online_params)

    start_epoch = 0
    logs: list[dict] = []
    if resume_from is not None:
        tensors, meta = ckpt.load_tensors(resume_from)
        ckpt.load_module(model, tensors, "model")
        ckpt.load_optimizer(optimizer, tensors, meta.get("optimizer_steps", {}))
        start_epoch = meta["epoch"] + 1
        logs = list(meta.get("log", []))

    cache = SampleCache(manifest, cfg.data.depth_lo, cfg.data.depth_hi)
    n = len(cache)
    steps_per_epoch = max(1, n // pc.batch_size) if n >= pc.batch_size else 1
    total_steps = steps_per_epoch * pc.epochs
    log_path = out_dir / "train_log.jsonl"
    ckpt_path = out_dir / "checkpoint.dpr"

    global_step = start_epoch * steps_per_epoch
    for epoch in range(start_epoch, pc.epochs):
        res = resolution_for_epoch(epoch, pc.epochs, pc.low_res, pc.high_res, pc.high_res_frac)
        grid_hw = model.encoder.grid_hw((res, res))
        rng = _epoch_rng(pc.seed, epoch)
        t0 = time.time()
        epoch_pix, epoch_ins, epoch_total, lr_now = [], [], [], 0.0

        for batch_idx, idxs in enumerate(_batches(n, pc.batch_size, rng)):
            lr_now = lr_for_step(global_step, total_steps, pc.base_lr, pc.final_lr,
                                 pc.warmup_frac)
            for group in optimizer.param_groups:
                group["lr"] = lr_now

            v1, v2, mask_lists = [], [], []
            for i in idxs:
                sample = cache.get(int(i))
                pair = make_view_pair(sample, cfg.augment, rng, (res, res))
                v1.append(pair.view1_rgb)
                v2.append(pair.view2_rgb)
                mask_lists.append(
                    build_pair_masks(
                        pair.geom1, pair.geom2, pair.view1_depth, pair.view2_depth,
                        grid_hw, sample.rgb.shape[:2],
                        thresholds=cfg.pairs.thresholds,
                        cross_product=cfg.pairs.cross_product,
                        distance_norm=cfg.pairs.distance_norm,
                    )
                )
            t_v1 = torch.from_numpy(np.stack(v1)).permute(0, 3, 1, 2)
            t_v2 = torch.from_numpy(np.stack(v2)).permute(0, 3, 1, 2)

            x1, k1 = model.forward_online(t_v1)
            x2, k2 = model.forward_online(t_v2)
            with torch.no_grad():
                x1_m, q1 = model.forward_momentum(t_v1)
                x2_m, q2 = model.forward_momentum(t_v2)

            pix_terms = []
            for b, masks in enumerate(mask_lists):
                fwd = pixel_loss(x1[b], x2_m[b], masks, cfg.loss.tau)
                bwd = pixel_loss(x2[b], x1_m[b], [m.transposed() for m in masks], cfg.loss.tau)
                pix_terms.append((fwd + bwd) / 2)
            l_pix = torch.stack(pix_terms).mean()
            l_ins = instance_loss(k1, k2, q1, q2)
            loss = total_loss(l_pix, l_ins, cfg.loss.alpha)

            if not torch.isfinite(loss):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch} batch {batch_idx} "
                    f"(samples {[cache.ids[int(i)] for i in idxs]})"
                )

            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            model.ema_step(pc.ema_momentum)
            global_step += 1

            epoch_pix.append(float(l_pix.detach()))
            epoch_ins.append(float(l_ins.detach()))
            epoch_total.append(float(loss.detach()))

        record = {
            "schema_version": LOG_SCHEMA_VERSION,
            "epoch": epoch,
            "loss_pix": float(np.mean(epoch_pix)),
            "loss_ins": float(np.mean(epoch_ins)),
            "loss": float(np.mean(epoch_total)),
            "resolution": res,
            "lr": lr_now,
            "wall_time_s": time.time() - t0,
        }
        logs.append(record)
        with log_path.open("a" if epoch > start_epoch or resume_from else "w") as fh:
            fh.write(json.dumps(record) + "\n")

        opt_tensors, opt_steps = ckpt.optimizer_tensors(optimizer)
        tensors = ckpt.module_tensors(model, "model")
        tensors.update(opt_tensors)
        ckpt.save_tensors(
            ckpt_path,
            tensors,
            meta={
                "kind": "pretrain",
                "epoch": epoch,
                "config": cfg.to_dict(),
                "optimizer_steps": opt_steps,
                "log": logs,
            },
        )
    return ckpt_path, logs


def export_encoder(pretrain_ckpt: Path, out_path: Path) -> Path:
    """Emit an encoder-only checkpoint for behavior-cloning reuse."""
    tensors, meta = ckpt.load_tensors(pretrain_ckpt)
    old = "model/encoder."
    enc = {"encoder/" + k[len(old):]: v for k, v in tensors.items() if k.startswith(old)}
    if not enc:
        raise ValueError(f"{pretrain_ckpt} contains no encoder tensors")
    return ckpt.save_tensors(
        out_path, enc, meta={"kind": "encoder", "config": meta.get("config", {})}
    )


def load_encoder(path: Path, encoder: Encoder) -> None:
    """Load encoder weights from an exported or full pretraining checkpoint."""
    tensors, meta = ckpt.load_tensors(path)
    if any(k.startswith("encoder/") for k in tensors):
        ckpt.load_module(encoder, tensors, "encoder")
        return
    old = "model/encoder."
    enc = {"encoder/" + k[len(old):]: v for k, v in tensors.items() if k.startswith(old)}
    if not enc:
        raise ValueError(f"{path} contains no encoder tensors")
    ckpt.load_module(encoder, enc, "encoder")


@dataclass
class BcResult:
    policy: Policy
    best_success: float
    final_success: float
    log: list[dict]
    checkpoint_path: Path | None = None


def _flatten_demos(demos: list[Demo]):
    obs = np.concatenate([d.observations for d in demos]).astype(np.float32) / 255.0
    actions = np.concatenate([d.actions for d in demos])
    goals = np.concatenate([np.repeat(d.goal[None], len(d), axis=0) for d in demos])
    proprio = {
        name: np.concatenate([d.proprio[name] for d in demos])
        for name, _ in TOY_PROPRIO_SCHEMA
    }
    return obs, proprio, goals, actions


def make_policy_fn(policy: Policy):
    """Wrap a Policy module as the (obs, proprio, goal) -> action callable."""
    def policy_fn(obs, prop, goal):
        policy.eval()
        with torch.no_grad():
            rgb = torch.from_numpy(np.asarray(obs, np.float32)).permute(2, 0, 1)[None]
            states = {k: torch.from_numpy(np.asarray(v, np.float32))[None] for k, v in prop.items()}
            g = torch.from_numpy(np.asarray(goal, np.float32))[None]
            action = policy(rgb, states if policy.use_proprio else None, g)
        return action[0].numpy()
    return policy_fn


def bc_train(
    cfg: RunConfig,
    demos: list[Demo],
    encoder_checkpoint: Path | None = None,
    out_path: Path | None = None,
) -> BcResult:
    """Behavior cloning on expert demos with periodic online evaluation.

    ``encoder_checkpoint`` of None trains the encoder from scratch (baseline);
    otherwise the pretrained weights are loaded and optionally frozen. Retains
    the checkpoint with the best evaluation success rate.
    """
    if not demos:
        raise ValueError("no demonstrations provided")
    bc = cfg.bc
    schema_names = {name for name, _ in TOY_PROPRIO_SCHEMA}
    for d in demos:
        if set(d.proprio) != schema_names:
            raise ValueError(
                f"demo proprioception {sorted(d.proprio)} does not match schema "
                f"{sorted(schema_names)}"
            )

    torch.manual_seed(bc.seed)
    encoder = Encoder(cfg.encoder)
    if encoder_checkpoint is not None:
        load_encoder(encoder_checkpoint, encoder)
    policy = Policy(
        encoder,
        TOY_PROPRIO_SCHEMA,
        goal_dim=GOAL_DIM,
        action_dim=ACTION_DIM,
        use_proprio=bc.use_proprio,
        attn_dim=bc.attn_dim,
    )
    if bc.freeze_encoder:
        for p in encoder.parameters():
            p.requires_grad_(False)

    params = [p for p in policy.parameters() if p.requires_grad]
    optimizer = torch.optim.AdamW(params, lr=bc.lr, weight_decay=bc.weight_decay)

    obs, proprio, goals, actions = _flatten_demos(demos)
    n = obs.shape[0]
    t_actions = torch.from_numpy(actions)
    t_goals = torch.from_numpy(goals.astype(np.float32))

    log: list[dict] = []
    best_state = {k: v.clone() for k, v in policy.state_dict().items()}
    policy_fn = make_policy_fn(policy)
    eval_seed = 10_000 + bc.seed

    def run_eval():
        rate = evaluate_policy(policy_fn, bc.eval_episodes, eval_seed, cfg.env)
        policy.train()
        if bc.freeze_encoder:
            encoder.eval()
        return rate

    best = run_eval()  # epoch-0 evaluation also covers the zero-epoch case
    final = best
    log.append({"epoch": 0, "bc_loss": None, "success_rate": best})

    for epoch in range(bc.epochs):
        rng = _epoch_rng(bc.seed, epoch)
        policy.train()
        if bc.freeze_encoder:
            encoder.eval()
        epoch_losses = []
        for idxs in _batches(n, bc.batch_size, rng):
            batch_obs = torch.from_numpy(obs[idxs]).permute(0, 3, 1, 2)
            states = {k: torch.from_numpy(v[idxs]) for k, v in proprio.items()}
            pred = policy(batch_obs, states if bc.use_proprio else None, t_goals[idxs])
            loss = bc_loss(pred, t_actions[idxs])
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite BC loss at epoch {epoch}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_losses.append(float(loss.detach()))

        entry = {"epoch": epoch + 1, "bc_loss": float(np.mean(epoch_losses))}
        if (epoch + 1) % bc.eval_every == 0 or epoch + 1 == bc.epochs:
            rate = run_eval()
            final = rate
            entry["success_rate"] = rate
            if rate >= best:
                best = rate
                best_state = {k: v.clone() for k, v in policy.state_dict().items()}
        log.append(entry)

    if bc.epochs > 0:
        policy.load_state_dict(best_state)

    ckpt_path = None
    if out_path is not None:
        tensors = ckpt.module_tensors(policy, "policy")
        ckpt_path = ckpt.save_tensors(
            out_path,
            tensors,
            meta={
                "kind": "policy",
                "config": cfg.to_dict(),
                "best_success": best,
                "log": log,
            },
        )
    return BcResult(policy=policy, best_success=best, final_success=final, log=log,
                    checkpoint_path=ckpt_path)


def load_policy(path: Path, cfg: RunConfig) -> Policy:
    tensors, meta = ckpt.load_tensors(path)
    saved_cfg = meta.get("config", {})
    use_proprio = saved_cfg.get("bc", {}).get("use_proprio", cfg.bc.use_proprio)
    attn_dim = saved_cfg.get("bc", {}).get("attn_dim", cfg.bc.attn_dim)
    enc_cfg = cfg.encoder
    if "encoder" in saved_cfg:
        from .nets import EncoderConfig

        saved_enc = dict(saved_cfg["encoder"])
        saved_enc["tiny_widths"] = tuple(saved_enc.get("tiny_widths", enc_cfg.tiny_widths))
        enc_cfg = EncoderConfig(**saved_enc)
    policy = Policy(
        Encoder(enc_cfg),
        TOY_PROPRIO_SCHEMA,
        goal_dim=GOAL_DIM,
        action_dim=ACTION_DIM,
        use_proprio=use_proprio,
        attn_dim=attn_dim,
    )
    ckpt.load_module(policy, tensors, "policy")
    return policy
