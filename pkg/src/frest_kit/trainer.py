"""Two-step alternating adaptation loop.

Step 1 trains only strainer + projection head (contrastive condition loss +
self-training on strainer-infused predictions). Step 2 trains only encoder +
decoder + discriminator (restoration toward detached normal embeddings,
adversarial-feature classification, self-training, entropy), then refreshes
the EMA teacher. Parameter isolation between the two steps is enforced by
giving each step its own optimizer over exactly its parameter groups.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import losses
from .config import IGNORE_LABEL, Hyperparams, TrainConfig
from .data import DatasetSplits, Scene, TrainBatch
from .model import FeaturePack, ModelBundle, save_checkpoint


class DivergenceError(RuntimeError):
    """Training hit a non-finite loss; carries the iteration index."""

    def __init__(self, message: str, iteration: int):
        super().__init__(message)
        self.iteration = iteration


class PositiveQueue:
    """Bounded FIFO of condition embeddings; stored tensors carry no grad."""

    def __init__(self, capacity: int, dim: int):
        if capacity < 1:
            raise ValueError("queue capacity must be >= 1")
        self.capacity = capacity
        self.dim = dim
        self._items: deque[torch.Tensor] = deque(maxlen=capacity)

    def push(self, embeddings: torch.Tensor) -> None:
        if embeddings.ndim == 1:
            embeddings = embeddings.unsqueeze(0)
        for row in embeddings.detach().cpu().clone():
            self._items.append(row)

    def __len__(self) -> int:
        return len(self._items)

    def as_tensor(self) -> torch.Tensor:
        """Contents oldest-first."""
        if not self._items:
            return torch.empty(0, self.dim)
        return torch.stack(list(self._items))


def lr_at(iteration: int, cfg: TrainConfig) -> dict[str, float]:
    """Linear warmup then linear decay to zero, per parameter group.

    The projection head follows the strainer rate; the discriminator follows
    the encoder rate. The strainer rate reaches zero at
    ``strainer_decay_fraction`` of training instead of at the end, so the
    restoration target stops moving while the encoder can still chase it.
    """
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    warmup = cfg.effective_warmup()
    total = max(cfg.total_iters, warmup + 1)
    if iteration < warmup:
        f_enc = f_str = iteration / warmup
    else:
        f_enc = max(0.0, (total - iteration) / (total - warmup))
        strainer_end = int(cfg.strainer_decay_fraction * total)
        f_str = max(0.0, (strainer_end - iteration) / max(1, strainer_end - warmup))
    enc = cfg.lr_encoder * cfg.lr_scale * f_enc
    strainer = cfg.lr_strainer * cfg.strainer_lr_scale * f_str
    return {
        "encoder": enc,
        "decoder": enc,
        "discriminator": enc,
        "strainer": strainer,
        "projection": strainer,
    }


@dataclass
class TrainState:
    model: ModelBundle
    hp: Hyperparams
    train_cfg: TrainConfig
    ema: dict[str, torch.Tensor]
    opt_step1: torch.optim.Optimizer
    opt_step2: torch.optim.Optimizer
    queue: PositiveQueue
    rng: np.random.Generator
    ema_shadow: ModelBundle | None = None
    iteration: int = 0
    last_components: dict = field(default_factory=dict)


def init_state(model: ModelBundle, hp: Hyperparams, train_cfg: TrainConfig) -> TrainState:
    groups = model.param_groups()
    ema = {
        name: p.detach().clone()
        for g in ("encoder", "decoder")
        for name, p in groups[g]
    }
    opt_step1 = torch.optim.AdamW(
        model.group_parameters("strainer") + model.group_parameters("projection"),
        lr=0.0,
        weight_decay=train_cfg.weight_decay,
    )
    opt_step2 = torch.optim.AdamW(
        [
            {"params": model.group_parameters("encoder"), "name": "encoder"},
            {"params": model.group_parameters("decoder"), "name": "decoder"},
            {"params": model.group_parameters("discriminator"), "name": "discriminator"},
        ],
        lr=0.0,
        weight_decay=train_cfg.weight_decay,
    )
    return TrainState(
        model=model,
        hp=hp,
        train_cfg=train_cfg,
        ema=ema,
        opt_step1=opt_step1,
        opt_step2=opt_step2,
        queue=PositiveQueue(hp.queue_length, model.cfg.proj_dim),
        rng=np.random.default_rng(np.random.SeedSequence((train_cfg.seed, 77))),
    )


def _ema_model(state: TrainState) -> ModelBundle:
    """EMA shadow of encoder+decoder, materialized on a cached model copy.

    Only the inference path (encoder + decoder) of the shadow is ever used,
    so the remaining groups are left at whatever the cache holds.
    """
    if state.ema_shadow is None:
        gen = torch.get_rng_state()
        try:
            state.ema_shadow = ModelBundle(state.model.cfg)
        finally:
            torch.set_rng_state(gen)
    shadow_params = dict(state.ema_shadow.named_parameters())
    with torch.no_grad():
        for name, p in state.ema.items():
            shadow_params[name].copy_(p)
    return state.ema_shadow


def ema_update(state: TrainState) -> None:
    d = state.hp.ema_decay
    groups = state.model.param_groups()
    with torch.no_grad():
        for g in ("encoder", "decoder"):
            for name, p in groups[g]:
                state.ema[name].mul_(d).add_((1.0 - d) * p.detach())


# ---- source pretraining --------------------------------------------------


def pretrain_source(
    model: ModelBundle,
    source_scenes: list[Scene],
    epochs: int,
    lr: float,
    seed: int = 0,
) -> list[float]:
    """Cross-entropy training of encoder+decoder on labeled normal scenes.

    The strainer is never in the graph (forward uses the bypass path), so its
    parameters stay at initialization. Returns the per-epoch mean loss.
    """
    params = model.group_parameters("encoder") + model.group_parameters("decoder")
    opt = torch.optim.AdamW(params, lr=lr, weight_decay=1e-2)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 11)))
    history = []
    step = 0
    for _ in range(epochs):
        order = rng.permutation(len(source_scenes))
        epoch_losses = []
        for idx in order:
            scene = source_scenes[idx]
            image = torch.from_numpy(scene.image).to(torch.get_default_dtype())
            labels = torch.from_numpy(scene.labels)
            logits = model.predict(image)
            loss = losses.self_training_loss(logits, labels)
            if not torch.isfinite(loss):
                raise DivergenceError(f"pretraining loss non-finite at step {step}", step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_losses.append(float(loss.detach()))
            step += 1
        history.append(float(np.mean(epoch_losses)))
    return history


# ---- pseudo labels -------------------------------------------------------


def generate_pseudo_labels(
    model: ModelBundle, adverse_image: torch.Tensor, keep_fraction: float
) -> torch.Tensor:
    """Class-balanced pseudo labels: per predicted class, keep the top
    ``keep_fraction`` of pixels by max-softmax confidence, IGNORE the rest."""
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError("keep_fraction must lie in (0, 1]")
    with torch.no_grad():
        logits = model.predict(adverse_image)
        probs = torch.softmax(logits, dim=-1)
        conf, pred = probs.max(dim=-1)
    conf_np = conf.numpy()
    pred_np = pred.numpy()
    out = np.full(pred_np.shape, IGNORE_LABEL, dtype=np.int64)
    for c in np.unique(pred_np):
        mask = pred_np == c
        thr = np.quantile(conf_np[mask], 1.0 - keep_fraction)
        keep = mask & (conf_np >= thr)
        out[keep] = c
    return torch.from_numpy(out)


# ---- the two steps -------------------------------------------------------


def _to_tensor(a: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(a)).to(torch.get_default_dtype())


def _zero(like: torch.Tensor | None = None) -> torch.Tensor:
    return torch.zeros((), dtype=torch.get_default_dtype())


def _apply_lrs(opt: torch.optim.Optimizer, lrs: dict[str, float], default_group: str) -> None:
    for group in opt.param_groups:
        group["lr"] = lrs[group.get("name", default_group)]


def step1(batch: TrainBatch, state: TrainState) -> dict[str, float]:
    """Train strainer + projection; everything else is bit-frozen."""
    model, hp = state.model, state.hp
    adv = _to_tensor(batch.adverse_image)
    norm = _to_tensor(batch.normal_image)
    conf = _to_tensor(batch.confidence).flatten()
    w = losses.confident_indices(conf, hp.conf_threshold)

    c_adv = model.encoder_forward(adv, use_strainer=True)
    c_norm = model.encoder_forward(norm, use_strainer=True)
    z_adv = model.project(c_adv.final)
    z_norm = model.project(c_norm.final)

    state.queue.push(z_adv[w])

    if hp.use_spec and len(w) > 0 and len(state.queue) > 0:
        l_spec = losses.condition_specific_loss(
            z_adv[w], z_norm[w], state.queue.as_tensor(), hp.tau, hp.selection, state.rng
        )
    else:
        l_spec = _zero()

    if hp.use_self:
        teacher = state.model if hp.pseudo_from_student else _ema_model(state)
        pseudo = generate_pseudo_labels(teacher, adv, hp.keep_fraction)
        logits = model.decode(c_adv)
        l_self = losses.self_training_loss(logits, pseudo)
    else:
        l_self = _zero()

    total = losses.step1_total(l_spec, l_self, hp)
    lrs = lr_at(state.iteration, state.train_cfg)
    _apply_lrs(state.opt_step1, lrs, "strainer")
    state.model.zero_grad(set_to_none=True)
    total.backward()
    state.opt_step1.step()

    return {
        "total": float(total.detach()),
        "spec": float(l_spec.detach()),
        "self": float(l_self.detach()),
        "w_size": int(len(w)),
    }


def step2(batch: TrainBatch, state: TrainState) -> dict[str, float]:
    """Train encoder + decoder + discriminator; strainer + projection frozen;
    EMA refresh at the end."""
    model, hp = state.model, state.hp
    adv = _to_tensor(batch.adverse_image)
    norm = _to_tensor(batch.normal_image)
    conf = _to_tensor(batch.confidence).flatten()
    w = losses.confident_indices(conf, hp.conf_threshold)

    f_adv = model.encoder_forward(adv, use_strainer=False)
    with torch.no_grad():
        c_norm = model.encoder_forward(norm, use_strainer=True)
        z_norm = model.project(c_norm.final)
        c_adv_detached = FeaturePack([t.detach() for t in
                                      model.encoder_forward(adv, use_strainer=True).per_layer])

    if hp.use_resto and len(w) > 0:
        l_resto = losses.restoration_loss(model.project(f_adv.final[w]), z_norm[w])
    else:
        l_resto = _zero()

    if hp.use_dis:
        if hp.disc_variant == "CLASSIFIER":
            l_dis = losses.discriminating_loss(f_adv, c_adv_detached, model)
        else:
            l_dis = losses.discriminating_variant(f_adv, c_adv_detached, hp.disc_variant)
    else:
        l_dis = _zero()

    logits = model.decode(f_adv)
    if hp.use_self:
        teacher = state.model if hp.pseudo_from_student else _ema_model(state)
        pseudo = generate_pseudo_labels(teacher, adv, hp.keep_fraction)
        l_self = losses.self_training_loss(logits, pseudo)
    else:
        l_self = _zero()
    l_ent = losses.entropy_loss(logits) if hp.use_ent else _zero()

    total = losses.step2_total(l_resto, l_dis, l_self, l_ent, hp)
    lrs = lr_at(state.iteration, state.train_cfg)
    _apply_lrs(state.opt_step2, lrs, "encoder")
    state.model.zero_grad(set_to_none=True)
    total.backward()
    state.opt_step2.step()
    ema_update(state)

    return {
        "total": float(total.detach()),
        "resto": float(l_resto.detach()),
        "dis": float(l_dis.detach()),
        "self": float(l_self.detach()),
        "ent": float(l_ent.detach()),
        "w_size": int(len(w)),
    }


# ---- full adaptation loop ------------------------------------------------


def _augment(batch: TrainBatch, rng: np.random.Generator) -> TrainBatch:
    # horizontal flip applied identically to both images so patch
    # correspondence (and the confidence map) survives
    if rng.random() < 0.5:
        return TrainBatch(
            adverse_image=batch.adverse_image[:, ::-1].copy(),
            normal_image=batch.normal_image[:, ::-1].copy(),
            confidence=batch.confidence[:, ::-1].copy(),
            condition=batch.condition,
            seed=batch.seed,
        )
    return batch


def adapt(
    state: TrainState,
    dataset: DatasetSplits,
    total_iters: int,
    out_dir: str | Path,
) -> Path:
    """Run the alternating loop: a strainer-only warm-start phase, then
    step1 + step2 every iteration. Writes a JSONL metrics log and periodic
    epoch checkpoints; returns the path of the final checkpoint."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "metrics.jsonl"
    batches = [p.train_batch() for p in dataset.train]
    n = len(batches)
    warmstart = int(state.train_cfg.warmstart_fraction * total_iters)
    epoch_len = n

    save_checkpoint(state.model, out / "epoch_0000.pt", seed=state.train_cfg.seed,
                    extra={"iteration": 0, "ema": state.ema})

    order = state.rng.permutation(n)
    pos = 0
    epoch = 0
    with log_path.open("w") as log:
        for t in range(total_iters):
            if pos >= n:
                order = state.rng.permutation(n)
                pos = 0
            batch = batches[int(order[pos])]
            pos += 1
            if state.train_cfg.augment:
                batch = _augment(batch, state.rng)

            state.iteration = t
            try:
                s1 = step1(batch, state)
                if t >= warmstart:
                    s2 = step2(batch, state)
                else:
                    s2 = None
            except ValueError as exc:
                dump = out / "state_dump.json"
                dump.write_text(json.dumps(
                    {"iteration": t, "error": str(exc), "last": state.last_components},
                    indent=2,
                ))
                save_checkpoint(state.model, out / "abort.pt", seed=state.train_cfg.seed)
                raise DivergenceError(f"non-finite loss at iteration {t}: {exc}", t) from exc

            record = {
                "t": t,
                "step1": s1,
                "step2": s2,
                "lrs": lr_at(t, state.train_cfg),
                "queue_len": len(state.queue),
            }
            state.last_components = record
            log.write(json.dumps(record, sort_keys=True) + "\n")

            if (t + 1) % epoch_len == 0:
                epoch += 1
                save_checkpoint(state.model, out / f"epoch_{epoch:04d}.pt",
                                seed=state.train_cfg.seed,
                                extra={"iteration": t + 1, "ema": state.ema})

    final = out / "final.pt"
    save_checkpoint(state.model, final, seed=state.train_cfg.seed,
                    extra={"iteration": total_iters, "ema": state.ema})
    return final
