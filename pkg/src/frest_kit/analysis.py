"""Evaluation and diagnostics: IoU metrics, feature-shift distances,
embedding export, and the ablation harness."""

from __future__ import annotations

import csv
import json
import traceback
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch

from .config import CONDITIONS, IGNORE_LABEL, RunConfig
from .data import PairedSample, generate_scene
from .model import ModelBundle, load_checkpoint


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> np.ndarray:
    valid = gt != IGNORE_LABEL
    idx = num_classes * gt[valid].astype(np.int64) + pred[valid].astype(np.int64)
    return np.bincount(idx, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def miou_from_confusion(cm: np.ndarray) -> tuple[list[float], float]:
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    denom = tp + fp + fn
    ious = np.where(denom > 0, tp / np.maximum(denom, 1), np.nan)
    present = denom > 0  # classes absent from both pred and gt are excluded
    mean = float(np.mean(ious[present])) if present.any() else float("nan")
    return [float(v) for v in ious], mean


def miou(pred_labels: np.ndarray, gt_labels: np.ndarray, num_classes: int
         ) -> tuple[list[float], float]:
    """Per-class IoU and its mean; IGNORE ground-truth pixels are skipped,
    classes absent from both prediction and ground truth are excluded."""
    if pred_labels.shape != gt_labels.shape:
        raise ValueError("prediction and ground truth shapes differ")
    return miou_from_confusion(confusion_matrix(pred_labels, gt_labels, num_classes))


def predict_labels(model: ModelBundle, image: np.ndarray) -> np.ndarray:
    with torch.no_grad():
        logits = model.predict(torch.from_numpy(image).to(torch.get_default_dtype()))
    return logits.argmax(dim=-1).numpy()


def evaluate_pairs(
    model: ModelBundle, pairs: list[PairedSample], view: str = "adverse"
) -> dict:
    """Aggregate-confusion mIoU over a list of pairs, overall and per condition.

    ``view="normal"`` scores the clean scene render (regenerated from the pair
    seed), not the warped restoration target, so injected dynamic-object
    patches with stale labels do not distort the metric.
    """
    c = model.cfg.num_classes
    total = np.zeros((c, c), dtype=np.int64)
    per_condition = {cond: np.zeros((c, c), dtype=np.int64) for cond in CONDITIONS}
    for p in pairs:
        if view == "adverse":
            image = p.adverse_image
        else:
            image = generate_scene(p.seed, p.labels.shape[0]).image
        pred = predict_labels(model, image)
        cm = confusion_matrix(pred, p.labels, c)
        total += cm
        if p.condition in per_condition:
            per_condition[p.condition] += cm
    _, overall = miou_from_confusion(total)
    by_cond = {
        cond: miou_from_confusion(cm)[1]
        for cond, cm in per_condition.items()
        if cm.sum() > 0
    }
    return {"miou": overall, "per_condition": by_cond}


# ---- feature-shift distances --------------------------------------------


def hausdorff_cosine(set_a: np.ndarray, set_b: np.ndarray) -> float:
    """Exact symmetric Hausdorff distance under d = 1 - cosine similarity."""
    a = np.asarray(set_a, dtype=np.float64)
    b = np.asarray(set_b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ValueError("point sets must be non-empty")
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    if (na == 0).any() or (nb == 0).any():
        raise ValueError("zero-norm vector in input set")
    dist = 1.0 - (a / na[:, None]) @ (b / nb[:, None]).T
    return float(max(dist.min(axis=1).max(), dist.min(axis=0).max()))


@dataclass
class ShiftReport:
    epochs: list[int]
    d_inter: list[float]  # adverse vs. normal per epoch
    d_adv: list[float]  # adverse vs. its epoch-0 snapshot
    d_normal: list[float]  # normal vs. its epoch-0 snapshot
    subsample: int
    subsample_seed: int

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2) + "\n")


def _final_features(model: ModelBundle, images: list[np.ndarray]) -> np.ndarray:
    feats = []
    with torch.no_grad():
        for img in images:
            pack = model.encoder_forward(
                torch.from_numpy(img).to(torch.get_default_dtype()), use_strainer=False
            )
            feats.append(pack.final.numpy())
    return np.concatenate(feats, axis=0)


def _subsample(x: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    if len(x) <= n:
        return x
    return x[rng.choice(len(x), size=n, replace=False)]


def shift_report(
    checkpoint_paths: list[str | Path],
    eval_pairs: list[PairedSample],
    subsample: int = 2000,
    seed: int = 0,
) -> ShiftReport:
    """Inter/intra-domain Hausdorff distances of final-layer encoder features
    (strainer bypassed) across an epoch-ordered checkpoint series."""
    if len(checkpoint_paths) < 2:
        raise ValueError("need at least two checkpoints including epoch 0")
    adverse_images = [p.adverse_image for p in eval_pairs]
    normal_images = [p.normal_image for p in eval_pairs]
    if not adverse_images:
        raise ValueError("empty evaluation pair list")

    adv_sets, norm_sets = [], []
    for path in checkpoint_paths:
        model, _ = load_checkpoint(path)
        rng = np.random.default_rng(np.random.SeedSequence((seed, 5)))
        adv_sets.append(_subsample(_final_features(model, adverse_images), subsample, rng))
        norm_sets.append(_subsample(_final_features(model, normal_images), subsample, rng))

    d_inter = [hausdorff_cosine(a, n) for a, n in zip(adv_sets, norm_sets)]
    d_adv = [hausdorff_cosine(a, adv_sets[0]) for a in adv_sets]
    d_normal = [hausdorff_cosine(n, norm_sets[0]) for n in norm_sets]
    return ShiftReport(
        epochs=list(range(len(checkpoint_paths))),
        d_inter=d_inter,
        d_adv=d_adv,
        d_normal=d_normal,
        subsample=subsample,
        subsample_seed=seed,
    )


# ---- embedding export ----------------------------------------------------


def export_embeddings(model: ModelBundle, pairs: list[PairedSample], path: str | Path) -> Path:
    """Condition embeddings of every adverse patch as CSV
    (columns: condition, confidence, e0..eD-1), for external t-SNE/UMAP."""
    path = Path(path)
    dim = model.cfg.proj_dim
    with torch.no_grad(), path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["condition", "confidence"] + [f"e{i}" for i in range(dim)])
        for p in pairs:
            pack = model.encoder_forward(
                torch.from_numpy(p.adverse_image).to(torch.get_default_dtype()),
                use_strainer=True,
            )
            z = model.project(pack.final).numpy()
            conf = p.confidence.flatten()
            for i in range(len(z)):
                writer.writerow(
                    [p.condition, f"{conf[i]:.6f}"] + [f"{v:.8f}" for v in z[i]]
                )
    return path


# ---- restored vs. infused inference -------------------------------------


def inference_feature_compare(model: ModelBundle, pairs: list[PairedSample]) -> dict:
    """mIoU decoding from restored features (no strainer) vs. condition-infused
    features (with strainer), same checkpoint."""
    c = model.cfg.num_classes
    cms = {"restored": np.zeros((c, c), dtype=np.int64),
           "infused": np.zeros((c, c), dtype=np.int64)}
    with torch.no_grad():
        for p in pairs:
            img = torch.from_numpy(p.adverse_image).to(torch.get_default_dtype())
            for key, use_strainer in (("restored", False), ("infused", True)):
                logits = model.decode(model.encoder_forward(img, use_strainer))
                pred = logits.argmax(dim=-1).numpy()
                cms[key] += confusion_matrix(pred, p.labels, c)
    return {
        "miou_restored": miou_from_confusion(cms["restored"])[1],
        "miou_infused": miou_from_confusion(cms["infused"])[1],
    }


# ---- ablation harness ----------------------------------------------------


def ablation_run(
    grid: list[dict[str, object]],
    base: RunConfig,
    seeds: tuple[int, ...] = (0, 1, 2),
    out_dir: str | Path | None = None,
) -> list[dict]:
    """Run the full pipeline per grid cell with shared seeds; one result row
    per cell with seed-averaged adverse/normal val mIoU. Per-cell failures
    are recorded and the run continues."""
    from . import runner  # local import: runner composes trainer + data

    rows = []
    pretrain_cache: dict[str, tuple] = {}
    for cell_idx, overrides in enumerate(grid):
        row: dict[str, object] = {"cell": cell_idx, "overrides": json.dumps(overrides, sort_keys=True)}
        adverse_scores, normal_scores = [], []
        try:
            for seed in seeds:
                cfg = base.with_overrides(overrides)
                cfg = cfg.with_overrides({"data.seed": seed * 100_000 + cfg.data.seed,
                                          "train.seed": seed})
                cache_key = json.dumps(
                    {"seed": seed, "model": cfg.model.__dict__, "data": cfg.data.__dict__,
                     "pre": [cfg.train.pretrain_epochs, cfg.train.pretrain_lr]},
                    sort_keys=True, default=str,
                )
                if cache_key in pretrain_cache:
                    splits, state_dict = pretrain_cache[cache_key]
                else:
                    splits = runner.build_splits(cfg)
                    pre_model = runner.pretrain(cfg, splits)
                    state_dict = {k: v.clone() for k, v in pre_model.state_dict().items()}
                    pretrain_cache[cache_key] = (splits, state_dict)
                model = runner.fresh_model(cfg)
                model.load_state_dict({k: v.clone() for k, v in state_dict.items()})
                cell_out = (Path(out_dir) / f"cell_{cell_idx}" / f"seed_{seed}"
                            if out_dir else Path(cfg.out_dir) / f"cell_{cell_idx}" / f"seed_{seed}")
                runner.adapt_model(cfg, splits, model, cell_out)
                adverse_scores.append(evaluate_pairs(model, splits.val, "adverse")["miou"])
                normal_scores.append(evaluate_pairs(model, splits.val, "normal")["miou"])
            row["adverse_miou"] = float(np.mean(adverse_scores))
            row["normal_miou"] = float(np.mean(normal_scores))
            row["status"] = "ok"
        except Exception as exc:  # keep sweeping on per-cell failure
            row["adverse_miou"] = float("nan")
            row["normal_miou"] = float("nan")
            row["status"] = f"error: {exc}"
            row["traceback"] = traceback.format_exc()
        rows.append(row)
    return rows


def write_ablation_csv(rows: list[dict], path: str | Path) -> Path:
    path = Path(path)
    fields = ["cell", "overrides", "adverse_miou", "normal_miou", "status"]
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)
    return path
