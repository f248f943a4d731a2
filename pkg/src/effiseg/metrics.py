"""Dice and IoU metrics, the training objective, and dataset evaluation."""

import json
from dataclasses import dataclass
from typing import Callable, List, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import Sample, preprocess_batch

EPS = 1e-7
DEFAULT_THRESHOLD = 0.5


def _as_binary(name: str, m) -> torch.Tensor:
    t = torch.as_tensor(m)
    bad = torch.unique(t[(t != 0) & (t != 1)])
    if bad.numel():
        raise ValueError(f"{name}: mask must be binary, found values {bad[:5].tolist()}")
    return t.float()


def _check_pair(pred, gt) -> Tuple[torch.Tensor, torch.Tensor]:
    p = _as_binary("pred", pred)
    g = _as_binary("gt", gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: pred {tuple(p.shape)} vs gt {tuple(g.shape)}")
    return p, g


def dice(pred, gt, eps: float = EPS) -> float:
    """(2|pred∩gt| + eps) / (|pred| + |gt| + eps) for binary masks."""
    p, g = _check_pair(pred, gt)
    inter = (p * g).sum()
    return float((2.0 * inter + eps) / (p.sum() + g.sum() + eps))


def iou(pred, gt, eps: float = EPS) -> float:
    """(|pred∩gt| + eps) / (|pred∪gt| + eps) for binary masks."""
    p, g = _check_pair(pred, gt)
    inter = (p * g).sum()
    union = p.sum() + g.sum() - inter
    return float((inter + eps) / (union + eps))


def segmentation_loss(prob: torch.Tensor, gt: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Binary cross-entropy plus soft-Dice loss, equally weighted.

    ``prob`` must lie strictly inside (0, 1); ``gt`` is a binary tensor of
    the same shape. The soft-Dice term is 1 - (2 Σ p·g + eps)/(Σp + Σg + eps)
    computed per sample and averaged, so it is differentiable everywhere.
    """
    if prob.shape != gt.shape:
        raise ValueError(f"shape mismatch: prob {tuple(prob.shape)} vs gt {tuple(gt.shape)}")
    if prob.min() <= 0 or prob.max() >= 1:
        raise ValueError(
            f"probabilities must lie strictly in (0, 1); got range "
            f"[{float(prob.min()):.3g}, {float(prob.max()):.3g}]"
        )
    bce = F.binary_cross_entropy(prob, gt)
    n = prob.shape[0]
    p = prob.reshape(n, -1)
    g = gt.reshape(n, -1)
    soft_dice = (2.0 * (p * g).sum(dim=1) + eps) / (p.sum(dim=1) + g.sum(dim=1) + eps)
    return bce + (1.0 - soft_dice).mean()


@dataclass
class MetricsReport:
    dataset: str
    mean_dice: float
    mean_iou: float
    per_image: List[Tuple[str, float, float]]  # (sample key, dice, iou)
    threshold: float

    def to_json(self) -> str:
        return json.dumps(
            {
                "dataset": self.dataset,
                "threshold": self.threshold,
                "mean_dice": self.mean_dice,
                "mean_iou": self.mean_iou,
                "per_image": [
                    {"id": k, "dice": d, "iou": i} for k, d, i in self.per_image
                ],
            },
            indent=2,
            sort_keys=True,
        )


def format_metrics_table(reports: Sequence[MetricsReport]) -> str:
    """Aligned text table, one row per dataset, Dice and IoU columns."""
    width = max([len("Dataset")] + [len(r.dataset) for r in reports])
    lines = [f"{'Dataset':<{width}}   Dice    IoU"]
    for r in reports:
        lines.append(f"{r.dataset:<{width}}  {r.mean_dice:.3f}  {r.mean_iou:.3f}")
    return "\n".join(lines)


def evaluate(
    model: Callable[[torch.Tensor], torch.Tensor],
    samples: Sequence[Sample],
    threshold: float = DEFAULT_THRESHOLD,
    size: Tuple[int, int] = (224, 224),
    batch_size: int = 8,
    dataset: str = "",
) -> MetricsReport:
    """Per-image Dice/IoU of a predictor over a corpus, at the eval size.

    Predictions and ground truth are both compared at ``size`` (the training
    resolution). Samples are processed in (source, id) order, so the report
    is deterministic. ``model`` maps an image batch to probability maps.
    """
    if not samples:
        raise ValueError("evaluate: empty dataset")
    ordered = sorted(samples, key=lambda s: (s.source, s.id))
    name = dataset or ordered[0].source
    if isinstance(model, nn.Module):
        model.eval()
    per_image = []
    with torch.no_grad():
        for start in range(0, len(ordered), batch_size):
            chunk = ordered[start:start + batch_size]
            images, masks = preprocess_batch(chunk, size)
            probs = model(images)
            preds = (probs > threshold).float()
            for s, pred, gt in zip(chunk, preds, masks):
                per_image.append((s.key, dice(pred, gt), iou(pred, gt)))
    mean_dice = sum(d for _, d, _ in per_image) / len(per_image)
    mean_iou = sum(i for _, _, i in per_image) / len(per_image)
    return MetricsReport(
        dataset=name,
        mean_dice=mean_dice,
        mean_iou=mean_iou,
        per_image=per_image,
        threshold=threshold,
    )
