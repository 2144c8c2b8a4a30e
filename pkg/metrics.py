"""
Counting Metrics
Whole-image MAE/RMSE and their patch-level versions PMAE/PRMSE, which score
counts on an n-way grid so that regional over- and under-estimates cannot
cancel out.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from geometry import DensityMap, sum_pool_downsample
from padnet_model import PaDNetModel, padnet_forward
from tensor_core import Tensor, band_edges, no_grad

logger = logging.getLogger(__name__)

DEFAULT_N_VALUES = (1, 4, 9, 16)


def _values(density) -> np.ndarray:
    return density.values if isinstance(density, DensityMap) else np.asarray(density)


def count_from_map(density) -> float:
    return float(_values(density).sum())


def mae_rmse(est: Sequence[float], gt: Sequence[float]) -> Tuple[float, float]:
    est = np.asarray(est, dtype=np.float64).reshape(-1)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1)
    if est.size == 0 or gt.size == 0:
        raise ValueError("mae_rmse needs at least one count pair")
    if est.size != gt.size:
        raise ValueError(f"mae_rmse length mismatch: {est.size} estimates vs {gt.size} ground truths")
    diff = est - gt
    return float(np.abs(diff).mean()), float(math.sqrt((diff ** 2).mean()))


def grid_side(n: int) -> int:
    side = math.isqrt(n) if n >= 1 else 0
    if n < 1 or side * side != n:
        raise ValueError(f"n must be a perfect square >= 1, got {n}")
    return side


def split_grid(density, n: int) -> List[np.ndarray]:
    """
    Tile a map into a sqrt(n) x sqrt(n) grid, row-major.

    Band b spans [floor(b*H/s), floor((b+1)*H/s)), so regions are near-equal,
    non-overlapping and cover every cell.
    """
    values = _values(density)
    side = grid_side(n)
    height, width = values.shape
    if side > height or side > width:
        raise ValueError(f"cannot split a {height}x{width} map into a {side}x{side} grid")
    rows = band_edges(height, side)
    cols = band_edges(width, side)
    return [
        values[rows[i]:rows[i + 1], cols[j]:cols[j + 1]]
        for i in range(side)
        for j in range(side)
    ]


def region_counts(density, n: int) -> np.ndarray:
    return np.array([region.sum() for region in split_grid(density, n)], dtype=np.float64)


def pmae_prmse(est_maps: Sequence, gt_maps: Sequence, n: int) -> Tuple[float, float]:
    """MAE and RMSE over the n*M region count pairs; n = 1 reproduces whole-image mae_rmse."""
    if len(est_maps) != len(gt_maps):
        raise ValueError(f"got {len(est_maps)} estimated maps but {len(gt_maps)} ground-truth maps")
    if not est_maps:
        raise ValueError("pmae_prmse needs at least one map pair")
    est_counts, gt_counts = [], []
    for index, (est, gt) in enumerate(zip(est_maps, gt_maps)):
        est_values, gt_values = _values(est), _values(gt)
        if est_values.shape != gt_values.shape:
            raise ValueError(f"map pair {index}: estimate {est_values.shape} vs ground truth {gt_values.shape}")
        est_counts.append(region_counts(est_values, n))
        gt_counts.append(region_counts(gt_values, n))
    return mae_rmse(np.concatenate(est_counts), np.concatenate(gt_counts))


@dataclass
class EvalReport:
    M: int
    est_counts: List[float]
    gt_counts: List[float]
    mae: float
    rmse: float
    pmae: Dict[int, float] = field(default_factory=dict)
    prmse: Dict[int, float] = field(default_factory=dict)
    n_values: List[int] = field(default_factory=lambda: list(DEFAULT_N_VALUES))
    by_label: Dict[str, Dict[str, float]] = field(default_factory=dict)

    def to_dict(self) -> Dict:
        return {
            "M": self.M,
            "mae": self.mae,
            "rmse": self.rmse,
            "n_values": list(self.n_values),
            "pmae": {str(n): v for n, v in self.pmae.items()},
            "prmse": {str(n): v for n, v in self.prmse.items()},
            "by_label": self.by_label,
            "counts": [{"est": e, "gt": g} for e, g in zip(self.est_counts, self.gt_counts)],
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "EvalReport":
        counts = data.get("counts", [])
        return cls(
            M=int(data["M"]),
            est_counts=[float(c["est"]) for c in counts],
            gt_counts=[float(c["gt"]) for c in counts],
            mae=float(data["mae"]),
            rmse=float(data["rmse"]),
            pmae={int(n): float(v) for n, v in data.get("pmae", {}).items()},
            prmse={int(n): float(v) for n, v in data.get("prmse", {}).items()},
            n_values=[int(n) for n in data.get("n_values", DEFAULT_N_VALUES)],
            by_label=data.get("by_label", {}),
        )

    def table(self) -> pd.DataFrame:
        return pd.DataFrame(
            {"n": list(self.n_values),
             "PMAE": [self.pmae[n] for n in self.n_values],
             "PRMSE": [self.prmse[n] for n in self.n_values]}
        )

    def save(self, path: str, csv_path: Optional[str] = None) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2)
        if csv_path:
            self.table().to_csv(csv_path, index=False, float_format="%.6f")


def build_report(est_maps: Sequence, gt_maps: Sequence, n_values: Sequence[int] = DEFAULT_N_VALUES,
                 labels: Optional[Sequence[str]] = None) -> EvalReport:
    """Score paired maps at every grid size; labels, when given, add a per-label MAE/RMSE breakdown."""
    est_counts = [count_from_map(m) for m in est_maps]
    gt_counts = [count_from_map(m) for m in gt_maps]
    mae, rmse = mae_rmse(est_counts, gt_counts)
    report = EvalReport(M=len(est_counts), est_counts=est_counts, gt_counts=gt_counts,
                        mae=mae, rmse=rmse, n_values=[int(n) for n in n_values])
    for n in report.n_values:
        if n == 1:
            report.pmae[n], report.prmse[n] = mae, rmse
        else:
            report.pmae[n], report.prmse[n] = pmae_prmse(est_maps, gt_maps, n)

    if labels is not None:
        if len(labels) != len(est_counts):
            raise ValueError(f"got {len(labels)} labels for {len(est_counts)} images")
        frame = pd.DataFrame({"label": list(labels), "est": est_counts, "gt": gt_counts})
        for label, group in frame.groupby("label", sort=True):
            group_mae, group_rmse = mae_rmse(group["est"], group["gt"])
            report.by_label[str(label)] = {"M": int(len(group)), "mae": group_mae, "rmse": group_rmse}
    return report


def pad_to_multiple(image: np.ndarray, multiple: int) -> np.ndarray:
    """Reflect-pad a [C, H, W] image at the bottom/right so H and W divide by multiple."""
    _, height, width = image.shape
    pad_h = (-height) % multiple
    pad_w = (-width) % multiple
    if pad_h == 0 and pad_w == 0:
        return image
    mode = "reflect" if pad_h < height and pad_w < width else "edge"
    return np.pad(image, ((0, 0), (0, pad_h), (0, pad_w)), mode=mode)


def gt_at_output(density, downsample: int) -> DensityMap:
    """Zero-pad a full-resolution ground-truth map and sum-pool it onto the network output grid."""
    values = _values(density)
    height, width = values.shape
    padded = np.pad(values, ((0, (-height) % downsample), (0, (-width) % downsample)))
    return sum_pool_downsample(padded, downsample)


def infer_density_map(model: PaDNetModel, image: np.ndarray) -> DensityMap:
    """
    Eval-mode density map of one [C, H, W] image at the output resolution.

    The image is reflect-padded to the downsampling multiple; the output keeps
    the ceil(H/s) x ceil(W/s) cells covering the original image, with the
    last row and column scaled by the fraction of their pixels inside it.
    """
    if image.ndim == 2:
        image = image[None]
    downsample = model.downsample
    min_side = downsample * max(model.spec.spp_scales)
    _, height, width = image.shape
    if height < min_side or width < min_side:
        raise ValueError(f"image {height}x{width} is smaller than the model minimum {min_side}x{min_side}")
    padded = pad_to_multiple(image, downsample)
    was_training = model.training
    model.eval()
    with no_grad():
        x = Tensor(padded[None].astype(model.fen.blocks[0].conv.weight.dtype))
        pred, _ = padnet_forward(model, x)
    model.train(was_training)
    out_h = -(-height // downsample)
    out_w = -(-width // downsample)
    values = pred.data[0, 0, :out_h, :out_w].astype(np.float64)
    # edge cells straddling the padding keep only their share of real pixels
    values[-1, :] *= (height - (out_h - 1) * downsample) / downsample
    values[:, -1] *= (width - (out_w - 1) * downsample) / downsample
    return DensityMap(values)


def evaluate(model: PaDNetModel, images: Sequence[np.ndarray], gt_maps: Sequence,
             n_values: Sequence[int] = DEFAULT_N_VALUES, labels: Optional[Sequence[str]] = None,
             progress: bool = True) -> EvalReport:
    """
    Run the model over full images and score it against full-resolution ground truth.

    Args:
        model: trained network
        images: [C, H, W] float images
        gt_maps: full-resolution ground-truth density maps, one per image
        n_values: grid sizes for PMAE/PRMSE
        labels: optional per-image group label for a per-group breakdown

    Returns:
        EvalReport with all four metrics
    """
    if len(images) != len(gt_maps):
        raise ValueError(f"got {len(images)} images but {len(gt_maps)} ground-truth maps")
    est_maps, gt_small = [], []
    for image, gt in tqdm(zip(images, gt_maps), total=len(images), desc="evaluate", disable=not progress):
        est_maps.append(infer_density_map(model, image))
        gt_small.append(gt_at_output(gt, model.downsample))
    report = build_report(est_maps, gt_small, n_values, labels)
    logger.info(
        f"✅ Evaluated {report.M} images: MAE {report.mae:.3f}, RMSE {report.rmse:.3f}, "
        + ", ".join(f"PMAE@{n} {report.pmae[n]:.3f}" for n in report.n_values)
    )
    return report
