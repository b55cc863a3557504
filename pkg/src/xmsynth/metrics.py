"""MSE, PSNR and SSIM on denormalized images, and comparison tables."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DataError, DimensionError, ValidationError

PSNR_MSE_FLOOR = 1e-10
DISPLAY_NAMES = {"pix2pix": "Pix2Pix GAN", "cyclegan": "CycleGAN", "vae": "VAE"}
CSV_COLUMNS = ("model", "n_images", "image_size", "seed", "mse", "psnr_db", "ssim")
MARKDOWN_HEADER = ("Model", "MSE ↓", "PSNR (dB) ↑", "SSIM ↑")


def denormalize(img) -> np.ndarray:
    """Map [-1, 1] back to [0, 1], clamping anything outside."""
    return np.clip(np.asarray(img, dtype=np.float64) * 0.5 + 0.5, 0.0, 1.0)


def _pair(a, b, name):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"{name}: shapes {a.shape} and {b.shape} differ")
    return a, b


def metric_mse(a, b) -> float:
    a, b = _pair(a, b, "metric_mse")
    return float(np.mean((a - b) ** 2))


def psnr_from_mse(mse: float, max_val: float = 1.0) -> float:
    return float(10.0 * np.log10(max_val**2 / max(mse, PSNR_MSE_FLOOR)))


def metric_psnr(a, b, max_val: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical images give the 100 dB cap."""
    return psnr_from_mse(metric_mse(a, b), max_val)


@dataclass(frozen=True)
class SSIMParams:
    window: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    data_range: float = 1.0

    @property
    def c1(self) -> float:
        return (self.k1 * self.data_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.data_range) ** 2

    def kernel_1d(self) -> np.ndarray:
        x = np.arange(self.window) - (self.window - 1) / 2.0
        g = np.exp(-(x**2) / (2.0 * self.sigma**2))
        return g / g.sum()

    def kernel_2d(self) -> np.ndarray:
        g = self.kernel_1d()
        return np.outer(g, g)


def _gray(img: np.ndarray) -> np.ndarray:
    if img.ndim == 3:
        return img.mean(axis=0)
    if img.ndim != 2:
        raise DimensionError(f"SSIM expects (H, W) or (C, H, W), got {img.shape}")
    return img


def _blur(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = len(g)
    rows = sliding_window_view(img, k, axis=1) @ g
    return sliding_window_view(rows, k, axis=0) @ g


def ssim_map(a, b, params: SSIMParams = SSIMParams()) -> np.ndarray:
    a, b = _pair(a, b, "metric_ssim")
    a, b = _gray(a), _gray(b)
    if min(a.shape) < params.window:
        raise DimensionError(f"image {a.shape} smaller than the {params.window}x{params.window} SSIM window")
    g = params.kernel_1d()
    mu_a, mu_b = _blur(a, g), _blur(b, g)
    var_a = _blur(a * a, g) - mu_a * mu_a
    var_b = _blur(b * b, g) - mu_b * mu_b
    cov = _blur(a * b, g) - mu_a * mu_b
    c1, c2 = params.c1, params.c2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def metric_ssim(a, b, params: SSIMParams = SSIMParams()) -> float:
    """Mean Gaussian-windowed SSIM over every valid window position.

    Multichannel inputs (C, H, W) are averaged to one channel first.
    """
    return float(np.mean(ssim_map(a, b, params)))


@dataclass
class MetricsReport:
    model: str
    n_images: int
    image_size: int
    seed: int
    mse: float
    psnr_db: float
    ssim: float
    per_image_mse: Optional[np.ndarray] = field(default=None, compare=False, repr=False)
    per_image_psnr: Optional[np.ndarray] = field(default=None, compare=False, repr=False)
    per_image_ssim: Optional[np.ndarray] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.n_images < 1:
            raise ValidationError("a report needs at least one image")


def _predictor(model) -> Callable[[np.ndarray], np.ndarray]:
    if hasattr(model, "translate"):
        return model.translate
    if callable(model):
        return model
    raise ValidationError("evaluate needs a ModelBundle or a callable mapping source to prediction")


def evaluate(
    model,
    source: np.ndarray,
    target: np.ndarray,
    params: SSIMParams = SSIMParams(),
    name: Optional[str] = None,
    seed: Optional[int] = None,
    batch_size: int = 32,
) -> MetricsReport:
    """Synthesize targets from ``source`` and score them per image.

    ``model`` is a :class:`~xmsynth.models.ModelBundle` (eval-mode batch
    norm, VAE decoded from its latent mean) or any callable from normalized
    source images to normalized predictions. Reported values are per-image
    metrics averaged over the set.
    """
    source = np.asarray(source)
    target = np.asarray(target)
    if len(source) == 0:
        raise ValidationError("evaluate: empty test set")
    if source.shape[0] != target.shape[0] or source.shape[2:] != target.shape[2:]:
        raise DimensionError(f"evaluate: source {source.shape} and target {target.shape} do not pair up")
    predict = _predictor(model)
    preds = []
    for start in range(0, len(source), batch_size):
        preds.append(np.asarray(predict(source[start : start + batch_size])))
    pred = np.concatenate(preds, axis=0)
    if pred.shape != target.shape:
        raise DimensionError(f"evaluate: prediction {pred.shape} does not match target {target.shape}")
    mse, psnr, ssim = [], [], []
    for p, t in zip(pred, target):
        p01, t01 = denormalize(p), denormalize(t)
        m = metric_mse(p01, t01)
        mse.append(m)
        psnr.append(psnr_from_mse(m))
        ssim.append(metric_ssim(p01, t01, params))
    mse, psnr, ssim = np.array(mse), np.array(psnr), np.array(ssim)
    kind = getattr(model, "kind", None)
    return MetricsReport(
        model=name or DISPLAY_NAMES.get(kind, kind or "model"),
        n_images=len(mse),
        image_size=int(target.shape[-1]),
        seed=int(seed if seed is not None else getattr(model, "seed", 0)),
        mse=float(np.mean(mse)),
        psnr_db=float(np.mean(psnr)),
        ssim=float(np.mean(ssim)),
        per_image_mse=mse,
        per_image_psnr=psnr,
        per_image_ssim=ssim,
    )


def render_report(reports: Sequence[MetricsReport], fmt: str = "markdown") -> str:
    """Render reports in input order as a markdown table or CSV."""
    if not reports:
        raise ValidationError("render_report needs at least one report")
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in reports:
            writer.writerow([r.model, r.n_images, r.image_size, r.seed, repr(r.mse), repr(r.psnr_db), repr(r.ssim)])
        return buf.getvalue()
    if fmt != "markdown":
        raise ValidationError(f"unknown report format {fmt!r}")
    lines = ["| " + " | ".join(MARKDOWN_HEADER) + " |", "|" + "|".join("---" for _ in MARKDOWN_HEADER) + "|"]
    for r in reports:
        lines.append(f"| {r.model} | {r.mse:.4f} | {r.psnr_db:.2f} | {r.ssim:.2f} |")
    return "\n".join(lines) + "\n"


def parse_reports(text: str) -> List[MetricsReport]:
    """Parse CSV produced by :func:`render_report`; errors name the bad row."""
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise DataError("report CSV is empty") from None
    if tuple(h.strip() for h in header) != CSV_COLUMNS:
        raise DataError(f"report CSV row 1: expected header {','.join(CSV_COLUMNS)}")
    out = []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(CSV_COLUMNS):
            raise DataError(f"report CSV row {lineno}: expected {len(CSV_COLUMNS)} fields, got {len(row)}")
        try:
            out.append(
                MetricsReport(row[0], int(row[1]), int(row[2]), int(row[3]), float(row[4]), float(row[5]), float(row[6]))
            )
        except (ValueError, ValidationError) as exc:
            raise DataError(f"report CSV row {lineno}: {exc}") from exc
    if not out:
        raise DataError("report CSV has no data rows")
    return out


def read_reports(path) -> List[MetricsReport]:
    try:
        with open(path, newline="") as fh:
            text = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read report {path}: {exc}") from exc
    return parse_reports(text)
