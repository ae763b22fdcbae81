"""
Flow files, images and the end-point error metrics.

Flows are 2×H×W arrays holding (u, v) in pixels.
"""

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import EmptySelectionError, FlowFormatError, ShapeError
from .models import MetricsReport

FLO_MAGIC = 202021.25
FLO_HEADER_BYTES = 12
MAGNITUDE_BANDS = {"s0_10": (0.0, 10.0), "s10_40": (10.0, 40.0), "s40_plus": (40.0, np.inf)}


def _check_flow(flow: np.ndarray) -> np.ndarray:
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise ShapeError(f"a flow must be 2×H×W, got {flow.shape}")
    return flow


def write_flo(path: Path, flow: np.ndarray) -> None:
    flow = _check_flow(flow)
    if not np.all(np.isfinite(flow)):
        raise FlowFormatError(f"refusing to write non-finite flow to {path}")
    _, height, width = flow.shape
    header = np.array([FLO_MAGIC], dtype="<f4").tobytes() + np.array([width, height], dtype="<i4").tobytes()
    payload = np.ascontiguousarray(flow.transpose(1, 2, 0), dtype="<f4").tobytes()
    Path(path).write_bytes(header + payload)


def read_flo(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < FLO_HEADER_BYTES:
        raise FlowFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic = np.frombuffer(raw, dtype="<f4", count=1)[0]
    if magic != np.float32(FLO_MAGIC):
        raise FlowFormatError(f"{path}: bad magic {magic!r}")
    width, height = (int(v) for v in np.frombuffer(raw, dtype="<i4", count=2, offset=4))
    if width <= 0 or height <= 0:
        raise FlowFormatError(f"{path}: nonpositive size {width}×{height}")
    expected = FLO_HEADER_BYTES + 8 * width * height
    if len(raw) < expected:
        raise FlowFormatError(f"{path}: truncated payload, {len(raw)} of {expected} bytes")
    data = np.frombuffer(raw, dtype="<f4", count=2 * width * height, offset=FLO_HEADER_BYTES)
    return data.reshape(height, width, 2).transpose(2, 0, 1).astype(np.float32)


def flow_to_hsv(flow: np.ndarray, max_magnitude: float | None = None) -> np.ndarray:
    """H×W×3 hue, saturation and value planes in [0, 1].

    Hue follows the flow direction, saturation its magnitude relative to
    ``max_magnitude`` (the 99th percentile by default); value is always 1.
    """
    u, v = _check_flow(flow).astype(np.float64)
    magnitude = np.hypot(u, v)
    if max_magnitude is None:
        max_magnitude = float(np.percentile(magnitude, 99)) if magnitude.size else 0.0
    if max_magnitude <= 0:
        max_magnitude = 1.0
    hue = np.mod(np.arctan2(v, u) / (2 * np.pi), 1.0)
    saturation = np.minimum(magnitude / max_magnitude, 1.0)
    return np.stack([hue, saturation, np.ones_like(hue)], axis=-1)


def colorize_flow(flow: np.ndarray, max_magnitude: float | None = None) -> np.ndarray:
    """RGB uint8 rendering on the color wheel; zero flow is white."""
    hsv = flow_to_hsv(flow, max_magnitude)
    planes = np.empty(hsv.shape, dtype=np.uint8)
    planes[..., 0] = np.floor(hsv[..., 0] * 256).astype(np.int64) % 256
    planes[..., 1:] = np.round(hsv[..., 1:] * 255).astype(np.uint8)
    height, width = planes.shape[:2]
    image = Image.frombytes("HSV", (width, height), planes.tobytes())
    return np.asarray(image.convert("RGB"))


def save_image(path: Path, image: np.ndarray) -> None:
    """Write an H×W or H×W×3 image; PNG, PPM or PGM by suffix."""
    image = np.asarray(image)
    if image.dtype != np.uint8:
        image = np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)
    Image.fromarray(image).save(path)


def save_frame(path: Path, frame: np.ndarray) -> None:
    """Write a C×H×W frame with values in [0, 1]."""
    frame = np.asarray(frame)
    save_image(path, frame[0] if frame.shape[0] == 1 else frame.transpose(1, 2, 0))


def load_frame(path: Path) -> np.ndarray:
    with Image.open(path) as image:
        data = np.asarray(image.convert("L" if image.mode in ("L", "1", "I") else "RGB"))
    data = data.astype(np.float32) / 255.0
    return data[None] if data.ndim == 2 else data.transpose(2, 0, 1)


def save_mask(path: Path, mask: np.ndarray) -> None:
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8)).save(path)


def load_mask(path: Path) -> np.ndarray:
    with Image.open(path) as image:
        return np.asarray(image.convert("L")) > 127


def end_point_error(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    pred, gt = _check_flow(pred), _check_flow(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    return np.sqrt(np.sum((pred.astype(np.float64) - gt) ** 2, axis=0))


def _selection(shape: tuple[int, ...], valid: np.ndarray | None) -> np.ndarray:
    if valid is None:
        return np.ones(shape, dtype=bool)
    valid = np.asarray(valid, dtype=bool)
    if valid.shape != shape:
        raise ShapeError(f"mask {valid.shape} does not match flow size {shape}")
    return valid


def aepe(pred: np.ndarray, gt: np.ndarray, valid: np.ndarray | None = None) -> float:
    epe = end_point_error(pred, gt)
    selected = _selection(epe.shape, valid)
    if not selected.any():
        raise EmptySelectionError("aepe over an empty valid set")
    return float(epe[selected].mean())


def fl_all(pred: np.ndarray, gt: np.ndarray, valid: np.ndarray | None = None) -> float:
    """Percentage of valid pixels whose error exceeds 3 px and 5% of the gt magnitude."""
    epe = end_point_error(pred, gt)
    selected = _selection(epe.shape, valid)
    if not selected.any():
        raise EmptySelectionError("fl_all over an empty valid set")
    magnitude = np.hypot(*np.asarray(gt, dtype=np.float64))
    outliers = (epe > 3.0) & (epe > 0.05 * magnitude)
    return float(100.0 * outliers[selected].mean())


def band_metrics(
    pred: np.ndarray,
    gt: np.ndarray,
    occlusion: np.ndarray | None = None,
    valid: np.ndarray | None = None,
) -> MetricsReport:
    epe = end_point_error(pred, gt)
    selected = _selection(epe.shape, valid)
    if not selected.any():
        raise EmptySelectionError("metrics over an empty valid set")
    magnitude = np.hypot(*np.asarray(gt, dtype=np.float64))

    def mean_over(mask: np.ndarray) -> float | None:
        mask = mask & selected
        return float(epe[mask].mean()) if mask.any() else None

    bands = {
        name: mean_over((magnitude >= low) & (magnitude < high))
        for name, (low, high) in MAGNITUDE_BANDS.items()
    }
    matched = unmatched = None
    if occlusion is not None:
        occluded = _selection(epe.shape, occlusion)
        matched = mean_over(~occluded)
        unmatched = mean_over(occluded)
    return MetricsReport(
        aepe=aepe(pred, gt, selected),
        fl_all=fl_all(pred, gt, selected),
        pixels=int(selected.sum()),
        matched=matched,
        unmatched=unmatched,
        **bands,
    )


def format_metrics(report: MetricsReport, prefix: str = "") -> str:
    """Line-oriented ``key=value`` text; absent bands are left out."""
    lines = [
        f"{prefix}{key}={value:.6f}" if isinstance(value, float) else f"{prefix}{key}={value}"
        for key, value in report.model_dump(exclude_none=True).items()
    ]
    return "\n".join(lines) + "\n"
