"""Illumination synthesis: gamma/Poisson global changes, local changes, Y shifts.

All randomized functions are pure functions of their inputs and an integer
seed.  Images are ``(H, W, 3)`` arrays with values in [0, 255]; outputs are
``uint8``.
"""

from dataclasses import asdict, dataclass, replace
import logging
from pathlib import Path

import numpy as np

from ._validation import check_image, check_positive, to_uint8
from .exceptions import InvalidParameterError

logger = logging.getLogger(__name__)

DEFAULT_GAMMA_GRID = (0.25, 0.40, 0.55, 0.75, 1.00, 1.50, 2.20, 3.20, 4.50)
LOCAL_GAMMAS = (0.3, 0.5, 0.7, 1.0, 1.6, 2.5, 4.0)
DELTA_Y_GRID = (-90.0, -60.0, -30.0, 0.0, 30.0, 60.0, 90.0)
PATCH_SIZES = ((32, 32), (32, 64), (64, 32))
MODES = ("global", "foreground", "patch", "ychannel")

# BT.601 analog YUV.  The inverse is the exact matrix inverse so that a zero
# shift round-trips up to float error.
RGB_TO_YUV = np.array(
    [
        [0.299, 0.587, 0.114],
        [-0.14713, -0.28886, 0.436],
        [0.615, -0.51499, -0.10001],
    ]
)
YUV_TO_RGB = np.linalg.inv(RGB_TO_YUV)
LUMA_WEIGHTS = RGB_TO_YUV[0]


@dataclass
class SynthesisSpec:
    """Resolved parameters of one synthesis run."""

    mode: str = "global"
    gamma_grid: tuple = DEFAULT_GAMMA_GRID
    poisson_peak: float | None = 10.0
    patch_sizes: tuple = PATCH_SIZES
    delta_y_grid: tuple = DELTA_Y_GRID
    seed: int = 0
    jitter: tuple = (0.95, 1.05)
    # "jitter": one base gamma, per-channel multiplicative jitter.
    # "independent": each channel drawn log-uniformly inside the band between
    # the neighbouring grid midpoints.
    gamma_mode: str = "jitter"

    def __post_init__(self):
        self.gamma_grid = tuple(float(g) for g in self.gamma_grid)
        self.delta_y_grid = tuple(float(d) for d in self.delta_y_grid)
        self.patch_sizes = tuple(tuple(int(v) for v in p) for p in self.patch_sizes)
        self.jitter = tuple(float(j) for j in self.jitter)
        self.validate()

    @classmethod
    def for_mode(cls, mode, **kwargs):
        """Spec with the default grid for ``mode`` (local modes use seven gammas)."""
        if mode in ("foreground", "patch"):
            kwargs.setdefault("gamma_grid", LOCAL_GAMMAS)
            kwargs.setdefault("poisson_peak", None)
        if mode == "ychannel":
            kwargs.setdefault("poisson_peak", None)
        return cls(mode=mode, **kwargs)

    @property
    def n_scales(self):
        return len(self.delta_y_grid) if self.mode == "ychannel" else len(self.gamma_grid)

    def validate(self):
        if self.mode not in MODES:
            raise InvalidParameterError(f"unknown synthesis mode {self.mode!r}")
        if any(g <= 0 for g in self.gamma_grid):
            raise InvalidParameterError("gamma_grid values must be > 0")
        if self.mode == "global" and len(self.gamma_grid) != 9:
            raise InvalidParameterError("global synthesis needs exactly 9 gamma values")
        if self.mode in ("foreground", "patch") and len(self.gamma_grid) != 7:
            raise InvalidParameterError("local synthesis needs exactly 7 gamma values")
        if self.mode == "ychannel" and len(self.delta_y_grid) != 7:
            raise InvalidParameterError("ychannel synthesis needs exactly 7 delta-Y values")
        if self.poisson_peak is not None:
            check_positive(self.poisson_peak, "poisson_peak")
        lo, hi = self.jitter
        if not 0 < lo <= hi:
            raise InvalidParameterError("jitter must satisfy 0 < low <= high")
        if self.gamma_mode not in ("jitter", "independent"):
            raise InvalidParameterError(f"unknown gamma_mode {self.gamma_mode!r}")

    def to_dict(self):
        d = asdict(self)
        d["n_scales"] = self.n_scales
        return d


# ---------------------------------------------------------------------------
# pixel operations


def gamma_adjust(img, gamma):
    """Apply ``255 * (v / 255) ** gamma_c`` per channel, rounded and clipped.

    ``gamma`` is a scalar or a per-channel triple of positive reals.
    """
    arr = check_image(img)
    g = np.broadcast_to(np.asarray(gamma, dtype=np.float64), (3,))
    if not np.all(np.isfinite(g)) or np.any(g <= 0):
        raise InvalidParameterError(f"gamma components must be > 0, got {gamma!r}")
    return to_uint8(255.0 * (arr / 255.0) ** g)


def add_poisson_noise(img, peak, seed):
    """Shot noise at ``peak`` photons for a full-scale pixel."""
    peak = check_positive(peak, "peak")
    arr = check_image(img)
    rng = np.random.default_rng(seed)
    counts = rng.poisson(arr / 255.0 * peak)
    return to_uint8(counts / peak * 255.0)


def luminance(img):
    """BT.601 luma of every pixel, as float64 ``(H, W)``."""
    return np.asarray(img, dtype=np.float64) @ LUMA_WEIGHTS


def rgb_to_yuv(img):
    return np.asarray(img, dtype=np.float64) @ RGB_TO_YUV.T


def yuv_to_rgb(yuv):
    return np.asarray(yuv, dtype=np.float64) @ YUV_TO_RGB.T


def synthesize_foreground(img, mask, gamma):
    """Gamma-adjust only the pixels where ``mask`` is 1."""
    arr = check_image(img)
    check_positive(gamma, "gamma")
    m = np.asarray(mask)
    if m.ndim == 3:
        m = m[..., 0]
    if m.shape != arr.shape[:2]:
        raise InvalidParameterError(
            f"mask shape {m.shape} does not match image shape {arr.shape[:2]}"
        )
    if not np.all((m == 0) | (m == 1)):
        raise InvalidParameterError("mask values must be 0 or 1")
    out = to_uint8(arr)
    adjusted = gamma_adjust(arr, gamma)
    sel = m.astype(bool)
    out[sel] = adjusted[sel]
    return out


def patch_location(image_hw, patch_size, seed):
    """Top-left corner of a patch placed uniformly over valid positions."""
    h, w = image_hw
    ph, pw = patch_size
    if ph < 1 or pw < 1 or ph > h or pw > w:
        raise InvalidParameterError(f"patch {patch_size} does not fit image {image_hw}")
    rng = np.random.default_rng(seed)
    return int(rng.integers(0, h - ph + 1)), int(rng.integers(0, w - pw + 1))


def synthesize_patch(img, patch_size, gamma, seed):
    arr = check_image(img)
    check_positive(gamma, "gamma")
    top, left = patch_location(arr.shape[:2], patch_size, seed)
    ph, pw = patch_size
    out = to_uint8(arr)
    region = arr[top : top + ph, left : left + pw]
    out[top : top + ph, left : left + pw] = gamma_adjust(region, gamma)
    return out


def synthesize_ychannel(img, delta_y):
    """Shift BT.601 luma by ``delta_y``, clipping Y and then RGB to [0, 255]."""
    yuv = rgb_to_yuv(check_image(img))
    yuv[..., 0] = np.clip(yuv[..., 0] + float(delta_y), 0.0, 255.0)
    return to_uint8(yuv_to_rgb(yuv))


def histogram_equalize(img):
    """Equalize the luma histogram with ``Y' = round(255 * cdf(Y))``.

    U and V are kept unless the new luma would push RGB out of range, in which
    case the chroma is scaled toward gray just enough to fit.
    """
    yuv = rgb_to_yuv(check_image(img))
    y = np.clip(np.rint(yuv[..., 0]), 0, 255).astype(np.int64)
    hist = np.bincount(y.ravel(), minlength=256)
    cdf = np.cumsum(hist) / y.size
    lut = np.rint(255.0 * cdf)
    return to_uint8(_in_gamut(lut[y], yuv[..., 1:]))


def _in_gamut(y, uv):
    """RGB for luma ``y`` and chroma ``uv``, desaturating only where RGB would clip.

    Keeps luma exact, so a second pass sees the same histogram.
    """
    chroma = uv @ YUV_TO_RGB[:, 1:].T  # per-channel offset from gray
    y = y[..., None]
    with np.errstate(divide="ignore", invalid="ignore"):
        limit = np.where(chroma > 0, (255.0 - y) / chroma, np.where(chroma < 0, -y / chroma, np.inf))
    t = np.clip(limit.min(axis=-1, keepdims=True), 0.0, 1.0)
    return y + t * chroma


# ---------------------------------------------------------------------------
# dataset-level synthesis


def _record_rng(seed, index):
    return np.random.default_rng([int(seed), int(index)])


def sample_channel_gammas(spec, scale, rng):
    base = spec.gamma_grid[scale]
    if spec.gamma_mode == "jitter":
        lo, hi = spec.jitter
        return base * rng.uniform(lo, hi, size=3)
    logs = np.log(np.asarray(spec.gamma_grid))
    order = np.argsort(logs)
    pos = int(np.where(order == scale)[0][0])
    sorted_logs = logs[order]
    lo = (sorted_logs[pos - 1] + sorted_logs[pos]) / 2 if pos > 0 else sorted_logs[pos]
    hi = (
        (sorted_logs[pos + 1] + sorted_logs[pos]) / 2
        if pos < len(sorted_logs) - 1
        else sorted_logs[pos]
    )
    return np.exp(rng.uniform(lo, hi, size=3))


def synthesize_one(img, spec, index, mask=None):
    """Synthesize one image of a dataset; returns ``(image, scale_index)``.

    The random draws depend only on ``(spec.seed, index)``, so records can be
    processed in any order or in parallel.
    """
    rng = _record_rng(spec.seed, index)
    scale = int(rng.integers(0, spec.n_scales))
    noise_seed = int(rng.integers(0, 2**63 - 1))
    if spec.mode == "global":
        out = gamma_adjust(img, sample_channel_gammas(spec, scale, rng))
    elif spec.mode == "foreground":
        if mask is None:
            raise InvalidParameterError("foreground synthesis needs a mask")
        out = synthesize_foreground(img, mask, spec.gamma_grid[scale])
    elif spec.mode == "patch":
        size = spec.patch_sizes[int(rng.integers(0, len(spec.patch_sizes)))]
        out = synthesize_patch(img, size, spec.gamma_grid[scale], int(rng.integers(0, 2**63 - 1)))
    else:
        out = synthesize_ychannel(img, spec.delta_y_grid[scale])
    if spec.poisson_peak is not None:
        out = add_poisson_noise(out, spec.poisson_peak, noise_seed)
    return out, scale


def synthesize_arrays(images, spec, masks=None):
    """Synthesize a stack of images; returns ``(uint8 images, scale indices)``."""
    images = np.asarray(images)
    out = np.empty(images.shape, dtype=np.uint8)
    scales = np.empty(len(images), dtype=np.int64)
    for i, img in enumerate(images):
        out[i], scales[i] = synthesize_one(img, spec, i, None if masks is None else masks[i])
    return out, scales


def synthesize_global(manifest, spec, out_dir, root=None, mask_root=None):
    """Synthesize every record of ``manifest`` and write PNGs under ``out_dir``.

    Returns ``(records, errors)``: the output records in input order (failed
    records are omitted) and a list of ``{"index", "path", "error"}`` dicts.
    Identity, camera and split are carried over; the illumination label is
    the sampled scale index.  Despite the name, any ``spec.mode`` is honoured.
    """
    from .datasets import load_image, save_image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records, errors = [], []
    for i, rec in enumerate(manifest):
        src = Path(rec.image_path)
        if root is not None and not src.is_absolute():
            src = Path(root) / src
        try:
            img = load_image(src)
            mask = None
            if spec.mode == "foreground":
                mask_path = Path(mask_root or "") / Path(rec.image_path).name
                mask = (load_image(mask_path, mode="L") > 127).astype(np.uint8)
            out, scale = synthesize_one(img, spec, i, mask)
        except (OSError, ValueError) as exc:
            logger.warning("record %d (%s) failed: %s", i, rec.image_path, exc)
            errors.append({"index": i, "path": str(rec.image_path), "error": str(exc)})
            continue
        name = f"{i:06d}_{Path(rec.image_path).stem}_s{scale}.png"
        save_image(out, out_dir / name)
        records.append(replace(rec, image_path=name, illumination=scale))
    return records, errors


def luminance_stats(images):
    """Per-image mean luma, dataset mean, and population variance of the means.

    ``images`` is any iterable of images (e.g. a loaded manifest).
    """
    means = np.array([luminance(check_image(img)).mean() for img in images])
    if means.size == 0:
        raise InvalidParameterError("luminance_stats needs at least one image")
    return {
        "per_image": means,
        "mean": float(means.mean()),
        "variance": float(means.var()),
    }


def scale_histogram(labels, n_scales):
    return np.bincount(np.asarray(labels, dtype=np.int64), minlength=n_scales)


__all__ = [
    "DEFAULT_GAMMA_GRID",
    "DELTA_Y_GRID",
    "LOCAL_GAMMAS",
    "PATCH_SIZES",
    "SynthesisSpec",
    "add_poisson_noise",
    "gamma_adjust",
    "histogram_equalize",
    "luminance",
    "luminance_stats",
    "patch_location",
    "synthesize_arrays",
    "synthesize_foreground",
    "synthesize_global",
    "synthesize_one",
    "synthesize_patch",
    "synthesize_ychannel",
]
