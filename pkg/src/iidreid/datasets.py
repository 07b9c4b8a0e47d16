"""Manifests, image I/O, the in-memory dataset container and the toy corpus."""

import csv
from dataclasses import dataclass, field
import hashlib
import logging
from pathlib import Path
import re

import numpy as np
from PIL import Image

from .exceptions import ConfigurationError, InvalidParameterError
from .illumsynth import DEFAULT_GAMMA_GRID, SynthesisSpec, synthesize_arrays

logger = logging.getLogger(__name__)

MANIFEST_FIELDS = ("path", "identity", "camera", "illumination", "split")
SPLITS = ("train", "query", "gallery")


@dataclass(frozen=True)
class ManifestRecord:
    image_path: str
    identity: int
    camera: int
    illumination: int
    split: str

    def __post_init__(self):
        if self.identity < 0 or self.camera < 0 or self.illumination < 0:
            raise InvalidParameterError(f"negative label in record {self}")
        if self.split not in SPLITS:
            raise InvalidParameterError(f"unknown split {self.split!r}")


def read_manifest(path):
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_FIELDS:
            raise ConfigurationError(
                f"{path}: manifest header must be {','.join(MANIFEST_FIELDS)}"
            )
        return [
            ManifestRecord(
                image_path=row["path"],
                identity=int(row["identity"]),
                camera=int(row["camera"]),
                illumination=int(row["illumination"]),
                split=row["split"],
            )
            for row in reader
        ]


def write_manifest(records, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_FIELDS)
        for r in records:
            writer.writerow([r.image_path, r.identity, r.camera, r.illumination, r.split])


def load_image(path, mode="RGB"):
    with Image.open(path) as im:
        return np.asarray(im.convert(mode), dtype=np.uint8)


def save_image(img, path):
    Image.fromarray(np.asarray(img, dtype=np.uint8)).save(path, format="PNG")


@dataclass
class ReIDData:
    """Images plus aligned label arrays, all held in memory."""

    images: np.ndarray
    identities: np.ndarray
    cameras: np.ndarray
    illumination: np.ndarray
    split: np.ndarray
    masks: np.ndarray | None = None
    name: str = "dataset"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.uint8)
        self.identities = np.asarray(self.identities, dtype=np.int64)
        self.cameras = np.asarray(self.cameras, dtype=np.int64)
        self.illumination = np.asarray(self.illumination, dtype=np.int64)
        self.split = np.asarray(self.split, dtype=object)
        n = len(self.images)
        for arr in (self.identities, self.cameras, self.illumination, self.split):
            if len(arr) != n:
                raise InvalidParameterError("label arrays must align with images")

    def __len__(self):
        return len(self.images)

    def subset(self, index, name=None):
        index = np.asarray(index)
        return ReIDData(
            self.images[index],
            self.identities[index],
            self.cameras[index],
            self.illumination[index],
            self.split[index],
            None if self.masks is None else self.masks[index],
            name or self.name,
            dict(self.meta),
        )

    def select(self, split):
        return self.subset(np.flatnonzero(self.split == split), f"{self.name}:{split}")

    def with_images(self, images, illumination=None, name=None):
        return ReIDData(
            images,
            self.identities,
            self.cameras,
            self.illumination if illumination is None else illumination,
            self.split,
            self.masks,
            name or self.name,
            dict(self.meta),
        )

    def fingerprint(self):
        h = hashlib.sha256()
        for arr in (self.images, self.identities, self.cameras, self.illumination):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:16]

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:3])


def load_dataset(manifest_path, root=None, name=None):
    """Load every image of a manifest; paths are relative to ``root`` or the manifest."""
    manifest_path = Path(manifest_path)
    root = Path(root) if root is not None else manifest_path.parent
    records = read_manifest(manifest_path)
    if not records:
        raise ConfigurationError(f"{manifest_path}: empty manifest")
    images = np.stack([load_image(root / r.image_path) for r in records])
    mask_dir = root / "masks"
    masks = None
    if mask_dir.is_dir():
        masks = np.stack(
            [(load_image(mask_dir / Path(r.image_path).name, "L") > 127) for r in records]
        ).astype(np.uint8)
    return ReIDData(
        images,
        [r.identity for r in records],
        [r.camera for r in records],
        [r.illumination for r in records],
        [r.split for r in records],
        masks,
        name or manifest_path.parent.name,
    )


def write_dataset(data, out_dir):
    """Write PNGs, optional masks and ``manifest.csv``; returns the records."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if data.masks is not None:
        (out_dir / "masks").mkdir(exist_ok=True)
    records = []
    for i in range(len(data)):
        name = f"{data.identities[i]:04d}_c{data.cameras[i]}_{i:06d}.png"
        save_image(data.images[i], out_dir / name)
        if data.masks is not None:
            save_image(data.masks[i] * 255, out_dir / "masks" / name)
        records.append(
            ManifestRecord(
                name,
                int(data.identities[i]),
                int(data.cameras[i]),
                int(data.illumination[i]),
                str(data.split[i]),
            )
        )
    write_manifest(records, out_dir / "manifest.csv")
    return records


_MARKET_NAME = re.compile(r"^(-?\d+)_c(\d+)")


def ingest_market1501(root, illumination=4):
    """Build manifest records from a Market-1501 style directory tree.

    Junk (-1) and distractor (0000) images are skipped.
    """
    root = Path(root)
    folders = {"train": "bounding_box_train", "query": "query", "gallery": "bounding_box_test"}
    records = []
    for split, folder in folders.items():
        directory = root / folder
        if not directory.is_dir():
            raise ConfigurationError(f"missing Market-1501 folder {directory}")
        for path in sorted(directory.glob("*.jpg")):
            m = _MARKET_NAME.match(path.name)
            if m is None:
                continue
            pid, cam = int(m.group(1)), int(m.group(2))
            if pid <= 0:
                continue
            records.append(
                ManifestRecord(f"{folder}/{path.name}", pid, cam - 1, illumination, split)
            )
    return records


def split_summary(records):
    out = {}
    for split in SPLITS:
        rs = [r for r in records if r.split == split]
        out[split] = {"images": len(rs), "identities": len({r.identity for r in rs})}
    return out


# ---------------------------------------------------------------------------
# toy corpus

# Light and dark shades of the same hues, so that a global lighting change can
# make one identity's clothing look like another's.
_PALETTE = np.array(
    [
        [210, 60, 50],
        [120, 30, 25],
        [60, 170, 80],
        [25, 90, 40],
        [70, 100, 210],
        [30, 45, 115],
        [225, 205, 80],
        [135, 120, 40],
        [200, 200, 200],
        [95, 95, 95],
        [235, 150, 70],
        [130, 80, 40],
    ],
    dtype=np.float64,
)
_SKIN = np.array([[235, 200, 170], [200, 150, 110], [150, 100, 70], [100, 70, 50]], float)
_HAIR = np.array([[40, 30, 25], [90, 60, 35], [170, 140, 90]], float)
_SHOE = np.array([45.0, 40.0, 40.0])
NEUTRAL_SCALE = DEFAULT_GAMMA_GRID.index(1.0)


def _identity_attributes(seed, identity):
    rng = np.random.default_rng([seed, 7919, identity])
    top, pants, accent = rng.choice(len(_PALETTE), size=3, replace=False)
    return {
        "skin": _SKIN[rng.integers(len(_SKIN))],
        "hair": _HAIR[rng.integers(len(_HAIR))],
        "top": _PALETTE[top],
        "pants": _PALETTE[pants],
        "accent": _PALETTE[accent],
        "pattern": int(rng.integers(3)),  # solid, stripes, split
        "bag": int(rng.integers(3)),  # none, left, right
        "build": rng.uniform(0.85, 1.1),
    }


def _render_person(attrs, h, w, rng, camera_rng):
    """Render one image and its foreground mask."""
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    u, v = ys / h, xs / w  # normalized coordinates

    bg_level = camera_rng["level"] * rng.uniform(0.95, 1.05)
    img = np.empty((h, w, 3))
    img[:] = bg_level * camera_rng["tint"]
    img += (u[..., None] - 0.5) * camera_rng["gradient"]
    img += rng.normal(0, 4.0, size=img.shape)
    mask = np.zeros((h, w), dtype=bool)

    cx = 0.5 + camera_rng["offset"] + rng.uniform(-0.04, 0.04)
    half = 0.22 * attrs["build"]
    top_y = 0.08 + rng.uniform(-0.02, 0.02)

    def paint(region, color):
        img[region] = color + rng.normal(0, 3.0, size=(int(region.sum()), 3))
        mask[region] |= True

    head = ((u - (top_y + 0.07)) / 0.07) ** 2 + ((v - cx) / 0.16) ** 2 <= 1
    paint(head, attrs["skin"])
    hair = head & (u < top_y + 0.05)
    paint(hair, attrs["hair"])

    torso = (u >= top_y + 0.14) & (u < 0.56) & (np.abs(v - cx) <= half)
    if attrs["pattern"] == 1:
        stripes = torso & ((ys // 3) % 2 == 0)
        paint(torso & ~stripes, attrs["top"])
        paint(stripes, attrs["accent"])
    elif attrs["pattern"] == 2:
        upper = torso & (u < 0.38)
        paint(upper, attrs["top"])
        paint(torso & ~upper, attrs["accent"])
    else:
        paint(torso, attrs["top"])

    stride = camera_rng["stride"] + rng.uniform(-0.02, 0.02)
    for side in (-1, 1):
        leg_x = cx + side * (half * 0.5 + stride * (u - 0.56))
        leg = (u >= 0.56) & (u < 0.9) & (np.abs(v - leg_x) <= half * 0.42)
        paint(leg, attrs["pants"])
        shoe = (u >= 0.9) & (u < 0.95) & (np.abs(v - leg_x) <= half * 0.5)
        paint(shoe, _SHOE)

    if attrs["bag"]:
        side = -1 if attrs["bag"] == 1 else 1
        bag_x = cx + side * (half + 0.1)
        bag = (u >= 0.38) & (u < 0.55) & (np.abs(v - bag_x) <= 0.09)
        paint(bag, attrs["accent"] * 0.8)

    return np.clip(np.rint(img), 0, 255).astype(np.uint8), mask.astype(np.uint8)


def make_toy_corpus(
    n_identities=40,
    n_views=6,
    n_instances=9,
    image_size=(64, 32),
    n_train_identities=None,
    seed=0,
):
    """Procedurally rendered identities under near-uniform illumination.

    Each identity is a composition of coloured body parts.  Every view is a
    separate camera with its own background, placement and pose; each
    (identity, view) pair has ``n_instances`` nuisance-jittered renderings.
    The first half of the identities (or ``n_train_identities``) form the
    training split; for the others, instance 0 of each view is a query and
    the rest go to the gallery.  All images carry the neutral scale label.
    """
    h, w = image_size
    if n_train_identities is None:
        n_train_identities = n_identities // 2
    cams = []
    for c in range(n_views):
        crng = np.random.default_rng([seed, 104729, c])
        cams.append(
            {
                "level": crng.uniform(95, 135),
                "tint": crng.uniform(0.9, 1.1, size=3),
                "gradient": crng.uniform(-30, 30),
                "offset": crng.uniform(-0.08, 0.08),
                "stride": crng.uniform(-0.15, 0.15),
            }
        )
    n = n_identities * n_views * n_instances
    images = np.empty((n, h, w, 3), dtype=np.uint8)
    masks = np.empty((n, h, w), dtype=np.uint8)
    ids, cameras, split = [], [], []
    k = 0
    for pid in range(n_identities):
        attrs = _identity_attributes(seed, pid)
        for view in range(n_views):
            for inst in range(n_instances):
                rng = np.random.default_rng([seed, pid, view, inst])
                images[k], masks[k] = _render_person(attrs, h, w, rng, cams[view])
                ids.append(pid)
                cameras.append(view)
                if pid < n_train_identities:
                    split.append("train")
                else:
                    split.append("query" if inst == 0 else "gallery")
                k += 1
    return ReIDData(
        images,
        ids,
        cameras,
        np.full(n, NEUTRAL_SCALE),
        split,
        masks,
        "toy-base",
        {"seed": seed, "n_identities": n_identities, "n_views": n_views},
    )


def synthesize_dataset(data, spec, name=None):
    """Apply a synthesis spec to every image; labels become the sampled scales."""
    images, scales = synthesize_arrays(data.images, spec, data.masks)
    out = data.with_images(images, scales, name or f"{data.name}++")
    out.meta["synthesis"] = spec.to_dict()
    return out


def make_toy_datasets(seed=0, **kwargs):
    """Return ``(base, synthesized)`` toy datasets sharing identities and splits."""
    base = make_toy_corpus(seed=seed, **kwargs)
    synth = synthesize_dataset(base, SynthesisSpec(seed=seed), "toy-synth")
    return base, synth
