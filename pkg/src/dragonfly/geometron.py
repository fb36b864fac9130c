"""Procedural geometron surrogate: stroke-skeleton letter glyphs and texture-encrypted variants.

Glyph coordinates live in a unit box with y pointing down: the letter body
spans roughly [-0.6, 0.6] x [-0.75, 0.75].  A glyph is a set of polylines
rendered as strokes of fixed half-width.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensorio

STROKE_HALF_WIDTH = 0.13
GLYPH_UNIT = 0.4  # pixels per glyph unit, as a fraction of the image side
SPLITS = ("train", "val", "test")
DESK_COUNTS = (200, 50, 100)  # per class
FULL_SCALE_COUNTS = (3519, 621, 460)  # totals of the original corpus split


def _arc(cx, cy, rx, ry, start_deg, stop_deg, n=24):
    t = np.radians(np.linspace(start_deg, stop_deg, n))
    return np.stack([cx + rx * np.cos(t), cy + ry * np.sin(t)], axis=1)


def _line(*pts):
    return np.asarray(pts, dtype=np.float64)


def _skeletons() -> dict[str, list[np.ndarray]]:
    ring = _arc(0.0, 0.0, 0.5, 0.7, 0, 360, 48)
    return {
        "I": [_line((0, -0.75), (0, 0.75))],
        "O": [ring],
        "Q": [ring, _line((0.15, 0.35), (0.6, 0.85))],
        "D": [_line((-0.45, -0.75), (-0.45, 0.75)),
              np.vstack([_line((-0.45, -0.75)), _arc(-0.05, 0.0, 0.5, 0.75, -90, 90), _line((-0.45, 0.75))])],
        "B": [_line((-0.45, -0.75), (-0.45, 0.75)),
              np.vstack([_line((-0.45, -0.75)), _arc(0.0, -0.375, 0.4, 0.375, -90, 90), _line((-0.45, 0.0))]),
              np.vstack([_line((-0.45, 0.0)), _arc(0.05, 0.375, 0.45, 0.375, -90, 90), _line((-0.45, 0.75))])],
        "M": [_line((-0.55, 0.75), (-0.55, -0.75), (0, 0.2), (0.55, -0.75), (0.55, 0.75))],
        "U": [np.vstack([_line((-0.5, -0.75)), _arc(0.0, 0.25, 0.5, 0.5, 180, 0), _line((0.5, -0.75))])],
        "S": [np.vstack([_arc(0.0, -0.375, 0.42, 0.375, -20, -270), _arc(0.0, 0.375, 0.42, 0.375, -90, 160)])],
        "A": [_line((-0.55, 0.75), (0, -0.75), (0.55, 0.75)), _line((-0.3, 0.1), (0.3, 0.1))],
        "V": [_line((-0.55, -0.75), (0, 0.75), (0.55, -0.75))],
        "L": [_line((-0.4, -0.75), (-0.4, 0.75), (0.45, 0.75))],
        "T": [_line((-0.55, -0.75), (0.55, -0.75)), _line((0, -0.75), (0, 0.75))],
    }


SKELETONS = _skeletons()
ALPHABET = tuple(sorted(SKELETONS))


@dataclass(frozen=True)
class Jitter:
    """Random pose perturbation: rotation in degrees, isotropic scale range, translation as a fraction of the side."""
    rotation: float = 15.0
    scale: tuple[float, float] = (0.8, 1.1)
    translation: float = 0.1

    def __post_init__(self):
        if not (0 <= self.rotation <= 15 and 0 <= self.translation <= 0.1):
            raise ValueError(f"jitter out of range: {self}")
        lo, hi = self.scale
        if not 0.8 <= lo <= hi <= 1.1:
            raise ValueError(f"jitter scale range must lie in [0.8, 1.1], got {self.scale}")

    def sample(self, rng: np.random.Generator) -> tuple[float, float, float, float]:
        theta = np.radians(rng.uniform(-self.rotation, self.rotation))
        s = rng.uniform(*self.scale)
        tx, ty = rng.uniform(-self.translation, self.translation, size=2)
        return theta, s, tx, ty


NO_JITTER = None


def _segments(letter: str) -> np.ndarray:
    if letter not in SKELETONS:
        raise KeyError(f"unknown letter {letter!r}; alphabet is {''.join(ALPHABET)}")
    segs = [np.hstack([p[:-1], p[1:]]) for p in SKELETONS[letter]]
    return np.vstack(segs)  # (S, 4): x0 y0 x1 y1


def _distance_to_segments(pts: np.ndarray, segs: np.ndarray) -> np.ndarray:
    a, b = segs[:, :2], segs[:, 2:]
    ab = b - a
    denom = np.maximum((ab * ab).sum(1), 1e-12)
    ap = pts[:, None, :] - a[None]
    t = np.clip((ap * ab[None]).sum(-1) / denom, 0.0, 1.0)
    d = ap - t[..., None] * ab[None]
    return np.sqrt((d * d).sum(-1)).min(axis=1)


def render_glyph(letter: str, size: int = 32, jitter: Jitter | None = Jitter(),
                 rng: np.random.Generator | None = None) -> np.ndarray:
    """Binary (size, size) rendering of ``letter``; 1 on the strokes, 0 elsewhere."""
    if size < 16:
        raise ValueError(f"glyph size must be >= 16, got {size}")
    segs = _segments(letter)
    theta, s, tx, ty = 0.0, 1.0, 0.0, 0.0
    if jitter is not None:
        if rng is None:
            raise ValueError("jitter requires an rng")
        theta, s, tx, ty = jitter.sample(rng)
    centre = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    # pixel -> glyph coordinates through the inverse pose
    px = (xx - centre - tx * size) / (GLYPH_UNIT * size * s)
    py = (yy - centre - ty * size) / (GLYPH_UNIT * size * s)
    c, sn = np.cos(theta), np.sin(theta)
    u = c * px + sn * py
    v = -sn * px + c * py
    d = _distance_to_segments(np.stack([u.ravel(), v.ravel()], 1), segs)
    return (d <= STROKE_HALF_WIDTH).reshape(size, size).astype(np.float64)


# ---------------------------------------------------------------------------
# texture encryption


@dataclass(frozen=True)
class TextureParams:
    foreground_angle: float = 45.0
    background_angle: float = 135.0
    frequency: float = 0.2      # cycles per pixel, centre of the pass band
    bandwidth: float = 0.06     # radial std of the pass band
    angular_width: float = 12.0  # degrees, std of the orientation band
    mean: float = 0.5
    std: float = 0.15


def oriented_noise(shape, angle_deg: float, params: TextureParams, rng) -> np.ndarray:
    """Zero-mean, unit-std band-limited noise whose stripes run perpendicular to ``angle_deg``."""
    h, w = shape
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    r = np.hypot(fx, fy)
    phi = np.arctan2(fy, fx)
    a = np.radians(angle_deg)
    # orientation distance modulo pi (a texture is symmetric under 180 degrees)
    dphi = np.angle(np.exp(2j * (phi - a))) / 2
    gain = np.exp(-0.5 * ((r - params.frequency) / params.bandwidth) ** 2)
    gain *= np.exp(-0.5 * (dphi / np.radians(params.angular_width)) ** 2)
    gain[0, 0] = 0.0
    field_ = np.fft.ifft2(np.fft.fft2(rng.standard_normal(shape)) * gain).real
    sd = field_.std()
    return (field_ - field_.mean()) / (sd if sd > 0 else 1.0)


def _match(values: np.ndarray, mean: float, std: float) -> np.ndarray:
    if values.size < 2:
        return np.full_like(values, mean)
    sd = values.std()
    return mean + std * (values - values.mean()) / (sd if sd > 0 else 1.0)


def encrypt_sva(binary: np.ndarray, params: TextureParams = TextureParams(), rng=None) -> np.ndarray:
    """Hide a binary shape in orientation contrast.

    Foreground and background pixels are drawn from two oriented noise
    fields and each region is rescaled to the same mean and std, so the
    shape carries no first-order intensity cue.
    """
    rng = rng if rng is not None else np.random.default_rng()
    mask = np.asarray(binary) > 0.5
    fg = oriented_noise(mask.shape, params.foreground_angle, params, rng)
    bg = oriented_noise(mask.shape, params.background_angle, params, rng)
    out = np.empty(mask.shape)
    out[mask] = _match(fg[mask], params.mean, params.std)
    out[~mask] = _match(bg[~mask], params.mean, params.std)
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# experiments and datasets


@dataclass(frozen=True)
class Experiment:
    id: int
    name: str
    classes: tuple[str, ...]
    encrypted: bool


EXPERIMENTS = {
    1: Experiment(1, "Binary IO", ("I", "O"), False),
    2: Experiment(2, "Binary BDOQ", ("B", "D", "O", "Q"), False),
    3: Experiment(3, "IO-SVA", ("I", "O"), True),
}


def get_experiment(experiment: int) -> Experiment:
    try:
        return EXPERIMENTS[int(experiment)]
    except (KeyError, ValueError):
        raise ValueError(f"unknown experiment {experiment!r}; expected one of {sorted(EXPERIMENTS)}") from None


@dataclass
class GlyphSample:
    image: np.ndarray  # (H, W, 1)
    label: int
    letter: str
    encrypted: bool
    seed: tuple[int, ...]


def make_sample(exp: Experiment, label: int, seed_key, size=32, jitter=Jitter(),
                texture: TextureParams = TextureParams()) -> GlyphSample:
    rng = np.random.default_rng(list(seed_key))
    letter = exp.classes[label]
    img = render_glyph(letter, size, jitter, rng)
    if exp.encrypted:
        img = encrypt_sva(img, texture, rng)
    return GlyphSample(img[..., None], label, letter, exp.encrypted, tuple(seed_key))


@dataclass
class GlyphDataset:
    experiment: Experiment
    classes: tuple[str, ...]
    images: dict[str, np.ndarray]
    labels: dict[str, np.ndarray]
    manifest: dict = field(default_factory=dict)
    manifest_path: str | None = None

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        if name not in self.images:
            raise KeyError(f"no split {name!r}")
        return self.images[name], self.labels[name]

    @property
    def input_dims(self) -> tuple[int, int, int]:
        return tuple(self.images["train"].shape[1:])


def _parse_counts(counts) -> tuple[int, int, int]:
    if isinstance(counts, str):
        counts = [int(c) for c in counts.split(",")]
    counts = tuple(int(c) for c in counts)
    if len(counts) != 3 or min(counts) < 1:
        raise ValueError(f"counts must be three positive per-class sizes (train,val,test), got {counts}")
    return counts


def generate(experiment: int, counts=DESK_COUNTS, seed: int = 0, size: int = 32,
             jitter: Jitter | None = Jitter(), texture: TextureParams = TextureParams()) -> GlyphDataset:
    """In-memory dataset; ``counts`` are per class.  Each sample has its own seed stream
    keyed by (seed, split, class, index), so splits never share a stream."""
    exp = get_experiment(experiment)
    counts = _parse_counts(counts)
    images, labels = {}, {}
    for s, (split, n) in enumerate(zip(SPLITS, counts)):
        xs, ys = [], []
        for i in range(n):
            for k in range(len(exp.classes)):
                smp = make_sample(exp, k, (seed, s, k, i), size, jitter, texture)
                xs.append(smp.image)
                ys.append(k)
        images[split] = np.stack(xs).astype(np.float32)
        labels[split] = np.asarray(ys, dtype=np.int64)
    manifest = {
        "format": "dragonfly-geometron/1",
        "experiment": exp.id,
        "name": exp.name,
        "classes": list(exp.classes),
        "encrypted": exp.encrypted,
        "image_size": size,
        "counts_per_class": dict(zip(SPLITS, counts)),
        "seed": seed,
        "jitter": asdict(jitter) if jitter is not None else None,
        "texture": asdict(texture) if exp.encrypted else None,
    }
    return GlyphDataset(exp, exp.classes, images, labels, manifest)


def write_pgm(path, image) -> None:
    img = np.asarray(image, dtype=np.float64).squeeze()
    data = np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)
    h, w = data.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + data.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w) / 255.0


def synth_dataset(experiment: int, counts=DESK_COUNTS, seed: int = 0, out_dir=None,
                  size: int = 32, jitter: Jitter | None = Jitter(),
                  texture: TextureParams = TextureParams(), previews: int = 4) -> GlyphDataset:
    """Generate a dataset and, when ``out_dir`` is given, write shards, manifest and previews."""
    ds = generate(experiment, counts, seed, size, jitter, texture)
    if out_dir is None:
        return ds
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        files = {}
        for split in SPLITS:
            entry = {}
            for kind, arr in (("images", ds.images[split]), ("labels", ds.labels[split])):
                name = f"{split}_{kind}.dft1"
                blob = tensorio.encode(arr)
                (out / name).write_bytes(blob)
                entry[kind] = name
                entry[f"{kind}_sha256"] = hashlib.sha256(blob).hexdigest()
            files[split] = entry
        preview_files = []
        if previews:
            (out / "previews").mkdir(exist_ok=True)
            k = len(ds.classes)
            for split in SPLITS:
                for i in range(min(previews * k, len(ds.labels[split]))):
                    name = f"previews/{split}_{i:03d}_{ds.classes[ds.labels[split][i]]}.pgm"
                    write_pgm(out / name, ds.images[split][i])
                    preview_files.append(name)
        ds.manifest["files"] = files
        ds.manifest["previews"] = preview_files
        path = out / "manifest.json"
        path.write_text(json.dumps(ds.manifest, indent=2))
    except OSError as exc:
        raise OSError(f"failed writing dataset under {out}: {exc}") from exc
    ds.manifest_path = str(path)
    return ds


class DatasetError(RuntimeError):
    pass


def load_dataset(manifest_path) -> GlyphDataset:
    path = Path(manifest_path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
    except (OSError, ValueError) as exc:
        raise DatasetError(f"{path}: cannot read manifest ({exc})") from exc
    exp = get_experiment(manifest["experiment"])
    images, labels = {}, {}
    for split, entry in manifest["files"].items():
        for kind, store in (("images", images), ("labels", labels)):
            f = path.parent / entry[kind]
            try:
                blob = f.read_bytes()
            except OSError as exc:
                raise DatasetError(f"{f}: {exc}") from exc
            if hashlib.sha256(blob).hexdigest() != entry[f"{kind}_sha256"]:
                raise DatasetError(f"{f}: checksum mismatch")
            store[split] = tensorio.decode(blob, str(f))
    return GlyphDataset(exp, tuple(manifest["classes"]), images, labels, manifest, str(path))


# ---------------------------------------------------------------------------
# reference classifier


class NearestCentroid:
    """Fixed small reference classifier on raw pixels, used for difficulty sanity checks."""

    def fit(self, images, labels) -> "NearestCentroid":
        x = np.asarray(images, dtype=np.float64).reshape(len(labels), -1)
        y = np.asarray(labels)
        self.centroids = np.stack([x[y == k].mean(0) for k in range(int(y.max()) + 1)])
        return self

    def predict(self, images) -> np.ndarray:
        x = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
        d = ((x[:, None, :] - self.centroids[None]) ** 2).sum(-1)
        return d.argmin(1)

    def score(self, images, labels) -> float:
        return float(100.0 * np.mean(self.predict(images) == np.asarray(labels)))


def reference_accuracy(dataset: GlyphDataset) -> float:
    clf = NearestCentroid().fit(*dataset.split("train"))
    return clf.score(*dataset.split("test"))
