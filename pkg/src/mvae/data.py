"""Dataset loading from IDX files and seeded synthetic generators.

The synthetic generators are desk-scale stand-ins: ``synth_bimodal`` pairs a
noisy 8x8 glyph image with its class label, ``synth_attributes`` adds binary
attribute modalities, and ``linear_gaussian_dataset`` is a conjugate model
with closed-form densities and posteriors.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import ModalitySpec, MultimodalBatch, MvaeModel
from .numerics import RngStream

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
_MAX_IDX_ELEMENTS = 1 << 34


class IdxFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class BadMagicError(IdxFormatError):
    pass


class TruncatedFileError(IdxFormatError):
    pass


class DimensionOverflowError(IdxFormatError):
    pass


def parse_idx(raw: bytes) -> np.ndarray:
    """Decode IDX bytes to uint8 values with the declared shape."""
    if len(raw) < 4:
        raise TruncatedFileError("file shorter than the 4-byte magic", len(raw))
    (magic,) = struct.unpack(">I", raw[:4])
    if magic not in (IMAGE_MAGIC, LABEL_MAGIC):
        raise BadMagicError(f"bad magic 0x{magic:08x}", 0)
    ndim = magic & 0xFF
    dims = []
    for d in range(ndim):
        off = 4 + 4 * d
        if len(raw) < off + 4:
            raise TruncatedFileError(f"missing size of dimension {d}", len(raw))
        (n,) = struct.unpack(">I", raw[off:off + 4])
        if n >= 1 << 31:
            raise DimensionOverflowError(f"dimension {d} size {n} exceeds int32", off)
        dims.append(n)
    header = 4 + 4 * ndim
    count = math.prod(dims)
    if count > _MAX_IDX_ELEMENTS:
        raise DimensionOverflowError(f"{count} elements declared", 4)
    if len(raw) < header + count:
        raise TruncatedFileError(f"expected {count} data bytes, found {len(raw) - header}", len(raw))
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(path) -> np.ndarray:
    """Read an IDX file; image pixels are scaled by 1/255, labels are kept as class values."""
    raw = Path(path).read_bytes()
    values = parse_idx(raw)
    if values.ndim == 3:
        return values.astype(np.float64) / 255.0
    return values.astype(np.float64)


def write_idx(path, values: np.ndarray) -> None:
    """Inverse of :func:`load_idx` (3-D arrays are images in [0, 1], 1-D are labels)."""
    values = np.asarray(values)
    if values.ndim == 3:
        magic, raw = IMAGE_MAGIC, np.rint(values * 255.0)
    elif values.ndim == 1:
        magic, raw = LABEL_MAGIC, np.rint(values)
    else:
        raise ValueError(f"IDX writer supports 1-D labels or 3-D images, got {values.ndim}-D")
    if raw.min(initial=0) < 0 or raw.max(initial=0) > 255:
        raise ValueError("values do not fit in uint8")
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", n) for n in values.shape)
    Path(path).write_bytes(header + raw.astype(np.uint8).tobytes())


def binarize(images, mode: str = "threshold", stream: RngStream | None = None) -> np.ndarray:
    x = np.asarray(images, dtype=np.float64)
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise ValueError("binarize expects values in [0, 1]")
    if mode == "threshold":
        return (x >= 0.5).astype(np.float64)
    if mode == "stochastic":
        if stream is None:
            raise ValueError("stochastic binarization needs a stream")
        return (stream.uniform(x.shape) < x).astype(np.float64)
    raise ValueError(f"unknown binarization mode {mode!r}")


@dataclass
class Dataset:
    """Modality arrays sharing the leading extent n."""

    names: tuple[str, ...]
    arrays: tuple[np.ndarray, ...]
    provenance: str
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.arrays = tuple(np.asarray(a, dtype=np.float64) for a in self.arrays)
        if len({len(a) for a in self.arrays}) != 1:
            raise ValueError("all modalities must share the leading extent")
        if len(self.names) != len(self.arrays):
            raise ValueError("one name per modality")

    @property
    def n(self) -> int:
        return len(self.arrays[0])

    def to_batch(self) -> MultimodalBatch:
        return MultimodalBatch.full(self.arrays)

    def split(self, n_first: int) -> tuple["Dataset", "Dataset"]:
        def part(sl, tag):
            labels = None if self.labels is None else self.labels[sl]
            return Dataset(self.names, tuple(a[sl] for a in self.arrays), f"{self.provenance}[{tag}]", labels)

        return part(slice(0, n_first), f":{n_first}"), part(slice(n_first, None), f"{n_first}:")


def mnist_splits(images_path, labels_path, binary: bool = True):
    """First 50k / next 10k of the 60k training file as train / validation."""
    images = load_idx(images_path)
    images = images.reshape(len(images), -1)
    labels = load_idx(labels_path)
    if binary:
        images = binarize(images)
    ds = Dataset(("image", "label"), (images, labels), f"idx:{images_path}", labels)
    return ds.split(50_000)


# -- synthetic glyph data -----------------------------------------------------


def parse_glyphs(text: str) -> tuple[np.ndarray, np.ndarray]:
    """Parse the glyph asset into (10, 64) templates and (10, A) attribute bits."""
    glyphs: dict[int, np.ndarray] = {}
    attrs: dict[int, np.ndarray] = {}
    lines = text.splitlines()
    i = 0
    while i < len(lines):
        line = lines[i].strip()
        if line.startswith("glyph "):
            c = int(line.split()[1])
            rows = [r.strip() for r in lines[i + 1:i + 9]]
            if len(rows) != 8 or any(len(r) != 8 or set(r) - {"#", "."} for r in rows):
                raise ValueError(f"glyph {c}: expected 8 rows of 8 '#'/'.' characters")
            glyphs[c] = np.array([[ch == "#" for ch in r] for r in rows], dtype=np.float64).reshape(-1)
            i += 9
            continue
        if line.startswith("attributes "):
            bits = line.split()[1]
            attrs[c] = np.array([b == "1" for b in bits], dtype=np.float64)
        i += 1
    classes = sorted(glyphs)
    if classes != list(range(len(classes))):
        raise ValueError(f"glyph classes must be 0..K-1, got {classes}")
    templates = np.stack([glyphs[c] for c in classes])
    table = np.stack([attrs[c] for c in classes]) if len(attrs) == len(classes) else np.zeros((len(classes), 0))
    return templates, table


@lru_cache(maxsize=1)
def glyph_assets() -> tuple[np.ndarray, np.ndarray]:
    text = resources.files("mvae").joinpath("assets/glyphs.txt").read_text()
    templates, table = parse_glyphs(text)
    templates.flags.writeable = False
    table.flags.writeable = False
    return templates, table


N_CLASSES = 10


def _noisy_glyphs(n: int, flip: float, stream: RngStream) -> tuple[np.ndarray, np.ndarray]:
    templates, _ = glyph_assets()
    classes = stream.integers(N_CLASSES, n)
    flips = stream.uniform((n, templates.shape[1])) < flip
    images = np.abs(templates[classes] - flips)
    return images, classes


def synth_bimodal(n: int, noise_flip_prob: float = 0.05, seed: int = 0) -> Dataset:
    """Noisy 8x8 glyph image (64-dim Bernoulli) paired with its class label."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0.0 <= noise_flip_prob <= 0.5:
        raise ValueError("flip probability must lie in [0, 0.5]")
    images, classes = _noisy_glyphs(n, noise_flip_prob, RngStream(seed, stream_id=0xB1))
    return Dataset(("image", "label"), (images, classes.astype(np.float64)),
                   f"synth_bimodal(n={n}, flip={noise_flip_prob}, seed={seed})", classes)


def synth_attributes(n: int, n_modalities: int = 19, seed: int = 0, image_flip: float = 0.05,
                     attribute_flip: float = 0.05) -> Dataset:
    """Glyph image plus ``n_modalities - 1`` binary attribute modalities (each shape (n, 1))."""
    _, table = glyph_assets()
    if not 3 <= n_modalities <= table.shape[1] + 1:
        raise ValueError(f"n_modalities must lie in 3..{table.shape[1] + 1}")
    stream = RngStream(seed, stream_id=0xA7)
    images, classes = _noisy_glyphs(n, image_flip, stream)
    n_attr = n_modalities - 1
    flips = stream.uniform((n, n_attr)) < attribute_flip
    attrs = np.abs(table[classes, :n_attr] - flips)
    names = ("image",) + tuple(f"attr{j}" for j in range(n_attr))
    arrays = (images,) + tuple(attrs[:, j:j + 1] for j in range(n_attr))
    return Dataset(names, arrays, f"synth_attributes(n={n}, N={n_modalities}, seed={seed})", classes)


def template_match(images) -> np.ndarray:
    """Nearest glyph template by Hamming distance (ties to the lowest class)."""
    templates, _ = glyph_assets()
    x = np.asarray(images, dtype=np.float64)
    dist = np.abs(x[:, None, :] - templates[None, :, :]).sum(axis=-1)
    return dist.argmin(axis=1)


def bimodal_specs(hidden_dims: Sequence[int] = (128, 128), lambdas=(1.0, 50.0)) -> list[ModalitySpec]:
    return [
        ModalitySpec("image", "bernoulli", 64, tuple(hidden_dims), lambda_weight=lambdas[0]),
        ModalitySpec("label", "categorical", N_CLASSES, tuple(hidden_dims), lambda_weight=lambdas[1],
                     embed_first_layer=True),
    ]


# -- linear-Gaussian oracle ---------------------------------------------------


@dataclass(frozen=True)
class LinearGaussianSpec:
    """x_i = a_i z + s_i e_i with z, e_i ~ N(0, 1); latent dimension 1."""

    loadings: tuple[float, ...]
    noise_vars: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "loadings", tuple(float(a) for a in self.loadings))
        object.__setattr__(self, "noise_vars", tuple(float(s) for s in self.noise_vars))
        if len(self.loadings) != len(self.noise_vars):
            raise ValueError("one loading per noise variance")
        if any(s <= 0 for s in self.noise_vars):
            raise ValueError("noise variances must be positive")
        if any(a == 0 for a in self.loadings):
            raise ValueError("loadings must be non-zero")


@dataclass
class LinearGaussianOracle:
    spec: LinearGaussianSpec

    def _cov(self, idx: Sequence[int]) -> np.ndarray:
        a = np.array([self.spec.loadings[i] for i in idx])
        s = np.array([self.spec.noise_vars[i] for i in idx])
        return np.outer(a, a) + np.diag(s)

    def log_joint(self, idx: Sequence[int], xs: np.ndarray) -> np.ndarray:
        """log N(x_idx; 0, a a^T + diag(s)) per row; ``xs`` has shape (n, len(idx))."""
        xs = np.asarray(xs, dtype=np.float64).reshape(len(xs), len(idx))
        C = self._cov(idx)
        sign, logdet = np.linalg.slogdet(C)
        quad = np.einsum("ni,ij,nj->n", xs, np.linalg.inv(C), xs)
        return -0.5 * (quad + logdet + len(idx) * math.log(2 * math.pi))

    def log_marginal(self, i: int, x: np.ndarray) -> np.ndarray:
        return self.log_joint([i], np.asarray(x).reshape(-1, 1))

    def log_conditional(self, i: int, j: int, xi, xj) -> np.ndarray:
        both = np.column_stack([np.ravel(xi), np.ravel(xj)])
        return self.log_joint([i, j], both) - self.log_marginal(j, xj)

    def posterior(self, idx: Sequence[int], xs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Exact p(z | x_idx): (mean per row, variance)."""
        xs = np.asarray(xs, dtype=np.float64).reshape(-1, len(idx))
        prec = 1.0 + sum(self.spec.loadings[i] ** 2 / self.spec.noise_vars[i] for i in idx)
        lin = sum(xs[:, k] * self.spec.loadings[i] / self.spec.noise_vars[i] for k, i in enumerate(idx))
        return lin / prec, np.full(len(xs), 1.0 / prec)


def linear_gaussian_dataset(spec: LinearGaussianSpec, n: int, seed: int = 0) -> Dataset:
    stream = RngStream(seed, stream_id=0x1C)
    z = stream.normal(n)
    arrays = []
    for a, s in zip(spec.loadings, spec.noise_vars):
        arrays.append((a * z + math.sqrt(s) * stream.normal(n))[:, None])
    names = tuple(f"x{i + 1}" for i in range(len(arrays)))
    ds = Dataset(names, tuple(arrays), f"linear_gaussian({spec}, n={n}, seed={seed})")
    ds.oracle = LinearGaussianOracle(spec)  # type: ignore[attr-defined]
    ds.latent = z  # type: ignore[attr-defined]
    return ds


def linear_gaussian_model(spec: LinearGaussianSpec, variant: str = "mvae") -> MvaeModel:
    """MVAE whose encoders/decoders realise the conjugate model exactly.

    Each expert is q~(z|x_i) = N(x_i / a_i, s_i / a_i^2), the normalised
    likelihood in z, so the product with the prior expert is the exact
    posterior for any modality subset.  Decoders are linear, x_i | z ~ N(a_i z, s_i).
    """
    specs = [
        ModalitySpec(f"x{i + 1}", "gaussian", 1, (), obs_var=s)
        for i, s in enumerate(spec.noise_vars)
    ]
    params = {}
    for i, (a, s) in enumerate(zip(spec.loadings, spec.noise_vars)):
        name = specs[i].name
        params[f"enc.{name}.0.weight"] = np.array([[1.0 / a, 0.0]])
        params[f"enc.{name}.0.bias"] = np.array([0.0, math.log(s / a**2)])
        params[f"dec.{name}.0.weight"] = np.array([[a]])
        params[f"dec.{name}.0.bias"] = np.array([0.0])
    return MvaeModel(1, specs, params, variant)


def shift_proposal(model: MvaeModel, modality: int, mean_shift: float = 0.0, log_var_shift: float = 0.0) -> MvaeModel:
    """Copy of ``model`` whose encoder ``modality`` output head is offset (proposal perturbations)."""
    spec = model.specs[modality]
    layers = model._layers("enc", modality)
    _, bias, _, _ = layers[-1]
    params = dict(model.params)
    b = params[bias].copy()
    D = model.latent_dim
    b[:D] += mean_shift
    b[D:] += log_var_shift
    params[bias] = b
    return model.with_params(params)
