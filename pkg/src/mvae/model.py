"""The multimodal VAE: per-modality MLP experts fused into a posterior over
any modality subset, and the subset ELBOs built on that posterior.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .gaussian import (
    DiagGaussian,
    constrain_variance_for_quotient,
    from_natural,
    kl_to_standard_normal,
    quotient_natural,
    rsample,
)
from .numerics import (
    DimensionError,
    RngStream,
    Tensor,
    apply_unary,
    as_tensor,
    bernoulli_logit_loglik,
    log_sum_exp,
    scatter_rows,
    slice_last,
    take_rows,
)

LIKELIHOODS = ("bernoulli", "categorical", "gaussian")
VARIANTS = ("mvae", "mvae_q")
ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class ModalitySpec:
    """One observation channel.

    ``obs_var`` is the fixed (never trained) variance of the Gaussian
    likelihood; it is ignored for the other likelihoods.
    """

    name: str
    likelihood: str
    data_dim: int
    hidden_dims: tuple[int, ...] = (512, 512)
    lambda_weight: float = 1.0
    embed_first_layer: bool = False
    obs_var: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.likelihood not in LIKELIHOODS:
            raise ValueError(f"likelihood must be one of {LIKELIHOODS}, got {self.likelihood!r}")
        if self.data_dim < 1:
            raise ValueError("data_dim must be >= 1")
        if not self.lambda_weight > 0:
            raise ValueError("lambda_weight must be > 0")
        if self.embed_first_layer and self.likelihood != "categorical":
            raise ValueError("embed_first_layer only applies to categorical modalities")
        if not self.obs_var > 0:
            raise ValueError("obs_var must be > 0")


def reference_mnist_specs() -> list[ModalitySpec]:
    """Image (784 Bernoulli) and label (10-way, embedded) with 2x512 MLPs."""
    return [
        ModalitySpec("image", "bernoulli", 784, (512, 512), lambda_weight=1.0),
        ModalitySpec("label", "categorical", 10, (512, 512), lambda_weight=50.0, embed_first_layer=True),
    ]


REFERENCE_MNIST_LATENT_DIM = 64


@dataclass
class MultimodalBatch:
    """Per-modality arrays (batch-major) plus a presence mask of shape (B, N).

    Rows of absent modalities may hold anything, including NaN; they are
    never read.  Categorical modalities hold class indices, shape (B,).
    """

    data: tuple[np.ndarray, ...]
    mask: np.ndarray

    def __post_init__(self):
        self.data = tuple(np.asarray(d, dtype=np.float64) for d in self.data)
        self.mask = np.asarray(self.mask, dtype=bool)
        n = len(self.mask)
        if self.mask.ndim != 2 or self.mask.shape[1] != len(self.data):
            raise DimensionError(f"mask shape {self.mask.shape} does not fit {len(self.data)} modalities")
        for i, d in enumerate(self.data):
            if len(d) != n:
                raise DimensionError(f"modality {i} has {len(d)} rows, mask has {n}")

    @classmethod
    def full(cls, data: Sequence[np.ndarray]) -> "MultimodalBatch":
        n = len(data[0])
        return cls(tuple(data), np.ones((n, len(data)), dtype=bool))

    @classmethod
    def concat(cls, batches: Sequence["MultimodalBatch"]) -> "MultimodalBatch":
        data = tuple(np.concatenate([b.data[i] for b in batches]) for i in range(batches[0].n_modalities))
        return cls(data, np.concatenate([b.mask for b in batches]))

    def __len__(self) -> int:
        return len(self.mask)

    @property
    def n_modalities(self) -> int:
        return len(self.data)

    def take(self, rows) -> "MultimodalBatch":
        rows = np.asarray(rows, dtype=np.intp)
        return MultimodalBatch(tuple(d[rows] for d in self.data), self.mask[rows])

    def with_mask(self, mask) -> "MultimodalBatch":
        return MultimodalBatch(self.data, mask)


class MvaeModel:
    """Latent dimension, modality specs, variant and a flat parameter dict.

    Parameters are named ``enc.<modality>.<layer>.weight|bias`` and
    ``dec.<modality>.<layer>.weight|bias``; an embedded first encoder layer
    has no bias.
    """

    def __init__(self, latent_dim: int, specs: Sequence[ModalitySpec], params: Mapping[str, np.ndarray],
                 variant: str = "mvae", activation: str = "relu"):
        if variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        names = [s.name for s in specs]
        if len(set(names)) != len(names):
            raise ValueError(f"modality names must be unique: {names}")
        if variant == "mvae_q" and len(specs) < 2:
            raise ValueError("mvae_q needs at least 2 modalities")
        self.latent_dim = int(latent_dim)
        self.specs = tuple(specs)
        self.variant = variant
        self.activation = activation
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
        expected = dict(self.param_shapes())
        if set(expected) != set(self.params):
            missing = sorted(set(expected) - set(self.params))
            extra = sorted(set(self.params) - set(expected))
            raise ValueError(f"parameter names mismatch; missing {missing}, unexpected {extra}")
        for k, shape in expected.items():
            if self.params[k].shape != shape:
                raise DimensionError(f"parameter {k} has shape {self.params[k].shape}, expected {shape}")
        self._tensors: dict[str, Tensor] | None = None

    @property
    def n_modalities(self) -> int:
        return len(self.specs)

    def index(self, name_or_index) -> int:
        if isinstance(name_or_index, (int, np.integer)):
            return int(name_or_index)
        return [s.name for s in self.specs].index(name_or_index)

    def _layers(self, kind: str, i: int) -> list[tuple[str, str | None, int, int]]:
        spec = self.specs[i]
        if kind == "enc":
            sizes = [spec.data_dim, *spec.hidden_dims, 2 * self.latent_dim]
        else:
            sizes = [self.latent_dim, *reversed(spec.hidden_dims), spec.data_dim]
        out = []
        for j in range(len(sizes) - 1):
            w = f"{kind}.{spec.name}.{j}.weight"
            b = None if (kind == "enc" and j == 0 and spec.embed_first_layer) else f"{kind}.{spec.name}.{j}.bias"
            out.append((w, b, sizes[j], sizes[j + 1]))
        return out

    def param_shapes(self):
        for kind in ("enc", "dec"):
            for i in range(self.n_modalities):
                for w, b, fan_in, fan_out in self._layers(kind, i):
                    yield w, (fan_in, fan_out)
                    if b is not None:
                        yield b, (fan_out,)

    def encoder_param_names(self, i: int | None = None) -> list[str]:
        idx = range(self.n_modalities) if i is None else [i]
        names = []
        for m in idx:
            for w, b, _, _ in self._layers("enc", m):
                names += [w] if b is None else [w, b]
        return names

    @classmethod
    def build(cls, latent_dim: int, specs: Sequence[ModalitySpec], variant: str = "mvae",
              seed: int = 0, activation: str = "relu") -> "MvaeModel":
        """Fresh model; every tensor ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), seeded."""
        shell = cls.__new__(cls)
        shell.latent_dim, shell.specs = int(latent_dim), tuple(specs)
        root = RngStream(seed, stream_id=0x1417)
        params = {}
        for n, (name, shape) in enumerate(shell.param_shapes()):
            fan_in = shape[0]
            bound = 1.0 / math.sqrt(fan_in)
            params[name] = (2.0 * root.spawn(n).uniform(shape) - 1.0) * bound
        return cls(latent_dim, specs, params, variant, activation)

    def with_params(self, params: Mapping[str, np.ndarray]) -> "MvaeModel":
        return MvaeModel(self.latent_dim, self.specs, params, self.variant, self.activation)

    def tensor_params(self) -> dict[str, Tensor]:
        if self._tensors is None:
            self._tensors = {k: Tensor(v) for k, v in self.params.items()}
        return self._tensors

    def config(self) -> dict:
        return {
            "latent_dim": self.latent_dim,
            "variant": self.variant,
            "activation": self.activation,
            "modalities": [
                {
                    "name": s.name,
                    "likelihood": s.likelihood,
                    "data_dim": s.data_dim,
                    "hidden_dims": list(s.hidden_dims),
                    "lambda_weight": s.lambda_weight,
                    "embed_first_layer": s.embed_first_layer,
                    "obs_var": s.obs_var,
                }
                for s in self.specs
            ],
        }


def reference_mnist_model(seed: int = 0, variant: str = "mvae") -> MvaeModel:
    return MvaeModel.build(REFERENCE_MNIST_LATENT_DIM, reference_mnist_specs(), variant, seed)


def count_inference_parameters(model: MvaeModel, modality: int | str | None = None) -> int:
    """Scalar parameters in the encoders (all, or one modality's)."""
    i = None if modality is None else model.index(modality)
    return sum(model.params[n].size for n in model.encoder_param_names(i))


# -- forward passes -----------------------------------------------------------


def _class_index(spec: ModalitySpec, x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 2 and arr.shape[1] == spec.data_dim and spec.data_dim > 1:
        return arr.argmax(axis=1)
    arr = arr.reshape(-1)
    idx = arr.astype(np.int64)
    if np.any(idx != arr) or np.any(idx < 0) or np.any(idx >= spec.data_dim):
        bad = int(np.flatnonzero((idx != arr) | (idx < 0) | (idx >= spec.data_dim))[0])
        raise ValueError(f"class index {arr[bad]!r} at row {bad} outside 0..{spec.data_dim - 1}")
    return idx


def _as_matrix(spec: ModalitySpec, x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1 and spec.data_dim == 1:
        arr = arr[:, None]
    if arr.ndim != 2 or arr.shape[1] != spec.data_dim:
        raise DimensionError(f"modality {spec.name!r} expects (B, {spec.data_dim}), got {arr.shape}")
    return arr


def _mlp(model: MvaeModel, P: Mapping[str, Tensor], layers, h, start: int = 0) -> Tensor:
    act = model.activation
    for j, (w, b, _, _) in enumerate(layers):
        if j < start:
            continue
        if j > 0:
            h = apply_unary(act, h)
        h = h @ P[w]
        if b is not None:
            h = h + P[b]
    return h


def encode_modality(model: MvaeModel, i: int, x, params: Mapping[str, Tensor] | None = None) -> DiagGaussian:
    """Expert q~(z | x_i) for each row of ``x``."""
    P = model.tensor_params() if params is None else params
    spec = model.specs[i]
    layers = model._layers("enc", i)
    D = model.latent_dim
    if spec.likelihood == "categorical":
        idx = _class_index(spec, x)
        if spec.embed_first_layer:
            out = _mlp(model, P, layers, take_rows(P[layers[0][0]], idx), start=1)
        else:
            out = _mlp(model, P, layers, Tensor(np.eye(spec.data_dim)[idx]))
    else:
        out = _mlp(model, P, layers, Tensor(_as_matrix(spec, x)))
    mean = slice_last(out, 0, D)
    raw = slice_last(out, D, 2 * D)
    if model.variant == "mvae_q":
        raw = constrain_variance_for_quotient(raw, model.n_modalities)
    return DiagGaussian(mean, raw)


def decode_modality(model: MvaeModel, i: int, z, params: Mapping[str, Tensor] | None = None) -> Tensor:
    """Likelihood parameters: Bernoulli/categorical logits or Gaussian means."""
    P = model.tensor_params() if params is None else params
    z = z if isinstance(z, Tensor) else Tensor(z)
    if z.shape[-1] != model.latent_dim:
        raise DimensionError(f"latent has length {z.shape[-1]}, model D = {model.latent_dim}")
    return _mlp(model, P, model._layers("dec", i), z)


def log_likelihood(spec: ModalitySpec, out: Tensor, x) -> Tensor:
    """log p(x | z) per row, given decoder output ``out``."""
    out = as_tensor(out)
    if spec.likelihood == "bernoulli":
        return bernoulli_logit_loglik(out, _as_matrix(spec, x))
    if spec.likelihood == "categorical":
        onehot = np.eye(spec.data_dim)[_class_index(spec, x)]
        log_probs = out - log_sum_exp(out, axis=-1, keepdims=True)
        return (log_probs * onehot).sum(axis=-1)
    X = _as_matrix(spec, x)
    sq = apply_unary("square", out - X)
    const = math.log(2.0 * math.pi * spec.obs_var)
    return -0.5 * (sq * (1.0 / spec.obs_var) + const).sum(axis=-1)


# -- posterior fusion ---------------------------------------------------------


@dataclass
class EncodedBatch:
    """Natural parameters of every present expert, scattered to full batch rows."""

    precision: list[Tensor | None]
    eta: list[Tensor | None]
    n_rows: int


def encode_batch(model: MvaeModel, batch: MultimodalBatch, params=None) -> EncodedBatch:
    if batch.n_modalities != model.n_modalities:
        raise DimensionError(f"batch has {batch.n_modalities} modalities, model has {model.n_modalities}")
    B = len(batch)
    Ts, etas = [], []
    for i in range(model.n_modalities):
        rows = np.flatnonzero(batch.mask[:, i])
        if len(rows) == 0:
            Ts.append(None)
            etas.append(None)
            continue
        q = encode_modality(model, i, batch.data[i][rows], params)
        T = q.precision
        eta = q.mean * T
        if len(rows) < B:
            T, eta = scatter_rows(T, rows, B), scatter_rows(eta, rows, B)
        Ts.append(T)
        etas.append(eta)
    return EncodedBatch(Ts, etas, B)


def _fuse_rows(model: MvaeModel, enc: EncodedBatch, sub: np.ndarray, rows: np.ndarray) -> DiagGaussian:
    """Posterior for ``rows`` fusing the experts flagged in ``sub`` (R, N)."""
    R, D = len(rows), model.latent_dim
    all_rows = R == enc.n_rows
    T = eta = None
    for i in range(model.n_modalities):
        col = sub[:, i]
        if not col.any():
            continue
        Ti, ei = enc.precision[i], enc.eta[i]
        if not all_rows:
            Ti, ei = take_rows(Ti, rows), take_rows(ei, rows)
        if not col.all():
            w = col.astype(np.float64)[:, None]
            Ti, ei = Ti * w, ei * w
        T = Ti if T is None else T + Ti
        eta = ei if eta is None else eta + ei
    if T is None:
        return DiagGaussian.standard((R, D))
    if model.variant == "mvae":
        return from_natural(T + 1.0, eta)
    copies = (sub.sum(axis=1) - 1).astype(np.float64)[:, None]
    return quotient_natural(T, eta, copies, 0.0)


def _subset_mask(batch: MultimodalBatch, mask) -> np.ndarray:
    m = np.asarray(mask, dtype=bool)
    if m.ndim == 1:
        if len(m) != batch.n_modalities:
            raise DimensionError(f"subset mask has {len(m)} entries for {batch.n_modalities} modalities")
        m = np.broadcast_to(m, batch.mask.shape)
    elif m.shape != batch.mask.shape:
        raise DimensionError(f"mask shape {m.shape} != batch mask {batch.mask.shape}")
    return m & batch.mask


def fuse_posterior(model: MvaeModel, batch: MultimodalBatch, mask=None, params=None,
                   encoded: EncodedBatch | None = None) -> DiagGaussian:
    """q(z | X) per row, X = the subset in ``mask`` among present modalities.

    ``mask`` is a length-N subset or a per-row (B, N) mask; default is every
    present modality.
    """
    sub = batch.mask if mask is None else _subset_mask(batch, mask)
    enc = encode_batch(model, batch, params) if encoded is None else encoded
    return _fuse_rows(model, enc, sub, np.arange(len(batch)))


# -- ELBO ---------------------------------------------------------------------


def _lambdas(model: MvaeModel, lambdas) -> tuple[float, ...]:
    if lambdas is None:
        return tuple(s.lambda_weight for s in model.specs)
    lambdas = tuple(float(v) for v in lambdas)
    if len(lambdas) != model.n_modalities:
        raise ValueError(f"{len(lambdas)} lambdas for {model.n_modalities} modalities")
    return lambdas


def _elbo_rows(model, P, batch, enc, sub, rows, beta, lambdas, noise) -> Tensor:
    """Per-row ELBO for ``rows`` using the subsets in ``sub`` (R, N)."""
    q = _fuse_rows(model, enc, sub, rows)
    z = rsample(q, noise=noise).z
    R = len(rows)
    recon = None
    for i in range(model.n_modalities):
        col = sub[:, i]
        if not col.any():
            continue
        local = np.flatnonzero(col)
        zi = z if len(local) == R else take_rows(z, local)
        out = decode_modality(model, i, zi, P)
        ll = log_likelihood(model.specs[i], out, batch.data[i][rows[local]])
        if len(local) < R:
            ll = scatter_rows(ll, local, R)
        term = lambdas[i] * ll
        recon = term if recon is None else recon + term
    kl = kl_to_standard_normal(q)
    return -(beta * kl) if recon is None else recon - beta * kl


def elbo_subset(model: MvaeModel, batch: MultimodalBatch, mask, beta: float = 1.0, lambdas=None,
                stream: RngStream | None = None, noise=None, params=None) -> Tensor:
    """Single-sample ELBO(X), averaged over the rows where X is non-empty."""
    P = model.tensor_params() if params is None else params
    sub_full = _subset_mask(batch, mask)
    rows = np.flatnonzero(sub_full.any(axis=1))
    if len(rows) == 0:
        raise ValueError("subset mask selects no present modality in any row")
    if noise is None:
        if stream is None:
            raise ValueError("elbo_subset needs a stream or explicit noise")
        noise = stream.normal((len(rows), model.latent_dim))
    enc = encode_batch(model, batch, P)
    vals = _elbo_rows(model, P, batch, enc, sub_full[rows], rows, beta, _lambdas(model, lambdas), noise)
    return vals.sum() / float(len(rows))


@dataclass
class ElboTerm:
    label: str
    rows: np.ndarray
    subsets: np.ndarray
    value: Tensor  # sum over rows / batch size
    per_row: Tensor = field(repr=False)


def _random_subset_count(m: int, k: int) -> int:
    if m < 3:
        return 0
    return min(k, 2**m - m - 2)


def draw_random_subsets(present: Sequence[int], k: int, stream: RngStream) -> list[tuple[int, ...]]:
    """k (or fewer) random subsets of ``present`` excluding singletons and the full set.

    Subset size is uniform on {2, ..., m-1}, then the subset is uniform among
    those of that size.  Duplicates across draws are allowed.
    """
    m = len(present)
    out = []
    for _ in range(_random_subset_count(m, k)):
        size = 2 + int(stream.integers(m - 2)[0])
        out.append(stream.subset(present, size))
    return out


def objective_terms(model: MvaeModel, batch: MultimodalBatch, k: int, beta: float = 1.0, lambdas=None,
                    stream: RngStream | None = None, params=None, fixed_epsilon: bool = False) -> list[ElboTerm]:
    """The ELBO terms of the sub-sampled objective for one minibatch.

    Per row with m present modalities: the joint term over all of them; when
    m >= 2, one term per present singleton; when m >= 3, min(k, 2^m - m - 2)
    random-subset terms.  Each term's ``value`` is its row sum divided by the
    batch size, so the objective is the batch mean of per-example sums.
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    if stream is None:
        raise ValueError("objective needs a stream")
    P = model.tensor_params() if params is None else params
    lam = _lambdas(model, lambdas)
    B, N, D = len(batch), model.n_modalities, model.latent_dim
    present = batch.mask
    m = present.sum(axis=1)
    if np.any(m == 0):
        raise ValueError("every example needs at least one present modality")

    plan: list[tuple[str, np.ndarray, np.ndarray]] = [("joint", np.arange(B), present)]
    multi = m >= 2
    for i in range(N):
        rows = np.flatnonzero(multi & present[:, i])
        if len(rows):
            sub = np.zeros((len(rows), N), dtype=bool)
            sub[:, i] = True
            plan.append((f"single:{model.specs[i].name}", rows, sub))
    if k > 0:
        drawn = {}
        for r in np.flatnonzero(m >= 3):
            drawn[r] = draw_random_subsets(np.flatnonzero(present[r]).tolist(), k, stream)
        for j in range(k):
            rows = np.array([r for r, subs in drawn.items() if len(subs) > j], dtype=np.intp)
            if len(rows) == 0:
                break
            sub = np.zeros((len(rows), N), dtype=bool)
            for a, r in enumerate(rows):
                sub[a, list(drawn[r][j])] = True
            plan.append((f"random:{j}", rows, sub))

    eps_all = stream.normal((B, D)) if fixed_epsilon else None
    enc = encode_batch(model, batch, P)
    terms = []
    for label, rows, sub in plan:
        noise = eps_all[rows] if fixed_epsilon else stream.normal((len(rows), D))
        vals = _elbo_rows(model, P, batch, enc, sub, rows, beta, lam, noise)
        terms.append(ElboTerm(label, rows, sub, vals.sum() / float(B), vals))
    return terms


def sub_sampled_objective(model: MvaeModel, batch: MultimodalBatch, k: int, beta: float = 1.0, lambdas=None,
                          stream: RngStream | None = None, params=None, fixed_epsilon: bool = False) -> Tensor:
    """Joint ELBO + singleton ELBOs + k random-subset ELBOs, summed (batch mean per term)."""
    terms = objective_terms(model, batch, k, beta, lambdas, stream, params, fixed_epsilon)
    total = terms[0].value
    for t in terms[1:]:
        total = total + t.value
    return total


def terms_per_example(terms: Sequence[ElboTerm], n_rows: int) -> np.ndarray:
    counts = np.zeros(n_rows, dtype=np.int64)
    for t in terms:
        counts[t.rows] += 1
    return counts
