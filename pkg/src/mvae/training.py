"""Minibatch training on the sub-sampled objective with β annealing, plus
weak-supervision splits and random modality dropout."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .model import MultimodalBatch, MvaeModel, VARIANTS, objective_terms
from .numerics import AdamState, GradTape, RngStream, adam_step


class NonFiniteObjectiveError(FloatingPointError):
    def __init__(self, epoch: int, batch: int, detail: str = ""):
        self.epoch, self.batch = epoch, batch
        super().__init__(f"non-finite objective at epoch {epoch}, batch {batch}" + (f": {detail}" if detail else ""))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 100
    learning_rate: float = 1e-3
    k: int = 0
    beta_anneal_epochs: int = 0
    lambdas: tuple[float, ...] | None = None
    seed: int = 0
    variant: str = "mvae"
    fixed_epsilon_diagnostic: bool = False

    def __post_init__(self):
        if self.lambdas is not None:
            object.__setattr__(self, "lambdas", tuple(float(v) for v in self.lambdas))
            if any(not v > 0 for v in self.lambdas):
                raise ValueError("lambdas must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.k < 0:
            raise ValueError("k must be >= 0")
        if not 0 <= self.beta_anneal_epochs <= self.epochs:
            raise ValueError("beta_anneal_epochs must lie in [0, epochs]")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambdas"] = None if self.lambdas is None else list(self.lambdas)
        return d


def beta_schedule(epoch: int, config: TrainConfig) -> float:
    if config.beta_anneal_epochs == 0:
        return 1.0
    return min(1.0, epoch / config.beta_anneal_epochs)


@dataclass
class EpochRecord:
    epoch: int
    objective: float
    term_means: dict[str, float]
    beta: float
    seconds: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    @property
    def objectives(self) -> np.ndarray:
        return np.array([r.objective for r in self.records])

    def to_csv(self, seed: int | None = None) -> str:
        lines = ["epoch,objective,beta,seconds" + (",seed" if seed is not None else "")]
        for r in self.records:
            row = f"{r.epoch},{r.objective!r},{r.beta!r},{r.seconds:.6f}"
            lines.append(row + (f",{seed}" if seed is not None else ""))
        return "\n".join(lines) + "\n"


def _as_batch(data) -> MultimodalBatch:
    if isinstance(data, MultimodalBatch):
        return data
    if hasattr(data, "to_batch"):
        return data.to_batch()
    raise TypeError(f"cannot train on {type(data).__name__}")


def train(model: MvaeModel, dataset, config: TrainConfig, progress=None) -> tuple[MvaeModel, TrainHistory]:
    """Adam on the sub-sampled objective; deterministic given (seed, data, config).

    ``dataset`` is a Dataset or a MultimodalBatch (weak splits use the latter).
    ``progress`` is an optional callable receiving each EpochRecord.
    """
    pool = _as_batch(dataset)
    if pool.n_modalities != model.n_modalities:
        raise ValueError(f"dataset has {pool.n_modalities} modalities, model has {model.n_modalities}")
    if config.variant != model.variant:
        model = MvaeModel(model.latent_dim, model.specs, model.params, config.variant, model.activation)
    names = sorted(model.params)
    params = {k: model.params[k].copy() for k in names}
    states = {k: AdamState.zeros_like(params[k]) for k in names}
    root = RngStream(config.seed, stream_id=0x7A1)
    history = TrainHistory()
    n = len(pool)

    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        beta = beta_schedule(epoch, config)
        ep = root.spawn(epoch)
        order = ep.spawn(0).permutation(n)
        noise = ep.spawn(1)
        totals, term_sums, n_batches = 0.0, {}, 0
        for b, start in enumerate(range(0, n, config.batch_size)):
            batch = pool.take(order[start:start + config.batch_size])
            with GradTape() as tape:
                P = {k: tape.watch(params[k]) for k in names}
                try:
                    terms = objective_terms(model, batch, config.k, beta, config.lambdas, noise, P,
                                            config.fixed_epsilon_diagnostic)
                except FloatingPointError as exc:
                    raise NonFiniteObjectiveError(epoch, b, str(exc)) from exc
                obj = terms[0].value
                for t in terms[1:]:
                    obj = obj + t.value
                # maximise the objective: descend on its negation
                loss = -obj
            value = float(obj.item())
            if not np.isfinite(value):
                raise NonFiniteObjectiveError(epoch, b)
            grads = tape.gradient(loss, [P[k] for k in names])
            for k, g in zip(names, grads):
                params[k], states[k] = adam_step(params[k], g, states[k], config.learning_rate)
            totals += value
            for t in terms:
                term_sums[t.label] = term_sums.get(t.label, 0.0) + float(t.value.item())
            n_batches += 1
        rec = EpochRecord(epoch, totals / n_batches, {k: v / n_batches for k, v in term_sums.items()},
                          beta, time.perf_counter() - t0)
        history.records.append(rec)
        if progress is not None:
            progress(rec)
    return model.with_params(params), history


# -- weak supervision ---------------------------------------------------------


@dataclass
class WeakSplit:
    """Paired rows plus unpaired single-modality sets; absent entries hold NaN."""

    paired: MultimodalBatch
    first_only: MultimodalBatch
    second_only: MultimodalBatch

    @property
    def counts(self) -> tuple[int, int, int]:
        return len(self.paired), len(self.first_only), len(self.second_only)

    def pool(self) -> MultimodalBatch:
        parts = [p for p in (self.paired, self.first_only, self.second_only) if len(p)]
        return MultimodalBatch.concat(parts)


def _poisoned(arrays, rows, keep: int) -> MultimodalBatch:
    data = []
    for i, a in enumerate(arrays):
        part = np.asarray(a, dtype=np.float64)[rows]
        data.append(part if i == keep or keep < 0 else np.full_like(part, np.nan))
    mask = np.zeros((len(rows), len(arrays)), dtype=bool)
    if keep < 0:
        mask[:] = True
    else:
        mask[:, keep] = True
    return MultimodalBatch(tuple(data), mask)


def make_weak_split(dataset, fraction_paired: float, seed: int = 0) -> WeakSplit:
    """Keep floor(fraction * n) pairs; split the rest ceil/floor into image-only and label-only.

    Each unpaired half is independently permuted, destroying any pairing.
    """
    arrays = dataset.arrays if hasattr(dataset, "arrays") else dataset.data
    if len(arrays) != 2:
        raise ValueError(f"weak split needs a bimodal dataset, got {len(arrays)} modalities")
    if not 0.0 <= fraction_paired <= 1.0:
        raise ValueError("fraction_paired must lie in [0, 1]")
    n = len(arrays[0])
    root = RngStream(seed, stream_id=0x3EA)
    order = root.spawn(0).permutation(n)
    n_paired = int(np.floor(fraction_paired * n))
    rest = n - n_paired
    n_first = (rest + 1) // 2
    paired_rows = order[:n_paired]
    first_rows = order[n_paired:n_paired + n_first]
    second_rows = order[n_paired + n_first:]
    first_rows = first_rows[root.spawn(1).permutation(len(first_rows))]
    second_rows = second_rows[root.spawn(2).permutation(len(second_rows))]
    return WeakSplit(_poisoned(arrays, paired_rows, -1), _poisoned(arrays, first_rows, 0),
                     _poisoned(arrays, second_rows, 1))


def random_modality_dropout(batch: MultimodalBatch, p_keep: float, stream: RngStream) -> MultimodalBatch:
    """Keep each present modality with probability p_keep; drop rows left empty."""
    if not 0.0 < p_keep <= 1.0:
        raise ValueError("p_keep must lie in (0, 1]")
    keep = stream.uniform(batch.mask.shape) < p_keep
    mask = batch.mask & keep
    rows = np.flatnonzero(mask.any(axis=1))
    return MultimodalBatch(tuple(d[rows] for d in batch.data), mask[rows])
