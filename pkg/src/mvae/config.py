"""Run configuration files: strict JSON schema, resolution to library objects."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .data import (
    Dataset,
    LinearGaussianSpec,
    bimodal_specs,
    linear_gaussian_dataset,
    linear_gaussian_model,
    load_idx,
    binarize,
    synth_attributes,
    synth_bimodal,
)
from .model import ModalitySpec, MvaeModel
from .training import TrainConfig

SEED_ENV = "MVAE_SEED"
CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


_DATASET_KEYS = {
    "synth_bimodal": {"kind", "n", "n_test", "flip", "seed"},
    "synth_attributes": {"kind", "n", "n_test", "n_modalities", "seed"},
    "linear_gaussian": {"kind", "n", "n_test", "loadings", "noise_vars", "seed"},
    "mnist": {"kind", "images", "labels", "test_images", "test_labels", "n", "n_test", "binarize"},
}
_MODEL_KEYS = {"latent_dim", "variant", "activation", "hidden_dims", "modalities", "exact"}
_MODALITY_KEYS = {"name", "likelihood", "data_dim", "hidden_dims", "lambda_weight", "embed_first_layer", "obs_var"}
_TRAIN_KEYS = {"epochs", "batch_size", "learning_rate", "k", "beta_anneal_epochs", "lambdas", "fixed_epsilon_diagnostic"}
_EVAL_KEYS = {"n_samples", "n_prior_samples", "n_examples", "proposals", "marginal_target", "joint_targets",
              "conditional", "accuracy"}
_TOP_KEYS = {"version", "seed", "dataset", "model", "train", "eval"}


def _check_keys(block: dict, allowed: set, where: str) -> None:
    if not isinstance(block, dict):
        raise ConfigError(f"{where} must be an object")
    unknown = sorted(set(block) - allowed)
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]!r} in {where}")


@dataclass
class RunConfig:
    seed: int
    dataset: dict
    model: dict
    train: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)
    version: int = CONFIG_VERSION

    def to_dict(self) -> dict:
        return {"version": self.version, "seed": self.seed, "dataset": self.dataset, "model": self.model,
                "train": self.train, "eval": self.eval}

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    # -- resolution -----------------------------------------------------------

    def train_config(self) -> TrainConfig:
        try:
            return TrainConfig(seed=self.seed, variant=self.model.get("variant", "mvae"), **self.train)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"train block: {exc}") from exc

    def datasets(self) -> tuple[Dataset, Dataset]:
        d = self.dataset
        kind = d["kind"]
        seed = int(d.get("seed", self.seed))
        n, n_test = int(d.get("n", 2000)), int(d.get("n_test", 1000))
        if kind == "synth_bimodal":
            flip = float(d.get("flip", 0.05))
            return synth_bimodal(n, flip, seed), synth_bimodal(n_test, flip, seed + 1)
        if kind == "synth_attributes":
            N = int(d.get("n_modalities", 19))
            return synth_attributes(n, N, seed), synth_attributes(n_test, N, seed + 1)
        if kind == "linear_gaussian":
            spec = self._lg_spec()
            return linear_gaussian_dataset(spec, n, seed), linear_gaussian_dataset(spec, n_test, seed + 1)
        return self._mnist()

    def _lg_spec(self) -> LinearGaussianSpec:
        return LinearGaussianSpec(tuple(self.dataset.get("loadings", (1.0, 2.0))),
                                  tuple(self.dataset.get("noise_vars", (1.0, 0.5))))

    def _mnist(self) -> tuple[Dataset, Dataset]:
        d = self.dataset

        def load(img, lab, limit):
            x = load_idx(img).reshape(-1, 784)
            y = load_idx(lab)
            if limit:
                x, y = x[:limit], y[:limit]
            if d.get("binarize", True):
                x = binarize(x)
            return Dataset(("image", "label"), (x, y), f"idx:{img}", y)

        train = load(d["images"], d["labels"], int(d.get("n", 50_000)))
        if "test_images" in d:
            test = load(d["test_images"], d["test_labels"], int(d.get("n_test", 0)))
        else:
            full = load(d["images"], d["labels"], 0)
            test = full.split(50_000)[1]
        return train, test

    def specs(self) -> list[ModalitySpec]:
        m = self.model
        if "modalities" in m:
            return [ModalitySpec(**{**s, "hidden_dims": tuple(s.get("hidden_dims", m.get("hidden_dims", (512, 512))))})
                    for s in m["modalities"]]
        hidden = tuple(m.get("hidden_dims", (128, 128)))
        kind = self.dataset["kind"]
        if kind in ("synth_bimodal",):
            return bimodal_specs(hidden, self.train.get("lambdas") or (1.0, 50.0))
        if kind == "mnist":
            lam = self.train.get("lambdas") or (1.0, 50.0)
            return [ModalitySpec("image", "bernoulli", 784, hidden, lam[0]),
                    ModalitySpec("label", "categorical", 10, hidden, lam[1], embed_first_layer=True)]
        if kind == "synth_attributes":
            N = int(self.dataset.get("n_modalities", 19))
            return [ModalitySpec("image", "bernoulli", 64, hidden)] + [
                ModalitySpec(f"attr{j}", "bernoulli", 1, hidden) for j in range(N - 1)]
        spec = self._lg_spec()
        return [ModalitySpec(f"x{i + 1}", "gaussian", 1, hidden, obs_var=s) for i, s in enumerate(spec.noise_vars)]

    def build_model(self) -> MvaeModel:
        m = self.model
        variant = m.get("variant", "mvae")
        if m.get("exact"):
            if self.dataset["kind"] != "linear_gaussian":
                raise ConfigError("model.exact applies only to the linear_gaussian dataset")
            return linear_gaussian_model(self._lg_spec(), variant)
        try:
            return MvaeModel.build(int(m.get("latent_dim", 16)), self.specs(), variant, self.seed,
                                   m.get("activation", "relu"))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"model block: {exc}") from exc


def parse_config(raw: dict, env=None) -> RunConfig:
    env = os.environ if env is None else env
    _check_keys(raw, _TOP_KEYS, "config")
    for req in ("dataset", "model"):
        if req not in raw:
            raise ConfigError(f"missing required block {req!r}")
    if raw.get("version", CONFIG_VERSION) != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {raw['version']!r}")
    ds = raw["dataset"]
    _check_keys(ds, set().union(*_DATASET_KEYS.values()), "dataset")
    if ds.get("kind") not in _DATASET_KEYS:
        raise ConfigError(f"dataset.kind must be one of {sorted(_DATASET_KEYS)}")
    _check_keys(ds, _DATASET_KEYS[ds["kind"]], f"dataset ({ds['kind']})")
    _check_keys(raw["model"], _MODEL_KEYS, "model")
    for j, s in enumerate(raw["model"].get("modalities", [])):
        _check_keys(s, _MODALITY_KEYS, f"model.modalities[{j}]")
    _check_keys(raw.get("train", {}), _TRAIN_KEYS, "train")
    _check_keys(raw.get("eval", {}), _EVAL_KEYS, "eval")
    seed = raw.get("seed", 0)
    if env.get(SEED_ENV):
        try:
            seed = int(env[SEED_ENV], 0)
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} is not an integer: {env[SEED_ENV]!r}") from exc
    if not isinstance(seed, int) or not 0 <= seed < 2**64:
        raise ConfigError("seed must be an integer in [0, 2^64)")
    cfg = RunConfig(seed, dict(ds), dict(raw["model"]), dict(raw.get("train", {})), dict(raw.get("eval", {})))
    cfg.train_config()
    return cfg


def load_config(path, env=None) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return parse_config(raw, env)
