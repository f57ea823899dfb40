"""Experiment configuration: JSON document -> models, keys, attacks, datasets.

Top-level blocks::

    models      name -> {"mixture": {...} | {"random": {...}}, "path": file,
                         "shape": [c, h, w], "codec_seed", "mismatch", "mismatch_seed", "out_scale"}
    keys        name -> GS {"scheme": "gs", cipher_key_hex, nonce_hex, message_hex, k, rho, user_id}
                        or GS {"scheme": "gs", "seed", "k", "rho"} (derived deterministically)
                        or TR {"scheme": "tr", "radius", "channel", "seed"}
    sampler     {"n_steps", "guidance_scale"}
    attacks     name -> {"type": "pnp" | "imprint" | "reprompt" | "none", ...}
    datasets    name -> {"seed", "count"} | {"directory"}
    experiment  {"scenarios": [...], "master_seed", "output_dir", ...}
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from wmforge.codec import LinearCodec
from wmforge.ddim import SamplerConfig
from wmforge.errors import ConfigError
from wmforge.forgery import ForgeryConfig, ImprintConfig
from wmforge.gaussian_shading import GsKey
from wmforge.io import key_from_json
from wmforge.pipeline import DiffusionModel
from wmforge.presets import GS_FPR, LATENT_SHAPE, TR_FPR, benchmark_mixture
from wmforge.schedule import MixtureScoreModel
from wmforge.tree_ring import TrKey

ATTACK_TYPES = ("none", "pnp", "imprint", "reprompt")
BLOCKS = ("models", "keys", "sampler", "attacks", "datasets", "experiment")


def load_config_text(text: str | bytes) -> dict:
    """Parse a JSON config, reporting the byte offset of any syntax error."""
    raw = text.encode() if isinstance(text, str) else text
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        offset = len(exc.doc[: exc.pos].encode()) if isinstance(exc.doc, str) else exc.pos
        raise ConfigError(f"malformed JSON at byte offset {offset}: {exc.msg}") from None
    except UnicodeDecodeError as exc:
        raise ConfigError(f"config is not valid UTF-8 at byte offset {exc.start}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    return doc


def load_config(path: str | Path) -> dict:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return load_config_text(raw)


def digest(obj: Any) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _get(doc: Mapping, key: str, where: str, cast=None, default=Ellipsis):
    if key not in doc:
        if default is Ellipsis:
            raise ConfigError(f"{where}: missing field {key!r}")
        return default
    val = doc[key]
    if cast is None or val is None:
        return val
    try:
        return cast(val)
    except (TypeError, ValueError):
        raise ConfigError(f"{where}: field {key!r} has invalid value {val!r}") from None


@dataclass(frozen=True)
class AttackSpec:
    name: str
    type: str
    params: Mapping[str, Any] = field(default_factory=dict)

    def proxy_name(self, target: str) -> str:
        return self.params.get("proxy") or target

    def forgery_config(self, sampler: SamplerConfig) -> ForgeryConfig:
        p, where = self.params, f"attacks.{self.name}"
        return ForgeryConfig(
            invert_steps=_get(p, "invert_steps", where, int, sampler.n_steps),
            regen_steps=_get(p, "regen_steps", where, int, sampler.n_steps),
            cover_guidance=_get(p, "lambda", where, float, 0.2),
            guidance_ramp=_get(p, "gamma", where, float, 1.0),
            condition=p.get("condition"),
            exact_inversion=_get(p, "exact_inversion", where, bool, False),
        )

    def imprint_config(self, sampler: SamplerConfig) -> ImprintConfig:
        p, where = self.params, f"attacks.{self.name}"
        return ImprintConfig(
            n_iters=_get(p, "n_iters", where, int, 50),
            step_size=_get(p, "step_size", where, float, 1e-2),
            perceptual_weight=_get(p, "mu", where, float, 1e-2),
            invert_steps=_get(p, "invert_steps", where, int, sampler.n_steps),
        )


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    seed: int | None = None
    count: int | None = None
    directory: str | None = None


@dataclass(frozen=True)
class Scenario:
    target: str
    watermark: str
    attack: str
    dataset: str

    @property
    def id(self) -> str:
        return f"{self.target}/{self.watermark}/{self.attack}/{self.dataset}"


@dataclass(frozen=True)
class ExperimentSpec:
    scenarios: tuple[Scenario, ...]
    master_seed: int
    output_dir: str
    gs_fpr: float = GS_FPR
    tr_fpr: float = TR_FPR
    n_null: int = 1000
    attribution_users: int = 0
    attribution_fpr: float = GS_FPR


class ExperimentConfig:
    """Resolved view over a config document; models and keys are built lazily."""

    def __init__(self, doc: Mapping):
        if not isinstance(doc, Mapping):
            raise ConfigError("config must be a JSON object")
        unknown = sorted(set(doc) - set(BLOCKS))
        if unknown:
            raise ConfigError(f"unknown config block(s): {', '.join(unknown)}")
        self.doc = doc
        for block in ("models", "keys", "attacks", "datasets"):
            if not isinstance(doc.get(block, {}), Mapping):
                raise ConfigError(f"{block} must be an object")
        s = doc.get("sampler", {})
        self.sampler = SamplerConfig(
            n_steps=_get(s, "n_steps", "sampler", int, 50),
            guidance_scale=_get(s, "guidance_scale", "sampler", float, 7.5),
        )
        self.attacks = {"none": AttackSpec("none", "none")}
        for name, a in doc.get("attacks", {}).items():
            kind = a.get("type", name)
            if kind not in ATTACK_TYPES:
                raise ConfigError(f"attacks.{name}: unknown attack type {kind!r}")
            self.attacks[name] = AttackSpec(name, kind, {k: v for k, v in a.items() if k != "type"})
        self.datasets = {}
        for name, d in doc.get("datasets", {}).items():
            if "directory" in d:
                self.datasets[name] = DatasetSpec(name, directory=str(d["directory"]))
            else:
                where = f"datasets.{name}"
                self.datasets[name] = DatasetSpec(name, _get(d, "seed", where, int), _get(d, "count", where, int))
        self._models: dict[str, DiffusionModel] = {}
        self._keys: dict[tuple[str, tuple[int, int]], GsKey | TrKey] = {}

    # -- models --------------------------------------------------------
    @property
    def model_names(self) -> list[str]:
        return list(self.doc.get("models", {}))

    def model_doc(self, name: str) -> Mapping:
        models = self.doc.get("models", {})
        if name not in models:
            raise ConfigError(f"unknown model {name!r} (models: {', '.join(models) or 'none'})")
        return models[name]

    def model(self, name: str) -> DiffusionModel:
        if name not in self._models:
            self._models[name] = self._build_model(name, self.model_doc(name))
        return self._models[name]

    def default_model(self) -> str:
        names = self.model_names
        if not names:
            raise ConfigError("config defines no models")
        return names[0]

    def _build_model(self, name: str, m: Mapping) -> DiffusionModel:
        where = f"models.{name}"
        shape = tuple(_get(m, "shape", where, lambda v: [int(x) for x in v], list(LATENT_SHAPE)))
        if "path" in m:
            score = MixtureScoreModel.load(m["path"])
        elif "mixture" in m:
            mix = m["mixture"]
            if "random" in mix:
                r = mix["random"]
                score = MixtureScoreModel.random(
                    _get(r, "seed", where + ".mixture.random", int, 0),
                    tuple(r.get("shape", shape)),
                    _get(r, "n_components", where + ".mixture.random", int, 3),
                    _get(r, "mean_scale", where + ".mixture.random", float, 0.5),
                    _get(r, "cov_scale", where + ".mixture.random", float, 1.0),
                )
            else:
                score = MixtureScoreModel.from_json({"shape": list(shape), **mix})
        else:
            score = benchmark_mixture(shape)
        codec = LinearCodec(
            score.shape,
            seed=_get(m, "codec_seed", where, int, 1),
            out_scale=_get(m, "out_scale", where, float, 24.0),
            mismatch=_get(m, "mismatch", where, float, 0.0),
            mismatch_seed=_get(m, "mismatch_seed", where, int, None),
        )
        return DiffusionModel(score, codec, sampler=self.sampler, name=name)

    def model_fingerprint(self, name: str) -> str:
        return digest({"model": self.model_doc(name), "sampler": self.sampler.n_steps})

    # -- keys ----------------------------------------------------------
    def key_doc(self, name: str) -> Mapping:
        keys = self.doc.get("keys", {})
        if name not in keys:
            raise ConfigError(f"unknown key {name!r} (keys: {', '.join(keys) or 'none'})")
        return keys[name]

    def key(self, name: str, model: DiffusionModel | None = None) -> GsKey | TrKey:
        plane = (model or self.model(self.default_model())).shape[1:]
        cache_key = (name, plane)
        if cache_key not in self._keys:
            self._keys[cache_key] = self._build_key(name, self.key_doc(name), plane)
        return self._keys[cache_key]

    @staticmethod
    def _build_key(name: str, k: Mapping, plane) -> GsKey | TrKey:
        where = f"keys.{name}"
        try:
            if k.get("scheme", "gs") == "gs" and "cipher_key_hex" not in k and "seed" in k:
                rng = np.random.default_rng(_get(k, "seed", where, int))
                return GsKey.random(rng, _get(k, "k", where, int), _get(k, "rho", where, int), _get(k, "user_id", where, int, 0))
            return key_from_json(dict(k), plane)
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"{where}: {exc}") from None

    # -- experiment ----------------------------------------------------
    def attack(self, name: str) -> AttackSpec:
        if name not in self.attacks:
            raise ConfigError(f"unknown attack {name!r} (attacks: {', '.join(self.attacks)})")
        return self.attacks[name]

    def dataset(self, name: str) -> DatasetSpec:
        if name not in self.datasets:
            raise ConfigError(f"unknown dataset {name!r} (datasets: {', '.join(self.datasets) or 'none'})")
        return self.datasets[name]

    def experiment(self, seed_override: int | None = None, out_override: str | None = None) -> ExperimentSpec:
        e = self.doc.get("experiment")
        if not isinstance(e, Mapping):
            raise ConfigError("config has no experiment block")
        master = seed_override if seed_override is not None else _get(e, "master_seed", "experiment", int)
        scenarios = []
        for i, s in enumerate(_get(e, "scenarios", "experiment")):
            where = f"experiment.scenarios[{i}]"
            sc = Scenario(
                _get(s, "target", where, str, None) or self.default_model(),
                _get(s, "watermark", where, str),
                _get(s, "attack", where, str, "none"),
                _get(s, "dataset", where, str),
            )
            self.model_doc(sc.target)
            self.key_doc(sc.watermark)
            attack = self.attack(sc.attack)
            if attack.type != "none":
                self.model_doc(attack.proxy_name(sc.target))
                if attack.params.get("regen"):
                    self.model_doc(attack.params["regen"])
            self.dataset(sc.dataset)
            scenarios.append(sc)
        if not scenarios:
            raise ConfigError("experiment.scenarios is empty")
        return ExperimentSpec(
            scenarios=tuple(scenarios),
            master_seed=master,
            output_dir=out_override or _get(e, "output_dir", "experiment", str, "results"),
            gs_fpr=_get(e, "gs_fpr", "experiment", float, GS_FPR),
            tr_fpr=_get(e, "tr_fpr", "experiment", float, TR_FPR),
            n_null=_get(e, "n_null", "experiment", int, 1000),
            attribution_users=_get(e, "attribution_users", "experiment", int, 0),
            attribution_fpr=_get(e, "attribution_fpr", "experiment", float, GS_FPR),
        )
