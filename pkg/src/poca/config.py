"""Run configuration: one strict JSON document drives every command.

Unknown keys anywhere in the tree are rejected up front with the
offending key's dotted path, so typos fail fast instead of silently
falling back to defaults.  Secrets never appear here; backends name an
environment variable instead.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from poca.backends import DEFAULT_REFUSAL_PHRASES, BackendConfig
from poca.theory import (
    ConcaveErrorModel,
    MonteCarloConfig,
    Perturbation,
    PerturbationKind,
    PhiKind,
    SignKind,
    SignPolicy,
)

__all__ = ["ConfigError", "RunConfig", "load_config"]

BACKEND_ROLES = ("captioner", "merger", "vqa_answerer", "nli_judge", "embedder")


class ConfigError(Exception):
    """A configuration document failed validation."""


def _reject_unknown(obj: dict, allowed, path: str) -> None:
    unknown = sorted(set(obj) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown config key: {path}.{unknown[0]}")


def _typed(obj: dict, key: str, types, default, path: str):
    if key not in obj:
        return default
    value = obj[key]
    if value is None or isinstance(value, types):
        return value
    raise ConfigError(
        f"config key {path}.{key} has type {type(value).__name__}, "
        f"expected {getattr(types, '__name__', types)}"
    )


@dataclass(frozen=True)
class SimulateSection:
    n: int = 32
    m: int = 4
    trials: int = 10000
    phi_kind: str = "parabolic"
    phi_scale: float = 1.0
    sign_kind: str = "seeded_random"
    sign_seed: int | None = None
    eta: float | None = None
    alpha: tuple[float, ...] | None = None
    workers: int = 1
    verify: bool = True
    study_perturbation: str | None = None
    study_magnitude: float = 1.0

    _KEYS = (
        "n",
        "m",
        "trials",
        "phi_kind",
        "phi_scale",
        "sign_kind",
        "sign_seed",
        "eta",
        "alpha",
        "workers",
        "verify",
        "study_perturbation",
        "study_magnitude",
    )

    @classmethod
    def from_dict(cls, obj: dict, path: str = "simulate") -> "SimulateSection":
        _reject_unknown(obj, cls._KEYS, path)
        alpha = obj.get("alpha")
        if alpha is not None:
            if not isinstance(alpha, (list, tuple)):
                raise ConfigError(f"config key {path}.alpha must be a list or null")
            alpha = tuple(float(a) for a in alpha)
        return cls(
            n=_typed(obj, "n", int, 32, path),
            m=_typed(obj, "m", int, 4, path),
            trials=_typed(obj, "trials", int, 10000, path),
            phi_kind=_typed(obj, "phi_kind", str, "parabolic", path),
            phi_scale=float(_typed(obj, "phi_scale", (int, float), 1.0, path)),
            sign_kind=_typed(obj, "sign_kind", str, "seeded_random", path),
            sign_seed=_typed(obj, "sign_seed", int, None, path),
            eta=_typed(obj, "eta", (int, float), None, path),
            alpha=alpha,
            workers=_typed(obj, "workers", int, 1, path),
            verify=_typed(obj, "verify", bool, True, path),
            study_perturbation=_typed(obj, "study_perturbation", str, None, path),
            study_magnitude=float(
                _typed(obj, "study_magnitude", (int, float), 1.0, path)
            ),
        )

    def monte_carlo_config(self, seed: int) -> MonteCarloConfig:
        try:
            phi = ConcaveErrorModel(PhiKind(self.phi_kind), self.phi_scale)
            sign = SignPolicy(
                SignKind(self.sign_kind),
                seed=self.sign_seed if self.sign_seed is not None else seed,
            )
            return MonteCarloConfig(
                n=self.n,
                m=self.m,
                trials=self.trials,
                seed=seed,
                phi=phi,
                sign=sign,
                eta=self.eta,
                alpha=self.alpha,
                workers=self.workers,
            )
        except ValueError as exc:
            raise ConfigError(f"simulate: {exc}") from exc

    def perturbation(self) -> Perturbation | None:
        if self.study_perturbation is None:
            return None
        try:
            kind = PerturbationKind(self.study_perturbation)
            return Perturbation(kind, self.study_magnitude)
        except ValueError as exc:
            raise ConfigError(f"simulate.study_perturbation: {exc}") from exc


@dataclass(frozen=True)
class PipelineSection:
    depth: int = 1
    template: str = "corrected"
    prompt_kind: str = "short"
    baselines: bool = False
    workers: int = 1

    _KEYS = ("depth", "template", "prompt_kind", "baselines", "workers")

    @classmethod
    def from_dict(cls, obj: dict, path: str = "pipeline") -> "PipelineSection":
        _reject_unknown(obj, cls._KEYS, path)
        return cls(
            depth=_typed(obj, "depth", int, 1, path),
            template=_typed(obj, "template", str, "corrected", path),
            prompt_kind=_typed(obj, "prompt_kind", str, "short", path),
            baselines=_typed(obj, "baselines", bool, False, path),
            workers=_typed(obj, "workers", int, 1, path),
        )


@dataclass(frozen=True)
class EvalSection:
    mode: str = "vqa"
    captions: str = "merged"
    nli: bool = False
    meteor: bool = False
    clip: bool = False
    refusal_phrases: tuple[str, ...] = DEFAULT_REFUSAL_PHRASES
    vqa_manifest: str | None = None

    _KEYS = (
        "mode",
        "captions",
        "nli",
        "meteor",
        "clip",
        "refusal_phrases",
        "vqa_manifest",
    )

    @classmethod
    def from_dict(cls, obj: dict, path: str = "eval") -> "EvalSection":
        _reject_unknown(obj, cls._KEYS, path)
        mode = _typed(obj, "mode", str, "vqa", path)
        if mode not in ("vqa", "paragraph"):
            raise ConfigError(f"config key {path}.mode must be 'vqa' or 'paragraph'")
        phrases = obj.get("refusal_phrases")
        if phrases is None:
            phrases = DEFAULT_REFUSAL_PHRASES
        elif not isinstance(phrases, (list, tuple)):
            raise ConfigError(f"config key {path}.refusal_phrases must be a list")
        return cls(
            mode=mode,
            captions=_typed(obj, "captions", str, "merged", path),
            nli=_typed(obj, "nli", bool, False, path),
            meteor=_typed(obj, "meteor", bool, False, path),
            clip=_typed(obj, "clip", bool, False, path),
            refusal_phrases=tuple(str(p) for p in phrases),
            vqa_manifest=_typed(obj, "vqa_manifest", str, None, path),
        )


@dataclass(frozen=True)
class IoSection:
    manifest: str | None = None
    out_dir: str = "runs/out"
    cache_dir: str | None = None

    _KEYS = ("manifest", "out_dir", "cache_dir")

    @classmethod
    def from_dict(cls, obj: dict, path: str = "io") -> "IoSection":
        _reject_unknown(obj, cls._KEYS, path)
        return cls(
            manifest=_typed(obj, "manifest", str, None, path),
            out_dir=_typed(obj, "out_dir", str, "runs/out", path),
            cache_dir=_typed(obj, "cache_dir", str, None, path),
        )


_BACKEND_KEYS = (
    "endpoint_url",
    "model_id",
    "api_key_env",
    "timeout",
    "max_in_flight",
    "max_retries",
    "assistant_prefix_mode",
    "params",
)


def _backend_from_dict(obj: dict, path: str) -> BackendConfig:
    _reject_unknown(obj, _BACKEND_KEYS, path)
    for required in ("endpoint_url", "model_id"):
        if required not in obj:
            raise ConfigError(f"config key {path}.{required} is required")
    params = obj.get("params", {})
    if not isinstance(params, dict):
        raise ConfigError(f"config key {path}.params must be an object")
    try:
        return BackendConfig(
            endpoint_url=obj["endpoint_url"],
            model_id=obj["model_id"],
            api_key_env=_typed(obj, "api_key_env", str, "", path),
            timeout=float(_typed(obj, "timeout", (int, float), 60.0, path)),
            max_in_flight=_typed(obj, "max_in_flight", int, 4, path),
            max_retries=_typed(obj, "max_retries", int, 2, path),
            assistant_prefix_mode=_typed(
                obj, "assistant_prefix_mode", str, "message", path
            ),
            params=params,
        )
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    backends: dict = field(default_factory=dict)
    pipeline: PipelineSection = field(default_factory=PipelineSection)
    simulate: SimulateSection = field(default_factory=SimulateSection)
    eval: EvalSection = field(default_factory=EvalSection)
    io: IoSection = field(default_factory=IoSection)

    _KEYS = ("seed", "backends", "pipeline", "simulate", "eval", "io")

    @classmethod
    def from_dict(cls, obj: dict) -> "RunConfig":
        if not isinstance(obj, dict):
            raise ConfigError("config document must be a JSON object")
        _reject_unknown(obj, cls._KEYS, "config")
        backends_obj = obj.get("backends", {})
        if not isinstance(backends_obj, dict):
            raise ConfigError("config key config.backends must be an object")
        _reject_unknown(backends_obj, BACKEND_ROLES, "backends")
        backends = {
            role: _backend_from_dict(spec, f"backends.{role}")
            for role, spec in backends_obj.items()
        }
        return cls(
            seed=_typed(obj, "seed", int, 0, "config") or 0,
            backends=backends,
            pipeline=PipelineSection.from_dict(obj.get("pipeline", {})),
            simulate=SimulateSection.from_dict(obj.get("simulate", {})),
            eval=EvalSection.from_dict(obj.get("eval", {})),
            io=IoSection.from_dict(obj.get("io", {})),
        )

    def to_dict(self) -> dict:
        backends = {}
        for role, b in self.backends.items():
            backends[role] = {
                "endpoint_url": b.endpoint_url,
                "model_id": b.model_id,
                "api_key_env": b.api_key_env,
                "timeout": b.timeout,
                "max_in_flight": b.max_in_flight,
                "max_retries": b.max_retries,
                "assistant_prefix_mode": b.assistant_prefix_mode,
                "params": dict(b.params),
            }
        out = {
            "seed": self.seed,
            "backends": backends,
            "pipeline": asdict(self.pipeline),
            "simulate": asdict(self.simulate),
            "eval": {**asdict(self.eval), "refusal_phrases": list(self.eval.refusal_phrases)},
            "io": asdict(self.io),
        }
        sim = out["simulate"]
        if sim["alpha"] is not None:
            sim["alpha"] = list(sim["alpha"])
        return out

    def with_overrides(
        self,
        seed: int | None = None,
        out_dir: str | None = None,
        cache_dir: str | None = None,
        depth: int | None = None,
        template: str | None = None,
    ) -> "RunConfig":
        cfg = self
        if seed is not None:
            cfg = replace(cfg, seed=seed)
        if out_dir is not None:
            cfg = replace(cfg, io=replace(cfg.io, out_dir=out_dir))
        if cache_dir is not None:
            cfg = replace(cfg, io=replace(cfg.io, cache_dir=cache_dir))
        if depth is not None:
            cfg = replace(cfg, pipeline=replace(cfg.pipeline, depth=depth))
        if template is not None:
            cfg = replace(cfg, pipeline=replace(cfg.pipeline, template=template))
        return cfg


def load_config(path: str | Path | None) -> RunConfig:
    """Load a config file, or defaults when no path is given."""
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        obj = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {p} is not valid JSON: {exc}") from exc
    return RunConfig.from_dict(obj)
