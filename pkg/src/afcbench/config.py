"""Run configuration: one JSON file plus command-line overrides.

Relative paths in the file resolve against the file's own directory so a
config checked into a repo works from any working directory. Secrets never
live in the config; HTTP endpoints name the environment variable holding the
API key.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

from afcbench.corpus import ANSWER_CONTAINING, ANSWER_FREE
from afcbench.evaluator import CONDITIONS
from afcbench.gateway import (
    HttpBackend,
    LlmGateway,
    RequestDefaults,
    ResponseCache,
    ScriptedBackend,
    canonical_json,
)
from afcbench.validator import FilterThresholds

DEFAULT_API_KEY_ENV = "AFCBENCH_API_KEY"


class ConfigError(ValueError):
    """The run configuration is invalid; reported before any network use."""


@dataclass
class EndpointConfig:
    kind: str = "http"  # "http" or "scripted"
    base_url: str = ""
    api_key_env: str = DEFAULT_API_KEY_ENV
    script_path: str = ""
    timeout: float = 120.0
    max_attempts: int = 4
    backoff_base: float = 0.5


@dataclass
class ModelRoles:
    afc: str
    rewrite: str
    judge: str
    grader: str
    embed: str
    eval: list[str]


@dataclass
class RunConfig:
    datasets: list[str]
    models: ModelRoles
    endpoint: EndpointConfig
    run_dir: str
    cache_dir: str
    thresholds: FilterThresholds = field(default_factory=FilterThresholds)
    request: RequestDefaults = field(default_factory=RequestDefaults)
    concurrency: int = 4
    limit: int | None = None
    conditions: list[str] = field(default_factory=lambda: list(CONDITIONS))
    retries: int = 2
    strict: bool = False
    rewrite_grounding: str = ANSWER_FREE
    similarity_method: str = "embedding"  # or "judge", for parity experiments
    alignment_aggregate: str = "mean"

    @property
    def run_path(self) -> Path:
        return Path(self.run_dir)

    @property
    def cache_path(self) -> Path:
        return Path(self.cache_dir)

    def resolved_dict(self) -> dict:
        obj = asdict(self)
        obj["datasets"] = [str(Path(p)) for p in self.datasets]
        return obj

    def config_hash(self) -> str:
        """Digest of the resolved config; stable under key reordering."""
        return hashlib.sha256(canonical_json(self.resolved_dict()).encode("utf-8")).hexdigest()

    def validate(self) -> None:
        if not self.datasets:
            raise ConfigError("datasets must be non-empty")
        for path in self.datasets:
            if not Path(path).is_file():
                raise ConfigError(f"dataset file not found: {path}")
        for role in ("afc", "rewrite", "judge", "grader", "embed"):
            if not getattr(self.models, role):
                raise ConfigError(f"models.{role} must be set")
        if not self.models.eval:
            raise ConfigError("models.eval must list at least one model")
        if self.endpoint.kind == "http":
            if not self.endpoint.base_url:
                raise ConfigError("endpoint.base_url must be set for http endpoints")
            if not self.endpoint.api_key_env:
                raise ConfigError("endpoint.api_key_env must be set for http endpoints")
            if self.endpoint.api_key_env not in os.environ:
                raise ConfigError(
                    f"environment variable {self.endpoint.api_key_env} is not set"
                )
        elif self.endpoint.kind == "scripted":
            if not Path(self.endpoint.script_path).is_file():
                raise ConfigError(f"scripted response table not found: {self.endpoint.script_path}")
        else:
            raise ConfigError(f"endpoint.kind must be http or scripted, got {self.endpoint.kind!r}")
        try:
            self.thresholds.validate()
        except ValueError as err:
            raise ConfigError(str(err)) from err
        if self.concurrency < 1:
            raise ConfigError("concurrency must be >= 1")
        if self.limit is not None and self.limit < 1:
            raise ConfigError("limit must be >= 1 when set")
        unknown = [c for c in self.conditions if c not in CONDITIONS]
        if unknown:
            raise ConfigError(f"unknown conditions: {unknown}; valid: {list(CONDITIONS)}")
        if not self.conditions:
            raise ConfigError("conditions must be non-empty")
        if self.retries < 0:
            raise ConfigError("retries must be >= 0")
        if self.rewrite_grounding not in (ANSWER_FREE, ANSWER_CONTAINING):
            raise ConfigError(f"rewrite_grounding must be {ANSWER_FREE} or {ANSWER_CONTAINING}")
        if self.similarity_method not in ("embedding", "judge"):
            raise ConfigError("similarity_method must be embedding or judge")
        if self.alignment_aggregate not in ("mean", "median"):
            raise ConfigError("alignment_aggregate must be mean or median")
        if self.request.temperature < 0:
            raise ConfigError("request.temperature must be >= 0")


_TOP_LEVEL_KEYS = {
    "datasets",
    "models",
    "endpoint",
    "run_dir",
    "cache_dir",
    "thresholds",
    "request",
    "concurrency",
    "limit",
    "conditions",
    "retries",
    "strict",
    "rewrite_grounding",
    "similarity_method",
    "alignment_aggregate",
}

_MODEL_KEYS = {"afc", "rewrite", "judge", "grader", "embed", "eval"}


def _build_section(cls, obj: dict, section: str, allowed: set[str]):
    unknown = sorted(set(obj) - allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {section}: {unknown}")
    try:
        return cls(**obj)
    except TypeError as err:
        raise ConfigError(f"invalid {section} section: {err}") from err


def load_config(path: Path | str, overrides: dict | None = None) -> RunConfig:
    """Load, override, resolve, and validate a run configuration."""
    path = Path(path)
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"config {path} is not valid JSON: {err}") from err
    if not isinstance(obj, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(obj) - _TOP_LEVEL_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    for key in ("datasets", "models", "endpoint", "run_dir", "cache_dir"):
        if key not in obj:
            raise ConfigError(f"config is missing required key {key!r}")

    base = path.parent

    def resolve(p: str) -> str:
        candidate = Path(p)
        return str(candidate if candidate.is_absolute() else base / candidate)

    models = _build_section(ModelRoles, obj["models"], "models", _MODEL_KEYS)
    endpoint = _build_section(
        EndpointConfig, obj["endpoint"], "endpoint", {f.name for f in EndpointConfig.__dataclass_fields__.values()}
    )
    if endpoint.script_path:
        endpoint.script_path = resolve(endpoint.script_path)
    thresholds = _build_section(
        FilterThresholds,
        obj.get("thresholds", {}),
        "thresholds",
        {"question_sim", "answer_sim", "leakage_flag", "min_answer_correctness"},
    )
    request = _build_section(
        RequestDefaults,
        obj.get("request", {}),
        "request",
        {"temperature", "max_tokens", "seed", "extra"},
    )

    config = RunConfig(
        datasets=[resolve(p) for p in obj["datasets"]],
        models=models,
        endpoint=endpoint,
        run_dir=resolve(obj["run_dir"]),
        cache_dir=resolve(obj["cache_dir"]),
        thresholds=thresholds,
        request=request,
        concurrency=obj.get("concurrency", 4),
        limit=obj.get("limit"),
        conditions=list(obj.get("conditions") or CONDITIONS),
        retries=obj.get("retries", 2),
        strict=bool(obj.get("strict", False)),
        rewrite_grounding=obj.get("rewrite_grounding", ANSWER_FREE),
        similarity_method=obj.get("similarity_method", "embedding"),
        alignment_aggregate=obj.get("alignment_aggregate", "mean"),
    )

    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key == "datasets":
            config.datasets = [str(Path(p).resolve()) for p in value]
        elif key in ("run_dir", "cache_dir"):
            setattr(config, key, str(Path(value).resolve()))
        elif key in ("limit", "concurrency", "retries"):
            setattr(config, key, int(value))
        elif key == "conditions":
            config.conditions = list(value)
        elif key == "strict":
            config.strict = bool(value)
        else:
            raise ConfigError(f"unknown override {key!r}")

    config.validate()
    return config


def build_gateway(config: RunConfig) -> LlmGateway:
    """Construct the backend named by the endpoint config, fronted by the cache."""
    if config.endpoint.kind == "scripted":
        backend = ScriptedBackend.from_file(config.endpoint.script_path)
    else:
        backend = HttpBackend(
            base_url=config.endpoint.base_url,
            api_key=os.environ.get(config.endpoint.api_key_env),
            timeout=config.endpoint.timeout,
            max_attempts=config.endpoint.max_attempts,
            backoff_base=config.endpoint.backoff_base,
        )
    cache = ResponseCache(config.cache_path)
    return LlmGateway(backend, cache=cache, max_in_flight=config.concurrency)
