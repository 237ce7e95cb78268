"""YAML run configuration.

Example (relative paths resolve against the config file's directory)::

    providers:                 # per role; "default" covers roles not listed
      default: {kind: http, base_url: "https://api.example.com/v1", api_key_env: LLM_API_KEY}
      critic: {kind: replay, script: scripts/critic.json}
      scorer: {kind: rules, rules: [{match: "TEXT TO SCORE", response: "..."}], default: "..."}
    models: {rubric_gen: gpt-x, scorer: gpt-x, critic: gpt-x}
    params: {temperature: 0, max_output_tokens: 2048, seed: 0}
    embedding: {kind: hash, dim: 64, seed: 0}      # or {kind: http, base_url, model, api_key_env}
    retrieval:
      rubric: {k: 1, similarity_threshold: 0.7, measure: COSINE_ONLY}
      scoring: {k: 1, similarity_threshold: 0.7, measure: PRODUCT}
      critique: {k: 2, similarity_threshold: 0.0}
    max_critique_iterations: 1
    admission_policy: MANUAL                        # or AUTO_ON_CONVERGENCE
    templates: default                              # bundled set id or a directory
    static_exemplars: {scoring: ex/scoring.json, critique: ex/critique.json}
    stores: {rubric: kb/rubric.jsonl, scoring: kb/scoring.jsonl, critique: kb/critique.jsonl}
    hrs_source: combined                            # or resolved

API keys are only ever read from the environment variables named here.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping

import yaml

from .llm import CompletionParams, HttpProvider, Provider, ReplayMock, RulesMock
from .pipeline import AdmissionPolicy, Engine, PipelineConfig, Providers, StaticExemplar, Stores
from .retrieval import Embedder, ExemplarStore, HashEmbedder, HttpEmbedder, RetrievalConfig, StoreKind, load_store, save_store
from .templates import load_template_set

ROLES = ("rubric_gen", "scorer", "critic")
STORE_KEYS = {"rubric": StoreKind.RUBRIC_EXEMPLARS, "scoring": StoreKind.SCORING_EXEMPLARS,
              "critique": StoreKind.CRITIQUE_EXEMPLARS}
TOP_KEYS = {"providers", "models", "params", "embedding", "retrieval", "max_critique_iterations",
            "admission_policy", "templates", "static_exemplars", "stores", "hrs_source"}


class ConfigError(Exception):
    pass


@dataclass
class RunConfig:
    path: Path | None
    pipeline: PipelineConfig
    provider_specs: dict[str, dict]
    embedding: dict
    store_paths: dict[StoreKind, Path | None]
    templates_ref: str
    hrs_source: str = "combined"
    raw: dict = field(default_factory=dict)

    def resolve(self, p: str | Path) -> Path:
        p = Path(p)
        return p if p.is_absolute() or self.path is None else self.path.parent / p


def _mapping(v: Any, where: str) -> dict:
    if v is None:
        return {}
    if not isinstance(v, Mapping):
        raise ConfigError(f"{where} must be a mapping")
    return dict(v)


def _static(path: Path | None) -> tuple[StaticExemplar, ...]:
    if path is None:
        return ()
    try:
        items = json.loads(path.read_text(encoding="utf-8"))
        return tuple(StaticExemplar(str(d["key"]), str(d["doc"]), str(d.get("tag", ""))) for d in items)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"static exemplars {path}: {exc}") from exc


def parse_config(raw: Mapping, path: Path | None = None, seed: int | None = None) -> RunConfig:
    raw = _mapping(raw, "config")
    unknown = sorted(set(raw) - TOP_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys {unknown}")
    base = RunConfig(path, PipelineConfig(), {}, {}, {}, "default", raw=dict(raw))

    providers = _mapping(raw.get("providers"), "providers")
    bad = sorted(set(providers) - set(ROLES) - {"default"})
    if bad:
        raise ConfigError(f"unknown provider roles {bad}")
    specs = {}
    for role in ROLES:
        spec = providers.get(role, providers.get("default"))
        if spec is None:
            raise ConfigError(f"no provider for role {role!r} and no default")
        if not isinstance(spec, Mapping):
            raise ConfigError(f"providers.{role} must be a mapping")
        specs[role] = spec  # not copied: roles on the default share one provider

    models = _mapping(raw.get("models"), "models")
    params = _mapping(raw.get("params"), "params")
    try:
        def cp(role: str) -> CompletionParams:
            return CompletionParams(
                str(models.get(role, models.get("default", "mock"))),
                float(params.get("temperature", 0.0)),
                int(params.get("max_output_tokens", 2048)),
                seed if seed is not None else params.get("seed", 0),
            )

        retrieval = {}
        for key, spec in _mapping(raw.get("retrieval"), "retrieval").items():
            if key not in STORE_KEYS:
                raise ConfigError(f"unknown retrieval store {key!r}")
            retrieval[STORE_KEYS[key]] = RetrievalConfig(**_mapping(spec, f"retrieval.{key}"))
        statics = _mapping(raw.get("static_exemplars"), "static_exemplars")
        pipeline = PipelineConfig(
            scorer_params=cp("scorer"),
            critic_params=cp("critic"),
            rubric_gen_params=cp("rubric_gen"),
            retrieval=retrieval,
            max_critique_iterations=int(raw.get("max_critique_iterations", 1)),
            admission_policy=AdmissionPolicy(raw.get("admission_policy", "MANUAL")),
            prompt_template_set_id=str(raw.get("templates", "default")),
            static_scoring_exemplars=_static(base.resolve(statics["scoring"]) if "scoring" in statics else None),
            static_critique_exemplars=_static(base.resolve(statics["critique"]) if "critique" in statics else None),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc

    embedding = {"kind": "hash", "dim": 64, "seed": 0, **_mapping(raw.get("embedding"), "embedding")}
    if seed is not None:
        embedding["seed"] = seed
    stores = _mapping(raw.get("stores"), "stores")
    bad = sorted(set(stores) - set(STORE_KEYS))
    if bad:
        raise ConfigError(f"unknown stores {bad}")
    store_paths = {kind: (base.resolve(stores[k]) if k in stores else None) for k, kind in STORE_KEYS.items()}
    hrs = str(raw.get("hrs_source", "combined"))
    if hrs not in ("combined", "resolved"):
        raise ConfigError("hrs_source must be combined or resolved")
    templates_ref = str(raw.get("templates", "default"))
    if (base.resolve(templates_ref)).is_dir():
        templates_ref = str(base.resolve(templates_ref))
    return replace(base, pipeline=pipeline, provider_specs=specs, embedding=embedding, store_paths=store_paths,
                   templates_ref=templates_ref, hrs_source=hrs)


def load_config(path: str | Path, seed: int | None = None) -> RunConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    return parse_config(raw or {}, path, seed)


def build_provider(spec: Mapping, cfg: RunConfig) -> Provider:
    kind = spec.get("kind")
    if kind == "replay":
        if "script" in spec:
            return ReplayMock.from_file(cfg.resolve(spec["script"]))
        return ReplayMock(list(spec.get("responses", [])))
    if kind == "rules":
        rules = [(str(r["match"]), str(r["response"])) for r in spec.get("rules", [])]
        return RulesMock(rules, spec.get("default"), spec.get("scope", "all"))
    if kind == "http":
        if "base_url" not in spec:
            raise ConfigError("http provider needs base_url")
        return HttpProvider(spec["base_url"], spec.get("api_key_env"), int(spec.get("max_in_flight", 4)),
                            timeout=float(spec.get("timeout", 120)))
    raise ConfigError(f"unknown provider kind {kind!r} (expected replay, rules or http)")


def build_providers(cfg: RunConfig) -> Providers:
    built: dict[int, Provider] = {}
    out = {}
    for role in ROLES:
        spec = cfg.provider_specs[role]
        # roles falling back to the same default spec share one provider (one replay script)
        key = id(spec)
        if key not in built:
            built[key] = build_provider(spec, cfg)
        out[role] = built[key]
    return Providers(**out)


def build_embedder(cfg: RunConfig) -> Embedder:
    e = cfg.embedding
    if e["kind"] == "hash":
        return HashEmbedder(int(e.get("dim", 64)), int(e.get("seed", 0)))
    if e["kind"] == "http":
        return HttpEmbedder(e["base_url"], e["model"], e.get("api_key_env"), e.get("dim"))
    raise ConfigError(f"unknown embedding kind {e['kind']!r}")


def load_stores(cfg: RunConfig, embedder: Embedder) -> Stores:
    stores = []
    for kind, path in cfg.store_paths.items():
        if path is not None and path.exists():
            s = load_store(path, embedder)
            if s.kind is not kind:
                raise ConfigError(f"{path} holds a {s.kind.value} store, expected {kind.value}")
            stores.append(s)
        else:
            stores.append(ExemplarStore(kind, embedder))
    return Stores(*stores)


def save_stores(cfg: RunConfig, stores: Stores) -> list[Path]:
    written = []
    for kind, path in cfg.store_paths.items():
        if path is None:
            continue
        path.parent.mkdir(parents=True, exist_ok=True)
        save_store(stores.by_kind(kind), path)
        written.append(path)
    return written


def build_engine(cfg: RunConfig) -> Engine:
    embedder = build_embedder(cfg)
    return Engine(cfg.pipeline, build_providers(cfg), load_stores(cfg, embedder), embedder,
                  load_template_set(cfg.templates_ref))
