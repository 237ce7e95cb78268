from __future__ import annotations

import json

import pytest

from regai.config import ConfigError, build_embedder, build_engine, build_providers, load_config, parse_config
from regai.llm import HttpProvider, ReplayMock, RulesMock
from regai.pipeline import AdmissionPolicy
from regai.retrieval import HashEmbedder, Measure, StoreKind


def base(**over):
    raw = {"providers": {"default": {"kind": "replay", "responses": ["a"]}}}
    raw.update(over)
    return raw


def test_defaults():
    cfg = parse_config(base())
    assert cfg.pipeline.max_critique_iterations == 1
    assert cfg.pipeline.admission_policy is AdmissionPolicy.MANUAL
    assert cfg.embedding == {"kind": "hash", "dim": 64, "seed": 0}
    assert cfg.hrs_source == "combined"
    assert all(p is None for p in cfg.store_paths.values())
    assert cfg.pipeline.retrieval[StoreKind.CRITIQUE_EXEMPLARS].k == 2


def test_roles_on_default_share_one_provider():
    p = build_providers(parse_config(base()))
    assert p.rubric_gen is p.scorer is p.critic
    assert isinstance(p.scorer, ReplayMock)


def test_per_role_providers():
    raw = base(providers={
        "default": {"kind": "rules", "rules": [{"match": "x", "response": "y"}], "default": "z"},
        "critic": {"kind": "http", "base_url": "https://example.invalid/v1", "api_key_env": "K"},
    })
    p = build_providers(parse_config(raw))
    assert isinstance(p.scorer, RulesMock) and p.scorer is p.rubric_gen
    assert isinstance(p.critic, HttpProvider)


def test_models_params_and_seed_override():
    raw = base(models={"default": "m0", "critic": "m1"}, params={"temperature": 0.3, "seed": 5})
    cfg = parse_config(raw, seed=9)
    assert cfg.pipeline.scorer_params.model_id == "m0"
    assert cfg.pipeline.critic_params.model_id == "m1"
    assert cfg.pipeline.critic_params.temperature == 0.3
    assert cfg.pipeline.scorer_params.seed == 9
    assert cfg.embedding["seed"] == 9


def test_retrieval_override_keeps_other_defaults():
    cfg = parse_config(base(retrieval={"scoring": {"k": 3, "similarity_threshold": 0.5, "measure": "PRODUCT"}}))
    rc = cfg.pipeline.retrieval[StoreKind.SCORING_EXEMPLARS]
    assert (rc.k, rc.similarity_threshold, Measure(rc.measure)) == (3, 0.5, Measure.PRODUCT)
    assert cfg.pipeline.retrieval[StoreKind.RUBRIC_EXEMPLARS].similarity_threshold == 0.7


@pytest.mark.parametrize("raw, needle", [
    ({"providers": {}}, "no provider"),
    (base(bogus=1), "unknown config keys"),
    (base(providers={"default": {"kind": "replay"}, "judge": {}}), "unknown provider roles"),
    (base(retrieval={"other": {}}), "unknown retrieval store"),
    (base(stores={"x": "a"}), "unknown stores"),
    (base(hrs_source="median"), "hrs_source"),
    (base(admission_policy="SOMETIMES"), "SOMETIMES"),
    (base(max_critique_iterations=0), "max_critique_iterations"),
    ("not a mapping", "mapping"),
])
def test_invalid_configs(raw, needle):
    with pytest.raises(ConfigError, match=needle):
        parse_config(raw)


def test_unknown_provider_kind():
    with pytest.raises(ConfigError, match="unknown provider kind"):
        build_providers(parse_config(base(providers={"default": {"kind": "oracle"}})))


def test_paths_resolve_against_config_file(tmp_path):
    (tmp_path / "script.json").write_text(json.dumps(["one", "two"]))
    (tmp_path / "static.json").write_text(json.dumps([{"key": "k", "doc": "d", "tag": "pass"}]))
    (tmp_path / "c.yaml").write_text(
        "providers: {default: {kind: replay, script: script.json}}\n"
        "stores: {scoring: kb/s.jsonl}\n"
        "static_exemplars: {critique: static.json}\n"
        "embedding: {dim: 16}\n"
    )
    cfg = load_config(tmp_path / "c.yaml")
    assert cfg.store_paths[StoreKind.SCORING_EXEMPLARS] == tmp_path / "kb" / "s.jsonl"
    assert cfg.pipeline.static_critique_exemplars[0].tag == "pass"
    engine = build_engine(cfg)
    assert engine.providers.scorer.remaining == 2
    assert isinstance(engine.embedder, HashEmbedder) and engine.embedder.dim == 16


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "missing.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("providers: [unclosed")
    with pytest.raises(ConfigError, match="invalid YAML"):
        load_config(bad)


def test_store_kind_mismatch_is_reported(tmp_path):
    from regai.retrieval import ExemplarStore, save_store

    cfg = parse_config(base(stores={"scoring": str(tmp_path / "s.jsonl")}))
    emb = build_embedder(cfg)
    save_store(ExemplarStore(StoreKind.CRITIQUE_EXEMPLARS, emb), tmp_path / "s.jsonl")
    with pytest.raises(ConfigError, match="expected SCORING_EXEMPLARS"):
        build_engine(cfg)
