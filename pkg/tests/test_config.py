import pytest
import yaml

from progseg.config import (
    CHOICES,
    ConfigError,
    RunConfig,
    dump_config,
    from_dict,
    load_config,
    load_preset,
    preset_names,
    preset_overrides,
    resolve_config,
)

ABLATION = [f"v{i}" for i in range(1, 8)]


def test_presets_present_and_loadable():
    names = preset_names()
    for n in ["baseline", "overfit", "full_scale", *ABLATION]:
        assert n in names
        assert isinstance(load_preset(n), RunConfig)


def test_ablation_ladder_flags():
    m = {n: load_preset(n).model for n in ["baseline", *ABLATION]}
    assert m["baseline"].point_sampling == "random"
    assert all(m[v].point_sampling == "class_aware" for v in ABLATION)
    assert [m[v].embedding for v in ("v1", "v2", "v3")] == ["original", "centralized", "dual"]
    assert [(m[v].fine, m[v].merge) for v in ("v3", "v4", "v5", "v6")] == [
        (False, False), (True, False), (False, True), (True, True)]
    assert m["v6"].query_sampling == "fps" and m["v7"].query_sampling == "weighted_fps"


def test_unknown_preset():
    with pytest.raises(ConfigError, match="unknown preset"):
        preset_overrides("v99")


@pytest.mark.parametrize("data", [
    {"bogus": 1},
    {"model": {"bogus": 1}},
    {"model": {"num_queries": "20"}},
    {"model": {"num_queries": 2.5}},
    {"model": {"fine": 1}},
    {"model": "dual"},
    {"train": {"max_lr": "fast"}},
    {"version": 2},
])
def test_strict_loading(data):
    with pytest.raises(ConfigError):
        from_dict(data)


@pytest.mark.parametrize("key", sorted(CHOICES))
def test_enumerations_checked(key):
    with pytest.raises(ConfigError, match=key):
        from_dict({"model": {key: "nonsense"}})


@pytest.mark.parametrize("data", [
    {"model": {"voxel_size": 0.0}},
    {"model": {"num_queries": 0}},
    {"model": {"feat_dim": 30, "num_heads": 4}},
    {"loss": {"lambdas": [1.0, 1.0]}},
    {"train": {"steps": -1}},
    {"threads": 0},
    {"synth": {"num_instances": [5, 2]}},
])
def test_value_validation(data):
    with pytest.raises(ConfigError):
        from_dict(data)


def test_int_accepted_for_float_fields():
    assert from_dict({"train": {"max_lr": 1}}).train.max_lr == 1.0


def test_dump_round_trip(tmp_path):
    cfg = load_preset("v7", {"seed": 5})
    p = tmp_path / "c.yaml"
    p.write_text(dump_config(cfg))
    back = load_config(p)
    assert back == cfg and back.digest() == cfg.digest()


def test_digest_tracks_content():
    a = RunConfig()
    assert a.digest() == RunConfig().digest()
    assert from_dict({"seed": 1}).digest() != a.digest()


def test_resolution_order(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump({"seed": 3, "model": {"num_queries": 12}}))
    cfg = resolve_config("overfit", p, {"seed": 9})
    assert cfg.seed == 9
    assert cfg.model.num_queries == 12
    assert cfg.model.num_layers == 3
    assert cfg.train.steps == 3000


def test_bad_yaml(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("model: [unclosed")
    with pytest.raises(ConfigError):
        load_config(p)
    with pytest.raises(ConfigError):
        resolve_config(path=tmp_path / "missing.yaml")


def test_seed_streams_independent():
    s = RunConfig().seeds()
    assert len(set(s.values())) == 3
    assert from_dict({"seed": 1}).seeds() != s
