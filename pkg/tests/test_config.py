import json

import pytest

from shapemotion.config import PROFILES, RunConfig, build_config, config_schema, load_config
from shapemotion.errors import ConfigError


def test_profiles_build_and_differ():
    built = {name: build_config(profile=name) for name in PROFILES}
    assert built["desk"].vae.width == 256 and built["paper"].vae.width == 512
    assert built["smoke"].data.n_samples == 40
    assert len({c.digest() for c in built.values()}) == len(PROFILES)


def test_overrides_merge_over_profile():
    cfg = build_config({"vae": {"iterations": 7}, "seed": 5}, "smoke")
    assert cfg.vae.iterations == 7 and cfg.vae.width == 32 and cfg.seed == 5


@pytest.mark.parametrize("doc", [{"vea": {}}, {"vae": {"widht": 3}}, {"vae": 3}, {"profile": "huge"},
                                 {"vae": {"q_percent": 150}}, {"eval": {"sampling": "beam"}}])
def test_bad_documents_raise_config_error(doc):
    with pytest.raises(ConfigError):
        build_config(doc)


def test_load_from_yaml_and_json(tmp_path):
    (tmp_path / "c.yaml").write_text("profile: smoke\nlm:\n  warmup: 3\n")
    assert load_config(tmp_path / "c.yaml").lm.warmup == 3
    (tmp_path / "c.json").write_text(json.dumps({"data": {"n_samples": 9}}))
    assert load_config(tmp_path / "c.json", "smoke").data.n_samples == 9
    (tmp_path / "empty.yaml").write_text("")
    assert load_config(tmp_path / "empty.yaml").digest() == build_config(profile="desk").digest()
    for name, text in (("list.yaml", "- 1\n"), ("broken.json", "{")):
        (tmp_path / name).write_text(text)
        with pytest.raises(ConfigError):
            load_config(tmp_path / name)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.yaml")


def test_digest_is_stable_and_sensitive():
    a, b = build_config(profile="smoke"), build_config(profile="smoke")
    assert a.digest() == b.digest()
    b.vae.iterations += 1
    assert a.digest() != b.digest()


def test_output_root_env(monkeypatch, tmp_path):
    monkeypatch.setenv("SHAPEMOTION_OUTPUT_ROOT", str(tmp_path))
    assert build_config().output_root() == tmp_path
    monkeypatch.delenv("SHAPEMOTION_OUTPUT_ROOT")
    assert str(build_config().output_root()) == "runs"


def test_schema_lists_every_section_key():
    schema = config_schema()
    assert set(schema) == {"data", "vae", "lm", "extractor", "eval"}
    assert schema["vae"]["q_percent"] == RunConfig().vae.q_percent
    json.dumps(schema, default=list)
