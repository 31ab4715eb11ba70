import pytest

from difflare import config as cfgmod
from difflare.errors import ConfigError


def test_defaults_roundtrip(tmp_path):
    cfg = cfgmod.RunConfig()
    cfgmod.dump(cfg, tmp_path / "c.yaml")
    back = cfgmod.load(tmp_path / "c.yaml")
    assert back == cfg and back.digest() == cfg.digest()


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError):
        cfgmod.from_dict({"vq": {"widht": 3}})
    with pytest.raises(ConfigError):
        cfgmod.from_dict({"optimizer": {}})


def test_type_errors():
    with pytest.raises(ConfigError):
        cfgmod.from_dict({"vq": {"steps": "many"}})
    with pytest.raises(ConfigError):
        cfgmod.from_dict({"diffusion": {"widths": 3}})
    with pytest.raises(ConfigError):
        cfgmod.from_dict({"seed": 1.5})


def test_overrides():
    cfg = cfgmod.resolve(cfgmod.RunConfig(), ["vq.steps=10", "diffusion.widths=[8, 16]", "seed=3", "infer.prompt_token=1"])
    assert cfg.vq.steps == 10 and cfg.diffusion.widths == (8, 16) and cfg.seed == 3 and cfg.infer.prompt_token == 1
    with pytest.raises(ConfigError):
        cfgmod.resolve(cfgmod.RunConfig(), ["vq.nope=1"])
    with pytest.raises(ConfigError):
        cfgmod.resolve(cfgmod.RunConfig(), ["vq.steps"])


def test_bad_yaml(tmp_path):
    (tmp_path / "c.yaml").write_text("vq: [unclosed")
    with pytest.raises(ConfigError):
        cfgmod.load(tmp_path / "c.yaml")
    with pytest.raises(ConfigError):
        cfgmod.load(tmp_path / "missing.yaml")


def test_output_dir_env(monkeypatch, tmp_path):
    monkeypatch.setenv("DIFFLARE_HOME", str(tmp_path))
    assert cfgmod.RunConfig().output_dir() == tmp_path
    assert cfgmod.RunConfig(out="x").output_dir().name == "x"


def test_digest_sections():
    a = cfgmod.RunConfig()
    b = cfgmod.resolve(a, ["affm.steps=1"])
    assert a.digest("vq") == b.digest("vq") and a.digest() != b.digest()
