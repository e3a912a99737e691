import json

import numpy as np
import pytest

from sadepth import config, io
from sadepth.cli import DataConfig
from sadepth.errors import InvalidInputError
from sadepth.trainer import TrainConfig


class TestIO:
    def test_f32_round_trip(self, tmp_path):
        a = np.random.default_rng(0).random((5, 7)).astype(np.float32)
        io.write_f32(tmp_path / "a.f32", a)
        assert np.array_equal(io.read_f32(tmp_path / "a.f32"), a)
        assert json.loads((tmp_path / "a.f32.json").read_text())["shape"] == [5, 7]

    def test_png16_round_trip(self, tmp_path):
        a = np.random.default_rng(1).uniform(0, 20, (6, 9))
        scale = io.write_png16(tmp_path / "a.png", a)
        assert scale == pytest.approx(65535 / a.max())
        assert np.abs(io.read_png16(tmp_path / "a.png") - a).max() <= 0.5 / scale + 1e-12

    def test_sidecars_do_not_collide(self, tmp_path):
        io.write_png16(tmp_path / "x.png", np.ones((2, 2)))
        io.write_f32(tmp_path / "x.f32", np.ones((2, 2)))
        assert io.read_png16(tmp_path / "x.png").shape == (2, 2)
        assert io.read_f32(tmp_path / "x.f32").shape == (2, 2)

    def test_attention_maps(self, tmp_path):
        maps = [np.full((2, 3), 1 / 6), np.eye(2, 3) / 2]
        index = io.write_attention_maps(tmp_path, maps, [(0, 0), (1, 2)])
        assert [e["file"] for e in index] == ["attention_000.png", "attention_001.png"]
        assert index[1]["query_row"] == 1 and index[1]["peak_weight"] == 0.5


class TestConfig:
    def _allowed(self):
        return config.valid_keys(TrainConfig) + config.valid_keys(DataConfig, "data.")

    def test_valid_keys_have_sections(self):
        keys = self._allowed()
        assert "lr" in keys and "depth.ddv_bins" in keys and "augment.flip_prob" in keys
        assert "data.train_split" in keys and "depth" not in keys

    def test_parse_values(self):
        assert config.parse_override("lr=1e-3") == ("lr", 1e-3)
        assert config.parse_override("depth.stage_blocks=[1,1,1,1]") == ("depth.stage_blocks", [1, 1, 1, 1])
        assert config.parse_override("attention_on=False") == ("attention_on", False)
        assert config.parse_override("dtype=float32") == ("dtype", "float32")
        with pytest.raises(InvalidInputError):
            config.parse_override("lr")

    def test_overrides_win_and_aliases_resolve(self):
        merged = config.merge({"lr": 1e-3, "depth": {"ddv_bins": 16}},
                              [("lr", 5e-4), ("ddv.bins", 8), ("loss.smoothness_weight", 0.0)], self._allowed())
        assert merged == {"lr": 5e-4, "depth": {"ddv_bins": 8}, "smoothness_weight": 0.0}

    def test_unknown_key_lists_valid_keys(self):
        with pytest.raises(InvalidInputError) as info:
            config.merge({}, [("depth.ddv_binz", 3)], self._allowed())
        msg = str(info.value)
        assert "depth.ddv_binz" in msg and "depth.ddv_bins" in msg and "augment.hue" in msg

    def test_dict_leaf_kept_whole(self):
        merged = config.merge({"scene": {"planes": [], "seed": 1}}, [], ["scene", "seed"])
        assert merged == {"scene": {"planes": [], "seed": 1}}

    def test_toml_and_json_agree(self, tmp_path):
        (tmp_path / "c.toml").write_text('lr = 0.001\n[depth]\nddv_bins = 8\n')
        (tmp_path / "c.json").write_text(json.dumps({"lr": 0.001, "depth": {"ddv_bins": 8}}))
        assert config.load_file(tmp_path / "c.toml") == config.load_file(tmp_path / "c.json")

    def test_bad_files(self, tmp_path):
        with pytest.raises(InvalidInputError):
            config.load_file(tmp_path / "missing.json")
        (tmp_path / "bad.json").write_text("{")
        with pytest.raises(InvalidInputError):
            config.load_file(tmp_path / "bad.json")
        (tmp_path / "list.json").write_text("[1]")
        with pytest.raises(InvalidInputError):
            config.load_file(tmp_path / "list.json")

    def test_resolve_wraps_type_errors(self):
        with pytest.raises(InvalidInputError):
            config.resolve(lambda d: TrainConfig.from_dict(d), self._allowed(), overrides=["batch_size=0"])

    def test_workers(self, monkeypatch):
        monkeypatch.delenv(config.WORKERS_ENV, raising=False)
        assert config.num_workers() == 1
        monkeypatch.setenv(config.WORKERS_ENV, "4")
        assert config.num_workers() == 4
        for bad in ("0", "x"):
            monkeypatch.setenv(config.WORKERS_ENV, bad)
            with pytest.raises(InvalidInputError):
                config.num_workers()

    def test_write_resolved(self, tmp_path):
        path = config.write_resolved(tmp_path, "r.json", TrainConfig())
        d = json.loads(path.read_text())
        assert d["lr"] == 1e-4 and d["depth"]["ddv_bins"] == 128
