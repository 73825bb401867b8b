import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from onestep import reports
from onestep.config import ExperimentConfig, load_config, parse_config
from onestep.errors import ConfigError


class TestWriters:
    def test_table(self, tmp_path):
        reports.write_table(tmp_path / "t.csv", ["a", "b"], [[1, 0.1], [np.int64(2), float("nan")]], "abc")
        assert (tmp_path / "t.csv").read_text() == "# config_sha256=abc\na,b\n1,0.1\n2,NA\n"
        header, rows = reports.read_table(tmp_path / "t.csv")
        assert header == ["a", "b"] and rows == [["1", "0.1"], ["2", "NA"]]

    def test_json(self, tmp_path):
        reports.write_json(tmp_path / "r.json", {"b": np.float64(0.5), "a": [np.int64(1), float("nan")], "c": np.arange(2)})
        text = (tmp_path / "r.json").read_text()
        assert json.loads(text) == {"a": [1, None], "b": 0.5, "c": [0, 1]}
        assert text.index('"a"') < text.index('"b"')

    @pytest.mark.parametrize("kind", ["line", "scatter", "bar"])
    def test_svg_well_formed(self, tmp_path, kind):
        path = tmp_path / f"{kind}.svg"
        if kind == "line":
            reports.line_plot(path, [0.1, 0.5, 1.0], {"a": [0.2, 0.4, 1.0], "b": [0.1, 0.5, 1.0]}, "t", dashed=("b",))
        elif kind == "scatter":
            reports.scatter_plot(path, [1.0, 2.0, 3.0], [2.0, 4.1, 6.0], "t <x>")
        else:
            reports.bar_plot(path, [0.0, 1.0, 2.0], [3, 4], marker=1.5, overlay=[1, 2])
        root = ET.parse(path).getroot()
        assert root.tag.endswith("svg")
        first = path.read_bytes()
        path.unlink()
        if kind == "bar":
            reports.bar_plot(path, [0.0, 1.0, 2.0], [3, 4], marker=1.5, overlay=[1, 2])
            assert path.read_bytes() == first


class TestConfig:
    def test_defaults_valid(self):
        ExperimentConfig().validate()

    def test_parse(self):
        cfg = parse_config(
            """
            [experiment]
            name = triptych
            seed = 4
            [data]
            num_classes = 10
            noise_rate = 0.1   ; inline comment
            [scoring]
            p_values = 0.1, 0.3
            eta = 1e-4
            absolute_overlap = true
            [proxy]
            feature_dim = 5
            [target]
            loss_family = squared_error_linear
            """
        )
        assert cfg.experiment.seed == 4 and cfg.data.num_classes == 10
        assert cfg.scoring.p_values == (0.1, 0.3) and cfg.scoring.eta == 1e-4
        assert cfg.scoring.absolute_overlap is True and cfg.proxy.feature_dim == 5

    def test_blank_means_default(self):
        assert parse_config("[scoring]\neta =\n").scoring.eta is None

    def test_overrides(self):
        assert parse_config("", {"experiment.seed": 9}).experiment.seed == 9

    @pytest.mark.parametrize(
        "text",
        [
            "[bogus]\nx = 1\n",
            "[data]\nbogus = 1\n",
            "[data]\nnum_classes = three\n",
            "[scoring]\np_values = 0.2, 1.5\n",
            "[scoring]\np_values = 0\n",
            "[data]\nnoise_rate = 2\n",
            "[target]\nloss_family = hinge\n",
            "[scoring]\nmode = exact_delta\n",
            "not an ini file",
        ],
    )
    def test_invalid(self, text):
        with pytest.raises(ConfigError):
            parse_config(text)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "nope.ini")

    def test_hash(self):
        a, b = ExperimentConfig(), ExperimentConfig()
        b.experiment.output_dir = "elsewhere"
        assert a.hash() == b.hash() and len(a.hash()) == 64
        b.experiment.seed = 1
        assert a.hash() != b.hash()
