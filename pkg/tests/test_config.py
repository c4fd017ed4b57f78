import math
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from photonic_engine.config import (
    ScenarioConfig,
    load_config,
    parse_quantity,
    validate_config,
)
from photonic_engine.errors import ConfigError

# delta_f_o for eta_o = 0.05, gamma = 650 um, 780 nm; independent brentq solve of the beam-size relation
DF_005 = 0.021244594619427168


class TestQuantities:
    @pytest.mark.parametrize(
        "text, unit, value",
        [
            ("650 um", "m", 650e-6),
            ("650um", "m", 650e-6),
            ("780 nm", "m", 780e-9),
            ("4.06 GHz", "Hz", 4.06e9),
            ("-520 MHz", "Hz", -520e6),
            ("1.5e-3 GHz", "Hz", 1.5e6),
            ("2 deg", "rad", math.radians(2)),
            ("3 dB", "dB", 3.0),
            ("2 mV", "V", 2e-3),
            ("1e-3 W", "W", 1e-3),
            (2.2, "V", 2.2),
        ],
    )
    def test_parse(self, text, unit, value):
        assert parse_quantity(text, unit) == value

    @pytest.mark.parametrize("text, unit", [("3 GHz", "m"), ("abc", "m"), ("2 deg", "Hz"), (True, "V"), ([1], "V")])
    def test_reject(self, text, unit):
        with pytest.raises(ValueError):
            parse_quantity(text, unit)

    @given(st.floats(-1e6, 1e6, allow_nan=False))
    def test_bare_number_passthrough(self, x):
        assert parse_quantity(x, "m") == x


class TestValidate:
    def test_empty_document_defaults(self):
        assert validate_config({}) == ScenarioConfig()
        assert validate_config(None) == ScenarioConfig()

    def test_negative_v_pi(self):
        with pytest.raises(ConfigError) as info:
            validate_config({"channels": {"v_pi": -1}})
        assert any(e.startswith("channels.v_pi:") for e in info.value.errors)

    def test_all_errors_reported(self):
        doc = {"channels": {"v_pi": -1, "bogus": 1}, "steer": {"eta_o": 2}, "extra": {}}
        with pytest.raises(ConfigError) as info:
            validate_config(doc)
        paths = sorted(e.split(":")[0] for e in info.value.errors)
        assert paths == ["channels.bogus", "channels.v_pi", "extra", "steer.eta_o"]

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="lock.gain: unknown key"):
            validate_config({"lock": {"gain": 1.0}})

    def test_type_errors(self):
        with pytest.raises(ConfigError) as info:
            validate_config({"fanout": {"iterations": 2.5, "noise_on": "yes"}, "seed": -3})
        assert len(info.value.errors) == 3

    def test_units_normalized(self):
        cfg = validate_config({"steer": {"gamma": "650 um", "wavelength": "780 nm", "theta_max_diff": "2 deg"}})
        assert cfg.steer.gamma == pytest.approx(650e-6)
        assert cfg.steer.theta_max_diff == pytest.approx(math.radians(2))

    def test_derived_delta_f_echoed(self):
        cfg = validate_config({"steer": {"eta_o": 0.05, "gamma": "650 um"}})
        df = cfg.normalized()["derived"]["delta_f_o"]
        assert df == pytest.approx(DF_005, rel=1e-9)
        assert round(df * 1e3, 1) == 21.2

    def test_pattern_alias(self):
        assert validate_config({"steer": {"pattern": "hex"}}).steer.pattern == "hexagonal"
        with pytest.raises(ConfigError):
            validate_config({"steer": {"pattern": "kagome"}})

    def test_disabled_range(self):
        with pytest.raises(ConfigError, match="address.disabled"):
            validate_config({"address": {"disabled": [3, 40]}})

    def test_digest_tracks_content(self):
        a, b = validate_config({}), validate_config({"seed": 1})
        assert a.digest() == validate_config({}).digest()
        assert a.digest() != b.digest()

    def test_yaml_file(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("seed: 4\nsteer:\n  gamma: 650 um\n")
        cfg = load_config(p)
        assert cfg.seed == 4 and cfg.steer.gamma == pytest.approx(650e-6)

    def test_shipped_example_matches_defaults(self):
        example = Path(__file__).resolve().parents[1] / "configs" / "example.yaml"
        assert load_config(example) == ScenarioConfig()

    def test_bad_yaml(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("seed: [1,\n")
        with pytest.raises(ConfigError):
            load_config(p)

    @settings(max_examples=50, deadline=None)
    @given(
        st.fixed_dictionaries(
            {},
            optional={
                "v_pi": st.floats(-5, 5, allow_nan=False),
                "insertion_loss": st.floats(-1, 2, allow_nan=False),
                "n_channels": st.integers(-2, 40),
            },
        )
    )
    def test_accepted_configs_are_complete(self, channels):
        """Anything that validates is fully populated and in range."""
        try:
            cfg = validate_config({"channels": channels})
        except ConfigError as exc:
            # the default disabled list refers to a 16-channel array
            assert all(e.startswith(("channels.", "address.disabled")) for e in exc.errors)
            return
        assert cfg.channels.v_pi > 0
        assert 0 < cfg.channels.insertion_loss <= 1
        assert cfg.channels.n_channels >= 1
        cfg.geometry()
