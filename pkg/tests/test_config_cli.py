import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vpbmix.cli import main
from vpbmix.config import ConfigError, defaults, parse_config, parse_text


def test_defaults_round_trip():
    rc = defaults()
    assert parse_text(rc.text()) == rc
    assert parse_text("").sha256() == rc.sha256()


@settings(max_examples=30, deadline=None)
@given(st.floats(-2.9, 1.0), st.integers(6, 12), st.floats(1e-3, 0.9))
def test_round_trip_preserves_values(gamma, k, eps):
    rc = parse_text(f"kernel.gamma = {gamma!r}\nweight.k = {k}\nsim.epsilon = {eps!r}\n")
    again = parse_text(rc.text())
    assert again == rc and again["kernel.gamma"] == gamma


def test_gamma_outside_range_is_named():
    with pytest.raises(ConfigError) as info:
        parse_text("kernel.gamma = 2.0\n", "run.cfg")
    assert any("gamma" in p for p in info.value.problems)


def test_unknown_and_repeated_keys_report_lines():
    with pytest.raises(ConfigError) as info:
        parse_text("sim.epsilon = 0.1\nsim.colour = red\n\nsim.epsilon = 0.2\n", "a.cfg")
    probs = info.value.problems
    assert any(p.startswith("a.cfg:2") and "colour" in p for p in probs)
    assert any(p.startswith("a.cfg:4") and "repeats line 1" in p for p in probs)


def test_comments_and_bad_values():
    assert parse_text("# note\nsim.collisions = off  # trailing\n")["sim.collisions"] is False
    with pytest.raises(ConfigError):
        parse_text("velocity.points = seven\n")
    with pytest.raises(ConfigError):
        parse_text("just words\n")


def test_with_overrides():
    rc = defaults().with_(run__seed=7)
    assert rc["run.seed"] == 7 and rc.sha256() != defaults().sha256()
    with pytest.raises(KeyError):
        defaults().with_(run__nothing=1)


def test_validity_table_cli(tmp_path, capsys):
    assert main(["validity-table", "--out", str(tmp_path)]) == 0
    rows = (tmp_path / "validity_table.csv").read_text().strip().splitlines()
    assert len(rows) == 1 + 27
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["command"] == "validity-table" and man["error"] is None
    assert json.loads(capsys.readouterr().out)["status"] == "ok"


def test_manifest_hash_tracks_config(tmp_path):
    cfg = tmp_path / "a.cfg"
    cfg.write_text("validity.epsilon = 0.01\n")
    hashes = []
    for i, text in enumerate(["validity.epsilon = 0.01\n", "validity.epsilon = 0.01  # same\n",
                              "validity.epsilon = 0.02\n"]):
        cfg.write_text(text)
        out = tmp_path / f"o{i}"
        assert main(["validity-table", "--config", str(cfg), "--out", str(out)]) == 0
        hashes.append(json.loads((out / "manifest.json").read_text())["config_sha256"])
        assert hashes[-1] == parse_config(cfg).sha256()
    assert hashes[0] == hashes[1] != hashes[2]


def test_config_error_exit_code(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("kernel.gamma = 2\n")
    assert main(["validity-table", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    err = json.loads(capsys.readouterr().err)
    assert err["status"] == "config-error" and "gamma" in err["problems"][0]
    assert main(["validity-table", "--threads", "0", "--out", str(tmp_path / "o")]) == 2


def test_seed_flag_lands_in_manifest(tmp_path):
    assert main(["validity-table", "--seed", "42", "--out", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "manifest.json").read_text())["seed"] == 42
    assert "run.seed = 42" in (tmp_path / "effective_config.txt").read_text()


def test_characteristics_cli(tmp_path):
    assert main(["characteristics", "--out", str(tmp_path)]) == 0


def test_collision_check_cli(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("velocity.points = 5\nvelocity.L_v = 4.0\ncheck.samples = 3\n")
    assert main(["collision-check", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    man = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert all(man["checks"].values()) and "collision_check.csv" in man["files"]
