import csv
import io

import pytest

from nvstorm import __version__, config
from nvstorm.cli import main
from nvstorm.nvfs import read_stack

SMALL = """
[experiment]
name = "small"
n_frames = {n}
seed = 5

[illumination]
tau_on_ref_s = 1.0
tau_off_ref_s = 3.0
gamma_ref_cps = 500.0

[camera]
width_px = 16
height_px = 16

[[emitters]]
x_nm = 800.0
y_nm = 790.0
"""


def _write(tmp_path, text, name="c.toml"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


class TestConfig:
    def test_defaults(self):
        cfg = config.ExperimentConfig()
        assert cfg.experiment.n_frames == 1000
        assert cfg.camera_config().exposure_s == cfg.rates().tau_on_s == 2.0
        assert cfg.mw_schedule() is None

    def test_every_problem_reported(self):
        bad = """
[experiment]
n_frames = 0
bogus = 1

[camera]
pixel_size_nm = -1

[illumination]
wavelength_nm = 700
"""
        with pytest.raises(config.ConfigError) as e:
            config.loads(bad)
        keys = {p.split(":")[0] for p in e.value.problems}
        assert {"experiment.n_frames", "experiment.bogus", "camera.pixel_size_nm", "illumination.wavelength_nm"} <= keys
        assert any("unknown key" in p for p in e.value.problems)

    def test_unknown_section(self):
        with pytest.raises(config.ConfigError, match="unknown key"):
            config.loads("[lasers]\npower = 3\n")

    def test_syntax_error(self):
        with pytest.raises(config.ConfigError, match="TOML"):
            config.loads("[experiment\n")

    def test_schedule_cycle_must_divide_frames(self):
        text = "[experiment]\nn_frames = 10\n[schedule]\nfrequencies_mhz = [1.0, 2.0, 3.0]\n"
        with pytest.raises(config.ConfigError, match="multiple of the schedule cycle"):
            config.loads(text)

    def test_sweep_schedule(self):
        cfg = config.loads("[experiment]\nn_frames = 6\n[schedule]\nsweep = {start_mhz = 2866.0, step_mhz = 0.5, points = 3}\n")
        assert cfg.mw_schedule().frequencies_mhz == (2866.0, 2866.5, 2867.0)

    def test_schedule_exclusive(self):
        with pytest.raises(config.ConfigError, match="exactly one"):
            config.loads("[schedule]\nfrequencies_mhz = [1.0]\nsweep = {start_mhz = 1.0, step_mhz = 1.0, points = 1}\n")

    @pytest.mark.parametrize("name", config.PRESETS)
    def test_presets_load(self, name):
        cfg = config.load(name)
        assert cfg.experiment.name == name
        assert cfg.emitters

    def test_hash_ignores_output_dir_only(self):
        cfg = config.load("fig2b")
        assert cfg.config_hash() == cfg.with_output("elsewhere").config_hash()
        assert cfg.config_hash() != cfg.with_seed(2).config_hash()
        assert len(cfg.config_hash()) == 16

    def test_toml_round_trip(self):
        cfg = config.load("fig3c")
        assert config.loads(cfg.to_toml()) == cfg

    def test_provenance(self):
        cfg = config.load("fig2b")
        assert cfg.provenance() == [f"nvstorm {__version__}", f"config_hash {cfg.config_hash()}", "seed 1"]

    def test_domain_objects(self):
        cfg = config.load("fig3c")
        s = cfg.mw_schedule()
        assert s.sign_for(2800.0) == 1 and s.sign_for(2840.0) == -1
        assert cfg.drift_model().seed == cfg.experiment.seed
        assert len(cfg.emitter_models()) == 2


def _run(argv, capsys=None):
    code = main(argv)
    if capsys is not None:
        return code, capsys.readouterr()
    return code, None


class TestCli:
    def test_simulate_outputs(self, tmp_path):
        c = _write(tmp_path, SMALL.format(n=40))
        assert main(["simulate", "--config", c, "--output", str(tmp_path / "o"), "-q"]) == 0
        o = tmp_path / "o"
        stack = read_stack(o / "stack.nvfs")
        assert len(stack) == 40
        for name in ("ground_truth.csv", "config.toml", "stack.nvfs.meta"):
            text = (o / name).read_text()
            assert "# seed 5" in text and "# config_hash" in text and f"# nvstorm {__version__}" in text
        rows = list(csv.DictReader(io.StringIO("".join(
            l for l in (o / "ground_truth.csv").read_text().splitlines(True) if not l.startswith("#")))))
        assert float(rows[0]["x_nm"]) == 800.0
        assert config.load(str(o / "config.toml")).experiment.seed == 5

    def test_single_frame(self, tmp_path):
        c = _write(tmp_path, SMALL.format(n=1))
        assert main(["simulate", "--config", c, "--output", str(tmp_path), "-q"]) == 0
        assert len(read_stack(tmp_path / "stack.nvfs")) == 1

    def test_seed_override(self, tmp_path):
        c = _write(tmp_path, SMALL.format(n=20))
        main(["simulate", "--config", c, "--output", str(tmp_path / "a"), "-q"])
        main(["simulate", "--config", c, "--seed", "6", "--output", str(tmp_path / "b"), "-q"])
        assert (tmp_path / "a/stack.nvfs").read_bytes() != (tmp_path / "b/stack.nvfs").read_bytes()
        assert "# seed 6" in (tmp_path / "b/config.toml").read_text()

    def test_global_flags_either_side(self, tmp_path):
        c = _write(tmp_path, SMALL.format(n=20))
        assert main(["--config", c, "-q", "simulate", "--output", str(tmp_path / "x")]) == 0
        assert main(["simulate", "--config", c, "--quiet", "--threads", "2", "--output", str(tmp_path / "y")]) == 0
        assert (tmp_path / "x/stack.nvfs").read_bytes() == (tmp_path / "y/stack.nvfs").read_bytes()

    def test_invalid_config_exit_2(self, tmp_path, capsys):
        c = _write(tmp_path, "[experiment]\nn_frames = -3\nfoo = 1\n")
        code, out = _run(["simulate", "--config", c, "--output", str(tmp_path), "-q"], capsys)
        assert code == 2
        assert "experiment.n_frames" in out.err and "experiment.foo" in out.err

    def test_background_only_exit_3(self, tmp_path, capsys):
        c = _write(tmp_path, "[experiment]\nn_frames = 30\n[camera]\nwidth_px = 12\nheight_px = 12\n")
        assert main(["simulate", "--config", c, "--output", str(tmp_path), "-q"]) == 0
        code, out = _run(["reconstruct", str(tmp_path / "stack.nvfs"), "--config", c,
                          "--output", str(tmp_path), "-q"], capsys)
        assert code == 3
        assert "no localizations" in out.err

    def test_missing_and_corrupt_files_exit_4(self, tmp_path, capsys):
        assert main(["info", str(tmp_path / "nope.nvfs")]) == 4
        bad = tmp_path / "bad.nvfs"
        bad.write_bytes(b"JUNKJUNKJUNK")
        code, out = _run(["reconstruct", str(bad), "-q", "--output", str(tmp_path)], capsys)
        assert code == 4 and "magic" in out.err

    def test_truncated_stack_exit_4(self, tmp_path, capsys):
        c = _write(tmp_path, SMALL.format(n=5))
        main(["simulate", "--config", c, "--output", str(tmp_path), "-q"])
        p = tmp_path / "stack.nvfs"
        p.write_bytes(p.read_bytes()[:-10])
        code, out = _run(["reconstruct", str(p), "--config", c, "-q", "--output", str(tmp_path)], capsys)
        assert code == 4 and "truncated" in out.err and "expected" in out.err

    def test_info(self, tmp_path, capsys):
        c = _write(tmp_path, SMALL.format(n=3))
        main(["simulate", "--config", c, "--output", str(tmp_path), "-q"])
        code, out = _run(["info", str(tmp_path / "stack.nvfs")], capsys)
        assert code == 0
        assert "frame_count = 3" in out.out and "width = 16" in out.out

    def test_odmr_needs_schedule_tags(self, tmp_path, capsys):
        c = _write(tmp_path, SMALL.format(n=40))
        main(["simulate", "--config", c, "--output", str(tmp_path), "-q"])
        with_sched = SMALL.format(n=40) + "\n[schedule]\nfrequencies_mhz = [2870.0, 2880.0]\n"
        c2 = _write(tmp_path, with_sched, "s.toml")
        code, out = _run(["odmr", str(tmp_path / "stack.nvfs"), "--config", c2, "-q", "--output", str(tmp_path)],
                         capsys)
        assert code == 2 and "without a microwave tag" in out.err
        code, out = _run(["odmr", str(tmp_path / "stack.nvfs"), "--config", c, "-q", "--output", str(tmp_path)],
                         capsys)
        assert code == 2 and "schedule" in out.err

    def test_version(self, capsys):
        with pytest.raises(SystemExit) as e:
            main(["--version"])
        assert e.value.code == 0
        assert __version__ in capsys.readouterr().out


@pytest.fixture(scope="module")
def fig2a_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("fig2a")
    for run in ("a", "b"):
        out = str(base / run)
        assert main(["simulate", "--config", "fig2a", "--output", out, "-q"]) == 0
        assert main(["reconstruct", f"{out}/stack.nvfs", "--config", "fig2a", "--output", out, "-q"]) == 0
    return base


def test_fig2a_three_clusters(fig2a_runs):
    text = (fig2a_runs / "a/clusters.csv").read_text().splitlines()
    rows = [l for l in text if not l.startswith("#")]
    assert len(rows) == 1 + 3


@pytest.mark.parametrize("name", ["stack.nvfs", "ground_truth.csv", "config.toml", "localizations.csv",
                                  "clusters.csv", "image.pgm", "image.pgm.txt"])
def test_reruns_byte_identical(fig2a_runs, name):
    assert (fig2a_runs / "a" / name).read_bytes() == (fig2a_runs / "b" / name).read_bytes()
