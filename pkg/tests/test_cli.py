import pytest

from blno.cli import EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, EXIT_VERIFY, main, read_manifest


def run(argv):
    return main([str(a) for a in argv])


def csv_bytes(d):
    return {p.name: p.read_bytes() for p in sorted(d.glob("*.csv"))}


def test_toy_all_dynamics_writes_four_csvs(tmp_path, capsys):
    assert run(["toy", "--steps", 50, "--out", tmp_path, "--no-plot"]) == EXIT_OK
    assert sorted(p.name for p in tmp_path.glob("toy_*.csv")) == [
        "toy_regularized.csv", "toy_simultaneous.csv", "toy_stackelberg.csv", "toy_ttsa.csv"]
    m = read_manifest(tmp_path / "manifest.txt")
    assert m["subcommand"] == "toy" and m["arg.lr"] == "0.05" and m["arg.ttsa_multiple"] == "4.0"
    assert m["arg.reg"] == "0.3"


def test_toy_plot_written(tmp_path):
    assert run(["toy", "--steps", 20, "--dynamics", "stackelberg", "--out", tmp_path]) == EXIT_OK
    assert (tmp_path / "toy_phase.svg").stat().st_size > 0


@pytest.mark.parametrize("argv", [
    ["toy", "--steps", 0],
    ["toy", "--dynamics", "chaotic"],
    ["toy", "--init", "1"],
    ["ihvp-bench", "--nets", 0],
    ["blo", "--preset", "banana"],
    ["blo", "--schedule", "manual"],
    ["train", "--algo", "sgd"],
    ["train", "--algo", "ppo", "--env", "atari"],
    ["aggregate", "--in-dir", "/nonexistent"],
    ["frobnicate"],
])
def test_usage_errors_exit_one(argv, tmp_path, capsys):
    assert run(argv + ["--out", tmp_path] if argv[0] != "frobnicate" else argv) == EXIT_USAGE


def test_unknown_algo_lists_choices(tmp_path, capsys):
    run(["train", "--algo", "sgd", "--out", tmp_path])
    err = capsys.readouterr().err
    assert "blpo-nystrom, blpo-cg, nested, simul, ttsa, ppo" in err


def test_unknown_dynamics_lists_choices(tmp_path, capsys):
    run(["toy", "--dynamics", "chaotic", "--out", tmp_path])
    assert "stackelberg" in capsys.readouterr().err


def test_ihvp_bench_summary_and_determinism(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(["ihvp-bench", "--nets", 2, "--out", a, "--no-plot"]) == EXIT_OK
    assert run(["ihvp-bench", "--nets", 2, "--out", b, "--no-plot"]) == EXIT_OK
    assert csv_bytes(a) == csv_bytes(b)
    methods = [line.split(",")[0] for line in (a / "ihvp_summary.csv").read_text().splitlines()[1:]]
    assert methods == ["nystrom", "cg", "nystrom_pcg"]
    m = read_manifest(a / "manifest.txt")
    assert m["arg.rho"] == "0.01" and m["arg.cg_iters"] == "30"


@pytest.mark.parametrize("solver", ["exact", "cg", "nystrom"])
def test_blo_solvers_run(solver, tmp_path, capsys):
    assert run(["blo", "--solver", solver, "--outer-iters", 20, "--out", tmp_path, "--no-plot"]) == EXIT_OK
    assert len((tmp_path / "blo.csv").read_text().splitlines()) == 21
    assert "schedule: alpha_x=" in capsys.readouterr().out


def test_blo_auto_schedule_values(tmp_path, capsys):
    from blno.blo import recommended_schedule
    from blno.problems.quadratic import make_quadratic

    run(["blo", "--solver", "exact", "--outer-iters", 2, "--out", tmp_path, "--no-plot"])
    o = make_quadratic(4, 16, 20.0, 0)
    s = recommended_schedule(o.L, o.mu, 0.0, 1.0)
    assert f"alpha_x={s.outer_lr:.6g} alpha_y={s.inner_lr:.6g} D={s.inner_iters}" in capsys.readouterr().out


def test_blo_numeric_failure_exit_two(tmp_path, capsys):
    argv = ["blo", "--schedule", "manual", "--outer-lr", 1e200, "--inner-lr", 1e200, "--inner-iters", 3,
            "--outer-iters", 5, "--out", tmp_path, "--no-plot"]
    assert run(argv) == EXIT_NUMERIC


def test_train_and_aggregate(tmp_path, capsys):
    tr, ag = tmp_path / "train", tmp_path / "agg"
    cfg = tmp_path / "c.cfg"
    cfg.write_text("num_envs = 2\nrollout_len = 16\nnum_minibatches = 2\nnested_updates = 2\n")
    argv = ["train", "--algo", "blpo-nystrom", "--env", "chain", "--config", cfg, "--seeds", 2,
            "--total-timesteps", 96, "--out", tr]
    assert run(argv) == EXIT_OK
    assert sorted(p.name for p in tr.glob("curve_*.csv")) == [
        "curve_blpo-nystrom_chain_seed0.csv", "curve_blpo-nystrom_chain_seed1.csv"]
    m = read_manifest(tr / "manifest.txt")
    assert m["config.num_envs"] == "2" and m["config.total_timesteps"] == "96" and m["config.actor_lr"] == "0.00025"
    assert run(["aggregate", "--in-dir", tr, "--out", ag]) == EXIT_OK
    rows = (ag / "aggregate.csv").read_text().splitlines()
    assert rows[0] == "algo,env,env_steps,mean,ci_low,ci_high,n_seeds" and len(rows) == 4
    assert (ag / "aggregate.svg").exists()


def test_aggregate_single_seed_interval_is_point(tmp_path):
    tr = tmp_path / "t"
    run(["train", "--algo", "ppo", "--env", "chain", "--total-timesteps", 1024, "--out", tr])
    run(["aggregate", "--in-dir", tr, "--out", tmp_path / "a", "--no-plot"])
    for line in (tmp_path / "a" / "aggregate.csv").read_text().splitlines()[1:]:
        f = line.split(",")
        assert f[3] == f[4] == f[5] and f[6] == "1"


def test_verify_passes_and_fails_on_zero_tolerance(tmp_path, capsys):
    assert run(["verify", "--out", tmp_path / "ok"]) == EXIT_OK
    lines = (tmp_path / "ok" / "verify.csv").read_text().splitlines()
    assert len(lines) == 9
    assert run(["verify", "--tolerance-scale", 0, "--out", tmp_path / "bad"]) == EXIT_VERIFY
    assert "FAIL thm4_exact_vs_fd" in capsys.readouterr().out


def test_out_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("BLNO_OUT_DIR", str(tmp_path))
    assert run(["toy", "--steps", 5, "--dynamics", "ttsa", "--no-plot"]) == EXIT_OK
    assert (tmp_path / "toy" / "toy_ttsa.csv").exists() and (tmp_path / "toy" / "manifest.txt").exists()


def test_manifest_written_before_run(tmp_path, monkeypatch):
    import blno.problems.toy as toy

    def boom(*a, **k):
        assert (tmp_path / "manifest.txt").exists()
        raise FloatingPointError("stop")
    monkeypatch.setattr(toy, "toy_run", boom)
    assert run(["toy", "--steps", 5, "--out", tmp_path, "--no-plot"]) == EXIT_NUMERIC


def test_replay_is_byte_identical(tmp_path):
    a = tmp_path / "a"
    assert run(["toy", "--steps", 30, "--out", a, "--no-plot"]) == EXIT_OK
    assert run(["replay", a / "manifest.txt", "--out", tmp_path / "b"]) == EXIT_OK
    assert csv_bytes(a) == csv_bytes(tmp_path / "b")


def test_replay_rejects_non_manifest(tmp_path):
    p = tmp_path / "x.txt"
    p.write_text("hello\n")
    assert run(["replay", p]) == EXIT_USAGE
