import io
import subprocess
import sys

import numpy as np
import pytest

import gls.cli as cli
from gls.cli import run
from gls.imaging import Image, read_image, write_image
from gls.instance import read_trace

MINIMAL = "gls 2 1\ngroup\ne 0 1 1.0\n"
TRIANGLE = "graph 3 3\n0 2 3\n0 1 1\n1 2 1\n"


def call(*argv):
    out, err = io.StringIO(), io.StringIO()
    code = run([str(a) for a in argv], out, err)
    return code, out.getvalue(), err.getvalue()


@pytest.fixture
def write(tmp_path):
    def _write(name, content):
        path = tmp_path / name
        if isinstance(content, bytes):
            path.write_bytes(content)
        else:
            path.write_text(content)
        return path
    return _write


# --- solve ------------------------------------------------------------------

@pytest.mark.parametrize("solver", ["mw", "ipm"])
def test_solve_minimal_instance(write, solver):
    code, out, _ = call("solve", write("a.gls", MINIMAL), "--solver", solver)
    assert code == 0
    lines = out.splitlines()
    assert lines[0] == "objective 0.0"
    assert len(lines) == 3


def test_solve_writes_x_and_trace(write, tmp_path):
    inst = write("a.gls", "gls 1 2\ngroup\nd 0 1\ns 0 0\ngroup\nd 0 1\ns 0 2\n")
    for solver in ("mw", "ipm"):
        xfile, tfile = tmp_path / f"x_{solver}", tmp_path / f"t_{solver}"
        code, out, _ = call("solve", inst, "--solver", solver, "--out", xfile, "--trace", tfile)
        assert code == 0
        assert float(out.split()[1]) == pytest.approx(2.0, rel=1e-2)
        assert len(xfile.read_text().split()) == 1
        with open(tfile) as fh:
            cols, recs = read_trace(fh)
        expected = ({"iter", "mu_prev", "mu", "lambda", "obj", "opt2", "min_weight_share"}
                    if solver == "mw" else
                    {"stage", "t", "newton_steps", "grad_norm", "sum_y", "obj", "gap_bound"})
        assert set(cols) == expected and recs


def test_solve_strict_mode(write):
    code, out, _ = call("solve", write("a.gls", MINIMAL), "--strict", "--eps", "0.3")
    assert code == 0 and out.startswith("objective")


# --- errors -----------------------------------------------------------------

def test_usage_errors():
    assert call()[0] == 1
    assert call("frobnicate")[0] == 1
    assert call("solve")[0] == 1
    assert call("solve", "x", "--solver", "newton")[0] == 1
    assert call("blend", "a", "b", "c", "d", "--offset", "1;2")[0] == 1


def test_io_errors(write, tmp_path):
    code, _, err = call("solve", tmp_path / "missing.gls")
    assert code == 2 and err
    assert call("solve", write("bad.gls", "gls 2 1\ngroup\ne 0 9 1\n"))[0] == 2
    assert call("shortest-path", write("g.txt", "graph 2\n"), "--s", 0, "--t", 1)[0] == 2
    assert call("cluster", write("p.txt", "points 2 1\n0\n"), "--lambda", 1)[0] == 2
    assert call("denoise", write("i.pgm", b"P5 2 2 255\n\x00"), tmp_path / "o.pgm",
                "--lambda", 1)[0] == 2


def test_bad_values_are_usage_errors(write):
    g = write("g.txt", TRIANGLE)
    assert call("shortest-path", g, "--s", 0, "--t", 0)[0] == 1
    assert call("solve", write("a.gls", MINIMAL), "--eps", "-1")[0] == 1


def test_solver_failure_exit_code(write, monkeypatch):
    def boom(*a, **k):
        raise cli.SingularMatrixError("singular")

    monkeypatch.setattr(cli, "solve_mw", boom)
    code, _, err = call("solve", write("a.gls", MINIMAL))
    assert code == 3 and "solver failed" in err


# --- reductions -------------------------------------------------------------

@pytest.mark.parametrize("solver", ["mw", "ipm"])
def test_shortest_path_triangle(write, solver):
    code, out, _ = call("shortest-path", write("g.txt", TRIANGLE), "--s", 0, "--t", 2,
                        "--solver", solver)
    assert code == 0
    assert out.split()[:2] == ["distance", "2"]
    assert "raw" in out


def test_fractional_lengths_print_raw(write):
    code, out, _ = call("shortest-path", write("g.txt", "graph 2 1\n0 1 1.5\n"), "--s", 0,
                        "--t", 1, "--solver", "ipm")
    assert code == 0 and "raw" not in out
    assert float(out.split()[1]) == pytest.approx(1.5, abs=1e-3)


def test_mincut_prints_value_and_partition(write):
    g = write("g.txt", "graph 4 4\n0 1 2\n1 3 7\n0 2 5\n2 3 1\n")
    code, out, _ = call("mincut", g, "--s", 0, "--t", 3, "--solver", "ipm")
    assert code == 0
    lines = dict(line.split(" ", 1) for line in out.splitlines())
    assert lines["cut"].split()[0] == "3"
    assert lines["partition"].split() == ["0", "2"]
    assert float(lines["relaxation"]) >= 3 - 1e-6


def test_mincut_direct_edge(write):
    code, out, _ = call("mincut", write("g.txt", "graph 2 1\n0 1 5\n"), "--s", 0, "--t", 1)
    assert code == 0 and out.splitlines()[0].startswith("cut 5")


def test_cluster(write):
    code, out, _ = call("cluster", write("p.txt", "points 2 1\n0\n2\nw 0 1 100\n"),
                        "--lambda", 1)
    assert code == 0
    vals = [float(v) for v in out.split()]
    assert vals == pytest.approx([1.0, 1.0], abs=1e-3)


# --- imaging ----------------------------------------------------------------

def test_denoise_round_trip(write, tmp_path):
    rng = np.random.default_rng(0)
    src = tmp_path / "in.pgm"
    write_image(str(src), Image(rng.random((6, 6))))
    dst = tmp_path / "out.pgm"
    code, out, _ = call("denoise", src, dst, "--lambda", 0.2, "--mode", "aniso",
                        "--trace", tmp_path / "tr")
    assert code == 0 and out.startswith("objective")
    img = read_image(str(dst))
    assert img.data.shape == (6, 6, 1)
    assert (tmp_path / "tr").read_text().startswith("iter")


def test_denoise_color_sqrt_fidelity(tmp_path):
    src = tmp_path / "in.ppm"
    write_image(str(src), Image(np.random.default_rng(1).random((4, 4, 3))))
    code, _, _ = call("denoise", src, tmp_path / "out.ppm", "--lambda", 0.1,
                      "--sqrt-fidelity", "--solver", "ipm")
    assert code == 0
    assert read_image(str(tmp_path / "out.ppm")).channels == 3


def test_blend(tmp_path):
    paths = {name: tmp_path / f"{name}.pgm" for name in ("src", "dst", "mask", "out")}
    write_image(str(paths["src"]), Image(np.zeros((4, 4))))
    write_image(str(paths["dst"]), Image(np.full((8, 8), 0.6)))
    mask = np.zeros((4, 4))
    mask[1:3, 1:3] = 1.0
    write_image(str(paths["mask"]), Image(mask))
    code, _, _ = call("blend", paths["src"], paths["dst"], paths["mask"], paths["out"],
                      "--offset", "2,3")
    assert code == 0
    out = read_image(str(paths["out"]))
    assert np.abs(out.data - 0.6).max() <= 1 / 255


# --- gen --------------------------------------------------------------------

@pytest.mark.parametrize("kind", ["random", "tv"])
def test_gen_is_deterministic(tmp_path, kind):
    a, b = tmp_path / "a", tmp_path / "b"
    assert call("gen", "--kind", kind, "--seed", 7, "--out", a)[0] == 0
    assert call("gen", "--kind", kind, "--seed", 7, "--out", b)[0] == 0
    assert a.read_bytes() == b.read_bytes()
    code, out, _ = call("gen", "--kind", kind, "--seed", 7)
    assert out == a.read_text()


def test_gen_output_solves(tmp_path):
    path = tmp_path / "g.gls"
    call("gen", "--n", 6, "--k", 2, "--seed", 3, "--out", path)
    code, out, _ = call("solve", path, "--solver", "ipm")
    assert code == 0 and float(out.split()[1]) > 0


def test_module_entry_point(tmp_path):
    path = tmp_path / "a.gls"
    path.write_text(MINIMAL)
    res = subprocess.run([sys.executable, "-m", "gls", "solve", str(path)],
                         capture_output=True, text=True)
    assert res.returncode == 0
    assert res.stdout.startswith("objective 0.0")
