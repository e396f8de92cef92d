import io
import os
import subprocess
import sys
from pathlib import Path

import pytest

from bondsim import StateSpace, isomorphic, parse
from bondsim.cli import main
from bondsim.models import CORPUS, build

CORPUS_DIR = Path(__file__).resolve().parents[1] / "corpus"


def run(*argv):
    out, err = io.StringIO(), io.StringIO()
    code = main([str(a) for a in argv], out, err)
    return code, out.getvalue(), err.getvalue()


@pytest.mark.parametrize("name,states", [("lift_a_load", 5), ("solenoid", 3), ("filter_chopper", 2)])
def test_check_corpus(name, states):
    code, out, err = run("check", CORPUS_DIR / f"{name}.bg")
    assert code == 0, err
    assert f"states: {states}, differential: 0" in out
    assert err == ""


def test_check_source_on_resistor_names_the_rule(tmp_path):
    f = tmp_path / "bad.bg"
    f.write_text("model bad\nelement SE s { value = 1 }\nelement R r { k = 1 }\nbond b1 s -> r\n")
    code, out, err = run("check", f)
    assert code == 1
    assert "junction-endpoint" in err


def test_check_two_inertias_fails(tmp_path):
    f = tmp_path / "two.bg"
    f.write_text(
        "model two\nelement SE s { value = 1 }\nelement 1 j\nelement I a { k = 1 }\n"
        "element I b { k = 2 }\nbond b1 s -> j\nbond b2 j -> a\nbond b3 j -> b\n"
    )
    code, out, err = run("check", f)
    assert code == 1
    assert "DerivativeCausality" in err or "derivative" in err.lower()
    assert "differential: 1" in out


def test_check_algebraic_loop(tmp_path):
    f = tmp_path / "loop.bg"
    f.write_text(
        "model loop\nelement SE s { value = 1 }\nelement 1 j1\nelement R r1 { k = 1 }\n"
        "element 0 z\nelement R r2 { k = 2 }\nelement 1 j2\nelement I m { k = 1 }\n"
        "bond b1 s -> j1\nbond b2 j1 -> r1\nbond b3 j1 -> z\nbond b4 z -> r2\n"
        "bond b5 z -> j2\nbond b6 j2 -> m\n"
    )
    code, _, err = run("check", f)
    assert code == 1 and "r1" in err and "r2" in err


def test_parse_error_has_location(tmp_path):
    f = tmp_path / "syntax.bg"
    f.write_text("model m\nelement Q x\n")
    code, _, err = run("check", f)
    assert code == 1
    assert err.startswith(f"{f}:2:")


def test_check_writes_nothing(tmp_path):
    src = tmp_path / "lift.bg"
    src.write_text((CORPUS_DIR / "lift_a_load.bg").read_text())
    before = sorted(os.listdir(tmp_path))
    run("check", src)
    assert sorted(os.listdir(tmp_path)) == before


def test_simulate_to_file(tmp_path):
    src = CORPUS_DIR / "filter_chopper.bg"
    before = src.read_bytes()
    dest = tmp_path / "out.csv"
    code, out, err = run("simulate", src, "--dt", "1e-4", "--t-end", "0.1", "-o", dest)
    assert code == 0, err
    lines = dest.read_text().splitlines()
    assert lines[0].startswith("t,e.b1,f.b1,")
    assert len(lines) == 1002
    assert "residual" in out
    assert src.read_bytes() == before


def test_simulate_to_stdout_keeps_summary_apart():
    code, out, err = run("simulate", CORPUS_DIR / "filter_chopper.bg", "--t-end", "0.01", "--record-every", "5")
    assert code == 0
    assert out.startswith("t,") and "residual" not in out
    assert "residual" in err
    assert len(out.splitlines()) == 4  # header, steps 0, 5, 10


def test_simulate_is_byte_identical(tmp_path):
    args = ("simulate", CORPUS_DIR / "solenoid.bg", "--dt", "1e-4", "--t-end", "0.02")
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert run(*args, "-o", a)[0] == 0
    assert run(*args, "-o", b)[0] == 0
    assert a.read_bytes() == b.read_bytes()


def test_simulate_set_binding_changes_the_run():
    base = ("simulate", CORPUS_DIR / "filter_chopper.bg", "--t-end", "0.01")
    _, plain, _ = run(*base)
    code, bound, _ = run(*base, "--set", "u_in=12")
    assert code == 0 and bound != plain
    code, waved, _ = run(*base, "--set", "u_in=24 * sin(100 * t)")
    assert code == 0 and waved not in (plain, bound)


@pytest.mark.parametrize(
    "extra",
    [
        ("--set", "nope=1"),
        ("--set", "u_in=1 +"),
        ("--set", "u_in"),
        ("--dt", "-1"),
        ("--dt", "abc"),
        ("--t-end", "0"),
        ("--record-every", "0"),
        ("--bogus",),
    ],
)
def test_simulate_flag_errors_exit_2(extra, capsys):
    code, _, _ = run("simulate", CORPUS_DIR / "filter_chopper.bg", *extra)
    assert code == 2


def test_missing_file_exit_2(tmp_path):
    code, _, err = run("check", tmp_path / "missing.bg")
    assert code == 2 and "missing.bg" in err


def test_linearize_filter():
    code, out, err = run("linearize", CORPUS_DIR / "filter_chopper.bg")
    assert code == 0, err
    head, _, tf = out.partition("# transfer function")
    ss = StateSpace.from_text(head)
    assert ss.state_labels == ("p.L_F", "q.C_F")
    assert tf.startswith(" u_in -> effort.b5")


def test_linearize_index_checks():
    code, _, err = run("linearize", CORPUS_DIR / "filter_chopper.bg", "--output", "7")
    assert code == 2 and "out of range" in err
    code, _, _ = run("linearize", CORPUS_DIR / "filter_chopper.bg", "--input", "-1")
    assert code == 2


def test_render_dot(tmp_path):
    dest = tmp_path / "lift.dot"
    code, _, _ = run("render", CORPUS_DIR / "lift_a_load.bg", "-o", dest)
    text = dest.read_text()
    assert code == 0 and text.startswith("digraph") and text.rstrip().endswith("}")


def test_models_list_and_export(tmp_path):
    code, out, _ = run("models")
    assert code == 0 and out.split() == list(CORPUS)
    dest = tmp_path / "solenoid.bg"
    assert run("models", "solenoid", "-o", dest)[0] == 0
    assert isomorphic(parse(dest.read_text()), build("solenoid"))
    assert run("models", "nope")[0] == 2


def test_console_entry_point():
    proc = subprocess.run(
        [sys.executable, "-m", "bondsim.cli", "check", str(CORPUS_DIR / "solenoid.bg")],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0
    assert "states: 3, differential: 0" in proc.stdout
