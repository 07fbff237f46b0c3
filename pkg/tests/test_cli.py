import json
import subprocess
import sys

import pytest

from turbos.cli import main
from turbos.formats import save_config, save_weights
from turbos.model import TINY, TURBOS_128, ModelConfig, build_model


@pytest.fixture
def tiny_cfg(tmp_path):
    path = tmp_path / "tiny.json"
    save_config(TINY, path)
    return path


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_generate_greedy_deterministic(capsys, tiny_cfg):
    a = run(capsys, "generate", "--config", str(tiny_cfg), "--prompt", "hello", "--max-new", "6", "--greedy")
    b = run(capsys, "generate", "--config", str(tiny_cfg), "--prompt", "hello", "--max-new", "6", "--greedy")
    assert a[0] == 0 and a == b
    assert a[1].startswith("tokens: ") and len(a[1].splitlines()[0].split()) == 7


def test_generate_low_temperature_equals_greedy(capsys, tiny_cfg):
    greedy = run(capsys, "generate", "--config", str(tiny_cfg), "--prompt", "ab", "--max-new", "8", "--greedy")
    cold = run(capsys, "generate", "--config", str(tiny_cfg), "--prompt", "ab", "--max-new", "8", "--temp", "1e-6")
    assert greedy[1] == cold[1]


def test_generate_with_weights(capsys, tiny_cfg, tmp_path):
    w = tmp_path / "w.hyts"
    save_weights(build_model(TINY), w)
    with_w = run(capsys, "generate", "--config", str(tiny_cfg), "--weights", str(w), "--max-new", "4")
    without = run(capsys, "generate", "--config", str(tiny_cfg), "--max-new", "4")
    assert with_w == without


def test_generate_error_codes(capsys, tiny_cfg, tmp_path):
    code, _, err = run(capsys, "generate", "--config", str(tmp_path / "nope.json"))
    assert code == 2 and "nope.json" in err
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"n_q_heads": 4, "n_kv_heads": 3}))
    code, _, err = run(capsys, "generate", "--config", str(bad))
    assert code == 2
    junk = tmp_path / "junk.hyts"
    junk.write_bytes(b"NOPE" * 10)
    code, _, err = run(capsys, "generate", "--config", str(tiny_cfg), "--weights", str(junk))
    assert code == 3 and "magic" in err
    other = tmp_path / "other.hyts"
    save_weights(build_model(ModelConfig(d_model=32)), other)
    code, _, err = run(capsys, "generate", "--config", str(tiny_cfg), "--weights", str(other))
    assert code == 3 and "embed" in err
    code, _, _ = run(capsys, "generate", "--config", str(tiny_cfg), "--temp", "0")
    assert code == 2
    with pytest.raises(SystemExit) as e:
        main(["generate", "--config", str(tiny_cfg), "--greedy", "--temp", "0.5"])
    assert e.value.code == 2


def test_verify_ssd_suite(capsys):
    code, out, _ = run(capsys, "verify", "--suite", "ssd", "--trials", "2")
    assert code == 0
    line = next(l for l in out.splitlines() if l.startswith("CHECK chunked-vs-naive "))
    assert line.split()[2] == "pass" and float(line.split()[3]) <= 1e-4


def test_verify_unknown_suite():
    with pytest.raises(SystemExit) as e:
        main(["verify", "--suite", "bogus"])
    assert e.value.code == 2


def test_bench_flops_only_is_stable(capsys, tmp_path):
    path = tmp_path / "big.json"
    save_config(TURBOS_128, path)
    a = run(capsys, "bench", "--config", str(path), "--seq-lens", "4096,8192", "--flops-only")
    b = run(capsys, "bench", "--config", str(path), "--seq-lens", "4096,8192", "--flops-only")
    assert a == b and a[0] == 0
    rows = [l.split() for l in a[1].splitlines()[1:]]
    m = {int(r[1]): int(r[4]) for r in rows if r[2] == "M"}
    assert m[8192] == 2 * m[4096]
    assert {r[3] for r in rows if r[2] == "A"} == {"7"}


def test_bench_timed_and_bad_flags(capsys, tiny_cfg):
    code, out, _ = run(capsys, "bench", "--config", str(tiny_cfg), "--seq-lens", "8", "--mode", "decode")
    assert code == 0 and "wall_ms" in out.splitlines()[0]
    with pytest.raises(SystemExit) as e:
        main(["bench", "--config", str(tiny_cfg), "--seq-lens", "8,x"])
    assert e.value.code == 2


def test_cpsim_counts_and_trace(capsys, tmp_path):
    code, out, _ = run(capsys, "cpsim", "--ranks", "4", "--seq-len", "64", "--paradigm", "sequential")
    assert code == 0 and "StateForward=3" in out
    trace = tmp_path / "trace.txt"
    code, out, _ = run(capsys, "cpsim", "--ranks", "4", "--seq-len", "128", "--trace", str(trace))
    assert code == 0 and out.count(" pass") == 2
    lines = trace.read_text().splitlines()
    assert len(lines) == 5 and lines[0] == "StateForward 0 1 4x8x16"


def test_cpsim_single_rank_and_bad_plan(capsys):
    code, out, _ = run(capsys, "cpsim", "--ranks", "1", "--seq-len", "16")
    assert code == 0 and "StateForward=0" in out and "AllGatherDecayChunk=1" in out
    code, _, _ = run(capsys, "cpsim", "--ranks", "8", "--seq-len", "4")
    assert code == 2


def test_module_entry_point(tiny_cfg):
    proc = subprocess.run(
        [sys.executable, "-m", "turbos", "generate", "--config", str(tiny_cfg), "--max-new", "2"],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0 and proc.stdout.startswith("tokens: ")
