import json
import subprocess
import sys

import pytest

from convshield.cli import main


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_bound_gamma(capsys):
    code, out, _ = run(capsys, "bound", "--pool", "avg", "--height", "8", "--width", "8",
                       "--a", "-0.1", "--b", "0.1", "--p", "0.05")
    assert code == 0
    rec = json.loads(out)
    assert set(rec) == {"pooling", "H", "W", "a", "b", "gamma", "p", "saturated"}
    assert rec["gamma"] == pytest.approx(0.03395253789352637, rel=1e-11)


def test_bound_csv(capsys):
    code, out, _ = run(capsys, "bound", "--pool", "max", "--height", "4", "--width", "4",
                       "--a", "-0.1", "--b", "0.1", "--gamma", "0.001", "--format", "csv")
    assert code == 0
    header, row = out.strip().splitlines()
    assert header == "pooling,H,W,a,b,gamma,p,saturated"
    assert row.endswith(",1,True")


@pytest.mark.parametrize("argv", [
    ["bound", "--pool", "avg", "--height", "8", "--width", "8", "--a", "0.1", "--b", "-0.1", "--p", "0.05"],
    ["bound", "--pool", "avg", "--height", "8", "--width", "8", "--a", "-0.1", "--b", "0.1"],
    ["bound", "--pool", "median", "--height", "8", "--width", "8", "--a", "-0.1", "--b", "0.1", "--p", "0.1"],
    ["dims", "--preset", "lenet"],
    ["dims", "--strides", "1,2"],
    ["rewrite", "--preset", "resnet18"],
    ["redundancy", "--scale", "2", "--kernel", "9", "--len", "2"],
    ["simulate", "--trials", "0"],
    ["nonsense"],
])
def test_usage_errors_exit_2(capsys, argv):
    code, _, err = run(capsys, *argv)
    assert code == 2
    assert err


def test_malformed_arch_json(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text('{"layers": [{"type": "conv", "in": 3}]}')
    assert run(capsys, "rf", "--arch", str(path))[0] == 2
    assert run(capsys, "rf", "--arch", str(tmp_path / "missing.json"))[0] == 2


def test_rewrite_then_dims(tmp_path, capsys):
    path = tmp_path / "r.json"
    assert run(capsys, "rewrite", "--preset", "resnet18", "--strides", "1,1,2,2", "--out", str(path))[0] == 0
    code, out, _ = run(capsys, "dims", "--arch", str(path), "--input", "32")
    assert code == 0
    doc = json.loads(out)
    assert doc["final_feature_map"] == [512, 8, 8]
    assert doc["stride_config"] == "1-1-2-2"


def test_rf_and_cost(capsys):
    code, out, _ = run(capsys, "rf", "--preset", "resnet18", "--strides", "1-1-1-2")
    assert code == 0 and json.loads(out)["global_layer"] == 15
    _, base, _ = run(capsys, "cost", "--preset", "resnet18")
    _, up, _ = run(capsys, "cost", "--preset", "resnet18", "--upsample", "2")
    assert json.loads(base)["totals"]["flops"] < json.loads(up)["totals"]["flops"]


def test_redundancy(capsys):
    code, out, _ = run(capsys, "redundancy", "--scale", "3", "--kernel", "2", "--len", "2")
    assert code == 0
    doc = json.loads(out)
    assert doc["apparent_dims"] == 5 and doc["distinct_dims"] == 3
    assert doc["duplicate_groups"] == [[1, 2], [4, 5]]


SIM = ["simulate", "--trials", "40", "--sizes", "8,12", "--seed", "3"]


def test_simulate_thread_count_byte_identical(tmp_path, capsys):
    outs = []
    for threads in ("1", "8"):
        path = tmp_path / f"t{threads}.json"
        assert run(capsys, *SIM, "--threads", threads, "--out", str(path))[0] == 0
        outs.append(path.read_bytes())
    assert outs[0] == outs[1]


def test_simulate_json_and_csv_agree(tmp_path, capsys):
    _, js, _ = run(capsys, *SIM)
    _, csv, _ = run(capsys, *SIM, "--format", "csv")
    doc = json.loads(js)
    rows = {tuple(r.split(",")[:3]): float(r.split(",")[3]) for r in csv.strip().splitlines()[1:]}
    for entry in doc["layers"]:
        size = "x".join(map(str, entry["input_size"]))
        assert rows[(size, f"conv{entry['layer']}", "median")] == pytest.approx(entry["median"], rel=1e-5)
    for entry in doc["pooled"]:
        size = "x".join(map(str, entry["input_size"]))
        assert rows[(size, f"pooled_{entry['pooling']}", "max")] == pytest.approx(entry["max"], rel=1e-5)
        assert len(entry["samples"]) == 40


def test_invariance_and_lipschitz(capsys):
    code, out, _ = run(capsys, "invariance", "--preset", "toycnn", "--input", "8", "--inputs", "2",
                       "--trials", "5", "--epsilons", "0,0.1")
    assert code == 0
    assert json.loads(out)["rows"][0]["fraction_unchanged"] == 1.0
    code, out, _ = run(capsys, "lipschitz", "--preset", "toycnn", "--input", "8", "--probes", "4", "--pairs", "10")
    assert code == 0 and json.loads(out)["lower_bound"] > 0


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "convshield", "redundancy", "--scale", "3", "--kernel", "2",
                           "--len", "2", "--format", "csv"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert proc.stdout.startswith("# apparent_dims=5 distinct_dims=3")
