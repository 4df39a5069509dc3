import json

from moeplan.cli import main

from conftest import tiny_arch


def run(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def test_describe_total_row(capsys):
    code, out, _ = run(capsys, "describe", "--model", "deepseek-v3")
    assert code == 0
    total_line = out.rstrip().splitlines()[-1]
    assert "671,026,522,112" in total_line
    assert " 671 " in f" {total_line} "
    assert total_line.split()[-1] == "1250"


def test_describe_json(capsys):
    code, out, _ = run(capsys, "describe", "--model", "deepseek-v3", "--format", "json")
    assert code == 0
    doc = json.loads(out)
    assert doc["model_total"] == 671_026_522_112


def test_stages_table(capsys):
    code, out, _ = run(capsys, "stages", "--model", "deepseek-v3")
    assert code == 0
    assert "46,029,152,256" in out
    assert "12,433,967,104" in out


def test_zero_table_rows(capsys):
    code, out, _ = run(
        capsys,
        "zero-table",
        "--model",
        "deepseek-v3",
        "--parallel",
        "dp=32,tp=2,pp=16,ep=8,etp=1",
    )
    assert code == 0
    for value in ("81.54", "40.46", "19.92", "9.66"):
        assert value in out


def test_plan_defaults_reproduce_case_study(capsys):
    code, out, _ = run(capsys, "plan", "--model", "deepseek-v3", "--format", "json")
    assert code == 0
    doc = json.loads(out)
    assert doc["parallel"] == {
        "dp": 32, "tp": 2, "pp": 16, "ep": 8, "etp": 1, "edp": 8, "sp": "on", "cp": 1,
    }
    assert doc["components"]["grand_total"] == 24_971_900_519


def test_plan_individual_flags_override_compact(capsys):
    code, out, _ = run(
        capsys,
        "plan",
        "--model",
        "deepseek-v3",
        "--parallel",
        "dp=32,tp=2,pp=16,ep=8,etp=1",
        "--ep",
        "16",
        "--format",
        "json",
    )
    assert code == 0
    doc = json.loads(out)
    assert doc["parallel"]["ep"] == 16
    assert doc["parallel"]["edp"] == 4


def test_activation_values(capsys):
    code, out, _ = run(capsys, "activation", "--model", "deepseek-v3")
    assert code == 0
    assert "23,177,723,904" in out
    assert "1,493,434,368" in out
    assert "235,143,168" in out


def test_sweep_constrained(capsys):
    code, out, _ = run(
        capsys,
        "sweep",
        "--model",
        "deepseek-v3",
        "--world-size",
        "1024",
        "--fix",
        "pp=16",
        "--fix",
        "tp=2",
        "--fix",
        "ep=8",
        "--fix",
        "etp=1",
        "--format",
        "json",
    )
    assert code == 0
    doc = json.loads(out)
    assert len(doc["results"]) == 1
    assert doc["results"][0]["fits"] is True
    assert doc["results"][0]["dp"] == 32


def test_sweep_grid_mode(capsys):
    code, out, _ = run(
        capsys,
        "sweep",
        "--model",
        "deepseek-v3",
        "--world-size",
        "1024",
        "--fix",
        "pp=16",
        "--fix",
        "tp=2",
        "--fix",
        "ep=8",
        "--fix",
        "etp=1",
        "--grid",
        "micro_batch=1,2",
        "--format",
        "json",
    )
    assert code == 0
    doc = json.loads(out)
    assert [s["training"]["micro_batch"] for s in doc["sweeps"]] == [1, 2]
    assert all(len(s["results"]) == 1 for s in doc["sweeps"])


def test_oracle_dump(capsys):
    code, out, _ = run(capsys, "oracle-dump", "--model", "deepseek-v3", "--stage", "15")
    assert code == 0
    lines = out.strip().splitlines()
    assert lines[0] == "name,shape,bytes,placement"
    assert any("layer60.head" in line for line in lines)


def test_validation_error_exit_code_1(capsys):
    code, _, err = run(
        capsys, "plan", "--model", "deepseek-v3", "--parallel", "dp=32,tp=2,pp=16,ep=7"
    )
    assert code == 1
    assert "edp" in err


def test_unknown_model_exit_code_1(capsys):
    code, _, err = run(capsys, "describe", "--model", "deepseek-v2")
    assert code == 1
    assert "deepseek-v3" in err


def test_usage_error_exit_code_2(capsys):
    code, _, _ = run(capsys, "plan", "--model", "deepseek-v3", "--bogus-flag")
    assert code == 2


def test_help_exit_code_0(capsys):
    code, out, _ = run(capsys, "plan", "--help")
    assert code == 0
    assert "usage" in out


def test_out_writes_file(tmp_path, capsys):
    target = tmp_path / "report.json"
    code, out, _ = run(
        capsys,
        "plan",
        "--model",
        "deepseek-v3",
        "--format",
        "json",
        "--out",
        str(target),
    )
    assert code == 0
    assert out == ""
    doc = json.loads(target.read_text())
    assert doc["components"]["grand_total"] == 24_971_900_519


def test_model_from_file_and_search_path(tmp_path, capsys, monkeypatch):
    arch = tiny_arch(num_dense_layers=0)
    path = tmp_path / "tiny.json"
    path.write_text(arch.to_json(), encoding="utf-8")

    code, out, _ = run(capsys, "describe", "--model", str(path), "--format", "json")
    assert code == 0
    assert json.loads(out)["model_total"] > 0

    monkeypatch.setenv("MOEPLAN_MODEL_PATH", str(tmp_path))
    code, out2, _ = run(capsys, "describe", "--model", "tiny", "--format", "json")
    assert code == 0
    assert out2 == out


def test_machine_output_byte_identical(capsys):
    _, first, _ = run(capsys, "plan", "--model", "deepseek-v3", "--format", "json")
    _, second, _ = run(capsys, "plan", "--model", "deepseek-v3", "--format", "json")
    assert first == second
    _, csv_a, _ = run(capsys, "describe", "--model", "deepseek-v3", "--format", "csv")
    _, csv_b, _ = run(capsys, "describe", "--model", "deepseek-v3", "--format", "csv")
    assert csv_a == csv_b
