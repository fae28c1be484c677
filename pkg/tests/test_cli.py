"""
HLSIRM - End-to-end command tests
"""
import json

import pytest

import storage
from commands.context import (
    CHAIN_BIN,
    CLUSTERS_CSV,
    DATASET_CSV,
    DIAGNOSTICS_JSON,
    FIT_JSON,
    MAP_CSV,
    METRICS_JSON,
    PPC_CSV,
    SUMMARY_JSON,
    TRUTH_JSON,
)
from main import main


def write_config(tmp_path, **sections):
    document = {
        "seed": 3,
        "out": str(tmp_path / "out"),
        "simulate": {"groups": 2, "respondents_per_group": 6, "items": 8},
        "chain": {"iterations": 60, "burn_in": 30, "thin": 3},
        "fit": {"min_acceptance": 0.0, "max_acceptance": 1.0},
        "analyze": {"k_max": 3, "kmeans_restarts": 2, "ppc_replicates": 10},
    }
    for name, values in sections.items():
        document.setdefault(name, {}).update(values)
    path = tmp_path / "run.json"
    path.write_text(json.dumps(document))
    return str(path), tmp_path / "out"


@pytest.fixture
def fitted(tmp_path):
    config, out = write_config(tmp_path)
    assert main(["simulate", "--config", config]) == 0
    assert main(["fit", "--config", config]) == 0
    return config, out


def test_simulate_writes_dataset_and_truth(tmp_path):
    config, out = write_config(tmp_path)
    assert main(["simulate", "--config", config]) == 0

    lines = (out / DATASET_CSV).read_text().splitlines()
    assert lines[0].startswith("# hlsirm")
    assert lines[1] == "# K=2 N=12 p=8"
    truth = storage.load_truth(out / TRUTH_JSON)
    assert truth.group_sizes == [6, 6]
    assert storage.read_json(out / TRUTH_JSON)["item_ids"][0] == "I01"


def test_simulate_is_deterministic(tmp_path):
    config, out = write_config(tmp_path)
    main(["simulate", "--config", config])
    first = (out / DATASET_CSV).read_bytes()
    main(["simulate", "--config", config])
    assert (out / DATASET_CSV).read_bytes() == first

    main(["simulate", "--config", config, "--seed", "4"])
    assert (out / DATASET_CSV).read_bytes() != first


def test_separated_design_records_cones(tmp_path):
    config, out = write_config(tmp_path, simulate={"design": "separated", "item_cones": 2})
    assert main(["simulate", "--config", config]) == 0
    assert len(storage.read_json(out / TRUTH_JSON)["item_cones"]) == 8


def test_fit_reports_health(fitted):
    _, out = fitted
    report = storage.read_json(out / FIT_JSON)
    assert report["n_samples"] == 10
    assert report["health"]["ok"]
    assert len(storage.read_chain(out / CHAIN_BIN)) == 10


def test_fit_fails_health_check(tmp_path):
    config, _ = write_config(tmp_path, fit={"min_acceptance": 0.99, "max_acceptance": 1.0})
    main(["simulate", "--config", config])
    assert main(["fit", "--config", config]) == 2


def test_analyze_writes_artifacts(fitted, tmp_path):
    config, out = fitted
    covariates = tmp_path / "covariates.csv"
    covariates.write_text("group_id,region\nG01,north\nG02,south\n")
    config_path, _ = write_config(tmp_path, analyze={"covariates": str(covariates)})

    assert main(["analyze", "--config", config_path]) == 0
    for name in (SUMMARY_JSON, MAP_CSV, CLUSTERS_CSV, PPC_CSV, METRICS_JSON, DIAGNOSTICS_JSON):
        assert (out / name).exists()

    rows = storage.read_csv(out / MAP_CSV)
    assert len(rows) == 2 + 12 + 8
    assert set(rows.loc[rows["entity_type"] == "group", "region"]) == {"north", "south"}
    assert set(storage.read_csv(out / CLUSTERS_CSV)["k"]) == {2, 3}
    assert "skipped" in storage.read_json(out / DIAGNOSTICS_JSON)


def test_analyze_is_deterministic(fitted):
    config, out = fitted
    main(["analyze", "--config", config])
    first = {name: (out / name).read_bytes() for name in (SUMMARY_JSON, MAP_CSV, CLUSTERS_CSV, PPC_CSV, METRICS_JSON)}
    main(["analyze", "--config", config])
    for name, content in first.items():
        assert (out / name).read_bytes() == content


def test_missing_chain_is_an_error(tmp_path):
    config, out = write_config(tmp_path)
    main(["simulate", "--config", config])
    assert main(["analyze", "--config", config]) == 1


def test_invalid_config_is_an_error(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"chain": {"iterations": 5, "burn_in": 9}}))
    assert main(["simulate", "--config", str(path), "--out", str(tmp_path)]) == 1


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exit_info:
        main(["--version"])
    assert exit_info.value.code == 0
    assert "hlsirm" in capsys.readouterr().out
