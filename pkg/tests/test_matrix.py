import copy
import json

import numpy as np
import pytest

from wmforge.errors import ConfigError
from wmforge.evaluation import ExperimentConfig, aggregate, run_matrix
from wmforge.evaluation.config import load_config_text
from wmforge.evaluation.covers import directory_covers, procedural_covers
from wmforge.evaluation.matrix import CSV_COLUMNS, RowResult, format_table, row_rng, rows_csv
from wmforge.io import save_image
from wmforge.presets import benchmark_model

BASE = {
    "models": {"bench": {}},
    "keys": {
        "gs": {"scheme": "gs", "seed": 1, "k": 16, "rho": 64},
        "gs64": {"scheme": "gs", "seed": 2, "k": 64, "rho": 16},
        "tr": {"scheme": "tr", "radius": 4, "channel": 0, "seed": 3},
    },
    "sampler": {"n_steps": 50},
    "attacks": {"pnp": {"lambda": 0.2}},
    "datasets": {"ten": {"seed": 5, "count": 10}, "three": {"seed": 6, "count": 3}},
    "experiment": {
        "master_seed": 11,
        "n_null": 200,
        "scenarios": [{"target": "bench", "watermark": "gs", "attack": "pnp", "dataset": "ten"}],
    },
}


def config(**experiment):
    doc = copy.deepcopy(BASE)
    doc["experiment"].update(experiment)
    return doc


@pytest.fixture(scope="module")
def pnp_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("pnp")
    return out, run_matrix(config(), out_dir=out)


def test_ten_rows_and_independent_aggregation(pnp_run):
    out, results = pnp_run
    (res,) = results
    assert len(res.rows) == 10 and [r.cover_id for r in res.rows] == list(range(10))
    doc = json.loads((out / "results.json").read_text())
    rows = doc["scenarios"][0]["rows"]
    agg = doc["scenarios"][0]["aggregates"]
    assert agg["n"] == 10
    assert agg["bit_acc_mean"] == pytest.approx(sum(r["bit_acc"] for r in rows) / 10, abs=1e-15)
    assert agg["detection_rate"] == sum(1 for r in rows if r["detected"]) / 10
    assert agg["psnr_mean"] == pytest.approx(sum(r["psnr_db"] for r in rows) / 10, abs=1e-12)
    assert agg["ssim_mean"] == pytest.approx(sum(r["ssim"] for r in rows) / 10, abs=1e-15)
    walls = sorted(r["wall_s"] for r in rows)
    assert agg["wall_median_s"] == pytest.approx((walls[4] + walls[5]) / 2)
    assert agg["attribution_rate"] is None and agg["distance_mean"] is None
    assert 0 <= agg["detection_rate"] <= 1


def test_csv_report(pnp_run):
    out, results = pnp_run
    lines = (out / "results.csv").read_text().splitlines()
    assert lines[0].split(",") == list(CSV_COLUMNS)
    assert len(lines) == 11
    assert all(line.startswith("bench/gs/pnp/ten,") for line in lines[1:])


def test_rows_match_direct_computation(pnp_run):
    # recompute one row outside the runner
    from wmforge.forgery import ForgeryConfig, pnp_forge
    from wmforge.gaussian_shading import GsKey, gs_bit_accuracy, gs_embed

    _, results = pnp_run
    model = benchmark_model()
    key = GsKey.random(np.random.default_rng(1), 16, 64)
    covers = procedural_covers(model.codec, 10, 5)
    i = 3
    seed = int(row_rng(11, i).integers(2**63))
    x_w = model.generate(gs_embed(key, seed, model.shape))
    forged, _ = pnp_forge(model, x_w, covers[i], ForgeryConfig(cover_guidance=0.2))
    assert results[0].rows[i].bit_acc == gs_bit_accuracy(key, model.recover_latent(forged))


def test_no_attack_detects_everything(tmp_path):
    sc = [
        {"watermark": "gs", "attack": "none", "dataset": "ten"},
        {"watermark": "tr", "attack": "none", "dataset": "three"},
    ]
    res = run_matrix(config(scenarios=sc), out_dir=tmp_path)
    assert res[0].aggregates["detection_rate"] == 1.0
    assert res[0].aggregates["bit_acc_mean"] == 1.0
    assert res[0].rows[0].psnr_db is None
    assert res[1].aggregates["detection_rate"] == 1.0
    assert all(r.distance is not None and 0 < r.p_value <= 1 for r in res[1].rows)
    assert len(list((tmp_path / "cache").glob("tr_null_*.csv"))) == 1


def test_attribution_rows(tmp_path):
    sc = [{"watermark": "gs64", "attack": "none", "dataset": "three"}]
    (res,) = run_matrix(config(scenarios=sc, attribution_users=50), out_dir=tmp_path, write=False)
    assert all(r.attributed and r.attributed_user == r.true_user for r in res.rows)
    assert res.aggregates["attribution_rate"] == 1.0
    assert not tmp_path.joinpath("results.csv").exists()


def test_deterministic_across_jobs(tmp_path):
    sc = [
        {"watermark": "gs", "attack": "pnp", "dataset": "three"},
        {"watermark": "tr", "attack": "pnp", "dataset": "three"},
    ]
    a = run_matrix(config(scenarios=sc), out_dir=tmp_path / "a", jobs=1)
    b = run_matrix(config(scenarios=sc), out_dir=tmp_path / "b", jobs=3)
    assert rows_csv(a, timing=False) == rows_csv(b, timing=False)
    c = run_matrix(config(scenarios=sc), out_dir=tmp_path / "c", seed=12)
    assert rows_csv(a, timing=False) != rows_csv(c, timing=False)


def test_empty_cover_set_writes_nothing(tmp_path):
    doc = config(scenarios=[{"watermark": "gs", "dataset": "empty"}])
    doc["datasets"]["empty"] = {"seed": 0, "count": 0}
    with pytest.raises(ConfigError, match="no covers"):
        run_matrix(doc, out_dir=tmp_path / "out")
    assert not (tmp_path / "out").exists()
    (tmp_path / "covers").mkdir()
    doc["datasets"]["empty"] = {"directory": str(tmp_path / "covers")}
    with pytest.raises(ConfigError):
        run_matrix(doc, out_dir=tmp_path / "out")
    assert not (tmp_path / "out").exists()


def test_directory_covers(tmp_path):
    model = benchmark_model()
    imgs = procedural_covers(model.codec, 2, 0)
    for i, x in enumerate(imgs):
        save_image(tmp_path / f"c{i}", x)
    assert np.array_equal(directory_covers(tmp_path, model.shape), imgs)
    with pytest.raises(ConfigError):
        directory_covers(tmp_path, (3, 16, 16))


@pytest.mark.parametrize(
    "field,value,needle",
    [
        ("watermark", "missing", "missing"),
        ("attack", "ghost", "ghost"),
        ("dataset", "nowhere", "nowhere"),
        ("target", "other", "other"),
    ],
)
def test_unknown_scenario_component(field, value, needle, tmp_path):
    sc = {"watermark": "gs", "attack": "none", "dataset": "ten", field: value}
    with pytest.raises(ConfigError, match=needle):
        run_matrix(config(scenarios=[sc]), out_dir=tmp_path)
    assert not any(tmp_path.iterdir())


def test_config_errors():
    with pytest.raises(ConfigError, match="byte offset 11"):
        load_config_text('{"models": ]}')
    # offsets count UTF-8 bytes, not characters
    with pytest.raises(ConfigError, match="byte offset 7"):
        load_config_text(b'{"\xc3\xa9": ]}')
    with pytest.raises(ConfigError, match="unknown config block"):
        ExperimentConfig({"modles": {}})
    with pytest.raises(ConfigError, match="unknown attack type"):
        ExperimentConfig({"attacks": {"x": {"type": "blur"}}})
    with pytest.raises(ConfigError):
        ExperimentConfig(BASE).key("missing")
    with pytest.raises(ConfigError):
        ExperimentConfig({**BASE, "experiment": {"master_seed": 1, "scenarios": []}}).experiment()


def test_aggregate_handles_missing_fields():
    rows = [
        RowResult("s", "t", "w", "a", 0, bit_acc=1.0, detected=True, attributed=True, wall_s=1.0),
        RowResult("s", "t", "w", "a", 1, bit_acc=0.5, detected=False, attributed=None, wall_s=3.0),
    ]
    agg = aggregate(rows)
    assert agg["bit_acc_mean"] == 0.75 and agg["detection_rate"] == 0.5
    assert agg["attribution_rate"] == 1.0 and agg["psnr_mean"] is None
    assert agg["wall_median_s"] == 2.0


def test_format_table(pnp_run):
    out, _ = pnp_run
    text = format_table(json.loads((out / "results.json").read_text()))
    assert "bench/gs/pnp/ten" in text and "BitAcc" in text
