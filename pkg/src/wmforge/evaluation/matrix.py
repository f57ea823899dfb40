"""Scenario-matrix runner: watermark, attack, detect, score, and report.

Every row (one cover under one scenario) gets its own generator seeded from
``(master_seed, row_index)``, so results do not depend on evaluation order
or on the number of worker threads.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from wmforge.errors import ConfigError, InfeasibleError
from wmforge.evaluation.config import ExperimentConfig, ExperimentSpec, Scenario, digest
from wmforge.evaluation.covers import directory_covers, procedural_covers
from wmforge.evaluation.metrics import calibrate, psnr, ssim
from wmforge.forgery import estimate_watermark_latent, imprint, pnp_forge, reprompt
from wmforge.gaussian_shading import (
    GsKey,
    UserRegistry,
    binomial_upper_tail,
    gs_bit_accuracy,
    gs_embed,
    gs_threshold,
)
from wmforge.io import load_null_table, save_null_table
from wmforge.pipeline import DiffusionModel
from wmforge.tree_ring import TrKey, tr_distance, tr_embed, tr_pvalue

log = logging.getLogger(__name__)

CSV_COLUMNS = (
    "scenario", "target", "watermark", "attack", "cover_id", "bit_acc", "distance",
    "p_value", "detected", "attributed", "psnr_db", "ssim", "wall_s",
)
TIMING_COLUMNS = ("wall_s",)
_ATTR_SALT = 0xA7721B
_NULL_BATCH = 500


@dataclass
class RowResult:
    scenario: str
    target: str
    watermark: str
    attack: str
    cover_id: int
    bit_acc: float | None = None
    distance: float | None = None
    p_value: float | None = None
    detected: bool = False
    attributed: bool | None = None
    attributed_user: int | None = None
    true_user: int | None = None
    psnr_db: float | None = None
    ssim: float | None = None
    wall_s: float = 0.0


@dataclass
class ExperimentResult:
    scenario: Scenario
    rows: list[RowResult]
    threshold: float | None = None
    aggregates: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not self.aggregates:
            self.aggregates = aggregate(self.rows)


def _mean(vals) -> float | None:
    vals = [v for v in vals if v is not None]
    return float(np.mean(vals)) if vals else None


def aggregate(rows: list[RowResult]) -> dict[str, Any]:
    """Scenario summary: Bit Acc. mean, Dec. and Attr. rates, metric means, timing."""
    n = len(rows)
    attr = [r.attributed for r in rows if r.attributed is not None]
    walls = [r.wall_s for r in rows]
    return {
        "n": n,
        "bit_acc_mean": _mean(r.bit_acc for r in rows),
        "detection_rate": sum(r.detected for r in rows) / n if n else None,
        "attribution_rate": sum(attr) / len(attr) if attr else None,
        "distance_mean": _mean(r.distance for r in rows),
        "p_value_mean": _mean(r.p_value for r in rows),
        "psnr_mean": _mean(r.psnr_db for r in rows),
        "ssim_mean": _mean(r.ssim for r in rows),
        "wall_median_s": float(np.median(walls)) if walls else None,
        "wall_mean_s": float(np.mean(walls)) if walls else None,
    }


def row_rng(master_seed: int, row_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([master_seed, row_index]))


# -- null distributions -------------------------------------------------

def tr_null_distances(model: DiffusionModel, key: TrKey, n: int, seed: int) -> np.ndarray:
    """Sorted Tree-Ring distances of ``n`` clean images pushed through the owner's pipeline."""
    rng = np.random.default_rng(seed)
    out = []
    for lo in range(0, n, _NULL_BATCH):
        z = rng.standard_normal((min(_NULL_BATCH, n - lo), *model.shape))
        out.append(tr_distance(key, model.recover_latent(model.generate(z))))
    return np.sort(np.concatenate(out)) if out else np.zeros(0)


def _seed_from(hexdigest: str) -> int:
    return int(hexdigest[:16], 16)


def cached_null_table(
    cfg: ExperimentConfig, model_name: str, key_name: str, n: int, cache_dir: Path | None
) -> np.ndarray:
    """Null table keyed by (model hash, key hash, n); read from/written to ``cache_dir``."""
    model = cfg.model(model_name)
    key = cfg.key(key_name, model)
    tag = digest({"model": cfg.model_fingerprint(model_name), "key": key.to_json(), "n": n})
    path = cache_dir / f"tr_null_{tag[:24]}.csv" if cache_dir is not None else None
    if path is not None and path.exists():
        table = load_null_table(path)
        if table.size == n:
            return table
    table = tr_null_distances(model, key, n, _seed_from(tag))
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        save_null_table(path, table)
    return table


# -- one row -------------------------------------------------------------

@dataclass
class _ScenarioContext:
    scenario: Scenario
    target: DiffusionModel
    key: GsKey | TrKey
    attack: Any
    proxy: DiffusionModel | None
    regen: DiffusionModel | None
    covers: np.ndarray
    gs_tau: float | None = None
    tr_threshold: float | None = None
    null_table: np.ndarray | None = None
    registry: UserRegistry | None = None
    true_user: int | None = None


def _run_attack(ctx: _ScenarioContext, cfg: ExperimentConfig, x_w: np.ndarray, x_c: np.ndarray) -> tuple[np.ndarray, bool]:
    """Attack output and whether it is meant to resemble the cover."""
    a = ctx.attack
    if a.type == "none":
        return x_w, False
    if a.type == "pnp":
        forged, _ = pnp_forge(ctx.proxy, x_w, x_c, a.forgery_config(cfg.sampler), regen=ctx.regen)
        return forged, True
    fcfg = a.forgery_config(cfg.sampler)
    z_hat = estimate_watermark_latent(ctx.proxy, x_w, fcfg)
    if a.type == "imprint":
        return imprint(ctx.proxy, x_c, z_hat, a.imprint_config(cfg.sampler)).image, True
    if a.type == "reprompt":
        cond = a.params.get("condition")
        if cond is None:
            raise ConfigError(f"attacks.{a.name}: reprompt needs a condition")
        steps = int(a.params.get("n_steps", cfg.sampler.n_steps))
        return reprompt(ctx.proxy, z_hat, cond, steps), False
    raise ConfigError(f"unknown attack type {a.type!r}")


def _evaluate_row(ctx: _ScenarioContext, cfg: ExperimentConfig, spec: ExperimentSpec, cover_id: int, row_index: int) -> RowResult:
    sc = ctx.scenario
    rng = row_rng(spec.master_seed, row_index)
    wm_seed = int(rng.integers(2**63))
    target = ctx.target
    if isinstance(ctx.key, GsKey):
        z_w = gs_embed(ctx.key, wm_seed, target.shape)
    else:
        z_w = tr_embed(ctx.key, wm_seed, target.shape)
    x_w = target.generate(z_w)
    x_c = ctx.covers[cover_id]
    t0 = time.perf_counter()
    x_out, vs_cover = _run_attack(ctx, cfg, x_w, x_c)
    wall = time.perf_counter() - t0

    row = RowResult(sc.id, sc.target, sc.watermark, sc.attack, cover_id, wall_s=wall)
    z_hat = target.recover_latent(x_out)
    if isinstance(ctx.key, GsKey):
        acc = float(gs_bit_accuracy(ctx.key, z_hat))
        correct = int(round(acc * ctx.key.k))
        row.bit_acc = acc
        row.p_value = float(binomial_upper_tail(ctx.key.k, correct))
        row.detected = acc > ctx.gs_tau
        if ctx.registry is not None:
            who = ctx.registry.attribute(z_hat, spec.attribution_fpr)
            row.attributed_user = who
            row.true_user = ctx.true_user
            row.attributed = who == ctx.true_user
    else:
        d = float(tr_distance(ctx.key, z_hat))
        row.distance = d
        row.p_value = float(tr_pvalue(d, ctx.null_table))
        row.detected = d <= ctx.tr_threshold
    if vs_cover:
        row.psnr_db = psnr(x_out, x_c)
        row.ssim = ssim(x_out, x_c)
    return row


def _load_covers(cfg: ExperimentConfig, name: str, target: DiffusionModel) -> np.ndarray:
    ds = cfg.dataset(name)
    if ds.directory is not None:
        covers = directory_covers(ds.directory, target.shape)
    else:
        covers = procedural_covers(target.codec, ds.count, ds.seed)
    if len(covers) == 0:
        raise ConfigError(f"dataset {name!r} contains no covers")
    return covers


def _registry(key: GsKey, n_users: int, master_seed: int) -> tuple[UserRegistry, int]:
    rng = np.random.default_rng(np.random.SeedSequence([master_seed, _ATTR_SALT]))
    true_user = int(rng.integers(n_users))
    keys = [GsKey.random(rng, key.k, key.rho, user_id=i) for i in range(n_users)]
    keys[true_user] = GsKey(key.cipher_key, key.nonce, key.message, key.rho, user_id=true_user)
    return UserRegistry(keys), true_user


def _prepare(cfg: ExperimentConfig, spec: ExperimentSpec, sc: Scenario, cache_dir: Path | None) -> _ScenarioContext:
    target = cfg.model(sc.target)
    key = cfg.key(sc.watermark, target)
    key.check_latent(target.shape)
    attack = cfg.attack(sc.attack)
    proxy = regen = None
    if attack.type != "none":
        proxy = cfg.model(attack.proxy_name(sc.target))
        regen = cfg.model(attack.params["regen"]) if attack.params.get("regen") else None
    ctx = _ScenarioContext(sc, target, key, attack, proxy, regen, _load_covers(cfg, sc.dataset, target))
    if isinstance(key, GsKey):
        ctx.gs_tau = gs_threshold(key.k, spec.gs_fpr)
        if spec.attribution_users > 0:
            ctx.registry, ctx.true_user = _registry(key, spec.attribution_users, spec.master_seed)
            try:
                gs_threshold(key.k, spec.attribution_fpr / spec.attribution_users)
            except InfeasibleError:
                log.warning("%s: %d-bit messages cannot reach the per-user FPR; nobody will be attributed", sc.id, key.k)
    else:
        ctx.null_table = cached_null_table(cfg, sc.target, sc.watermark, spec.n_null, cache_dir)
        ctx.tr_threshold = calibrate(ctx.null_table, spec.tr_fpr, "less")
    return ctx


def run_matrix(
    config: Mapping | ExperimentConfig,
    out_dir: str | Path | None = None,
    jobs: int = 1,
    seed: int | None = None,
    write: bool = True,
) -> list[ExperimentResult]:
    """Evaluate every scenario over its cover set and write results.csv/results.json.

    Nothing is written unless every scenario resolves and every row succeeds.
    """
    cfg = config if isinstance(config, ExperimentConfig) else ExperimentConfig(config)
    spec = cfg.experiment(seed_override=seed, out_override=str(out_dir) if out_dir is not None else None)
    out = Path(spec.output_dir)
    cache_dir = out / "cache" if write else None
    contexts = [_prepare(cfg, spec, sc, cache_dir) for sc in spec.scenarios]

    tasks = []
    for ctx in contexts:
        for cover_id in range(len(ctx.covers)):
            tasks.append((ctx, cover_id, len(tasks)))
    log.info("running %d rows over %d scenarios", len(tasks), len(contexts))

    def work(task):
        ctx, cover_id, row_index = task
        return _evaluate_row(ctx, cfg, spec, cover_id, row_index)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(work, tasks))
    else:
        rows = [work(t) for t in tasks]

    results, pos = [], 0
    for ctx in contexts:
        n = len(ctx.covers)
        thr = ctx.gs_tau if ctx.gs_tau is not None else ctx.tr_threshold
        results.append(ExperimentResult(ctx.scenario, rows[pos : pos + n], thr))
        pos += n
    if write:
        write_reports(results, out, spec)
    return results


# -- reports -------------------------------------------------------------

def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def rows_csv(results: list[ExperimentResult], timing: bool = True) -> str:
    cols = [c for c in CSV_COLUMNS if timing or c not in TIMING_COLUMNS]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for res in results:
        for r in res.rows:
            d = asdict(r)
            w.writerow([_fmt(d[c]) for c in cols])
    return buf.getvalue()


def _jsonable(v):
    if isinstance(v, float):
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        if math.isnan(v):
            return None
        return v
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.generic):
        return _jsonable(v.item())
    return v


def results_json(results: list[ExperimentResult], spec: ExperimentSpec | None = None) -> dict:
    doc = {
        "master_seed": spec.master_seed if spec else None,
        "scenarios": [
            {
                "id": res.scenario.id,
                **asdict(res.scenario),
                "threshold": res.threshold,
                "aggregates": res.aggregates,
                "rows": [asdict(r) for r in res.rows],
            }
            for res in results
        ],
    }
    return _jsonable(doc)


def write_reports(results: list[ExperimentResult], out: Path, spec: ExperimentSpec | None = None) -> tuple[Path, Path]:
    out.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = out / "results.csv", out / "results.json"
    csv_path.write_text(rows_csv(results))
    json_path.write_text(json.dumps(results_json(results, spec), indent=2) + "\n")
    return csv_path, json_path


def format_table(doc: Mapping) -> str:
    """Plain-text summary of a results.json document, one line per scenario."""
    head = f"{'scenario':<40} {'n':>4} {'BitAcc':>7} {'Dec.':>6} {'Attr.':>6} {'p':>8} {'PSNR':>7} {'SSIM':>6} {'t_med':>8}"
    lines = [head, "-" * len(head)]

    def f(v, spec):
        if v is None:
            return "-"
        if isinstance(v, str):
            return v
        return format(v, spec)

    for s in doc.get("scenarios", []):
        a = s["aggregates"]
        lines.append(
            f"{s['id']:<40} {a['n']:>4} {f(a['bit_acc_mean'], '.3f'):>7} {f(a['detection_rate'], '.3f'):>6} "
            f"{f(a['attribution_rate'], '.3f'):>6} {f(a['p_value_mean'], '.2e'):>8} {f(a['psnr_mean'], '.2f'):>7} "
            f"{f(a['ssim_mean'], '.3f'):>6} {f(a['wall_median_s'], '.4f'):>8}"
        )
    return "\n".join(lines)
