"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error.
Machine-readable results go to stdout as JSON lines; ``--verbose`` adds
human-readable tables and progress on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from wmforge.errors import ConfigError, WmForgeError
from wmforge.evaluation.config import ExperimentConfig, load_config
from wmforge.evaluation.matrix import cached_null_table, format_table, results_json, row_rng, run_matrix
from wmforge.evaluation.metrics import calibrate
from wmforge.forgery import ForgeryConfig, ImprintConfig, estimate_watermark_latent, imprint, pnp_regenerate, reprompt
from wmforge.gaussian_shading import GsKey, gs_detect, gs_embed, gs_threshold
from wmforge.io import image_suffix, load_image, load_null_table, save_image, save_latent, save_null_table
from wmforge.tree_ring import tr_detect, tr_embed, tr_pvalue

log = logging.getLogger("wmforge")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="experiment config (JSON)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, help="override experiment.master_seed")
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1, help="worker threads (default: logical cores)")
    p.add_argument("--verbose", "-v", action="store_true", help="progress and tables on stderr")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="wmforge", description="Semantic watermark forgery testbed.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("generate", parents=[common], help="generate watermarked images")
    p.add_argument("--key", required=True)
    p.add_argument("--model")
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--condition")

    p = sub.add_parser("embed", parents=[common], help="write a watermarked initial latent")
    p.add_argument("--key", required=True)
    p.add_argument("--model")
    p.add_argument("--index", type=int, default=0, help="row index used to derive the latent seed")

    p = sub.add_parser("detect", parents=[common], help="detect a watermark in an image")
    p.add_argument("--image", required=True)
    p.add_argument("--key", required=True)
    p.add_argument("--model")
    p.add_argument("--fpr", type=float)
    p.add_argument("--null-table", help="CSV of clean Tree-Ring distances")

    p = sub.add_parser("forge", parents=[common], help="run a forgery attack")
    p.add_argument("attack", choices=("pnp", "imprint", "reprompt"))
    p.add_argument("--target-image", required=True, help="watermarked image to steal from")
    p.add_argument("--cover", help="cover image (pnp, imprint)")
    p.add_argument("--proxy", help="attacker model name")
    p.add_argument("--regen", help="regeneration model name (pnp; default: proxy)")
    p.add_argument("--lambda", dest="lam", type=float, default=0.2, help="cover guidance (pnp)")
    p.add_argument("--gamma", type=float, default=1.0, help="guidance ramp exponent (pnp)")
    p.add_argument("--condition", help="condition label (pnp, reprompt)")
    p.add_argument("--iters", type=int, default=50, help="Imprint iterations")
    p.add_argument("--step-size", type=float, default=1e-2)
    p.add_argument("--mu", type=float, default=1e-2, help="Imprint perturbation penalty")

    p = sub.add_parser("calibrate", parents=[common], help="threshold for a key at a target FPR")
    p.add_argument("--key", required=True)
    p.add_argument("--model")
    p.add_argument("--n", type=int, help="null sample size")
    p.add_argument("--fpr", type=float)

    sub.add_parser("bench", parents=[common], help="run the experiment matrix with timings")

    p = sub.add_parser("report", parents=[common], help="summarise a results.json")
    p.add_argument("--results", help="results.json (default: <out>/results.json)")
    return parser


def _emit(doc: dict) -> None:
    sys.stdout.write(json.dumps(doc, sort_keys=True) + "\n")
    sys.stdout.flush()


def _out_dir(args, default: str = ".") -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _master_seed(cfg: ExperimentConfig, args) -> int:
    if args.seed is not None:
        return args.seed
    exp = cfg.doc.get("experiment", {})
    if "master_seed" not in exp:
        raise ConfigError("experiment.master_seed is required (or pass --seed)")
    return int(exp["master_seed"])


def _experiment_value(cfg: ExperimentConfig, field: str, default):
    return type(default)(cfg.doc.get("experiment", {}).get(field, default))


def _check_image(model, x, what):
    if x.shape != model.shape:
        raise ConfigError(f"{what} has shape {x.shape}, model {model.name!r} expects {model.shape}")
    return x


def cmd_generate(cfg: ExperimentConfig, args) -> int:
    name = args.model or cfg.default_model()
    model = cfg.model(name)
    key = cfg.key(args.key, model)
    out = _out_dir(args)
    seed = _master_seed(cfg, args)
    for i in range(args.count):
        z = _embed(key, int(row_rng(seed, i).integers(2**63)), model.shape)
        img = save_image(out / f"wm_{i:03d}", model.generate(z, args.condition))
        save_latent(out / f"wm_{i:03d}_zT.lmf1", z)
        _emit({"image": str(img), "latent": str(out / f"wm_{i:03d}_zT.lmf1"), "key": args.key, "model": name})
    return 0


def _embed(key, seed: int, shape):
    return gs_embed(key, seed, shape) if isinstance(key, GsKey) else tr_embed(key, seed, shape)


def cmd_embed(cfg: ExperimentConfig, args) -> int:
    model = cfg.model(args.model or cfg.default_model())
    key = cfg.key(args.key, model)
    z = _embed(key, int(row_rng(_master_seed(cfg, args), args.index).integers(2**63)), model.shape)
    path = _out_dir(args) / "zT.lmf1"
    save_latent(path, z)
    _emit({"latent": str(path), "key": args.key})
    return 0


def _tr_null(cfg: ExperimentConfig, args, model_name: str, n: int):
    out = Path(args.out) if args.out else None
    return cached_null_table(cfg, model_name, args.key, n, out / "cache" if out else None)


def cmd_detect(cfg: ExperimentConfig, args) -> int:
    name = args.model or cfg.default_model()
    model = cfg.model(name)
    key = cfg.key(args.key, model)
    x = _check_image(model, load_image(args.image), "image")
    z_hat = model.recover_latent(x)
    if isinstance(key, GsKey):
        fpr = args.fpr if args.fpr is not None else _experiment_value(cfg, "gs_fpr", 1e-3)
        report = gs_detect(key, z_hat, fpr).to_json()
    else:
        fpr = args.fpr if args.fpr is not None else _experiment_value(cfg, "tr_fpr", 1e-2)
        if args.null_table:
            null = load_null_table(args.null_table)
        else:
            null = _tr_null(cfg, args, name, _experiment_value(cfg, "n_null", 1000))
        report = tr_detect(key, z_hat, calibrate(null, fpr, "less"), null).to_json()
    report.update({"image": args.image, "key": args.key, "fpr": fpr})
    _emit(report)
    return 0


def _forged_paths(out: Path, channels: int) -> tuple[Path, Path]:
    stem = "forged" if image_suffix(channels) != ".lmf1" else "forged_image"
    return out / stem, out / "forged.lmf1"


def cmd_forge(cfg: ExperimentConfig, args) -> int:
    proxy_name = args.proxy or cfg.default_model()
    proxy = cfg.model(proxy_name)
    x_w = _check_image(proxy, load_image(args.target_image), "target image")
    fcfg = ForgeryConfig(
        invert_steps=cfg.sampler.n_steps,
        regen_steps=cfg.sampler.n_steps,
        cover_guidance=args.lam,
        guidance_ramp=args.gamma,
        condition=args.condition if args.attack == "pnp" else None,
    )
    z_hat = estimate_watermark_latent(proxy, x_w, fcfg)
    if args.attack in ("pnp", "imprint"):
        if not args.cover:
            raise ConfigError(f"forge {args.attack} needs --cover")
        x_c = _check_image(proxy, load_image(args.cover), "cover")
    if args.attack == "pnp":
        regen = cfg.model(args.regen) if args.regen else proxy
        forged = pnp_regenerate(regen, z_hat, x_c, fcfg)
    elif args.attack == "imprint":
        icfg = ImprintConfig(n_iters=args.iters, step_size=args.step_size, perceptual_weight=args.mu, invert_steps=cfg.sampler.n_steps)
        res = imprint(proxy, x_c, z_hat, icfg)
        forged = res.image
        log.info("imprint loss %.4g -> %.4g over %d accepted steps", res.losses[0], res.losses[-1], len(res.step_sizes))
    else:
        if not args.condition:
            raise ConfigError("forge reprompt needs --condition")
        forged = reprompt(proxy, z_hat, args.condition, cfg.sampler.n_steps)
    img_stem, lat_path = _forged_paths(_out_dir(args), forged.shape[0])
    img_path = save_image(img_stem, forged)
    save_latent(lat_path, z_hat)
    _emit({"attack": args.attack, "image": str(img_path), "latent": str(lat_path), "proxy": proxy_name})
    return 0


def cmd_calibrate(cfg: ExperimentConfig, args) -> int:
    name = args.model or cfg.default_model()
    model = cfg.model(name)
    key = cfg.key(args.key, model)
    if isinstance(key, GsKey):
        fpr = args.fpr if args.fpr is not None else _experiment_value(cfg, "gs_fpr", 1e-3)
        _emit({"key": args.key, "scheme": "gs", "k": key.k, "fpr": fpr, "threshold": gs_threshold(key.k, fpr)})
        return 0
    fpr = args.fpr if args.fpr is not None else _experiment_value(cfg, "tr_fpr", 1e-2)
    n = args.n or _experiment_value(cfg, "n_null", 1000)
    null = _tr_null(cfg, args, name, n)
    thr = calibrate(null, fpr, "less")
    path = _out_dir(args) / f"null_{args.key}.csv"
    save_null_table(path, null)
    _emit({
        "key": args.key, "scheme": "tr", "n": n, "fpr": fpr, "threshold": thr,
        "empirical_fpr": float(np.mean(null <= thr)), "min_p_value": float(tr_pvalue(0.0, null)),
        "null_table": str(path),
    })
    return 0


def cmd_bench(cfg: ExperimentConfig, args) -> int:
    results = run_matrix(cfg, out_dir=args.out, jobs=max(1, args.jobs), seed=args.seed)
    doc = results_json(results)
    for s in doc["scenarios"]:
        _emit({"scenario": s["id"], **s["aggregates"]})
    if args.verbose:
        print(format_table(doc), file=sys.stderr)
    return 0


def cmd_report(args) -> int:
    path = Path(args.results) if args.results else Path(args.out or "results") / "results.json"
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON at offset {exc.pos}") from None
    print(format_table(doc))
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "embed": cmd_embed,
    "detect": cmd_detect,
    "forge": cmd_forge,
    "calibrate": cmd_calibrate,
    "bench": cmd_bench,
}


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "report":
            return cmd_report(args)
        if not args.config:
            raise ConfigError(f"{args.command} requires --config PATH")
        cfg = ExperimentConfig(load_config(args.config))
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (WmForgeError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
