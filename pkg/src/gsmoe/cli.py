"""Command-line entry point.

    gsmoe gen-data | train | eval | splat | cluster | plot  [--config run.json] [--key value ...]

A run is described by one JSON file with sections ``data`` (SyntheticConfig),
``train`` (TrainConfig), ``splat`` (SplatConfig) and the output directory
``out_dir``. Any field can be overridden with ``--section.field value``; a bare
``--field value`` works when the field name is unique across sections. The
effective configuration is written to ``config.resolved.json`` in the output
directory, and passing that file back via ``--config`` reproduces the run.

Exit codes: 0 success, 1 usage error, 2 data or checkpoint error, 3 training
divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import MISSING, asdict, fields
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import metrics, model, plot, signal, train
from .data import SyntheticConfig
from .errors import ContainerError, DivergenceError, InvalidInputError, UndefinedMetricError
from .signal import SplatConfig
from .train import TrainConfig

log = logging.getLogger("gsmoe")

SECTIONS = {"data": SyntheticConfig, "train": TrainConfig, "splat": SplatConfig}
TRAIN_FILE, TEST_FILE, CKPT_FILE = "train.gsmk", "test.gsmk", "checkpoint.gsmk"
LOG_FILE, RESOLVED_FILE = "train_log.jsonl", "config.resolved.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------- run config

def _section_defaults(cls) -> dict:
    out = {}
    for f in fields(cls):
        if cls is TrainConfig and f.name == "splat":
            continue
        if f.default is not MISSING:
            out[f.name] = f.default
        else:
            out[f.name] = f.default_factory()
    return json.loads(json.dumps(out))


def default_run_config() -> dict:
    cfg = {"out_dir": "run"}
    for name, cls in SECTIONS.items():
        cfg[name] = _section_defaults(cls)
    # the splat section defaults to the training configuration's splat settings
    cfg["splat"] = json.loads(json.dumps(asdict(TrainConfig().splat)))
    return cfg


def _coerce(value: str, like):
    """Parse an override string into the type of the default ``like``."""
    if isinstance(like, bool):
        if value.lower() in ("true", "1", "yes"):
            return True
        if value.lower() in ("false", "0", "no"):
            return False
        raise UsageError(f"expected a boolean, got {value!r}")
    if isinstance(like, int):
        try:
            return int(value)
        except ValueError:
            raise UsageError(f"expected an integer, got {value!r}") from None
    if isinstance(like, float):
        try:
            return float(value)
        except ValueError:
            raise UsageError(f"expected a number, got {value!r}") from None
    if isinstance(like, list):
        try:
            parsed = json.loads(value) if value.strip().startswith("[") else value.split(",")
            return [type(like[0])(v) if like else v for v in parsed]
        except (ValueError, TypeError):
            raise UsageError(f"expected a list like {like}, got {value!r}") from None
    return value


def _merge(base: dict, update: dict, where: str = "") -> None:
    for k, v in update.items():
        if k not in base:
            raise UsageError(f"unknown config key {where + k!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise UsageError(f"config key {where + k!r} must be an object")
            _merge(base[k], v, where + k + ".")
        else:
            base[k] = v


def _resolve_key(cfg: dict, key: str) -> tuple:
    if "." in key:
        sec, name = key.split(".", 1)
        if sec in SECTIONS and name in cfg[sec]:
            return sec, name
        raise UsageError(f"unknown config key {key!r}")
    if key in cfg and not isinstance(cfg[key], dict):
        return None, key
    hits = [sec for sec in SECTIONS if key in cfg[sec]]
    if not hits:
        raise UsageError(f"unknown config key {key!r}")
    if len(hits) > 1:
        raise UsageError(f"ambiguous key {key!r}; use one of "
                         + ", ".join(f"--{s}.{key}" for s in hits))
    return hits[0], key


def apply_overrides(cfg: dict, extra: list) -> dict:
    if len(extra) % 2:
        raise UsageError(f"override flags come in '--key value' pairs, got {extra}")
    for flag, value in zip(extra[::2], extra[1::2]):
        if not flag.startswith("--"):
            raise UsageError(f"unexpected argument {flag!r}")
        sec, name = _resolve_key(cfg, flag[2:].replace("-", "_"))
        target = cfg if sec is None else cfg[sec]
        target[name] = _coerce(value, target[name])
    return cfg


def load_run_config(path: str | None, extra: list) -> dict:
    cfg = default_run_config()
    if path:
        try:
            user = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise UsageError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON ({exc})") from None
        _merge(cfg, user)
    return apply_overrides(cfg, extra)


def build_configs(cfg: dict) -> tuple[SyntheticConfig, TrainConfig]:
    try:
        d = dict(cfg["data"])
        for k in ("T_range", "anomaly_window_range"):
            d[k] = tuple(d[k])
        sc = SyntheticConfig(**d)
        tc = TrainConfig(splat=SplatConfig(**cfg["splat"]), **cfg["train"])
        sc.validate()
        tc.validate()
    except (TypeError, InvalidInputError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None
    return sc, tc


def write_resolved(cfg: dict) -> Path:
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    (out / RESOLVED_FILE).write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    return out


# ---------------------------------------------------------------- commands

def _load_records(path: Path) -> list:
    if not path.exists():
        raise FileNotFoundError(f"{path} not found (run gen-data first)")
    return data_mod.load_container(path)


def _final_scores(state: train.PipelineState, records: list) -> tuple[str, list]:
    if state.gate is not None:
        return "gate", train.score_fusion(state.encoder, state.gate, state.experts, records)
    if state.experts:
        mats = train.expert_score_matrix(state.encoder, state.experts, records)
        return "experts_only", [m.max(axis=-1) for m in mats]
    return "tgs_encoder", train.score_encoder(state.encoder, records)


def cmd_gen_data(args, cfg, out: Path) -> None:
    sc, _ = build_configs(cfg)
    tr, te = data_mod.generate_synthetic(sc)
    data_mod.save_container(out / TRAIN_FILE, tr)
    data_mod.save_container(out / TEST_FILE, te)
    data_mod.write_ground_truth_csv(out / "test_gt.csv", te)
    print(f"wrote {len(tr)} train and {len(te)} test videos to {out}")


def cmd_train(args, cfg, out: Path) -> None:
    _, tc = build_configs(cfg)
    tr = _load_records(out / TRAIN_FILE)
    stages = ("encoder", "experts", "gate") if args.stage == "all" else (args.stage,)
    state = None
    if stages[0] != "encoder":
        state = train.PipelineState.from_bundle(model.load_checkpoint(out / CKPT_FILE))
    te_path = out / TEST_FILE
    te = data_mod.load_container(te_path) if te_path.exists() else None
    logger = train.JsonlLog(out / LOG_FILE)
    try:
        for stage in stages:
            state = train.run_pipeline(tr, tc, stages=(stage,), logger=logger, state=state)
            if te is not None:
                name, scores = _final_scores(state, te)
                res = metrics.evaluate(te, scores)
                logger.write(stage=stage, event="eval", model=name, auc=res.auc, ap=res.ap,
                             auc_a=res.auc_a, ap_a=res.ap_a)
    finally:
        logger.close()
    model.save_checkpoint(out / CKPT_FILE, state.bundle(tc))
    print(f"trained {', '.join(stages)}; checkpoint at {out / CKPT_FILE}")


def _seed_job(payload: tuple) -> tuple:
    cfg, seed = payload
    cfg = json.loads(json.dumps(cfg))
    cfg["data"]["seed"] = seed
    cfg["train"]["seed"] = seed
    sc, tc = build_configs(cfg)
    tr, te = data_mod.generate_synthetic(sc)
    state = train.run_pipeline(tr, tc)
    return seed, train.results_to_dict(train.evaluate_variants(state, te, masks=True))


def _mean_result(dicts: list) -> dict:
    out = {k: float(np.mean([d[k] for d in dicts])) for k in ("auc", "ap", "auc_a", "ap_a")}
    classes = sorted(set().union(*[d["per_class_auc"] for d in dicts]), key=int)
    out["per_class_auc"] = {c: float(np.mean([d["per_class_auc"][c] for d in dicts
                                              if c in d["per_class_auc"]])) for c in classes}
    return out


def cmd_eval(args, cfg, out: Path) -> None:
    if args.seeds:
        base = cfg["data"]["seed"]
        jobs = [(cfg, base + i) for i in range(args.seeds)]
        if args.workers > 1:
            with ProcessPoolExecutor(args.workers) as pool:
                results = dict(pool.map(_seed_job, jobs))
        else:
            results = dict(map(_seed_job, jobs))
        per_seed = {str(s): results[s] for s in sorted(results)}
        variants = sorted(next(iter(results.values())))
        mean = {v: _mean_result([r[v] for r in results.values()]) for v in variants}
        (out / "seeds.json").write_text(json.dumps({"seeds": sorted(results), "mean": mean,
                                                    "per_seed": per_seed},
                                                   indent=2, sort_keys=True) + "\n")
        summary = dict(mean["gate"], model="gate", seeds=sorted(results))
        (out / "metrics.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        for v in variants:
            print(f"{v:16s} auc={mean[v]['auc']:.4f}")
        return
    ckpt = Path(args.checkpoint) if args.checkpoint else out / CKPT_FILE
    records = _load_records(Path(args.dataset) if args.dataset else out / TEST_FILE)
    state = train.PipelineState.from_bundle(model.load_checkpoint(ckpt))
    name, scores = _final_scores(state, records)
    result = metrics.evaluate(records, scores)
    metrics.write_json(out / "metrics.json", result, {"model": name})
    metrics.write_csv(out / "metrics.csv", result)
    variants = {}
    if state.mil_encoder_state:
        variants = train.evaluate_variants(state, records, masks=state.gate is not None)
    (out / "ablation.json").write_text(
        json.dumps(train.results_to_dict(variants), indent=2, sort_keys=True) + "\n")
    print(f"{name}: auc={result.auc:.4f} ap={result.ap:.4f} "
          f"auc_a={result.auc_a:.4f} ap_a={result.ap_a:.4f}")


def cmd_splat(args, cfg, out: Path) -> None:
    _, tc = build_configs(cfg)
    scores = signal.read_scores_csv(args.scores)
    target = Path(args.output) if args.output else out / "pseudo_labels.csv"
    signal.write_scores_csv(target, signal.make_targets(scores, tc.splat), header="pseudo_label")
    print(f"wrote {len(scores)} pseudo-labels to {target}")


def cmd_cluster(args, cfg, out: Path) -> None:
    _, tc = build_configs(cfg)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / CKPT_FILE
    bundle = model.load_checkpoint(ckpt)
    records = _load_records(Path(args.dataset) if args.dataset else out / TRAIN_FILE)
    abnormal = [r for r in records if r.video_label == 1]
    k = args.k or tc.n_clusters
    if not 1 <= k <= len(abnormal):
        raise InvalidInputError(f"k={k} must lie in [1, {len(abnormal)}]")
    assign = train.cluster_videos(bundle.encoder, abnormal, k, tc.seed)
    (out / "clusters.json").write_text(json.dumps(
        {"k": k, "assignments": {vid: int(c) for vid, c in sorted(assign.items())}},
        indent=2, sort_keys=True) + "\n")
    print(f"clustered {len(abnormal)} abnormal videos into {k} groups")


def cmd_plot(args, cfg, out: Path) -> None:
    _, tc = build_configs(cfg)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / CKPT_FILE
    state = train.PipelineState.from_bundle(model.load_checkpoint(ckpt))
    records = _load_records(Path(args.dataset) if args.dataset else out / TEST_FILE)
    if args.video:
        chosen = [r for r in records if r.id == args.video]
        if not chosen:
            raise InvalidInputError(f"video {args.video!r} not in dataset")
    else:
        chosen = [r for r in records if r.video_label == 1][:1] or records[:1]
    rec = chosen[0]
    name, (scores,) = _final_scores(state, [rec])
    svg = plot.score_plot_svg(scores, signal.make_targets(scores, tc.splat), rec.snippet_gt,
                              title=f"{rec.id} ({name})")
    target = Path(args.output) if args.output else out / f"plot_{rec.id.replace('/', '_')}.svg"
    target.write_text(svg)
    print(f"wrote {target}")


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "splat": cmd_splat, "cluster": cmd_cluster, "plot": cmd_plot}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gsmoe", allow_abbrev=False, description="Gaussian-splatting guided mixture of experts "
                "for weakly-supervised temporal anomaly detection.")
    p.add_argument("--verbose", "-v", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    common = _Parser(add_help=False, allow_abbrev=False)
    common.add_argument("--config", help="run configuration JSON")
    common.add_argument("--out-dir", help="output directory (overrides out_dir)")
    sub.add_parser("gen-data", parents=[common], allow_abbrev=False, help="generate the synthetic dataset")
    t = sub.add_parser("train", parents=[common], allow_abbrev=False, help="run training stages")
    t.add_argument("--stage", choices=["encoder", "experts", "gate", "all"], default="all")
    t.add_argument("--expert-mode", choices=["class", "cluster"])
    e = sub.add_parser("eval", parents=[common], allow_abbrev=False, help="evaluate a checkpoint")
    e.add_argument("--checkpoint")
    e.add_argument("--dataset")
    e.add_argument("--seeds", type=int, default=0,
                   help="train and evaluate N fresh seeds instead of a checkpoint")
    e.add_argument("--workers", type=int, default=1)
    s = sub.add_parser("splat", parents=[common], allow_abbrev=False, help="scores CSV -> pseudo-label CSV")
    s.add_argument("--scores", required=True)
    s.add_argument("--output")
    c = sub.add_parser("cluster", parents=[common], allow_abbrev=False, help="k-means over abnormal videos")
    c.add_argument("--checkpoint")
    c.add_argument("--dataset")
    c.add_argument("--k", type=int, default=0)
    pl = sub.add_parser("plot", parents=[common], allow_abbrev=False, help="SVG of scores and pseudo-labels")
    pl.add_argument("--checkpoint")
    pl.add_argument("--dataset")
    pl.add_argument("--video")
    pl.add_argument("--output")
    return p


def main(argv=None) -> int:
    try:
        args, extra = build_parser().parse_known_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = load_run_config(args.config, extra)
        if args.out_dir:
            cfg["out_dir"] = args.out_dir
        if getattr(args, "expert_mode", None):
            cfg["train"]["expert_mode"] = args.expert_mode
        build_configs(cfg)
        out = write_resolved(cfg)
        COMMANDS[args.command](args, cfg, out)
    except UsageError as exc:
        print(f"gsmoe: usage error: {exc}", file=sys.stderr)
        return 1
    except DivergenceError as exc:
        print(f"gsmoe: training diverged: {exc}", file=sys.stderr)
        return 3
    except (ContainerError, InvalidInputError, UndefinedMetricError, OSError,
            KeyError) as exc:
        print(f"gsmoe: data error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
