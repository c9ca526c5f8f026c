"""Command-line entry point: fixtures, training runs, scoring, reports.

Commands
--------
pretrain      fit the pair-distance model to MOS targets
train         joint 2AFC + regression training with the judgment network
score         print one patch-averaged metric value for a ref/dist pair
compare       2AFC accuracy table over a triplet manifest
eval-mos      SROCC/PLCC table against a MOS manifest
make-fixture  generate the built-in synthetic graded-distortion dataset

Every flag can instead be supplied through ``--config FILE`` holding flat
``key = value`` lines (keys mirror the flag names); explicit flags win over
the file, unknown keys are rejected. All randomness flows from ``--seed``.
Checkpoint flags also look inside ``$COMPIQA_CACHE`` when the given path does
not exist locally — that env var is the only environment input.

Quality baselines (psnr, msssim) are negated inside compare/eval-mos so that
every metric is oriented lower-is-closer; ``score`` prints their natural
values (PSNR in dB, MS-SSIM similarity).

Exit status is 0 iff the requested artifact was fully written.
"""

import argparse
import math
import os
import sys
from dataclasses import dataclass
from pathlib import Path

from .baselines import ms_ssim, psnr
from .dpis import dpis_distance, load_dpis
from .errors import CompiqaError, ConfigError
from .evaluation import patch_average_score, run_comparison, run_mos_evaluation
from .fixtures import FixtureSpec, make_fixture
from .images import PatchSpec, load_image
from .swin import BackboneConfig, tiny_test_config
from .swiniqa import SwinIQA, load_swiniqa, score_pair
from .training import (JudgmentNet, TrainConfig, load_mos_manifest,
                       load_triplet_manifest, pretrain, train_joint)

CACHE_ENV = "COMPIQA_CACHE"

# backbone preset -> (config factory, head width, head count)
_PRESETS = {
    "swin-t": (BackboneConfig, 256, 4),
    "tiny-test": (tiny_test_config, 32, 2),
}

_METRICS = ("swiniqa", "dpis", "psnr", "msssim")


def load_config_file(path) -> dict:
    """Flat `key = value` lines; '#' comments and blank lines are skipped."""
    if not os.path.isfile(path):
        raise ConfigError(f"--config: file not found: {path}")
    mapping = {}
    with open(path) as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            key = key.strip().replace("-", "_")
            if not sep or not key:
                raise ConfigError(f"{path}: line {lineno}: expected key = value")
            mapping[key] = value.strip()
    return mapping


def _as_bool(raw: str) -> bool:
    lowered = str(raw).strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {raw!r}")


class _Opts:
    """Registers options on a parser and remembers how to fill them from a
    config file: caster per key plus the built-in default."""

    def __init__(self, parser):
        self.parser = parser
        self.types = {}
        self.defaults = {}

    def add(self, name, *, type=str, default=None, flag=False, choices=None,
            help=""):
        dest = name.lstrip("-").replace("-", "_")
        if flag:
            self.parser.add_argument(name, action="store_const", const=True,
                                     default=None, help=help)
            self.types[dest] = _as_bool
        else:
            self.parser.add_argument(name, type=type, default=None,
                                     choices=choices, help=help)
            self.types[dest] = type
        self.defaults[dest] = default


@dataclass(frozen=True)
class RunConfig:
    """One command's resolved options (flag > config file > default)."""
    command: str
    values: dict
    sources: dict

    def __getitem__(self, key):
        return self.values[key]

    def given(self, key) -> bool:
        """True when the user set the key explicitly (flag or file)."""
        return self.sources[key] != "default"


def _resolve(command, args, opts: _Opts) -> RunConfig:
    file_map = {}
    if getattr(args, "config", None):
        file_map = load_config_file(args.config)
        unknown = sorted(set(file_map) - set(opts.types))
        if unknown:
            raise ConfigError(
                f"{args.config}: unknown config keys: {', '.join(unknown)}"
            )
    values, sources = {}, {}
    for dest, caster in opts.types.items():
        value = getattr(args, dest)
        source = "flag"
        if value is None and dest in file_map:
            try:
                value = caster(file_map[dest])
            except (TypeError, ValueError) as exc:
                raise ConfigError(
                    f"config key {dest}: bad value {file_map[dest]!r}: {exc}"
                ) from exc
            source = "file"
        if value is None:
            value = opts.defaults[dest]
            source = "default"
        values[dest] = value
        sources[dest] = source
    return RunConfig(command=command, values=values, sources=sources)


def _require(cfg: RunConfig, key: str):
    if cfg[key] is None:
        raise ConfigError(f"--{key.replace('_', '-')} is required")
    return cfg[key]


def _require_file(cfg: RunConfig, key: str):
    path = _require(cfg, key)
    if not os.path.isfile(path):
        raise ConfigError(
            f"--{key.replace('_', '-')}: file not found: {path}"
        )
    return path


def _archive_path(path: str, flag: str):
    """Checkpoint path, falling back to $COMPIQA_CACHE for bare names."""
    if os.path.isfile(path):
        return path
    cache = os.environ.get(CACHE_ENV)
    if cache:
        cached = os.path.join(cache, path)
        if os.path.isfile(cached):
            return cached
    raise ConfigError(
        f"{flag}: file not found: {path}"
        + (f" (also tried {CACHE_ENV}={cache})" if cache else "")
    )


def _resolve_archive(cfg: RunConfig, key: str):
    return _archive_path(_require(cfg, key), f"--{key.replace('_', '-')}")


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(_require(cfg, "out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _data_root(cfg: RunConfig, manifest_path: str) -> str:
    root = cfg["data_root"]
    if root is None:
        root = os.path.dirname(os.path.abspath(manifest_path))
    elif not os.path.isdir(root):
        raise ConfigError(f"--data-root: directory not found: {root}")
    return root


def _check_workers(cfg: RunConfig):
    if cfg["workers"] < 1:
        raise ConfigError("--workers must be at least 1")


def _build_model(cfg: RunConfig) -> SwinIQA:
    name = cfg["backbone"]
    if name not in _PRESETS:
        raise ConfigError(
            f"--backbone must be one of {sorted(_PRESETS)}, got {name!r}"
        )
    mode = cfg["mode"]
    if mode not in (1, 2, 3, 4):
        raise ConfigError(f"--mode must be 1, 2, 3 or 4, got {mode!r}")
    factory, dim, heads = _PRESETS[name]
    return SwinIQA(factory(), mode=mode, dim=dim, heads=heads, seed=cfg["seed"])


def _train_config(cfg: RunConfig, **overrides) -> TrainConfig:
    keys = ("lambda_reg", "pretrain_lr", "pretrain_epochs", "pretrain_batch",
            "joint_lr", "judgment_lr", "joint_epochs", "joint_batch", "crop",
            "freeze_backbone")
    kwargs = {k: cfg[k] for k in keys if k in cfg.values and cfg[k] is not None}
    kwargs.update(overrides)
    return TrainConfig(seed=cfg["seed"], **kwargs)


def _patch_spec(cfg: RunConfig) -> PatchSpec:
    return PatchSpec(size=cfg["patch_size"], stride=cfg["patch_stride"])


def _metric_fn(cfg: RunConfig, name: str, natural: bool):
    """Scoring handle for one metric. With natural=False, quality baselines
    are negated so every handle is lower-is-closer."""
    sign = 1.0 if natural else -1.0
    if name == "psnr":
        return lambda r, d: sign * psnr(r, d).value
    if name == "msssim":
        return lambda r, d: sign * ms_ssim(r, d).value
    if name == "swiniqa":
        model, _ = load_swiniqa(_resolve_archive(cfg, "swiniqa_checkpoint"))
        return lambda r, d: score_pair(model, r, d)
    if name == "dpis":
        model, _ = load_dpis(_resolve_archive(cfg, "dpis_checkpoint"))
        return lambda r, d: dpis_distance(model, r, d)
    raise ConfigError(f"unknown metric {name!r}; choose from {_METRICS}")


def _metric_handles(cfg: RunConfig):
    """Build every requested metric, collecting all failures before bailing."""
    raw = _require(cfg, "metrics")
    names = [part.strip() for part in raw.split(",") if part.strip()]
    if not names:
        raise ConfigError("--metrics must name at least one metric")
    handles, errors = [], []
    for name in names:
        try:
            handles.append((name, _metric_fn(cfg, name, natural=False)))
        except CompiqaError as exc:
            errors.append(f"{name}: {exc}")
    return handles, errors


def _write_text(path: Path, text: str) -> None:
    with open(path, "w") as f:
        f.write(text)


# ---------------------------------------------------------------------------
# command handlers

def cmd_make_fixture(cfg: RunConfig) -> int:
    _check_workers(cfg)
    _require(cfg, "out")
    spec = FixtureSpec(n_refs=cfg["refs"], size=cfg["size"],
                       n_triplets=cfg["triplets"], min_sep=cfg["min_sep"],
                       seed=cfg["seed"])
    summary = make_fixture(cfg["out"], spec)
    print(f"wrote fixture under {summary.root}: {summary.n_refs} refs, "
          f"{summary.n_mos} rated pairs, {summary.n_triplets} triplets")
    print(f"wrote {summary.mos_manifest}")
    print(f"wrote {summary.triplet_manifest}")
    return 0


def cmd_pretrain(cfg: RunConfig) -> int:
    _check_workers(cfg)
    manifest = _require_file(cfg, "mos_manifest")
    samples = load_mos_manifest(manifest, _data_root(cfg, manifest))
    train_cfg = _train_config(cfg)
    model = _build_model(cfg)
    out = _out_dir(cfg)
    checkpoint = out / "pretrain.npz"
    log = pretrain(model, samples, train_cfg, checkpoint_path=checkpoint)
    lines = [f"epoch {i + 1} loss {v!r}" for i, v in enumerate(log)]
    _write_text(out / "pretrain_log.txt", "\n".join(lines) + "\n")
    print(f"wrote {checkpoint}")
    print(f"wrote {out / 'pretrain_log.txt'}")
    return 0


def _check_init_matches(cfg: RunConfig, archive_config: dict) -> None:
    if cfg.given("mode") and archive_config["head"]["mode"] != cfg["mode"]:
        raise ConfigError(
            f"--init-checkpoint: archive uses mapping mode "
            f"{archive_config['head']['mode']}, but --mode {cfg['mode']} was given"
        )
    if cfg.given("backbone"):
        factory, _, _ = _PRESETS[cfg["backbone"]]
        if archive_config["backbone"] != factory().to_dict():
            raise ConfigError(
                f"--init-checkpoint: archive backbone does not match "
                f"--backbone {cfg['backbone']}"
            )


def cmd_train(cfg: RunConfig) -> int:
    _check_workers(cfg)
    tri_manifest = _require_file(cfg, "triplet_manifest")
    mos_manifest = _require_file(cfg, "mos_manifest")
    root = _data_root(cfg, tri_manifest)
    triplets = load_triplet_manifest(tri_manifest, root)
    mos_samples = load_mos_manifest(mos_manifest, root)
    train_cfg = _train_config(cfg)
    if cfg["init_checkpoint"] is not None:
        model, archive_config = load_swiniqa(_resolve_archive(cfg, "init_checkpoint"))
        _check_init_matches(cfg, archive_config)
        model.train()
    else:
        model = _build_model(cfg)
    judgment = JudgmentNet(seed=cfg["seed"] + 2)
    out = _out_dir(cfg)
    checkpoint = out / "joint.npz"
    step_log = []
    log = train_joint(model, judgment, triplets, mos_samples, train_cfg,
                      checkpoint_path=checkpoint, step_log=step_log)
    steps_per_epoch = len(step_log) // len(log)
    lines = []
    for e in range(len(log)):
        for k in range(steps_per_epoch):
            i = e * steps_per_epoch + k
            bce, reg, total = step_log[i]
            lines.append(f"step {i + 1} bce {bce!r} reg {reg!r} total {total!r}")
        lines.append(f"epoch {e + 1} loss {log[e]!r}")
    _write_text(out / "train_log.txt", "\n".join(lines) + "\n")
    print(f"wrote {checkpoint}")
    print(f"wrote {out / 'train_log.txt'}")
    return 0


def cmd_score(cfg: RunConfig) -> int:
    _check_workers(cfg)
    name = _require(cfg, "metric")
    if name not in _METRICS:
        raise ConfigError(f"--metric must be one of {_METRICS}, got {name!r}")
    if name in ("psnr", "msssim") and cfg["checkpoint"] is not None:
        raise ConfigError(f"--checkpoint: not used by metric {name!r}")
    if name in ("swiniqa", "dpis") and cfg["checkpoint"] is None:
        raise ConfigError(f"--checkpoint is required for metric {name!r}")
    ref = load_image(_require_file(cfg, "ref"))
    dist = load_image(_require_file(cfg, "dist"))
    if name == "swiniqa":
        model, _ = load_swiniqa(_archive_path(cfg["checkpoint"], "--checkpoint"))
        handle = (lambda r, d: score_pair(model, r, d))
    elif name == "dpis":
        model, _ = load_dpis(_archive_path(cfg["checkpoint"], "--checkpoint"))
        handle = (lambda r, d: dpis_distance(model, r, d))
    else:
        handle = _metric_fn(cfg, name, natural=True)
    value = patch_average_score(handle, ref, dist, _patch_spec(cfg))
    rendered = "inf" if math.isinf(value) else f"{value:.6f}"
    print(f"{name} {rendered}")
    return 0


def cmd_compare(cfg: RunConfig) -> int:
    _check_workers(cfg)
    manifest = _require_file(cfg, "triplet_manifest")
    triplets = load_triplet_manifest(manifest, _data_root(cfg, manifest))
    handles, errors = _metric_handles(cfg)
    if errors:
        for line in errors:
            print(f"error: {line}", file=sys.stderr)
        return 1
    out = _out_dir(cfg)
    csv_path = cfg["per_triplet_csv"]
    report = run_comparison(handles, triplets, _patch_spec(cfg),
                            skip_missing=bool(cfg["skip_missing"]),
                            per_triplet_csv=csv_path)
    _write_text(out / "comparison.txt", report.table() + "\n")
    _write_text(out / "comparison.jsonl", "\n".join(report.records()) + "\n")
    print(report.table())
    print(f"wrote {out / 'comparison.txt'}")
    return 0


def cmd_eval_mos(cfg: RunConfig) -> int:
    _check_workers(cfg)
    manifest = _require_file(cfg, "mos_manifest")
    samples = load_mos_manifest(manifest, _data_root(cfg, manifest))
    handles, errors = _metric_handles(cfg)
    if errors:
        for line in errors:
            print(f"error: {line}", file=sys.stderr)
        return 1
    out = _out_dir(cfg)
    report = run_mos_evaluation(handles, samples, _patch_spec(cfg),
                                skip_missing=bool(cfg["skip_missing"]))
    _write_text(out / "correlation.txt", report.table() + "\n")
    _write_text(out / "correlation.jsonl", "\n".join(report.records()) + "\n")
    print(report.table())
    print(f"wrote {out / 'correlation.txt'}")
    return 0


# ---------------------------------------------------------------------------
# parser wiring

def _add_common(opts: _Opts):
    opts.parser.add_argument(
        "--config", default=None,
        help="flat key = value file mirroring the flags; flags win")
    opts.add("--seed", type=int, default=0,
             help="single source of randomness for the whole run")
    opts.add("--workers", type=int, default=1,
             help="reserved; every current pipeline is sequential")


def _add_patch(opts: _Opts):
    opts.add("--patch-size", type=int, default=224, help="scoring patch size")
    opts.add("--patch-stride", type=int, default=128, help="scoring patch stride")


def _add_checkpoints(opts: _Opts):
    opts.add("--swiniqa-checkpoint", help="archive for the swiniqa metric")
    opts.add("--dpis-checkpoint", help="archive for the dpis metric")


def _add_train_common(opts: _Opts):
    opts.add("--backbone", choices=sorted(_PRESETS), default="swin-t",
             help="backbone preset (swin-t or tiny-test)")
    opts.add("--mode", type=int, choices=(1, 2, 3, 4), default=1,
             help="mapping mode: 1 cross-attn, 2 diff cross-attn, 3 diff, 4 sim")
    opts.add("--crop", type=int, help="training crop size")
    opts.add("--freeze-backbone", flag=True,
             help="train the head only, leaving backbone weights fixed")
    opts.add("--data-root", help="base dir for manifest paths "
                                 "(default: the manifest's directory)")
    opts.add("--out", help="output directory for checkpoint + loss log")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="compiqa",
        description="Full-reference image quality toolkit for compressed images.",
        epilog=f"Checkpoint paths fall back to ${CACHE_ENV} when not found "
               "locally; that is the only environment variable consulted.")
    sub = parser.add_subparsers(dest="command", required=True)
    registries = {}

    p = sub.add_parser("make-fixture",
                       help="generate the synthetic graded-distortion dataset")
    o = registries["make-fixture"] = _Opts(p)
    _add_common(o)
    o.add("--out", help="directory to write the fixture into")
    o.add("--refs", type=int, default=20, help="number of reference images")
    o.add("--size", type=int, default=64, help="image side (multiple of 8)")
    o.add("--triplets", type=int, default=500, help="number of 2AFC triplets")
    o.add("--min-sep", type=float, default=0.08,
          help="minimum severity gap within a triplet")

    p = sub.add_parser("pretrain", help="fit the distance model to MOS targets")
    o = registries["pretrain"] = _Opts(p)
    _add_common(o)
    _add_train_common(o)
    o.add("--mos-manifest", help="JSONL with ref/dist/mos records")
    o.add("--pretrain-lr", type=float, help="learning rate")
    o.add("--pretrain-epochs", type=int, help="epochs")
    o.add("--pretrain-batch", type=int, help="batch size")

    p = sub.add_parser("train", help="joint 2AFC + regression training")
    o = registries["train"] = _Opts(p)
    _add_common(o)
    _add_train_common(o)
    o.add("--triplet-manifest", help="JSONL with ref/dist_a/dist_b/h records")
    o.add("--mos-manifest", help="JSONL with ref/dist/mos records")
    o.add("--init-checkpoint", help="start from a pretrained model archive")
    o.add("--lambda-reg", type=float, help="regression loss weight")
    o.add("--joint-lr", type=float, help="distance model learning rate")
    o.add("--judgment-lr", type=float, help="judgment network learning rate")
    o.add("--joint-epochs", type=int, help="epochs")
    o.add("--joint-batch", type=int, help="triplet batch size")

    p = sub.add_parser("score", help="print one metric value for an image pair")
    o = registries["score"] = _Opts(p)
    _add_common(o)
    _add_patch(o)
    o.add("--metric", choices=_METRICS, help="metric to evaluate")
    o.add("--ref", help="reference image path")
    o.add("--dist", help="distorted image path")
    o.add("--checkpoint", help="model archive (swiniqa/dpis only)")

    p = sub.add_parser("compare", help="2AFC accuracy table over triplets")
    o = registries["compare"] = _Opts(p)
    _add_common(o)
    _add_patch(o)
    _add_checkpoints(o)
    o.add("--metrics", help="comma-separated metric list; row order follows it")
    o.add("--triplet-manifest", help="JSONL with ref/dist_a/dist_b/h records")
    o.add("--data-root", help="base dir for manifest paths")
    o.add("--out", help="output directory for the report")
    o.add("--per-triplet-csv", help="also write per-triplet distances here")
    o.add("--skip-missing", flag=True,
          help="skip unreadable records (noted in the report) instead of failing")

    p = sub.add_parser("eval-mos", help="SROCC/PLCC table against MOS records")
    o = registries["eval-mos"] = _Opts(p)
    _add_common(o)
    _add_patch(o)
    _add_checkpoints(o)
    o.add("--metrics", help="comma-separated metric list; row order follows it")
    o.add("--mos-manifest", help="JSONL with ref/dist/mos records")
    o.add("--data-root", help="base dir for manifest paths")
    o.add("--out", help="output directory for the report")
    o.add("--skip-missing", flag=True,
          help="skip unreadable records (noted in the report) instead of failing")

    return parser, registries


_HANDLERS = {
    "make-fixture": cmd_make_fixture,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "score": cmd_score,
    "compare": cmd_compare,
    "eval-mos": cmd_eval_mos,
}


def main(argv=None) -> int:
    parser, registries = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _resolve(args.command, args, registries[args.command])
        return _HANDLERS[args.command](cfg)
    except CompiqaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
