"""Command line: synthetic data, the three training phases, evaluation, crop comparison
and gradient checks.

Exit codes: 0 success, 1 usage error, 2 data/checkpoint error, 3 check failure.
"""
from __future__ import annotations

import os

# Must run before numpy loads its BLAS so the cap actually applies.
_THREADS = os.environ.get("STN_ICNN_THREADS")
if _THREADS:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _THREADS)

import argparse  # noqa: E402
import dataclasses  # noqa: E402
import hashlib  # noqa: E402
import json  # noqa: E402
import sys  # noqa: E402
import time  # noqa: E402
from importlib import metadata  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402
from PIL import Image  # noqa: E402

from .checkpoint import CheckpointError, CheckpointMismatchError, load_checkpoint  # noqa: E402
from .config import ConfigError, TrainConfig, load_config_file  # noqa: E402
from .data import (DataError, SPLIT_FILES, load_helen, read_sidecar, synth_dataset,  # noqa: E402
                   write_helen, write_sidecar)
from .gradcheck import SUITES, run_suites  # noqa: E402
from .labels import PART_NAMES, PARTS, part_index  # noqa: E402
from .pipeline import ModelSet, coarse_scores, evaluate, localize, prepare  # noqa: E402
from .stn import baseline_crop, crop_parts, theta_centers  # noqa: E402
from .tensor import Tensor, default_dtype, no_grad  # noqa: E402
from .training import (load_models, pretrain_coarse, pretrain_locnet,  # noqa: E402
                       train_end_to_end)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 1, 2, 3

PHASE_OF = {"pretrain-coarse": "coarse", "pretrain-loc": "locnet", "train-e2e": "e2e"}
CKPT_NAME = {"coarse": "coarse.ckpt", "locnet": "locnet.ckpt", "e2e": "e2e.ckpt"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# -- run manifest --------------------------------------------------------------------

def build_id() -> str:
    """Content hash of the package sources, git-style short form."""
    h = hashlib.sha1()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:12]


@dataclasses.dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    inputs: dict
    outputs: dict
    build: str = dataclasses.field(default_factory=build_id)
    version: str = ""
    started: float = dataclasses.field(default_factory=time.time)
    wall_seconds: float | None = None

    def __post_init__(self):
        if not self.version:
            try:
                self.version = metadata.version("artifact")
            except metadata.PackageNotFoundError:
                self.version = "unknown"

    def write(self, out_dir) -> Path:
        p = Path(out_dir) / "manifest.json"
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(json.dumps(dataclasses.asdict(self), indent=1, sort_keys=True))
        return p

    def finish(self, out_dir) -> None:
        self.wall_seconds = round(time.time() - self.started, 3)
        self.write(out_dir)


# -- helpers ------------------------------------------------------------------------

def _parse_size(text: str) -> tuple[int, int]:
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError as exc:
        raise UsageError(f"size must look like HxW, got {text!r}") from exc


def _save_png(path: Path, arr: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if arr.ndim == 3:  # (C, H, W) float in [0, 1]
        img = np.clip(np.rint(arr.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(img, "RGB").save(path)
    else:
        Image.fromarray(arr.astype(np.uint8), "L").save(path)


def _train_config(args) -> TrainConfig:
    values = {}
    if args.config:
        values.update(load_config_file(args.config))
    values["phase"] = PHASE_OF[args.command]
    for f in dataclasses.fields(TrainConfig):
        v = getattr(args, f"cfg_{f.name}", None)
        if v is not None:
            values[f.name] = v
    if args.data:
        values["data"] = args.data
    values["out"] = args.out
    if args.resume:
        values["resume"] = args.resume
    return TrainConfig.from_dict(values)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    # every config key doubles as a flag; flags win over the config file
    skip = {"phase", "data", "out", "resume"}
    for f in dataclasses.fields(TrainConfig):
        if f.name in skip:
            continue
        flag = "--" + f.name.replace("_", "-")
        if isinstance(f.default, bool):
            p.add_argument(flag, dest=f"cfg_{f.name}", nargs="?", const="true", default=None,
                           metavar="BOOL")
        else:
            p.add_argument(flag, dest=f"cfg_{f.name}", default=None)


# -- commands -----------------------------------------------------------------------

def cmd_gen_synth(args) -> int:
    h, w = _parse_size(args.size)
    if args.count < 1:
        raise UsageError("--count must be positive")
    n_test = args.count // 5 if args.test is None else args.test
    if not 0 <= n_test <= args.count:
        raise UsageError("--test must lie in [0, count]")
    out = Path(args.out)
    manifest = RunManifest("gen-synth", {"count": args.count, "size": [h, w], "window": args.window,
                                         "test": n_test}, args.seed, {}, {"data": str(out)})
    try:
        manifest.write(out)
    except OSError as exc:
        raise DataError(f"cannot write to {out}: {exc}") from exc
    items = synth_dataset(args.count, args.seed, (h, w), args.window)
    samples = [s for s, _, _ in items]
    ids = [s.id for s in samples]
    n_train = args.count - n_test
    write_helen(out, samples, {"train": ids[:n_train], "test": ids[n_train:]})
    entries = {s.id: {"theta_hat": th.tolist(), "centroids": {k: list(v) for k, v in c.items()}}
               for s, th, c in items}
    write_sidecar(out, entries, {"seed": args.seed, "size": [h, w], "window": args.window})
    manifest.finish(out)
    print(f"wrote {args.count} samples ({n_train} train, {n_test} test) to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _train_config(args)
    if not cfg.data:
        raise UsageError("--data is required")
    out = Path(cfg.out)
    ckpt_path = out / CKPT_NAME[cfg.phase]
    manifest = RunManifest(args.command, cfg.to_dict(), cfg.seed,
                           {"data": cfg.data, "coarse_ckpt": cfg.coarse_ckpt,
                            "loc_ckpt": cfg.loc_ckpt, "fine_ckpt": cfg.fine_ckpt,
                            "resume": cfg.resume},
                           {"checkpoint": str(ckpt_path), "log": str(out / "train.log")})
    if cfg.phase == "locnet" and not (cfg.coarse_ckpt or cfg.resume):
        raise UsageError("coarse checkpoint required (--coarse-ckpt)")
    if cfg.phase == "e2e" and not (cfg.loc_ckpt or cfg.resume):
        raise UsageError("locnet checkpoint required (--loc-ckpt)")
    manifest.write(out)

    resume = load_checkpoint(cfg.resume) if cfg.resume else None
    models = load_models(cfg.coarse_ckpt, cfg.loc_ckpt, cfg.fine_ckpt)
    if resume is not None:
        models = models.merge(ModelSet.from_checkpoint(resume))
    canvas = cfg.canvas or models.canvas
    train_samples = load_helen(cfg.data, "train")
    seed = cfg.seed if cfg.augment else None
    train = prepare(train_samples, cfg.input_size, canvas, cfg.window, augment_seed=seed)
    test = None
    if cfg.f1_every and (Path(cfg.data) / SPLIT_FILES["test"]).exists():
        test = prepare(load_helen(cfg.data, "test"), cfg.input_size, train.canvas, cfg.window)

    mode = "a" if resume is not None else "w"
    with open(out / "train.log", mode) as fh:
        def log(line):
            print(line)
            fh.write(line + "\n")
            fh.flush()

        kw = dict(log=log, ckpt_path=str(ckpt_path), resume=resume)
        if cfg.phase == "coarse":
            pretrain_coarse(cfg, train, test, **kw)
        elif cfg.phase == "locnet":
            pretrain_locnet(cfg, train, models, test, **kw)
        else:
            train_end_to_end(cfg, train, models, test, **kw)
    manifest.finish(out)
    return EXIT_OK


def _load_model_set(paths) -> ModelSet:
    ms = ModelSet()
    for p in paths:
        ms = ms.merge(ModelSet.from_checkpoint(load_checkpoint(p)))
    return ms


def cmd_eval(args) -> int:
    samples = load_helen(args.data, args.split)
    if args.oracle:
        models = ModelSet(window=args.window)
        data = prepare(samples, window=args.window)
    else:
        if not args.ckpt:
            raise UsageError("--ckpt is required unless --oracle is given")
        models = _load_model_set(args.ckpt)
        models.require("coarse", "locnet", "fine")
        data = prepare(samples, models.locnet.config.input_size, models.canvas, models.window)
    report_path = Path(args.report)
    out_dir = report_path.parent
    manifest = RunManifest("eval", {"split": args.split, "oracle": args.oracle}, 0,
                           {"data": args.data, "ckpt": list(args.ckpt or [])},
                           {"report": str(report_path), "labels": args.labels_out or ""})
    manifest.write(out_dir)
    res = evaluate(models, data, keep_labels=bool(args.labels_out), oracle=args.oracle)
    report_path.write_text(res.report.to_table())
    report_path.with_suffix(".json").write_text(json.dumps(
        {"final": res.report.to_dict(), "coarse": res.coarse.to_dict(),
         "center_error": res.center_error}, indent=1, sort_keys=True))
    if args.labels_out:
        for sid, lab in zip(data.ids, res.labels):
            _save_png(Path(args.labels_out) / f"{sid}.png", lab)
    print(res.report.to_table(), end="")
    manifest.finish(out_dir)
    return EXIT_OK


def cmd_crop_compare(args) -> int:
    window = args.window
    if window % 2 == 0 and not args.allow_even:
        raise UsageError(f"window {window} is even: an even window cannot be centred on a "
                         "pixel, so STN and integer crops drift by half a pixel; use an odd "
                         "window or pass --allow-even")
    if args.occlude != "none" and args.occlude not in PART_NAMES:
        raise UsageError(f"--occlude must be one of none, {', '.join(PART_NAMES)}")
    samples = load_helen(args.data, args.split)
    out = Path(args.out)
    manifest = RunManifest("crop-compare", {"window": window, "occlude": args.occlude,
                                            "split": args.split, "dtype": args.dtype}, 0,
                           {"data": args.data, "ckpt": list(args.ckpt or [])},
                           {"dir": str(out)})
    manifest.write(out)
    models = _load_model_set(args.ckpt) if args.ckpt else None
    if models is not None:
        models.require("coarse", "locnet")
    canvas = models.canvas if models is not None else 0
    size = models.locnet.config.input_size if models is not None else 128
    data = prepare(samples, size, canvas, window)
    sidecar = read_sidecar(args.data)
    dtype = np.float64 if args.dtype == "float64" else np.float32
    occ_idx = None if args.occlude == "none" else part_index(args.occlude)

    rows = []
    with default_dtype(dtype), no_grad():
        for i, sid in enumerate(data.ids):
            padded = data.padded[i:i + 1].astype(dtype)
            if models is None:
                # ground-truth mode: theta-hat against the integer crop of the true labels
                theta = data.theta_hat[i:i + 1].astype(dtype)
                rough = data.labels_padded[i].astype(np.int64).copy()
                if occ_idx is not None:
                    rough[np.isin(rough, PARTS[occ_idx].classes)] = 0
                base = baseline_crop(rough, padded[0], window)
            else:
                z = coarse_scores(models, Tensor(data.resized[i:i + 1]))
                occ = None
                if occ_idx is not None:
                    occ = np.zeros((1, z.shape[1]), bool)
                    occ[0, list(PARTS[occ_idx].classes)] = True
                theta = localize(models, z, occlude=occ).data.astype(dtype)
                prob = 1.0 / (1.0 + np.exp(-z.data[0].astype(np.float64)))
                if occ is not None:
                    prob[occ[0]] = 0.0
                # baseline works on the original image, offset into the padded canvas
                top, left = data.offsets[i]
                h, w = data.orig_sizes[i]
                orig = padded[0][:, top:top + h, left:left + w]
                base = baseline_crop(prob, orig, window)
                base.centers = [None if c is None else (c[0] + left, c[1] + top)
                                for c in base.centers]
            stn = crop_parts(Tensor(padded), Tensor(theta), window).data[0]
            s = data.canvas
            stn_centers = theta_centers(theta[0], (s, s))
            gt_centers = None
            if sidecar is not None and sid in sidecar["samples"]:
                gt_centers = theta_centers(np.asarray(sidecar["samples"][sid]["theta_hat"]), (s, s))
            for j, part in enumerate(PARTS):
                missing = base.centers[j] is None
                diff = None if missing else float(np.abs(stn[j] - base.patches[j]).max())
                err = None
                if gt_centers is not None:
                    err = float(np.hypot(*(stn_centers[j] - gt_centers[j])))
                rows.append({"id": sid, "part": part.name, "baseline_missing": missing,
                             "max_abs_diff": diff, "stn_center_error": err,
                             "occluded": j == occ_idx})
                if args.images:
                    pair = np.concatenate([stn[j], base.patches[j]], axis=2)
                    _save_png(out / "patches" / f"{sid}_{part.name}.png", pair)

    diffs = [r["max_abs_diff"] for r in rows if r["max_abs_diff"] is not None]
    errs = [r["stn_center_error"] for r in rows if r["stn_center_error"] is not None]
    summary = {"window": window, "dtype": args.dtype, "occlude": args.occlude,
               "parts": len(rows), "max_abs_diff": max(diffs) if diffs else None,
               "baseline_missing": sum(r["baseline_missing"] for r in rows),
               "mean_center_error": float(np.mean(errs)) if errs else None, "rows": rows}
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    print(f"parts {len(rows)} max_abs_diff {summary['max_abs_diff']} "
          f"baseline_missing {summary['baseline_missing']} "
          f"mean_center_error {summary['mean_center_error']}")
    manifest.finish(out)
    return EXIT_OK


def cmd_grad_check(args) -> int:
    names = list(SUITES) if args.suite == "all" else [args.suite]
    t0 = time.time()
    results = run_suites(names, corrupt=args.corrupt, log=print)
    failed = [r.op for r in results if not r.ok]
    print(f"{len(results)} checks in {time.time() - t0:.1f}s, {len(failed)} failed")
    if failed:
        print("gradient check failed: " + ", ".join(failed), file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="stn-icnn", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-synth", help="write a synthetic dataset in HELEN layout")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=250)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", default="128x128")
    p.add_argument("--test", type=int, default=None, help="test-split size (default count/5)")
    p.add_argument("--window", type=int, default=81)
    p.set_defaults(func=cmd_gen_synth)

    for name in PHASE_OF:
        p = sub.add_parser(name, help=f"training phase {PHASE_OF[name]}")
        p.add_argument("--data")
        p.add_argument("--config")
        p.add_argument("--out", required=True)
        p.add_argument("--resume")
        _add_config_flags(p)
        p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="F1 report on a split")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", action="append", help="checkpoint(s); later files win")
    p.add_argument("--split", default="test")
    p.add_argument("--report", required=True)
    p.add_argument("--labels-out")
    p.add_argument("--window", type=int, default=81)
    p.add_argument("--oracle", action="store_true",
                   help="score the ground truth against itself")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("crop-compare", help="STN crops vs integer baseline crops")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", action="append")
    p.add_argument("--split", default="test")
    p.add_argument("--window", type=int, default=81)
    p.add_argument("--allow-even", action="store_true")
    p.add_argument("--occlude", default="none")
    p.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    p.add_argument("--images", action="store_true", help="write side-by-side patch PNGs")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_crop_compare)

    p = sub.add_parser("grad-check", help="finite-difference gradient suites")
    p.add_argument("--suite", choices=("all",) + tuple(SUITES), default="all")
    p.add_argument("--corrupt", default=None, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_grad_check)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, CheckpointMismatchError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
