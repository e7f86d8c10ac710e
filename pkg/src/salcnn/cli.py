"""Command-line entry point: preprocess, train, evaluate, predict, heatmap, synth.

Settings resolve as flags > ``--config`` TOML file > built-in defaults.
Exit codes: 0 success, 2 usage or configuration error, 3 runtime or numeric error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from . import data as D
from . import dsp
from . import model as M
from . import train as T
from .numerics import DimensionError

log = logging.getLogger("salcnn")

DATA_ROOT_ENV = "SALCNN_DATA_ROOT"
EXIT_USAGE = 2
EXIT_RUNTIME = 3
HEATMAP_STAGES = ("early", "mid", "late")


class UsageError(Exception):
    """Bad flags, paths or configuration; maps to exit code 2."""


class RuntimeFailure(Exception):
    """Numeric or model failure after configuration succeeded; exit code 3."""


DATA_DEFAULTS = {
    "data_dir": None,
    "synthetic": False,
    "per_condition": [3, 3, 2],
    "life_n": 120,
    "fleet_seed": 0,
    "noise_sigma": 0.05,
    "stride": 1,
}

SECTIONS = {
    "stft": dsp.StftConfig,
    "model": M.ModelConfig,
    "train": T.TrainConfig,
}


# --------------------------------------------------------------------------
# configuration


def _read_config_file(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    try:
        doc = tomllib.loads(p.read_text())
    except tomllib.TOMLDecodeError as e:
        raise UsageError(f"{p}: invalid TOML: {e}") from None
    unknown = set(doc) - set(SECTIONS) - {"data"}
    if unknown:
        raise UsageError(f"{p}: unknown config sections {sorted(unknown)}")
    for name, section in doc.items():
        if not isinstance(section, dict):
            raise UsageError(f"{p}: [{name}] must be a table")
    return doc


def _flag_overrides(args) -> dict:
    out: dict[str, dict] = {"stft": {}, "model": {}, "train": {}, "data": {}}
    mapping = {
        "epochs": ("train", "epochs"),
        "seed": ("train", "seed"),
        "learning_rate": ("train", "learning_rate"),
        "batch_size": ("train", "batch_size"),
        "precision": ("train", "precision"),
        "lstm_hidden": ("model", "lstm_hidden"),
        "window": ("model", "sequence_window"),
        "stride": ("data", "stride"),
        "life_n": ("data", "life_n"),
        "fleet_seed": ("data", "fleet_seed"),
    }
    for attr, (section, key) in mapping.items():
        val = getattr(args, attr, None)
        if val is not None:
            out[section][key] = val
    if getattr(args, "data_dir", None) is not None:
        out["data"]["data_dir"] = str(args.data_dir)
    if getattr(args, "synthetic", False):
        out["data"]["synthetic"] = True
    return out


def _build(cls, values: dict, label: str):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise UsageError(f"unknown [{label}] keys: {sorted(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as e:
        raise UsageError(f"[{label}] {e}") from None


def resolve_config(args) -> dict:
    """Merge defaults, file and flags into typed configs plus a plain data dict."""
    file_doc = _read_config_file(getattr(args, "config", None))
    flags = _flag_overrides(args)
    merged = {}
    for name, cls in SECTIONS.items():
        values = {**file_doc.get(name, {}), **flags[name]}
        merged[name] = _build(cls, values, name)
    data = dict(DATA_DEFAULTS)
    file_data = file_doc.get("data", {})
    unknown = set(file_data) - set(DATA_DEFAULTS)
    if unknown:
        raise UsageError(f"unknown [data] keys: {sorted(unknown)}")
    flag_dir = "data_dir" in flags["data"]
    flag_synth = flags["data"].get("synthetic", False)
    if flag_dir and flag_synth:
        raise UsageError("choose one data source: --data-dir or --synthetic, not both")
    if file_data.get("data_dir") is not None and file_data.get("synthetic", False):
        raise UsageError("[data] sets both data_dir and synthetic = true")
    data.update(file_data)
    # a flag naming one source displaces whatever source the file named
    if flag_synth:
        data["data_dir"] = None
    if flag_dir:
        data["synthetic"] = False
    data.update(flags["data"])
    if data["stride"] < 1:
        raise UsageError(f"[data] stride must be >= 1, got {data['stride']}")
    if data["life_n"] < 2:
        raise UsageError(f"[data] life_n must be >= 2, got {data['life_n']}")
    merged["data"] = data
    return merged


def _config_dict(cfg: dict) -> dict:
    return {
        "stft": asdict(cfg["stft"]),
        "model": asdict(cfg["model"]),
        "train": asdict(cfg["train"]),
        "data": dict(cfg["data"]),
    }


def version_string() -> str:
    return f"v{__version__}"


def write_manifest(path, command: str, cfg: dict | None, extra: dict | None = None) -> None:
    """JSON record of what produced an artifact; no timestamps so reruns match byte for byte."""
    doc = {"command": command, "version": version_string()}
    if cfg is not None:
        doc["config"] = _config_dict(cfg)
        doc["seed"] = cfg["train"].seed
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# data sources


def _has_acc_files(p: Path) -> bool:
    return any(D._ACC_RE.match(c.name) for c in p.iterdir())


def load_runs_from_root(root) -> list[D.BearingRun]:
    """A bearing directory, or a directory of bearing directories (sorted by name)."""
    root = Path(root)
    if not root.is_dir():
        raise UsageError(f"data directory not found: {root}")
    if _has_acc_files(root):
        return [D.load_bearing(root)]
    subdirs = sorted(p for p in root.iterdir() if p.is_dir() and _has_acc_files(p))
    if not subdirs:
        raise UsageError(f"{root}: no bearing directories with acc_XXXXX.csv files")
    return [D.load_bearing(p) for p in subdirs]


def _data_root(cfg: dict):
    if cfg["data"]["data_dir"] is not None:
        return cfg["data"]["data_dir"]
    return os.environ.get(DATA_ROOT_ENV)


def load_runs(cfg: dict) -> list[D.BearingRun]:
    d = cfg["data"]
    if d["synthetic"]:
        return D.synth_fleet(
            per_condition=tuple(d["per_condition"]),
            life_n=d["life_n"],
            seed=d["fleet_seed"],
            noise_sigma=d["noise_sigma"],
        )
    root = _data_root(cfg)
    if root is None:
        raise UsageError(f"no data source: pass --data-dir, --synthetic, or set {DATA_ROOT_ENV}")
    return load_runs_from_root(root)


# --------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    cfg = resolve_config(args)
    d = cfg["data"]
    out = Path(args.out_dir)
    fleet = D.synth_fleet(
        per_condition=tuple(d["per_condition"]), life_n=d["life_n"], seed=d["fleet_seed"], noise_sigma=d["noise_sigma"]
    )
    for run in fleet:
        D.write_bearing(out / run.id, run)
    write_manifest(out / "manifest.json", "synth", None, {"data": d, "bearings": [r.id for r in fleet]})
    print(f"wrote {len(fleet)} bearings to {out}")
    return 0


def cmd_preprocess(args) -> int:
    cfg = resolve_config(args)
    root = _data_root(cfg)
    if root is None:
        raise UsageError(f"no data source: pass --data-dir or set {DATA_ROOT_ENV}")
    root = Path(root)
    if args.bearing is not None:
        bdir = root / args.bearing
        if not bdir.is_dir():
            raise UsageError(f"bearing directory not found: {bdir}")
        runs = [(Path(args.out_dir), D.load_bearing(bdir))]
    else:
        runs = [(Path(args.out_dir) / r.id, r) for r in load_runs_from_root(root)]
    stft_cfg = cfg["stft"]
    count = 0
    for out, run in runs:
        out.mkdir(parents=True, exist_ok=True)
        for k, rec in enumerate(run.recordings, start=1):
            spec = dsp.stft(rec.samples, stft_cfg)
            dsp.write_spectrogram_csv(out / f"spec_{k:05d}.csv", spec)
            dsp.write_spectrogram_pgm(out / f"spec_{k:05d}.pgm", spec)
            count += 1
    print(f"wrote {count} spectrograms")
    return 0


def _train_samples(runs, cfg):
    stft_cfg, mcfg = cfg["stft"], cfg["model"]
    w = mcfg.sequence_window
    stacks = {r.id: D.spectrogram_stack(r, stft_cfg, bins=mcfg.bins) for r in runs if len(r) >= w}
    for r in runs:
        if r.id not in stacks:
            log.warning("skipping %s: %d recordings < window %d", r.id, len(r), w)
    if not stacks:
        raise UsageError(f"no bearing has at least {w} recordings")
    stats = D.compute_norm_stats(stacks.values())
    samples = [s for bid, st in stacks.items() for s in D.windows_from_stack(st, w, cfg["data"]["stride"], stats, bid)]
    return samples, stats


def cmd_train(args) -> int:
    if args.out is None:
        raise UsageError("train requires --out PATH for the checkpoint")
    cfg = resolve_config(args)
    runs = load_runs(cfg)
    samples, stats = _train_samples(runs, cfg)
    tcfg = cfg["train"]
    params = M.build(cfg["model"], seed=tcfg.seed, dtype=tcfg.dtype)
    params.norm_stats = stats

    def report(epoch, loss):
        log.info("epoch %d/%d loss %.4f", epoch, tcfg.epochs, loss)

    result = T.train(params, samples, tcfg, on_epoch=report)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    M.save(params, out)
    loss_path = out.with_suffix(".loss.csv")
    with open(loss_path, "w", newline="\n") as fh:
        fh.write("epoch,loss\n")
        for i, v in enumerate(result.loss_history, start=1):
            fh.write(f"{i},{v!r}\n")
    write_manifest(
        out.with_suffix(".manifest.json"), "train", cfg,
        {"bearings": [r.id for r in runs], "samples": len(samples)},
    )
    print(f"saved {out} ({params.param_count()} parameters, final loss {result.loss_history[-1]:.4f})")
    return 0


def cmd_evaluate(args, fit=None) -> int:
    cfg = resolve_config(args)
    runs = load_runs(cfg)
    if len(runs) < 2:
        raise UsageError(f"evaluation needs at least 2 bearings, found {len(runs)}")
    out = Path(args.out_dir)
    (out / "predictions").mkdir(parents=True, exist_ok=True)

    def fold(bid, m):
        log.info("fold %s: MAE %.3f", bid, m)

    report = T.evaluate_loocv(
        runs, cfg["train"], cfg["model"], cfg["stft"], stride=cfg["data"]["stride"], fit=fit, on_fold=fold
    )
    report.to_csv(out / "mae.csv")
    for bid in report.series:
        report.series_to_csv(bid, out / "predictions" / f"{bid}.csv")
    if report.loss_histories:
        with open(out / "loss_history.csv", "w", newline="\n") as fh:
            fh.write("bearing,epoch,loss\n")
            for bid, hist in report.loss_histories.items():
                for i, v in enumerate(hist, start=1):
                    fh.write(f"{bid},{i},{v!r}\n")
    write_manifest(out / "manifest.json", "evaluate", cfg, {"bearings": [r.id for r in runs], "skipped": report.skipped})
    print(f"mean MAE {report.mean_mae:.3f} over {len(report.per_bearing)} bearings")
    return 0


def _load_checkpoint(path, cfg, args) -> M.ModelParams:
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    try:
        params = M.load(path)
    except M.CheckpointError as e:
        raise RuntimeFailure(str(e)) from None
    if getattr(args, "config", None) is not None:
        doc = _read_config_file(args.config)
        if "model" in doc:
            expected = cfg["model"]
            if expected != params.config:
                diff = sorted(
                    k for k in asdict(expected) if asdict(expected)[k] != asdict(params.config)[k]
                )
                raise RuntimeFailure(f"checkpoint model config differs from --config in {diff}")
    if params.norm_stats is None:
        raise RuntimeFailure(f"{path}: checkpoint carries no normalization statistics")
    return params


def _bearing_windows(params, run, stft_cfg):
    stack = D.spectrogram_stack(run, stft_cfg, bins=params.config.bins)
    return stack, dsp.normalize(stack, params.norm_stats)


def cmd_predict(args) -> int:
    cfg = resolve_config(args)
    params = _load_checkpoint(args.model, cfg, args)
    bdir = Path(args.bearing_dir)
    if not bdir.is_dir():
        raise UsageError(f"bearing directory not found: {bdir}")
    run = D.load_bearing(bdir)
    w = params.config.sequence_window
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    rows = []
    if len(run) < w:
        log.warning("%s has %d recordings, fewer than the window %d; no predictions", run.id, len(run), w)
    else:
        _, normed = _bearing_windows(params, run, cfg["stft"])
        ends = np.arange(w - 1, len(run))
        x = np.stack([normed[e - w + 1 : e + 1] for e in ends]).astype(params.dtype)
        preds = M.forward(params, x)
        if not np.all(np.isfinite(preds)):
            raise RuntimeFailure("non-finite prediction")
        rows = list(zip(ends, preds))
    with open(out, "w", newline="\n") as fh:
        fh.write("end_index,predicted_rul_pct\n")
        for e, p in rows:
            fh.write(f"{int(e)},{float(p)!r}\n")
    print(f"wrote {len(rows)} predictions to {out}")
    return 0


def parse_indices(spec: str, n: int, w: int) -> list[int]:
    """``early,mid,late`` or explicit recording indices; valid range is [w-1, n-1]."""
    lo, hi = w - 1, n - 1
    if hi < lo:
        raise UsageError(f"bearing has {n} recordings, fewer than the window {w}")
    named = {"early": lo, "mid": (lo + hi) // 2, "late": hi}
    out = []
    for tok in spec.split(","):
        tok = tok.strip()
        if tok in named:
            out.append(named[tok])
            continue
        try:
            idx = int(tok)
        except ValueError:
            raise UsageError(f"bad index {tok!r}: use early, mid, late or an integer") from None
        if not lo <= idx <= hi:
            raise UsageError(f"index {idx} out of range; valid recording indices are {lo}..{hi}")
        out.append(idx)
    return out


def _write_matrix_csv(path, header, rows) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def cmd_heatmap(args) -> int:
    cfg = resolve_config(args)
    params = _load_checkpoint(args.model, cfg, args)
    bdir = Path(args.bearing_dir)
    if not bdir.is_dir():
        raise UsageError(f"bearing directory not found: {bdir}")
    run = D.load_bearing(bdir)
    w = params.config.sequence_window
    indices = parse_indices(args.indices, len(run), w)
    out = Path(args.out_dir)
    (out / "input").mkdir(parents=True, exist_ok=True)
    stft_cfg = cfg["stft"]
    _, normed = _bearing_windows(params, run, stft_cfg)
    bin_hz = stft_cfg.bin_hz
    freq_header = [repr(float(k * bin_hz)) for k in range(params.config.bins)]
    for idx in indices:
        window = normed[idx - w + 1 : idx + 1].astype(params.dtype)
        maps = M.capture_attention(params, window)
        ms = maps.ms[-1]
        mc = maps.mc[-1]
        dsp.write_pgm(out / f"ms_{idx:05d}.pgm", dsp.to_gray8(ms, scale=1.0))
        _write_matrix_csv(out / f"ms_{idx:05d}.csv", freq_header, ms)
        _write_matrix_csv(out / f"mc_{idx:05d}.csv", [f"c{c}" for c in range(len(mc))], [mc])
        spec = dsp.stft(run.recordings[idx].samples, stft_cfg)
        dsp.write_spectrogram_csv(out / "input" / f"spec_{idx:05d}.csv", spec)
        dsp.write_spectrogram_pgm(out / "input" / f"spec_{idx:05d}.pgm", spec)
    write_manifest(
        out / "manifest.json", "heatmap", cfg,
        {"bearing": run.id, "indices": indices, "model": Path(args.model).name},
    )
    print(f"wrote heatmaps for indices {indices} to {out}")
    return 0


# --------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _add_common(p, training=False):
    p.add_argument("--config", help="TOML file with [stft], [model], [train], [data] sections")
    if training:
        src = p.add_argument_group("data source")
        src.add_argument("--data-dir", help=f"bearing directory or directory of bearings (default ${DATA_ROOT_ENV})")
        src.add_argument("--synthetic", action="store_true", help="use the built-in synthetic fleet")
        p.add_argument("--epochs", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--learning-rate", type=float)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--precision", choices=["f32", "f64"])
        p.add_argument("--lstm-hidden", type=int)
        p.add_argument("--window", type=int, help="snapshots per input sequence")
        p.add_argument("--stride", type=int, help="window stride for training samples")
        p.add_argument("--life-n", type=int, help="recordings per synthetic bearing")
        p.add_argument("--fleet-seed", type=int, help="seed of the synthetic fleet")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="salcnn", description="Bearing remaining-useful-life pipeline.")
    parser.add_argument("--version", action="version", version=f"salcnn {version_string()}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("preprocess", help="write spectrogram CSV/PGM files for each recording")
    _add_common(p)
    p.add_argument("--data-dir", help=f"data root (default ${DATA_ROOT_ENV})")
    p.add_argument("--bearing", help="bearing subdirectory of the data root; all bearings if omitted")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train on every bearing and save a checkpoint")
    _add_common(p, training=True)
    p.add_argument("--out", help="checkpoint path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="leave-one-bearing-out MAE report")
    _add_common(p, training=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="predict RUL percent for every window of one bearing")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--bearing-dir", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("heatmap", help="export CBAM attention maps for chosen recordings")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--bearing-dir", required=True)
    p.add_argument("--indices", default="early,mid,late", help="early, mid, late or recording indices")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("synth", help="write a synthetic run-to-failure fleet as acc CSV files")
    _add_common(p)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--life-n", type=int)
    p.add_argument("--fleet-seed", type=int)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None, *, fit=None) -> int:
    """Run one command; ``fit`` replaces model training in ``evaluate`` (test hook)."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"salcnn: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help / --version
        return int(e.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(message)s",
        stream=sys.stderr,
    )
    try:
        if args.command == "evaluate":
            return cmd_evaluate(args, fit=fit)
        return args.func(args)
    except UsageError as e:
        print(f"salcnn: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (dsp.ConfigurationError, D.DataFormatError) as e:
        print(f"salcnn: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (RuntimeFailure, T.TrainingDivergedError, M.CheckpointError, DimensionError, FloatingPointError) as e:
        print(f"salcnn: runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as e:
        print(f"salcnn: runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
