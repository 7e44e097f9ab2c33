"""``fedcodec`` command line: capture | train-codec | fedrun | dp | report.

Exit codes: 0 success, 1 user error (bad flags, config, inputs), 2 internal
error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import capture, fedsim, lora
from .codec import AutoEncoderCodec, UnsupportedFamilyError
from .config import ConfigError, dump_config, load_config
from .privacy import EPSILON_PRESETS, InfeasiblePrivacyTarget, accountant_table, gdp_delta, gdp_mu

EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 1, 2

USER_ERRORS = (
    ConfigError,
    ValueError,
    KeyError,
    FileNotFoundError,
    IsADirectoryError,
    capture.StoreFormatError,
    InfeasiblePrivacyTarget,
    UnsupportedFamilyError,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _write_csv(rows: List[dict], path: Optional[str], out=None) -> str:
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    text = buf.getvalue()
    if path:
        Path(path).write_text(text)
    else:
        (out or sys.stdout).write(text)
    return text


# ----------------------------------------------------------------- commands


def cmd_capture(args) -> int:
    cfg = load_config(args.config)
    store, _ = capture.capture_run(cfg.fed, rounds=args.rounds)
    capture.write_store(store, args.out)
    if args.stats:
        _write_csv(capture.snapshot_stats(store), args.stats)
    print(f"wrote {len(store)} snapshots to {args.out}", file=sys.stderr)
    return EXIT_OK


def cmd_train_codec(args) -> int:
    cfg = load_config(args.config)
    store = capture.read_store(args.snapshots)
    train, test = capture.split(store, cfg.codec.train_fraction, cfg.codec.split_seed)
    spec = cfg.codec.build_spec((store.rows, store.cols))
    epochs = cfg.codec.epochs if args.epochs is None else args.epochs
    codec = AutoEncoderCodec(spec, epochs=epochs, lr=cfg.codec.lr, batch_size=cfg.codec.batch_size,
                             random_state=cfg.codec.random_state, verbose=args.verbose)
    codec.fit(train.canvases(), X_val=test.canvases())
    codec.save(args.out)
    loss_path = args.loss_csv or str(Path(args.out).with_suffix(".loss.csv"))
    h = codec.history_
    _write_csv([{"epoch": i + 1, "train_mse": a, "test_mse": b} for i, (a, b) in enumerate(zip(h.train_loss, h.test_loss))],
               loss_path)
    print(f"codec {codec.codec_id()} -> {args.out}; loss curve -> {loss_path}", file=sys.stderr)
    return EXIT_OK


def cmd_fedrun(args) -> int:
    cfg = load_config(args.config)
    fed = cfg.fed
    overrides = {}
    if args.codec is not None:
        overrides["codec"] = args.codec
    if args.downlink is not None:
        overrides["downlink"] = args.downlink
    if args.rounds is not None:
        overrides["rounds"] = args.rounds
    if overrides:
        fed = replace(fed, **overrides)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tr = fedsim.run_experiment(fed, threads=args.threads)
    tr.to_csv(out / "transcript.csv")
    capture.save_tensors(out / "model.cgfg", {"delta": tr.state.delta}, meta={"codec_id": tr.codec_id})
    manifest = tr.manifest()
    manifest["experiment"] = json.loads(dump_config(replace(cfg, fed=fed)))
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))
    print(f"final test accuracy {tr.final_accuracy:.4f}; outputs in {out}", file=sys.stderr)
    return EXIT_OK


def cmd_dp(args) -> int:
    if not 0 < args.delta < 1:
        raise ValueError("delta must be in (0, 1)")
    if args.sigma is not None:
        eps_list = args.epsilon or list(EPSILON_PRESETS)
        rows = []
        for eps in eps_list:
            mu = gdp_mu(args.p, args.rounds, args.sigma)
            rows.append({"epsilon": eps, "p": args.p, "T": args.rounds, "sigma": args.sigma,
                         "mu": mu, "delta": gdp_delta(eps, mu)})
    else:
        rows = accountant_table(args.epsilon or list(EPSILON_PRESETS), args.delta, args.p, args.rounds)
    _write_csv(rows, args.out)
    return EXIT_OK


REPORT_FIELDS = ("test_accuracy", "uplink_bytes", "recon_snr", "bytes_saved")


def merge_transcripts(paths: List[str]) -> List[dict]:
    """Join transcripts on ``round``; one column group per run."""
    if not paths:
        raise UsageError("report needs at least one transcript")
    runs = []
    for p in paths:
        with open(p, newline="") as fh:
            rows = {int(r["round"]): r for r in csv.DictReader(fh)}
        runs.append((Path(p).parent.name or Path(p).stem, rows))
    labels = [lbl for lbl, _ in runs]
    if len(set(labels)) != len(labels):
        labels = [f"run{i}" for i in range(len(runs))]
    all_rounds = sorted(set().union(*(r.keys() for _, r in runs)))
    merged = []
    for t in all_rounds:
        row = {"round": t}
        for lbl, (_, rows) in zip(labels, runs):
            r = rows.get(t)
            for f in REPORT_FIELDS:
                key = f"{lbl}:{f}"
                if r is None:
                    row[key] = ""
                elif f == "bytes_saved":
                    row[key] = repr(1.0 - int(r["uplink_bytes_per_client"]) / int(r["identity_bytes_per_client"]))
                else:
                    row[key] = r[f]
        merged.append(row)
    return merged


def cmd_report(args) -> int:
    _write_csv(merge_transcripts(args.transcripts), args.out)
    return EXIT_OK


# ------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fedcodec", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=1, help="client worker threads (default 1, deterministic)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    c = sub.add_parser("capture", help="record client update canvases from an uncompressed run")
    c.add_argument("--config")
    c.add_argument("--out", required=True)
    c.add_argument("--rounds", type=int)
    c.add_argument("--stats", help="optional per-round statistics CSV")
    c.set_defaults(func=cmd_capture)

    c = sub.add_parser("train-codec", help="fit the autoencoder on captured snapshots")
    c.add_argument("--config")
    c.add_argument("--snapshots", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--epochs", type=int)
    c.add_argument("--loss-csv")
    c.set_defaults(func=cmd_train_codec)

    c = sub.add_parser("fedrun", help="federated fine-tuning with a codec on the uplink")
    c.add_argument("--config")
    c.add_argument("--codec", help="'identity' or a codec checkpoint path")
    c.add_argument("--downlink", choices=("plain", "encoded"))
    c.add_argument("--rounds", type=int)
    c.add_argument("--out-dir", required=True)
    c.set_defaults(func=cmd_fedrun)

    c = sub.add_parser("dp", help="privacy accountant calculator")
    c.add_argument("--epsilon", type=float, action="append", help="repeatable; default presets 0.25, 2, 8")
    c.add_argument("--delta", type=float, default=1e-5)
    c.add_argument("--p", type=float, default=1.0, help="client sampling probability")
    c.add_argument("--rounds", type=int, default=20)
    c.add_argument("--sigma", type=float, help="given noise multiplier: report delta instead of calibrating")
    c.add_argument("--out")
    c.set_defaults(func=cmd_dp)

    c = sub.add_parser("report", help="merge transcripts by round")
    c.add_argument("transcripts", nargs="*")
    c.add_argument("--out")
    c.set_defaults(func=cmd_report)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"fedcodec: error: {exc}", file=sys.stderr)
        return EXIT_USER
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.threads < 1:
        print("fedcodec: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USER
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"fedcodec: error: {exc}", file=sys.stderr)
        return EXIT_USER
    except USER_ERRORS as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"fedcodec: error: {msg}", file=sys.stderr)
        return EXIT_USER
    except Exception as exc:  # pragma: no cover - defensive
        print(f"fedcodec: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
