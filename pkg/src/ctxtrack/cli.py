"""Command-line entry point: ``ctxtrack {selftest,train,track,ablate,generate}``.

Every command writes into a fresh run directory under ``--out`` and echoes
the effective configuration there as ``config.yaml``. Configuration comes
from ``--config`` (YAML), then ``CTXTRACK_<SECTION>__<KEY>`` environment
variables, then ``--set section.key=value`` flags, then dedicated flags.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace

import numpy as np
import yaml

from .config import RunConfig, dump_run_config, load_run_config
from .model import load_checkpoint, save_checkpoint
from .selftest import SUITES
from .synthetic import export_sequence, load_manifest, make_pool
from .trainer import (TrackingSession, ablate, build_pools, eval_metrics, evaluate, lr_scale, summarize,
                      track_sequence, train)

log = logging.getLogger("ctxtrack")


def fresh_dir(base: str, name: str) -> str:
    """Create ``base/name`` or, if taken, ``base/name-1``, ``base/name-2``, ..."""
    os.makedirs(base, exist_ok=True)
    candidate, i = os.path.join(base, name), 0
    while True:
        try:
            os.makedirs(candidate)
            return candidate
        except FileExistsError:
            i += 1
            candidate = os.path.join(base, f"{name}-{i}")


def _parse_set(items) -> dict:
    out: dict = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot:
            raise SystemExit(f"--set expects section.key=value, got {item!r}")
        out.setdefault(section, {})[name] = yaml.safe_load(value)
    return out


def _config(args) -> RunConfig:
    overrides = _parse_set(getattr(args, "set", None))
    try:
        return load_run_config(getattr(args, "config", None), overrides)
    except yaml.YAMLError as exc:
        raise SystemExit(f"config parse error: {exc}") from exc
    except (ValueError, TypeError) as exc:
        raise SystemExit(f"config error: {exc}") from exc


def _write_jsonl(path: str, records) -> None:
    with open(path, "a") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")


# -- commands ------------------------------------------------------------------

def cmd_selftest(args) -> int:
    ok = True
    for name, suite in SUITES.items():
        res = suite(seed=args.seed or 0)
        print(res.line())
        ok &= res.passed
    print("selftest:", "all suites passed" if ok else "FAILED")
    return 0 if ok else 1


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.seed is not None:
        cfg = replace(cfg, train=replace(cfg.train, seed=args.seed))
    out = fresh_dir(args.out, f"train-{cfg.digest()}")
    dump_run_config(cfg, os.path.join(out, "config.yaml"))
    train_pool, eval_pool = build_pools(cfg.data)
    loss_path = os.path.join(out, "loss.jsonl")

    def progress(step, loss, parts):
        log.info("step %d loss %.4f", step, loss)

    result = train(cfg, train_pool, progress=progress)
    _write_jsonl(loss_path, ({"step": i, "loss": float(v), "lr_scale": lr_scale(i, cfg.train), **p}
                             for i, (v, p) in enumerate(zip(result.losses, result.components))))
    save_checkpoint(result.model, os.path.join(out, "checkpoint.npz"),
                    extra={"run_digest": cfg.digest(), "steps": cfg.train.steps})
    reports = evaluate(result.model, eval_pool, cfg.data)
    _write_jsonl(os.path.join(out, "eval.jsonl"), (r.to_json() | {"sequence": i} for i, r in enumerate(reports)))
    summary = summarize(reports) | {"train_seconds": result.seconds, "final_loss": float(result.losses[-1])}
    with open(os.path.join(out, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2)
    print(out)
    return 0


def _sequence(args, cfg: RunConfig):
    if args.manifest:
        return load_manifest(args.manifest)
    d = cfg.data
    length = args.length or d.eval_length
    seed = d.seed + 20011 if args.seed is None else args.seed
    return make_pool(d.kind, 1, length, d.canvas, seed=seed)[0]


def cmd_track(args) -> int:
    cfg = _config(args)
    model, meta = load_checkpoint(args.checkpoint)
    cfg = replace(cfg, model=model.cfg)
    seq = _sequence(args, cfg)
    out = fresh_dir(args.out, "track")
    dump_run_config(cfg, os.path.join(out, "config.yaml"))
    snap_dir = os.path.join(out, "snapshots")
    session = None
    if args.resume:
        session = TrackingSession(model, cfg.data.search_factor, cfg.data.template_factor,
                                  record_attention=args.dump_attention)
        with np.load(args.resume) as z:
            session.restore(z)
    boxes_path = os.path.join(out, "boxes.jsonl")
    attn_path = os.path.join(out, "attention.jsonl")

    def on_frame(rec, sess):
        row = rec.to_json()
        attention = row.pop("attention", None)
        row["gt"] = [float(v) for v in seq.boxes[rec.frame]]
        _write_jsonl(boxes_path, [row])
        if attention is not None:
            _write_jsonl(attn_path, [{"frame": rec.frame, "weights": attention}])
        if args.snapshot_every and rec.frame % args.snapshot_every == 0:
            os.makedirs(snap_dir, exist_ok=True)
            np.savez(os.path.join(snap_dir, f"frame{rec.frame:05d}.npz"), **sess.snapshot())

    res = track_sequence(model, seq, search_factor=cfg.data.search_factor,
                         template_factor=cfg.data.template_factor, record_attention=args.dump_attention,
                         session=session, stop=args.stop, on_frame=on_frame)
    first = res.records[0].frame if res.records else 0
    if first == 0 and len(res.boxes) > 1:
        rep = eval_metrics(res.boxes[1:], seq.boxes[1:len(res.boxes)], seq.occluded[1:len(res.boxes)],
                           fps=res.fps, search_factor=cfg.data.search_factor, grid=model.cfg.grid)
        with open(os.path.join(out, "metrics.json"), "w") as fh:
            json.dump(rep.to_json(), fh, indent=2)
    np.savez(os.path.join(out, "final_state.npz"), **res.session.snapshot())
    print(out)
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    axis = args.axis or cfg.ablation.axis
    seeds = cfg.ablation.seeds
    if args.seed is not None:
        seeds = tuple(args.seed + i for i in range(len(seeds)))
    workers = args.workers or cfg.ablation.workers
    cfg = replace(cfg, ablation=replace(cfg.ablation, axis=axis, seeds=seeds, workers=workers))
    out = fresh_dir(args.out, f"ablate-{axis}-{cfg.digest()}")
    dump_run_config(cfg, os.path.join(out, "config.yaml"))
    runs_path = os.path.join(out, "runs.jsonl")
    report = ablate(cfg, axis, seeds, workers, on_row=lambda r: _write_jsonl(runs_path, [r]))
    with open(os.path.join(out, "variants.json"), "w") as fh:
        json.dump(report.configs, fh, indent=2)
    write_ablation_csv(report, os.path.join(out, "ablation.csv"))
    with open(os.path.join(out, "summary.json"), "w") as fh:
        json.dump({"axis": report.axis, "reference": report.reference, "variants": report.summary}, fh, indent=2)
    print(out)
    return 0


CSV_COLUMNS = ["variant", "seed", "auc", "mean_iou", "precision", "diff_mean_iou", "diff_mean_iou_stderr",
               "diff_auc", "diff_auc_stderr", "auc_stderr", "mean_iou_stderr"]


def write_ablation_csv(report, path: str) -> None:
    """One row per (variant, seed), then one ``summary:<variant>`` row each."""
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, extrasaction="ignore")
        w.writeheader()
        for r in report.rows:
            w.writerow(r)
        for s in report.summary:
            w.writerow(s | {"variant": f"summary:{s['variant']}", "seed": f"n={s['n']}"})


def cmd_generate(args) -> int:
    cfg = _config(args)
    d = cfg.data
    seed = d.seed if args.seed is None else args.seed
    seq = make_pool(d.kind, 1, args.length or d.eval_length, d.canvas, seed=seed)[0]
    out = fresh_dir(args.out, f"sequence-{d.kind}-{seed}")
    dump_run_config(cfg, os.path.join(out, "config.yaml"))
    print(export_sequence(seq, out))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ctxtrack", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--config", help="YAML run config")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one field")
        sp.add_argument("--seed", type=int)
        if out:
            sp.add_argument("--out", default="runs", help="parent directory for run outputs")

    sp = sub.add_parser("selftest", help="oracle, streaming, gradient and GIoU suites")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_selftest)

    sp = sub.add_parser("train", help="train a tracker and evaluate it on held-out sequences")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("track", help="track one sequence with a checkpoint")
    common(sp)
    sp.add_argument("checkpoint")
    sp.add_argument("--manifest", help="manifest.json written by 'generate'")
    sp.add_argument("--length", type=int)
    sp.add_argument("--dump-attention", action="store_true")
    sp.add_argument("--resume", help="state snapshot (.npz) to continue from")
    sp.add_argument("--snapshot-every", type=int, default=0)
    sp.add_argument("--stop", type=int, help="stop before this frame index")
    sp.set_defaults(func=cmd_track)

    sp = sub.add_parser("ablate", help="paired multi-seed ablation along one axis")
    common(sp)
    sp.add_argument("--axis")
    sp.add_argument("--workers", type=int)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("generate", help="export a synthetic sequence (frames.npy + manifest.json)")
    common(sp)
    sp.add_argument("--length", type=int)
    sp.set_defaults(func=cmd_generate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
