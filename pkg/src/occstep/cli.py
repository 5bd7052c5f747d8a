"""Command-line entry points: generate, corrupt, train, eval, gradcheck.

Every command exits 0 on success and 1 with a one-line ``error: ...`` message
on failure.  All randomness flows from ``--seed``.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import dataclasses
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import tensor as tn
from .archive import (SUFFIX, list_archives, load_checkpoint, read_archive, read_config,
                      save_checkpoint, threads_from_env, write_archive)
from .benchmark import REGIMES, CorruptionSpec, SceneConfig, corrupt, gen_synthetic_scene
from .metrics import format_table
from .model import ModelConfig, OccWorldModel
from .rollout import RolloutConfig, TrainConfig, evaluate, split_all, train
from .sequence import join, split

log = logging.getLogger("occstep")

SECTIONS = {"model": ModelConfig, "train": TrainConfig, "rollout": RolloutConfig,
            "scene": SceneConfig}
INDEX_FILE = "index.txt"


def load_sections(path) -> dict[str, dict]:
    if path is None:
        return {k: {} for k in SECTIONS}
    return read_config(path, SECTIONS)


def scene_seed(seed: int, i: int) -> int:
    return int(np.random.SeedSequence([seed, i]).generate_state(1)[0])


# ------------------------------------------------------------------ commands


def cmd_generate(scene_cfg: SceneConfig, n: int, seed: int, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(n):
        seq = gen_synthetic_scene(scene_cfg, scene_seed(seed, i))
        paths.append(write_archive(seq, out / f"scene_{i:04d}{SUFFIX}"))
    (out / INDEX_FILE).write_text("".join(p.name + "\n" for p in paths))
    return paths


def cmd_corrupt(in_path, spec: CorruptionSpec, out_path, history: int | None = None) -> Path:
    """Corrupt the first ``history`` frames (default: all) and keep the rest untouched."""
    seq = read_archive(in_path)
    if history is None or history >= len(seq):
        result = corrupt(seq, spec)
    else:
        hist, fut, boundary = split(seq, history)
        result = join(corrupt(hist, spec), fut, boundary)
    return write_archive(result, out_path)


def _load_dataset(data_dir):
    paths = list_archives(data_dir)
    if not paths:
        raise FileNotFoundError(f"no {SUFFIX} archives in {data_dir}")
    return [read_archive(p) for p in paths]


def cmd_train(data_dir, sections: dict, seed: int, ckpt_out, loss_csv=None, resume=None):
    data = _load_dataset(data_dir)
    geom = data[0].geometry
    if any(s.geometry != geom for s in data):
        raise ValueError("all training archives must share one grid geometry")
    model_cfg = ModelConfig(grid=geom, K=data[0].num_classes,
                            **{k: v for k, v in sections["model"].items() if k != "K"})
    if "K" in sections["model"] and sections["model"]["K"] != data[0].num_classes:
        raise ValueError("model.K does not match the class count of the data")
    tcfg = TrainConfig(**{**sections["train"], "seed": seed})
    start, opt, resume_state = 0, None, None
    if resume is not None:
        model, info = load_checkpoint(resume, model_cfg)
        start = info["step"]
        opt = tn.AdamW(model.parameters(), lr=tcfg.lr, betas=tcfg.betas,
                       weight_decay=tcfg.weight_decay)
        if info["adam"] is not None:
            opt.load_state(info["adam"])
        resume_state = info["state"]
        if info["seed"] != seed:
            raise ValueError(f"checkpoint was trained with seed {info['seed']}, not {seed}")
    else:
        model = OccWorldModel(model_cfg, seed=seed)
        opt = tn.AdamW(model.parameters(), lr=tcfg.lr, betas=tcfg.betas,
                       weight_decay=tcfg.weight_decay)
    remaining = max(tcfg.steps - start, 0)
    report = train(data, model, dataclasses.replace(tcfg, steps=remaining), optimizer=opt,
                   start_step=start, resume_state=resume_state)
    save_checkpoint(ckpt_out, model, seed, report.steps, opt, report.final_state,
                    extra={"ce_before": report.ce_before, "ce_after": report.ce_after})
    if loss_csv is not None:
        with open(loss_csv, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "loss"])
            for i, v in enumerate(report.step_losses, start + 1):
                w.writerow([i, repr(v)])
    return report


def cmd_eval(data_dir, ckpt, mode: str, regimes, sections: dict | None = None, seed: int = 0,
             threads: int | None = None, p_f: float = 0.25, p_v: float = 0.25,
             views: int = 6) -> list[dict]:
    """Rows of regime x method scores; the copy-forward baseline follows each regime."""
    if mode not in ("reactive", "proactive"):
        raise ValueError(f"mode must be reactive or proactive, got {mode!r}")
    sections = sections or {k: {} for k in SECTIONS}
    for r in regimes:
        if r not in REGIMES:
            raise ValueError(f"unknown regime {r!r}; expected one of {REGIMES}")
    data = _load_dataset(data_dir)
    model, _ = load_checkpoint(ckpt)
    if data[0].geometry != model.cfg.grid or data[0].num_classes != model.cfg.K:
        raise ValueError("checkpoint configuration does not match the evaluation data")
    rcfg = RolloutConfig(**sections["rollout"])
    hs, fs, ms = split_all(data, rcfg)
    threads = threads or threads_from_env()
    rows = []
    with ThreadPoolExecutor(threads) if threads > 1 else contextlib.nullcontext() as ex:
        for regime in ["original", *regimes]:
            if regime == "original":
                hist = hs
            else:
                hist = [corrupt(h, CorruptionSpec(regime, p_f, p_v, views, scene_seed(seed, i)))
                        for i, h in enumerate(hs)]
            for method, m in ((mode, mode), ("copy-forward", "copy")):
                sc = evaluate(hist, fs, model, rcfg, m, ms, executor=ex)
                rows.append({"regime": regime, "method": method, "mIoU": sc.miou, "IoU": sc.iou,
                             "L2": sc.l2, "L1": sc.l1})
    return rows


def cmd_gradcheck(seed: int = 0, include_model: bool = True):
    from .checks import gradcheck_report

    return gradcheck_report(seed, include_model)


# ------------------------------------------------------------------ argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="occstep", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write synthetic moving-box sequences")
    g.add_argument("--n", type=int, default=10)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--config")

    c = sub.add_parser("corrupt", help="apply one corruption regime to a history slice")
    c.add_argument("--in", dest="inp", required=True)
    c.add_argument("--regime", required=True)
    c.add_argument("--p-f", type=float, default=0.25)
    c.add_argument("--p-v", type=float, default=0.25)
    c.add_argument("--views", type=int, default=6)
    c.add_argument("--history", type=int)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", required=True)

    t = sub.add_parser("train", help="teacher-forced training, writes a checkpoint")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--ckpt-out", required=True)
    t.add_argument("--loss-csv")
    t.add_argument("--resume")

    e = sub.add_parser("eval", help="score rollouts per corruption regime")
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--mode", choices=("reactive", "proactive"), default="reactive")
    e.add_argument("--regimes", default="", help="comma-separated list, empty for clean only")
    e.add_argument("--p-f", type=float, default=0.25)
    e.add_argument("--p-v", type=float, default=0.25)
    e.add_argument("--views", type=int, default=6)
    e.add_argument("--config")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", help="CSV path (default: stdout)")

    k = sub.add_parser("gradcheck", help="finite-difference check of every operator")
    k.add_argument("--seed", type=int, default=0)
    k.add_argument("--ops-only", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return _dispatch(args)
    except Exception as exc:  # one-line diagnostic, non-zero exit
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"error: {msg}", file=sys.stderr)
        return 1


def _dispatch(args) -> int:
    if args.command == "generate":
        scene = SceneConfig(**load_sections(args.config)["scene"])
        paths = cmd_generate(scene, args.n, args.seed, args.out)
        print(f"wrote {len(paths)} archives to {args.out}")
    elif args.command == "corrupt":
        spec = CorruptionSpec(args.regime, args.p_f, args.p_v, args.views, args.seed)
        print(cmd_corrupt(args.inp, spec, args.out, args.history))
    elif args.command == "train":
        rep = cmd_train(args.data, load_sections(args.config), args.seed, args.ckpt_out,
                        args.loss_csv, args.resume)
        print(f"steps={rep.steps} ce_before={rep.ce_before:.5f} ce_after={rep.ce_after:.5f}")
    elif args.command == "eval":
        regimes = [r.strip() for r in args.regimes.split(",") if r.strip()]
        rows = cmd_eval(args.data, args.ckpt, args.mode, regimes, load_sections(args.config),
                        args.seed, p_f=args.p_f, p_v=args.p_v, views=args.views)
        text = format_table(rows)
        if args.out:
            Path(args.out).write_text(text)
        sys.stdout.write(text)
    elif args.command == "gradcheck":
        rep = cmd_gradcheck(args.seed, not args.ops_only)
        print("op,rel_err,status")
        print("\n".join(rep.lines()))
        if not rep.ok():
            raise ArithmeticError(f"gradient check failed (worst {rep.worst:.3e})")
    return 0


if __name__ == "__main__":
    sys.exit(main())
