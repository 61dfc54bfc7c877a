"""``iag`` command line: data generation, poisoning, training, evaluation and
the experiment drivers built on them.

Every command works inside a run directory::

    <run>/config.txt            flat ``section.key = value`` snapshot
    <run>/manifest.jsonl        training records (epoch 0)
    <run>/checkpoints/*.bin
    <run>/reports/*.csv|json|txt
    <run>/panels/*.ppm
    <run>/runlog.csv

Exit status is 1 when inputs fail validation and 2 when a stage fails at run
time; the message on stderr names the stage.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import shutil
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .defenselab import (
    Beatrix, SpectralSignature, defend_and_rescore, detection_report, extract_features,
)
from .diffengine import checkpoint
from .groundeval import evaluate, poison_sweep, timing, transfer_eval, write_transcripts
from .jointtrain import ABLATIONS, Batcher, TrainConfig, load_models, train
from .poisoncraft import eval_records, plan_poison, plan_to_json, write_records, build_records
from .scenegen import SceneConfig, generate_dataset, load_dataset, write_ppm
from .victim import VictimConfig

log = logging.getLogger("iag")

CONFIG_FILE = "config.txt"


class ValidationError(ValueError):
    """Bad flags or missing inputs; maps to exit status 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# -- config snapshot ----------------------------------------------------------

def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ",".join(_fmt(v) for v in value)
    return "" if value is None else str(value)


def read_config(run: Path) -> dict[str, str]:
    path = Path(run) / CONFIG_FILE
    out: dict[str, str] = {}
    if path.exists():
        for line in path.read_text().splitlines():
            if " = " in line:
                k, v = line.split(" = ", 1)
                out[k.strip()] = v.strip()
    return out


def write_config(run: Path, section: str, values: dict) -> None:
    """Replace ``section`` in the run's config snapshot; keys stay sorted."""
    cfg = {k: v for k, v in read_config(run).items() if not k.startswith(section + ".")}
    cfg.update({f"{section}.{k}": _fmt(v) for k, v in values.items()})
    Path(run).mkdir(parents=True, exist_ok=True)
    text = "".join(f"{k} = {cfg[k]}\n" for k in sorted(cfg))
    (Path(run) / CONFIG_FILE).write_text(text)


def _need(cfg: dict, key: str, stage: str) -> str:
    if key not in cfg:
        raise ValidationError(f"{key} missing from {CONFIG_FILE}; run `iag {stage}` first")
    return cfg[key]


def _opt_float(s: str | None):
    return None if s in (None, "", "None") else float(s)


# -- shared helpers -------------------------------------------------------------

def _load_data(path) -> object:
    path = Path(path)
    if not (path / "dataset.json").exists():
        raise ValidationError(f"no dataset at {path} (expected dataset.json)")
    return load_dataset(path)


def _data_dir(run: Path, cfg: dict) -> Path:
    return (Path(run) / _need(cfg, "poison.data", "poison")).resolve()


def _victim_config(cfg: dict, image_size: int) -> VictimConfig:
    v = VictimConfig(image_size=image_size)
    for key in ("d_model", "n_layers", "n_heads"):
        if f"train.{key}" in cfg:
            setattr(v, key, int(cfg[f"train.{key}"]))
    return v


def _train_config(args) -> TrainConfig:
    cfg = TrainConfig.toy(
        max_steps=args.steps, seed=args.seed, beta=args.beta, ablation=args.ablation,
        checkpoint_every=args.checkpoint_every,
    )
    if args.lr is not None:
        cfg.lr = args.lr
    if args.batch_size is not None:
        cfg.batch_size = args.batch_size
    if args.budget is not None:
        cfg.budget = args.budget
    if args.max_grad_norm is not None:
        cfg.max_grad_norm = args.max_grad_norm if args.max_grad_norm > 0 else None
    try:
        cfg.validate()
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc
    return cfg


def _stored_train_config(cfg: dict) -> TrainConfig:
    base = TrainConfig()
    kw = {}
    for name, default in asdict(base).items():
        key = f"train.{name}"
        if key not in cfg:
            continue
        raw = cfg[key]
        if name in ("budget", "max_grad_norm"):
            kw[name] = _opt_float(raw)
        elif isinstance(default, bool):
            kw[name] = raw == "True"
        elif isinstance(default, int):
            kw[name] = int(raw)
        elif isinstance(default, float):
            kw[name] = float(raw)
        else:
            kw[name] = raw
    return TrainConfig(**kw)


def _fit(run: Path, data, poisoned_ids, tcfg: TrainConfig, vcfg: VictimConfig, data_seed: int,
         train_ids=None):
    scenes = data.split("train")
    if train_ids is not None:
        keep = set(train_ids)
        scenes = [s for s in scenes if s.id in keep]
    return train(tcfg, scenes, poisoned_ids, run_dir=run, victim_config=vcfg, data_seed=data_seed)


def _score_run(models, clean_models, data, split: str, seed: int, budget=None, trigger_only=False):
    scenes = data.split(split)
    if not scenes:
        raise ValidationError(f"dataset has no {split!r} split")
    batcher = Batcher(models.vocab, scenes)
    return evaluate(
        models, batcher, eval_records(scenes, seed, False), eval_records(scenes, seed, True),
        clean_models, budget=budget, trigger_only=trigger_only,
    )


def _write_metrics(reports: Path, stem: str, report, title: str) -> None:
    reports.mkdir(parents=True, exist_ok=True)
    report.write_csv(reports / f"{stem}.csv")
    (reports / f"{stem}.json").write_text(json.dumps(report.to_json(), indent=1, sort_keys=True) + "\n")
    (reports / f"{stem}.txt").write_text(report.table(title))


def _write_table(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _pct(v):
    return "" if v is None else f"{v:.2f}"


# -- commands -----------------------------------------------------------------

def cmd_gen_data(args) -> None:
    counts = {"train": args.train, "val": args.val}
    if args.test:
        counts.update(testA=args.test, testB=args.test)
    config = SceneConfig(counts=counts, image_size=args.image_size, seed=args.seed,
                         position_qualifier=args.position_qualifier)
    try:
        config.validate()
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc
    out = Path(args.out)
    if (out / "images").exists():
        shutil.rmtree(out / "images")
    generate_dataset(config, out)
    print(f"wrote {sum(counts.values())} scenes to {out}")


def cmd_poison(args) -> None:
    if not 0 <= args.alpha <= 1:
        raise ValidationError(f"--alpha must lie in [0, 1], got {args.alpha}")
    data = _load_data(args.data)
    run = Path(args.run)
    scenes = data.split("train")
    plan = plan_poison(scenes, args.alpha, args.seed)
    run.mkdir(parents=True, exist_ok=True)
    records = build_records(scenes, plan.selected, args.seed, 0)
    write_records(run / "manifest.jsonl", records, {s.id: s for s in scenes})
    (run / "reports").mkdir(exist_ok=True)
    (run / "reports" / "poison_plan.json").write_text(json.dumps(plan_to_json(plan), indent=1) + "\n")
    write_config(run, "poison", {
        "data": os.path.relpath(Path(args.data).resolve(), run.resolve()),
        "alpha": args.alpha, "seed": args.seed, "n_poisoned": len(plan.selected),
        "n_candidates": len(plan.candidates),
    })
    print(f"poisoned {len(plan.selected)} of {len(plan.candidates)} candidate scenes")


def _poisoned_ids(run: Path) -> list[str]:
    path = run / "reports" / "poison_plan.json"
    if not path.exists():
        raise ValidationError(f"{path} missing; run `iag poison` first")
    return json.loads(path.read_text())["selected"]


def cmd_train(args) -> None:
    run = Path(args.run)
    cfg = read_config(run)
    data = _load_data(_data_dir(run, cfg))
    tcfg = _train_config(args)
    vcfg = _victim_config({f"train.{k}": getattr(args, k) for k in ("d_model", "n_layers", "n_heads")},
                          data.config.image_size)
    data_seed = int(cfg["poison.seed"])
    write_config(run, "train", {**asdict(tcfg), "d_model": vcfg.d_model, "n_layers": vcfg.n_layers,
                                "n_heads": vcfg.n_heads, "clean_control": args.clean_control})
    _, runlog = _fit(run, data, _poisoned_ids(run), tcfg, vcfg, data_seed)
    print(f"trained {tcfg.max_steps} steps; final loss {runlog.rows[-1][1]:.4f}")
    if args.clean_control:
        _train_clean(run, data, tcfg, vcfg, data_seed)


def _train_clean(run: Path, data, tcfg: TrainConfig, vcfg: VictimConfig, data_seed: int) -> None:
    """Same data and seed with nothing poisoned; checkpoint stored as clean.bin."""
    clean_cfg = TrainConfig(**{**asdict(tcfg), "ablation": "none", "checkpoint_every": 0})
    models, runlog = train(clean_cfg, data.split("train"), [], victim_config=vcfg, data_seed=data_seed)
    checkpoint.save(run / "checkpoints" / "clean.bin", models.state())
    (run / "reports").mkdir(exist_ok=True)
    runlog.write_csv(run / "reports" / "clean_runlog.csv")
    print("trained clean control")


def _models_for(run: Path, cfg: dict, data, name: str = "final.bin"):
    path = run / "checkpoints" / name
    if not path.exists():
        raise ValidationError(f"{path} missing; run `iag train` first")
    return load_models(path, victim_config=_victim_config(cfg, data.config.image_size))


def cmd_eval(args) -> None:
    run = Path(args.run)
    cfg = read_config(run)
    data = _load_data(_data_dir(run, cfg))
    tcfg = _stored_train_config(cfg)
    models = _models_for(run, cfg, data)
    clean_path = run / "checkpoints" / "clean.bin"
    clean = _models_for(run, cfg, data, "clean.bin") if clean_path.exists() else None
    report, transcripts = _score_run(
        models, clean, data, args.split, args.seed, budget=tcfg.budget,
        trigger_only=tcfg.ablation == "trigger_only",
    )
    reports = run / "reports"
    _write_metrics(reports, "metrics", report, args.split)
    for key, ts in transcripts.items():
        write_transcripts(reports / f"transcripts_{key}.jsonl", ts)
    print(report.table(args.split), end="")


def _sub_run(parent: Path, name: str, data_dir: Path, alpha: float, seed: int, args, ablation="none"):
    """poison + train + eval in ``parent/name``; returns the MetricsReport."""
    run = parent / name
    ns = argparse.Namespace(**vars(args))
    cmd_poison(argparse.Namespace(data=str(data_dir), run=str(run), alpha=alpha, seed=seed))
    ns.run, ns.ablation = str(run), ablation
    cmd_train(ns)
    cmd_eval(argparse.Namespace(run=str(run), split=args.split, seed=seed))
    return _read_metrics(run)


def _read_metrics(run: Path):
    from .groundeval import MetricsReport
    blob = json.loads((run / "reports" / "metrics.json").read_text())
    return MetricsReport(blob["ASR@0.5"], blob["BA@0.5"], blob["CA@0.5"],
                         {k: tuple(v) for k, v in blob["counts"].items()}, blob["malformed_rate"])


def cmd_sweep(args) -> None:
    rates = [float(r) for r in args.rates.split(",")]
    if any(not 0 <= r <= 1 for r in rates):
        raise ValidationError("poison rates must lie in [0, 1]")
    parent = Path(args.run)
    results = poison_sweep(rates, lambda r: _sub_run(parent, f"alpha_{r:g}", Path(args.data), r, args.seed, args))
    rows = [(f"{r:g}", _pct(m.asr), _pct(m.ba), _pct(m.ca)) for r, m in results.items()]
    _write_table(parent / "reports" / "sweep.csv", ("alpha", "ASR@0.5", "BA@0.5", "CA@0.5"), rows)
    for row in rows:
        print(*row, sep="\t")


def cmd_ablate(args) -> None:
    modes = args.modes.split(",")
    bad = [m for m in modes if m not in ABLATIONS]
    if bad:
        raise ValidationError(f"unknown ablation modes {bad}; choose from {ABLATIONS}")
    parent = Path(args.run)
    rows = []
    for mode in modes:
        m = _sub_run(parent, mode, Path(args.data), args.alpha, args.seed, args, ablation=mode)
        rows.append((mode, _pct(m.asr), _pct(m.ba)))
    _write_table(parent / "reports" / "ablation.csv", ("mode", "ASR@0.5", "BA@0.5"), rows)
    for row in rows:
        print(*row, sep="\t")


def cmd_transfer(args) -> None:
    if len(args.data) < 1:
        raise ValidationError("--data needs at least one dataset")
    parent = Path(args.run)
    names = [Path(d).name for d in args.data]
    if len(set(names)) != len(names):
        raise ValidationError("dataset directory names must be distinct")
    datasets = {n: _load_data(d) for n, d in zip(names, args.data)}
    bundles = {}
    for name, d in zip(names, args.data):
        _sub_run(parent, name, Path(d), args.alpha, args.seed, args)
        run = parent / name
        bundles[name] = _models_for(run, read_config(run), datasets[name])

    def scorer(eval_name):
        def go(bundle):
            rep, _ = _score_run(bundle, None, datasets[eval_name], args.split, args.seed)
            return rep.asr
        return go

    rows, cols, mat = transfer_eval(bundles, {n: scorer(n) for n in names})
    table = [(r, *(f"{v:.2f}" for v in mat[i])) for i, r in enumerate(rows)]
    _write_table(parent / "reports" / "transfer.csv", ("train\\eval", *cols), table)
    for row in table:
        print(*row, sep="\t")


def cmd_defend(args) -> None:
    run = Path(args.run)
    cfg = read_config(run)
    data_dir = _data_dir(run, cfg)
    data = _load_data(data_dir)
    models = _models_for(run, cfg, data)
    scenes = data.split("train")
    poisoned = _poisoned_ids(run)
    records = build_records(scenes, poisoned, int(cfg["poison.seed"]), 0)
    if args.detector == "oracle":
        flagged = sorted(poisoned)
        report = None
    else:
        feats = extract_features(models, Batcher(models.vocab, scenes), records)
        if args.detector == "spectral":
            report = detection_report(SpectralSignature(args.removal_fraction), feats, poisoned_ids=poisoned)
        else:
            labels = [r.answer_desc for r in records]
            report = detection_report(Beatrix(order=args.order), feats, labels=labels, poisoned_ids=poisoned)
        flagged = report.flagged
    reports = run / "reports"
    reports.mkdir(exist_ok=True)
    if report is not None:
        report.write(reports / f"defense_{args.detector}.json")
    before = _read_metrics(run) if (reports / "metrics.json").exists() else None
    if before is None:
        raise ValidationError("run `iag eval` before `iag defend`")

    def retrain(kept_ids):
        sub = run / f"defended_{args.detector}"
        write_config(sub, "poison", {**{k[7:]: v for k, v in cfg.items() if k.startswith("poison.")},
                                     "data": os.path.relpath(data_dir, sub.resolve())})
        write_config(sub, "train", {k[6:]: v for k, v in cfg.items() if k.startswith("train.")})
        kept = set(kept_ids)
        still = [p for p in poisoned if p in kept]
        (sub / "reports").mkdir(parents=True, exist_ok=True)
        (sub / "reports" / "poison_plan.json").write_text(json.dumps({"selected": still}, indent=1) + "\n")
        tcfg = _stored_train_config(cfg)
        _fit(sub, data, still, tcfg, _victim_config(cfg, data.config.image_size),
             int(cfg["poison.seed"]), train_ids=kept_ids)
        clean = run / "checkpoints" / "clean.bin"
        if clean.exists():
            (sub / "checkpoints").mkdir(exist_ok=True)
            shutil.copyfile(clean, sub / "checkpoints" / "clean.bin")
        cmd_eval(argparse.Namespace(run=str(sub), split=args.split, seed=int(cfg["poison.seed"])))
        return _read_metrics(sub)

    before, after = defend_and_rescore([s.id for s in scenes], flagged, before, retrain)
    rows = [("before", _pct(before.asr), _pct(before.ba)), ("after", _pct(after.asr), _pct(after.ba))]
    _write_table(reports / f"defense_{args.detector}.csv", ("stage", "ASR@0.5", "BA@0.5"), rows)
    print(f"flagged {len(flagged)} scenes")
    for row in rows:
        print(*row, sep="\t")


def _to_u8(x: torch.Tensor) -> np.ndarray:
    arr = x.clamp(0, 1).mul(255).round().to(torch.uint8).permute(1, 2, 0).numpy()
    return np.ascontiguousarray(arr)


def cmd_render(args) -> None:
    """Panels of clean | poisoned | trigger; the trigger is min-max scaled to [0, 1]."""
    run = Path(args.run)
    cfg = read_config(run)
    data = _load_data(_data_dir(run, cfg))
    models = _models_for(run, cfg, data)
    scenes = data.split(args.split)[: args.n]
    if not scenes:
        raise ValidationError(f"no scenes in split {args.split!r}")
    records = eval_records(scenes, args.seed, True)
    batcher = Batcher(models.vocab, scenes)
    panels = run / "panels"
    panels.mkdir(exist_ok=True)
    raw = {}
    with torch.no_grad():
        for r in records:
            img = batcher.images[[batcher.index[r.scene_id]]]
            poisoned, residual = models.poison(img, [batcher.tokens(r.attack_target_desc)])
            res = residual[0]
            lo, hi = res.min(), res.max()
            vis = (res - lo) / (hi - lo) if hi > lo else torch.zeros_like(res)
            row = np.concatenate([_to_u8(img[0]), _to_u8(poisoned[0]), _to_u8(vis)], axis=1)
            write_ppm(panels / f"{r.scene_id}.ppm", row)
            raw[f"{r.scene_id}.residual"] = res.float()
    checkpoint.save(panels / "residuals.bin", raw)
    print(f"wrote {len(records)} panels to {panels}")


def cmd_timing(args) -> None:
    run = Path(args.run)
    cfg = read_config(run)
    data = _load_data(_data_dir(run, cfg))
    models = _models_for(run, cfg, data)
    scenes = data.split(args.split)
    records = eval_records(scenes, args.seed, True)
    rep = timing(models, Batcher(models.vocab, scenes), records, n=args.n)
    (run / "reports").mkdir(exist_ok=True)
    summary = rep.summary()
    (run / "reports" / "timing.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    for key in ("clean_decode", "poisoned_decode", "trigger_generation"):
        s = summary[key]
        print(f"{key:<20}{s['mean_ms']:9.2f} ms  +- {s['std_ms']:.2f}")


# -- parser -------------------------------------------------------------------

def _train_flags(p) -> None:
    p.add_argument("--steps", type=int, default=5000)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--beta", type=float, default=0.5)
    p.add_argument("--budget", type=float, help="L-inf bound on the trigger residual")
    p.add_argument("--max-grad-norm", type=float, help="global gradient clip (0 disables; toy default 1.0)")
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--d-model", type=int, default=VictimConfig.d_model)
    p.add_argument("--n-layers", type=int, default=VictimConfig.n_layers)
    p.add_argument("--n-heads", type=int, default=VictimConfig.n_heads)
    p.add_argument("--no-clean-control", dest="clean_control", action="store_false",
                   help="skip training the clean control model used for CA@0.5")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="iag", description="Input-aware backdoor attack on a toy grounding model.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="render a synthetic shapes dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--train", type=int, default=2000)
    p.add_argument("--val", type=int, default=300)
    p.add_argument("--test", type=int, default=0, help="size of testA and testB (0 skips them)")
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--position-qualifier", action="store_true",
                   help="append a grid position to every description")
    p.add_argument("--seed", type=int, default=7)
    p.set_defaults(func=cmd_gen_data, stage="gen-data")

    p = sub.add_parser("poison", help="select poisoned scenes and write the training manifest")
    p.add_argument("--data", required=True)
    p.add_argument("--run", required=True)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_poison, stage="poison")

    p = sub.add_parser("train", help="jointly train generator and victim (plus a clean control)")
    p.add_argument("--run", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ablation", choices=ABLATIONS, default="none")
    _train_flags(p)
    p.set_defaults(func=cmd_train, stage="train")

    p = sub.add_parser("eval", help="ASR@0.5 / BA@0.5 / CA@0.5 on an evaluation split")
    p.add_argument("--run", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval, stage="eval")

    for name, func, help_ in (("sweep", cmd_sweep, "one run per poison rate"),
                              ("ablate", cmd_ablate, "one run per ablation mode")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--data", required=True)
        p.add_argument("--run", required=True)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--split", default="val")
        if name == "sweep":
            p.add_argument("--rates", default="0.01,0.05,0.1")
        else:
            p.add_argument("--alpha", type=float, default=0.05)
            p.add_argument("--modes", default=",".join(ABLATIONS))
        _train_flags(p)
        p.set_defaults(func=func, stage=name)

    p = sub.add_parser("transfer", help="train on each dataset, evaluate ASR on every dataset")
    p.add_argument("--data", action="append", required=True, help="dataset dir; repeat per dataset")
    p.add_argument("--run", required=True)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", default="val")
    _train_flags(p)
    p.set_defaults(func=cmd_transfer, stage="transfer")

    p = sub.add_parser("defend", help="detect poisoned scenes, drop them, retrain, rescore")
    p.add_argument("--run", required=True)
    p.add_argument("--detector", choices=("spectral", "beatrix", "oracle"), default="spectral")
    p.add_argument("--removal-fraction", type=float, default=0.05)
    p.add_argument("--order", type=int, default=3, help="Gram order for beatrix")
    p.add_argument("--split", default="val")
    p.set_defaults(func=cmd_defend, stage="defend")

    p = sub.add_parser("render", help="write clean | poisoned | trigger panels")
    p.add_argument("--run", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_render, stage="render")

    p = sub.add_parser("timing", help="per-sample decode time with and without trigger")
    p.add_argument("--run", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_timing, stage="timing")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"iag {args.stage}: invalid input: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        print(f"iag {args.stage}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
