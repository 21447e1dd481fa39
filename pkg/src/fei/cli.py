"""``fei`` command-line entry point.

Exit codes: 0 success, 1 configuration error, 2 data/checkpoint error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import numpy as np

from fei import SPEC_VERSION, signal
from fei.checkpoint import file_sha256, load_checkpoint, save_checkpoint
from fei.config import RunConfig, load_config
from fei.data import (Dataset, SplitSpec, load_ucr_tsv, make_synthetic_freq_dataset, normalize_per_sample,
                      save_ucr_tsv, split)
from fei.errors import ConfigError, DataError, FeiError
from fei.evaluation import (EvalConfig, evaluate, export_embeddings, write_embedding_csv, write_mask_csv)
from fei.experiments import Splits, run_ablation_suite, spectral_ceiling, table_rows, write_table
from fei.pretrain import pretrain, write_records

logger = logging.getLogger("fei")


def resolve_seed(flag: Optional[int], config_seed: Optional[int] = None) -> int:
    """Explicit flag, then ``FEI_SEED``, then the config file, then 0."""
    if flag is not None:
        return flag
    env = os.environ.get("FEI_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"FEI_SEED must be an integer, got {env!r}") from None
    return config_seed if config_seed is not None else 0


def git_hash(payload: bytes) -> str:
    """Git blob object id of ``payload``."""
    return hashlib.sha1(b"blob %d\0" % len(payload) + payload).hexdigest()


class RunDir:
    """``<command>-<utc timestamp>-<short hash>`` directory holding one manifest."""

    def __init__(self, root, command: str, config: dict, seed: int):
        self.command = command
        self.config = config
        self.seed = seed
        self.config_hash = git_hash(json.dumps(config, sort_keys=True, default=str).encode())
        self.started = datetime.now(timezone.utc)
        stamp = self.started.strftime("%Y%m%dT%H%M%S%fZ")
        self.path = Path(root) / f"{command}-{stamp}-{self.config_hash[:8]}"
        self.path.mkdir(parents=True, exist_ok=False)
        self.artifacts: list[str] = []
        self.extra: dict = {}

    def file(self, name: str) -> Path:
        p = self.path / name
        self.artifacts.append(str(p))
        return p

    def finish(self) -> Path:
        manifest = {
            "spec_version": SPEC_VERSION,
            "command": self.command,
            "config": self.config,
            "seed": self.seed,
            "started": self.started.isoformat(),
            "finished": datetime.now(timezone.utc).isoformat(),
            "config_hash": self.config_hash,
            "artifacts": self.artifacts,
            **self.extra,
        }
        p = self.path / "manifest.json"
        p.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))
        return p


def load_dataset(path, normalize: bool = True, task: str = "classification", length: Optional[int] = None) -> Dataset:
    if path is None:
        raise ConfigError("no dataset path configured")
    ds = load_ucr_tsv(path, length=length, task=task)
    return normalize_per_sample(ds) if normalize else ds


def _pretrain_split(cfg: RunConfig, seed: int) -> tuple[Dataset, Optional[Dataset]]:
    d = cfg.data
    train = load_dataset(d.train, d.normalize, d.task, d.length)
    if d.val is not None:
        return train, load_dataset(d.val, d.normalize, d.task, train.length)
    if d.val_fraction <= 0:
        return train, None
    tr, va, _ = split(train, SplitSpec((1.0 - d.val_fraction, d.val_fraction, 0.0), seed))
    return tr, va


def _downstream(path, fractions, seed: int, normalize: bool, task: str, length: int) -> Splits:
    ds = load_dataset(path, normalize, task, length)
    tr, va, te = split(ds, SplitSpec(tuple(fractions), seed))
    if len(te) == 0:
        raise ConfigError("downstream split leaves no test samples")
    return Splits(tr, va if len(va) else None, te)


def cmd_pretrain(config_path, seed: Optional[int] = None, out="runs") -> Path:
    cfg = load_config(config_path)
    seed = resolve_seed(seed, cfg.seed)
    cfg.train.seed = seed
    train, val = _pretrain_split(cfg, seed)
    enc_cfg = cfg.encoder_config(train.channels, train.length)
    run = RunDir(out, "pretrain", cfg.resolved() | {"seed": seed}, seed)

    log_path = run.file("losses.jsonl")
    with open(log_path, "w") as log:
        result = pretrain(train.values, enc_cfg, cfg.train, val.values if val is not None else None,
                          on_record=lambda rec: log.write(rec.to_json() + "\n"))
    header = {"train_config": cfg.train.to_dict(), "normalize": cfg.data.normalize, "task": cfg.data.task,
              "masking_strategy": cfg.train.masking_strategy, "ablation": cfg.train.ablation}
    best = result.best_model()
    save_checkpoint(best, run.file("best.ckpt"), header | {"epoch": result.best_epoch})
    save_checkpoint(result.model, run.file("last.ckpt"), header | {"epoch": len(result.epoch_losses) - 1})
    run.extra = {"epochs_run": len(result.epoch_losses), "best_epoch": result.best_epoch,
                 "stopped_early": result.stopped_early, "val_losses": result.val_losses}
    run.finish()
    print(run.path)
    return run.path


def _eval_config(base: EvalConfig, mode: str, overrides: dict, seed: int) -> EvalConfig:
    fields = {"mode": mode, "batch": base.batch, "early_stop_on_val": base.early_stop_on_val,
              "iter_unit": base.iter_unit, "seed": seed}
    if base.mode == mode:
        fields.update(max_iters=base.max_iters, lr=base.lr)
    fields.update({k: v for k, v in overrides.items() if v is not None})
    return EvalConfig(**fields)


def cmd_eval(ckpt, data, mode: str = "linear", config_path=None, overrides: Optional[dict] = None,
             seed: Optional[int] = None, out="runs") -> Path:
    cfg = load_config(config_path) if config_path else RunConfig()
    seed = resolve_seed(seed, cfg.seed)
    model, header = load_checkpoint(ckpt)
    ckpt_hash = file_sha256(ckpt)
    ev_cfg = _eval_config(cfg.eval, mode, overrides or {}, seed)
    normalize = header.get("normalize", True)
    splits = _downstream(data, cfg.eval_data.fractions, cfg.eval_data.split_seed, normalize,
                         header.get("task", "classification"), model.cfg.length)

    run = RunDir(out, "eval", {"checkpoint": str(ckpt), "data": str(data), "eval": ev_cfg.to_dict(),
                               "fractions": cfg.eval_data.fractions}, seed)
    result = evaluate(model, splits.train, splits.val, splits.test, ev_cfg)
    metrics = result.report.to_dict() | {"mode": mode, "steps": result.steps}
    run.file("metrics.json").write_text(json.dumps(metrics, indent=2))
    if mode == "finetune":
        model.encoder.load_state_dict(result.encoder.state_dict())
        save_checkpoint(model, run.file("finetuned.ckpt"), {k: v for k, v in header.items() if k not in
                        ("spec_version", "encoder", "d", "h", "n", "use_subspace", "blobs")} | {"finetuned_from": ckpt_hash})
    run.extra = {"checkpoint_sha256": ckpt_hash}
    run.finish()
    print(json.dumps(metrics))
    return run.path


def cmd_ablate(config_path, seed: Optional[int] = None, out="runs") -> Path:
    cfg = load_config(config_path)
    seed = resolve_seed(seed, cfg.seed)
    cfg.train.seed = seed
    cfg.eval.seed = seed
    pre_train, pre_val = _pretrain_split(cfg, seed)
    downstream = _downstream(cfg.eval_data.data or cfg.data.train, cfg.eval_data.fractions, cfg.eval_data.split_seed,
                             cfg.data.normalize, cfg.data.task, pre_train.length)
    enc_cfg = cfg.encoder_config(pre_train.channels, pre_train.length)
    run = RunDir(out, "ablate", cfg.resolved() | {"seed": seed}, seed)
    runs = run_ablation_suite(pre_train, pre_val, downstream, enc_cfg, cfg.train, cfg.eval)
    rows = table_rows(runs, cfg.data.task)
    write_table(rows, run.file("ablation.csv"))
    for r in runs:
        if r.pretrain is not None:
            write_records(r.pretrain.records, run.file(f"losses-{r.name}.jsonl"))
    run.finish()
    for row in rows:
        print(",".join(f"{v:.4f}" if isinstance(v, float) else str(v) for v in row.values()))
    return run.path


def cmd_embed(ckpt, data, num_masks: int, seed: Optional[int] = None, max_samples: Optional[int] = None,
              out="runs") -> Path:
    seed = resolve_seed(seed)
    model, header = load_checkpoint(ckpt)
    tc = header.get("train_config", {})
    strategy = header.get("masking_strategy", "dfm")
    beta1, beta2 = tc.get("beta1", 0.0), tc.get("beta2", 0.7)
    ds = load_dataset(data, header.get("normalize", True), header.get("task", "classification"), model.cfg.length)
    values = ds.values[:max_samples] if max_samples else ds.values
    if num_masks < 1:
        raise ConfigError("num_masks must be >= 1")
    rng = np.random.default_rng(seed)
    masks = np.stack([signal.sample_mask(strategy, model.cfg.length, beta1, beta2, rng) for _ in range(num_masks)])

    run = RunDir(out, "embed", {"checkpoint": str(ckpt), "data": str(data), "num_masks": num_masks,
                                "max_samples": max_samples, "strategy": strategy, "beta1": beta1, "beta2": beta2}, seed)
    export = export_embeddings(model, values, masks, strategy, use_momentum="no_momentum" not in header.get("ablation", []))
    write_embedding_csv(export, run.file("embeddings.csv"))
    write_embedding_csv(export, run.file("projection.csv"), projection=True)
    write_mask_csv(export, run.file("masks.csv"))
    run.extra = {"checkpoint_sha256": file_sha256(ckpt)}
    run.finish()
    print(run.path)
    return run.path


def cmd_synth(config_path, out_path, seed: Optional[int] = None) -> float:
    cfg = load_config(config_path)
    s = cfg.synth
    seed = resolve_seed(seed, s.seed)
    ds = make_synthetic_freq_dataset(s.num_classes, s.per_class, s.length, s.noise_std, seed,
                                     s.min_bin, s.spacing, s.freq_shift)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_ucr_tsv(ds, out_path)
    tr, _, te = split(normalize_per_sample(ds), SplitSpec((0.6, 0.2, 0.2), seed))
    ceiling = spectral_ceiling(tr, te, seed)
    print(f"wrote {len(ds)} samples to {out_path}")
    print(f"spectral oracle ceiling accuracy: {ceiling:.4f}")
    return ceiling


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fei", description="Frequency-masked embedding inference for time series.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("pretrain", help="pretrain an encoder")
    sp.add_argument("--config", required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", default="runs")

    sp = sub.add_parser("eval", help="linear probe or fine-tune a checkpoint")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--mode", choices=["linear", "finetune"], default="linear")
    sp.add_argument("--config")
    sp.add_argument("--max-iters", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--batch", type=int)
    sp.add_argument("--iter-unit", choices=["epoch", "step"])
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", default="runs")

    sp = sub.add_parser("ablate", help="pretrain and probe the full model and all six ablations")
    sp.add_argument("--config", required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", default="runs")

    sp = sub.add_parser("embed", help="export original/target/inferred embeddings under random masks")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--num-masks", type=int, required=True)
    sp.add_argument("--max-samples", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", default="runs")

    sp = sub.add_parser("synth", help="write a synthetic frequency-labelled dataset")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        if args.command == "pretrain":
            cmd_pretrain(args.config, args.seed, args.out)
        elif args.command == "eval":
            overrides = {"max_iters": args.max_iters, "lr": args.lr, "batch": args.batch, "iter_unit": args.iter_unit}
            cmd_eval(args.ckpt, args.data, args.mode, args.config, overrides, args.seed, args.out)
        elif args.command == "ablate":
            cmd_ablate(args.config, args.seed, args.out)
        elif args.command == "embed":
            cmd_embed(args.ckpt, args.data, args.num_masks, args.seed, args.max_samples, args.out)
        elif args.command == "synth":
            cmd_synth(args.config, args.out, args.seed)
    except FeiError as exc:
        print(f"fei {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"fei {args.command}: error: {exc}", file=sys.stderr)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
