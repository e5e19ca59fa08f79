"""Command-line front end.

Every run-config key is also a flag (``--t 0.3`` overrides ``t = 0.5`` from
``--config``).  Artifacts live under ``run_dir``:

    base.bin        pretrained base weights (container kind 2)
    module.bin      pruned module with binarized masks
    soft.bin        pruned module before binarization
    finetuned.bin   module after post fine-tuning
    sliced.bin      compact base weights with LoRA merged
    snapshots/      teacher snapshot store
    runlog.csv      per-step metrics of the prune run
    summary.json    effective configuration and final metrics
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, parse_config
from .data import Corpus, corpus_from_ids, decode, encode, builtin_text, generate, load_corpus, perplexity
from .l0 import binarize, binary_from_maskset
from .model import slice_pruned
from .report import bench_generation, format_table, structure_report, write_report_csv
from .store import (SnapshotStore, StoreError, load_base, load_module, save_base, save_module)
from .trainer import TrainingDiverged, emit_metrics, post_finetune, pretrain, prune

log = logging.getLogger("pkdprune")

EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_STORE = 4
EXIT_DIVERGED = 5

PRODUCERS = {"base.bin": "pretrain", "module.bin": "prune", "soft.bin": "prune", "finetuned.bin": "finetune",
             "sliced.bin": "slice", "snapshots": "prune"}


class MissingArtifact(Exception):
    pass


def artifact(cfg: RunConfig, name: str) -> Path:
    path = Path(cfg.run_dir) / name
    if not path.exists():
        raise MissingArtifact(f"{path} not found; run `pkdprune {PRODUCERS[name]}` first")
    return path


def get_corpus(cfg: RunConfig, for_pruning: bool = False) -> Corpus:
    if cfg.corpus:
        corpus = load_corpus(cfg.corpus, cfg.split_fraction, cfg.seq_len)
    else:
        corpus = corpus_from_ids(encode(builtin_text()), cfg.split_fraction, cfg.seq_len)
    if for_pruning and cfg.prune_bytes:
        corpus = Corpus(corpus.train[:cfg.prune_bytes], corpus.valid, corpus.window)
    return corpus


def write_summary(cfg: RunConfig, extra: dict) -> None:
    path = Path(cfg.run_dir) / "summary.json"
    doc = json.loads(path.read_text()) if path.exists() else {}
    doc["config"] = cfg.as_dict()
    doc.update(extra)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True))


def clear_store(store_dir: Path) -> None:
    """Remove the snapshots of an earlier prune so a rerun starts from an empty store."""
    def owned(p: Path) -> bool:
        return p.name.startswith(("manifest.json", "snap_")) and p.suffix in (".json", ".bin", ".tmp")

    ours = [p for p in store_dir.iterdir() if owned(p)]
    strangers = [p.name for p in store_dir.iterdir() if p not in ours]
    if strangers:
        raise StoreError(f"{store_dir} holds files the snapshot store did not write: {strangers[:3]}")
    for p in ours:
        p.unlink()


# ---------------------------------------------------------------------- verbs


def cmd_pretrain(cfg: RunConfig, args) -> None:
    corpus = get_corpus(cfg)
    base, losses = pretrain(cfg.model_config(), corpus, cfg.train_config())
    Path(cfg.run_dir).mkdir(parents=True, exist_ok=True)
    save_base(Path(cfg.run_dir) / "base.bin", base)
    ppl = perplexity(base, None, corpus.valid, cfg.seq_len, cfg.eval_windows)
    write_summary(cfg, {"pretrain": {"final_loss": losses[-1] if losses else None, "valid_ppl": ppl}})
    print(f"pretrain: valid perplexity {ppl:.4f}")


def cmd_prune(cfg: RunConfig, args) -> None:
    base = load_base(artifact(cfg, "base.bin"))
    corpus = get_corpus(cfg, for_pruning=True)
    run = Path(cfg.run_dir)
    store_dir = run / "snapshots"
    if store_dir.exists():
        clear_store(store_dir)
    res = prune(base, corpus, cfg.train_config(), cfg.schedule_config(), cfg.distill_config(), cfg.ablation(),
                store_dir)
    save_module(run / "soft.bin", res.module, base.cfg)
    masks, bm = binarize(res.module.masks, cfg.t, base.cfg)
    pruned = res.module.frozen_copy()
    pruned.masks = masks
    save_module(run / "module.bin", pruned, base.cfg)
    emit_metrics(res.log, run / "runlog.csv")
    ppl = perplexity(base, pruned, corpus.valid, cfg.seq_len, cfg.eval_windows)
    write_summary(cfg, {"prune": {"final_s_hat": res.final_sparsity, "binarized_sparsity": bm.sparsity(base.cfg),
                                  "valid_ppl": ppl, "snapshots": len(res.store) if res.store else 0}})
    print(f"prune: s_hat {res.final_sparsity:.4f}, binarized {bm.sparsity(base.cfg):.4f}, valid ppl {ppl:.4f}")


def cmd_finetune(cfg: RunConfig, args) -> None:
    base = load_base(artifact(cfg, "base.bin"))
    module = load_module(artifact(cfg, "module.bin"), base.cfg)
    corpus = get_corpus(cfg)
    tuned = post_finetune(base, module, corpus, cfg.train_config())
    save_module(Path(cfg.run_dir) / "finetuned.bin", tuned, base.cfg)
    before = perplexity(base, module, corpus.valid, cfg.seq_len, cfg.eval_windows)
    after = perplexity(base, tuned, corpus.valid, cfg.seq_len, cfg.eval_windows)
    write_summary(cfg, {"finetune": {"valid_ppl_before": before, "valid_ppl_after": after}})
    print(f"finetune: valid perplexity {before:.4f} -> {after:.4f}")


def _load_target(cfg: RunConfig, which: str):
    if which == "sliced":
        return load_base(artifact(cfg, "sliced.bin")), None
    base = load_base(artifact(cfg, "base.bin"))
    if which == "base":
        return base, None
    name = {"pruned": "module.bin", "finetuned": "finetuned.bin"}[which]
    return base, load_module(artifact(cfg, name), base.cfg)


def cmd_eval(cfg: RunConfig, args) -> None:
    base, module = _load_target(cfg, args.which)
    corpus = get_corpus(cfg)
    ppl = perplexity(base, module, corpus.valid, cfg.seq_len, cfg.eval_windows)
    print(f"eval {args.which}: valid perplexity {ppl:.4f}")
    if args.prompt is not None:
        out = generate(base, module, encode(args.prompt), args.max_new)
        print(decode(out))


def cmd_slice(cfg: RunConfig, args) -> None:
    base = load_base(artifact(cfg, "base.bin"))
    name = "finetuned.bin" if args.finetuned else "module.bin"
    module = load_module(artifact(cfg, name), base.cfg)
    small, small_cfg = slice_pruned(base, module)
    save_base(Path(cfg.run_dir) / "sliced.bin", small)
    print(f"slice: {base.num_params()} -> {small.num_params()} parameters "
          f"(hidden {small_cfg.d_model}, heads {list(small_cfg.head_counts)}, int {list(small_cfg.int_dims)})")


def cmd_report(cfg: RunConfig, args) -> None:
    base = load_base(artifact(cfg, "base.bin"))
    module = load_module(artifact(cfg, "module.bin"), base.cfg)
    rep = structure_report(base.cfg, binary_from_maskset(module.masks))
    text = format_table(rep, base.cfg)
    run = Path(cfg.run_dir)
    (run / "report.txt").write_text(text + "\n")
    write_report_csv(rep, run / "report.csv")
    print(text)


def cmd_bench(cfg: RunConfig, args) -> None:
    base = load_base(artifact(cfg, "base.bin"))
    small = load_base(artifact(cfg, "sliced.bin"))
    corpus = get_corpus(cfg)
    prompt = corpus.valid[:args.prompt_len]
    full = bench_generation(base, prompt, args.total_len, args.reps, args.warmup)
    sl = bench_generation(small, prompt, args.total_len, args.reps, args.warmup)
    saving = 1.0 - sl.mean / full.mean
    print(f"{'model':<8} {'mean_s':>10} {'stdev_s':>10} {'per_forward_ms':>15}")
    for name, r in (("full", full), ("sliced", sl)):
        print(f"{name:<8} {r.mean:>10.4f} {r.stdev:>10.4f} {1e3 * r.per_forward:>15.3f}")
    print(f"latency saving {100 * saving:.1f}%")


def cmd_snapshots(cfg: RunConfig, args) -> None:
    base = load_base(artifact(cfg, "base.bin"))
    store = SnapshotStore(artifact(cfg, "snapshots"), base.cfg)
    print(f"{'key':>10} {'step':>8} {'bytes':>10} checksum")
    for e in store.manifest():
        print(f"{e['key']:>10.4f} {e['step']:>8} {e['length']:>10} {e['checksum']}")


VERBS = {"pretrain": cmd_pretrain, "prune": cmd_prune, "finetune": cmd_finetune, "eval": cmd_eval,
         "slice": cmd_slice, "report": cmd_report, "bench": cmd_bench, "snapshots": cmd_snapshots}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value run configuration file")
    common.add_argument("-v", "--verbose", action="store_true")
    grp = common.add_argument_group("run configuration overrides")
    for name in RunConfig.__dataclass_fields__:
        grp.add_argument(f"--{name}", dest=f"cfg_{name}", default=None, metavar="VALUE")
    abl = common.add_argument_group("ablations")
    abl.add_argument("--no-kd", action="store_true", help="next-token loss instead of distillation")
    abl.add_argument("--no-progressive", action="store_true", help="intact teacher in both stages")
    abl.add_argument("--no-stage1", action="store_true", help="intact teacher during warmup")
    abl.add_argument("--no-stage2", action="store_true", help="intact teacher after warmup")
    abl.add_argument("--no-layer-loss", action="store_true")
    abl.add_argument("--masks-only", action="store_true", help="freeze LoRA during pruning")

    ap = argparse.ArgumentParser(prog="pkdprune", description="Progressive multi-teacher structured pruning.",
                                 allow_abbrev=False)
    sub = ap.add_subparsers(dest="verb", required=True)
    for verb in VERBS:
        p = sub.add_parser(verb, parents=[common], allow_abbrev=False)
        if verb == "eval":
            p.add_argument("--which", choices=("base", "pruned", "finetuned", "sliced"), default="pruned")
            p.add_argument("--prompt", default=None, help="also print a greedy continuation")
            p.add_argument("--max-new", type=int, default=64)
        elif verb == "slice":
            p.add_argument("--finetuned", action="store_true", help="slice the fine-tuned module")
        elif verb == "bench":
            p.add_argument("--reps", type=int, default=30)
            p.add_argument("--warmup", type=int, default=5)
            p.add_argument("--prompt-len", type=int, default=64)
            p.add_argument("--total-len", type=int, default=256)
    return ap


def config_from_args(args) -> RunConfig:
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    if args.no_kd:
        overrides["kd"] = False
    if args.no_progressive:
        overrides["stage1"] = overrides["stage2"] = False
    if args.no_stage1:
        overrides["stage1"] = False
    if args.no_stage2:
        overrides["stage2"] = False
    if args.no_layer_loss:
        overrides["layer_loss"] = False
    if args.masks_only:
        overrides["masks_only"] = True
    return parse_config(args.config, overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = config_from_args(args)
        VERBS[args.verb](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifact as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except StoreError as exc:
        print(f"store error: {exc}", file=sys.stderr)
        return EXIT_STORE
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    return 0


if __name__ == "__main__":
    sys.exit(main())
