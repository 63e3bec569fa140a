"""Command-line entry point: reproducible pipelines over one run directory.

Every artifact-producing command writes a run manifest (config snapshot, seeds,
input/output paths, artifact hashes, wall clock) next to its outputs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import tempfile
import time
from pathlib import Path

import torch

from . import attacks as A
from . import evaluation as E
from .config import ExperimentConfig, config_as_dict, derive_seed, load_config, resolve_target_class_map
from .corpus import (DatasetSplits, SyntheticSpec, Vocabulary, build_vocabulary, encode_dataset,
                     generate_synthetic_corpus, load_dataset, save_dataset, split_dataset)
from .discriminators import ClassDiscriminators, load_discriminators, save_discriminators
from .generator import load_generator, save_generator
from .target_model import freeze, load_target, save_target, train_target
from .trainer import pretrain_vae, train_joint


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _atomic_write_text(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_manifest(out: Path, command: str, cfg: ExperimentConfig, seed: int,
                   inputs, outputs, checkpoints, started: float) -> Path:
    manifest = {
        "command": command,
        "config": config_as_dict(cfg),
        "seed": seed,
        "inputs": [str(p) for p in inputs],
        "outputs": {str(p): sha256_file(p) for p in outputs},
        "checkpoints_used": [str(p) for p in checkpoints],
        "wall_clock_seconds": time.time() - started,
    }
    path = out / (command.replace(" ", "_") + "_manifest.json")
    _atomic_write_text(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"missing {hint}: {path} (run the earlier pipeline stage first)")
    return path


class RunPaths:
    def __init__(self, out: Path):
        self.out = out
        self.corpus = out / "corpus.jsonl"
        self.splits_dir = out / "splits"
        self.vocab = out / "vocab.txt"
        self.target = out / "target.ckpt"
        self.vae = out / "vae.ckpt"
        self.vae_log = out / "vae_trainlog.csv"
        self.joint_gen = out / "joint_gen.ckpt"
        self.joint_discs = out / "joint_discs.ckpt"
        self.joint_log = out / "joint_trainlog.csv"
        self.lm = out / "lm.ckpt"

    def split(self, name: str) -> Path:
        return self.splits_dir / f"{name}.jsonl"

    def records(self, tag: str) -> Path:
        return self.out / f"records_{tag}.jsonl"


def _load_splits(paths: RunPaths) -> DatasetSplits:
    parts = []
    for name in ("train", "dev", "test"):
        parts.append(load_dataset(_require(paths.split(name), f"{name} split")))
    return DatasetSplits(*parts)


def _load_vocab(paths: RunPaths) -> Vocabulary:
    return Vocabulary.load(_require(paths.vocab, "vocabulary file"))


def _load_frozen_target(paths: RunPaths, vocab: Vocabulary):
    return freeze(load_target(_require(paths.target, "target checkpoint"), vocab))


def cmd_data_synth(cfg, seed, paths, args):
    spec = SyntheticSpec(cfg.vocab_size, cfg.num_texts, cfg.max_len, seed=derive_seed(seed, "corpus"))
    texts = generate_synthetic_corpus(spec)
    save_dataset(texts, paths.corpus)
    print(f"wrote {len(texts)} synthetic texts to {paths.corpus}")
    return [], [paths.corpus], []


def cmd_data_split(cfg, seed, paths, args):
    texts = load_dataset(_require(paths.corpus, "corpus file"))
    splits = split_dataset(texts, cfg.split_ratios, seed=derive_seed(seed, "split"))
    paths.splits_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    for name, part in (("train", splits.train), ("dev", splits.dev), ("test", splits.test)):
        save_dataset(part, paths.split(name))
        outputs.append(paths.split(name))
    vocab = build_vocabulary(splits.train, cfg.vocab_max_size, cfg.min_freq)
    vocab.save(paths.vocab)
    outputs.append(paths.vocab)
    print(f"split {len(texts)} texts into {len(splits.train)}/{len(splits.dev)}/{len(splits.test)}; "
          f"|V|={len(vocab)}")
    return [paths.corpus], outputs, []


def cmd_train_target(cfg, seed, paths, args):
    splits = _load_splits(paths)
    vocab = _load_vocab(paths)
    model, dev_acc = train_target(splits, vocab, cfg, seed=derive_seed(seed, "target"))
    save_target(model, paths.target, vocab)
    print(f"target dev accuracy: {dev_acc:.4f}")
    return [paths.vocab], [paths.target], []


def cmd_train_vae(cfg, seed, paths, args):
    splits = _load_splits(paths)
    vocab = _load_vocab(paths)
    gen, log = pretrain_vae(splits, vocab, cfg, seed=derive_seed(seed, "vae"))
    save_generator(gen, paths.vae, vocab)
    log.to_csv(paths.vae_log)
    print(f"pretrained VAE for {len(log.records)} steps; final loss {log.records[-1].l_vae:.3f}")
    return [paths.vocab], [paths.vae, paths.vae_log], []


def cmd_train_joint(cfg, seed, paths, args):
    splits = _load_splits(paths)
    vocab = _load_vocab(paths)
    gen = load_generator(_require(paths.vae, "pretrained VAE checkpoint"), vocab)
    target = _load_frozen_target(paths, vocab)
    discs = None
    if not cfg.training.disable_disc:
        torch.manual_seed(derive_seed(seed, "disc-init"))
        discs = ClassDiscriminators(cfg.num_classes, cfg.fixed_len, cfg.d_emb, cfg.disc_hidden)
    gen, discs, log = train_joint(gen, target, discs, splits, vocab, cfg,
                                  seed=derive_seed(seed, "joint"))
    save_generator(gen, paths.joint_gen, vocab)
    outputs = [paths.joint_gen, paths.joint_log]
    if discs is not None:
        save_discriminators(discs, paths.joint_discs, vocab)
        outputs.append(paths.joint_discs)
    log.to_csv(paths.joint_log)
    print(f"joint training ran {len(log.records)} cycles; final joint loss {log.records[-1].l_joint:.3f}")
    return [paths.vae, paths.target, paths.vocab], outputs, [paths.vae, paths.target]


def _checkpoint_for_attack(paths: RunPaths, args):
    ckpt = Path(args.checkpoint) if args.checkpoint else paths.joint_gen
    return _require(ckpt, "generator checkpoint")


def cmd_attack_pairwise(cfg, seed, paths, args):
    vocab = _load_vocab(paths)
    ckpt = _checkpoint_for_attack(paths, args)
    gen = load_generator(ckpt, vocab)
    target = _load_frozen_target(paths, vocab)
    splits = _load_splits(paths)
    n = args.n or cfg.n_pairwise
    texts = encode_dataset(splits.test[:n], vocab, cfg.max_len)
    mapping = resolve_target_class_map(cfg.training.target_class_map, cfg.num_classes)
    records = A.attack_pairwise_batch(texts, gen, target, vocab, mapping,
                                      cfg.beam_width, cfg.max_len, seed=derive_seed(seed, "pairwise"))
    out = paths.records("pairwise")
    A.save_records(records, out)
    print(f"pairwise attack on {len(records)} texts: success rate "
          f"{E.attack_success_rate(records):.4f}")
    return [ckpt, paths.target], [out], [ckpt, paths.target]


def cmd_attack_generate(cfg, seed, paths, args):
    vocab = _load_vocab(paths)
    ckpt = _checkpoint_for_attack(paths, args)
    gen = load_generator(ckpt, vocab)
    target = _load_frozen_target(paths, vocab)
    n = args.n or cfg.n_unrestricted
    mapping = resolve_target_class_map(cfg.training.target_class_map, cfg.num_classes)
    records = []
    per_class = [n // cfg.num_classes] * cfg.num_classes
    for k in range(n % cfg.num_classes):
        per_class[k] += 1
    for k, n_k in enumerate(per_class):
        if n_k:
            records += A.generate_unrestricted(n_k, k, gen, target, vocab, mapping,
                                               cfg.beam_width, cfg.max_len,
                                               seed=derive_seed(seed, f"unrestricted-{k}"))
    out = Path(args.records_out) if args.records_out else paths.records("unrestricted")
    A.save_records(records, out)
    print(f"generated {len(records)} texts: success rate {E.attack_success_rate(records):.4f}")
    return [ckpt, paths.target], [out], [ckpt, paths.target]


def cmd_attack_baseline(cfg, seed, paths, args):
    vocab = _load_vocab(paths)
    target = _load_frozen_target(paths, vocab)
    splits = _load_splits(paths)
    n = args.n or cfg.n_pairwise
    texts = encode_dataset(splits.test[:n], vocab, cfg.max_len)
    bl_cfg = A.BaselineConfig(epsilon=cfg.epsilon_fgsm, modify_fraction=cfg.modify_fraction,
                              max_deepfool_iters=cfg.max_deepfool_iters,
                              seed=derive_seed(seed, f"baseline-{args.name}"))
    records = A.run_baseline(args.name, texts, bl_cfg, target, vocab)
    out = paths.records(f"baseline_{args.name}")
    A.save_records(records, out)
    print(f"baseline {args.name} on {len(records)} texts: success rate "
          f"{E.attack_success_rate(records):.4f}")
    return [paths.target], [out], [paths.target]


def _language_model(cfg, seed, paths, vocab, train_texts):
    if paths.lm.exists():
        return E.load_language_model(paths.lm, vocab), False
    lm = E.train_language_model(train_texts, vocab, cfg, seed=derive_seed(seed, "lm"))
    E.save_language_model(lm, paths.lm, vocab)
    return lm, True


def cmd_eval_metrics(cfg, seed, paths, args):
    vocab = _load_vocab(paths)
    splits = _load_splits(paths)
    records_path = Path(args.records) if args.records else paths.records("unrestricted")
    records = A.load_records(_require(records_path, "attack records"))
    train_enc = encode_dataset(splits.train, vocab, cfg.max_len)
    lm, lm_created = _language_model(cfg, seed, paths, vocab, train_enc)
    oracle = None
    if all(r.target_class is not None for r in records):
        held_out = encode_dataset(splits.dev + splits.test, vocab, cfg.max_len)
        oracle = E.train_oracle(held_out, train_enc, len(vocab), cfg.num_classes)
    from .corpus import tokenize
    report = E.build_metrics_report(records, lm, oracle, [tokenize(t.raw) for t in splits.train])
    metrics_json = paths.out / "metrics.json"
    metrics_txt = paths.out / "metrics.txt"
    _atomic_write_text(metrics_json, json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    _atomic_write_text(metrics_txt, report.table() + "\n")
    print(report.table())
    outputs = [metrics_json, metrics_txt] + ([paths.lm] if lm_created else [])
    return [records_path], outputs, [paths.lm]


def cmd_eval_diversity(cfg, seed, paths, args):
    from .corpus import tokenize
    vocab = _load_vocab(paths)
    splits = _load_splits(paths)
    records_path = Path(args.records) if args.records else paths.records("unrestricted")
    records = A.load_records(_require(records_path, "attack records"))
    report = E.diversity_report([tokenize(r.generated_text) for r in records],
                                [tokenize(t.raw) for t in splits.train])
    out = paths.out / "diversity.json"
    _atomic_write_text(out, json.dumps(report.__dict__, indent=2, sort_keys=True) + "\n")
    print(f"train 4-gram overlap {report.train_overlap_mean:.4f}; "
          f"unique fraction {report.unique_fraction:.4f}")
    return [records_path], [out], []


def cmd_eval_annotate(cfg, seed, paths, args):
    records_path = Path(args.records) if args.records else paths.records("unrestricted")
    records = A.load_records(_require(records_path, "attack records"))
    if args.import_labels:
        rate = E.import_annotation_batch(Path(args.import_labels), records)
        out = paths.out / "human_validity.json"
        _atomic_write_text(out, json.dumps({"human_validity_rate": rate}) + "\n")
        print(f"human validity rate: {rate:.4f}")
        return [records_path, Path(args.import_labels)], [out], []
    out = paths.out / "annotations.csv"
    E.export_annotation_batch(records, out, n=args.n or cfg.annotation_n,
                              seed=derive_seed(seed, "annotation"))
    print(f"wrote annotation batch to {out}")
    return [records_path], [out], []


def cmd_defend_augment(cfg, seed, paths, args):
    vocab = _load_vocab(paths)
    splits = _load_splits(paths)
    target = _load_frozen_target(paths, vocab)
    records_path = Path(args.records) if args.records else paths.records("unrestricted")
    records = [r for r in A.load_records(_require(records_path, "attack records")) if r.success]
    if args.n:
        records = records[: args.n]
    report = E.augment_and_retrain(splits, records, target, vocab, cfg,
                                   holdout_fraction=args.holdout, seed=derive_seed(seed, "defense"))
    out = paths.out / "defense.json"
    _atomic_write_text(out, json.dumps(report.__dict__, indent=2, sort_keys=True) + "\n")
    print(f"clean accuracy {report.clean_accuracy_before:.4f} -> {report.clean_accuracy_after:.4f}; "
          f"adversarial accuracy {report.adversarial_accuracy_before:.4f} -> "
          f"{report.adversarial_accuracy_after:.4f}")
    return [records_path, paths.target], [out], [paths.target]


def cmd_bench_speed(cfg, seed, paths, args):
    vocab = _load_vocab(paths)
    ckpt = _checkpoint_for_attack(paths, args)
    gen = load_generator(ckpt, vocab)
    target = _load_frozen_target(paths, vocab)
    splits = _load_splits(paths)
    texts = encode_dataset(splits.test, vocab, cfg.max_len)
    mapping = resolve_target_class_map(cfg.training.target_class_map, cfg.num_classes)
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    results = {}
    for mode in modes:
        results[mode] = E.timing_benchmark(mode, args.count, texts, gen, target, vocab,
                                           mapping, cfg, seed=derive_seed(seed, f"bench-{mode}"))
        print(f"{mode}: {results[mode]:.5f} s/example")
    out = paths.out / "speed.json"
    _atomic_write_text(out, json.dumps(results, indent=2, sort_keys=True) + "\n")
    return [ckpt, paths.target], [out], [ckpt, paths.target]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="advtextgen",
                                     description="adversarial text generation pipelines")
    sub = parser.add_subparsers(dest="group", required=True)

    def add(group_parser, name, func, **extra):
        p = group_parser.add_parser(name)
        p.add_argument("--config", default=None, help="flat key=value config file")
        p.add_argument("--seed", type=int, default=None, help="master seed override")
        p.add_argument("--out", default="runs/default", help="run directory")
        for flag, kwargs in extra.items():
            p.add_argument(flag, **kwargs)
        p.set_defaults(func=func)
        return p

    data = sub.add_parser("data").add_subparsers(dest="command", required=True)
    add(data, "synth", cmd_data_synth)
    add(data, "split", cmd_data_split)

    train = sub.add_parser("train").add_subparsers(dest="command", required=True)
    add(train, "target", cmd_train_target)
    add(train, "vae", cmd_train_vae)
    add(train, "joint", cmd_train_joint)

    attack = sub.add_parser("attack").add_subparsers(dest="command", required=True)
    add(attack, "pairwise", cmd_attack_pairwise,
        **{"--n": dict(type=int, default=None), "--checkpoint": dict(default=None)})
    add(attack, "generate", cmd_attack_generate,
        **{"--n": dict(type=int, default=None), "--checkpoint": dict(default=None),
           "--records-out": dict(default=None, dest="records_out")})
    baseline = add(attack, "baseline", cmd_attack_baseline,
                   **{"--n": dict(type=int, default=None)})
    baseline.add_argument("name", choices=["random", "fgsm_nns", "deepfool_nns"])

    ev = sub.add_parser("eval").add_subparsers(dest="command", required=True)
    add(ev, "metrics", cmd_eval_metrics, **{"--records": dict(default=None)})
    add(ev, "diversity", cmd_eval_diversity, **{"--records": dict(default=None)})
    add(ev, "annotate", cmd_eval_annotate,
        **{"--records": dict(default=None), "--n": dict(type=int, default=None),
           "--import-labels": dict(default=None, dest="import_labels")})

    defend = sub.add_parser("defend").add_subparsers(dest="command", required=True)
    add(defend, "augment", cmd_defend_augment,
        **{"--records": dict(default=None), "--n": dict(type=int, default=None),
           "--holdout": dict(type=float, default=0.2)})

    bench = sub.add_parser("bench").add_subparsers(dest="command", required=True)
    add(bench, "speed", cmd_bench_speed,
        **{"--count": dict(type=int, default=1000),
           "--modes": dict(default="unrestricted,fgsm_nns"),
           "--checkpoint": dict(default=None)})
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    started = time.time()
    try:
        cfg = load_config(args.config) if args.config else ExperimentConfig()
        cfg.validate()
        seed = args.seed if args.seed is not None else cfg.training.seed
        cfg.training.seed = seed
        torch.set_num_threads(max(1, cfg.torch_threads))
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        paths = RunPaths(out)
        inputs, outputs, checkpoints = args.func(cfg, seed, paths, args)
        command = f"{args.group} {args.command}"
        write_manifest(out, command, cfg, seed, inputs, outputs, checkpoints, started)
        return 0
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
