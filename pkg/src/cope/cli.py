"""Command-line surface tying the pipeline together.

All randomness flows from a single --seed per command, fanned out to named
sub-streams internally.  Exit codes: 0 success, 1 contract/config error,
2 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import data, evalsuite
from .data import Domain, GenConfig, generate_synthetic_corpus, load_manifest, save_manifest
from .encoders import TextEncoderConfig, VisualEncoderConfig
from .errors import CopeError
from .losses import LossWeights
from .model import CopeModel, ModelConfig
from .trainer import TrainConfig, train


def _parse_domain(value: str) -> Domain:
    try:
        return Domain(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"domain must be P, V or L, got {value!r}")


def _load_config_file(path: str | None) -> dict[str, str]:
    """Flat key=value config file; blank lines and # comments ignored."""
    if not path:
        return {}
    values = {}
    for line_no, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise CopeError(f"{path}:{line_no}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


_TRAIN_KEYS = {
    "epochs": int,
    "warmup_epochs": int,
    "lr_text": float,
    "lr_visual": float,
    "lr_other": float,
    "weight_decay": float,
    "grad_clip": float,
    "seed": int,
    "batch_products": int,
    "instances_per_product": int,
    "sampling": str,
    "steps_per_epoch": int,
    "beta": float,
    "tau": float,
    "embed_dim": int,
    "n_blocks": int,
    "n_heads": int,
    "patch_size": int,
    "max_frames": int,
}


def _build_configs(file_values: dict[str, str], overrides: dict) -> tuple[TrainConfig, dict]:
    merged: dict = {}
    for key, value in file_values.items():
        if key not in _TRAIN_KEYS:
            raise CopeError(f"unknown config key {key!r}")
        merged[key] = _TRAIN_KEYS[key](value)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    model_keys = {"embed_dim", "n_blocks", "n_heads", "patch_size", "max_frames"}
    model_kwargs = {k: merged.pop(k) for k in list(merged) if k in model_keys}
    loss_kwargs = {k: merged.pop(k) for k in list(merged) if k in ("beta", "tau")}
    cfg = TrainConfig(**merged)
    if loss_kwargs:
        cfg = replace(cfg, loss=replace(cfg.loss, **loss_kwargs))
    return cfg, model_kwargs


def _model_config(corpus, train_cfg: TrainConfig, model_kwargs: dict) -> ModelConfig:
    sample = corpus.samples[0]
    image_size = sample.frames.shape[1]
    max_frames = max(s.frames.shape[0] for s in corpus.samples)
    max_len = max(len(s.text_tokens) for s in corpus.samples if s.text_tokens)
    vocab = 1 + max(
        max(s.text_tokens) for s in corpus.samples if s.text_tokens
    )
    d = model_kwargs.get("embed_dim", 64)
    visual = VisualEncoderConfig(
        image_size=image_size,
        patch_size=model_kwargs.get("patch_size", 8),
        embed_dim=d,
        n_blocks=model_kwargs.get("n_blocks", 2),
        n_heads=model_kwargs.get("n_heads", 4),
        max_frames=model_kwargs.get("max_frames", max_frames),
    )
    text = TextEncoderConfig(
        vocab_size=vocab,
        embed_dim=d,
        n_heads=model_kwargs.get("n_heads", 4),
        max_len=max_len,
    )
    return ModelConfig(visual=visual, text=text, n_classes=len(corpus.products))


# ---------------------------------------------------------------------------
# Subcommands


def _cmd_gen_data(args) -> int:
    counts = [int(x) for x in args.per_domain.split(",")]
    if len(counts) != 3:
        raise CopeError("--per-domain expects three comma-separated counts P,V,L")
    cfg = GenConfig(
        n_products=args.products,
        n_categories=args.categories,
        pages_per_product=counts[0],
        videos_per_product=counts[1],
        lives_per_product=counts[2],
        video_frames=args.frames,
        live_frames=args.frames,
        image_size=args.image_size,
        noise_level=args.noise,
        seed=args.seed,
    )
    corpus = generate_synthetic_corpus(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_manifest(corpus, out / "manifest.jsonl")
    print(f"wrote {len(corpus)} samples for {args.products} products to {out}")
    return 0


def _cmd_train(args) -> int:
    corpus = load_manifest(args.manifest)
    train_cfg, model_kwargs = _build_configs(
        _load_config_file(args.config), {"seed": args.seed}
    )
    model_cfg = _model_config(corpus, train_cfg, model_kwargs)
    out_dir = Path(args.out).parent if Path(args.out).suffix else Path(args.out)
    result = train(model_cfg, train_cfg, corpus, out_dir)
    if Path(args.out).suffix:
        result.checkpoint_path.replace(args.out)
        print(f"checkpoint: {args.out}")
    else:
        print(f"checkpoint: {result.checkpoint_path}")
    print(f"first loss {result.first_loss:.4f} -> final loss {result.final_loss:.4f}")
    return 0


def _cmd_export(args) -> int:
    model = CopeModel.load(args.ckpt)
    corpus = load_manifest(args.manifest)
    table = evalsuite.export_embeddings(model, corpus)
    evalsuite.save_embeddings(table, args.out)
    print(f"wrote {len(table)} embeddings of dim {table.rows.shape[1]} to {args.out}")
    return 0


def _cmd_eval_retrieval(args) -> int:
    if args.query is args.gallery:
        raise CopeError(
            "same-domain retrieval is not one of the six cross-domain directions"
        )
    table = evalsuite.load_embeddings(args.emb)
    ks = tuple(int(k) for k in args.ks.split(","))
    report = evalsuite.retrieval_eval(table, args.query, args.gallery, recall_ks=ks)
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(f"direction {report.direction}: "
          + "  ".join(f"R@{k}={v:.4f}" for k, v in report.recall_at.items())
          + f"  R@mean={report.r_mean:.4f}")
    return 0


def _cmd_eval_fewshot(args) -> int:
    table = evalsuite.load_embeddings(args.emb)
    report = evalsuite.few_shot_eval(
        table, args.anchor, args.query, seed=args.seed, repeats=args.repeats
    )
    print(
        f"few-shot {args.query.value} vs {args.anchor.value} anchors: "
        f"top-1 {report.mean_accuracy:.4f} +/- {report.sd_accuracy:.4f} "
        f"({args.repeats} repeats)"
    )
    return 0


def _cmd_filter(args) -> int:
    table = evalsuite.load_embeddings(args.emb)
    pairs = evalsuite.candidate_pairs_from_table(table)
    kept = evalsuite.bootstrap_filter(pairs, threshold=args.threshold)
    complete = evalsuite.aggregate_triples(kept)
    with open(args.out, "w", encoding="utf-8") as f:
        for product_id, per_domain in complete.items():
            for domain in Domain:
                for sample_id in per_domain[domain]:
                    f.write(
                        json.dumps(
                            {
                                "sample_id": sample_id,
                                "product_id": product_id,
                                "domain": domain.value,
                            },
                            sort_keys=True,
                        )
                        + "\n"
                    )
    print(
        f"{len(kept)}/{len(pairs)} pairs above {args.threshold}; "
        f"{len(complete)} products with full P/V/L coverage -> {args.out}"
    )
    return 0


def _run_ablation_arm(corpus, holdout, train_cfg, model_cfg, out_dir, tag):
    result = train(model_cfg, train_cfg, corpus, Path(out_dir) / tag)
    merged = data.Corpus(list(corpus.samples) + list(holdout.samples))
    table = evalsuite.export_embeddings(result.model, merged)
    holdout_ids = set(holdout.sample_ids_set) if hasattr(holdout, "sample_ids_set") else {
        s.sample_id for s in holdout.samples
    }
    idx = [i for i, sid in enumerate(table.sample_ids) if sid in holdout_ids]
    sub = evalsuite.EmbeddingTable(
        rows=table.rows[idx],
        sample_ids=[table.sample_ids[i] for i in idx],
        product_ids=[table.product_ids[i] for i in idx],
        domains=[table.domains[i] for i in idx],
    )
    scores = {}
    for q, g in evalsuite.DIRECTIONS:
        report = evalsuite.retrieval_eval(sub, q, g)
        scores[report.direction] = report.recall_at[1]
    return scores


def _cmd_ablate(args) -> int:
    corpus = load_manifest(args.manifest)
    train_cfg, model_kwargs = _build_configs(
        _load_config_file(args.config), {"seed": args.seed}
    )
    train_part, holdout = data.split_corpus(corpus, holdout_per_domain=1)
    # size the model from the full corpus so holdout samples stay in-vocab
    base_model_cfg = _model_config(corpus, train_cfg, model_kwargs)
    if args.grid == "cls-loss":
        arms = {
            "with-cls": train_cfg,
            "without-cls": replace(train_cfg, loss=replace(train_cfg.loss, beta=0.0)),
        }
    else:
        arms = {
            "balanced": replace(train_cfg, sampling="balanced"),
            "random": replace(train_cfg, sampling="random"),
        }
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    results = {}
    for tag, cfg in arms.items():
        results[tag] = _run_ablation_arm(
            train_part, holdout, cfg, base_model_cfg, out_dir, tag
        )
        (out_dir / tag / "config.json").write_text(
            json.dumps(
                {"sampling": cfg.sampling, "beta": cfg.loss.beta, "seed": cfg.seed},
                sort_keys=True,
            )
            + "\n"
        )
    (out_dir / "comparison.json").write_text(json.dumps(results, indent=2, sort_keys=True) + "\n")
    tags = list(results)
    print(f"{'direction':<10}" + "".join(f"{t:>14}" for t in tags))
    for direction in sorted(results[tags[0]]):
        print(
            f"{direction:<10}"
            + "".join(f"{results[t][direction]:>14.4f}" for t in tags)
        )
    return 0


def _cmd_project2d(args) -> int:
    table = evalsuite.load_embeddings(args.emb)
    coords = evalsuite.project_2d(table)
    with open(args.out, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["sample_id", "product_id", "domain", "x", "y"])
        for i in range(len(table)):
            writer.writerow(
                [
                    table.sample_ids[i],
                    table.product_ids[i],
                    table.domains[i].value,
                    f"{coords[i, 0]:.6f}",
                    f"{coords[i, 1]:.6f}",
                ]
            )
    print(f"wrote {len(table)} projected points to {args.out}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cope", description="Cross-domain product representation toolkit"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic three-domain corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--products", type=int, default=20)
    p.add_argument("--categories", type=int, default=4)
    p.add_argument("--per-domain", default="2,2,2", help="counts P,V,L per product")
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a corpus manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", default=None, help="flat key=value config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="checkpoint file or output directory")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("export", help="export per-sample embeddings")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_export)

    p = sub.add_parser("eval", help="run an evaluation task")
    eval_sub = p.add_subparsers(dest="eval_task", required=True)

    q = eval_sub.add_parser("retrieval", help="cross-domain retrieval metrics")
    q.add_argument("--emb", required=True)
    q.add_argument("--query", type=_parse_domain, required=True)
    q.add_argument("--gallery", type=_parse_domain, required=True)
    q.add_argument("--ks", default="1,5,10,20,50")
    q.add_argument("--out", default=None)
    q.set_defaults(func=_cmd_eval_retrieval)

    q = eval_sub.add_parser("fewshot", help="few-shot (k=1) classification")
    q.add_argument("--emb", required=True)
    q.add_argument("--anchor", type=_parse_domain, required=True)
    q.add_argument("--query", type=_parse_domain, required=True)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--repeats", type=int, default=5)
    q.set_defaults(func=_cmd_eval_fewshot)

    p = sub.add_parser("filter", help="bootstrap-filter candidate matches")
    p.add_argument("--emb", required=True)
    p.add_argument("--threshold", type=float, default=0.7)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_filter)

    p = sub.add_parser("ablate", help="run a two-arm ablation")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--grid", choices=("cls-loss", "sampling"), required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("project2d", help="export top-2 principal coordinates")
    p.add_argument("--emb", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_project2d)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 1 if e.code not in (0, None) else 0
    try:
        return args.func(args)
    except CopeError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
