"""Command-line driver: init-model, capture, prune, compare, render, eval, verify, pipeline.

Exit codes: 0 success, 1 runtime or I/O error, 2 usage or validation error.
"""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import os
import sys
from pathlib import Path

from . import calibration, evalharness, maskkit, pruner
from .calibration import ActivationStats, load_corpus, write_domain_corpus
from .tensorstore import (
    ContainerError,
    ModelManifest,
    checkpoint_metadata,
    generate_tiny_model,
    load_checkpoint,
    read_container,
    write_container,
)

log = logging.getLogger("subforge")


def _manifest(path) -> ModelManifest:
    return ModelManifest.load(path) if path else ModelManifest.default()


def _save_checkpoint(tensors, manifest, path, seed=None) -> None:
    write_container(tensors, checkpoint_metadata(manifest, seed), path)


def _load_model(args):
    manifest = ModelManifest.load(args.manifest) if getattr(args, "manifest", None) else None
    return load_checkpoint(args.model, manifest)


def cmd_init_model(args) -> int:
    manifest = _manifest(args.manifest)
    _save_checkpoint(generate_tiny_model(manifest, args.seed), manifest, args.out, args.seed)
    if args.manifest_out:
        manifest.save(args.manifest_out)
    return 0


def cmd_capture(args) -> int:
    checkpoint, manifest = _load_model(args)
    corpus = load_corpus(args.calib, args.tokenizer, manifest.vocab_size, args.seq_len)
    stats, selection = calibration.calibrate(checkpoint, manifest, corpus, args.samples, args.seed)
    if selection.shortfall:
        print(f"warning: shortfall: {len(selection.samples)}/{args.samples}", file=sys.stderr)
    stats.save(args.out)
    return 0


def _recipe(args, stats) -> pruner.PruneRecipe:
    if args.nm and args.sparsity is not None:
        raise pruner.PruneError("give either --sparsity or --nm, not both")
    if args.nm:
        return pruner.PruneRecipe(args.method, "nm", nm=pruner.parse_nm(args.nm), stats=stats)
    if args.sparsity is None:
        raise pruner.PruneError("one of --sparsity or --nm is required")
    group = {"row": "per_row", "layer": "per_layer"}[args.group]
    return pruner.PruneRecipe(args.method, group, sparsity=args.sparsity, stats=stats)


def cmd_prune(args) -> int:
    if args.method == "wanda" and not args.stats:
        raise pruner.PruneError("wanda requires activation stats")
    if args.method == "magnitude" and args.stats:
        raise pruner.PruneError("magnitude pruning takes no activation stats")
    stats = ActivationStats.load(args.stats) if args.stats else None
    tensors, meta = read_container(args.model)
    pruned, masks = pruner.prune_model(tensors, _recipe(args, stats))
    write_container(pruned, meta, args.out_model)
    masks.save(args.out_masks)
    return 0


def cmd_compare(args) -> int:
    report = maskkit.compare_models(
        pruner.MaskSet.load(args.masks_a), pruner.MaskSet.load(args.masks_b), args.weighting
    )
    if args.out:
        report.save(args.out)
    else:
        sys.stdout.write(report.to_json())
    return 0


def _pick(masks: pruner.MaskSet, tensor: str) -> pruner.PruneMask:
    if tensor not in masks.masks:
        raise pruner.PruneError(f"no mask for tensor {tensor!r}")
    return masks[tensor]


def cmd_render(args) -> int:
    if args.weights:
        tensors, _ = read_container(args.weights)
        if args.tensor not in tensors:
            raise pruner.PruneError(f"no tensor {args.tensor!r} in {args.weights}")
        maskkit.render_weights(tensors[args.tensor], args.out)
    elif args.mask:
        maskkit.render_mask(_pick(pruner.MaskSet.load(args.mask), args.tensor), args.out)
    else:
        a, b = (pruner.MaskSet.load(p) for p in args.diff)
        maskkit.render_diff(_pick(a, args.tensor), _pick(b, args.tensor), args.out)
    return 0


def cmd_eval(args) -> int:
    checkpoint, manifest = _load_model(args)
    corpus = load_corpus(args.corpus, args.tokenizer, manifest.vocab_size, args.seq_len)
    masks = pruner.MaskSet.load(args.masks) if args.masks else None
    result = evalharness.evaluate(
        checkpoint, manifest, corpus, masks, strict=args.strict,
        model_id=Path(args.model).name,
        masks_id=Path(args.masks).name if args.masks else "dense",
        corpus_id=Path(args.corpus).name,
    )
    if args.out:
        Path(args.out).write_text(result.to_json())
    else:
        sys.stdout.write(result.to_json())
    return 0


def cmd_fit_head(args) -> int:
    checkpoint, manifest = _load_model(args)
    corpus = load_corpus(args.corpus, args.tokenizer, manifest.vocab_size, args.seq_len)
    fitted = evalharness.fit_readout(checkpoint, manifest, corpus, steps=args.steps)
    _, meta = read_container(args.model)
    write_container(fitted, meta, args.out)
    return 0


def cmd_verify(args) -> int:
    masks = pruner.MaskSet.load(args.masks)
    nm = pruner.parse_nm(args.nm) if args.nm else None
    if nm is None and args.sparsity is None:
        raise pruner.PruneError("one of --sparsity or --nm is required")
    group = "nm" if nm else {"row": "per_row", "layer": "per_layer"}[args.group]
    problems = []
    for name in masks.names():
        problems.extend(pruner.verify_mask(masks[name], group, args.sparsity, nm))
    for line in problems:
        print(line, file=sys.stderr)
    if problems:
        print(f"FAIL: {len(problems)} violation(s)", file=sys.stderr)
        return 1
    print(f"OK: {len(masks)} tensor(s) satisfy {group} "
          f"{args.nm if nm else args.sparsity}")
    return 0


def run_pipeline(
    workdir,
    manifest: ModelManifest,
    model_seed: int = 0,
    calib_seeds=(1, 2),
    samples: int = 128,
    seq_len: int = 128,
    sparsity: float = 0.5,
    records: int = 512,
    heldout_records: int = 64,
    calib_paths: dict | None = None,
    evaluate: bool = True,
) -> dict:
    """Two domains x several calibration seeds, all pairwise mask comparisons.

    Every artifact lands in ``workdir``; the returned summary is also written
    to ``summary.json``.
    """
    work = Path(workdir)
    work.mkdir(parents=True, exist_ok=True)
    domains = ("low", "high")
    calib = {}
    for i, dom in enumerate(domains):
        if calib_paths and dom in calib_paths:
            calib[dom] = Path(calib_paths[dom])
        else:
            calib[dom] = work / f"calib_{dom}.jsonl"
            write_domain_corpus(calib[dom], dom, records, record_seed=10 + i)
        write_domain_corpus(work / f"eval_{dom}.jsonl", dom, heldout_records, record_seed=20 + i)

    checkpoint = generate_tiny_model(manifest, model_seed)
    corpora = {
        dom: load_corpus(calib[dom], "byte_level", manifest.vocab_size, seq_len) for dom in domains
    }
    if evaluate and not manifest.tie_embeddings:
        # Body weights stay random; the head is fitted so perplexity has meaning.
        mixed = calibration.CalibrationCorpus(
            [r for pair in zip(corpora["low"].records, corpora["high"].records) for r in pair], 0
        )
        checkpoint = evalharness.fit_readout(checkpoint, manifest, mixed)
    _save_checkpoint(checkpoint, manifest, work / "model.safetensors", model_seed)
    manifest.save(work / "manifest.json")

    variants = {}
    for dom in domains:
        for seed in calib_seeds:
            tag = f"{dom}_s{seed}"
            stats, selection = calibration.calibrate(
                checkpoint, manifest, corpora[dom], samples, seed
            )
            if selection.shortfall:
                log.warning("shortfall: %d/%d for %s", len(selection.samples), samples, tag)
            stats.save(work / f"stats_{tag}.safetensors")
            recipe = pruner.PruneRecipe("wanda", "per_row", sparsity=sparsity, stats=stats)
            pruned, masks = pruner.prune_model(checkpoint, recipe)
            masks.save(work / f"masks_{tag}.safetensors")
            write_container(
                pruned, checkpoint_metadata(manifest, model_seed), work / f"pruned_{tag}.safetensors"
            )
            variants[tag] = (dom, masks, pruned)

    pairs = []
    for a, b in itertools.combinations(sorted(variants), 2):
        report = maskkit.compare_models(variants[a][1], variants[b][1])
        report.save(work / f"jaccard_{a}__{b}.json")
        kind = "within" if variants[a][0] == variants[b][0] else "cross"
        pairs.append({"a": a, "b": b, "kind": kind, "global": report.global_distance,
                      "layers": report.layers})

    def mean(kind):
        vals = [p["global"] for p in pairs if p["kind"] == kind]
        return sum(vals) / len(vals)

    # images of the last block's q_proj
    q_name = f"blocks.{manifest.n_layers - 1}.attn.q_proj.weight"
    tags = sorted(variants)
    first = tags[0]
    same = next(t for t in tags[1:] if variants[t][0] == variants[first][0])
    other = next(t for t in tags if variants[t][0] != variants[first][0])
    maskkit.render_weights(variants[first][2][q_name], work / f"weights_{first}.pgm")
    maskkit.render_weights(variants[other][2][q_name], work / f"weights_{other}.pgm")
    maskkit.render_diff(variants[first][1][q_name], variants[same][1][q_name],
                        work / f"diff_{first}__{same}.pgm")
    maskkit.render_diff(variants[first][1][q_name], variants[other][1][q_name],
                        work / f"diff_{first}__{other}.pgm")

    summary = {
        "pairs": pairs,
        "within_mean": mean("within"),
        "cross_mean": mean("cross"),
        "evaluations": [],
    }
    if evaluate:
        for dom in domains:
            held = load_corpus(work / f"eval_{dom}.jsonl", "byte_level", manifest.vocab_size,
                               seq_len)
            dense = evalharness.evaluate(checkpoint, manifest, held, model_id="model",
                                         corpus_id=f"eval_{dom}")
            summary["evaluations"].append(dense.__dict__)
            for tag in tags:
                res = evalharness.evaluate(checkpoint, manifest, held, variants[tag][1],
                                           model_id="model", masks_id=tag,
                                           corpus_id=f"eval_{dom}")
                summary["evaluations"].append(res.__dict__)
    (work / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


def format_summary(summary: dict) -> str:
    lines = [f"{'sub-model A':<12} {'sub-model B':<12} {'kind':<7} global d_J"]
    for p in summary["pairs"]:
        lines.append(f"{p['a']:<12} {p['b']:<12} {p['kind']:<7} {p['global']:.4f}")
    lines.append(f"mean within-domain d_J: {summary['within_mean']:.4f}")
    lines.append(f"mean cross-domain  d_J: {summary['cross_mean']:.4f}")
    if summary["evaluations"]:
        lines.append("")
        lines.append(f"{'corpus':<10} {'masks':<10} perplexity")
        for e in summary["evaluations"]:
            lines.append(f"{e['corpus_id']:<10} {e['masks_id']:<10} {e['perplexity']:.4f}")
    return "\n".join(lines)


def cmd_pipeline(args) -> int:
    calib_paths = {}
    if args.calib_a:
        calib_paths["low"] = args.calib_a
    if args.calib_b:
        calib_paths["high"] = args.calib_b
    summary = run_pipeline(
        args.workdir, _manifest(args.manifest), args.model_seed,
        tuple(int(s) for s in args.seeds.split(",")), args.samples, args.seq_len,
        args.sparsity, args.records, calib_paths=calib_paths or None,
        evaluate=not args.no_eval,
    )
    print(format_summary(summary))
    return 0


def _u64(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError(f"{text} is not a 64-bit unsigned integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="subforge", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init-model", help="generate a random tiny checkpoint")
    p.add_argument("--manifest", help="manifest JSON (default: bundled 4-layer model)")
    p.add_argument("--seed", type=_u64, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--manifest-out", help="also write the manifest used")
    p.set_defaults(func=cmd_init_model)

    p = sub.add_parser("capture", help="collect activation norms from a calibration corpus")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest")
    p.add_argument("--calib", required=True)
    p.add_argument("--tokenizer", choices=calibration.TOKENIZERS, default="byte_level")
    p.add_argument("--samples", type=int, default=calibration.DEFAULT_SAMPLES)
    p.add_argument("--seq-len", type=int, default=calibration.DEFAULT_SEQ_LEN)
    p.add_argument("--seed", type=_u64, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_capture)

    p = sub.add_parser("prune", help="score and mask every prunable tensor")
    p.add_argument("--model", required=True)
    p.add_argument("--stats")
    p.add_argument("--method", choices=pruner.METHODS, default="wanda")
    p.add_argument("--sparsity", type=float)
    p.add_argument("--nm", help="structured pattern such as 2:4")
    p.add_argument("--group", choices=("row", "layer"), default="row")
    p.add_argument("--out-model", required=True)
    p.add_argument("--out-masks", required=True)
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("compare", help="Jaccard report between two mask files")
    p.add_argument("--masks-a", required=True)
    p.add_argument("--masks-b", required=True)
    p.add_argument("--weighting", choices=("mean", "size"), default="mean")
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("render", help="write a PGM image of weights, a mask, or a mask diff")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--weights", metavar="CHECKPOINT")
    src.add_argument("--mask", metavar="MASKS")
    src.add_argument("--diff", nargs=2, metavar=("MASKS_A", "MASKS_B"))
    p.add_argument("--tensor", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="perplexity on a held-out corpus")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest")
    p.add_argument("--masks")
    p.add_argument("--corpus", required=True)
    p.add_argument("--tokenizer", choices=calibration.TOKENIZERS, default="byte_level")
    p.add_argument("--seq-len", type=int, default=calibration.DEFAULT_SEQ_LEN)
    p.add_argument("--strict", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("fit-head", help="refit lm_head on a corpus (body untouched)")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest")
    p.add_argument("--corpus", required=True)
    p.add_argument("--tokenizer", choices=calibration.TOKENIZERS, default="byte_level")
    p.add_argument("--seq-len", type=int, default=calibration.DEFAULT_SEQ_LEN)
    p.add_argument("--steps", type=int, default=150)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit_head)

    p = sub.add_parser("verify", help="check masks against a declared sparsity structure")
    p.add_argument("--masks", required=True)
    p.add_argument("--sparsity", type=float)
    p.add_argument("--nm")
    p.add_argument("--group", choices=("row", "layer"), default="row")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("pipeline", help="2-domain x 2-seed wanda experiment with Jaccard table")
    p.add_argument("--workdir", required=True)
    p.add_argument("--manifest")
    p.add_argument("--model-seed", type=_u64, default=0)
    p.add_argument("--seeds", default="1,2", help="comma-separated calibration seeds")
    p.add_argument("--samples", type=int, default=calibration.DEFAULT_SAMPLES)
    p.add_argument("--seq-len", type=int, default=calibration.DEFAULT_SEQ_LEN)
    p.add_argument("--sparsity", type=float, default=0.5)
    p.add_argument("--records", type=int, default=512)
    p.add_argument("--calib-a", help="JSONL corpus for the first domain (default: synthetic)")
    p.add_argument("--calib-b", help="JSONL corpus for the second domain (default: synthetic)")
    p.add_argument("--no-eval", action="store_true", help="skip head fit and perplexity table")
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s: %(message)s",
    )
    threads = os.environ.get("FORGE_THREADS")
    if threads is not None and (not threads.isdigit() or int(threads) == 0):
        print(f"error: FORGE_THREADS must be a positive integer, got {threads!r}", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (OSError, ContainerError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
