"""Command-line surface: audit, encode, train, cv, eval, predict, ablate, params.

Exit codes: 0 success, 1 runtime failure, 2 bad input (files, flags,
configuration).  All primary output files are written atomically and are
byte-deterministic for a fixed --seed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from rescap import featurize, harness, model, redundancy, seqio
from rescap.errors import InputError, RescapError, VersionMismatch
from rescap.featurize import FeatureKind
from rescap.ioutil import atomic_write_text
from rescap.model import Variant

ABLATION_ORDER = [
    Variant.BASELINE1,
    Variant.BASELINE2,
    Variant.BASELINE3,
    Variant.BASELINE4,
    Variant.BASELINE5,
    Variant.FULL,
]
METRIC_COLUMNS = ["ACC", "SEN", "SPE", "PRE", "AUC", "MCC"]


def _default_seed() -> int:
    return int(os.environ.get("RESCAP_SEED", "0"))


def _add_common_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--manifest", required=True, help="TSV manifest (id/label/split)")
    p.add_argument("--fasta", required=True, help="FASTA file resolving manifest ids")
    p.add_argument("--emb", help="PBEM embedding store (for global/local features)")
    p.add_argument("--seed", type=int, default=None, help="RNG seed (default: $RESCAP_SEED or 0)")
    p.add_argument("--batch-size", type=int, default=128, help="minibatch size (default 128)")
    p.add_argument("--epochs", type=int, default=100, help="training epochs (default 100)")
    p.add_argument("--lr", type=float, default=1e-3, help="Adam learning rate (default 1e-3)")
    p.add_argument("--patience", type=int, default=10, help="early-stopping patience (default 10)")
    p.add_argument("--l-max", type=int, default=featurize.L_MAX, help="one-hot row budget")
    p.add_argument("--local-len", type=int, default=featurize.L_MAX,
                   help="fixed length local embeddings are padded/truncated to")
    p.add_argument("--map-unknown", action="store_true",
                   help="map non-canonical residues (BJOUXZ) to X instead of rejecting")


def _resolve_seed(args) -> int:
    return _default_seed() if args.seed is None else args.seed


def _load_dataset(args):
    records = seqio.parse_fasta(args.fasta, map_unknown=args.map_unknown)
    return seqio.load_manifest(args.manifest, records, source_fasta=str(args.fasta))


def _feature_kind(args, config_kind: FeatureKind | None = None) -> FeatureKind:
    flag = getattr(args, "features", None)
    if flag is None:
        if config_kind is None:
            raise InputError("--features is required")
        return config_kind
    kind = {"onehot": FeatureKind.ONEHOT, "global": FeatureKind.GLOBAL,
            "local": FeatureKind.LOCAL}[flag]
    if config_kind is not None and kind != config_kind:
        raise InputError(
            f"--features {flag} conflicts with checkpoint input kind "
            f"'{config_kind.value}'"
        )
    return kind


def _load_store(args, kind: FeatureKind):
    if kind == FeatureKind.ONEHOT:
        return None
    if not args.emb:
        raise InputError(f"--emb is required for {kind.value} features")
    store = featurize.read_embedding_store(args.emb)
    expected = featurize.StoreKind.GLOBAL if kind == FeatureKind.GLOBAL else featurize.StoreKind.LOCAL
    if store.kind != expected:
        raise InputError(f"{args.emb}: store kind is not {kind.value}")
    return store


def _split_features(manifest, kind, store, split, l_max):
    return featurize.batch_features(manifest, kind, split, store=store, l_max=l_max)


def _make_config(variant: str, kind: FeatureKind, args, seed: int) -> model.ModelConfig:
    return model.reference_config(
        Variant(variant),
        seed=seed,
        input_kind=kind,
        l_max=args.l_max,
        local_len=args.local_len,
    )


def _settings(args, seed: int) -> harness.TrainSettings:
    return harness.TrainSettings(
        batch_size=args.batch_size,
        lr=args.lr,
        epochs=args.epochs,
        patience=args.patience,
        shuffle_seed=seed,
    )


# --- commands ---------------------------------------------------------------

def cmd_audit(args) -> int:
    scheme = redundancy.load_blosum62(gap_open=args.gap_open, gap_extend=args.gap_extend)
    set_a = seqio.parse_fasta(args.fasta_a, map_unknown=args.map_unknown)
    set_b = seqio.parse_fasta(args.fasta_b, map_unknown=args.map_unknown) if args.fasta_b else None
    report = redundancy.pairwise_audit(
        set_a, set_b, scheme, threshold=args.threshold, jobs=args.jobs
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    redundancy.emit_audit(report, out_dir / "report.json", out_dir / "histogram.csv")
    if report.empty:
        print(f"no pairs to audit, duplicates {len(report.duplicate_pairs)}")
    else:
        print(
            f"mean {report.mean_identity_pct:.2f}, "
            f"above-threshold {report.fraction_above_threshold:.3f}, "
            f"duplicates {len(report.duplicate_pairs)}"
        )
    return 0


def cmd_encode(args) -> int:
    records = seqio.parse_fasta(args.fasta, map_unknown=args.map_unknown)
    feats = {rec.id: featurize.onehot_encode(rec, l_max=args.l_max).data for rec in records}
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(out, **feats)
    print(f"encoded {len(feats)} sequences to {out}")
    return 0


def cmd_train(args) -> int:
    seed = _resolve_seed(args)
    manifest = _load_dataset(args)
    kind = _feature_kind(args)
    store = _load_store(args, kind)
    data = _split_features(manifest, kind, store, "train", args.l_max)
    config = _make_config(args.variant, kind, args, seed)
    params, history = harness.train(config, data, settings=_settings(args, seed))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = Path(args.checkpoint) if args.checkpoint else out_dir / "checkpoint.bin"
    model.save_checkpoint(params, ckpt)
    harness.write_history_csv(history, out_dir / "history.csv")
    final = history[-1].train_loss if history else float("nan")
    print(f"trained {config.variant.value} for {len(history)} epochs, "
          f"final train loss {final:.4f}; checkpoint at {ckpt}")
    return 0


def cmd_cv(args) -> int:
    seed = _resolve_seed(args)
    manifest = _load_dataset(args)
    kind = _feature_kind(args)
    store = _load_store(args, kind)
    data = _split_features(manifest, kind, store, "train", args.l_max)
    ids = [e.id for e in manifest.split_entries("train")]
    feature_map = {i: f for i, (f, _) in zip(ids, data)}
    entries = [(e.id, e.label) for e in manifest.split_entries("train")]
    config = _make_config(args.variant, kind, args, seed)
    result = harness.cross_validate(
        config, entries, feature_map, k=args.folds, seed=seed, settings=_settings(args, seed)
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    atomic_write_text(
        out_dir / "summary.json", json.dumps(result.to_dict(), indent=2, sort_keys=True) + "\n"
    )
    mean, _ = result.summary()
    shown = ", ".join(
        f"{k}={mean[k]:.4f}" for k in harness.METRIC_KEYS if mean[k] is not None
    )
    print(f"cv[{args.folds} folds] {config.variant.value}: {shown}")
    return 0


def cmd_eval(args) -> int:
    params = model.load_checkpoint(args.checkpoint)
    args.l_max = params.config.l_max
    manifest = _load_dataset(args)
    kind = _feature_kind(args, params.config.input_kind)
    store = _load_store(args, kind)
    data = _split_features(manifest, kind, store, args.split, params.config.l_max)
    report = harness.evaluate(params, data, threshold=args.threshold)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out, harness.metrics_json(report))
    auc = "n/a" if report.auc is None else f"{report.auc:.4f}"
    print(f"eval[{args.split}]: acc={report.acc:.4f} sen={report.sen:.4f} "
          f"spe={report.spe:.4f} pre={report.pre:.4f} mcc={report.mcc:.4f} auc={auc}")
    return 0


def cmd_predict(args) -> int:
    params = model.load_checkpoint(args.checkpoint)
    if args.variant and Variant(args.variant) != params.config.variant:
        raise VersionMismatch(
            f"checkpoint was trained as '{params.config.variant.value}', "
            f"--variant requests '{args.variant}'"
        )
    records = seqio.parse_fasta(args.fasta, map_unknown=args.map_unknown)
    kind = params.config.input_kind
    store = _load_store(args, kind)
    feats = []
    for rec in records:
        if kind == FeatureKind.ONEHOT:
            feats.append(featurize.onehot_encode(rec, l_max=params.config.l_max))
        elif kind == FeatureKind.GLOBAL:
            feats.append(featurize.global_feature(store, rec.id))
        else:
            feats.append(featurize.local_feature(store, rec.id, l_max=params.config.l_max))
    probs = []
    for start in range(0, len(feats), args.batch_size):
        x = model.stack_inputs(feats[start : start + args.batch_size], params.config)
        probs.extend(model.forward(params, x, mode="infer").data.reshape(-1).tolist())
    lines = [f"id\tprobability\tlabel@{args.threshold:g}"]
    for rec, p in zip(records, probs):
        lines.append(f"{rec.id}\t{p:.6f}\t{1 if p >= args.threshold else 0}")
    atomic_write_text(args.out, "\n".join(lines) + "\n")
    print(f"predicted {len(records)} sequences to {args.out}")
    return 0


def cmd_ablate(args) -> int:
    seed = _resolve_seed(args)
    manifest = _load_dataset(args)
    g_store = featurize.read_embedding_store(args.emb_global)
    l_store = featurize.read_embedding_store(args.emb_local)
    if g_store.kind != featurize.StoreKind.GLOBAL:
        raise InputError(f"{args.emb_global}: not a global store")
    if l_store.kind != featurize.StoreKind.LOCAL:
        raise InputError(f"{args.emb_local}: not a local store")

    entries = [(e.id, e.label) for e in manifest.split_entries("train")]
    results: dict[str, dict] = {}
    for variant in ABLATION_ORDER:
        config = _make_config(variant.value, FeatureKind.GLOBAL, args, seed)
        kind = config.input_kind  # baseline4/5 force their own kind
        store = {FeatureKind.GLOBAL: g_store, FeatureKind.LOCAL: l_store,
                 FeatureKind.ONEHOT: None}[kind]
        data = _split_features(manifest, kind, store, "train", args.l_max)
        feature_map = {e.id: f for e, (f, _) in zip(manifest.split_entries("train"), data)}
        cv = harness.cross_validate(
            config, entries, feature_map, k=args.folds, seed=seed,
            settings=_settings(args, seed),
        )
        results[variant.value] = {"features": kind.value, "cv": cv.to_dict()}

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    atomic_write_text(
        out_dir / "ablation.json", json.dumps(results, indent=2, sort_keys=True) + "\n"
    )
    table = render_ablation_table(results)
    atomic_write_text(out_dir / "ablation_table.txt", table)
    print(table, end="")
    return 0


def render_ablation_table(results: dict[str, dict]) -> str:
    """Six variants by six metrics, values in percent."""
    header = ["variant"] + METRIC_COLUMNS
    rows = [header]
    for variant in ABLATION_ORDER:
        mean = results[variant.value]["cv"]["mean"]
        row = [variant.value]
        for col in METRIC_COLUMNS:
            val = mean[col.lower()]
            row.append("n/a" if val is None else f"{100.0 * val:.1f}")
        rows.append(row)
    widths = [max(len(r[c]) for r in rows) for c in range(len(header))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in rows]
    return "\n".join(lines) + "\n"


def cmd_params(args) -> int:
    seed = _resolve_seed(args)
    kind = {"onehot": FeatureKind.ONEHOT, "global": FeatureKind.GLOBAL,
            "local": FeatureKind.LOCAL}[args.features]
    config = model.reference_config(
        Variant(args.variant),
        seed=seed,
        input_kind=kind,
        l_max=args.l_max,
        local_len=args.local_len,
        residual_channels=args.residual_channels,
        skip_channels=args.skip_channels,
    )
    params = model.build(config)
    counts = model.per_layer_counts(params)
    width = max(len(name) for name, _ in counts)
    for name, count in counts:
        print(f"{name.ljust(width)}  {count}")
    print(f"{'total'.ljust(width)}  {model.count_parameters(params)}")
    return 0


# --- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rescap",
        description="DNA-binding protein prediction: training, evaluation and dataset auditing",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("audit", help="pairwise-identity redundancy audit of FASTA sets")
    p.add_argument("--fasta-a", required=True, help="first (or only) FASTA file")
    p.add_argument("--fasta-b", help="optional second FASTA (cross-set audit)")
    p.add_argument("--gap-open", type=float, default=10.0, help="gap open penalty (default 10)")
    p.add_argument("--gap-extend", type=float, default=0.5, help="gap extend penalty (default 0.5)")
    p.add_argument("--threshold", type=float, default=25.0, help="identity threshold %% (default 25)")
    p.add_argument("--out", required=True, help="output directory (report.json, histogram.csv)")
    p.add_argument("--jobs", type=int, default=1, help="parallel alignment workers (default 1)")
    p.add_argument("--map-unknown", action="store_true",
                   help="map non-canonical residues (BJOUXZ) to X instead of rejecting")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("encode", help="one-hot encode a FASTA into an .npz archive")
    p.add_argument("--fasta", required=True)
    p.add_argument("--out", required=True, help="output .npz path")
    p.add_argument("--l-max", type=int, default=featurize.L_MAX)
    p.add_argument("--map-unknown", action="store_true")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("train", help="train one model on the manifest's train split")
    _add_common_model_flags(p)
    p.add_argument("--features", required=True, choices=["onehot", "global", "local"])
    p.add_argument("--variant", default="full", choices=[v.value for v in Variant])
    p.add_argument("--checkpoint", help="checkpoint output path (default <out>/checkpoint.bin)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("cv", help="stratified k-fold cross-validation on the train split")
    _add_common_model_flags(p)
    p.add_argument("--features", required=True, choices=["onehot", "global", "local"])
    p.add_argument("--variant", default="full", choices=[v.value for v in Variant])
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest split")
    _add_common_model_flags(p)
    p.add_argument("--features", choices=["onehot", "global", "local"],
                   help="must match the checkpoint when given")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=["train", "test"])
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", required=True, help="metrics JSON output path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="score sequences with a checkpoint")
    p.add_argument("--fasta", required=True)
    p.add_argument("--emb", help="PBEM store when the checkpoint consumes embeddings")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--variant", choices=[v.value for v in Variant],
                   help="assert the checkpoint's variant")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--map-unknown", action="store_true")
    p.add_argument("--out", required=True, help="output TSV path")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("ablate", help="run all six variants under identical folds")
    _add_common_model_flags(p)
    p.add_argument("--emb-global", required=True, help="global PBEM store")
    p.add_argument("--emb-local", required=True, help="local PBEM store")
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("params", help="print per-layer and total parameter counts")
    p.add_argument("--variant", default="full", choices=[v.value for v in Variant])
    p.add_argument("--features", default="global", choices=["onehot", "global", "local"])
    p.add_argument("--residual-channels", type=int, default=40)
    p.add_argument("--skip-channels", type=int, default=20)
    p.add_argument("--l-max", type=int, default=featurize.L_MAX)
    p.add_argument("--local-len", type=int, default=featurize.L_MAX)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_params)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename}", file=sys.stderr)
        return 2
    except (RescapError, OSError) as exc:
        print(f"failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
