"""Command line interface: ``ese <command> [flags]``.

Exit codes: 0 success, 1 validation error (bad flags, missing inputs or
seed), 2 numeric failure (divergence, degenerate means).
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data as imaging
from . import io
from .align import AlignTrainConfig, NumericError as AlignNumericError, align_ensemble
from .contrastive import InfoNceConfig, NumericError as TrainNumericError, embed
from .embeddings import EmbeddingSet
from .ensemble import EnsembleSpec, ensemble_embed, weight_space_ensemble, wse_star_configs
from .metrics import MetricsError, evaluate
from .pipeline import (
    METRICS_FIELDS,
    PipelineConfig,
    TrainingSet,
    load_data,
    read_metrics_csv,
    run_pipeline,
    test_domains,
    train_members,
    write_metrics_csv,
    write_report,
)
from .sphere import KarcherConfig, KarcherDegeneracyError
from .synthetic import make_member_embeddings, make_world

log = logging.getLogger("ese")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC = 0, 1, 2


class ValidationError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ValidationError(message)


def _out_dir(args) -> Path:
    out = args.out_dir or os.environ.get("ESE_OUT_DIR") or "."
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require_seed(args):
    if getattr(args, "seed", None) is None:
        raise ValidationError("--seed is required: every run must be reproducible")
    if args.seed < 0:
        raise ValidationError("--seed must be non-negative")


def _pipeline_config(args) -> PipelineConfig:
    mapping = io.read_config(args.config) if getattr(args, "config", None) else {}
    for item in getattr(args, "set", None) or []:
        mapping.update(io.parse_config_text(item))
    for key in ("mnist_dir", "n_train", "n_test", "jobs"):
        v = getattr(args, key, None)
        if v is not None:
            mapping[key] = v
    mapping["seed"] = args.seed
    cfg = PipelineConfig.from_mapping(mapping)
    return replace(cfg, out_dir=str(_out_dir(args)))


def _meta(args, extra: dict | None = None) -> dict:
    settings = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "out_dir")}
    return {"config_hash": io.config_hash({k: str(v) for k, v in settings.items()}), "seed": args.seed, **(extra or {})}


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args):
    _require_seed(args)
    out = _out_dir(args)
    world = make_world(
        args.n, args.d, args.m, args.seed, noise_kappa=args.kappa, obs_dim=args.obs_dim, n_clusters=args.clusters
    )
    meta = _meta(args)
    for i in range(world.M):
        io.write_embeddings(out / f"synthetic-{i}.ese", make_member_embeddings(world, i), meta)
    io.write_embeddings(
        out / "latents.ese", EmbeddingSet(world.latents, world.labels, "latents", "synthetic"), meta
    )
    io.write_sidecar(
        out / "world",
        {
            **meta,
            "N": world.N,
            "D": world.D,
            "M": world.M,
            "noise_kappa": world.noise_kappa,
            "transforms": [t.tolist() for t in world.transforms],
            "observation_matrix": world.obs_matrix.tolist(),
            "observation_offset": world.obs_offset.tolist(),
            "condition_number": world.meta["condition_number"],
        },
    )
    print(f"wrote {world.M} member embedding files to {out}")


def cmd_train_encoder(args):
    _require_seed(args)
    cfg = _pipeline_config(args)
    out = Path(cfg.out_dir)
    train_ds, _ = load_data(cfg)
    dataset = TrainingSet(train_ds.images, train_ds.labels, channels=3)
    seeds = args.members or list(cfg.member_seeds)
    if args.shared_init is not None:
        configs = wse_star_configs(cfg.train, seeds, cfg.wse_star_grid, args.shared_init)
        ids = [f"wse-star-{s}" for s in seeds]
    else:
        configs = [replace(cfg.train, seed=int(s)) for s in seeds]
        ids = [f"member-{s}" for s in seeds]
    encoders = train_members(dataset, cfg.nce, configs, ids, cfg.jobs)
    for enc in encoders:
        io.write_encoder(out / f"{enc.encoder_id}.esem", enc, {"config_hash": cfg.hash, "seed": cfg.seed})
        print(f"{enc.encoder_id}: final epoch loss {enc.loss_history[-1] if enc.loss_history else float('nan'):.5f}")


def cmd_embed(args):
    _require_seed(args)
    cfg = _pipeline_config(args)
    out = Path(cfg.out_dir)
    enc = io.read_encoder(args.encoder)
    train_ds, test_ds = load_data(cfg)
    if args.split == "train":
        if args.domain != "id":
            raise ValidationError("training-split embeddings are only defined for the id domain")
        images, labels = imaging.to_three_channel(train_ds.images), train_ds.labels
    else:
        images, labels = test_domains(cfg, test_ds)[args.domain], test_ds.labels
    es = embed(enc, images, labels, args.domain)
    path = out / (args.name or f"{enc.encoder_id}.{args.split}.{args.domain}.ese")
    io.write_embeddings(path, es, {"config_hash": cfg.hash, "seed": cfg.seed})
    print(path)


def cmd_align(args):
    _require_seed(args)
    out = _out_dir(args)
    sets = [io.read_embeddings(args.anchor)] + [io.read_embeddings(p) for p in args.sources]
    grid = tuple(float(x) for x in args.lambdas.split(","))
    cfg = AlignTrainConfig(
        epochs=args.epochs, learning_rate=args.lr, lambda_grid=grid, batch_size=args.batch_size, seed=args.seed
    )
    maps = align_ensemble(sets, 0, cfg, jobs=args.jobs)
    meta = _meta(args)
    for m in maps:
        path = out / f"{m.source_id}.esea"
        io.write_alignment(path, m, meta)
        print(f"{path}: lambda={m.lam} geodesic={m.geodesic_term:.6f} residual={m.orthogonality_residual:.6f}")


def cmd_ensemble(args):
    _require_seed(args)
    out = _out_dir(args)
    sets = [io.read_embeddings(p) for p in args.members]
    ids = tuple(s.encoder_id for s in sets)
    maps = [io.read_alignment(p) for p in (args.maps or [])]
    if args.mode == "aligned":
        if not 0 <= args.anchor_index < len(sets):
            raise ValidationError(f"--anchor-index {args.anchor_index} out of range for {len(sets)} members")
        spec = EnsembleSpec(ids, ids[args.anchor_index], "aligned", KarcherConfig(args.tolerance, args.max_iter))
    else:
        spec = EnsembleSpec(ids, None, "unaligned", KarcherConfig(args.tolerance, args.max_iter))
    es = ensemble_embed(sets, maps, spec)
    path = out / (args.name or f"ensemble-{args.mode}.{es.domain}.ese")
    io.write_embeddings(path, es, _meta(args))
    print(path)


def cmd_wse(args):
    _require_seed(args)
    out = _out_dir(args)
    encs = [io.read_encoder(p) for p in args.encoders]
    wse = weight_space_ensemble(encs, args.id)
    path = out / f"{args.id}.esem"
    io.write_encoder(path, wse, _meta(args))
    print(path)


def cmd_eval(args):
    _require_seed(args)
    out = _out_dir(args)
    rows = []
    for p in args.embeddings:
        es = io.read_embeddings(p)
        rep = evaluate(es)
        meta = io.read_sidecar(p)
        rows.append(
            {
                "method": args.method,
                "member": es.encoder_id,
                "domain_tag": rep.domain_tag,
                "r_at_1": repr(rep.r_at_1),
                "map_at_r": repr(rep.map_at_r),
                "n_queries": rep.n_queries,
                "dim": es.D,
                "config_hash": meta.get("config_hash", ""),
                "seed": args.seed,
            }
        )
    path = out / (args.name or "metrics.csv")
    if args.append and path.exists():
        rows = read_metrics_csv(path) + rows
    write_metrics_csv(path, rows)
    for r in rows[-len(args.embeddings):]:
        print(",".join(str(r[k]) for k in METRICS_FIELDS))


def cmd_report(args):
    _require_seed(args)
    out = _out_dir(args)
    rows = []
    for p in args.metrics:
        rows += read_metrics_csv(p)
    csv_path, md_path = write_report(out, rows)
    print(md_path.read_text())


def cmd_pipeline(args):
    _require_seed(args)
    cfg = _pipeline_config(args)
    if args.epochs is not None:
        cfg = replace(cfg, train=replace(cfg.train, epochs=args.epochs))
    res = run_pipeline(cfg)
    print(res.report_md.read_text())


# ---------------------------------------------------------------------------


def _add_common(p, data=False):
    p.add_argument("--seed", type=int, help="global seed (required)")
    p.add_argument("--out-dir", help="output directory (default: $ESE_OUT_DIR or .)")
    if data:
        p.add_argument("--config", help="key=value configuration file")
        p.add_argument("--set", action="append", help="override one config key, e.g. --set train.epochs=5")
        p.add_argument("--mnist-dir", help="directory with MNIST IDX files (raw or .gz)")
        p.add_argument("--n-train", type=int)
        p.add_argument("--n-test", type=int)
        p.add_argument("--jobs", type=int, help="worker processes for independent members")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ese", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic world's member embeddings")
    _add_common(p)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--d", type=int, default=8)
    p.add_argument("--m", type=int, default=5)
    p.add_argument("--kappa", type=float, default=0.0, help="noise concentration; 0 = exact")
    p.add_argument("--obs-dim", type=int)
    p.add_argument("--clusters", type=int, default=10, help="labelled latent clusters (0 = uniform, unlabelled)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-encoder", help="contrastively pre-train MLP encoders on MNIST")
    _add_common(p, data=True)
    p.add_argument("--members", type=int, nargs="+", help="member seeds (default: config member_seeds)")
    p.add_argument("--shared-init", type=int, help="WSE* mode: all members start from this init seed")
    p.set_defaults(func=cmd_train_encoder)

    p = sub.add_parser("embed", help="embed an MNIST split/domain with a trained encoder")
    _add_common(p, data=True)
    p.add_argument("--encoder", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--domain", choices=("id", "ood_color", "ood_crop"), default="id")
    p.add_argument("--name", help="output file name")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("align", help="learn alignment maps onto an anchor embedding file")
    _add_common(p)
    p.add_argument("--anchor", required=True)
    p.add_argument("--sources", nargs="+", required=True)
    p.add_argument("--lambdas", default="0.1,0.3,0.5")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("ensemble", help="Karcher-mean ensemble of member embedding files")
    _add_common(p)
    p.add_argument("--members", nargs="+", required=True)
    p.add_argument("--maps", nargs="*")
    p.add_argument("--mode", choices=("aligned", "unaligned"), default="aligned")
    p.add_argument("--anchor-index", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-8)
    p.add_argument("--max-iter", type=int, default=100)
    p.add_argument("--name")
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("wse", help="uniform weight average of encoders")
    _add_common(p)
    p.add_argument("--encoders", nargs="+", required=True)
    p.add_argument("--id", default="wse")
    p.set_defaults(func=cmd_wse)

    p = sub.add_parser("eval", help="Recall@1 and MAP@R of labelled embedding files")
    _add_common(p)
    p.add_argument("--embeddings", nargs="+", required=True)
    p.add_argument("--method", default="single", choices=("single", "unaligned", "aligned", "wse", "wse_star"))
    p.add_argument("--name", help="metrics CSV name (default metrics.csv)")
    p.add_argument("--append", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="CSV + markdown comparison table from metrics CSVs")
    _add_common(p)
    p.add_argument("--metrics", nargs="+", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("pipeline", help="run the whole MNIST experiment")
    _add_common(p, data=True)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_pipeline)
    return parser


NUMERIC_ERRORS = (AlignNumericError, TrainNumericError, KarcherDegeneracyError, np.linalg.LinAlgError, FloatingPointError)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except NUMERIC_ERRORS as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValidationError, ValueError, IndexError, FileNotFoundError, KeyError, MetricsError) as exc:
        if isinstance(exc.__cause__, NUMERIC_ERRORS):
            print(f"numeric failure: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
