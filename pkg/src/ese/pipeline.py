"""Desk-scale experiment: pre-train M encoders on an MNIST subset, align them,
ensemble them, build weight-space baselines and evaluate everything on ID,
colored and cropped test sets.

Every stage goes through the artifact files of ``ese.io`` so the pipeline
and the individual CLI commands produce the same bytes.
"""
from __future__ import annotations

import csv
import io as _io
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import data as imaging
from . import io
from .align import AlignTrainConfig, align_ensemble
from .contrastive import InfoNceConfig, PositivePairPolicy, TrainConfig, TrainingSet, embed, train_encoder
from .embeddings import EmbeddingSet
from .ensemble import EnsembleSpec, WSE_STAR_LR_OFFSETS, ensemble_embed, weight_space_ensemble, wse_star_configs
from .metrics import evaluate
from .sphere import KarcherConfig

log = logging.getLogger(__name__)

DOMAIN_TAGS = ("id", "ood_color", "ood_crop")
DOMAIN_LABELS = {"id": "ID", "ood_color": "OOD (Color)", "ood_crop": "OOD (Crop)", "synthetic": "Synthetic"}
METHODS = ("single", "unaligned", "aligned", "wse", "wse_star")
METRICS_FIELDS = ["method", "member", "domain_tag", "r_at_1", "map_at_r", "n_queries", "dim", "config_hash", "seed"]


@dataclass
class PipelineConfig:
    seed: int
    mnist_dir: str = "data/mnist"
    out_dir: str = "out"
    n_train: int = 10000
    n_test: int = 2000
    member_seeds: tuple = (10, 11, 12, 13, 14)
    anchor_index: int = 0
    wse_star_init_seed: int = 10
    wse_star_grid: tuple = WSE_STAR_LR_OFFSETS
    baselines: bool = True
    jobs: int = 1
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=10))
    nce: InfoNceConfig = field(default_factory=InfoNceConfig)
    align: AlignTrainConfig = field(default_factory=AlignTrainConfig)
    karcher: KarcherConfig = field(default_factory=KarcherConfig)

    _SECTIONS = ("train", "nce", "align", "karcher")

    def __post_init__(self):
        if self.seed is None or self.seed < 0:
            raise ValueError("a non-negative seed is required for reproducibility")
        if len(self.member_seeds) < 2:
            raise ValueError("need at least two ensemble members")
        if not 0 <= self.anchor_index < len(self.member_seeds):
            raise ValueError(f"anchor_index {self.anchor_index} out of range")
        if self.n_train < 2 or self.n_test < 2:
            raise ValueError("train and test subsets need at least two samples")

    def to_mapping(self) -> dict:
        """Flat ``key -> value`` view; sub-config fields become ``section.field``."""
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name in self._SECTIONS:
                for k, sub in asdict(v).items():
                    out[f"{f.name}.{k}"] = sub
            elif f.name not in ("out_dir", "jobs"):
                out[f.name] = v
        return out

    @classmethod
    def from_mapping(cls, mapping: dict) -> "PipelineConfig":
        top, sections = {}, {s: {} for s in cls._SECTIONS}
        known = {f.name for f in fields(cls)}
        for key, value in mapping.items():
            if "." in key:
                section, name = key.split(".", 1)
                if section not in sections:
                    raise ValueError(f"unknown config section {section!r} in key {key!r}")
                sections[section][name] = value
            elif key in known:
                top[key] = value
            else:
                raise ValueError(f"unknown config key {key!r}")
        for key in ("member_seeds", "wse_star_grid"):
            if key in top and not isinstance(top[key], tuple):
                top[key] = (top[key],)
        if "lambda_grid" in sections["align"] and not isinstance(sections["align"]["lambda_grid"], tuple):
            sections["align"]["lambda_grid"] = (sections["align"]["lambda_grid"],)
        if "hidden_dims" in sections["train"] and not isinstance(sections["train"]["hidden_dims"], tuple):
            sections["train"]["hidden_dims"] = (sections["train"]["hidden_dims"],)
        defaults = cls(seed=top.get("seed", 0))
        built = {
            "train": replace(defaults.train, **sections["train"]),
            "nce": replace(defaults.nce, **sections["nce"]),
            "align": replace(defaults.align, **sections["align"]),
            "karcher": replace(defaults.karcher, **sections["karcher"]),
        }
        if "seed" not in top:
            raise ValueError("seed is required")
        return cls(**top, **built)

    @property
    def hash(self) -> str:
        return io.config_hash(self.to_mapping())

    def sub_seed(self, *key: int) -> int:
        return int(np.random.SeedSequence([self.seed, *key]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# stages


def load_data(cfg: PipelineConfig):
    train = imaging.load_mnist(cfg.mnist_dir, "train", n=cfg.n_train, seed=cfg.sub_seed(1))
    test = imaging.load_mnist(cfg.mnist_dir, "test", n=cfg.n_test, seed=cfg.sub_seed(2))
    return train, test


def test_domains(cfg: PipelineConfig, test: imaging.LabeledDataset) -> dict:
    return {
        "id": imaging.to_three_channel(test.images),
        "ood_color": imaging.color_dataset(test, cfg.sub_seed(3)).images,
        "ood_crop": imaging.crop_dataset(test, cfg.sub_seed(4)).images,
    }


def _train_one(args):
    dataset, nce, train, encoder_id = args
    return train_encoder(dataset, PositivePairPolicy("rotation"), nce, train, encoder_id=encoder_id)


def train_members(dataset: TrainingSet, nce: InfoNceConfig, configs: list, ids: list, jobs: int = 1) -> list:
    """Train one encoder per config; ``jobs > 1`` uses worker processes (results are identical)."""
    work = [(dataset, nce, c, i) for c, i in zip(configs, ids)]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_train_one, work))
    return [_train_one(w) for w in work]


def metrics_rows(path_by_key: dict, cfg_hash: str, seed: int) -> list[dict]:
    rows = []
    for (method, member, domain), path in path_by_key.items():
        es = io.read_embeddings(path)
        rep = evaluate(es, domain)
        rows.append(
            {
                "method": method,
                "member": member,
                "domain_tag": rep.domain_tag,
                "r_at_1": repr(rep.r_at_1),
                "map_at_r": repr(rep.map_at_r),
                "n_queries": rep.n_queries,
                "dim": es.D,
                "config_hash": cfg_hash,
                "seed": seed,
            }
        )
    return rows


def write_metrics_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRICS_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def read_metrics_csv(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing metrics file {path}")
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# report


def pct_change(value: float, baseline: float) -> float:
    return 100.0 * (value - baseline) / baseline


def summarize(rows: list[dict]) -> dict:
    """``{(metric, domain): {"single": [..], method: value}}`` from metrics rows."""
    dims = {int(r["dim"]) for r in rows}
    if len(dims) > 1:
        raise ValueError(f"refusing to mix artifacts with different embedding dimensions {sorted(dims)}")
    table = {}
    for r in rows:
        for metric in ("r_at_1", "map_at_r"):
            cell = table.setdefault((metric, r["domain_tag"]), {"single": []})
            v = float(r[metric])
            if r["method"] == "single":
                cell["single"].append(v)
            else:
                cell[r["method"]] = v
    return table


def report_tables(rows: list[dict]) -> tuple[str, str]:
    """CSV and markdown tables: rows metric x domain, columns single mean/std and each ensemble with %change."""
    table = summarize(rows)
    domains = [d for d in (*DOMAIN_TAGS, "synthetic") if any(k[1] == d for k in table)]
    methods = [m for m in METHODS[1:] if any(m in c for c in table.values())]

    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = ["metric", "domain", "single_mean", "single_std"]
    for m in methods:
        header += [m, f"{m}_pct_change"]
    w.writerow(header)

    md_head = ["Metric", "Domain", "Single (mean ± std)"]
    for m in methods:
        md_head += [m.replace("_", " "), "%Δ"]
    md = ["| " + " | ".join(md_head) + " |", "|" + "---|" * len(md_head)]

    for metric, name in (("r_at_1", "Recall@1"), ("map_at_r", "MAP@R")):
        for d in domains:
            cell = table.get((metric, d))
            if cell is None or not cell["single"]:
                continue
            mean = float(np.mean(cell["single"]))
            std = float(np.std(cell["single"]))
            csv_row = [name, d, f"{mean:.6f}", f"{std:.6f}"]
            md_row = [name, DOMAIN_LABELS[d], f"{mean:.3f} ± {std:.3f}"]
            for m in methods:
                if m in cell:
                    delta = pct_change(cell[m], mean)
                    csv_row += [f"{cell[m]:.6f}", f"{delta:+.2f}"]
                    md_row += [f"{cell[m]:.3f}", f"{delta:+.2f}%"]
                else:
                    csv_row += ["", ""]
                    md_row += ["", ""]
            w.writerow(csv_row)
            md.append("| " + " | ".join(md_row) + " |")
    return buf.getvalue(), "\n".join(md) + "\n"


def write_report(out_dir, rows: list[dict]) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    csv_text, md_text = report_tables(rows)
    csv_path, md_path = out_dir / "report.csv", out_dir / "report.md"
    csv_path.write_text(csv_text)
    md_path.write_text(md_text)
    return csv_path, md_path


# ---------------------------------------------------------------------------
# end to end


@dataclass
class PipelineResult:
    out_dir: Path
    rows: list
    maps: list
    report_csv: Path
    report_md: Path
    loss_histories: dict


def run_pipeline(cfg: PipelineConfig) -> PipelineResult:
    out = Path(cfg.out_dir)
    for sub in ("encoders", "embeddings", "maps"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    meta = {"config_hash": cfg.hash, "seed": cfg.seed}
    (out / "config.txt").write_text("".join(f"{k}={_fmt(v)}\n" for k, v in sorted(cfg.to_mapping().items())))

    train_ds, test_ds = load_data(cfg)
    dataset = TrainingSet(train_ds.images, train_ds.labels, channels=3)
    train_flat = imaging.to_three_channel(train_ds.images)
    domains = test_domains(cfg, test_ds)

    ids = [f"member-{s}" for s in cfg.member_seeds]
    configs = [replace(cfg.train, seed=int(s)) for s in cfg.member_seeds]
    log.info("training %d members", len(ids))
    encoders = train_members(dataset, cfg.nce, configs, ids, cfg.jobs)
    for enc in encoders:
        io.write_encoder(out / "encoders" / f"{enc.encoder_id}.esem", enc, meta)

    # alignment is fitted on training-set embeddings, never on test data
    train_paths = []
    for enc in encoders:
        p = out / "embeddings" / f"{enc.encoder_id}.train.ese"
        io.write_embeddings(p, embed(enc, train_flat, train_ds.labels, "id"), meta)
        train_paths.append(p)
    train_sets = [io.read_embeddings(p) for p in train_paths]
    align_cfg = replace(cfg.align, seed=cfg.sub_seed(5))
    maps = align_ensemble(train_sets, cfg.anchor_index, align_cfg, jobs=cfg.jobs)
    for m in maps:
        io.write_alignment(out / "maps" / f"{m.source_id}.esea", m, meta)

    wse = wse_star = None
    if cfg.baselines:
        wse = weight_space_ensemble(encoders, "wse")
        io.write_encoder(out / "encoders" / "wse.esem", wse, meta)
        star_cfgs = wse_star_configs(cfg.train, cfg.member_seeds, cfg.wse_star_grid, cfg.wse_star_init_seed)
        star_ids = [f"wse-star-{s}" for s in cfg.member_seeds]
        log.info("training %d WSE* members", len(star_ids))
        stars = train_members(dataset, cfg.nce, star_cfgs, star_ids, cfg.jobs)
        for enc in stars:
            io.write_encoder(out / "encoders" / f"{enc.encoder_id}.esem", enc, meta)
        wse_star = weight_space_ensemble(stars, "wse-star")
        io.write_encoder(out / "encoders" / "wse-star.esem", wse_star, meta)

    anchor_id = ids[cfg.anchor_index]
    paths = {}
    for tag, images in domains.items():
        member_paths = []
        for enc in encoders:
            p = out / "embeddings" / f"{enc.encoder_id}.{tag}.ese"
            io.write_embeddings(p, embed(enc, images, test_ds.labels, tag), meta)
            member_paths.append(p)
            paths[("single", enc.encoder_id, tag)] = p
        member_sets = [io.read_embeddings(p) for p in member_paths]
        for mode in ("unaligned", "aligned"):
            spec = EnsembleSpec(tuple(ids), anchor_id if mode == "aligned" else None, mode, cfg.karcher)
            es = ensemble_embed(member_sets, maps if mode == "aligned" else None, spec, tag)
            p = out / "embeddings" / f"ensemble-{mode}.{tag}.ese"
            io.write_embeddings(p, es, meta)
            paths[(mode, f"ensemble-{mode}", tag)] = p
        for name, enc in (("wse", wse), ("wse_star", wse_star)):
            if enc is None:
                continue
            p = out / "embeddings" / f"{enc.encoder_id}.{tag}.ese"
            io.write_embeddings(p, embed(enc, images, test_ds.labels, tag), meta)
            paths[(name, enc.encoder_id, tag)] = p

    rows = metrics_rows(paths, cfg.hash, cfg.seed)
    write_metrics_csv(out / "metrics.csv", rows)
    diag = [
        {"source": m.source_id, "lambda": m.lam, "geodesic": m.geodesic_term, "orthogonality_residual": m.orthogonality_residual}
        for m in maps
    ]
    with open(out / "alignment.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(diag[0]), lineterminator="\n")
        w.writeheader()
        w.writerows({k: (repr(v) if isinstance(v, float) else v) for k, v in d.items()} for d in diag)
    csv_path, md_path = write_report(out, rows)
    return PipelineResult(out, rows, maps, csv_path, md_path, {e.encoder_id: e.loss_history for e in encoders})


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ",".join(_fmt(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)
