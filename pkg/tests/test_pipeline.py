import math
from dataclasses import replace

import pytest

from conftest import MNIST_DIR, needs_mnist
from ese.align import AlignTrainConfig
from ese.contrastive import TrainConfig
from ese.pipeline import PipelineConfig, pct_change, report_tables, run_pipeline, summarize


def row(method, member, domain, r1, mp, dim=8):
    return {"method": method, "member": member, "domain_tag": domain, "r_at_1": str(r1), "map_at_r": str(mp), "dim": str(dim)}


def test_pct_change_formula():
    assert pct_change(0.9, 0.75) == pytest.approx(20.0, abs=1e-12)
    assert pct_change(0.5, 1.0) == -50.0
    # three-decimal table values 0.769 -> 0.823 give +7.02%; the unrounded values behind
    # such a table can land anywhere between these bounds, which brackets +6.99%
    assert f"{pct_change(0.823, 0.769):+.2f}" == "+7.02"
    lo, hi = pct_change(0.8225, 0.7695), pct_change(0.8235, 0.7685)
    assert lo < 6.99 < hi


def test_summarize_groups_and_refuses_mixed_dims():
    rows = [row("single", "a", "id", 0.5, 0.2), row("single", "b", "id", 0.7, 0.4), row("aligned", "e", "id", 0.8, 0.5)]
    table = summarize(rows)
    assert table[("r_at_1", "id")] == {"single": [0.5, 0.7], "aligned": 0.8}
    with pytest.raises(ValueError, match=r"dimensions \[8, 16\]"):
        summarize(rows + [row("single", "c", "id", 0.1, 0.1, dim=16)])


def test_report_layout():
    rows = []
    for d in ("id", "ood_color", "ood_crop"):
        rows += [row("single", "a", d, 0.6, 0.3), row("single", "b", d, 0.8, 0.5)]
        rows += [row("aligned", "e", d, 0.77, 0.44), row("unaligned", "u", d, 0.63, 0.36), row("wse", "w", d, 0.35, 0.1)]
    csv_text, md = report_tables(rows)
    lines = csv_text.splitlines()
    assert lines[0] == "metric,domain,single_mean,single_std,unaligned,unaligned_pct_change,aligned,aligned_pct_change,wse,wse_pct_change"
    assert len(lines) == 7
    assert lines[1] == "Recall@1,id,0.700000,0.100000,0.630000,-10.00,0.770000,+10.00,0.350000,-50.00"
    md_lines = md.splitlines()
    assert md_lines[0] == "| Metric | Domain | Single (mean ± std) | unaligned | %Δ | aligned | %Δ | wse | %Δ |"
    assert md_lines[2] == "| Recall@1 | ID | 0.700 ± 0.100 | 0.630 | -10.00% | 0.770 | +10.00% | 0.350 | -50.00% |"
    assert md_lines[-1].startswith("| MAP@R | OOD (Crop) | 0.400 ± 0.100 | 0.360 | -10.00%")


def test_config_round_trips_through_mapping():
    cfg = PipelineConfig(seed=3, n_train=700, train=TrainConfig(epochs=2, hidden_dims=(32,)), align=AlignTrainConfig(lambda_grid=(0.5,)))
    back = PipelineConfig.from_mapping(cfg.to_mapping())
    assert back == replace(cfg, out_dir=back.out_dir)
    assert back.hash == cfg.hash
    assert PipelineConfig(seed=4).hash != cfg.hash


def test_config_validation():
    with pytest.raises(ValueError, match="seed"):
        PipelineConfig.from_mapping({"n_train": 10})
    with pytest.raises(ValueError, match="unknown config section 'optim'"):
        PipelineConfig.from_mapping({"seed": 0, "optim.lr": 1})
    with pytest.raises(ValueError, match="non-negative seed"):
        PipelineConfig(seed=-1)
    with pytest.raises(ValueError, match="anchor_index"):
        PipelineConfig(seed=0, anchor_index=5)


def test_sub_seeds_are_distinct_and_stable():
    cfg = PipelineConfig(seed=0)
    seeds = [cfg.sub_seed(k) for k in range(1, 6)]
    assert len(set(seeds)) == 5
    assert seeds == [PipelineConfig(seed=0).sub_seed(k) for k in range(1, 6)]


def tiny_config(out_dir, jobs=1):
    return PipelineConfig(
        seed=0,
        mnist_dir=str(MNIST_DIR),
        out_dir=str(out_dir),
        n_train=600,
        n_test=120,
        member_seeds=(10, 11, 12),
        jobs=jobs,
        train=TrainConfig(epochs=1, hidden_dims=(32,)),
        align=AlignTrainConfig(epochs=2),
    )


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@needs_mnist
def test_tiny_pipeline_is_bit_reproducible_and_job_count_independent(tmp_path):
    res = run_pipeline(tiny_config(tmp_path / "a"))
    run_pipeline(tiny_config(tmp_path / "b"))
    run_pipeline(tiny_config(tmp_path / "c", jobs=2))
    a, b, c = (tree_bytes(tmp_path / n) for n in "abc")
    assert a.keys() == b.keys() == c.keys()
    for name in a:
        assert a[name] == b[name] == c[name], name
    assert {"metrics.csv", "report.csv", "report.md", "alignment.csv", "config.txt"} <= a.keys()
    assert sum(k.endswith(".ese") for k in a) == 3 + 3 * (3 + 2 + 2)
    assert len(res.maps) == 2
    assert len(res.rows) == 3 * (3 + 2 + 2)
    for r in res.rows:
        assert 0.0 <= float(r["r_at_1"]) <= 1.0 and not math.isnan(float(r["map_at_r"]))
