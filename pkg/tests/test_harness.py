import csv
import json
import re

import numpy as np
import pytest

from plab.harness import (
    SCHEMA_VERSION,
    CorpusSpec,
    ExperimentSpec,
    MatrixContext,
    ModelEntry,
    ProbeSet,
    RunRecord,
    emit_report,
    equal_step_ratio,
    generate_corpus,
    load_distances,
    load_records,
    rank_frequency_slope,
    read_corpus,
    run_distances,
    run_matrix,
    second_probe_check,
    split_corpus,
    write_corpus,
)
from plab.harness.report import NA, ratio_table
from plab.models import ConfigError, STANDARD_DEPTHS
from plab.repmetrics import DepthProfile, SlopeFit
from conftest import tiny_config

HARNESS_MODEL = dict(vocab_size=256, max_seq=16)


def small_spec(tmp_path, **changes):
    base = dict(
        models=(
            ModelEntry("seq", tiny_config(**HARNESS_MODEL)),
            ModelEntry("par", tiny_config(block_type="parallel", **HARNESS_MODEL)),
        ),
        objectives=("CausalLM", "SimCSE"),
        conditions=("standard", "equal_step"),
        seeds=(0,),
        corpus=CorpusSpec(size=300, seed=0),
        probe_count=20,
        schedule_batches=4,
        schedule_batch_size=4,
        pretrain_steps=10,
        finetune_steps=4,
        batch_size=8,
        lr=1e-3,
        out_dir=str(tmp_path),
    )
    base.update(changes)
    return ExperimentSpec(**base)


# ---------------------------------------------------------------- corpora


def test_zipf_corpus_rerun_identical(tmp_path):
    a = write_corpus(tmp_path / "a.txt", generate_corpus("zipf-synthetic", 1000, seed=7))
    b = write_corpus(tmp_path / "b.txt", generate_corpus("zipf-synthetic", 1000, seed=7))
    assert a.read_bytes() == b.read_bytes()
    assert read_corpus(a) == generate_corpus("zipf-synthetic", 1000, seed=7)
    assert a.read_bytes() != write_corpus(tmp_path / "c.txt", generate_corpus("zipf-synthetic", 1000, seed=8)).read_bytes()


def test_corpus_file_format(tmp_path):
    path = write_corpus(tmp_path / "c.txt", [[1, 22, 3], [40]])
    assert path.read_text() == "1 22 3\n40\n"


def test_byte_text_ids_below_256(tmp_path):
    src = tmp_path / "src.txt"
    src.write_text("Hello, world.\n\nÜnïcödé line with more than thirty-one bytes in it for chunking.\n", encoding="utf-8")
    seqs = generate_corpus("byte-text", 50, seed=0, source=src)
    assert seqs and all(0 <= t < 256 for s in seqs for t in s)
    assert all(1 <= len(s) <= 31 for s in seqs)
    with pytest.raises(ValueError):
        generate_corpus("byte-text", 10, seed=0)


def test_zipf_rank_frequency_slope():
    seqs = generate_corpus("zipf-synthetic", 4000, seed=0)
    assert abs(rank_frequency_slope(seqs) - (-1.1)) <= 0.1


def test_corpus_errors():
    with pytest.raises(ValueError):
        generate_corpus("zipf-synthetic", 0, seed=0)
    with pytest.raises(ValueError):
        generate_corpus("wiki", 10, seed=0)


def test_split_corpus_disjoint_probe_sets():
    seqs = generate_corpus("zipf-synthetic", 200, seed=1)
    train, (p1, p2) = split_corpus(seqs, 20, seed=0)
    assert len(p1) == len(p2) == 20 and len(train) == 160
    assert p1.digest != p2.digest
    ids, mask = p1.arrays(tiny_config(attention="bidirectional", **HARNESS_MODEL))
    assert ids.shape == (20, 16) and np.all(ids[:, 0] == tiny_config(**HARNESS_MODEL).cls_id) and mask[:, 0].all()
    assert ProbeSet(p1.sequences).digest == p1.digest


# ---------------------------------------------------------------- experiment spec


def test_spec_json_roundtrip_and_hash(tmp_path):
    spec = small_spec(tmp_path)
    again = ExperimentSpec.from_dict(json.loads(spec.to_json()))
    assert again == spec and again.spec_hash == spec.spec_hash
    assert spec.with_changes(out_dir="elsewhere").spec_hash == spec.spec_hash
    assert spec.with_changes(lr=3e-5).spec_hash != spec.spec_hash


def test_spec_validation(tmp_path):
    with pytest.raises(ConfigError):
        small_spec(tmp_path, objectives=("NSP",))
    with pytest.raises(ConfigError):
        small_spec(tmp_path, depths=(0.0, 0.5))
    with pytest.raises(ConfigError):
        small_spec(tmp_path, conditions=("sgd",))
    with pytest.raises(ConfigError):
        ExperimentSpec.from_dict({**small_spec(tmp_path).to_dict(), "learning_rate": 1})


def test_spec_defaults():
    spec = ExperimentSpec(models=(ModelEntry("m", tiny_config()),))
    assert spec.depths == STANDARD_DEPTHS and spec.probe_count == 290
    assert (spec.lr, spec.weight_decay, spec.max_grad_norm, spec.batch_size, spec.layer_decay, spec.tau) == (2e-5, 0.01, 1.0, 32, 0.95, 1e-3)
    assert spec.pretrain_steps == 3000


# ---------------------------------------------------------------- matrix


@pytest.fixture(scope="module")
def matrix(tmp_path_factory):
    out = tmp_path_factory.mktemp("matrix")
    spec = small_spec(out)
    ctx = MatrixContext(spec)
    results = run_matrix(spec, ctx=ctx, keep_models=True)
    return spec, ctx, results


def test_matrix_counts_records(matrix):
    spec, ctx, results = matrix
    assert len(results) == 8 and all(r.record.ok for r in results)
    assert len(load_records(ctx.out_dir / "records")) == 8
    assert [r.record.cell for r in results] == spec.cells()


def test_record_contents(matrix):
    _, ctx, results = matrix
    rec = results[0].record
    assert rec.schema_version == SCHEMA_VERSION and rec.probe_hash == ctx.probes.digest
    assert set(rec.profiles) == {"procrustes", "cka", "rsa"}
    assert all(len(p.values) == 7 for p in rec.profiles.values())
    assert abs(sum(rec.normalized.fractions) - 1) < 1e-9
    assert rec.pretrain["steps"] == 10 and rec.loss["steps"] == 4
    eq = [r.record for r in results if r.record.condition == "equal_step"]
    assert eq and all(len(v) == 4 for v in eq[0].trust_trace.values())
    assert all(abs(x - 1e-3) / 1e-3 < 1e-9 for v in eq[0].trust_trace.values() for x in v)


def test_record_roundtrip_lossless(matrix, tmp_path):
    _, _, results = matrix
    for res in results:
        path = res.record.save(tmp_path)
        back = RunRecord.load(path)
        assert back.payload_bytes() == res.record.payload_bytes()
        assert back.wall_time == res.record.wall_time


def test_rerun_byte_identical_and_parallel_matches_serial(matrix, tmp_path):
    spec, _, results = matrix
    fresh = run_matrix(spec.with_changes(out_dir=str(tmp_path)), jobs=3, save=False,
                       ctx=MatrixContext(spec, out_dir=tmp_path, use_disk_cache=False))
    assert [r.record.payload_bytes() for r in fresh] == [r.record.payload_bytes() for r in results]


def test_failed_cell_recorded_and_matrix_continues(tmp_path):
    spec = small_spec(tmp_path, models=(ModelEntry("seq", tiny_config(**HARNESS_MODEL)),), conditions=("standard",),
                      objectives=("CausalLM",), finetune_steps=1, batch_size=400)
    results = run_matrix(spec, save=False)
    assert len(results) == 1 and results[0].record.status == "failed"
    assert "TrainingError" in results[0].record.error


def test_unknown_cell_fails_alone(matrix, tmp_path):
    spec, ctx, _ = matrix
    cells = [("seq", "CausalLM", "standard", 0), ("ghost", "CausalLM", "standard", 0)]
    results = run_matrix(spec, cells=cells, ctx=ctx, save=False)
    assert results[0].record.ok and not results[1].record.ok and "ghost" in results[1].record.error


def test_corpus_vocab_collision(tmp_path):
    with pytest.raises(ValueError):
        MatrixContext(small_spec(tmp_path, models=(ModelEntry("seq", tiny_config()),)))


def test_pretrain_disk_cache(matrix):
    spec, ctx, _ = matrix
    ckpts = sorted((ctx.out_dir / "pretrain").glob("*.ckpt"))
    assert len(ckpts) == 2
    other = MatrixContext(spec)
    a, b = other.pretrained("seq", 0), ctx.pretrained("seq", 0)
    assert all(a[n].data.tobytes() == b[n].data.tobytes() for n in a.params)


def test_seed_isolation(tmp_path):
    spec = small_spec(tmp_path, models=(ModelEntry("seq", tiny_config(**HARNESS_MODEL)),), conditions=("standard",),
                      objectives=("SimCSE",), seeds=(0, 1))
    ctx = MatrixContext(spec, use_disk_cache=False)
    both = run_matrix(spec, ctx=ctx, save=False)
    alone = run_matrix(spec.with_changes(seeds=(1,)), ctx=MatrixContext(spec.with_changes(seeds=(1,)), use_disk_cache=False), save=False)
    # the seed-1 record differs from seed 0 but is unaffected by seed 0 running first
    assert both[1].record.payload()["profiles"] == alone[0].record.payload()["profiles"]
    assert both[0].record.payload()["profiles"] != both[1].record.payload()["profiles"]


def test_distances_saved(matrix):
    _, ctx, _ = matrix
    rep = run_distances(ctx, "seq", 0)
    assert rep.entries["CausalLM"]["procrustes"] == 0.0
    loaded = load_distances(ctx.out_dir / "distances")
    assert loaded[("seq", 0)].to_json() == rep.to_json()


# ---------------------------------------------------------------- probe swap


def test_second_probe_same_probes_gives_one(tmp_path):
    spec = small_spec(tmp_path, models=(ModelEntry("seq", tiny_config(**HARNESS_MODEL)),), conditions=("standard",),
                      objectives=("CausalLM", "CausalSpan", "SimCSE", "BarlowTwins"), finetune_steps=6)
    ctx = MatrixContext(spec)
    results = run_matrix(spec, ctx=ctx, save=False)
    assert second_probe_check(ctx, results, alternate=ctx.probes) == {"seq": 1.0}
    # dropping the models forces an exact recapture
    stripped = [type(r)(r.record) for r in results]
    assert second_probe_check(ctx, stripped, alternate=ctx.probes) == {"seq": 1.0}


def test_second_probe_needs_three_objectives(matrix):
    _, ctx, results = matrix
    with pytest.raises(ValueError):
        second_probe_check(ctx, results)


def test_second_probe_disjoint_probes_on_converged_model(tmp_path):
    spec = small_spec(tmp_path, models=(ModelEntry("seq", tiny_config(**HARNESS_MODEL)),), conditions=("standard",),
                      objectives=("CausalLM", "CausalSpan", "SimCSE", "BarlowTwins"), corpus=CorpusSpec(size=1200, seed=0),
                      probe_count=60, pretrain_steps=300, finetune_steps=40, batch_size=16)
    ctx = MatrixContext(spec)
    results = run_matrix(spec, ctx=ctx, save=False, keep_models=True)
    rho = second_probe_check(ctx, results)["seq"]
    print(f"probe-swap rho: {rho:.3f}")
    assert rho >= 0.5


# ---------------------------------------------------------------- reports


def _record(obj, cond, alpha, seed=0, values=None):
    values = values or tuple(alpha * d + 0.01 for d in STANDARD_DEPTHS)
    profiles = {m: DepthProfile(STANDARD_DEPTHS, tuple(values), m) for m in ("procrustes", "cka", "rsa")}
    rec = RunRecord("m", obj, cond, seed, "h", profiles=profiles,
                    slopes={m: SlopeFit(alpha, 0.01, 0.0) for m in profiles})
    from plab.repmetrics import normalize_profile

    rec.normalized = normalize_profile(profiles["cka"])
    return rec


def test_ratio_column(tmp_path):
    recs = [_record("A", "standard", 0.4), _record("A", "equal_step", 0.1), _record("B", "standard", 0.0, values=(0.1,) * 7),
            _record("B", "equal_step", 0.2)]
    rows = list(csv.reader(open(ratio_table(recs, tmp_path / "r.csv"), newline="")))
    by = {(r[0], r[1], r[2]): r for r in rows[1:]}
    assert float(by[("m", "A", "procrustes")][5]) == 0.1 / 0.4
    assert by[("m", "B", "procrustes")][5] == NA
    assert equal_step_ratio(0.2, 0.0) is None


def test_emit_report_files_and_svg_points(matrix, tmp_path):
    _, ctx, results = matrix
    rep = run_distances(ctx, "seq", 0, save=False)
    files = emit_report([r.record for r in results], tmp_path, distances={("seq", 0): rep})
    names = {f.name for f in files}
    assert {"slopes.csv", "equal_step_ratio.csv", "normalized_profiles.csv", "depth_profiles.csv", "distance_slope.csv"} <= names
    svgs = [f for f in files if f.suffix == ".svg"]
    assert len(svgs) == 2 * 3
    text = svgs[0].read_text()
    assert text.startswith("<?xml") and 'version="1.1"' in text
    groups = re.findall(r'<g id="series-([^"]+)">(.*?)</g>', text, re.S)
    assert len(groups) == 4
    for _, body in groups:
        path = re.search(r' d="([^"]+)"', body).group(1)
        assert len(re.findall(r"[ML]", path)) == 7


def test_report_values_trace_to_records(matrix, tmp_path):
    _, _, results = matrix
    recs = [r.record for r in results]
    emit_report(recs, tmp_path)
    rows = list(csv.DictReader(open(tmp_path / "depth_profiles.csv", newline="")))
    assert len(rows) == 8 * 3
    for row in rows:
        rec = next(r for r in recs if (r.model, r.objective, r.condition, r.seed) == (row["model"], row["objective"], row["condition"], int(row["seed"])))
        assert float(row["alpha"]) == rec.slopes[row["metric"]].alpha
        assert float(row["d1.00"]) == rec.profiles[row["metric"]].values[-1]


def test_report_deterministic(matrix, tmp_path):
    _, _, results = matrix
    a = emit_report([r.record for r in results], tmp_path / "a")
    b = emit_report([r.record for r in results], tmp_path / "b")
    assert [f.read_bytes() for f in a] == [f.read_bytes() for f in b]


def test_emit_report_empty(tmp_path):
    with pytest.raises(ValueError):
        emit_report([], tmp_path)
