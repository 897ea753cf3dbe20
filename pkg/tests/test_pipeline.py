import base64
import json
import logging

import numpy as np
import pytest
from synth import NOISE, SIGNAL, experiment_config, fill_store, make_dataset, make_images

from dermens.ensemble import ScoreTable, SelectionTrace
from dermens.errors import ContractError, ManifestError, ValidationError
from dermens.imaging import MaskImage, read_mask, write_png
from dermens.metrics import RocCurve, average_precision
from dermens.pipeline import (
    ExperimentConfig,
    FeatureRecord,
    FeatureStore,
    LabelVault,
    ManifestEntry,
    assign_validation_split,
    build_contexts,
    extract_features,
    group_masks,
    ingest_external_features,
    load_manifest,
    load_models,
    run_experiment,
    score_entries,
    segment_fuse,
)
from dermens.sparse import Dictionary

HEADER = "sample_id,image_path,mask_path,pred_mask_path,label,split\n"


@pytest.fixture
def imgdir(tmp_path):
    make_images(tmp_path, 3, 0)
    return tmp_path


# -- manifest -----------------------------------------------------------------


def write(path, text):
    path.write_text(text)
    return path


def test_manifest_two_rows(imgdir):
    m = write(imgdir / "m.csv", HEADER + "a,img/s000.png,img/s000_gt.png,,1,train\nb,img/s001.png,,,0,test\n")
    entries = load_manifest(m)
    assert [e.sample_id for e in entries] == ["a", "b"]
    assert entries[0].image_path == imgdir / "img" / "s000.png"
    assert entries[0].available_contexts() == ("WI", "CRGT")
    assert entries[1].available_contexts() == ("WI",)


@pytest.mark.parametrize(
    "rows, line, text",
    [
        ("a,img/s000.png,,,1,train\na,img/s001.png,,,0,train\n", 3, "duplicate"),
        ("a,img/s000.png,,,2,train\n", 2, "label must be 0 or 1"),
        ("a,img/s000.png,,,1,holdout\n", 2, "split"),
        ("a,img/s000.png,,,,train\n", 2, "labeled"),
        ("a,img/missing.png,,,1,train\n", 2, "does not exist"),
        ("a,img/s000.png,img/nope.png,,1,train\n", 2, "mask_path"),
        ("a,img/s000.png,,1,train\n", 2, "fields"),
    ],
)
def test_manifest_errors(imgdir, rows, line, text):
    with pytest.raises(ManifestError) as err:
        load_manifest(write(imgdir / "m.csv", HEADER + rows))
    assert err.value.line == line
    assert f"line {line}" in str(err.value) and text in str(err.value)


def test_manifest_bad_header(imgdir):
    with pytest.raises(ManifestError):
        load_manifest(write(imgdir / "m.csv", "id,image\n"))


def test_unlabeled_test_rows_allowed(imgdir):
    entries = load_manifest(write(imgdir / "m.csv", HEADER + "a,img/s000.png,,,,test\n"))
    assert entries[0].label is None


def test_validation_split_stratified():
    entries = [ManifestEntry(f"s{i}", "x", label=i % 2) for i in range(50)]
    out = assign_validation_split(entries, 0.2, seed=3)
    val = [e for e in out if e.split == "validation"]
    assert len(val) == 10 and sum(e.label for e in val) == 5
    assert out == assign_validation_split(entries, 0.2, seed=3)


# -- contexts -----------------------------------------------------------------


def test_contexts(tmp_path):
    (ip, gp, pp), = make_images(tmp_path, 1, 0, size=24)
    assert set(build_contexts(ManifestEntry("a", ip))) == {"WI"}
    ctx = build_contexts(ManifestEntry("a", ip, gp, pp))
    assert (ctx["CRGT"].height, ctx["CRGT"].width) == (12, 12)
    assert (ctx["CR"].height, ctx["CR"].width) == (12, 12)


def test_context_full_and_centered_masks(tmp_path):
    (ip, _, _), = make_images(tmp_path, 1, 0, size=30)
    full = tmp_path / "full.png"
    write_png(full, MaskImage(np.full((30, 30), 255, np.uint8)))
    ctx = build_contexts(ManifestEntry("a", ip, full))
    assert np.array_equal(ctx["CRGT"].values, ctx["WI"].values)
    sq = np.zeros((30, 30), np.uint8)
    sq[10:20, 10:20] = 255
    write_png(tmp_path / "sq.png", MaskImage(sq))
    c = build_contexts(ManifestEntry("a", ip, tmp_path / "sq.png"))["CRGT"]
    assert (c.width, c.height) == (10, 10)


def test_empty_mask_falls_back(tmp_path, caplog):
    (ip, _, _), = make_images(tmp_path, 1, 0)
    write_png(tmp_path / "empty.png", MaskImage(np.zeros((24, 24), np.uint8)))
    with caplog.at_level(logging.WARNING):
        ctx = build_contexts(ManifestEntry("a", ip, None, tmp_path / "empty.png"))
    assert np.array_equal(ctx["CR"].values, ctx["WI"].values)
    assert "empty mask" in caplog.text


# -- ingestion and store ------------------------------------------------------


def record_line(name, ctx, dims, sid="a", b64=False):
    vec = np.arange(dims, dtype=float) / dims
    payload = base64.b64encode(vec.astype("<f8").tobytes()).decode() if b64 else vec.tolist()
    return json.dumps({"sample_id": sid, "context": ctx, "feature_name": name, "vector": payload})


@pytest.mark.parametrize(
    "name, ctx, dims, ok",
    [
        ("drn_concepts", "CR", 1000, False),
        ("drn_concepts", "WI", 1000, True),
        ("caffe_fc6", "CR", 4095, False),
        ("caffe_fc6", "CRGT", 4096, True),
        ("unet_shape", "WI", 1024, True),
        ("unet_shape", "CRGT", 1024, False),
        ("mystery", "WI", 3, False),
    ],
)
def test_ingest_rules(tmp_path, name, ctx, dims, ok):
    p = write(tmp_path / "f.jsonl", record_line(name, ctx, dims) + "\n")
    if ok:
        recs = ingest_external_features(p)
        assert recs[0].vector.shape == (dims,)
    else:
        with pytest.raises(ValidationError) as err:
            ingest_external_features(p)
        assert ":1" in str(err.value)


def test_ingest_base64_and_duplicates(tmp_path):
    line = record_line("unet_shape", "WI", 1024, b64=True)
    recs = ingest_external_features(write(tmp_path / "f.jsonl", line + "\n\n"))
    assert np.array_equal(recs[0].vector, np.arange(1024) / 1024)
    with pytest.raises(ValidationError):
        ingest_external_features(write(tmp_path / "g.jsonl", line + "\n" + line + "\n"))
    with pytest.raises(ValidationError):
        ingest_external_features(write(tmp_path / "h.jsonl", "{not json\n"))


def test_store_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    vecs = {(f"s{i}", "WI", "color_hist"): rng.random(166) for i in range(5)}
    store = FeatureStore(tmp_path / "store.jsonl")
    store.put_many(FeatureRecord(*k, v) for k, v in vecs.items())
    again = FeatureStore(tmp_path / "store.jsonl")
    assert len(again) == 5
    for k, v in vecs.items():
        assert k in again and np.array_equal(again.get(*k), v)
    # a later record for the same key wins on reload
    again.put(FeatureRecord("s0", "WI", "color_hist", np.zeros(166)))
    assert not FeatureStore(tmp_path / "store.jsonl").get("s0", "WI", "color_hist").any()
    with pytest.raises(KeyError):
        again.get("zz", "WI", "color_hist")


# -- experiments --------------------------------------------------------------


@pytest.fixture
def dataset(tmp_path):
    manifest, labels = make_dataset(tmp_path, n=40, seed=2)
    store = fill_store(tmp_path / "store.jsonl", labels, seed=3)
    return tmp_path, load_manifest(manifest), store


def test_informative_feature_gives_perfect_test_ap(dataset):
    root, entries, store = dataset
    res = run_experiment(ExperimentConfig.from_dict(experiment_config("greedy")), entries, store, root / "out")
    assert res.report["splits"]["test"]["ap"] == 1.0
    assert res.report["selected"] == [f"WI:{SIGNAL}"]
    assert res.trace.rows[0]["component"] == f"WI:{SIGNAL}"


def test_rerun_bit_identical(dataset):
    root, entries, store = dataset
    cfg = ExperimentConfig.from_dict(experiment_config("forward"))
    run_experiment(cfg, entries, store, root / "a")
    run_experiment(cfg, entries, store, root / "b")
    for name in ("scores.csv", "report.json", "selection_trace.csv", "roc_test.csv"):
        assert (root / "a" / name).read_bytes() == (root / "b" / name).read_bytes()


def test_bundle_reparses(dataset):
    root, entries, store = dataset
    res = run_experiment(ExperimentConfig.from_dict(experiment_config("forward")), entries, store, root / "out")
    out = root / "out"
    report = json.loads((out / "report.json").read_text())
    assert report["selected"] == res.report["selected"]
    table = ScoreTable.from_csv((out / "scores.csv").read_text())
    assert np.array_equal(table.scores, res.table.scores)
    assert SelectionTrace.from_csv((out / "selection_trace.csv").read_text()).kind == "forward"
    roc = RocCurve.from_csv((out / "roc_test.csv").read_text())
    assert roc.tpr[-1] == 1.0
    models = load_models(out / "models")
    assert set(models) == {f"WI:{n}" for n in (SIGNAL, *NOISE)}
    test = [e for e in entries if e.split == "test"]
    rescored = score_entries(models, test, store)
    rows = [res.table.sample_ids.index(e.sample_id) for e in test]
    for k, name in enumerate(rescored.components):
        assert np.array_equal(rescored.scores[:, k], res.table.scores[rows, res.table.components.index(name)])


def test_vote_single_component_matches_avg(dataset):
    root, entries, store = dataset
    base = experiment_config("none", components=[{"feature": SIGNAL, "context": "WI"}])
    avg = run_experiment(ExperimentConfig.from_dict(base), entries, store)
    vote = run_experiment(ExperimentConfig.from_dict({**base, "fusion": "VOTE"}), entries, store)
    assert np.array_equal(avg.fused >= 0.5, vote.fused >= 0.5)


def test_test_labels_read_only_after_training(dataset):
    root, entries, store = dataset
    vault = LabelVault(entries)
    run_experiment(ExperimentConfig.from_dict(experiment_config("greedy")), entries, store, vault=vault)
    test_ids = {e.sample_id for e in entries if e.split == "test"}
    reads = [(sid, opened) for sid, _, opened in vault.access_log if sid in test_ids]
    assert reads and all(opened for _, opened in reads)


def test_vault_refuses_early_reads(dataset):
    _, entries, _ = dataset
    vault = LabelVault(entries)
    test_id = next(e.sample_id for e in entries if e.split == "test")
    with pytest.raises(ContractError):
        vault.evaluation_labels([test_id])
    with pytest.raises(ContractError):
        vault.training_labels([test_id])


def test_structured_errors_before_training(dataset):
    root, entries, store = dataset
    cfg = ExperimentConfig.from_dict(experiment_config(components=[{"feature": "caffe_fc6", "context": "WI"}]))
    with pytest.raises(ValidationError, match="not computable"):
        run_experiment(cfg, entries, store)
    one_class = [e for e in entries if e.label == 1]
    with pytest.raises(ValidationError, match="both classes"):
        run_experiment(ExperimentConfig.from_dict(experiment_config()), one_class, store)
    bad = experiment_config(components=[{"feature": "drn_concepts", "context": "CR"}])
    with pytest.raises(ValidationError, match="not defined for context"):
        run_experiment(ExperimentConfig.from_dict(bad), entries, store)


@pytest.mark.parametrize(
    "patch",
    [{"fusion": "MAX"}, {"selection": "best"}, {"folds": 1}, {"bogus": 1}, {"components": []},
     {"dictionaries": {"sc_rgb": "missing.bin"}}],
)
def test_config_validation(tmp_path, patch):
    with pytest.raises(ValidationError):
        ExperimentConfig.from_dict({**experiment_config(), **patch}, tmp_path)


def test_config_roundtrip(tmp_path):
    cfg = ExperimentConfig.from_dict(experiment_config())
    (tmp_path / "c.json").write_text(json.dumps(cfg.to_dict()))
    assert ExperimentConfig.load(tmp_path / "c.json").to_dict() == cfg.to_dict()


def test_hand_coded_features_end_to_end(tmp_path):
    manifest, labels = make_dataset(tmp_path, n=24, seed=4, colored=True)
    entries = load_manifest(manifest)
    store = FeatureStore(tmp_path / "store.jsonl")
    cfg = ExperimentConfig.from_dict({
        "components": [{"feature": "color_hist", "context": "CR"}, {"feature": "edge_hist", "context": "WI"},
                       {"feature": "mslbp", "context": "CRGT"}],
        "working_resolution": 32, "n_jobs": 2,
    })
    res = run_experiment(cfg, entries, store)
    assert len(store) == 3 * 24
    assert FeatureStore(tmp_path / "store.jsonl").get("s000", "CR", "color_hist").shape == (166,)
    test_rows = [i for i, s in enumerate(res.table.splits) if s == "test"]
    col = res.table.components.index("CR:color_hist")
    assert average_precision(res.table.scores[test_rows, col], res.table.labels[test_rows]) == 1.0


def test_sparse_feature_extraction(tmp_path):
    manifest, _ = make_dataset(tmp_path, n=12, seed=5)
    rng = np.random.default_rng(0)
    atoms = rng.standard_normal((64, 16))
    Dictionary(atoms / np.linalg.norm(atoms, axis=0), "GRAY").save(tmp_path / "gray.bin")
    cfg = ExperimentConfig.from_dict(
        {"components": [{"feature": "sc_gray", "context": "WI"}], "dictionaries": {"sc_gray": "gray.bin"}},
        tmp_path,
    )
    store = FeatureStore(tmp_path / "store.jsonl")
    assert extract_features(cfg, load_manifest(manifest), store) == 12
    v = store.get("s000", "WI", "sc_gray")
    assert v.shape == (16,) and np.all(v >= 0)
    # nothing left to do on a second pass
    assert extract_features(cfg, load_manifest(manifest), store) == 0


# -- segment fusion -----------------------------------------------------------


def test_segment_fuse_groups(tmp_path):
    src = tmp_path / "masks"
    (src / "a").mkdir(parents=True)
    for i in range(10):
        write_png(src / "a" / f"net{i}.png", MaskImage(np.full((4, 4), 255 if i < 5 else 0, np.uint8)))
    one = np.array([[0, 255], [255, 0]], np.uint8)
    write_png(src / "b_net1.png", MaskImage(one))
    for i in range(10):
        write_png(src / f"c_net{i}.png", MaskImage(one))
    assert sorted(group_masks(src)) == ["a", "b", "c"]
    out = segment_fuse(src, tmp_path / "out")
    assert not read_mask(out["a"]).values.any()
    assert np.array_equal(read_mask(out["b"]).values, one)
    assert np.array_equal(read_mask(out["c"]).values, one)


def test_segment_fuse_mismatch_names_sample(tmp_path):
    src = tmp_path / "masks"
    src.mkdir()
    write_png(src / "x_1.png", MaskImage(np.zeros((4, 4), np.uint8)))
    write_png(src / "x_2.png", MaskImage(np.zeros((5, 4), np.uint8)))
    with pytest.raises(ValidationError, match="sample x"):
        segment_fuse(src, tmp_path / "out")
    with pytest.raises(ValidationError):
        group_masks(tmp_path / "nothing")
