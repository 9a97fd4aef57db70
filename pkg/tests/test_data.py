import json
import math

import numpy as np
import pytest

from mdfusion.data import (
    Dataset,
    Sample,
    SynthConfig,
    batch_iter,
    epoch_order,
    read_dataset,
    read_emb,
    split_folds,
    synth_generate,
    write_dataset,
    write_emb,
)
from mdfusion.errors import ConsistencyError, FormatError, InputError
from mdfusion.metrics import auroc


def tiny_ds(n=1, dim_c=2, dim_t=1):
    samples = [Sample(f"s{i}", f"p{i}", i % 2) for i in range(n)]
    emb = {"image": np.arange(n * dim_c, dtype=float).reshape(n, dim_c) + 1.0,
           "tabular": np.full((n, dim_t), 0.5)}
    return Dataset(samples, emb)


# -- file format -------------------------------------------------------------

def test_single_sample_round_trip(tmp_path):
    ds = tiny_ds()
    write_dataset(ds, tmp_path)
    back = read_dataset(tmp_path)
    np.testing.assert_array_equal(back.embeddings["image"], [[1.0, 2.0]])
    assert back == ds


def test_manifest_dim_mismatch_is_format_error(tmp_path):
    ds = tiny_ds(n=3, dim_c=4)
    write_dataset(ds, tmp_path)
    m = json.loads((tmp_path / "manifest.json").read_text())
    m["modalities"][0]["dim"] = 8
    (tmp_path / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(FormatError, match=r"image\.emb.*8.*4"):
        read_dataset(tmp_path)


def test_bitwise_round_trip_100_samples(tmp_path):
    ds = synth_generate(SynthConfig(n_patients=100, seed=3))
    write_dataset(ds, tmp_path)
    back = read_dataset(tmp_path)
    for m in ("image", "tabular"):
        assert back.embeddings[m].tobytes() == ds.embeddings[m].tobytes()
    assert back.samples == ds.samples


def test_float32_payload(tmp_path):
    mat = np.array([[1.5, -2.25], [3.0, 0.125]])
    write_emb(tmp_path / "x.emb", mat, dtype=0)
    back, code = read_emb(tmp_path / "x.emb")
    assert code == 0 and back.dtype == np.float64
    np.testing.assert_array_equal(back, mat)
    assert (tmp_path / "x.emb").stat().st_size == 13 + 16


def test_bad_magic_and_truncation(tmp_path):
    write_emb(tmp_path / "x.emb", np.ones((2, 2)))
    raw = (tmp_path / "x.emb").read_bytes()
    (tmp_path / "bad.emb").write_bytes(b"EMB2" + raw[4:])
    with pytest.raises(FormatError, match="magic"):
        read_emb(tmp_path / "bad.emb")
    (tmp_path / "short.emb").write_bytes(raw[:-3])
    with pytest.raises(FormatError, match="bytes"):
        read_emb(tmp_path / "short.emb")
    (tmp_path / "tiny.emb").write_bytes(b"EM")
    with pytest.raises(FormatError):
        read_emb(tmp_path / "tiny.emb")


def test_missing_manifest(tmp_path):
    with pytest.raises(FormatError):
        read_dataset(tmp_path)


def test_row_count_mismatch(tmp_path):
    write_dataset(tiny_ds(n=3), tmp_path)
    write_emb(tmp_path / "tabular.emb", np.ones((2, 1)))
    with pytest.raises(ConsistencyError):
        read_dataset(tmp_path)


def test_dataset_validation():
    with pytest.raises(ConsistencyError):
        Dataset([Sample("a", "p", 0), Sample("a", "q", 1)],
                {"image": np.ones((2, 1)), "tabular": np.ones((2, 1))})
    with pytest.raises(ConsistencyError):
        Dataset([Sample("a", "p", 2)], {"image": np.ones((1, 1)), "tabular": np.ones((1, 1))})
    with pytest.raises(ConsistencyError):
        tiny_ds(n=2).rows(["nope"])


def test_truncate_keeps_leading_columns():
    ds = synth_generate(SynthConfig(n_patients=10))
    t = ds.truncate(5)
    assert t.dim_t == 5
    np.testing.assert_array_equal(t.embeddings["tabular"], ds.embeddings["tabular"][:, :5])


# -- synthetic generator --------------------------------------------------------

def test_synth_golden_values():
    ds = synth_generate(SynthConfig())
    assert ds.embeddings["image"][0, :3].tolist() == [-1.1004422900385216, 1.3110163991168204, 3.9166526583421706]
    assert ds.embeddings["tabular"][0, :3].tolist() == [-1.16715561710944, -3.0027291623363146, 0.3080430810953536]
    assert ds.labels[:5].tolist() == [0, 0, 1, 0, 0]
    assert ds.labels.mean() == 0.44


def test_synth_is_deterministic():
    a, b = synth_generate(SynthConfig(seed=9)), synth_generate(SynthConfig(seed=9))
    assert a == b
    assert not synth_generate(SynthConfig(seed=10)) == a


def test_synth_shapes_and_ids():
    ds = synth_generate(SynthConfig(n_patients=12, samples_per_patient=3, dim_c=5, dim_t=2))
    assert ds.embeddings["image"].shape == (36, 5) and ds.embeddings["tabular"].shape == (36, 2)
    assert ds.sample_ids[:3] == ["P00-S0", "P00-S1", "P00-S2"]
    assert len(ds.patients()) == 12
    for p in ds.patients():
        assert len({s.label for s in ds.samples if s.patient_id == p}) == 1


@pytest.mark.parametrize("seed", range(10))
def test_synth_label_balance(seed):
    frac = synth_generate(SynthConfig(seed=seed)).labels.mean()
    assert 0.4 <= frac <= 0.6


def test_noiseless_data_is_linearly_separable():
    # latent coordinate 0 decides the label; recover it by least squares on each view
    ds = synth_generate(SynthConfig(sigma_c=0.0, sigma_t=0.0, seed=1))
    for m in ("image", "tabular"):
        x = ds.embeddings[m]
        y = 2 * ds.labels - 1
        w, *_ = np.linalg.lstsq(np.c_[x, np.ones(len(x))], y, rcond=None)
        assert auroc(np.c_[x, np.ones(len(x))] @ w, ds.labels) >= 0.97
    cfg = SynthConfig(sigma_c=0.0, sigma_t=0.0, seed=1)
    from mdfusion.rng import Xoshiro256pp
    r = Xoshiro256pp(cfg.seed)
    proj_c = r.normals(cfg.dim_c, cfg.latent_dim)
    u = ds.embeddings["image"] @ np.linalg.pinv(proj_c).T
    assert auroc(u[:, 0], ds.labels) == 1.0


def test_label_noise_flips_some_labels():
    clean = synth_generate(SynthConfig(seed=4))
    noisy = synth_generate(SynthConfig(seed=4, label_noise=0.2))
    flips = np.mean(clean.labels != noisy.labels)
    assert 0.1 < flips < 0.3
    np.testing.assert_array_equal(clean.embeddings["image"], noisy.embeddings["image"])


def test_synth_config_validation():
    with pytest.raises(InputError):
        synth_generate(SynthConfig(n_patients=0))
    with pytest.raises(InputError):
        synth_generate(SynthConfig(sigma_c=-1.0))
    with pytest.raises(InputError):
        synth_generate(SynthConfig(label_noise=0.5))


# -- folds ---------------------------------------------------------------------

def test_four_patients_four_folds():
    ds = synth_generate(SynthConfig(n_patients=4, samples_per_patient=2))
    folds = split_folds(ds, n_folds=4)
    for f in folds:
        assert len({ds.samples[i].patient_id for i in ds.rows(f.test_ids)}) == 1


def test_too_few_patients():
    ds = synth_generate(SynthConfig(n_patients=3))
    with pytest.raises(InputError, match="fewer patients than folds"):
        split_folds(ds, n_folds=4)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_fold_partition_and_group_integrity(seed):
    ds = synth_generate(SynthConfig(n_patients=50, samples_per_patient=3, seed=seed))
    pid = {s.sample_id: s.patient_id for s in ds.samples}
    folds = split_folds(ds, n_folds=4, val_frac=0.1, seed=seed)
    all_test = [i for f in folds for i in f.test_ids]
    assert sorted(all_test) == sorted(ds.sample_ids)
    for f in folds:
        parts = [set(f.train_ids), set(f.val_ids), set(f.test_ids)]
        assert set.union(*parts) == set(ds.sample_ids)
        assert sum(map(len, parts)) == len(ds.sample_ids)
        pats = [{pid[i] for i in p} for p in parts]
        assert not (pats[0] & pats[1]) and not (pats[0] & pats[2]) and not (pats[1] & pats[2])
        n_rest = 50 - len(pats[2])
        assert len(pats[1]) == math.ceil(0.1 * n_rest)
    sizes = [len({pid[i] for i in f.test_ids}) for f in folds]
    assert max(sizes) - min(sizes) <= 1


def test_split_is_deterministic():
    ds = synth_generate(SynthConfig(n_patients=30))
    assert split_folds(ds, seed=3) == split_folds(ds, seed=3)
    assert split_folds(ds, seed=3) != split_folds(ds, seed=4)


# -- batches --------------------------------------------------------------------

def test_batch_sizes_with_short_tail():
    ds = synth_generate(SynthConfig(n_patients=10))
    sizes = [len(y) for _, _, y in batch_iter(ds, ds.sample_ids, 4, shuffle_seed=1, epoch=0)]
    assert sizes == [4, 4, 2]


def test_batches_cover_ids_once_and_follow_epoch_order():
    ds = synth_generate(SynthConfig(n_patients=13))
    ids = ds.sample_ids
    order = epoch_order(ds, ids, shuffle_seed=5, epoch=2)
    assert sorted(order) == sorted(ids)
    xs = np.concatenate([xc for xc, _, _ in batch_iter(ds, ids, 5, shuffle_seed=5, epoch=2)])
    np.testing.assert_array_equal(xs, ds.embeddings["image"][ds.rows(order)])
    assert epoch_order(ds, ids, 5, 2) == order
    assert epoch_order(ds, ids, 5, 3) != order


def test_batch_size_must_be_positive():
    ds = tiny_ds(n=2)
    with pytest.raises(InputError):
        list(batch_iter(ds, ds.sample_ids, 0, 0, 0))
