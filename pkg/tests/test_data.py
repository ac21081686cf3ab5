import json
import logging
from pathlib import Path

import numpy as np
import pytest

from gimp.config import rng_stream
from gimp.data import (HEADER, NORM_SIDECAR, GeneNormalizer, Manifest, ManifestRecord, SynthConfig,
                       balanced_batches, generate_synthetic, load_dataset, read_gene_file,
                       read_patch_file, split_counts, write_gene_file, write_patch_file)
from gimp.errors import ConfigError, DataError, MissingFileError

SMALL = dict(num_patients=12, n_genes=32, n_min=4, n_max=9, embed_dim=8)


def _files(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(Path(root).rglob("*")) if p.is_file()}


class TestPatchFormat:
    def test_round_trip(self, tmp_path, rng):
        emb = rng.standard_normal((5, 7)).astype(np.float32)
        write_patch_file(tmp_path / "a.gimp", emb)
        back = read_patch_file(tmp_path / "a.gimp", expected_dim=7)
        assert back.dtype == np.float64
        np.testing.assert_array_equal(back, emb.astype(np.float64))

    def test_truncated(self, tmp_path, rng):
        write_patch_file(tmp_path / "a.gimp", rng.standard_normal((5, 7)))
        raw = (tmp_path / "a.gimp").read_bytes()
        (tmp_path / "a.gimp").write_bytes(raw[:-3])
        with pytest.raises(DataError, match=f"expected {len(raw)} bytes.*found {len(raw) - 3}"):
            read_patch_file(tmp_path / "a.gimp")

    def test_truncated_header(self, tmp_path):
        (tmp_path / "a.gimp").write_bytes(b"GIM")
        with pytest.raises(DataError, match="truncated header"):
            read_patch_file(tmp_path / "a.gimp")

    def test_bad_magic(self, tmp_path, rng):
        write_patch_file(tmp_path / "a.gimp", rng.standard_normal((2, 3)))
        raw = bytearray((tmp_path / "a.gimp").read_bytes())
        raw[:4] = b"NOPE"
        (tmp_path / "a.gimp").write_bytes(bytes(raw))
        with pytest.raises(DataError, match="a.gimp.*magic.*byte 0"):
            read_patch_file(tmp_path / "a.gimp")

    def test_bad_version(self, tmp_path, rng):
        write_patch_file(tmp_path / "a.gimp", rng.standard_normal((2, 3)))
        raw = bytearray((tmp_path / "a.gimp").read_bytes())
        raw[4] = 9
        (tmp_path / "a.gimp").write_bytes(bytes(raw))
        with pytest.raises(DataError, match="version 9"):
            read_patch_file(tmp_path / "a.gimp")

    def test_wrong_dim(self, tmp_path, rng):
        write_patch_file(tmp_path / "a.gimp", rng.standard_normal((2, 3)))
        with pytest.raises(DataError, match="dim 3.*expected 4"):
            read_patch_file(tmp_path / "a.gimp", expected_dim=4)

    def test_nan_names_byte_offset(self, tmp_path, rng):
        emb = rng.standard_normal((3, 4))
        emb[1, 2] = np.nan
        write_patch_file(tmp_path / "a.gimp", emb)
        with pytest.raises(DataError, match=f"byte offset {HEADER.size + 4 * 6}"):
            read_patch_file(tmp_path / "a.gimp")

    def test_missing(self, tmp_path):
        with pytest.raises(MissingFileError):
            read_patch_file(tmp_path / "nope.gimp")

    def test_empty_rejected_on_write(self, tmp_path):
        with pytest.raises(DataError):
            write_patch_file(tmp_path / "a.gimp", np.zeros((0, 3)))


class TestGeneFormat:
    def test_round_trip_exact(self, tmp_path, rng):
        g = rng.standard_normal(20) * 1e3
        write_gene_file(tmp_path / "g.txt", g)
        np.testing.assert_array_equal(read_gene_file(tmp_path / "g.txt", 20), g)

    def test_line_count(self, tmp_path):
        write_gene_file(tmp_path / "g.txt", np.zeros(5))
        with pytest.raises(DataError, match="5 lines, expected N_ge=6"):
            read_gene_file(tmp_path / "g.txt", 6)

    def test_nan_line(self, tmp_path):
        (tmp_path / "g.txt").write_text("1.0\nnan\n2.0\n")
        with pytest.raises(DataError, match="line 2"):
            read_gene_file(tmp_path / "g.txt", 3)

    def test_garbage_line(self, tmp_path):
        (tmp_path / "g.txt").write_text("1.0\nabc\n")
        with pytest.raises(DataError, match="line 2"):
            read_gene_file(tmp_path / "g.txt", 2)


class TestSynthetic:
    def test_bitwise_deterministic(self, tmp_path):
        generate_synthetic(SynthConfig(seed=7, **SMALL), tmp_path / "a")
        generate_synthetic(SynthConfig(seed=7, **SMALL), tmp_path / "b")
        assert _files(tmp_path / "a") == _files(tmp_path / "b")

    def test_seed_changes_data(self, tmp_path):
        generate_synthetic(SynthConfig(seed=7, **SMALL), tmp_path / "a")
        generate_synthetic(SynthConfig(seed=8, **SMALL), tmp_path / "b")
        assert _files(tmp_path / "a") != _files(tmp_path / "b")

    def test_adjacent_patches_more_similar(self):
        ds = generate_synthetic(SynthConfig(num_patients=20, n_genes=16, n_min=64, n_max=128, embed_dim=64,
                                            rho=0.95, seed=1))
        r = np.random.default_rng(0)
        adj, rand = [], []
        for p in ds.pairs:
            e = p.patches.embeddings
            e = e / np.linalg.norm(e, axis=1, keepdims=True)
            adj.extend(np.sum(e[1:] * e[:-1], axis=1))
            i, j = r.integers(0, len(e), (2, 200))
            rand.extend(np.sum(e[i] * e[j], axis=1)[i != j])
        assert np.mean(adj) > np.mean(rand) + 0.3

    def test_patch_counts_in_range(self):
        ds = generate_synthetic(SynthConfig(num_patients=60, n_genes=8, n_min=5, n_max=11, embed_dim=4))
        counts = [p.patches.n_patches for p in ds.pairs]
        assert min(counts) >= 5 and max(counts) <= 11 and len(set(counts)) > 3

    def test_splits_disjoint_and_complete(self):
        ds = generate_synthetic(SynthConfig(**SMALL))
        ids = {s: {ds.pairs[i].patient_id for i in ds.splits[s]} for s in ds.splits}
        assert not (ids["train"] & ids["val"]) and not (ids["train"] & ids["test"]) and not (ids["val"] & ids["test"])
        assert sum(map(len, ids.values())) == SMALL["num_patients"]

    def test_split_counts(self):
        assert split_counts(946) == (567, 189, 190)
        assert split_counts(200) == (120, 40, 40)

    @pytest.mark.parametrize("bad", [dict(n_min=0), dict(n_min=5, n_max=4), dict(rho=1.0), dict(num_classes=1)])
    def test_invalid_config(self, bad):
        with pytest.raises(ConfigError):
            SynthConfig(**bad)

    def test_unwritable_output(self, tmp_path):
        (tmp_path / "file").write_text("x")
        with pytest.raises(DataError):
            generate_synthetic(SynthConfig(**SMALL), tmp_path / "file" / "sub")

    def test_gene_probe_tracks_shift(self):
        def probe(shift, seed):
            ds = generate_synthetic(SynthConfig(num_patients=200, n_min=1, n_max=2, embed_dim=2,
                                                gene_shift=shift, seed=seed)).prepared(1024)
            X = np.stack([p.gene.values for p in ds.split("train")])
            y = np.array([p.label for p in ds.split("train")]) * 2.0 - 1.0
            Xt = np.stack([p.gene.values for p in ds.split("test")])
            yt = np.array([p.label for p in ds.split("test")])
            A = np.c_[X, np.ones(len(X))]
            w = np.linalg.solve(A.T @ A + np.eye(A.shape[1]), A.T @ y)
            return np.mean((np.c_[Xt, np.ones(len(Xt))] @ w > 0) == yt)
        hi = np.mean([probe(3.0, s) for s in range(3)])
        lo = np.mean([probe(0.5, s) for s in range(3)])
        assert hi > lo


class TestManifestAndLoading:
    def test_round_trip_through_disk(self, tmp_path):
        ds = generate_synthetic(SynthConfig(**SMALL), tmp_path)
        loaded, manifest = load_dataset(tmp_path / "manifest.json", SMALL["n_genes"], embed_dim=8)
        assert manifest.split_sizes() == ds.split_sizes()
        norm = GeneNormalizer.fit(np.stack([p.gene.values for p in ds.split("train")]))
        by_id = {p.patient_id: p for p in loaded.pairs}
        for p in ds.pairs:
            q = by_id[p.patient_id]
            assert q.label == p.label
            np.testing.assert_array_equal(q.patches.embeddings, p.patches.embeddings)
            np.testing.assert_allclose(q.gene.values, norm.apply(p.gene.values), atol=1e-12)

    def test_sidecar_is_train_statistics(self, tmp_path):
        ds = generate_synthetic(SynthConfig(**SMALL), tmp_path)
        side = json.loads((tmp_path / NORM_SIDECAR).read_text())
        train = np.stack([p.gene.values for p in ds.split("train")])
        np.testing.assert_allclose(side["mean"], train.mean(0), atol=1e-12)
        np.testing.assert_allclose(side["std"], train.std(0), atol=1e-12)

    def test_sidecar_recomputed_when_absent(self, tmp_path):
        generate_synthetic(SynthConfig(**SMALL), tmp_path)
        before = (tmp_path / NORM_SIDECAR).read_bytes()
        (tmp_path / NORM_SIDECAR).unlink()
        load_dataset(tmp_path / "manifest.json", SMALL["n_genes"])
        assert (tmp_path / NORM_SIDECAR).read_bytes() == before

    def test_padding(self, tmp_path):
        generate_synthetic(SynthConfig(**SMALL), tmp_path)
        ds, _ = load_dataset(tmp_path / "manifest.json", SMALL["n_genes"], n_padded=40)
        g = ds.pairs[0].gene.values
        assert g.shape == (40,) and not g[32:].any()

    def test_duplicate_ids(self):
        r = ManifestRecord("a", "g", "p", 0, "train")
        with pytest.raises(DataError, match="duplicate"):
            Manifest([r, r])

    def test_unknown_split(self):
        with pytest.raises(DataError):
            Manifest([ManifestRecord("a", "g", "p", 0, "holdout")])

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(MissingFileError):
            Manifest.load(tmp_path / "none.json")

    def test_missing_patch_file(self, tmp_path):
        generate_synthetic(SynthConfig(**SMALL), tmp_path)
        next((tmp_path / "patches").iterdir()).unlink()
        with pytest.raises(MissingFileError):
            load_dataset(tmp_path / "manifest.json", SMALL["n_genes"])

    def test_wrong_gene_count(self, tmp_path):
        generate_synthetic(SynthConfig(**SMALL), tmp_path)
        (tmp_path / NORM_SIDECAR).unlink()
        with pytest.raises(DataError, match="expected N_ge=33"):
            load_dataset(tmp_path / "manifest.json", 33)


class TestBalancedBatches:
    def test_every_batch_has_two_classes(self):
        labels = np.r_[np.zeros(30, int), np.ones(7, int)]
        for b in balanced_batches(labels, 8, np.random.default_rng(0)):
            counts = np.bincount(labels[b], minlength=2)
            assert len(b) == 8 and counts.min() >= 2 and len(set(b)) == len(b)

    def test_epoch_length(self):
        assert len(balanced_batches(np.arange(20) % 2, 8, np.random.default_rng(0))) == 3

    def test_single_class_warns(self, caplog):
        with caplog.at_level(logging.WARNING):
            batches = balanced_batches(np.zeros(10, int), 4, np.random.default_rng(0))
        assert "single class" in caplog.text
        assert sorted(i for b in batches for i in b) == list(range(10))

    def test_deterministic(self):
        labels = np.arange(40) % 3
        a = balanced_batches(labels, 8, rng_stream(5, "batching"))
        b = balanced_batches(labels, 8, rng_stream(5, "batching"))
        assert a == b

    def test_empty(self):
        assert balanced_batches([], 8, np.random.default_rng(0)) == []
