import numpy as np
import pytest

from contalign.alignment import AlignmentLayer
from contalign.data import generate_stream
from contalign.io import (
    ALIGNMENT_MAGIC,
    FormatError,
    export_stream,
    import_stream,
    load_alignment,
    load_backbone,
    load_pool,
    load_vae,
    read_array_pack,
    save_alignment,
    save_backbone,
    save_pool,
    save_vae,
    write_array_pack,
)
from contalign.nn import Rng
from contalign.router import RouterPool, TaskVAE, route, score_features


class TestArrayPack:
    def test_round_trip_bitwise(self, tmp_path):
        rng = Rng(1)
        arrays = {"weights": rng.normal((3, 4, 2)), "bias": rng.normal((7,))}
        meta = {"task_id": 3, "note": "x"}
        path = tmp_path / "pack.bin"
        write_array_pack(path, b"TESTPAK1", meta, arrays)
        got_meta, got_arrays = read_array_pack(path, b"TESTPAK1")
        assert got_meta == meta
        for name in arrays:
            np.testing.assert_array_equal(got_arrays[name], arrays[name])

    def test_wrong_magic_rejected(self, tmp_path):
        path = tmp_path / "pack.bin"
        write_array_pack(path, b"TESTPAK1", {}, {})
        with pytest.raises(FormatError, match="magic"):
            read_array_pack(path, b"OTHERMG1")

    def test_corrupted_magic_rejected(self, tmp_path):
        path = tmp_path / "pack.bin"
        write_array_pack(path, ALIGNMENT_MAGIC, {"task_id": 0}, {})
        blob = bytearray(path.read_bytes())
        blob[0] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError):
            load_alignment(path)

    def test_trailing_bytes_rejected(self, tmp_path):
        path = tmp_path / "pack.bin"
        write_array_pack(path, b"TESTPAK1", {}, {})
        with open(path, "ab") as fh:
            fh.write(b"junk")
        with pytest.raises(FormatError, match="trailing"):
            read_array_pack(path, b"TESTPAK1")


class TestAlignmentCheckpoints:
    def test_round_trip(self, tmp_path):
        layer = AlignmentLayer(8, 2, 5, Rng(2))
        path = tmp_path / "layer.bin"
        save_alignment(path, layer)
        loaded = load_alignment(path)
        assert loaded.task_id == 5
        assert loaded.n_blocks == 2
        assert loaded.parameter_hash() == layer.parameter_hash()

    def test_identity_round_trip(self, tmp_path):
        path = tmp_path / "identity.bin"
        save_alignment(path, AlignmentLayer.identity(8))
        loaded = load_alignment(path)
        assert loaded.is_identity


class TestVaeCheckpoints:
    def test_round_trip_scores_identical(self, tmp_path):
        vae = TaskVAE(6, latent_dim=3, hidden_dim=5, beta=4.5, rng=Rng(3))
        vae.fit_epochs, vae.fit_lr, vae.fit_batch = 33, 2e-4, 8
        path = tmp_path / "vae.bin"
        save_vae(path, vae)
        loaded = load_vae(path)
        assert loaded.beta == 4.5
        assert loaded.fit_epochs == 33
        f = Rng(4).normal((5, 6))
        np.testing.assert_array_equal(score_features(loaded, f), score_features(vae, f))


class TestBackboneCheckpoints:
    def test_round_trip_and_frozen(self, tmp_path, micro_backbone):
        path = tmp_path / "backbone.bin"
        save_backbone(path, micro_backbone)
        loaded = load_backbone(path)
        assert loaded.parameter_hash() == micro_backbone.parameter_hash()
        assert loaded.holdout_iou == pytest.approx(micro_backbone.holdout_iou)
        assert all(not p.requires_grad for p in loaded.encoder.parameters())
        assert all(not p.requires_grad for p in loaded.decoder.parameters())


def _toy_pool() -> RouterPool:
    pool = RouterPool(temperature=1.5, rule="p95")
    rng = Rng(5)
    for tid in (0, 1, 2):
        vae = TaskVAE(4, latent_dim=2, hidden_dim=4, beta=2.0, rng=rng.child("v", tid))
        layer = AlignmentLayer(4, 1, tid, rng.child("l", tid))
        pool.add(tid, layer, vae, tau=float(0.2 + tid))
    return pool


class TestPoolPersistence:
    def test_round_trip_routes_identically(self, tmp_path):
        pool = _toy_pool()
        save_pool(tmp_path / "pool", pool)
        loaded = load_pool(tmp_path / "pool")
        assert loaded.temperature == 1.5
        assert loaded.rule == "p95"
        assert loaded.task_ids() == [0, 1, 2]
        rng = Rng(6)
        for trial in range(10):
            z = rng.child(trial).normal((4, 3, 3), std=2.0)
            a = route(pool, z)
            b = route(loaded, z)
            assert a.chosen == b.chosen
            assert a.scores == b.scores
            assert a.threshold_used == b.threshold_used

    def test_missing_manifest_rejected(self, tmp_path):
        with pytest.raises(FormatError, match="pool.json"):
            load_pool(tmp_path)

    def test_wrong_manifest_kind_rejected(self, tmp_path):
        (tmp_path / "pool.json").write_text('{"kind": "something-else"}')
        with pytest.raises(FormatError, match="router pool"):
            load_pool(tmp_path)


class TestDatasetExport:
    def test_round_trip_bitwise(self, tmp_path):
        stream = generate_stream(2, 3, 2, master_seed=77)
        export_stream(tmp_path / "data", stream)
        loaded = import_stream(tmp_path / "data")
        assert len(loaded) == 2
        for orig, back in zip(stream, loaded):
            assert back.spec == orig.spec
            for split in ("train", "test"):
                for a, b in zip(getattr(orig, split).raw(), getattr(back, split).raw()):
                    np.testing.assert_array_equal(a.image, b.image)
                    np.testing.assert_array_equal(a.mask, b.mask)
                    assert a.box == b.box

    def test_missing_manifest_rejected(self, tmp_path):
        with pytest.raises(FormatError, match="stream.json"):
            import_stream(tmp_path)

    def test_corrupt_sample_magic_rejected(self, tmp_path):
        stream = generate_stream(1, 1, 1, master_seed=78)
        export_stream(tmp_path / "data", stream)
        victim = next((tmp_path / "data").glob("task0_train_*.bin"))
        blob = bytearray(victim.read_bytes())
        blob[0] ^= 0xFF
        victim.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="magic"):
            import_stream(tmp_path / "data")
