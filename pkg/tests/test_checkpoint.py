import pytest

from checkpoint import BankCheckpoint, BaseCheckpoint, CheckpointManager, atomic_write_bytes, atomic_write_text


def test_atomic_write_creates_parents_and_leaves_no_temp_files(tmp_path):
    path = tmp_path / "nested" / "dir" / "file.bin"
    atomic_write_bytes(path, b"\x00\x01")
    assert path.read_bytes() == b"\x00\x01"
    assert [p.name for p in path.parent.iterdir()] == ["file.bin"]


def test_atomic_write_replaces_existing(tmp_path):
    path = tmp_path / "report.json"
    atomic_write_text(path, "old")
    atomic_write_text(path, "new")
    assert path.read_text() == "new"


def test_save_and_load(tmp_path):
    manager = CheckpointManager(tmp_path)
    checkpoint = BankCheckpoint(fingerprint="abc")
    checkpoint.mark_started()
    checkpoint.completed[(0, 1)] = "model"
    manager.save("bank", checkpoint)

    loaded = manager.load("bank", BankCheckpoint)
    assert loaded.completed == {(0, 1): "model"}
    assert loaded.started_at == checkpoint.started_at
    assert loaded.last_saved_at is not None


def test_load_missing_returns_none(tmp_path):
    assert CheckpointManager(tmp_path).load("nothing") is None


def test_load_type_mismatch(tmp_path):
    manager = CheckpointManager(tmp_path)
    manager.save("bank", {"not": "a checkpoint"})
    with pytest.raises(TypeError, match="expected BankCheckpoint"):
        manager.load("bank", BankCheckpoint)


def test_delete(tmp_path):
    manager = CheckpointManager(tmp_path)
    manager.save("bank", BaseCheckpoint())
    assert manager.delete("bank") is True
    assert manager.load("bank") is None
    assert manager.delete("bank") is False


def test_pending_pairs_keep_order():
    checkpoint = BankCheckpoint(completed={(0, 1): None, (1, 0): None})
    assert checkpoint.get_pending([(0, 0), (0, 1), (1, 0), (1, 1)]) == [(0, 0), (1, 1)]
    assert checkpoint.summary() == "Trained: 2 networks"


def test_fingerprint_match():
    checkpoint = BankCheckpoint(fingerprint="abc")
    assert checkpoint.matches("abc")
    assert not checkpoint.matches("abd")


def test_mark_started_is_sticky():
    checkpoint = BaseCheckpoint()
    checkpoint.mark_started()
    first = checkpoint.started_at
    checkpoint.mark_started()
    assert checkpoint.started_at == first
