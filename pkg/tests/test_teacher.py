from __future__ import annotations

import struct

import numpy as np
import pytest

from paretodistill import env
from paretodistill.dataset import (
    MAGIC,
    N_LOGITS,
    PRESETS,
    Dataset,
    DatasetFormatError,
    generate_dataset,
    read_manifest,
    record_dtype,
)
from paretodistill.nn import functional as F
from paretodistill.profiler import breakdown
from paretodistill.teacher import TeacherNet, build_teacher, teacher_forward, teacher_plan
from paretodistill.trainer import compare_logits, masked_argmax

LSTM_PARAMS = 4 * (1024 * (1024 + 1024) + 1024)


def test_lstm_param_count_literal():
    assert LSTM_PARAMS == 8_392_704


def test_teacher_scale_one_params():
    net = TeacherNet(env.make_schema(1.0), seed=0)
    lstm = net.layers["lstm"]
    assert sum(p.size for p in lstm.params.values()) == LSTM_PARAMS
    assert 14.8e6 <= net.param_count() <= 18.1e6
    # the analytic plan counts exactly the materialised arrays
    assert teacher_plan(net.schema).total_params() == net.param_count()


def test_teacher_private_public_split():
    net = TeacherNet(env.make_schema(1.0), seed=0, dtype=np.float32)
    assert net.dims.private == 768 and net.dims.public == 256
    assert net.dims.private + net.dims.public == net.dims.lstm_hidden


def test_teacher_plan_shape():
    bd = breakdown(teacher_plan(env.make_schema(1.0)))
    shares = bd.shares()
    assert shares["Encoder"][0] > 70.0
    assert shares["LSTM"][1] > 45.0


def test_calibrated_confidence(desk_teacher, desk_schema):
    frames = env.generate_frames(desk_schema, 77, 1024)
    out = desk_teacher.forward_episodes(frames)
    masks = env.derive_masks(frames).heads()
    conf = F.masked_temperature_softmax(out["button"].astype(np.float64), masks[0]).max(-1).mean()
    assert 0.55 <= conf <= 0.95


def test_teacher_deterministic(desk_schema):
    frames = env.generate_frames(desk_schema, 3, 16)
    a = teacher_forward(build_teacher(desk_schema, 4), frames)
    b = teacher_forward(build_teacher(desk_schema, 4), frames)
    for key in a:
        assert np.array_equal(a[key], b[key])


def test_teacher_head_extents(desk_teacher, desk_schema):
    out = teacher_forward(desk_teacher, env.generate_frames(desk_schema, 0, 16))
    assert tuple(out[h].shape[-1] for h in env.HEAD_NAMES) == env.HEAD_SIZES
    assert out["value"].shape == (16, 3)


def test_teacher_episode_length(desk_teacher, desk_schema):
    with pytest.raises(ValueError):
        teacher_forward(desk_teacher, env.generate_frames(desk_schema, 0, 15))
    with pytest.raises(ValueError):
        desk_teacher.forward_episodes(env.generate_frames(desk_schema, 0, 24))


def test_zero_teacher_uniform(desk_schema):
    net = TeacherNet(desk_schema, 0).zero_()
    frames = env.generate_frames(desk_schema, 0, 16)
    out = teacher_forward(net, frames)
    masks = env.derive_masks(frames).heads()
    for name, m in zip(env.HEAD_NAMES, masks):
        assert np.all(out[name] == 0)
        p = F.masked_temperature_softmax(out[name], m)
        expected = m / m.sum(axis=-1, keepdims=True)
        np.testing.assert_allclose(p, expected, atol=1e-7)


def test_teacher_hero_permutation(desk_teacher, desk_schema):
    frames = env.generate_frames(desk_schema, 11, 16)
    perm = [2, 0, 1]
    a = teacher_forward(desk_teacher, frames)
    b = teacher_forward(desk_teacher, frames.permute_heroes(perm))
    for name in env.HEAD_NAMES:
        np.testing.assert_allclose(a[name][:, perm], b[name], rtol=1e-4, atol=1e-4)


def test_lstm_state_is_live(desk_teacher, desk_schema):
    frames = env.generate_frames(desk_schema, 5, 16)
    order = np.random.default_rng(0).permutation(16)
    shuffled = frames[order]
    a = teacher_forward(desk_teacher, frames)
    b = teacher_forward(desk_teacher, shuffled)
    # the first frame's output sees no history; later frames must differ under shuffling
    assert not np.allclose(a["button"][order], b["button"])


def test_masked_decode_is_legal(desk_teacher, desk_schema):
    frames = env.generate_frames(desk_schema, 8, 64)
    out = desk_teacher.forward_episodes(frames)
    for name, m in zip(env.HEAD_NAMES, env.derive_masks(frames).heads()):
        idx = masked_argmax(out[name], m)
        assert np.take_along_axis(m, idx[..., None], axis=-1).all()


def test_teacher_self_agreement(small_datasets):
    _, val = small_datasets
    batch = val.all()
    report = compare_logits(batch.logits, batch)
    assert report.overall_agreement == 1.0
    assert all(v == 1.0 for v in report.agreement.values())
    assert all(v == 0.0 for v in report.kl.values())


# -- dataset format ----------------------------------------------------------------

def test_presets():
    assert PRESETS["paper"] == (2_000_000, 20_000)
    assert PRESETS["desk"] == (51_200, 5_120)


def test_dataset_layout(small_data, desk_schema):
    path = small_data / "train.pdds"
    raw = path.read_bytes()
    assert raw[:4] == MAGIC
    version, count, n_ext = struct.unpack("<III", raw[4:16])
    assert version == 1 and count == 512 * 3 and n_ext == 13
    ext = list(struct.unpack("<13I", raw[16:68]))
    assert ext == desk_schema.extents()
    obs = desk_schema.per_hero_total
    rec = 2 + 4 * obs + (2 + 4 + 6 + 6 + 64) + 4 * N_LOGITS + 4
    assert record_dtype(obs).itemsize == rec
    assert len(raw) == 68 + count * rec


def test_dataset_contents_roundtrip(small_datasets, desk_schema, desk_teacher):
    train, _ = small_datasets
    frames = env.generate_frames(desk_schema, 56, 32, stream=0)
    out = desk_teacher.forward_episodes(frames)
    batch = train.batch(np.arange(32))
    for c in env.CATEGORIES:
        np.testing.assert_array_equal(getattr(batch.frames, c), getattr(frames, c).astype(np.float32))
    np.testing.assert_array_equal(batch.frames.position, frames.position)
    for h, name in enumerate(env.HEAD_NAMES):
        np.testing.assert_array_equal(batch.logits[h], out[name])
    masks = env.derive_masks(frames)
    for name in ("button", "move", "offset_x", "offset_z", "target"):
        np.testing.assert_array_equal(getattr(batch.masks, name), getattr(masks, name))
    assert np.array_equal(batch.value, out["value"])
    hero = np.asarray(train.records["hero"][:6])
    np.testing.assert_array_equal(hero, [0, 1, 2, 0, 1, 2])


def test_dataset_manifest(small_data):
    m = read_manifest(small_data / "manifest.txt")
    assert m["format"] == "PDDS" and m["format_version"] == "1"
    assert m["n_train"] == "512" and m["n_val"] == "256"
    assert len(m["digest_train"]) == 64


def test_dataset_regeneration_digest(tmp_path, desk_schema, desk_teacher, small_data):
    m = generate_dataset(desk_teacher, desk_schema, 56, 512, 256, tmp_path)
    ref = read_manifest(small_data / "manifest.txt")
    assert m["digest_train"] == ref["digest_train"]
    assert m["digest_val"] == ref["digest_val"]
    assert (tmp_path / "train.pdds").read_bytes() == (small_data / "train.pdds").read_bytes()


def test_dataset_count_errors(tmp_path, desk_schema, desk_teacher):
    with pytest.raises(ValueError):
        generate_dataset(desk_teacher, desk_schema, 1, 100, 16, tmp_path)
    with pytest.raises(ValueError):
        generate_dataset(desk_teacher, desk_schema, 1, 16, 0, tmp_path)


def test_dataset_truncated(tmp_path, small_data):
    data = (small_data / "val.pdds").read_bytes()
    bad = tmp_path / "val.pdds"
    bad.write_bytes(data[:-5])
    with pytest.raises(DatasetFormatError):
        Dataset(bad, scale=0.25)
    (tmp_path / "x.pdds").write_bytes(b"NOPE" + data[4:])
    with pytest.raises(DatasetFormatError):
        Dataset(tmp_path / "x.pdds", scale=0.25)
    with pytest.raises(FileNotFoundError):
        Dataset(tmp_path / "missing.pdds")
