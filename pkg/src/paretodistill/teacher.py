"""Frozen teacher policy: conv + unit extractors, attention encoder, LSTM, heads.

The teacher is a seeded random network whose output heads are rescaled once at
build time so its masked decisions are reasonably confident. It is only ever
run forward.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import env
from .env import CATEGORIES, EPISODE_LEN, HEAD_NAMES, HEAD_SIZES, N_HEROES, Frames
from .nn import functional as F
from .nn.layers import Conv2d, Dense, LSTMCell, MultiHeadAttention
from .plan import Plan

log = logging.getLogger(__name__)

UNIT_CATEGORIES = ("heroes", "soldiers", "turrets", "monsters")
VECTOR_CATEGORIES = ("current", "whole")
# token order fed to the encoder
TOKEN_ORDER = ("image", "current", "whole") + UNIT_CATEGORIES
N_TOKENS = 3 + sum(env.UNIT_COUNTS.values())
ENCODER_LAYERS = 3
ATTENTION_HEADS = 4
CALIBRATION_TARGET = 0.75
CALIBRATION_EPISODES = 21


def _round(x: float) -> int:
    return int(x + 0.5)


@dataclass(frozen=True)
class TeacherDims:
    conv_channels: int
    img_hidden: int
    model_dim: int
    lstm_hidden: int
    ext_hidden: dict

    @property
    def public(self) -> int:
        return self.lstm_hidden // 4

    @property
    def private(self) -> int:
        return self.lstm_hidden - self.public

    @property
    def ffn(self) -> int:
        return 4 * self.model_dim


def teacher_dims(schema: env.ObservationSchema) -> TeacherDims:
    s = schema.scale
    return TeacherDims(
        conv_channels=max(1, _round(18 * s)),
        img_hidden=max(1, _round(768 * s)),
        model_dim=max(ATTENTION_HEADS, ATTENTION_HEADS * _round(224 * s / ATTENTION_HEADS)),
        lstm_hidden=max(4, 4 * _round(1024 * s / 4)),
        ext_hidden={
            "heroes": max(1, _round(1024 * s)), "soldiers": max(1, _round(64 * s)),
            "turrets": max(1, _round(64 * s)), "monsters": max(1, _round(64 * s)),
            "current": max(1, _round(256 * s)), "whole": max(1, _round(256 * s)),
        },
    )


def _target_key_index() -> np.ndarray:
    """Encoder token index feeding each of the 39 target keys (-1 = learned none key)."""
    start = {}
    pos = 0
    for name in TOKEN_ORDER:
        start[name] = pos
        pos += env.UNIT_COUNTS.get(name, 1)
    idx = [-1]
    idx += [start["heroes"] + r for r in env.ENEMY_HERO_ROWS]
    idx += [start["heroes"] + r for r in env.FRIEND_HERO_ROWS]
    idx += [start["current"]]
    idx += [start["monsters"] + r for r in range(env.UNIT_COUNTS["monsters"])]
    idx += [start["soldiers"] + r for r in env.SOLDIER_TARGET_ROWS]
    idx += [start["turrets"] + env.TURRET_TARGET_ROW]
    assert len(idx) == env.N_TARGETS
    return np.array(idx)


TARGET_KEY_INDEX = _target_key_index()


def teacher_plan(schema: env.ObservationSchema) -> Plan:
    """Layer plan used for profiling (one time step, batch of one frame group)."""
    dm = teacher_dims(schema)
    d, H, h3 = dm.model_dim, dm.lstm_hidden, N_HEROES
    c, hh, ww = schema.image
    plan = Plan(inputs={f"obs.{cat}": h3 * schema.size(cat) for cat in CATEGORIES})
    plan.inputs["state.h"] = h3 * H
    plan.inputs["state.c"] = h3 * H
    ext, enc, lstm, oth = "extractor", "fusion", "gate", "heads"

    conv_px = hh * ww  # stride 1, padding 2, kernel 5 keeps the grid
    plan.add("cnn.conv", "conv2d", dict(cin=c, cout=dm.conv_channels, kernel=5, stride=1,
             padding=2, h=hh, w=ww), uses=h3, block="CNN", module=ext,
             inputs=["obs.image"], out_size=h3 * dm.conv_channels * conv_px)
    plan.add("cnn.relu", "relu", dict(n=dm.conv_channels * conv_px), uses=h3, block="CNN",
             module=ext, inputs=["cnn.conv"], out_size=h3 * dm.conv_channels * conv_px)
    plan.add("cnn.fc1", "dense", {"in": dm.conv_channels * conv_px, "out": dm.img_hidden},
             uses=h3, block="CNN", module=ext, inputs=["cnn.relu"], out_size=h3 * dm.img_hidden)
    plan.add("cnn.fc1_relu", "relu", dict(n=dm.img_hidden), uses=h3, block="CNN", module=ext,
             inputs=["cnn.fc1"], out_size=h3 * dm.img_hidden)
    plan.add("cnn.fc2", "dense", {"in": dm.img_hidden, "out": d}, uses=h3, block="CNN",
             module=ext, inputs=["cnn.fc1_relu"], out_size=h3 * d)
    token_parts = ["cnn.fc2"]
    for cat in VECTOR_CATEGORIES + UNIT_CATEGORIES:
        count = env.UNIT_COUNTS.get(cat, 1)
        hid = dm.ext_hidden[cat]
        u = h3 * count
        plan.add(f"ext.{cat}.fc1", "dense", {"in": schema.featdim(cat), "out": hid}, uses=u,
                 block="Others", module=ext, inputs=[f"obs.{cat}"], out_size=u * hid)
        plan.add(f"ext.{cat}.relu", "relu", dict(n=hid), uses=u, block="Others", module=ext,
                 inputs=[f"ext.{cat}.fc1"], out_size=u * hid)
        plan.add(f"ext.{cat}.fc2", "dense", {"in": hid, "out": d}, uses=u, block="Others",
                 module=ext, inputs=[f"ext.{cat}.relu"], out_size=u * d)
        token_parts.append(f"ext.{cat}.fc2")
    n = N_TOKENS
    plan.add("tokens", "concat", dict(n=n * d), uses=h3, block="Encoder", module=enc,
             inputs=token_parts, out_size=h3 * n * d)
    prev = "tokens"
    for i in range(ENCODER_LAYERS):
        plan.add(f"enc{i}.mha", "multi-head-attention",
                 dict(tokens=n, dim=d, heads=ATTENTION_HEADS), uses=h3, block="Encoder",
                 module=enc, inputs=[prev], out_size=h3 * n * d)
        plan.add(f"enc{i}.ffn1", "dense", {"in": d, "out": dm.ffn}, uses=h3 * n,
                 block="Encoder", module=enc, inputs=[prev, f"enc{i}.mha"],
                 out_size=h3 * n * dm.ffn)
        plan.add(f"enc{i}.ffn_relu", "relu", dict(n=dm.ffn), uses=h3 * n, block="Encoder",
                 module=enc, inputs=[f"enc{i}.ffn1"], out_size=h3 * n * dm.ffn)
        plan.add(f"enc{i}.ffn2", "dense", {"in": dm.ffn, "out": d}, uses=h3 * n,
                 block="Encoder", module=enc, inputs=[f"enc{i}.ffn_relu"],
                 out_size=h3 * n * d)
        prev = f"enc{i}.ffn2"
    # token average pooling, costed like a pooling layer (one op per element)
    plan.add("pool", "set-max-pool", dict(n=n * d), uses=h3, block="Others", module=enc,
             inputs=[prev], out_size=h3 * d)
    plan.add("embed", "dense", {"in": d, "out": H}, uses=h3, block="Others", module=enc,
             inputs=["pool"], out_size=h3 * H)
    plan.add("embed_relu", "relu", dict(n=H), uses=h3, block="Others", module=enc,
             inputs=["embed"], out_size=h3 * H)
    plan.add("gate", "set-max-pool", dict(n=h3 * dm.public), uses=1, block="Others",
             module=lstm, inputs=["embed_relu"], out_size=dm.public)
    plan.add("lstm", "lstm-cell", {"in": H, "hidden": H}, uses=h3, block="LSTM", module=lstm,
             inputs=["embed_relu", "gate", "state.h", "state.c"], out_size=2 * h3 * H)
    plan.add("post", "dense", {"in": H, "out": d}, uses=h3, block="Others", module=oth,
             inputs=["lstm"], out_size=h3 * d)
    plan.add("post_relu", "relu", dict(n=d), uses=h3, block="Others", module=oth,
             inputs=["post"], out_size=h3 * d)
    for name, size in zip(HEAD_NAMES[:4], HEAD_SIZES[:4]):
        plan.add(f"head.{name}", "dense", {"in": d, "out": size}, uses=h3, block="Others",
                 module=oth, inputs=["post_relu"], out_size=h3 * size)
    plan.add("head.value", "dense", {"in": d, "out": 1}, uses=h3, block="Others", module=oth,
             inputs=["post_relu"], out_size=h3)
    plan.add("head.query", "dense", {"in": d, "out": d}, uses=h3, block="Others", module=oth,
             inputs=["post_relu"], out_size=h3 * d)
    plan.add("head.target", "dot-product-score",
             dict(keys=env.N_TARGETS, dim=d, learned=1), uses=h3, block="Others", module=oth,
             inputs=["head.query", prev], out_size=h3 * env.N_TARGETS)
    return plan


class TeacherNet:
    """Forward-only teacher; per-hero weights are shared across the three heroes."""

    def __init__(self, schema: env.ObservationSchema, seed: int = 0, dtype=np.float32):
        self.schema = schema
        self.seed = seed
        self.dims = dm = teacher_dims(schema)
        d, H = dm.model_dim, dm.lstm_hidden
        rng = np.random.default_rng([seed, 1])
        c, hh, ww = schema.image
        L = {}
        L["cnn.conv"] = Conv2d(c, dm.conv_channels, 5, 1, 2, rng=rng, dtype=dtype)
        L["cnn.fc1"] = Dense(dm.conv_channels * hh * ww, dm.img_hidden, rng, dtype=dtype)
        L["cnn.fc2"] = Dense(dm.img_hidden, d, rng, dtype=dtype)
        for cat in VECTOR_CATEGORIES + UNIT_CATEGORIES:
            hid = dm.ext_hidden[cat]
            L[f"ext.{cat}.fc1"] = Dense(schema.featdim(cat), hid, rng, dtype=dtype)
            L[f"ext.{cat}.fc2"] = Dense(hid, d, rng, dtype=dtype)
        for i in range(ENCODER_LAYERS):
            L[f"enc{i}.mha"] = MultiHeadAttention(d, ATTENTION_HEADS, rng, dtype=dtype)
            L[f"enc{i}.ffn1"] = Dense(d, dm.ffn, rng, dtype=dtype)
            L[f"enc{i}.ffn2"] = Dense(dm.ffn, d, rng, dtype=dtype)
        L["embed"] = Dense(d, H, rng, dtype=dtype)
        L["lstm"] = LSTMCell(H, H, rng, dtype=dtype)
        L["post"] = Dense(H, d, rng, dtype=dtype)
        for name, size in zip(HEAD_NAMES[:4], HEAD_SIZES[:4]):
            L[f"head.{name}"] = Dense(d, size, rng, dtype=dtype)
        L["head.value"] = Dense(d, 1, rng, dtype=dtype)
        L["head.query"] = Dense(d, d, rng, dtype=dtype)
        for layer_name, layer in L.items():
            layer.name = layer_name
        self.layers = L
        bound = np.sqrt(6.0 / (1 + d))
        self.none_key = rng.uniform(-bound, bound, size=d).astype(dtype)
        self.head_gains = np.ones(len(HEAD_NAMES))

    # -- parameters ---------------------------------------------------------
    def param_count(self) -> int:
        total = self.none_key.size
        for layer in self.layers.values():
            total += sum(p.size for p in layer.params.values())
        return total

    def zero_(self) -> "TeacherNet":
        for layer in self.layers.values():
            for p in layer.params.values():
                p[...] = 0
        self.none_key[...] = 0
        return self

    def _scale_head(self, head: int, factor: float):
        name = "head.query" if HEAD_NAMES[head] == "target" else f"head.{HEAD_NAMES[head]}"
        layer = self.layers[name]
        for key in layer.params:
            layer.params[key] *= layer.params[key].dtype.type(factor)
        self.head_gains[head] *= factor

    # -- forward -------------------------------------------------------------
    def _tokens(self, frames: Frames) -> np.ndarray:
        """Encoder output tokens (n, 3, 55, d)."""
        L = self.layers
        n = len(frames)
        img = frames.image.reshape(n * N_HEROES, *self.schema.image)
        conv = L["cnn.conv"]  # forward-only: skip the layer's column cache
        x = F.conv2d_forward(img, conv.params["W"], conv.params["b"], conv.stride, conv.padding)
        x = np.maximum(x, 0).reshape(n, N_HEROES, -1)
        x = np.maximum(L["cnn.fc1"].forward(x), 0)
        parts = [L["cnn.fc2"].forward(x)[:, :, None, :]]
        for cat in VECTOR_CATEGORIES + UNIT_CATEGORIES:
            feats = getattr(frames, cat)
            if cat in VECTOR_CATEGORIES:
                feats = feats[:, :, None, :]
            h = np.maximum(L[f"ext.{cat}.fc1"].forward(feats), 0)
            parts.append(L[f"ext.{cat}.fc2"].forward(h))
        tok = np.concatenate(parts, axis=2)
        for i in range(ENCODER_LAYERS):
            tok = tok + L[f"enc{i}.mha"].forward(tok)
            tok = tok + L[f"enc{i}.ffn2"].forward(np.maximum(L[f"enc{i}.ffn1"].forward(tok), 0))
        for layer in L.values():
            layer._cache = None
        return tok

    def _heads(self, post: np.ndarray, tokens: np.ndarray) -> dict:
        L = self.layers
        out = {name: L[f"head.{name}"].forward(post) for name in HEAD_NAMES[:4]}
        query = L["head.query"].forward(post)
        keys = tokens[..., np.maximum(TARGET_KEY_INDEX, 0), :].copy()
        keys[..., 0, :] = self.none_key
        out["target"] = np.einsum("...a,...ja->...j", query, keys)
        out["value"] = L["head.value"].forward(post)[..., 0]
        return out

    def forward_episodes(self, frames: Frames, chunk: int = 256) -> dict:
        """Raw logits for consecutive 16-frame episodes.

        Returns a dict with one (n, 3, size) array per head plus ``value`` (n, 3).
        The LSTM state is zeroed at the first frame of every episode.
        """
        n = len(frames)
        if n % EPISODE_LEN:
            raise ValueError(f"episode length must be {EPISODE_LEN}; got {n} frames")
        L = self.layers
        dm = self.dims
        pre, toks = [], []
        for start in range(0, n, chunk):
            part = frames[start:start + chunk]
            tok = self._tokens(part)
            emb = np.maximum(L["embed"].forward(tok.mean(axis=2)), 0)
            pre.append(emb)
            toks.append(tok)
        emb = np.concatenate(pre)  # (n, 3, H)
        tokens = np.concatenate(toks)
        public = emb[..., dm.private:].max(axis=1, keepdims=True)
        lstm_in = np.concatenate(
            [emb[..., :dm.private], np.broadcast_to(public, emb[..., dm.private:].shape)],
            axis=-1,
        )
        n_ep = n // EPISODE_LEN
        lstm_in = lstm_in.reshape(n_ep, EPISODE_LEN, N_HEROES, -1)
        h = np.zeros((n_ep, N_HEROES, dm.lstm_hidden), dtype=emb.dtype)
        c = np.zeros_like(h)
        hs = np.empty_like(lstm_in)
        for t in range(EPISODE_LEN):
            h, c = L["lstm"].forward(lstm_in[:, t], h, c)
            hs[:, t] = h
        post = np.maximum(L["post"].forward(hs.reshape(n, N_HEROES, -1)), 0)
        out = self._heads(post, tokens)
        for name in HEAD_NAMES:
            F.check_finite(out[name], f"teacher {name} logits")
        return out

    def calibrate(self, frames: Frames, target: float = CALIBRATION_TARGET) -> np.ndarray:
        """Rescale each head so the mean masked max-probability at tau=1 is ``target``."""
        raw = self.forward_episodes(frames)
        masks = env.derive_masks(frames).heads()
        for i, name in enumerate(HEAD_NAMES):
            z = raw[name].astype(np.float64)

            def confidence(gain, z=z, m=masks[i]):
                return F.masked_temperature_softmax(gain * z, m).max(axis=-1).mean()

            lo, hi = -6.0, 6.0
            if confidence(np.exp(hi)) < target:
                gain = np.exp(hi)
            elif confidence(np.exp(lo)) > target:
                gain = np.exp(lo)
            else:
                for _ in range(50):
                    mid = 0.5 * (lo + hi)
                    if confidence(np.exp(mid)) < target:
                        lo = mid
                    else:
                        hi = mid
                gain = np.exp(0.5 * (lo + hi))
            self._scale_head(i, float(gain))
        log.debug("teacher head gains %s", self.head_gains)
        return self.head_gains


def build_teacher(schema: env.ObservationSchema, seed: int = 0, calibrate: bool = True) -> TeacherNet:
    net = TeacherNet(schema, seed)
    if calibrate:
        frames = env.generate_frames(schema, seed, CALIBRATION_EPISODES * EPISODE_LEN,
                                     stream=1_000_003)
        net.calibrate(frames)
    return net


def teacher_forward(net: TeacherNet, episode: Frames) -> dict:
    """Logits for exactly one 16-frame episode."""
    if len(episode) != EPISODE_LEN:
        raise ValueError(f"episode length must be {EPISODE_LEN}, got {len(episode)}")
    return net.forward_episodes(episode)
