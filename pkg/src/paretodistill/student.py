"""Lightweight student family: design points, network, checkpoints.

Per hero the student runs a small conv stem, shared per-category unit token
embedders, a role transform over the hero tokens and an MLP trunk over the
concatenated features. The trunk output is split 3:1 into private and public
parts; the public parts of the three heroes are max-pooled (triplet max-fusion
gate) and appended back to every hero before the communication MLP and heads.
There is no recurrence and no attention in the trunk.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import env
from .env import HEAD_NAMES, HEAD_SIZES, N_HEROES, Frames
from .nn.layers import Conv2d, Dense, glorot_uniform
from .plan import Plan

UNIT_CATEGORIES = ("heroes", "soldiers", "turrets", "monsters")
CONV_KERNEL, CONV_STRIDE, CONV_PADDING = 3, 2, 1
LOWER = 32

# (min layers, max layers, per-layer upper bounds)
RANGES = {
    "token_dim": (224,),
    "attention_dim": (128,),
    "role_feat_trans": (1, 2, (256, 256)),
    "img_feat_trans": (1, 2, (1024, 512)),
    "concat_feat_trans": (1, 5, (4096, 2048, 1024, 1024, 512)),
    "communicate_feat_trans": (0, 3, (1024, 1024, 512)),
    "action_fc": (256,),
}
_SHORT = {
    "token_dim": "token", "attention_dim": "attn", "role_feat_trans": "role",
    "img_feat_trans": "img", "concat_feat_trans": "concat",
    "communicate_feat_trans": "comm", "action_fc": "afc",
}

# target slot -> (token category, row); None marks a learned key
_TARGET_SOURCES = (
    [None]
    + [("heroes", r) for r in env.ENEMY_HERO_ROWS]
    + [("heroes", r) for r in env.FRIEND_HERO_ROWS]
    + [None]
    + [("monsters", r) for r in range(env.UNIT_COUNTS["monsters"])]
    + [("soldiers", r) for r in env.SOLDIER_TARGET_ROWS]
    + [("turrets", env.TURRET_TARGET_ROW)]
)
LEARNED_SLOTS = (0, 7)  # none, self
UNIT_SLOTS = tuple(i for i, src in enumerate(_TARGET_SOURCES) if src is not None)


class DesignError(ValueError):
    pass


@dataclass(frozen=True)
class DesignPoint:
    token_dim: int
    attention_dim: int
    role_feat_trans: tuple[int, ...]
    img_feat_trans: tuple[int, ...]
    concat_feat_trans: tuple[int, ...]
    communicate_feat_trans: tuple[int, ...]
    action_fc: int

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            spec = RANGES[f.name]
            if isinstance(value, int):
                if not LOWER <= value <= spec[0]:
                    raise DesignError(f"{f.name}={value} outside [{LOWER}, {spec[0]}]")
                continue
            lo, hi, caps = spec
            if not lo <= len(value) <= hi:
                raise DesignError(f"{f.name} has {len(value)} layers, allowed {lo}..{hi}")
            for i, w in enumerate(value):
                if not LOWER <= w <= caps[i]:
                    raise DesignError(f"{f.name}[{i}]={w} outside [{LOWER}, {caps[i]}]")

    def canonical(self) -> str:
        parts = []
        for f in fields(self):
            value = getattr(self, f.name)
            text = str(value) if isinstance(value, int) else (",".join(map(str, value)) or "-")
            parts.append(f"{_SHORT[f.name]}={text}")
        return ";".join(parts)

    __str__ = canonical

    @classmethod
    def parse(cls, text: str) -> "DesignPoint":
        inverse = {v: k for k, v in _SHORT.items()}
        kw = {}
        for item in text.strip().split(";"):
            key, sep, value = item.partition("=")
            if not sep or key not in inverse:
                raise DesignError(f"bad design field {item!r}")
            name = inverse[key]
            if len(RANGES[name]) == 1:
                kw[name] = int(value)
            else:
                kw[name] = tuple(int(v) for v in value.split(",")) if value != "-" else ()
        missing = set(_SHORT) - set(kw)
        if missing:
            raise DesignError(f"design missing fields {sorted(missing)}")
        return cls(**kw)

    def widths(self, scale: float = 1.0) -> dict:
        """Concrete layer widths at ``scale`` (every width scaled, floor 2)."""
        def w(x):
            return max(2, int(x * scale + 0.5))

        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            out[f.name] = w(value) if isinstance(value, int) else tuple(w(v) for v in value)
        return out


def minimal_design() -> DesignPoint:
    return DesignPoint(LOWER, LOWER, (LOWER,), (LOWER,), (LOWER,), (), LOWER)


def conv_channels(scale: float) -> int:
    return max(2, int(16 * scale + 0.5))


def _conv_grid(schema) -> tuple[int, int]:
    _, h, w = schema.image
    return ((h + 2 * CONV_PADDING - CONV_KERNEL) // CONV_STRIDE + 1,
            (w + 2 * CONV_PADDING - CONV_KERNEL) // CONV_STRIDE + 1)


def concat_input_dim(widths: dict, schema) -> int:
    t = widths["token_dim"]
    units = sum(env.UNIT_COUNTS[c] for c in UNIT_CATEGORIES if c != "heroes")
    return (widths["img_feat_trans"][-1] + env.UNIT_COUNTS["heroes"] * widths["role_feat_trans"][-1]
            + units * t + schema.current + schema.whole)


def split_public(width: int) -> int:
    return max(1, int(width / 4 + 0.5))


def student_plan(design: DesignPoint, schema: env.ObservationSchema) -> Plan:
    """Analytic layer plan of the student for one frame group."""
    W = design.widths(schema.scale)
    h3 = N_HEROES
    c_in, hh, ww = schema.image
    ch = conv_channels(schema.scale)
    gh, gw = _conv_grid(schema)
    t, a = W["token_dim"], W["attention_dim"]
    plan = Plan(inputs={f"obs.{cat}": h3 * schema.size(cat) for cat in env.CATEGORIES})
    ext, fus, gate, heads = "extractor", "fusion", "gate", "heads"

    def mlp(prefix, block, module, src, n_in, widths, uses):
        for i, n_out in enumerate(widths):
            plan.add(f"{prefix}.{i}", "dense", {"in": n_in, "out": n_out}, uses=uses,
                     block=block, module=module, inputs=[src], out_size=uses * n_out)
            plan.add(f"{prefix}.{i}.relu", "relu", dict(n=n_out), uses=uses, block=block,
                     module=module, inputs=[f"{prefix}.{i}"], out_size=uses * n_out)
            src, n_in = f"{prefix}.{i}.relu", n_out
        return src, n_in

    plan.add("cnn.conv", "conv2d", dict(cin=c_in, cout=ch, kernel=CONV_KERNEL,
             stride=CONV_STRIDE, padding=CONV_PADDING, h=hh, w=ww), uses=h3, block="cnn",
             module=ext, inputs=["obs.image"], out_size=h3 * ch * gh * gw)
    plan.add("cnn.relu", "relu", dict(n=ch * gh * gw), uses=h3, block="cnn", module=ext,
             inputs=["cnn.conv"], out_size=h3 * ch * gh * gw)
    img, _ = mlp("img", "img_feat_trans", ext, "cnn.relu", ch * gh * gw, W["img_feat_trans"], h3)
    tokens = {}
    for cat in UNIT_CATEGORIES:
        u = h3 * env.UNIT_COUNTS[cat]
        plan.add(f"embed.{cat}", "dense", {"in": schema.featdim(cat), "out": t}, uses=u,
                 block="token_embed", module=ext, inputs=[f"obs.{cat}"], out_size=u * t)
        plan.add(f"embed.{cat}.relu", "relu", dict(n=t), uses=u, block="token_embed",
                 module=ext, inputs=[f"embed.{cat}"], out_size=u * t)
        tokens[cat] = f"embed.{cat}.relu"
    role, _ = mlp("role", "role_feat_trans", ext, tokens["heroes"], t, W["role_feat_trans"],
                  h3 * env.UNIT_COUNTS["heroes"])
    d_cat = concat_input_dim(W, schema)
    plan.add("concat", "concat", dict(n=d_cat), uses=h3, block="concat_feat_trans", module=fus,
             inputs=[img, role, tokens["soldiers"], tokens["turrets"], tokens["monsters"],
                     "obs.current", "obs.whole"], out_size=h3 * d_cat)
    trunk, width = mlp("trunk", "concat_feat_trans", fus, "concat", d_cat,
                       W["concat_feat_trans"], h3)
    public = split_public(width)
    plan.add("gate", "set-max-pool", dict(n=h3 * public), uses=1, block="gate", module=gate,
             inputs=[trunk], out_size=public)
    plan.add("gate.concat", "concat", dict(n=width), uses=h3, block="gate", module=gate,
             inputs=[trunk, "gate"], out_size=h3 * width)
    emb, c = mlp("comm", "communicate_feat_trans", fus, "gate.concat", width,
                 W["communicate_feat_trans"], h3)
    afc = W["action_fc"]
    for name, size in zip(HEAD_NAMES[:4], HEAD_SIZES[:4]):
        plan.add(f"head.{name}.fc", "dense", {"in": c, "out": afc}, uses=h3,
                 block="action_heads", module=heads, inputs=[emb], out_size=h3 * afc)
        plan.add(f"head.{name}.relu", "relu", dict(n=afc), uses=h3, block="action_heads",
                 module=heads, inputs=[f"head.{name}.fc"], out_size=h3 * afc)
        plan.add(f"head.{name}.out", "dense", {"in": afc, "out": size}, uses=h3,
                 block="action_heads", module=heads, inputs=[f"head.{name}.relu"],
                 out_size=h3 * size)
    plan.add("head.target.query", "dense", {"in": c, "out": a}, uses=h3, block="action_heads",
             module=heads, inputs=[emb], out_size=h3 * a)
    n_units = len(UNIT_SLOTS)
    plan.add("head.target.key", "dense", {"in": t, "out": a}, uses=h3 * n_units,
             block="action_heads", module=heads,
             inputs=[tokens["heroes"], tokens["soldiers"], tokens["turrets"], tokens["monsters"]],
             out_size=h3 * n_units * a)
    plan.add("head.target.score", "dot-product-score",
             dict(keys=env.N_TARGETS, dim=a, learned=len(LEARNED_SLOTS)), uses=h3,
             block="action_heads", module=heads, inputs=["head.target.query", "head.target.key"],
             out_size=h3 * env.N_TARGETS)
    return plan


def _relu(x):
    return np.maximum(x, 0, dtype=x.dtype)


class StudentNet:
    """Trainable student. ``forward`` caches activations for one ``backward``."""

    def __init__(self, design: DesignPoint, schema: env.ObservationSchema, seed: int = 0,
                 dtype=np.float32):
        self.design = design
        self.schema = schema
        self.seed = seed
        W = self.widths = design.widths(schema.scale)
        rng = np.random.default_rng([seed, 2])
        t, a = W["token_dim"], W["attention_dim"]
        gh, gw = _conv_grid(schema)
        ch = conv_channels(schema.scale)
        layers: dict = {}
        layers["cnn.conv"] = Conv2d(schema.image[0], ch, CONV_KERNEL, CONV_STRIDE, CONV_PADDING,
                                    rng=rng, dtype=dtype, need_input_grad=False)

        def mlp(prefix, n_in, widths):
            names = []
            for i, n_out in enumerate(widths):
                layers[f"{prefix}.{i}"] = Dense(n_in, n_out, rng, dtype=dtype)
                names.append(f"{prefix}.{i}")
                n_in = n_out
            return names, n_in

        self.img_layers, _ = mlp("img", ch * gh * gw, W["img_feat_trans"])
        for cat in UNIT_CATEGORIES:
            layers[f"embed.{cat}"] = Dense(schema.featdim(cat), t, rng, dtype=dtype)
        self.role_layers, _ = mlp("role", t, W["role_feat_trans"])
        self.trunk_layers, width = mlp("trunk", concat_input_dim(W, schema),
                                       W["concat_feat_trans"])
        self.public = split_public(width)
        self.private = width - self.public
        self.comm_layers, c = mlp("comm", width, W["communicate_feat_trans"])
        for name, size in zip(HEAD_NAMES[:4], HEAD_SIZES[:4]):
            layers[f"head.{name}.fc"] = Dense(c, W["action_fc"], rng, dtype=dtype)
            layers[f"head.{name}.out"] = Dense(W["action_fc"], size, rng, dtype=dtype)
        layers["head.target.query"] = Dense(c, a, rng, dtype=dtype)
        layers["head.target.key"] = Dense(t, a, rng, dtype=dtype)
        for name, layer in layers.items():
            layer.name = name
        self.layers = layers
        self.learned_keys = glorot_uniform(rng, 1, a, (len(LEARNED_SLOTS), a)).astype(dtype)
        self.learned_keys_grad = np.zeros_like(self.learned_keys)
        self._cache: dict = {}

    # -- parameters ---------------------------------------------------------
    def named_params(self) -> list[tuple[str, np.ndarray]]:
        """Parameters in canonical block order (the checkpoint order)."""
        out = []
        for name, layer in self.layers.items():
            for key in sorted(layer.params):
                out.append((f"{name}.{key}", layer.params[key]))
        out.append(("head.target.learned_keys", self.learned_keys))
        return out

    def params(self) -> list[np.ndarray]:
        return [p for _, p in self.named_params()]

    def grads(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers.values():
            for key in sorted(layer.params):
                out.append(layer.grads[key])
        out.append(self.learned_keys_grad)
        return out

    def param_count(self) -> int:
        return sum(p.size for p in self.params())

    def zero_grad(self):
        for layer in self.layers.values():
            for g in layer.grads.values():
                g[...] = 0
        self.learned_keys_grad[...] = 0

    @property
    def dtype(self):
        return self.learned_keys.dtype

    # -- forward / backward --------------------------------------------------
    def forward(self, frames: Frames) -> list[np.ndarray]:
        """Raw logits per head, each (b, 3, size)."""
        L = self.layers
        dt = self.dtype
        b = len(frames)
        n = b * N_HEROES
        cache = self._cache = {"b": b}
        x = L["cnn.conv"].forward(frames.image.reshape(n, *self.schema.image).astype(dt, copy=False))
        x = _relu(x)
        cache["cnn"] = x
        x = x.reshape(n, -1)
        for name in self.img_layers:
            x = _relu(L[name].forward(x))
            cache[name] = x
        tokens = {}
        for cat in UNIT_CATEGORIES:
            feats = getattr(frames, cat).reshape(n, env.UNIT_COUNTS[cat], -1).astype(dt, copy=False)
            tokens[cat] = _relu(L[f"embed.{cat}"].forward(feats))
        cache["tokens"] = tokens
        r = tokens["heroes"]
        for name in self.role_layers:
            r = _relu(L[name].forward(r))
            cache[name] = r
        parts = [x, r.reshape(n, -1)]
        parts += [tokens[c].reshape(n, -1) for c in UNIT_CATEGORIES[1:]]
        parts += [frames.current.reshape(n, -1).astype(dt, copy=False),
                  frames.whole.reshape(n, -1).astype(dt, copy=False)]
        cache["concat_sizes"] = [p.shape[-1] for p in parts]
        h = np.concatenate(parts, axis=-1)
        for name in self.trunk_layers:
            h = _relu(L[name].forward(h))
            cache[name] = h
        h = h.reshape(b, N_HEROES, -1)
        pub = h[..., self.private:]
        cache["public"] = pub
        pooled = pub.max(axis=1, keepdims=True)
        h = np.concatenate([h[..., :self.private], np.broadcast_to(pooled, pub.shape)], axis=-1)
        h = h.reshape(n, -1)
        for name in self.comm_layers:
            h = _relu(L[name].forward(h))
            cache[name] = h
        outputs = []
        for head in HEAD_NAMES[:4]:
            hid = _relu(L[f"head.{head}.fc"].forward(h))
            cache[f"head.{head}.fc"] = hid
            outputs.append(L[f"head.{head}.out"].forward(hid).reshape(b, N_HEROES, -1))
        query = L["head.target.query"].forward(h)
        units = np.concatenate(
            [tokens[src[0]][:, src[1]][:, None] for src in _TARGET_SOURCES if src is not None],
            axis=1,
        )
        unit_keys = L["head.target.key"].forward(units)
        keys = np.empty((n, env.N_TARGETS, unit_keys.shape[-1]), dtype=dt)
        keys[:, list(UNIT_SLOTS)] = unit_keys
        keys[:, list(LEARNED_SLOTS)] = self.learned_keys
        cache["query"], cache["keys"] = query, keys
        outputs.append(np.einsum("na,nja->nj", query, keys).reshape(b, N_HEROES, -1))
        return outputs

    def backward(self, dlogits: list[np.ndarray]) -> None:
        """Accumulate parameter gradients for the last ``forward``."""
        L = self.layers
        cache = self._cache
        b = cache["b"]
        n = b * N_HEROES

        dh = None
        for head, dl in zip(HEAD_NAMES[:4], dlogits[:4]):
            dhid = L[f"head.{head}.out"].backward(dl.reshape(n, -1))
            dhid *= cache[f"head.{head}.fc"] > 0
            g = L[f"head.{head}.fc"].backward(dhid)
            dh = g if dh is None else dh + g
        dt_ = dlogits[4].reshape(n, -1)
        query, keys = cache["query"], cache["keys"]
        dquery = np.einsum("nj,nja->na", dt_, keys)
        dkeys = dt_[:, :, None] * query[:, None, :]
        self.learned_keys_grad += dkeys[:, list(LEARNED_SLOTS)].sum(axis=0)
        dunits = L["head.target.key"].backward(dkeys[:, list(UNIT_SLOTS)])
        dh += L["head.target.query"].backward(dquery)

        tokens = cache["tokens"]
        dtokens = {cat: np.zeros_like(tokens[cat]) for cat in UNIT_CATEGORIES}
        unit_sources = [src for src in _TARGET_SOURCES if src is not None]
        for j, (cat, row) in enumerate(unit_sources):
            dtokens[cat][:, row] += dunits[:, j]

        for name in reversed(self.comm_layers):
            dh = L[name].backward(dh * (cache[name] > 0))
        dh = dh.reshape(b, N_HEROES, -1)
        dpub = dh[..., self.private:].sum(axis=1)  # pooled copy feeds all three heroes
        pub = cache["public"]
        first = np.argmax(pub, axis=1)  # ties route to the first hero
        dtrunk = np.zeros_like(dh)
        dtrunk[..., :self.private] = dh[..., :self.private]
        np.put_along_axis(dtrunk[..., self.private:], first[:, None], dpub[:, None], axis=1)
        dh = dtrunk.reshape(n, -1)
        for name in reversed(self.trunk_layers):
            dh = L[name].backward(dh * (cache[name] > 0))
        cuts = np.cumsum(cache["concat_sizes"])[:-1]
        dparts = np.split(dh, cuts, axis=-1)
        dimg, drole = dparts[0], dparts[1]
        for k, cat in enumerate(UNIT_CATEGORIES[1:]):
            dtokens[cat] += dparts[2 + k].reshape(dtokens[cat].shape)

        dr = drole.reshape(n, env.UNIT_COUNTS["heroes"], -1)
        for name in reversed(self.role_layers):
            dr = L[name].backward(dr * (cache[name] > 0))
        dtokens["heroes"] += dr
        for cat in UNIT_CATEGORIES:
            L[f"embed.{cat}"].backward(dtokens[cat] * (tokens[cat] > 0))

        dx = dimg
        for name in reversed(self.img_layers):
            dx = L[name].backward(dx * (cache[name] > 0))
        conv_out = cache["cnn"]
        L["cnn.conv"].backward(dx.reshape(conv_out.shape) * (conv_out > 0))

    def astype(self, dtype) -> "StudentNet":
        for layer in self.layers.values():
            layer.astype(dtype)
        self.learned_keys = self.learned_keys.astype(dtype)
        self.learned_keys_grad = np.zeros_like(self.learned_keys)
        return self

    def release(self):
        """Drop cached activations (memory held between steps)."""
        self._cache = {}
        for layer in self.layers.values():
            layer._cache = None


def build_student(design: DesignPoint, schema: env.ObservationSchema, seed: int = 0,
                  dtype=np.float32) -> StudentNet:
    net = StudentNet(design, schema, seed, dtype)
    out = net.forward(Frames.zeros(schema, 1, dtype))
    if [o.shape[-1] for o in out] != list(HEAD_SIZES) or not all(np.isfinite(o).all() for o in out):
        raise RuntimeError("student smoke test failed")
    net.release()
    return net


# -- checkpoints ----------------------------------------------------------------

CKPT_MAGIC = b"FADL"
CKPT_VERSION = 1
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


class CheckpointError(ValueError):
    pass


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return h


def _descriptor(design: DesignPoint, schema: env.ObservationSchema, seed: int, count: int) -> bytes:
    lines = [
        f"design={design.canonical()}",
        f"scale={schema.scale!r}",
        f"extents={','.join(map(str, schema.extents()))}",
        f"seed={seed}",
        f"param_count={count}",
    ]
    return ("\n".join(lines) + "\n").encode("utf-8")


def checkpoint_size(design: DesignPoint, schema: env.ObservationSchema, seed: int = 0,
                    param_count: int | None = None) -> int:
    """Exact byte size of the checkpoint file for a student."""
    if param_count is None:
        param_count = student_plan(design, schema).total_params()
    desc = _descriptor(design, schema, seed, param_count)
    return 12 + len(desc) + 4 * param_count + 8


def checkpoint_bytes(net: StudentNet) -> bytes:
    desc = _descriptor(net.design, net.schema, net.seed, net.param_count())
    params = b"".join(np.ascontiguousarray(p, dtype="<f4").tobytes() for p in net.params())
    payload = desc + params
    header = CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(desc))
    return header + payload + struct.pack("<Q", fnv1a64(payload))


def save_checkpoint(net: StudentNet, path) -> int:
    data = checkpoint_bytes(net)
    Path(path).write_bytes(data)
    return len(data)


def load_checkpoint(path) -> StudentNet:
    data = Path(path).read_bytes()
    if len(data) < 20 or data[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, dlen = struct.unpack("<II", data[4:12])
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    if len(data) < 12 + dlen + 8:
        raise CheckpointError(f"{path}: truncated checkpoint")
    payload = data[12:-8]
    (digest,) = struct.unpack("<Q", data[-8:])
    if fnv1a64(payload) != digest:
        raise CheckpointError(f"{path}: digest mismatch")
    try:
        desc = dict(line.split("=", 1) for line in payload[:dlen].decode("utf-8").splitlines())
        design = DesignPoint.parse(desc["design"])
        schema = env.schema_from_extents([int(v) for v in desc["extents"].split(",")],
                                     float(desc["scale"]))
        seed, count = int(desc["seed"]), int(desc["param_count"])
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: bad descriptor ({exc})") from None
    net = StudentNet(design, schema, seed)
    if net.param_count() != count or len(payload) - dlen != 4 * count:
        raise CheckpointError(f"{path}: parameter count mismatch")
    flat = np.frombuffer(payload, dtype="<f4", offset=dlen)
    start = 0
    for p in net.params():
        p[...] = flat[start:start + p.size].reshape(p.shape)
        start += p.size
    return net
