"""Synthetic stand-in for the 3v3 MOBA observation and action spaces.

Observations follow the seven-category layout (image, heroes, current hero,
soldiers, turrets, monsters, whole info). Legality bits are written into
designated observation coordinates so every mask is a pure function of the
frame:

* coordinate 0 of every unit row (heroes, soldiers, turrets, monsters) and of
  the current-hero vector is a visibility / alive bit;
* coordinates 1..13 of the current-hero vector hold the 13 button
  availability flags;
* ``whole[0]`` encodes the position of the frame inside its 16-frame episode.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

N_HEROES = 3
EPISODE_LEN = 16

IMAGE_SHAPE = (6, 17, 17)
UNIT_COUNTS = {"heroes": 6, "soldiers": 20, "turrets": 6, "monsters": 20}
BASE_FEATDIMS = {
    "heroes": 251, "current": 44, "soldiers": 25, "turrets": 29,
    "monsters": 28, "whole": 68,
}
CATEGORIES = ("image", "heroes", "current", "soldiers", "turrets", "monsters", "whole")

# --- action space -----------------------------------------------------------
HEAD_NAMES = ("button", "move", "offset_x", "offset_z", "target")
HEAD_SIZES = (13, 25, 42, 42, 39)
BUTTON_NAMES = (
    "noop_a", "noop_b", "move", "normal_attack", "skill_1", "skill_2", "skill_3",
    "skill_4", "chosen_skill", "recall", "equipment_skill", "heal_skill", "friend_skill",
)
NOOP, MOVE, NORMAL_ATTACK = 0, 2, 3
TARGET_CATEGORIES = (
    ("none", 1), ("enemy_heroes", 3), ("friend_heroes", 3), ("self", 1),
    ("monster", 20), ("soldier", 10), ("turret", 1),
)
N_TARGETS = sum(n for _, n in TARGET_CATEGORIES)
assert N_TARGETS == 39

_rows = {
    # columns: none, enemy_heroes, friend_heroes, self, monster, soldier, turret
    "noop_a": (0, 0, 0, 0, 0, 0, 0),
    "noop_b": (0, 0, 0, 0, 0, 0, 0),
    "move": (0, 0, 0, 0, 0, 0, 0),
    "normal_attack": (0, 1, 0, 0, 1, 1, 1),
    "skill_1": (0, 1, 0, 1, 1, 1, 1),
    "skill_2": (0, 1, 0, 1, 1, 1, 1),
    "skill_3": (0, 1, 0, 1, 1, 1, 1),
    "skill_4": (0, 1, 0, 1, 1, 1, 1),
    "chosen_skill": (0, 1, 0, 1, 1, 1, 1),
    "recall": (0, 0, 0, 0, 0, 0, 0),
    "equipment_skill": (1, 0, 0, 0, 0, 0, 0),
    "heal_skill": (0, 0, 1, 1, 0, 0, 0),
    "friend_skill": (0, 0, 1, 1, 0, 0, 0),
}
LEGALITY_MATRIX = np.array([_rows[b] for b in BUTTON_NAMES], dtype=bool)  # 13 x 7

# button -> activated parameter heads (indices into HEAD_NAMES[1:])
ACTIVATION = {
    "noop_a": (), "noop_b": (), "move": ("move",), "normal_attack": ("target",),
    "skill_1": ("offset_x", "offset_z", "target"),
    "skill_2": ("offset_x", "offset_z", "target"),
    "skill_3": ("offset_x", "offset_z", "target"),
    "skill_4": ("offset_x", "offset_z", "target"),
    "chosen_skill": ("offset_x", "offset_z", "target"),
    "recall": (), "equipment_skill": ("offset_x", "offset_z", "target"),
    "heal_skill": ("target",), "friend_skill": ("target",),
}
# 13 x 5 boolean: which heads a button activates (button head always active)
ACTIVATION_MATRIX = np.array(
    [[True] + [h in ACTIVATION[b] for h in HEAD_NAMES[1:]] for b in BUTTON_NAMES]
)

# observation sources of the 39 targets, in category order
ENEMY_HERO_ROWS = (3, 4, 5)
FRIEND_HERO_ROWS = (0, 1, 2)
SOLDIER_TARGET_ROWS = tuple(range(10, 20))
TURRET_TARGET_ROW = 3

# generator thresholds on pre-binarisation values
_BUTTON_THRESHOLDS = np.array(
    [-9.0, -9.0, -1.5, -1.0, -0.3, 0.0, 0.3, 0.6, 0.2, 0.8, 0.5, 0.4, 0.7]
)
_VIS_THRESHOLDS = {"heroes": -0.5, "soldiers": 0.0, "turrets": -0.3, "monsters": 0.3,
                   "current": -1.5}
_LATENT_DIM = 12
_MIXTURE = 4
_AR_COEF = 0.9
_MIN_CURRENT_FEATDIM = 1 + len(BUTTON_NAMES)


def _scaled(dim: int, scale: float) -> int:
    return max(1, int(dim * scale + 0.5))


@dataclass(frozen=True)
class ObservationSchema:
    scale: float
    image: tuple[int, int, int]
    heroes: tuple[int, int]
    current: int
    soldiers: tuple[int, int]
    turrets: tuple[int, int]
    monsters: tuple[int, int]
    whole: int

    def shape(self, category: str) -> tuple[int, ...]:
        value = getattr(self, category)
        return (value,) if isinstance(value, int) else tuple(value)

    def size(self, category: str) -> int:
        return int(np.prod(self.shape(category)))

    def featdim(self, category: str) -> int:
        return self.shape(category)[-1]

    @property
    def per_hero_total(self) -> int:
        return sum(self.size(c) for c in CATEGORIES)

    @property
    def total(self) -> int:
        return N_HEROES * self.per_hero_total

    def extents(self) -> list[int]:
        """Flat list of per-category extents in CATEGORIES order."""
        out: list[int] = []
        for c in CATEGORIES:
            out.extend(self.shape(c))
        return out


def make_schema(scale: float = 1.0) -> ObservationSchema:
    """Observation extents at ``scale``; unit counts and the image grid are fixed.

    The current-hero feature dimension never drops below 14 so the button
    flags fit.
    """
    if not 0 < scale <= 1:
        raise ValueError(f"scale must be in (0, 1], got {scale}")
    fd = {k: _scaled(v, scale) for k, v in BASE_FEATDIMS.items()}
    fd["current"] = max(fd["current"], _MIN_CURRENT_FEATDIM)
    return ObservationSchema(
        scale=float(scale),
        image=IMAGE_SHAPE,
        heroes=(UNIT_COUNTS["heroes"], fd["heroes"]),
        current=fd["current"],
        soldiers=(UNIT_COUNTS["soldiers"], fd["soldiers"]),
        turrets=(UNIT_COUNTS["turrets"], fd["turrets"]),
        monsters=(UNIT_COUNTS["monsters"], fd["monsters"]),
        whole=fd["whole"],
    )


def schema_from_extents(ext, scale: float) -> ObservationSchema:
    """Inverse of ``ObservationSchema.extents``."""
    ext = [int(v) for v in ext]
    return ObservationSchema(
        scale=float(scale), image=tuple(ext[0:3]), heroes=tuple(ext[3:5]), current=ext[5],
        soldiers=tuple(ext[6:8]), turrets=tuple(ext[8:10]), monsters=tuple(ext[10:12]),
        whole=ext[12],
    )


@dataclass
class Frames:
    """A batch of frame groups; every array has leading axes (n, 3)."""

    image: np.ndarray
    heroes: np.ndarray
    current: np.ndarray
    soldiers: np.ndarray
    turrets: np.ndarray
    monsters: np.ndarray
    whole: np.ndarray
    position: np.ndarray  # (n,) episode position 0..15

    def __len__(self) -> int:
        return self.image.shape[0]

    def __getitem__(self, idx) -> "Frames":
        if isinstance(idx, (int, np.integer)):
            idx = slice(idx, idx + 1)
        return Frames(**{f.name: getattr(self, f.name)[idx] for f in fields(self)})

    def permute_heroes(self, order) -> "Frames":
        order = list(order)
        kw = {c: getattr(self, c)[:, order] for c in CATEGORIES}
        return Frames(position=self.position, **kw)

    def astype(self, dtype) -> "Frames":
        kw = {c: getattr(self, c).astype(dtype) for c in CATEGORIES}
        return Frames(position=self.position, **kw)

    @staticmethod
    def concat(parts: list["Frames"]) -> "Frames":
        return Frames(**{f.name: np.concatenate([getattr(p, f.name) for p in parts])
                         for f in fields(Frames)})

    def flat(self) -> np.ndarray:
        """Per-hero flattened observation vectors, shape (n, 3, per_hero_total)."""
        n = len(self)
        return np.concatenate(
            [getattr(self, c).reshape(n, N_HEROES, -1) for c in CATEGORIES], axis=-1
        )

    @staticmethod
    def from_flat(flat: np.ndarray, schema: ObservationSchema, position) -> "Frames":
        n = flat.shape[0]
        kw, start = {}, 0
        for c in CATEGORIES:
            size = schema.size(c)
            kw[c] = flat[:, :, start:start + size].reshape(n, N_HEROES, *schema.shape(c))
            start += size
        return Frames(position=np.asarray(position), **kw)

    @staticmethod
    def zeros(schema: ObservationSchema, n: int = 1, dtype=np.float32) -> "Frames":
        kw = {c: np.zeros((n, N_HEROES, *schema.shape(c)), dtype=dtype) for c in CATEGORIES}
        return Frames(position=np.zeros(n, dtype=np.int64), **kw)


@dataclass
class MaskSet:
    """Batched legality masks; leading axes (n, 3)."""

    button: np.ndarray  # (..., 13)
    move: np.ndarray  # (..., 25)
    offset_x: np.ndarray  # (..., 42)
    offset_z: np.ndarray  # (..., 42)
    target: np.ndarray  # (..., 13, 39)

    def heads(self) -> list[np.ndarray]:
        """One mask per output head; the target mask is the union over legal buttons.

        Frames where no legal button can target anything fall back to the
        ``none`` target so every head has non-empty support.
        """
        union = (self.target & self.button[..., :, None]).any(axis=-2)
        empty = ~union.any(axis=-1)
        union[..., 0] |= empty
        return [self.button, self.move, self.offset_x, self.offset_z, union]

    def target_row(self, buttons: np.ndarray) -> np.ndarray:
        """Target mask for the chosen button of every record."""
        return np.take_along_axis(self.target, buttons[..., None, None], axis=-2)[..., 0, :]


def _category_generators(schema: ObservationSchema, seed: int):
    rng = np.random.default_rng([seed, 7919])
    mats = {}
    for c in CATEGORIES:
        size = schema.size(c)
        mats[c] = (
            rng.normal(0.0, 1.0 / np.sqrt(_LATENT_DIM), size=(size, _LATENT_DIM)),
            rng.normal(0.0, 0.3, size=size),
        )
    means = rng.normal(0.0, 1.0, size=(_MIXTURE, _LATENT_DIM))
    return mats, means


def _generate_episode(schema, mats, means, rng: np.random.Generator, length: int):
    """Features for one episode: (length, 3, size) per category, pre-binarisation."""
    comp = rng.integers(_MIXTURE)
    mu = means[comp]
    noise_sd = np.sqrt(1 - _AR_COEF ** 2)
    team = np.empty((length, _LATENT_DIM))
    hero = np.empty((length, N_HEROES, _LATENT_DIM))
    team[0] = mu + rng.normal(size=_LATENT_DIM)
    hero[0] = rng.normal(size=(N_HEROES, _LATENT_DIM))
    for t in range(1, length):
        team[t] = _AR_COEF * team[t - 1] + (1 - _AR_COEF) * mu + noise_sd * rng.normal(size=_LATENT_DIM)
        hero[t] = _AR_COEF * hero[t - 1] + noise_sd * rng.normal(size=(N_HEROES, _LATENT_DIM))
    latent = (team[:, None, :] + 0.7 * hero) / np.sqrt(1.49)
    out = {}
    for c in CATEGORIES:
        a, b = mats[c]
        pre = latent @ a.T + b + 0.1 * rng.normal(size=(length, N_HEROES, a.shape[0]))
        out[c] = pre
    return out


def _finalise(schema: ObservationSchema, pre: dict, positions: np.ndarray) -> dict:
    length = positions.shape[0]
    out = {}
    for c in CATEGORIES:
        out[c] = np.tanh(pre[c]).reshape(length, N_HEROES, *schema.shape(c))
        pre[c] = pre[c].reshape(length, N_HEROES, *schema.shape(c))
    for c in UNIT_COUNTS:
        out[c][..., 0] = (pre[c][..., 0] > _VIS_THRESHOLDS[c]).astype(np.float64)
    out["current"][..., 0] = (pre["current"][..., 0] > _VIS_THRESHOLDS["current"]).astype(np.float64)
    flags = slice(1, 1 + len(BUTTON_NAMES))
    bits = pre["current"][..., flags] > _BUTTON_THRESHOLDS
    out["current"][..., flags] = bits.astype(np.float64)
    out["whole"][..., 0] = (2.0 * positions / (EPISODE_LEN - 1) - 1.0)[:, None]
    return out


def generate_frames(schema: ObservationSchema, seed: int, n: int, stream: int = 0,
                    first_episode: int = 0) -> Frames:
    """``n`` frame groups made of consecutive 16-frame episodes.

    Episode ``e`` is drawn from its own generator seeded by (seed, stream, e), so
    any contiguous range of episodes can be produced independently.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    mats, means = _category_generators(schema, seed)
    n_episodes = -(-n // EPISODE_LEN)
    out = Frames.zeros(schema, n_episodes * EPISODE_LEN)
    positions = np.arange(EPISODE_LEN)
    for i in range(n_episodes):
        rng = np.random.default_rng([seed, stream, first_episode + i])
        pre = _generate_episode(schema, mats, means, rng, EPISODE_LEN)
        feats = _finalise(schema, pre, positions)
        rows = slice(i * EPISODE_LEN, (i + 1) * EPISODE_LEN)
        for c in CATEGORIES:
            getattr(out, c)[rows] = feats[c]
        out.position[rows] = positions
    return out[:n]


def button_flags(frames: Frames) -> np.ndarray:
    """(n, 3, 13) availability bits read from the current-hero vector."""
    return frames.current[..., 1:1 + len(BUTTON_NAMES)] > 0.5


def target_visibility(frames: Frames) -> np.ndarray:
    """(n, 3, 39) visibility bits in target order; ``none`` is always visible."""
    n = len(frames)
    vis = np.zeros((n, N_HEROES, N_TARGETS), dtype=bool)
    hero_bits = frames.heroes[..., 0] > 0.5
    vis[..., 0] = True
    vis[..., 1:4] = hero_bits[..., list(ENEMY_HERO_ROWS)]
    vis[..., 4:7] = hero_bits[..., list(FRIEND_HERO_ROWS)]
    vis[..., 7] = frames.current[..., 0] > 0.5
    vis[..., 8:28] = frames.monsters[..., 0] > 0.5
    vis[..., 28:38] = frames.soldiers[..., list(SOLDIER_TARGET_ROWS), 0] > 0.5
    vis[..., 38] = frames.turrets[..., TURRET_TARGET_ROW, 0] > 0.5
    return vis


def expand_legality(matrix: np.ndarray = LEGALITY_MATRIX) -> np.ndarray:
    """13 x 39 expansion of the 13 x 7 button/category matrix."""
    widths = [n for _, n in TARGET_CATEGORIES]
    return np.repeat(matrix, widths, axis=-1)


def derive_masks(frames: Frames) -> MaskSet:
    vis = target_visibility(frames)
    target = expand_legality()[None, None] & vis[..., None, :]
    flags = button_flags(frames)
    needs_target = ACTIVATION_MATRIX[:, 4]
    button = flags & (~needs_target | target.any(axis=-1))
    button[..., NOOP] = True
    lead = button.shape[:-1]
    move = np.ones((*lead, HEAD_SIZES[1]), dtype=bool)
    offsets = np.ones((*lead, HEAD_SIZES[2]), dtype=bool)
    return MaskSet(button=button, move=move, offset_x=offsets, offset_z=offsets.copy(),
                   target=target)
