"""
Reproducible network instances.

Two layouts are supported: a two-tier macro/femto HetNet (MUEs in a large disk
around the macro BS, FUEs in small disks around their FBS) and a hexagonal
C-RAN grid whose users sit at a fixed distance from their RRH.  Gains combine
log-distance path loss, wall penetration and optional unit-mean exponential
(Rayleigh power) fading.  All randomness comes from one seed split into named
substreams.
"""
import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np


MIN_DISTANCE = 1.0
STREAMS = {"placement": 0, "fading": 1, "roles": 2, "partition": 3}


def substream(seed, name):
    """Independent generator for a named purpose derived from `seed`."""
    return np.random.default_rng([int(seed), STREAMS[name]])


@dataclass(frozen=True)
class PathLossModel:
    """
    Log-distance path loss ``L = a log10(d) + b + c log10(fc/5) + wall_loss * walls`` in dB.

    The C-RAN model is the same law with ``a=36.8``, ``b=43.8`` and no walls.
    """
    a: float = 36.0
    b: float = 40.0
    c: float = 20.0
    fc: float = 2.5
    wall_loss: float = 12.0

    def loss_db(self, d, walls=0):
        d = np.asarray(d, dtype=float)
        if np.any(d <= 0):
            raise ValueError("distance must be positive")
        return self.a * np.log10(d) + self.b + self.c * math.log10(self.fc / 5.0) + self.wall_loss * np.asarray(walls)


def cran_model(fc=2.5):
    return PathLossModel(a=36.8, b=43.8, c=20.0, fc=fc, wall_loss=0.0)


def path_loss_gain(model, d, walls=0):
    """Linear power gain ``10^(-L/10)`` for distance `d` (m) and wall count `walls`."""
    return 10.0 ** (-model.loss_db(d, walls) / 10.0)


@dataclass
class ScenarioConfig:
    """
    Declarative description of a network instance.

    ``layout`` is ``"hetnet"`` or ``"hexgrid"``; fields irrelevant to the chosen
    layout are ignored.  Powers and noise are in W, frequency in GHz, wall loss
    in dB, distances in m.
    """
    layout: str = "hetnet"
    seed: int = 0
    # hetnet
    n_mue: int = 10
    n_femto: int = 4
    fue_per_femto: tuple = (1, 3)
    r_macro: float = 1000.0
    r_femto: float = 50.0
    femto_ring: tuple = (150.0, 700.0)
    macro_ab: tuple = (36.0, 40.0)
    femto_ab: tuple = (35.0, 35.0)
    pl_c: float = 20.0
    fc: float = 2.5
    wall_loss: float = 12.0
    noise: float = 1e-13
    p_max_mue: float = 0.01
    p_max_fue: float = 0.01
    processing_gain: float = 1.0
    n_subchannels: int = 1
    fading: bool = False
    # hexgrid
    n_cells: int = 7
    isd: float = 400.0
    user_distance: float = 100.0
    prbs_per_cell: int = 30
    tx_power: float = 0.1

    def __post_init__(self):
        self.fue_per_femto = tuple(self.fue_per_femto) if np.ndim(self.fue_per_femto) else (self.fue_per_femto,) * 2
        self.femto_ring = tuple(self.femto_ring)
        self.macro_ab = tuple(self.macro_ab)
        self.femto_ab = tuple(self.femto_ab)
        if self.layout not in ("hetnet", "hexgrid"):
            raise ValueError(f"unknown layout {self.layout!r}")
        if self.layout == "hetnet":
            if not self.r_macro > self.r_femto > 0:
                raise ValueError("radii must satisfy r_macro > r_femto > 0")
            lo, hi = self.fue_per_femto
            if self.n_mue < 0 or self.n_femto < 0 or lo < 1 or hi < lo or self.n_mue + self.n_femto == 0:
                raise ValueError("invalid user/femtocell counts")
            if self.n_subchannels < 1:
                raise ValueError("n_subchannels must be >= 1")
        else:
            if self.n_cells < 1 or self.prbs_per_cell < 1 or self.user_distance <= 0 or self.isd <= 0:
                raise ValueError("invalid hexgrid parameters")
        if self.noise <= 0:
            raise ValueError("noise must be positive")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown scenario keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Scenario:
    """
    Immutable network instance.

    Attributes
    ----------
    bs_positions : ndarray
        ``(n_bs, 2)`` coordinates.
    user_positions : ndarray
        ``(n_users, 2)`` coordinates.
    gains : ndarray
        ``(n_bs, n_users)`` or ``(n_bs, n_users, n_sub)`` linear gains.
        For the hexgrid layout the shape is ``(cells, cells, prbs)`` and entry
        ``[k, j, s]`` is the gain from the user of cell ``j`` on PRB ``s`` to RRH ``k``.
    noise : ndarray
        Noise power per BS.
    max_powers : ndarray
        Power budget per user (HetNet) or per cell transmitter (hexgrid).
    tiers : list of str
        ``"macro"``, ``"femto"`` or ``"rrh"`` per BS.
    home : ndarray of int
        Home BS per user (closed-access association).
    processing_gain : float
    rng_seed : int
    pathloss : list of PathLossModel
        Path-loss model per BS.
    femto_radius : float
    """
    bs_positions: np.ndarray
    user_positions: np.ndarray
    gains: np.ndarray
    noise: np.ndarray
    max_powers: np.ndarray
    tiers: list
    home: np.ndarray
    processing_gain: float = 1.0
    rng_seed: int = 0
    pathloss: list = field(default_factory=list)
    femto_radius: float = 0.0

    def __post_init__(self):
        for name in ("bs_positions", "user_positions", "gains", "noise", "max_powers"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        self.home = np.asarray(self.home, dtype=int)
        if not np.all(self.gains > 0):
            raise ValueError("gains must be positive")
        if not np.all(self.noise > 0) or not np.all(self.max_powers > 0):
            raise ValueError("noise and power budgets must be positive")
        if not (np.all(np.isfinite(self.bs_positions)) and np.all(np.isfinite(self.user_positions))):
            raise ValueError("positions must be finite")
        for name in ("bs_positions", "user_positions", "gains", "noise", "max_powers", "home"):
            getattr(self, name).setflags(write=False)

    @property
    def n_bs(self):
        return self.bs_positions.shape[0]

    @property
    def n_users(self):
        return self.user_positions.shape[0]

    def users_of(self, bs):
        return np.nonzero(self.home == bs)[0]

    @property
    def femto_ids(self):
        return [k for k, t in enumerate(self.tiers) if t == "femto"]

    @property
    def mues(self):
        macro = [k for k, t in enumerate(self.tiers) if t == "macro"]
        return np.nonzero(np.isin(self.home, macro))[0]

    @property
    def fues(self):
        return np.nonzero(np.isin(self.home, self.femto_ids))[0]

    def with_gains(self, gains):
        d = self.__dict__.copy()
        d["gains"] = np.array(gains, dtype=float)
        return Scenario(**d)

    def replace(self, **kw):
        d = self.__dict__.copy()
        d.update(kw)
        for k, v in d.items():
            if isinstance(v, np.ndarray):
                d[k] = np.array(v)
        return Scenario(**d)

    def to_dict(self):
        return {
            "bs_positions": self.bs_positions.tolist(),
            "user_positions": self.user_positions.tolist(),
            "gains": self.gains.tolist(),
            "noise": self.noise.tolist(),
            "max_powers": self.max_powers.tolist(),
            "tiers": list(self.tiers),
            "home": self.home.tolist(),
            "processing_gain": self.processing_gain,
            "rng_seed": self.rng_seed,
            "pathloss": [asdict(m) for m in self.pathloss],
            "femto_radius": self.femto_radius,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["pathloss"] = [PathLossModel(**m) for m in d.get("pathloss", [])]
        return cls(**d)

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def dump_csv(self, path):
        """Flat audit dump: one row per node position and one row per gain entry."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["kind", "i", "j", "n", "value"])
            for k, (x, y) in enumerate(self.bs_positions):
                w.writerow(["bs_x", k, "", "", repr(float(x))])
                w.writerow(["bs_y", k, "", "", repr(float(y))])
            for u, (x, y) in enumerate(self.user_positions):
                w.writerow(["user_x", u, "", "", repr(float(x))])
                w.writerow(["user_y", u, "", "", repr(float(y))])
            g = self.gains if self.gains.ndim == 3 else self.gains[:, :, None]
            for idx in np.ndindex(g.shape):
                w.writerow(["gain", idx[0], idx[1], idx[2], repr(float(g[idx]))])


def _uniform_disk(rng, center, radius, n):
    r = radius * np.sqrt(rng.random(n))
    phi = 2.0 * np.pi * rng.random(n)
    return np.column_stack([center[0] + r * np.cos(phi), center[1] + r * np.sin(phi)])


def wall_counts(bs_pos, user_pos, femto_centers, femto_radius):
    """
    Walls between every BS and user: one per femtocell disk that contains
    exactly one endpoint of the link.
    """
    if len(femto_centers) == 0:
        return np.zeros((len(bs_pos), len(user_pos)))
    fc = np.asarray(femto_centers)
    in_bs = np.linalg.norm(bs_pos[:, None, :] - fc[None], axis=2) <= femto_radius + 1e-9
    in_user = np.linalg.norm(user_pos[:, None, :] - fc[None], axis=2) <= femto_radius + 1e-9
    return np.logical_xor(in_bs[:, None, :], in_user[None, :, :]).sum(axis=2).astype(float)


def base_gains(bs_pos, user_pos, models, walls):
    """Path-loss-only gain matrix ``(n_bs, n_users)``."""
    d = np.maximum(np.linalg.norm(bs_pos[:, None, :] - user_pos[None, :, :], axis=2), MIN_DISTANCE)
    out = np.empty(d.shape)
    for k, m in enumerate(models):
        out[k] = path_loss_gain(m, d[k], walls[k])
    return out


def fading_draws(rng, shape):
    """Unit-mean exponential power multipliers (Rayleigh amplitude fading)."""
    return rng.exponential(1.0, size=shape)


def build_channel_tensor(s, n_subchannels, fading, seed):
    """
    Per-subchannel gains from the path loss of `s` with optional fading.

    Parameters
    ----------
    s : Scenario
    n_subchannels : int
    fading : bool
    seed : int

    Returns
    -------
    ndarray
        ``(n_bs, n_users, n_subchannels)`` gains.
    """
    walls = wall_counts(s.bs_positions, s.user_positions,
                        s.bs_positions[s.femto_ids] if s.femto_radius > 0 else [], s.femto_radius)
    g = base_gains(s.bs_positions, s.user_positions, s.pathloss, walls)
    g = np.repeat(g[:, :, None], n_subchannels, axis=2)
    if fading:
        g = g * fading_draws(substream(seed, "fading"), g.shape)
    return g


def hex_centers(n_cells, isd):
    """Cell centres of a hexagonal grid: the origin, then rings of neighbours."""
    centers = [(0.0, 0.0)]
    ring = 1
    while len(centers) < n_cells:
        for side in range(6):
            for step in range(ring):
                a0 = math.pi / 3 * side
                a1 = math.pi / 3 * (side + 1)
                p0 = np.array([math.cos(a0), math.sin(a0)]) * ring * isd
                p1 = np.array([math.cos(a1), math.sin(a1)]) * ring * isd
                centers.append(tuple(p0 + (p1 - p0) * step / ring))
        ring += 1
    return np.array(centers[:n_cells])


def generate_topology(config):
    """
    Build a Scenario from a configuration.

    Parameters
    ----------
    config : ScenarioConfig or dict

    Returns
    -------
    Scenario
    """
    if isinstance(config, dict):
        config = ScenarioConfig.from_dict(config)
    if config.layout == "hexgrid":
        return _hexgrid(config)
    return _hetnet(config)


def _hetnet(cfg):
    rng = substream(cfg.seed, "placement")
    macro = np.zeros(2)
    lo, hi = cfg.femto_ring
    rad = lo + (hi - lo) * np.sqrt(rng.random(cfg.n_femto))
    ang = 2.0 * np.pi * rng.random(cfg.n_femto)
    fbs = np.column_stack([rad * np.cos(ang), rad * np.sin(ang)])
    n_fue = rng.integers(cfg.fue_per_femto[0], cfg.fue_per_femto[1] + 1, size=cfg.n_femto)
    mue = _uniform_disk(rng, macro, cfg.r_macro, cfg.n_mue)
    fue = [_uniform_disk(rng, fbs[k], cfg.r_femto, n_fue[k]) for k in range(cfg.n_femto)]
    users = np.vstack([mue] + fue) if fue else mue
    home = np.concatenate([np.zeros(cfg.n_mue, dtype=int)]
                          + [np.full(n_fue[k], k + 1) for k in range(cfg.n_femto)])
    bs = np.vstack([macro[None], fbs])
    tiers = ["macro"] + ["femto"] * cfg.n_femto
    models = [PathLossModel(*cfg.macro_ab, cfg.pl_c, cfg.fc, cfg.wall_loss)]
    models += [PathLossModel(*cfg.femto_ab, cfg.pl_c, cfg.fc, cfg.wall_loss)] * cfg.n_femto
    pmax = np.where(home == 0, cfg.p_max_mue, cfg.p_max_fue).astype(float)
    proto = Scenario(bs, users, np.ones((len(bs), len(users))), np.full(len(bs), cfg.noise), pmax,
                     tiers, home, cfg.processing_gain, cfg.seed, models, cfg.r_femto)
    g = build_channel_tensor(proto, cfg.n_subchannels, cfg.fading, cfg.seed)
    if cfg.n_subchannels == 1:
        g = g[:, :, 0]
    return proto.with_gains(g)


def _hexgrid(cfg):
    rng = substream(cfg.seed, "placement")
    centers = hex_centers(cfg.n_cells, cfg.isd)
    k, s = cfg.n_cells, cfg.prbs_per_cell
    ang = 2.0 * np.pi * rng.random((k, s))
    users = (centers[:, None, :] + cfg.user_distance * np.stack([np.cos(ang), np.sin(ang)], axis=2)).reshape(-1, 2)
    home = np.repeat(np.arange(k), s)
    model = cran_model(cfg.fc)
    d = np.maximum(np.linalg.norm(centers[:, None, :] - users[None, :, :], axis=2), MIN_DISTANCE)
    g = path_loss_gain(model, d).reshape(k, k, s)
    if cfg.fading:
        g = g * fading_draws(substream(cfg.seed, "fading"), g.shape)
    return Scenario(centers, users, g, np.full(k, cfg.noise), np.full(k, cfg.tx_power),
                    ["rrh"] * k, home, 1.0, cfg.seed, [model] * k, 0.0)
