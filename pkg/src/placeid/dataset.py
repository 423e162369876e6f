"""Pose-stamped descriptor sequences: loading, synthesis, merging, splits and tuple mining.

Everything geometric here works on planar (x, y) distances; z is carried
along but never used for radius rules.
"""

from __future__ import annotations

import csv
import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

DESCRIPTOR_MAGIC = b"DSC1"
KITTI_HZ = 10.0
SEQUENCE_SHIFT = 1000.0


class PoseFormat(str, enum.Enum):
    KITTI_ODOMETRY_3x4 = "KITTI_ODOMETRY_3x4"
    XYZT_CSV = "XYZT_CSV"


class Split(enum.IntEnum):
    TRAIN = 0
    VAL = 1
    EVAL = 2


class PoseParseError(ValueError):
    def __init__(self, path, line_no, reason):
        super().__init__(f"{path}:{line_no}: {reason}")
        self.path = path
        self.line_no = line_no


class NoTuplesError(RuntimeError):
    pass


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    z: float
    t: float = 0.0

    def __post_init__(self):
        if not all(np.isfinite([self.x, self.y, self.z, self.t])):
            raise ValueError(f"non-finite pose {self}")
        if self.t < 0:
            raise ValueError(f"negative timestamp {self.t}")


@dataclass(frozen=True)
class Scene:
    scene_index: int
    sequence_id: int
    pose: Pose
    descriptor: np.ndarray


@dataclass(frozen=True)
class TrainTuple:
    q: int
    p: int
    n: int
    nbis: int


@dataclass(frozen=True)
class RevisitLabel:
    scene_index: int
    is_revisit: bool


@dataclass(frozen=True, eq=False)
class SequenceDataset:
    """Column-oriented store of scenes.

    ``poses`` is N x 4 (x, y, z, t). ``local_index`` is the position of each
    scene inside its original sequence and drives the split rule.
    """

    poses: np.ndarray
    descriptors: np.ndarray
    sequence_ids: np.ndarray
    local_index: np.ndarray
    split: np.ndarray = field(default=None)

    def __post_init__(self):
        poses = np.asarray(self.poses, dtype=np.float64).reshape(-1, 4)
        n = len(poses)
        desc = np.asarray(self.descriptors, dtype=np.float64)
        if desc.ndim != 2 or len(desc) != n:
            raise ValueError(f"descriptors shape {desc.shape} does not match {n} poses")
        if not np.all(np.isfinite(desc)) or not np.all(np.isfinite(poses)):
            raise ValueError("non-finite descriptor or pose entries")
        object.__setattr__(self, "poses", poses)
        object.__setattr__(self, "descriptors", desc)
        object.__setattr__(self, "sequence_ids", np.asarray(self.sequence_ids, dtype=np.int64).reshape(n))
        object.__setattr__(self, "local_index", np.asarray(self.local_index, dtype=np.int64).reshape(n))
        if self.split is None:
            object.__setattr__(self, "split", split_for_indices(self.local_index))
        else:
            object.__setattr__(self, "split", np.asarray(self.split, dtype=np.int8).reshape(n))
        for arr in (self.poses, self.descriptors, self.sequence_ids, self.local_index, self.split):
            arr.setflags(write=False)

    def __len__(self):
        return len(self.poses)

    def __getitem__(self, i) -> Scene:
        x, y, z, t = self.poses[i]
        return Scene(int(i), int(self.sequence_ids[i]), Pose(x, y, z, t), self.descriptors[i])

    @property
    def scenes(self) -> list[Scene]:
        return [self[i] for i in range(len(self))]

    @property
    def descriptor_dim(self) -> int:
        return self.descriptors.shape[1]

    @property
    def xy(self) -> np.ndarray:
        return self.poses[:, :2]

    @property
    def t(self) -> np.ndarray:
        return self.poses[:, 3]

    def indices(self, split: Split) -> np.ndarray:
        return np.flatnonzero(self.split == split)

    @classmethod
    def empty(cls, descriptor_dim: int) -> "SequenceDataset":
        return cls(np.zeros((0, 4)), np.zeros((0, descriptor_dim)), [], [])


def load_poses(path, fmt=PoseFormat.KITTI_ODOMETRY_3x4, hz: float = KITTI_HZ) -> list[Pose]:
    """Read one pose per line. KITTI files carry no time, so ``t = line / hz``."""
    fmt = PoseFormat(fmt)
    path = Path(path)
    poses = []
    with open(path) as fh:
        lines = fh.read().splitlines()
    if fmt is PoseFormat.KITTI_ODOMETRY_3x4:
        for i, line in enumerate(lines):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 12:
                raise PoseParseError(path, i + 1, f"expected 12 values, got {len(parts)}")
            try:
                vals = [float(v) for v in parts]
            except ValueError as exc:
                raise PoseParseError(path, i + 1, str(exc)) from None
            poses.append(Pose(vals[3], vals[7], vals[11], i / hz))
        return poses

    if not lines:
        return poses
    header = [h.strip() for h in lines[0].split(",")]
    if header != ["x", "y", "z", "t"]:
        raise PoseParseError(path, 1, f"expected header x,y,z,t, got {lines[0]!r}")
    for i, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise PoseParseError(path, i, f"expected 4 values, got {len(parts)}")
        try:
            poses.append(Pose(*(float(v) for v in parts)))
        except ValueError as exc:
            raise PoseParseError(path, i, str(exc)) from None
    return poses


def write_poses_csv(path, poses: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "z", "t"])
        for row in np.asarray(poses).reshape(-1, 4):
            w.writerow([repr(float(v)) for v in row])


def write_descriptors(path, descriptors: np.ndarray) -> None:
    desc = np.ascontiguousarray(descriptors, dtype="<f4")
    count, dim = desc.shape
    with open(path, "wb") as fh:
        fh.write(DESCRIPTOR_MAGIC + struct.pack("<II", count, dim))
        fh.write(desc.tobytes())


def read_descriptors(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != DESCRIPTOR_MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}")
    count, dim = struct.unpack("<II", raw[4:12])
    body = raw[12:]
    if len(body) != count * dim * 4:
        raise ValueError(f"{path}: expected {count * dim * 4} payload bytes, found {len(body)}")
    return np.frombuffer(body, dtype="<f4").reshape(count, dim).astype(np.float64)


def write_split_csv(path, dataset: SequenceDataset) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scene_index", "sequence_id", "local_index", "split"])
        for i in range(len(dataset)):
            w.writerow([i, int(dataset.sequence_ids[i]), int(dataset.local_index[i]),
                        Split(int(dataset.split[i])).name])


def read_split_csv(path):
    seq, local, split = [], [], []
    with open(path, newline="") as fh:
        for k, row in enumerate(csv.DictReader(fh)):
            if int(row["scene_index"]) != k:
                raise ValueError(f"{path}: scene_index {row['scene_index']} out of order at row {k}")
            seq.append(int(row["sequence_id"]))
            local.append(int(row["local_index"]))
            split.append(Split[row["split"]])
    return np.array(seq, dtype=np.int64), np.array(local, dtype=np.int64), np.array(split, dtype=np.int8)


def save_dataset(directory, dataset: SequenceDataset) -> dict:
    directory = Path(directory)
    paths = {
        "descriptors": directory / "descriptors.dsc",
        "poses": directory / "poses.csv",
        "splits": directory / "splits.csv",
    }
    write_descriptors(paths["descriptors"], dataset.descriptors)
    write_poses_csv(paths["poses"], dataset.poses)
    write_split_csv(paths["splits"], dataset)
    return paths


def load_dataset(directory) -> SequenceDataset:
    directory = Path(directory)
    for name in ("descriptors.dsc", "poses.csv", "splits.csv"):
        if not (directory / name).exists():
            raise FileNotFoundError(directory / name)
    poses = load_poses(directory / "poses.csv", PoseFormat.XYZT_CSV)
    desc = read_descriptors(directory / "descriptors.dsc")
    seq, local, split = read_split_csv(directory / "splits.csv")
    arr = np.array([[p.x, p.y, p.z, p.t] for p in poses]).reshape(-1, 4)
    return SequenceDataset(arr, desc.reshape(len(arr), -1) if len(arr) else desc, seq, local, split)


def dataset_from_files(pose_path, descriptor_path, fmt=PoseFormat.KITTI_ODOMETRY_3x4,
                       sequence_id: int = 0) -> SequenceDataset:
    poses = load_poses(pose_path, fmt)
    desc = read_descriptors(descriptor_path)
    if len(desc) != len(poses):
        raise ValueError(f"{descriptor_path} has {len(desc)} descriptors for {len(poses)} poses in {pose_path}")
    arr = np.array([[p.x, p.y, p.z, p.t] for p in poses]).reshape(-1, 4)
    n = len(arr)
    return SequenceDataset(arr, desc, np.full(n, sequence_id), np.arange(n))


# ---------------------------------------------------------------------------
# synthetic data

N_WAVES = 8
WAVELENGTH_RANGE = (20.0, 200.0)
STEP_M = 1.0
LOOP_OFFSET_M = (0.1, 0.5)


class DescriptorField:
    """Smooth random map from planar location to a unit descriptor.

    Each output dimension is a sum of ``N_WAVES`` planar cosines with random
    direction, phase, and wavelength in ``WAVELENGTH_RANGE``.
    """

    def __init__(self, dim: int, rng: np.random.Generator):
        lam = rng.uniform(*WAVELENGTH_RANGE, size=(dim, N_WAVES))
        theta = rng.uniform(0, 2 * np.pi, size=(dim, N_WAVES))
        k = 2 * np.pi / lam
        self.kx = k * np.cos(theta)
        self.ky = k * np.sin(theta)
        self.phase = rng.uniform(0, 2 * np.pi, size=(dim, N_WAVES))

    def __call__(self, xy: np.ndarray) -> np.ndarray:
        xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
        out = np.empty((len(xy), self.kx.shape[0]))
        for j in range(N_WAVES):
            arg = np.outer(xy[:, 0], self.kx[:, j]) + np.outer(xy[:, 1], self.ky[:, j]) + self.phase[:, j]
            if j == 0:
                out[:] = np.cos(arg)
            else:
                out += np.cos(arg)
        return _unit_rows(out)


def _unit_rows(a):
    norms = np.linalg.norm(a, axis=1, keepdims=True)
    return a / np.where(norms > 0, norms, 1.0)


def _smooth_walk(n: int, rng: np.random.Generator) -> np.ndarray:
    # heading follows a slowly varying turn rate so the path curves but never jitters
    turn = np.zeros(n)
    rate = 0.0
    for i in range(n):
        rate = 0.95 * rate + rng.normal(0.0, 0.01)
        turn[i] = rate
    heading = rng.uniform(0, 2 * np.pi) + np.cumsum(turn)
    steps = STEP_M * np.column_stack([np.cos(heading), np.sin(heading)])
    xy = np.cumsum(steps, axis=0) - steps[0]
    return xy, heading


def synth_dataset(n_scenes: int, loop_fraction: float = 0.2, descriptor_dim: int = 256,
                  noise_sigma: float = 0.01, seed: int = 0, sequence_id: int = 0) -> SequenceDataset:
    """Simulate a drive with a revisiting tail.

    The first ``n - m`` scenes follow a smooth random walk at 1 m per 0.1 s;
    the last ``m = round(loop_fraction * n)`` scenes retrace the start of the
    walk with a lateral offset whose magnitude lies in ``LOOP_OFFSET_M``, so a
    revisit is close but never lands in the same centimetre cell.
    """
    if n_scenes < 0:
        raise ValueError("n_scenes must be non-negative")
    if not 0.0 <= loop_fraction <= 1.0:
        raise ValueError("loop_fraction must lie in [0, 1]")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be non-negative")
    if descriptor_dim < 1:
        raise ValueError("descriptor_dim must be positive")
    if n_scenes == 0:
        return SequenceDataset.empty(descriptor_dim)

    rng = np.random.default_rng(seed)
    field_ = DescriptorField(descriptor_dim, rng)
    m = int(round(loop_fraction * n_scenes))
    base = max(n_scenes - m, 1)
    m = n_scenes - base
    xy, heading = _smooth_walk(base, rng)
    if m:
        src = np.arange(m) % base
        lateral = rng.uniform(*LOOP_OFFSET_M, size=m) * rng.choice([-1.0, 1.0], size=m)
        normal = np.column_stack([-np.sin(heading[src]), np.cos(heading[src])])
        xy = np.vstack([xy, xy[src] + lateral[:, None] * normal])
    t = np.arange(n_scenes) / KITTI_HZ
    poses = np.column_stack([xy, np.zeros(n_scenes), t])

    desc = field_(xy)
    if noise_sigma > 0:
        desc = _unit_rows(desc + rng.normal(0.0, noise_sigma, size=desc.shape))
    return SequenceDataset(poses, desc, np.full(n_scenes, sequence_id), np.arange(n_scenes))


# ---------------------------------------------------------------------------
# protocol


def merge_shift(sequences: list[SequenceDataset]) -> SequenceDataset:
    """Concatenate sequences, moving the i-th by (i*1000 m, i*1000 m)."""
    if not sequences:
        raise ValueError("nothing to merge")
    dim = sequences[0].descriptor_dim
    for s in sequences:
        if s.descriptor_dim != dim:
            raise ValueError(f"descriptor dimension mismatch: {s.descriptor_dim} != {dim}")
    poses = []
    for i, s in enumerate(sequences):
        p = s.poses.copy()
        p[:, 0] += i * SEQUENCE_SHIFT
        p[:, 1] += i * SEQUENCE_SHIFT
        poses.append(p)
    return SequenceDataset(
        np.vstack(poses),
        np.vstack([s.descriptors for s in sequences]),
        np.concatenate([s.sequence_ids for s in sequences]),
        np.concatenate([s.local_index for s in sequences]),
        np.concatenate([s.split for s in sequences]),
    )


def split_for_indices(local_index) -> np.ndarray:
    i = np.asarray(local_index, dtype=np.int64)
    out = np.full(i.shape, Split.TRAIN, dtype=np.int8)
    out[(i % 5 == 0) & (i % 10 != 0)] = Split.VAL
    out[i % 10 == 0] = Split.EVAL
    return out


def assign_split(dataset: SequenceDataset) -> SequenceDataset:
    return SequenceDataset(dataset.poses, dataset.descriptors, dataset.sequence_ids,
                           dataset.local_index, split_for_indices(dataset.local_index))


def planar_distance(dataset: SequenceDataset, a, b):
    return np.linalg.norm(dataset.xy[a] - dataset.xy[b], axis=-1)


def mine_tuples(dataset: SequenceDataset, p_radius: float = 3.0, n_radius: float = 20.0,
                negatives_per_query: int = 1, seed: int = 0) -> list[TrainTuple]:
    """Sample (query, positive, negative, second negative) tuples among TRAIN scenes."""
    train = dataset.indices(Split.TRAIN)
    if len(train) < 4:
        raise NoTuplesError(f"need at least 4 TRAIN scenes, have {len(train)}")
    rng = np.random.default_rng(seed)
    xy = dataset.xy[train]
    tree = cKDTree(xy)
    tuples = []
    for qi in range(len(train)):
        pos = [j for j in tree.query_ball_point(xy[qi], p_radius) if j != qi]
        if not pos:
            continue
        d_q = np.linalg.norm(xy - xy[qi], axis=1)
        neg = np.flatnonzero(d_q >= n_radius)
        if len(neg) == 0:
            continue
        pos.sort()
        for _ in range(negatives_per_query):
            p = pos[rng.integers(len(pos))]
            # n must leave room for a second negative; try candidates in random order
            for n in rng.permutation(neg):
                d_n = np.linalg.norm(xy - xy[n], axis=1)
                nbis = np.flatnonzero((d_q >= n_radius) & (d_n >= n_radius))
                nbis = nbis[(nbis != p)]
                if len(nbis):
                    b = nbis[rng.integers(len(nbis))]
                    tuples.append(TrainTuple(int(train[qi]), int(train[p]), int(train[n]), int(train[b])))
                    break
    if not tuples:
        raise NoTuplesError("no scene has both a positive and two mutually distant negatives")
    return tuples


def revisit_mask(dataset: SequenceDataset, radius: float = 3.0, dt: float = 30.0) -> np.ndarray:
    n = len(dataset)
    out = np.zeros(n, dtype=bool)
    if n == 0:
        return out
    tree = cKDTree(dataset.xy)
    t = dataset.t
    for q, nbrs in enumerate(tree.query_ball_point(dataset.xy, radius)):
        out[q] = bool(np.any(t[q] - t[nbrs] > dt))
    return out


def revisit_labels(dataset: SequenceDataset, radius: float = 3.0, dt: float = 30.0) -> list[RevisitLabel]:
    """A scene is a revisit when something within ``radius`` was seen more than ``dt`` earlier."""
    mask = revisit_mask(dataset, radius, dt)
    return [RevisitLabel(i, bool(m)) for i, m in enumerate(mask)]
