"""Skeleton sequences, synthetic motion data, and the on-disk container.

Container layout (all little-endian)::

    b"SKEL" | version u16 | record count u32 |
    per record: id length u16, id UTF-8 bytes, C u16, T u16, V u16,
                C*T*V float32 values, c slowest and v fastest

The manifest is a JSON file ``{version, topology: {V, edges}, samples:
[{id, label, split}], data}`` where ``data`` names the container file
relative to the manifest.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SKEL_MAGIC = b"SKEL"
FORMAT_VERSION = 1
MANIFEST_VERSION = 1
ROOT_JOINT = 0

# root, spine (3), head, two 3-joint arms, two 2-joint legs
DEFAULT_EDGES_15 = [
    (0, 1), (1, 2), (2, 3), (3, 4),
    (3, 5), (5, 6), (6, 7),
    (3, 8), (8, 9), (9, 10),
    (0, 11), (11, 12),
    (0, 13), (13, 14),
]

_REST_POSE_15 = np.array([
    [0.00, 0.00, 0.0],
    [0.00, 0.25, 0.0],
    [0.00, 0.50, 0.0],
    [0.00, 0.75, 0.0],
    [0.00, 0.95, 0.0],
    [-0.20, 0.70, 0.0],
    [-0.45, 0.70, 0.0],
    [-0.70, 0.70, 0.0],
    [0.20, 0.70, 0.0],
    [0.45, 0.70, 0.0],
    [0.70, 0.70, 0.0],
    [-0.12, -0.45, 0.0],
    [-0.12, -0.90, 0.0],
    [0.12, -0.45, 0.0],
    [0.12, -0.90, 0.0],
])


class DataFormatError(ValueError):
    pass


@dataclass
class SkeletonSequence:
    data: np.ndarray
    label: int | None = None
    sample_id: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"skeleton data must be C x T x V, got shape {self.data.shape}")
        c, t, v = self.data.shape
        if t < 1 or v < 2 or c < 1:
            raise ValueError(f"invalid skeleton shape {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise ValueError(f"sample {self.sample_id!r} contains non-finite values")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass
class GraphAdjacency:
    num_joints: int
    edges: list[tuple[int, int]]
    matrix: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.edges = [(int(i), int(j)) for i, j in self.edges]
        for i, j in self.edges:
            if not (0 <= i < self.num_joints and 0 <= j < self.num_joints):
                raise ValueError(f"edge ({i}, {j}) outside {self.num_joints} joints")
        self.matrix = normalized_adjacency(self.num_joints, self.edges)

    def permuted(self, perm: Sequence[int]) -> "GraphAdjacency":
        """Relabel joints so that new joint ``k`` is old joint ``perm[k]``."""
        inverse = np.argsort(perm)
        return GraphAdjacency(self.num_joints, [(int(inverse[i]), int(inverse[j])) for i, j in self.edges])


def normalized_adjacency(num_joints: int, edges: Iterable[tuple[int, int]]) -> np.ndarray:
    """Symmetric ``D^-1/2 (A + I) D^-1/2``."""
    a = np.eye(num_joints)
    for i, j in edges:
        a[i, j] = a[j, i] = 1.0
    d = 1.0 / np.sqrt(a.sum(axis=1))
    return a * d[:, None] * d[None, :]


def skeleton_edges(num_joints: int) -> list[tuple[int, int]]:
    """Default topology: the 15-joint body tree, otherwise a simple chain."""
    if num_joints < 2:
        raise ValueError("a skeleton needs at least two joints")
    if num_joints == 15:
        return list(DEFAULT_EDGES_15)
    return [(i, i + 1) for i in range(num_joints - 1)]


def rest_pose(num_joints: int) -> np.ndarray:
    if num_joints == 15:
        return _REST_POSE_15.copy()
    y = np.linspace(0.0, 1.0, num_joints)
    return np.stack([np.zeros(num_joints), y, np.zeros(num_joints)], axis=1)


@dataclass
class ManifestEntry:
    sample_id: str
    label: int | None
    split: str


@dataclass
class DatasetManifest:
    num_joints: int
    edges: list[tuple[int, int]]
    samples: list[ManifestEntry]
    data_file: str = "dataset.skel"

    def __post_init__(self):
        ids = [s.sample_id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise DataFormatError("manifest sample ids are not unique")
        for s in self.samples:
            if s.split not in ("train", "test"):
                raise DataFormatError(f"unknown split {s.split!r} for {s.sample_id!r}")

    def ids(self, split: str | None = None) -> list[str]:
        return [s.sample_id for s in self.samples if split is None or s.split == split]

    @property
    def adjacency(self) -> GraphAdjacency:
        return GraphAdjacency(self.num_joints, self.edges)

    def to_json(self) -> dict:
        return {
            "version": MANIFEST_VERSION,
            "topology": {"V": self.num_joints, "edges": [list(e) for e in self.edges]},
            "samples": [{"id": s.sample_id, "label": s.label, "split": s.split} for s in self.samples],
            "data": self.data_file,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "DatasetManifest":
        try:
            topo = obj["topology"]
            samples = [ManifestEntry(str(s["id"]), None if s.get("label") is None else int(s["label"]),
                                     str(s["split"])) for s in obj["samples"]]
            return cls(int(topo["V"]), [tuple(e) for e in topo["edges"]], samples,
                       str(obj.get("data", "dataset.skel")))
        except (KeyError, TypeError) as exc:
            raise DataFormatError(f"malformed manifest: {exc}") from None


class Dataset:
    """Sequences keyed by sample id, with the manifest that labels and splits them."""

    def __init__(self, sequences: Sequence[SkeletonSequence], manifest: DatasetManifest):
        self.sequences = list(sequences)
        self.manifest = manifest
        self._by_id = {s.sample_id: s for s in self.sequences}

    def __len__(self) -> int:
        return len(self.sequences)

    def __getitem__(self, sample_id: str) -> SkeletonSequence:
        return self._by_id[sample_id]

    def split(self, name: str) -> list[SkeletonSequence]:
        return [self._by_id[i] for i in self.manifest.ids(name)]

    @property
    def adjacency(self) -> GraphAdjacency:
        return self.manifest.adjacency

    @property
    def num_classes(self) -> int:
        labels = [s.label for s in self.manifest.samples if s.label is not None]
        return max(labels) + 1 if labels else 0


def stack_sequences(seqs: Sequence[SkeletonSequence]) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Batch into ``(B, C, T, V)`` plus labels (``-1`` when missing) and ids."""
    data = np.stack([s.data for s in seqs])
    labels = np.array([-1 if s.label is None else s.label for s in seqs], dtype=np.int64)
    return data, labels, [s.sample_id for s in seqs]


# ----------------------------------------------------------------------
# synthetic data


# generator settings of the built-in benchmark: 10 classes, 600 train / 200 test clips
BENCHMARK_GENERATOR = dict(
    num_classes=10, samples_per_class=80, num_joints=15, num_frames=64, noise_sigma=0.05, seed=7,
    test_fraction=0.25, amplitude_jitter=0.5, view_jitter=0.5,
)


def benchmark_dataset() -> "Dataset":
    seqs, manifest = generate_synthetic_dataset(**BENCHMARK_GENERATOR)
    return Dataset(seqs, manifest)


def generate_synthetic_dataset(
    num_classes: int = 10,
    samples_per_class: int = 80,
    num_joints: int = 15,
    num_frames: int = 64,
    noise_sigma: float = 0.02,
    seed: int = 7,
    *,
    test_fraction: float = 0.25,
    amplitude_jitter: float = 0.0,
    view_jitter: float = 0.0,
    amplitude_range: tuple[float, float] = (0.02, 0.25),
    fps: float = 30.0,
) -> tuple[list[SkeletonSequence], DatasetManifest]:
    """Per-joint sinusoidal motions, one parametric family per class.

    Each class gets a frequency (0.5 to 5 cycles per ``fps`` frames), a random
    amplitude vector and phase per joint.  Every sample draws its own global
    phase; ``noise_sigma`` adds i.i.d. Gaussian coordinate noise.  The two
    jitter options add intra-class variation: ``amplitude_jitter`` scales
    each sample's motion by ``1 + U(-a, a)`` per joint, and ``view_jitter``
    multiplies the whole clip by ``I + S`` with ``S`` drawn like a shear.
    Both default to zero.  ``amplitude_range`` bounds the per-joint class
    amplitudes (the rest pose spans about 1.9 units top to bottom).
    """
    if num_joints < 2:
        raise ValueError("V must be at least 2")
    if num_classes < 2 or samples_per_class < 2:
        raise ValueError("need at least two classes and two samples per class")
    rng = np.random.default_rng(seed)
    edges = skeleton_edges(num_joints)
    rest = rest_pose(num_joints)
    freqs = np.linspace(0.5, 5.0, num_classes)
    freqs = freqs[rng.permutation(num_classes)]
    amps = rng.uniform(*amplitude_range, size=(num_classes, num_joints, 3))
    amps[:, ROOT_JOINT] *= 0.2
    joint_phase = rng.uniform(0, 2 * np.pi, size=(num_classes, num_joints, 3))
    t = np.arange(num_frames) / fps

    n_test = int(round(samples_per_class * test_fraction))
    sequences, entries = [], []
    for c in range(num_classes):
        for k in range(samples_per_class):
            phase = rng.uniform(0, 2 * np.pi)
            amp = amps[c]
            if amplitude_jitter:
                amp = amp * (1 + rng.uniform(-amplitude_jitter, amplitude_jitter, size=(num_joints, 1)))
            # (T, V, 3)
            motion = amp[None] * np.sin(2 * np.pi * freqs[c] * t[:, None, None] + joint_phase[c][None] + phase)
            xyz = rest[None] + motion
            if view_jitter:
                s = rng.uniform(-view_jitter, view_jitter, size=(3, 3))
                np.fill_diagonal(s, 0.0)
                xyz = xyz @ (np.eye(3) + s).T
            if noise_sigma:
                xyz = xyz + rng.normal(0.0, noise_sigma, size=xyz.shape)
            sid = f"c{c:03d}_s{k:04d}"
            data = np.ascontiguousarray(xyz.transpose(2, 0, 1)).astype(np.float32)
            sequences.append(SkeletonSequence(data, c, sid))
            entries.append(ManifestEntry(sid, c, "test" if k < n_test else "train"))
    manifest = DatasetManifest(num_joints, edges, entries)
    return sequences, manifest


def normalize_sequence(seq: SkeletonSequence) -> SkeletonSequence:
    """Translate so the root joint in the first frame sits at the origin."""
    origin = seq.data[:, 0, ROOT_JOINT]
    return SkeletonSequence(seq.data - origin[:, None, None], seq.label, seq.sample_id)


# ----------------------------------------------------------------------
# container I/O


def write_container(path, sequences: Sequence[SkeletonSequence], magic: bytes = SKEL_MAGIC) -> None:
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<HI", FORMAT_VERSION, len(sequences)))
        for seq in sequences:
            sid = seq.sample_id.encode("utf-8")
            c, t, v = seq.data.shape
            fh.write(struct.pack("<H", len(sid)))
            fh.write(sid)
            fh.write(struct.pack("<HHH", c, t, v))
            fh.write(np.ascontiguousarray(seq.data, dtype="<f4").tobytes())


def read_container(path, magic: bytes = SKEL_MAGIC) -> list[tuple[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if buf[:4] != magic:
        raise DataFormatError(f"bad magic bytes {buf[:4]!r}, expected {magic!r}")
    if len(buf) < 10:
        raise DataFormatError("record count mismatch: header truncated")
    version, count = struct.unpack_from("<HI", buf, 4)
    if version != FORMAT_VERSION:
        raise DataFormatError(f"unsupported format version {version}")
    pos = 10
    records = []
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            if len(buf) < pos + n:
                raise struct.error("short id")
            sid = buf[pos:pos + n].decode("utf-8")
            pos += n
            c, t, v = struct.unpack_from("<HHH", buf, pos)
            pos += 6
            size = c * t * v * 4
            if len(buf) < pos + size:
                raise struct.error("short payload")
            arr = np.frombuffer(buf, dtype="<f4", count=c * t * v, offset=pos).reshape(c, t, v)
            pos += size
            if not np.isfinite(arr).all():
                raise DataFormatError(f"record {sid!r} contains non-finite values")
            records.append((sid, arr.astype(np.float32)))
    except struct.error:
        raise DataFormatError(
            f"record count mismatch: header declares {count}, file holds {len(records)}"
        ) from None
    if pos != len(buf):
        raise DataFormatError("record count mismatch: trailing bytes after last record")
    return records


def save_dataset(manifest_path, sequences: Sequence[SkeletonSequence], manifest: DatasetManifest) -> Path:
    manifest_path = Path(manifest_path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    by_id = {s.sample_id: s for s in sequences}
    missing = [e.sample_id for e in manifest.samples if e.sample_id not in by_id]
    if missing:
        raise DataFormatError(f"manifest references absent sample ids: {missing[:5]}")
    write_container(manifest_path.parent / manifest.data_file, sequences)
    manifest_path.write_text(json.dumps(manifest.to_json(), indent=1))
    return manifest_path


def load_dataset(manifest_path) -> Dataset:
    manifest_path = Path(manifest_path)
    try:
        obj = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"manifest is not valid JSON: {exc}") from None
    manifest = DatasetManifest.from_json(obj)
    records = dict(read_container(manifest_path.parent / manifest.data_file))
    sequences = []
    for entry in manifest.samples:
        if entry.sample_id not in records:
            raise DataFormatError(f"manifest references absent sample id {entry.sample_id!r}")
        arr = records[entry.sample_id]
        if arr.shape[2] != manifest.num_joints:
            raise DataFormatError(f"sample {entry.sample_id!r} has {arr.shape[2]} joints, topology has {manifest.num_joints}")
        sequences.append(SkeletonSequence(arr, entry.label, entry.sample_id))
    return Dataset(sequences, manifest)


def make_dataset(sequences, manifest) -> Dataset:
    return Dataset(sequences, manifest)
