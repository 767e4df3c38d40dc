"""Perfect-maze generation, solving, rasterization and the DTMZ file format.

Random numbers come from :class:`Rng64` so every implementation that follows
the same recipe reproduces identical datasets:

* seeding: ``state = splitmix64(seed)``; a zero state is replaced by 1
* step (xorshift64*): ``x ^= x >> 12; x ^= x << 25; x ^= x >> 27``, output
  ``x * 0x2545F4914F6CDD1D mod 2**64``
* bounded draw ``below(k)``: ``(next_u64() * k) >> 64``

Maze recipe for ``generate_maze(n, seed)``:

1. pick the DFS root as cell index ``below(n*n)`` (row-major);
2. iterative backtracker: look at the top of the stack, collect its unvisited
   neighbours in the order up, down, left, right; if there are none pop,
   otherwise take ``neighbours[below(len)]``, knock down the shared wall,
   mark it visited and push it;
3. endpoints: ``a = below(n*n)``, ``b = below(n*n - 1)``, and ``b += 1`` if
   ``b >= a``; start is cell ``a``, end is cell ``b``.
"""

from __future__ import annotations

import hashlib
import heapq
import math
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

MASK64 = (1 << 64) - 1

WALL = (0, 0, 0)
OPEN = (255, 255, 255)
START = (0, 255, 0)
END = (255, 0, 0)
PALETTE = (WALL, OPEN, START, END)

PRESETS = {"small": 9, "medium": 11, "large": 13}
PRESET_SPLIT = (50_000, 10_000)

Cell = tuple[int, int]


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


class Rng64:
    """xorshift64* generator seeded through splitmix64."""

    def __init__(self, seed: int):
        self.state = splitmix64(seed & MASK64) or 1

    def next_u64(self) -> int:
        x = self.state
        x ^= x >> 12
        x ^= (x << 25) & MASK64
        x ^= x >> 27
        self.state = x
        return (x * 0x2545F4914F6CDD1D) & MASK64

    def below(self, k: int) -> int:
        if k < 1:
            raise ValueError(f"below() needs a positive bound, got {k}")
        return (self.next_u64() * k) >> 64


def _edge(a: Cell, b: Cell) -> tuple[Cell, Cell]:
    return (a, b) if a <= b else (b, a)


@dataclass(frozen=True)
class CellMaze:
    n: int
    removed_walls: frozenset
    start: Cell
    end: Cell
    seed: Optional[int] = None

    def neighbours(self) -> dict[Cell, list[Cell]]:
        adj: dict[Cell, list[Cell]] = {(i, j): [] for i in range(self.n) for j in range(self.n)}
        for a, b in sorted(self.removed_walls):
            adj[a].append(b)
            adj[b].append(a)
        return adj

    def key(self) -> tuple:
        """Canonical identity: wall set plus endpoints."""
        return (self.n, tuple(sorted(self.removed_walls)), self.start, self.end)


def generate_maze(n: int, seed: int) -> CellMaze:
    if n < 1:
        raise ValueError(f"maze side must be at least 1, got {n}")
    rng = Rng64(seed)
    root = rng.below(n * n)
    visited = [[False] * n for _ in range(n)]
    r0, c0 = divmod(root, n)
    visited[r0][c0] = True
    stack: list[Cell] = [(r0, c0)]
    removed = set()
    while stack:
        r, c = stack[-1]
        options = [
            (rr, cc)
            for rr, cc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1))
            if 0 <= rr < n and 0 <= cc < n and not visited[rr][cc]
        ]
        if not options:
            stack.pop()
            continue
        nxt = options[rng.below(len(options))]
        removed.add(_edge((r, c), nxt))
        visited[nxt[0]][nxt[1]] = True
        stack.append(nxt)

    if n == 1:
        start = end = (0, 0)
    else:
        a = rng.below(n * n)
        b = rng.below(n * n - 1)
        if b >= a:
            b += 1
        start, end = divmod(a, n), divmod(b, n)
    return CellMaze(n, frozenset(removed), start, end, seed)


def solve_maze(maze: CellMaze) -> list[Cell]:
    """Shortest start-to-end cell path (Dijkstra, unit edge weights)."""
    n = maze.n
    for a, b in maze.removed_walls:
        for r, c in (a, b):
            if not (0 <= r < n and 0 <= c < n):
                raise ValueError(f"malformed maze: cell {(r, c)} outside {n}x{n} grid")
        if abs(a[0] - b[0]) + abs(a[1] - b[1]) != 1:
            raise ValueError(f"malformed maze: removed wall between non-adjacent cells {a}, {b}")
    adj = maze.neighbours()
    dist = {maze.start: 0}
    prev: dict[Cell, Optional[Cell]] = {maze.start: None}
    heap = [(0, maze.start)]
    while heap:
        d, cell = heapq.heappop(heap)
        if d > dist[cell]:
            continue
        if cell == maze.end:
            break
        for nb in adj[cell]:
            nd = d + 1
            if nd < dist.get(nb, math.inf):
                dist[nb] = nd
                prev[nb] = cell
                heapq.heappush(heap, (nd, nb))
    if maze.end not in dist:
        raise ValueError(f"malformed maze: end {maze.end} unreachable from start {maze.start}")
    path = [maze.end]
    while prev[path[-1]] is not None:
        path.append(prev[path[-1]])
    return path[::-1]


@dataclass
class MazeSample:
    image: np.ndarray  # (H, W, 3) uint8
    target: np.ndarray  # (H, W) uint8 in {0, 1}
    path_length: int
    seed: int = 0


def rasterize(maze: CellMaze, path: Sequence[Cell]) -> MazeSample:
    """Render a maze at one pixel per cell and one pixel per wall slot."""
    if not path or path[0] != maze.start or path[-1] != maze.end:
        raise ValueError("path must run from the maze start to the maze end")
    for a, b in zip(path, path[1:]):
        if _edge(a, b) not in maze.removed_walls:
            raise ValueError(f"path steps through a wall between {a} and {b}")
    size = 2 * maze.n + 1
    image = np.zeros((size, size, 3), dtype=np.uint8)
    for i in range(maze.n):
        for j in range(maze.n):
            image[2 * i + 1, 2 * j + 1] = OPEN
    for a, b in maze.removed_walls:
        image[a[0] + b[0] + 1, a[1] + b[1] + 1] = OPEN
    image[2 * maze.start[0] + 1, 2 * maze.start[1] + 1] = START
    image[2 * maze.end[0] + 1, 2 * maze.end[1] + 1] = END

    target = np.zeros((size, size), dtype=np.uint8)
    for r, c in path:
        target[2 * r + 1, 2 * c + 1] = 1
    for a, b in zip(path, path[1:]):
        target[a[0] + b[0] + 1, a[1] + b[1] + 1] = 1
    return MazeSample(image, target, len(path) - 1, maze.seed or 0)


def maze_from_image(image: np.ndarray) -> CellMaze:
    """Recover the cell maze from its rendering."""
    size = image.shape[0]
    n = (size - 1) // 2
    start = end = None
    removed = set()
    for i in range(n):
        for j in range(n):
            px = tuple(int(v) for v in image[2 * i + 1, 2 * j + 1])
            if px == START:
                start = (i, j)
            elif px == END:
                end = (i, j)
            if i + 1 < n and tuple(image[2 * i + 2, 2 * j + 1]) != WALL:
                removed.add(((i, j), (i + 1, j)))
            if j + 1 < n and tuple(image[2 * i + 1, 2 * j + 2]) != WALL:
                removed.add(((i, j), (i, j + 1)))
    if start is None and end is not None:
        start = end
    if end is None and start is not None:
        end = start
    if n == 1 and start is None:
        start = end = (0, 0)
    if start is None:
        raise ValueError("image has no start or end marker")
    return CellMaze(n, frozenset(removed), start, end)


def make_sample(n: int, seed: int) -> MazeSample:
    maze = generate_maze(n, seed)
    sample = rasterize(maze, solve_maze(maze))
    sample.seed = seed & MASK64
    return sample


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    """Mazes of one size stored as stacked arrays."""

    n: int
    images: np.ndarray  # (count, H, W, 3) uint8
    targets: np.ndarray  # (count, H, W) uint8
    path_lengths: np.ndarray  # (count,) uint32
    seeds: np.ndarray  # (count,) uint64

    def __post_init__(self):
        count = len(self.images)
        if not (len(self.targets) == len(self.path_lengths) == len(self.seeds) == count):
            raise ValueError("dataset arrays disagree on record count")
        size = 2 * self.n + 1
        if self.images.shape[1:] != (size, size, 3) or self.targets.shape[1:] != (size, size):
            raise ValueError(f"dataset arrays do not match n={self.n} ({size}x{size} pixels)")

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, i: int) -> MazeSample:
        return MazeSample(
            self.images[i], self.targets[i], int(self.path_lengths[i]), int(self.seeds[i])
        )

    def __iter__(self) -> Iterator[MazeSample]:
        return (self[i] for i in range(len(self)))

    @property
    def height(self) -> int:
        return self.images.shape[1]

    @property
    def width(self) -> int:
        return self.images.shape[2]

    def subset(self, index) -> "Dataset":
        if not isinstance(index, slice):
            index = np.asarray(index)
            if index.dtype != bool:
                index = index.astype(np.intp)
        return Dataset(
            self.n, self.images[index], self.targets[index], self.path_lengths[index], self.seeds[index]
        )

    def inputs(self, index=None) -> np.ndarray:
        """Network inputs: float32 NCHW scaled to [0, 1]."""
        imgs = self.images if index is None else self.images[index]
        return np.ascontiguousarray(imgs.transpose(0, 3, 1, 2), dtype=np.float32) / np.float32(255)

    @classmethod
    def from_samples(cls, n: int, samples: Iterable[MazeSample]) -> "Dataset":
        samples = list(samples)
        size = 2 * n + 1
        if not samples:
            return cls(
                n,
                np.zeros((0, size, size, 3), np.uint8),
                np.zeros((0, size, size), np.uint8),
                np.zeros(0, np.uint32),
                np.zeros(0, np.uint64),
            )
        return cls(
            n,
            np.stack([s.image for s in samples]).astype(np.uint8),
            np.stack([s.target for s in samples]).astype(np.uint8),
            np.array([s.path_length for s in samples], dtype=np.uint32),
            np.array([s.seed for s in samples], dtype=np.uint64),
        )


def concat(datasets: Sequence[Dataset]) -> Dataset:
    n = datasets[0].n
    if any(d.n != n for d in datasets):
        raise ValueError("cannot concatenate datasets of different maze sizes")
    return Dataset(
        n,
        np.concatenate([d.images for d in datasets]),
        np.concatenate([d.targets for d in datasets]),
        np.concatenate([d.path_lengths for d in datasets]),
        np.concatenate([d.seeds for d in datasets]),
    )


def build_dataset(n: int, count: int, seed: int) -> Dataset:
    """``count`` mazes of side ``n``; record ``i`` uses seed ``seed + i``."""
    if count < 1:
        raise ValueError(f"count must be at least 1, got {count}")
    return Dataset.from_samples(n, (make_sample(n, (seed + i) & MASK64) for i in range(count)))


def build_preset(name: str, seed: int, count: Optional[int] = None) -> tuple[Dataset, Dataset]:
    """Train/test split for a named size; the test split follows the train records."""
    n = PRESETS[name]
    n_train, n_test = PRESET_SPLIT
    if count is not None:
        n_train = max(1, round(count * n_train / sum(PRESET_SPLIT)))
        n_test = max(1, count - n_train)
    full = build_dataset(n, n_train + n_test, seed)
    return full.subset(slice(0, n_train)), full.subset(slice(n_train, None))


MAGIC = b"DTMZ"
VERSION = 1
_HEADER = struct.Struct("<4sHHIIIQ")


class DatasetFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def _record_dtype(h: int, w: int) -> np.dtype:
    return np.dtype(
        [("seed", "<u8"), ("path_length", "<u4"), ("image", "u1", (h, w, 3)), ("target", "u1", (h, w))]
    )


def dataset_bytes(ds: Dataset) -> bytes:
    h, w = ds.height, ds.width
    header = _HEADER.pack(MAGIC, VERSION, 0, ds.n, h, w, len(ds))
    rec = np.zeros(len(ds), dtype=_record_dtype(h, w))
    rec["seed"] = ds.seeds
    rec["path_length"] = ds.path_lengths
    rec["image"] = ds.images
    rec["target"] = ds.targets
    return header + rec.tobytes()


def write_dataset(ds: Dataset, path) -> None:
    Path(path).write_bytes(dataset_bytes(ds))


def parse_dataset(buf: bytes) -> Dataset:
    if len(buf) < _HEADER.size:
        raise DatasetFormatError(f"file too short for {_HEADER.size}-byte header", len(buf))
    magic, version, _reserved, n, h, w, count = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}, expected {MAGIC!r} ('DTMZ')", 0)
    if version != VERSION:
        raise DatasetFormatError(f"unsupported version {version}, expected {VERSION}", 4)
    if h != 2 * n + 1 or w != 2 * n + 1:
        raise DatasetFormatError(f"image {h}x{w} inconsistent with n={n}", 12)
    dt = _record_dtype(h, w)
    expected = _HEADER.size + count * dt.itemsize
    if len(buf) < expected:
        complete = (len(buf) - _HEADER.size) // dt.itemsize
        raise DatasetFormatError(
            f"truncated: header promises {count} records, file holds {complete} complete",
            _HEADER.size + complete * dt.itemsize,
        )
    if len(buf) > expected:
        raise DatasetFormatError(f"{len(buf) - expected} trailing bytes after last record", expected)
    rec = np.frombuffer(buf, dtype=dt, count=count, offset=_HEADER.size)
    bad = np.flatnonzero((rec["target"] > 1).reshape(count, -1).any(axis=1))
    if bad.size:
        i = int(bad[0])
        raise DatasetFormatError(f"record {i} has target values outside {{0, 1}}", _HEADER.size + i * dt.itemsize)
    return Dataset(
        int(n),
        rec["image"].copy(),
        rec["target"].copy(),
        rec["path_length"].copy(),
        rec["seed"].copy(),
    )


def read_dataset(path) -> Dataset:
    return parse_dataset(Path(path).read_bytes())


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# statistics


@dataclass
class DatasetStats:
    histogram: dict[int, int]
    duplicate_rate: float
    mean_path_length: float
    stderr_path_length: float
    count: int = 0

    def fractions(self) -> dict[int, float]:
        return {k: v / self.count for k, v in self.histogram.items()}


def duplicate_fraction(keys: Iterable) -> float:
    keys = list(keys)
    if not keys:
        return 0.0
    return (len(keys) - len(set(keys))) / len(keys)


def dataset_stats(ds: Dataset) -> DatasetStats:
    if len(ds) == 0:
        raise ValueError("dataset_stats needs a nonempty dataset")
    lengths = ds.path_lengths.astype(np.float64)
    hist = dict(sorted(Counter(int(x) for x in ds.path_lengths).items()))
    # the rendering encodes the wall set and both endpoints exactly
    dup = duplicate_fraction(img.tobytes() for img in ds.images)
    sem = float(lengths.std(ddof=1) / math.sqrt(len(ds))) if len(ds) > 1 else 0.0
    return DatasetStats(hist, dup, float(lengths.mean()), sem, len(ds))

