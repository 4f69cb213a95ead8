"""Label schedules, incremental dataset protocols and the synthetic corpus.

Two protocols turn a fully-annotated corpus into per-step training sets. The
disjoint protocol assigns every image to exactly one step (the earliest one
whose cumulative label space covers the image and that introduces one of its
classes); the overlapped protocol puts an image in every step that introduces
one of its classes. Either way the step masks only annotate that step's
classes, everything else collapses to background, which is exactly the label
shift the background-aware losses are built for.
"""
from __future__ import annotations

import colorsys
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import GenerationError, IngestionError, LabelDomainError, ScheduleError


@dataclass(frozen=True)
class LabelSchedule:
    """Foreground class ids per learning step; background is implicit."""

    steps: tuple[tuple[int, ...], ...]
    background_id: int = 0

    def __post_init__(self):
        if not self.steps or not self.steps[0]:
            raise ScheduleError("the first step must introduce at least one class")
        flat = [c for step in self.steps for c in step]
        if self.background_id in flat:
            raise ScheduleError("background id cannot be scheduled as a foreground class")
        if len(set(flat)) != len(flat):
            raise ScheduleError("class ids must be disjoint across steps")

    @property
    def num_steps(self) -> int:
        return len(self.steps)

    def new_fg(self, t: int) -> list[int]:
        return list(self.steps[t])

    def fg_up_to(self, t: int) -> list[int]:
        return [c for step in self.steps[: t + 1] for c in step]

    def label_space(self, t: int) -> list[int]:
        return [self.background_id] + self.fg_up_to(t)

    def all_fg(self) -> list[int]:
        return self.fg_up_to(self.num_steps - 1)

    def joint(self) -> "LabelSchedule":
        return LabelSchedule((tuple(self.all_fg()),), self.background_id)


def build_schedule(
    num_fg_classes: int,
    sizes: list[int],
    order: str = "index",
    seed: int | None = None,
    background_id: int = 0,
) -> LabelSchedule:
    """Slice the (optionally permuted) class order into consecutive steps."""
    if sum(sizes) != num_fg_classes:
        raise ScheduleError(f"step sizes {sizes} do not sum to {num_fg_classes} classes")
    if any(s <= 0 for s in sizes):
        raise ScheduleError("step sizes must be positive")
    ids = np.arange(1, num_fg_classes + 1)
    if order == "permuted":
        ids = np.random.default_rng(0 if seed is None else seed).permutation(ids)
    elif order != "index":
        raise ScheduleError(f"unknown class order {order!r}")
    steps = []
    pos = 0
    for s in sizes:
        steps.append(tuple(int(c) for c in ids[pos : pos + s]))
        pos += s
    return LabelSchedule(tuple(steps), background_id)


@dataclass
class Sample:
    """A fully-annotated image: every foreground class is labeled."""

    id: str
    image: np.ndarray  # [H, W, ch] floats in [0, 1]
    full_mask: np.ndarray  # [H, W] int class ids

    def __post_init__(self):
        if self.image.shape[:2] != self.full_mask.shape:
            raise LabelDomainError(f"sample {self.id}: image/mask dims differ")


@dataclass
class StepItem:
    id: str
    image: np.ndarray
    mask: np.ndarray  # relabeled for the step


@dataclass
class StepDataset:
    """The training set of one learning step (only its classes annotated)."""

    items: list[StepItem]
    step: int
    new_fg: list[int]  # incoming classes, schedule order
    background_id: int = 0
    shift_counts: dict = field(default_factory=dict)

    def __post_init__(self):
        visible = set(self.visible_classes)
        incoming = set(self.new_fg)
        for item in self.items:
            labels = set(np.unique(item.mask).tolist())
            if not labels <= visible:
                raise LabelDomainError(
                    f"step {self.step} item {item.id}: labels {sorted(labels - visible)} not visible"
                )
            if not labels & incoming:
                raise LabelDomainError(
                    f"step {self.step} item {item.id}: no pixel of an incoming class"
                )

    @property
    def visible_classes(self) -> list[int]:
        return [self.background_id] + list(self.new_fg)

    @property
    def samples(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(it.image, it.mask) for it in self.items]

    def __len__(self) -> int:
        return len(self.items)


@dataclass
class SplitReport:
    excluded_ids: list[str]
    per_step: list[dict]  # old_as_bg / future_as_bg / true_bg pixel counts


def relabel(full_mask: np.ndarray, visible_fg, background_id: int = 0) -> np.ndarray:
    """Keep labels in ``visible_fg``; everything else becomes background."""
    visible = np.asarray(sorted(set(int(c) for c in visible_fg) - {background_id}), dtype=full_mask.dtype)
    keep = np.isin(full_mask, visible)
    return np.where(keep, full_mask, background_id)


def _shift_counts(full_mask: np.ndarray, step_fg: set, seen_fg: set, background_id: int) -> dict:
    """How many background-labeled pixels are really old/future foreground."""
    relabeled_bg = ~np.isin(full_mask, np.asarray(sorted(step_fg), dtype=full_mask.dtype))
    old = np.isin(full_mask, np.asarray(sorted(seen_fg - step_fg), dtype=full_mask.dtype))
    true_bg = full_mask == background_id
    future = relabeled_bg & ~old & ~true_bg
    return {
        "old_as_bg": int((relabeled_bg & old).sum()),
        "future_as_bg": int(future.sum()),
        "true_bg": int((relabeled_bg & true_bg).sum()),
    }


def split_disjoint(corpus: list[Sample], schedule: LabelSchedule) -> tuple[list[StepDataset], SplitReport]:
    """Each image goes to the earliest step whose cumulative label space
    covers all its classes and that introduces at least one of them."""
    b = schedule.background_id
    buckets: list[list[StepItem]] = [[] for _ in range(schedule.num_steps)]
    stats = [dict(old_as_bg=0, future_as_bg=0, true_bg=0) for _ in range(schedule.num_steps)]
    excluded = []
    for sample in corpus:
        labels = set(np.unique(sample.full_mask).tolist()) - {b}
        placed = False
        for t in range(schedule.num_steps):
            step_fg = set(schedule.new_fg(t))
            if labels <= set(schedule.fg_up_to(t)) and labels & step_fg:
                mask = relabel(sample.full_mask, step_fg, b)
                buckets[t].append(StepItem(sample.id, sample.image, mask))
                for key, v in _shift_counts(
                    sample.full_mask, step_fg, set(schedule.fg_up_to(t)), b
                ).items():
                    stats[t][key] += v
                placed = True
                break
        if not placed:
            excluded.append(sample.id)
    steps = [
        StepDataset(buckets[t], t, schedule.new_fg(t), b, stats[t])
        for t in range(schedule.num_steps)
    ]
    return steps, SplitReport(excluded, stats)


def split_overlapped(corpus: list[Sample], schedule: LabelSchedule) -> tuple[list[StepDataset], SplitReport]:
    """Each step takes every image with at least one pixel of an incoming
    class; only the incoming classes stay annotated."""
    b = schedule.background_id
    buckets: list[list[StepItem]] = [[] for _ in range(schedule.num_steps)]
    stats = [dict(old_as_bg=0, future_as_bg=0, true_bg=0) for _ in range(schedule.num_steps)]
    covered: set[str] = set()
    for sample in corpus:
        labels = set(np.unique(sample.full_mask).tolist()) - {b}
        for t in range(schedule.num_steps):
            step_fg = set(schedule.new_fg(t))
            if labels & step_fg:
                mask = relabel(sample.full_mask, step_fg, b)
                buckets[t].append(StepItem(sample.id, sample.image, mask))
                for key, v in _shift_counts(
                    sample.full_mask, step_fg, set(schedule.fg_up_to(t)), b
                ).items():
                    stats[t][key] += v
                covered.add(sample.id)
    excluded = [s.id for s in corpus if s.id not in covered]
    steps = [
        StepDataset(buckets[t], t, schedule.new_fg(t), b, stats[t])
        for t in range(schedule.num_steps)
    ]
    return steps, SplitReport(excluded, stats)


def split_corpus(corpus, schedule, protocol: str):
    if protocol == "disjoint":
        return split_disjoint(corpus, schedule)
    if protocol == "overlapped":
        return split_overlapped(corpus, schedule)
    raise ScheduleError(f"unknown protocol {protocol!r}")


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass
class SyntheticConfig:
    num_fg_classes: int = 5
    num_images: int = 100
    height: int = 64
    width: int = 64
    blobs_per_image: int = 3
    noise: float = 0.05
    saturation: float = 0.85  # lower = classes closer to the gray background
    brightness: float = 0.85
    min_radius_frac: float = 0.10
    max_radius_frac: float = 0.26
    max_attempts: int = 20


def class_signature(
    c: int, num_classes: int, saturation: float = 0.85, brightness: float = 0.85
) -> tuple[np.ndarray, float, float]:
    """Deterministic (color, stripe frequency, stripe angle) for a class id."""
    hue = (c - 1) / max(num_classes, 1)
    color = np.array(colorsys.hsv_to_rgb(hue, saturation, brightness))
    freq = 0.55 + 0.22 * c
    angle = c * 2.39996323  # golden angle keeps orientations spread out
    return color, freq, angle


def generate_synthetic(seed: int, config: SyntheticConfig) -> list[Sample]:
    """Deterministic noisy images with textured elliptic class blobs.

    Regenerates (bounded retries) until every class appears in enough images
    and per-class pixel mass stays within +/-30% of uniform.
    """
    if config.height < 16 or config.width < 16:
        raise GenerationError("images must be at least 16x16")
    rmax = int(config.max_radius_frac * min(config.height, config.width))
    rmin = max(3, int(config.min_radius_frac * min(config.height, config.width)))
    if rmin >= rmax:
        raise GenerationError("blob radius range is empty; image too small for the config")

    for attempt in range(config.max_attempts):
        rng = np.random.default_rng(np.random.SeedSequence([seed, attempt]))
        samples = _generate_once(rng, config, rmin, rmax, seed)
        if _balanced(samples, config):
            return samples
    raise GenerationError(
        f"could not satisfy class-balance constraints in {config.max_attempts} attempts"
    )


def _generate_once(rng, config: SyntheticConfig, rmin: int, rmax: int, seed: int) -> list[Sample]:
    k = config.num_fg_classes
    n_blobs = config.num_images * config.blobs_per_image
    class_pool = np.tile(np.arange(1, k + 1), n_blobs // k + 1)[:n_blobs]
    rng.shuffle(class_pool)
    ys, xs = np.mgrid[0 : config.height, 0 : config.width].astype(float)

    samples = []
    for i in range(config.num_images):
        img = 0.5 + config.noise * rng.standard_normal((config.height, config.width, 3))
        mask = np.zeros((config.height, config.width), dtype=np.int64)
        blob_classes = class_pool[i * config.blobs_per_image : (i + 1) * config.blobs_per_image]
        for c in blob_classes:
            color, freq, angle = class_signature(int(c), k, config.saturation, config.brightness)
            rx = rng.integers(rmin, rmax + 1)
            ry = rng.integers(rmin, rmax + 1)
            cx = rng.integers(rx, config.width - rx + 1)
            cy = rng.integers(ry, config.height - ry + 1)
            rot = rng.uniform(0, math.pi)
            dx, dy = xs - cx, ys - cy
            u = dx * math.cos(rot) + dy * math.sin(rot)
            v = -dx * math.sin(rot) + dy * math.cos(rot)
            inside = (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
            stripes = 0.12 * np.sin(freq * (xs * math.cos(angle) + ys * math.sin(angle)))
            tex = color[None, None, :] + stripes[:, :, None]
            tex = tex + 0.03 * rng.standard_normal(tex.shape)
            img = np.where(inside[:, :, None], tex, img)
            mask = np.where(inside, int(c), mask)
        samples.append(Sample(f"syn{seed}-{i:05d}", np.clip(img, 0.0, 1.0), mask))
    return samples


def _balanced(samples: list[Sample], config: SyntheticConfig) -> bool:
    k = config.num_fg_classes
    pixel_counts = np.zeros(k + 1, dtype=np.int64)
    image_counts = np.zeros(k + 1, dtype=np.int64)
    for s in samples:
        binc = np.bincount(s.full_mask.reshape(-1), minlength=k + 1)
        pixel_counts += binc
        image_counts += (binc > 0).astype(np.int64)
    fg = pixel_counts[1:]
    if fg.sum() == 0:
        return False
    share = fg / fg.sum()
    min_images = max(1, config.num_images // 10)
    return bool((np.abs(share - 1.0 / k) <= 0.3 / k).all() and (image_counts[1:] >= min_images).all())


# ---------------------------------------------------------------------------
# on-disk corpus: manifest + binary PPM/PGM pairs


@dataclass
class LoadedCorpus:
    samples: list[Sample]
    num_classes: int  # foreground classes declared by the manifest


def _write_pnm(path: Path, magic: bytes, arr: np.ndarray) -> None:
    h, w = arr.shape[:2]
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n255\n" % (w, h))
        f.write(arr.astype(np.uint8).tobytes())


def save_dataset(samples: list[Sample], directory, num_classes: int) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [f"classes={num_classes}"]
    for s in samples:
        img_name, mask_name = f"{s.id}.ppm", f"{s.id}.pgm"
        _write_pnm(directory / img_name, b"P6", np.round(s.image * 255.0))
        _write_pnm(directory / mask_name, b"P5", s.full_mask)
        lines.append(f"{s.id} {img_name} {mask_name}")
    (directory / "manifest.txt").write_text("\n".join(lines) + "\n")


def _read_pnm(path: Path, magic: bytes) -> np.ndarray:
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise IngestionError(f"{path}: {e}") from e
    if not raw.startswith(magic):
        raise IngestionError(f"{path}: expected {magic.decode()} header")
    pos = len(magic)
    fields = []
    while len(fields) < 3:
        if pos >= len(raw):
            raise IngestionError(f"{path}: truncated header")
        ch = raw[pos : pos + 1]
        if ch == b"#":
            pos = raw.find(b"\n", pos)
            if pos < 0:
                raise IngestionError(f"{path}: unterminated comment")
            continue
        if ch.isspace():
            pos += 1
            continue
        end = pos
        while end < len(raw) and not raw[end : end + 1].isspace():
            end += 1
        token = raw[pos:end]
        if not token.isdigit():
            raise IngestionError(f"{path}: malformed header token {token!r}")
        fields.append(int(token))
        pos = end
    pos += 1  # single whitespace byte after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise IngestionError(f"{path}: only 8-bit maxval 255 is supported")
    channels = 3 if magic == b"P6" else 1
    need = w * h * channels
    body = raw[pos : pos + need]
    if len(body) != need:
        raise IngestionError(f"{path}: raster has {len(body)} bytes, expected {need}")
    arr = np.frombuffer(body, dtype=np.uint8).reshape(h, w, channels)
    return arr[:, :, 0] if channels == 1 else arr


def load_dataset(directory) -> LoadedCorpus:
    directory = Path(directory)
    manifest = directory / "manifest.txt"
    if not manifest.exists():
        raise IngestionError(f"{manifest}: missing manifest")
    lines = [ln.strip() for ln in manifest.read_text().splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("classes="):
        raise IngestionError(f"{manifest}: first line must declare classes=<N>")
    try:
        num_classes = int(lines[0].split("=", 1)[1])
    except ValueError as e:
        raise IngestionError(f"{manifest}: bad class count") from e
    samples = []
    for ln in lines[1:]:
        parts = ln.split()
        if len(parts) != 3:
            raise IngestionError(f"{manifest}: bad manifest line {ln!r}")
        sid, img_name, mask_name = parts
        img_path, mask_path = directory / img_name, directory / mask_name
        if not img_path.exists() or not mask_path.exists():
            missing = img_path if not img_path.exists() else mask_path
            raise IngestionError(f"{missing}: listed in manifest but missing")
        img = _read_pnm(img_path, b"P6").astype(np.float64) / 255.0
        mask = _read_pnm(mask_path, b"P5").astype(np.int64)
        if img.shape[:2] != mask.shape:
            raise IngestionError(f"{mask_path}: dims {mask.shape} do not match image {img.shape[:2]}")
        if mask.max(initial=0) > num_classes:
            raise IngestionError(
                f"{mask_path}: label {int(mask.max())} exceeds declared class count {num_classes}"
            )
        samples.append(Sample(sid, img, mask))
    return LoadedCorpus(samples, num_classes)
