"""MOTChallenge-format files, portable pixel images, and synthetic sequences.

Ground-truth lines are ``frame,id,left,top,w,h,conf,class,visibility``;
result lines are ``frame,id,left,top,w,h,score,-1,-1,-1``. The synthetic
generator renders colored rectangles with constant velocities on a noisy
background and writes a complete sequence directory (img1/, gt/, seqinfo).
"""

from __future__ import annotations

import colorsys
import configparser
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .boxes import inflate_degenerate

log = logging.getLogger(__name__)


class ParseError(ValueError):
    def __init__(self, path, line_no: int, reason: str):
        super().__init__(f"{path}:{line_no}: {reason}")
        self.path = str(path)
        self.line_no = line_no


@dataclass
class MotBox:
    """One annotation/result row: pixel ltwh with identity and score."""

    identity: int
    ltwh: tuple[float, float, float, float]
    score: float = 1.0
    class_id: int = 1
    visibility: float = 1.0


@dataclass(frozen=True)
class SequenceDescriptor:
    """Parsed sequence-info: name, image directory, geometry, length."""

    name: str
    img_dir: str = "img1"
    frame_rate: int = 30
    seq_length: int = 1
    im_width: int = 640
    im_height: int = 640
    im_ext: str = ".ppm"
    root: Path | None = None

    def __post_init__(self) -> None:
        if self.seq_length < 1:
            raise ValueError(f"sequence {self.name}: frame count must be >= 1")
        if self.im_width <= 0 or self.im_height <= 0:
            raise ValueError(f"sequence {self.name}: image size must be positive")

    def image_path(self, frame: int) -> Path:
        if self.root is None:
            raise ValueError("descriptor has no root directory")
        return self.root / self.img_dir / f"{frame:06d}{self.im_ext}"


def _num(field_text: str, path, line_no: int, name: str) -> float:
    try:
        return float(field_text)
    except ValueError:
        raise ParseError(path, line_no, f"non-numeric {name} field {field_text!r}") from None


def _parse_lines(path, min_fields: int):
    text = Path(path).read_text()
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        fields = line.split(",")
        if len(fields) < min_fields:
            raise ParseError(path, line_no, f"expected >= {min_fields} comma-separated fields")
        yield line_no, fields


def parse_gt(path) -> dict[int, list[MotBox]]:
    """Ground-truth file -> {frame -> boxes}, filtered to considered pedestrians.

    Rows with consider-flag 0 or a class other than 1 are dropped; degenerate
    zero-size boxes are inflated to keep downstream overlap finite.
    """
    frames: dict[int, list[MotBox]] = {}
    for line_no, f in _parse_lines(path, 9):
        frame = _num(f[0], path, line_no, "frame")
        ident = _num(f[1], path, line_no, "id")
        if frame < 1 or frame != int(frame):
            raise ParseError(path, line_no, f"frame {f[0]!r} must be a positive integer")
        if ident < 1 or ident != int(ident):
            raise ParseError(path, line_no, f"id {f[1]!r} must be a positive integer")
        l, t = (_num(f[i], path, line_no, n) for i, n in ((2, "left"), (3, "top")))
        w, h = (_num(f[i], path, line_no, n) for i, n in ((4, "width"), (5, "height")))
        conf = _num(f[6], path, line_no, "conf")
        class_id = int(_num(f[7], path, line_no, "class"))
        vis = _num(f[8], path, line_no, "visibility")
        if int(conf) == 0 or class_id != 1:
            continue
        w, h = inflate_degenerate(w, h)
        frames.setdefault(int(frame), []).append(
            MotBox(identity=int(ident), ltwh=(l, t, w, h), score=1.0, class_id=class_id,
                   visibility=vis)
        )
    return frames


def parse_results(path) -> dict[int, list[MotBox]]:
    """Results file -> {frame -> boxes}; column 7 is the confidence score."""
    frames: dict[int, list[MotBox]] = {}
    for line_no, f in _parse_lines(path, 7):
        frame = _num(f[0], path, line_no, "frame")
        ident = _num(f[1], path, line_no, "id")
        if frame < 1 or frame != int(frame):
            raise ParseError(path, line_no, f"frame {f[0]!r} must be a positive integer")
        if ident < 1 or ident != int(ident):
            raise ParseError(path, line_no, f"id {f[1]!r} must be a positive integer")
        ltwh = tuple(_num(f[i], path, line_no, "box") for i in range(2, 6))
        score = _num(f[6], path, line_no, "score")
        frames.setdefault(int(frame), []).append(MotBox(identity=int(ident), ltwh=ltwh, score=score))
    return frames


def _fmt(v: float) -> str:
    v = float(v)
    return str(int(v)) if v == int(v) else repr(v)


def write_results(path, frames: dict[int, list[MotBox]]) -> None:
    """Write result rows sorted by frame then identity; scores get 6 decimals."""
    lines = []
    for frame in sorted(frames):
        for box in sorted(frames[frame], key=lambda b: b.identity):
            if box.identity is None or box.identity < 1:
                raise ValueError(f"frame {frame}: box without a positive identity")
            l, t, w, h = box.ltwh
            lines.append(
                f"{frame},{box.identity},{_fmt(l)},{_fmt(t)},{_fmt(w)},{_fmt(h)},{box.score:.6f},-1,-1,-1"
            )
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


SEQINFO_KEYS = {"name", "imDir", "frameRate", "seqLength", "imWidth", "imHeight", "imExt"}


def parse_seqinfo(path) -> SequenceDescriptor:
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read or "Sequence" not in parser:
        raise ParseError(path, 1, "missing [Sequence] section")
    sec = parser["Sequence"]
    unknown = set(sec.keys()) - {k.lower() for k in SEQINFO_KEYS}
    if unknown:
        raise ParseError(path, 1, f"unknown sequence-info keys {sorted(unknown)}")
    return SequenceDescriptor(
        name=sec.get("name", Path(path).parent.name),
        img_dir=sec.get("imDir", "img1"),
        frame_rate=int(sec.get("frameRate", "30")),
        seq_length=int(sec["seqLength"]),
        im_width=int(sec["imWidth"]),
        im_height=int(sec["imHeight"]),
        im_ext=sec.get("imExt", ".ppm"),
        root=Path(path).parent,
    )


def write_seqinfo(path, desc: SequenceDescriptor) -> None:
    text = (
        "[Sequence]\n"
        f"name={desc.name}\n"
        f"imDir={desc.img_dir}\n"
        f"frameRate={desc.frame_rate}\n"
        f"seqLength={desc.seq_length}\n"
        f"imWidth={desc.im_width}\n"
        f"imHeight={desc.im_height}\n"
        f"imExt={desc.im_ext}\n"
    )
    Path(path).write_text(text)


# --- images ----------------------------------------------------------------


def write_ppm(path, image: np.ndarray) -> None:
    """Binary P6 portable pixmap from an HxWx3 uint8 array."""
    if image.dtype != np.uint8 or image.ndim != 3 or image.shape[2] != 3:
        raise ValueError("expected HxWx3 uint8 image")
    h, w = image.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(image.tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if not data.startswith(b"P6"):
        raise ValueError(f"{path}: not a binary P6 pixmap")
    fields: list[bytes] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while data[pos : pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    w, h, maxval = (int(f) for f in fields)
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos)
    return pixels.reshape(h, w, 3).copy()


def load_image(path) -> np.ndarray:
    """Read an image as HxWx3 uint8; PPM natively, other formats via Pillow."""
    path = Path(path)
    if path.suffix.lower() in (".ppm", ".pnm"):
        return read_ppm(path)
    try:
        from PIL import Image
    except ImportError:
        raise ValueError(f"cannot read {path.suffix} images without Pillow") from None
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8)


def save_image(path, image: np.ndarray) -> None:
    path = Path(path)
    if path.suffix.lower() in (".ppm", ".pnm"):
        write_ppm(path, image)
        return
    try:
        from PIL import Image
    except ImportError:
        raise ValueError(f"cannot write {path.suffix} images without Pillow") from None
    Image.fromarray(image).save(path)


# --- synthetic scenes -------------------------------------------------------


@dataclass(frozen=True)
class SyntheticObject:
    identity: int
    spawn: int  # first alive frame (1-based)
    despawn: int  # first frame no longer alive
    left: float
    top: float
    width: float
    height: float
    vx: float
    vy: float
    color: tuple[int, int, int]
    occlusions: tuple[tuple[int, int], ...] = ()  # [start, end) hidden windows

    def box_at(self, frame: int) -> tuple[float, float, float, float]:
        dt = frame - self.spawn
        return (self.left + self.vx * dt, self.top + self.vy * dt, self.width, self.height)

    def occluded_at(self, frame: int) -> bool:
        return any(s <= frame < e for s, e in self.occlusions)


@dataclass(frozen=True)
class SyntheticScene:
    """Deterministic rectangle world; the same seed reproduces every byte."""

    seed: int
    width: int = 640
    height: int = 640
    num_frames: int = 60
    objects: tuple[SyntheticObject, ...] = ()
    noise: int = 28
    background: int = 96

    def __post_init__(self) -> None:
        if self.num_frames < 1:
            raise ValueError("scene needs at least one frame")
        if not self.objects:
            raise ValueError("scene needs at least one object")
        for obj in self.objects:
            if not (0 <= obj.left and obj.left + obj.width <= self.width
                    and 0 <= obj.top and obj.top + obj.height <= self.height):
                raise ValueError(f"object {obj.identity} does not fit initial bounds")

    @classmethod
    def sample(cls, seed: int, width: int = 640, height: int = 640, num_frames: int = 60,
               min_objects: int = 4, max_objects: int = 8,
               occlusion_rate: float = 0.3) -> "SyntheticScene":
        """Draw a random spawn/despawn schedule with distinct colors."""
        rng = np.random.default_rng([int(seed), 2024])
        count = int(rng.integers(min_objects, max_objects + 1))
        objects = []
        for ident in range(1, count + 1):
            w = int(rng.integers(max(24, width // 16), max(48, width // 5)))
            h = int(rng.integers(max(24, height // 16), max(48, height // 5)))
            left = int(rng.integers(0, width - w))
            top = int(rng.integers(0, height - h))
            vx, vy = 0, 0
            while vx == 0 and vy == 0:
                vx = int(rng.integers(-3, 4))
                vy = int(rng.integers(-3, 4))
            if ident <= max(1, count // 2) or num_frames < 4:
                spawn = 1
            else:
                spawn = int(rng.integers(1, num_frames // 2 + 1))
            if rng.random() < 0.7 or num_frames < 4:
                despawn = num_frames + 1
            else:
                despawn = max(spawn + 1, int(rng.integers(num_frames // 2, num_frames + 1)))
            occl: tuple[tuple[int, int], ...] = ()
            if rng.random() < occlusion_rate and despawn - spawn > 12:
                start = int(rng.integers(spawn + 4, despawn - 6))
                occl = ((start, start + int(rng.integers(2, 5))),)
            hue = (ident - 1) / count
            r, g, b = colorsys.hsv_to_rgb(hue, 0.9, 0.95)
            objects.append(SyntheticObject(
                identity=ident, spawn=spawn, despawn=despawn,
                left=float(left), top=float(top), width=float(w), height=float(h),
                vx=float(vx), vy=float(vy),
                color=(int(r * 255), int(g * 255), int(b * 255)),
                occlusions=occl,
            ))
        return cls(seed=seed, width=width, height=height, num_frames=num_frames,
                   objects=tuple(objects))


def _alive_frames(obj: SyntheticObject, scene: SyntheticScene) -> range:
    """Scheduled life clipped to the frame the center first leaves the image."""
    end = min(obj.despawn, scene.num_frames + 1)
    for frame in range(obj.spawn, end):
        l, t, w, h = obj.box_at(frame)
        cx, cy = l + w / 2.0, t + h / 2.0
        if not (0 <= cx < scene.width and 0 <= cy < scene.height):
            return range(obj.spawn, frame)
    return range(obj.spawn, end)


def generate_synthetic(scene: SyntheticScene, out_dir, name: str | None = None) -> SequenceDescriptor:
    """Render the scene to a MOTChallenge-layout sequence directory."""
    name = name or f"synth-{scene.seed:04d}"
    root = Path(out_dir) / name
    (root / "img1").mkdir(parents=True, exist_ok=True)
    (root / "gt").mkdir(parents=True, exist_ok=True)

    life = {obj.identity: _alive_frames(obj, scene) for obj in scene.objects}
    rng = np.random.default_rng([int(scene.seed), 4096])
    gt_lines = []
    for frame in range(1, scene.num_frames + 1):
        img = rng.integers(
            scene.background - scene.noise, scene.background + scene.noise,
            size=(scene.height, scene.width, 3),
        ).astype(np.uint8)
        for obj in scene.objects:  # ascending identity; later ids render on top
            if frame not in life[obj.identity]:
                continue
            l, t, w, h = obj.box_at(frame)
            occluded = obj.occluded_at(frame)
            if not occluded:
                x1 = max(int(round(l)), 0)
                y1 = max(int(round(t)), 0)
                x2 = min(int(round(l + w)), scene.width)
                y2 = min(int(round(t + h)), scene.height)
                img[y1:y2, x1:x2] = obj.color
            vis = 0.0 if occluded else 1.0
            gt_lines.append(
                f"{frame},{obj.identity},{_fmt(l)},{_fmt(t)},{_fmt(w)},{_fmt(h)},1,1,{vis:.1f}"
            )
        write_ppm(root / "img1" / f"{frame:06d}.ppm", img)

    (root / "gt" / "gt.txt").write_text("\n".join(gt_lines) + "\n")
    desc = SequenceDescriptor(
        name=name, img_dir="img1", frame_rate=30, seq_length=scene.num_frames,
        im_width=scene.width, im_height=scene.height, im_ext=".ppm", root=root,
    )
    write_seqinfo(root / "seqinfo.ini", desc)
    return desc


def synth_dataset(root, seed: int, num_train: int = 12, num_eval: int = 8,
                  width: int = 640, height: int = 640, num_frames: int = 60) -> dict[str, list[SequenceDescriptor]]:
    """Default desk-scale dataset: train/ and eval/ directories of sequences."""
    root = Path(root)
    out: dict[str, list[SequenceDescriptor]] = {"train": [], "eval": []}
    for split, count, base in (("train", num_train, 0), ("eval", num_eval, 1000)):
        for k in range(count):
            scene = SyntheticScene.sample(seed + base + k, width=width, height=height,
                                          num_frames=num_frames)
            out[split].append(generate_synthetic(scene, root / split, name=f"synth-{base + k:04d}"))
    return out


def list_sequences(directory) -> list[SequenceDescriptor]:
    directory = Path(directory)
    descriptors = []
    for info in sorted(directory.glob("*/seqinfo.ini")):
        descriptors.append(parse_seqinfo(info))
    if not descriptors:
        raise FileNotFoundError(f"no sequences (seqinfo.ini) found under {directory}")
    return descriptors


# --- half split --------------------------------------------------------------


@dataclass
class SequenceHalf:
    """A renumbered half of a sequence: local frame f maps to f + frame_offset."""

    descriptor: SequenceDescriptor
    gt: dict[int, list[MotBox]]
    frame_offset: int


def half_split(desc: SequenceDescriptor, gt: dict[int, list[MotBox]]) -> tuple[SequenceHalf, SequenceHalf]:
    """Frames 1..floor(F/2) train, the rest eval; identities re-based per half."""
    total = desc.seq_length
    if total < 2:
        raise ValueError(f"sequence {desc.name}: need >= 2 frames to split")
    cut = total // 2

    def build(first: int, last: int, suffix: str) -> SequenceHalf:
        remap: dict[int, int] = {}
        frames: dict[int, list[MotBox]] = {}
        for src in range(first, last + 1):
            local = src - first + 1
            rows = []
            for box in gt.get(src, []):
                if box.identity not in remap:
                    remap[box.identity] = len(remap) + 1
                rows.append(replace(box, identity=remap[box.identity]))
            if rows:
                frames[local] = rows
        half_desc = replace(desc, name=f"{desc.name}-{suffix}", seq_length=last - first + 1)
        return SequenceHalf(descriptor=half_desc, gt=frames, frame_offset=first - 1)

    return build(1, cut, "firsthalf"), build(cut + 1, total, "secondhalf")
