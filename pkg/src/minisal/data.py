"""File formats, dataset layout, resolution degradation and the synthetic
aerial-clip generator.

On-disk corpus layout (one directory per clip, indices contiguous from 0):

    clip0000/
      frames/%06d.ppm        8-bit binary PPM (P6), loaded to floats in [0,1]
      density/%06d.skdm      ground-truth fixation density, raw f32 map
      fixations/%06d.txt     one "x y" integer pair per line
      teacher_s/%06d.skdm    spatial teacher soft-label map
      teacher_t/%06d.skdm    temporal teacher soft-label map (all but last frame)

Map files ("SKDM") and weight files ("SKDW") are little-endian binary with
bit-exact round-trips; loaders validate magic/version and report the byte
offset of any truncation.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .tensor import ShapeError, Tensor, resize_area
from .networks import WeightStore

MAP_MAGIC = b"SKDM"
WEIGHT_MAGIC = b"SKDW"
FORMAT_VERSION = 1


class FormatError(ValueError):
    """Bad magic, truncation or non-finite payload in a binary file."""


# ---- resolution degradation --------------------------------------------------

def degrade(x, target):
    """Area-average resample of a map or frame down to target x target.

    Applied identically to frames, densities and teacher maps; preserves the
    global mean exactly when the extents divide evenly.
    """
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float32)
    h, w = arr.shape[-2], arr.shape[-1]
    if target > h or target > w:
        raise ShapeError(f"degrade target {target} exceeds source extents {h}x{w}")
    if (h, w) == (target, target):
        return x if isinstance(x, Tensor) else arr
    out = resize_area(Tensor(arr), target, target)
    return out if isinstance(x, Tensor) else out.data


# ---- SKDM map files ----------------------------------------------------------

def save_map(path, arr):
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim != 2:
        raise ShapeError(f"map files hold 2-d maps, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise FormatError("refusing to write non-finite map values")
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(MAP_MAGIC)
        f.write(struct.pack("<III", FORMAT_VERSION, h, w))
        f.write(arr.astype("<f4").tobytes())


def load_map(path):
    blob = Path(path).read_bytes()
    if len(blob) < 16:
        raise FormatError(f"{path}: truncated header at byte {len(blob)} (need 16)")
    if blob[:4] != MAP_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r} at byte 0")
    version, h, w = struct.unpack("<III", blob[4:16])
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version} at byte 4")
    need = 16 + 4 * h * w
    if len(blob) != need:
        raise FormatError(f"{path}: payload truncated at byte {len(blob)} (need {need})")
    arr = np.frombuffer(blob, dtype="<f4", offset=16).reshape(h, w).astype(np.float32)
    if not np.isfinite(arr).all():
        raise FormatError(f"{path}: non-finite values in payload starting at byte 16")
    return arr


# ---- SKDW weight files -------------------------------------------------------

def save_weights(path, store):
    with open(path, "wb") as f:
        f.write(WEIGHT_MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(store)))
        for name in store:
            t = store[name]
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<B", t.ndim))
            f.write(struct.pack(f"<{t.ndim}I", *t.shape))
            f.write(t.data.astype("<f4").tobytes())


def load_weights(path, requires_grad=True):
    blob = Path(path).read_bytes()
    if len(blob) < 12:
        raise FormatError(f"{path}: truncated header at byte {len(blob)} (need 12)")
    if blob[:4] != WEIGHT_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r} at byte 0")
    version, count = struct.unpack("<II", blob[4:12])
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version} at byte 4")
    store = WeightStore()
    off = 12
    for _ in range(count):
        if off + 2 > len(blob):
            raise FormatError(f"{path}: truncated entry header at byte {off}")
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        if off + 1 > len(blob):
            raise FormatError(f"{path}: truncated entry {name!r} at byte {off}")
        ndim = blob[off]
        off += 1
        if off + 4 * ndim > len(blob):
            raise FormatError(f"{path}: truncated extents of {name!r} at byte {off}")
        extents = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        nbytes = 4 * int(np.prod(extents))
        if off + nbytes > len(blob):
            raise FormatError(f"{path}: truncated payload of {name!r} at byte {off}")
        arr = np.frombuffer(blob, dtype="<f4", count=int(np.prod(extents)), offset=off)
        off += nbytes
        if not np.isfinite(arr).all():
            raise FormatError(f"{path}: non-finite values in {name!r}")
        store[name] = Tensor(arr.reshape(extents).astype(np.float32),
                             requires_grad=requires_grad)
    if off != len(blob):
        raise FormatError(f"{path}: {len(blob) - off} trailing bytes at byte {off}")
    return store


# ---- PPM frames --------------------------------------------------------------

def save_frame(path, arr):
    """Write a (3,H,W) float frame in [0,1] as binary PPM (P6)."""
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ShapeError(f"frames are (3,H,W), got {arr.shape}")
    h, w = arr.shape[1], arr.shape[2]
    rgb = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(rgb.transpose(1, 2, 0).tobytes())


def load_frame(path):
    blob = Path(path).read_bytes()
    if not blob.startswith(b"P6"):
        raise FormatError(f"{path}: not a binary PPM (magic {blob[:2]!r})")
    # header: P6, whitespace-separated width height maxval, one whitespace, raster
    fields = []
    i = 2
    while len(fields) < 3:
        while i < len(blob) and blob[i:i + 1].isspace():
            i += 1
        if i < len(blob) and blob[i:i + 1] == b"#":
            while i < len(blob) and blob[i] != 0x0A:
                i += 1
            continue
        j = i
        while j < len(blob) and not blob[j:j + 1].isspace():
            j += 1
        if j == i:
            raise FormatError(f"{path}: truncated PPM header at byte {i}")
        fields.append(int(blob[i:j]))
        i = j
    i += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise FormatError(f"{path}: unsupported maxval {maxval}")
    need = i + 3 * h * w
    if len(blob) < need:
        raise FormatError(f"{path}: raster truncated at byte {len(blob)} (need {need})")
    raster = np.frombuffer(blob, dtype=np.uint8, count=3 * h * w, offset=i)
    return (raster.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float32) / 255.0)


def save_fixations(path, fixations):
    with open(path, "w") as f:
        for x, y in fixations:
            f.write(f"{int(x)} {int(y)}\n")


def load_fixations(path):
    out = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        x, y = line.split()
        out.append((int(x), int(y)))
    return out


# ---- clip directories --------------------------------------------------------

@dataclass
class Clip:
    """All frames of one clip, loaded into memory."""
    frames: list          # (3,H,W) float arrays
    densities: list       # (H,W)
    fixations: list       # list of (x,y) lists
    teacher_s: list       # (H,W)
    teacher_t: list       # (H,W); length len(frames)-1


def save_clip(clip_dir, clip):
    clip_dir = Path(clip_dir)
    for sub in ("frames", "density", "fixations", "teacher_s", "teacher_t"):
        (clip_dir / sub).mkdir(parents=True, exist_ok=True)
    for n, frame in enumerate(clip.frames):
        save_frame(clip_dir / "frames" / f"{n:06d}.ppm", frame)
        save_map(clip_dir / "density" / f"{n:06d}.skdm", clip.densities[n])
        save_fixations(clip_dir / "fixations" / f"{n:06d}.txt", clip.fixations[n])
        save_map(clip_dir / "teacher_s" / f"{n:06d}.skdm", clip.teacher_s[n])
        if n < len(clip.frames) - 1:
            save_map(clip_dir / "teacher_t" / f"{n:06d}.skdm", clip.teacher_t[n])


def load_clip(clip_dir):
    clip_dir = Path(clip_dir)
    frame_files = sorted((clip_dir / "frames").glob("*.ppm"))
    if len(frame_files) < 2:
        raise FormatError(f"{clip_dir}: clip needs >= 2 frames, found {len(frame_files)}")
    for n, f in enumerate(frame_files):
        if f.stem != f"{n:06d}":
            raise FormatError(f"{clip_dir}: non-contiguous frame index at {f.name}")
    frames, densities, fixations, ts, tt = [], [], [], [], []
    for n in range(len(frame_files)):
        frames.append(load_frame(clip_dir / "frames" / f"{n:06d}.ppm"))
        densities.append(load_map(clip_dir / "density" / f"{n:06d}.skdm"))
        fixations.append(load_fixations(clip_dir / "fixations" / f"{n:06d}.txt"))
        ts.append(load_map(clip_dir / "teacher_s" / f"{n:06d}.skdm"))
        if n < len(frame_files) - 1:
            p = clip_dir / "teacher_t" / f"{n:06d}.skdm"
            if not p.exists():
                raise FormatError(f"{clip_dir}: missing temporal teacher map for frame {n}")
            tt.append(load_map(p))
    return Clip(frames, densities, fixations, ts, tt)


def load_corpus(root):
    root = Path(root)
    dirs = sorted(d for d in root.iterdir() if d.is_dir() and d.name.startswith("clip"))
    if not dirs:
        raise FormatError(f"{root}: no clip directories found")
    return [load_clip(d) for d in dirs]


def corpus_meta(root):
    p = Path(root) / "corpus.json"
    if p.exists():
        return json.loads(p.read_text())
    return {}


# ---- synthetic corpus generator ----------------------------------------------

def _splat(h, w, cx, cy, sigma):
    yy, xx = np.mgrid[0:h, 0:w]
    return np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2.0 * sigma ** 2)).astype(np.float32)


def _background(res, rng):
    """Procedural aerial-like texture: smooth low-frequency field plus grain."""
    coarse = rng.random((max(res // 8, 2), max(res // 8, 2))).astype(np.float32)
    smooth = resize_area(Tensor(coarse), res, res).data
    grain = rng.random((res, res)).astype(np.float32)
    base = 0.75 * smooth + 0.25 * grain
    tint = 0.8 + 0.2 * rng.random(3).astype(np.float32)
    return base[None, :, :] * tint[:, None, None] * 0.5


def generate_clip(resolution, n_frames, rng):
    res = resolution
    sigma = res / 32.0
    n_blobs = int(rng.integers(1, 4))
    pos = rng.uniform(res * 0.15, res * 0.85, size=(n_blobs, 2))      # (x, y)
    vel = rng.uniform(-res / 24.0, res / 24.0, size=(n_blobs, 2))
    drift = rng.uniform(-res / 48.0, res / 48.0, size=2)              # camera motion
    brightness = rng.uniform(0.7, 1.0, size=n_blobs)
    blob_sigma = rng.uniform(sigma, 2.0 * sigma, size=n_blobs)
    # the emulated teacher is deliberately imperfect: a moving spurious bump
    # contaminates the soft labels, so they are informative but cannot stand
    # in for the ground truth on their own
    spur_pos = rng.uniform(res * 0.15, res * 0.85, size=2)
    spur_vel = rng.uniform(-res / 24.0, res / 24.0, size=2)

    # one large texture cropped with a moving offset simulates global drift
    margin = int(np.ceil(np.abs(drift).max() * n_frames)) + 1
    big = _background(res + 2 * margin, rng)

    frames, densities, fixsets, t_s, t_t = [], [], [], [], []
    speeds = np.linalg.norm(vel - drift, axis=1)
    for n in range(n_frames):
        ox = int(round(margin + drift[0] * n))
        oy = int(round(margin + drift[1] * n))
        frame = big[:, oy:oy + res, ox:ox + res].copy()
        centers = pos + vel * n
        centers[:, 0] = np.clip(centers[:, 0], 1, res - 2)
        centers[:, 1] = np.clip(centers[:, 1], 1, res - 2)
        density = np.zeros((res, res), dtype=np.float32)
        motion = np.zeros((res, res), dtype=np.float32)
        for b in range(n_blobs):
            bump = _splat(res, res, centers[b, 0], centers[b, 1], blob_sigma[b])
            frame += brightness[b] * bump[None, :, :]
            splat = _splat(res, res, centers[b, 0], centers[b, 1], sigma)
            density = np.maximum(density, splat)
            motion += (0.2 + speeds[b]) * splat
        frame = np.clip(frame, 0.0, 1.0)
        density /= density.max()

        n_fix = int(rng.integers(5, 15))
        # square the density before sampling so fixations cluster tightly at
        # the peaks; the raw density has tails wide enough to drag the
        # self-ranking AUC of the ground truth below its expected level
        p = density.reshape(-1).astype(np.float64) ** 2
        p /= p.sum()
        idx = rng.choice(res * res, size=n_fix, p=p)
        fixations = [(int(i % res), int(i // res)) for i in idx]

        frames.append(frame)
        densities.append(density)
        fixsets.append(fixations)
        sc = spur_pos + spur_vel * n
        spur = _splat(res, res, np.clip(sc[0], 1, res - 2),
                      np.clip(sc[1], 1, res - 2), 1.5 * sigma)
        ts = gaussian_filter(density, sigma=2.0)
        t_s.append((ts + 0.6 * ts.max() * spur).astype(np.float32))
        if n < n_frames - 1:
            tt = gaussian_filter(motion, sigma=2.0)
            t_t.append((tt + 0.6 * tt.max() * spur).astype(np.float32))
    return Clip(frames, densities, fixsets, t_s, t_t)


def generate_synthetic_corpus(out_dir, n_clips, frames_per_clip, resolution, seed):
    """Render a deterministic corpus of aerial-like clips with moving bright
    blobs, fixation densities and emulated teacher soft labels."""
    if n_clips < 1 or frames_per_clip < 2:
        raise ValueError("need n_clips >= 1 and frames_per_clip >= 2")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for c in range(n_clips):
        rng = np.random.default_rng([seed, c])
        clip = generate_clip(resolution, frames_per_clip, rng)
        save_clip(out_dir / f"clip{c:04d}", clip)
    (out_dir / "corpus.json").write_text(json.dumps({
        "n_clips": n_clips,
        "frames_per_clip": frames_per_clip,
        "resolution": resolution,
        "seed": seed,
    }, indent=2) + "\n")
    return out_dir
