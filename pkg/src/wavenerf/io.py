"""PFM and PNG images, camera JSON files, run manifests."""
from __future__ import annotations

import json
import re
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import CameraView


def write_pfm(path, data):
    """Write (H, W), (1, H, W) or (3, H, W) floats as little-endian PFM."""
    a = np.asarray(data, dtype=np.float64)
    if a.ndim == 3:
        if a.shape[0] == 1:
            a = a[0]
        elif a.shape[0] == 3:
            a = np.moveaxis(a, 0, -1)
        else:
            raise ValueError(f"PFM holds 1 or 3 channels, got {a.shape[0]}")
    header = "PF" if a.ndim == 3 else "Pf"
    h, w = a.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"{header}\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(np.flipud(a), dtype="<f4").tobytes())


def read_pfm(path):
    """Read a PFM file into a channel-first float64 array (C, H, W)."""
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").rstrip()
        if header not in ("PF", "Pf"):
            raise ValueError(f"{path}: not a PFM file")
        dims = fh.readline().decode("ascii")
        match = re.match(r"^(\d+)\s+(\d+)\s*$", dims)
        if not match:
            raise ValueError(f"{path}: malformed PFM header")
        w, h = map(int, match.groups())
        scale = float(fh.readline().decode("ascii").rstrip())
        dtype = "<f4" if scale < 0 else ">f4"
        channels = 3 if header == "PF" else 1
        data = np.frombuffer(fh.read(), dtype=dtype, count=w * h * channels)
    img = np.flipud(data.reshape(h, w, channels)).astype(np.float64)
    return np.moveaxis(img, -1, 0).copy()


def srgb_to_linear(v):
    v = np.asarray(v, dtype=np.float64)
    return np.where(v <= 0.04045, v / 12.92, ((v + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(v):
    v = np.clip(np.asarray(v, dtype=np.float64), 0.0, 1.0)
    return np.where(v <= 0.0031308, v * 12.92, 1.055 * v ** (1 / 2.4) - 0.055)


def read_png(path):
    """Load an 8-bit sRGB PNG as linear floats (3, H, W) in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return np.moveaxis(srgb_to_linear(arr), -1, 0).copy()


def write_png(path, image):
    """Clamp linear (3, H, W) floats to [0, 1] and store as 8-bit sRGB."""
    srgb = linear_to_srgb(np.moveaxis(np.asarray(image), 0, -1))
    Image.fromarray(np.round(srgb * 255.0).astype(np.uint8), mode="RGB").save(path)


def quantize(image):
    """Linear image after an 8-bit sRGB round trip."""
    q = np.round(linear_to_srgb(image) * 255.0) / 255.0
    return srgb_to_linear(q)


# -- camera files -----------------------------------------------------------

def load_cameras(path):
    """Parse a scene camera file.  Returns a list of (CameraView, entry) where
    ``entry`` is the raw JSON dict (for optional keys like ``role``)."""
    path = Path(path)
    doc = json.loads(path.read_text())
    views = []
    for i, entry in enumerate(doc["views"]):
        image = None
        if entry.get("image"):
            image = read_png(path.parent / entry["image"])
        cam = CameraView(
            K=np.array(entry["K"], dtype=np.float64).reshape(3, 3),
            R=np.array(entry["R"], dtype=np.float64).reshape(3, 3),
            t=np.array(entry["t"], dtype=np.float64),
            near=float(entry["near"]),
            far=float(entry["far"]),
            image=image,
            name=entry.get("name", f"view{i:03d}"),
            height=entry.get("height"),
            width=entry.get("width"),
        )
        views.append((cam, entry))
    return views


def save_cameras(path, cams, roles=None, depth_files=None, write_images=True):
    """Write a camera file plus one PNG per camera that carries an image."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, cam in enumerate(cams):
        entry = {
            "name": cam.name,
            "K": cam.K.ravel().tolist(),
            "R": cam.R.ravel().tolist(),
            "t": cam.t.tolist(),
            "near": cam.near,
            "far": cam.far,
            "height": cam.height,
            "width": cam.width,
        }
        if cam.image is not None and write_images:
            fname = f"{cam.name}.png"
            write_png(path.parent / fname, cam.image)
            entry["image"] = fname
        if roles is not None:
            entry["role"] = roles[i]
        if depth_files is not None and depth_files[i]:
            entry["depth"] = depth_files[i]
        entries.append(entry)
    path.write_text(json.dumps({"views": entries}, indent=1))


# -- scene directories -----------------------------------------------------

ROLES = ("source", "train", "test")


def save_scene(directory, scene):
    """Camera file ``cameras.json`` with PNG images and PFM oracle depths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    cams, roles, depths = [], [], []
    for role, group in zip(ROLES, (scene.sources, scene.train_targets, scene.test_targets)):
        for cam in group:
            cams.append(cam)
            roles.append(role)
            if cam.name in scene.depths:
                fname = f"{cam.name}.depth.pfm"
                write_pfm(directory / fname, scene.depths[cam.name])
                depths.append(fname)
            else:
                depths.append(None)
    path = directory / "cameras.json"
    save_cameras(path, cams, roles, depths)
    return path


def load_scene(path):
    """Scene from a camera file.  Views without a ``role`` are sources;
    ``train`` views need a ``depth`` PFM for depth supervision."""
    from .scene import SyntheticScene

    path = Path(path)
    scene = SyntheticScene(objects=[])
    groups = dict(zip(ROLES, (scene.sources, scene.train_targets, scene.test_targets)))
    for cam, entry in load_cameras(path):
        role = entry.get("role", "source")
        if role not in groups:
            raise ValueError(f"{path}: view {cam.name} has unknown role {role!r}")
        if role != "test" and cam.image is None:
            raise ValueError(f"{path}: {role} view {cam.name} has no image")
        groups[role].append(cam)
        if entry.get("depth"):
            scene.depths[cam.name] = read_pfm(path.parent / entry["depth"])[0]
        elif role == "train":
            raise ValueError(f"{path}: training view {cam.name} has no depth map")
    if len(scene.sources) < 2:
        raise ValueError(f"{path}: need at least two source views")
    return scene


def warn(msg):
    print(f"warning: {msg}", file=sys.stderr)
