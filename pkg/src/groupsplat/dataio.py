"""Persistence: splat PLY + classifier sidecar, images, ID masks, camera
metadata, point clouds, edit scripts, and training logs.

The scene PLY is binary little-endian float32 with the de-facto splat vertex
layout (x y z, nx ny nz, f_dc_*, f_rest_*, opacity, scale_*, rot_*) extended
by the 16 identity fields f_id_0..f_id_15. The classifier rides in a JSON
sidecar at ``<scene>.ply.classifier.json``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .editor import EditOperation, EditScript
from .scene import IDENTITY_DIM, Camera, Classifier, Scene, sh_basis_size

_PLY_MAGIC = b"ply"


# ---------------------------------------------------------------------------
# scene PLY + classifier sidecar

def _vertex_fields(basis: int) -> List[str]:
    names = ["x", "y", "z", "nx", "ny", "nz"]
    names += [f"f_dc_{i}" for i in range(3)]
    names += [f"f_rest_{i}" for i in range(3 * (basis - 1))]
    names += ["opacity"]
    names += [f"scale_{i}" for i in range(3)]
    names += [f"rot_{i}" for i in range(4)]
    names += [f"f_id_{i}" for i in range(IDENTITY_DIM)]
    return names


def classifier_sidecar_path(path: str) -> str:
    return path + ".classifier.json"


def save_scene(scene: Scene, path: str) -> None:
    """Write the scene as binary little-endian float32 PLY plus the
    classifier JSON sidecar."""
    n = len(scene)
    basis = sh_basis_size(scene.sh_degree)
    names = _vertex_fields(basis)
    data = np.zeros((n, len(names)), dtype="<f4")
    data[:, 0:3] = scene.positions
    # normals stay zero
    data[:, 6:9] = scene.sh[:, 0, :]
    # higher-order SH stored channel-major: (basis-1 values of R, then G, B)
    rest = scene.sh[:, 1:, :].transpose(0, 2, 1).reshape(n, 3 * (basis - 1))
    data[:, 9:9 + 3 * (basis - 1)] = rest
    col = 9 + 3 * (basis - 1)
    data[:, col] = scene.opacity_logits
    data[:, col + 1:col + 4] = scene.log_scales
    data[:, col + 4:col + 8] = scene.rotations
    data[:, col + 8:col + 8 + IDENTITY_DIM] = scene.identities

    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {name}" for name in names]
    header += ["end_header"]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(np.ascontiguousarray(data).tobytes())

    classifier = {
        "channels": scene.classifier.channels,
        "weights": scene.classifier.weights.tolist(),  # row-major 16 x C
        "bias": scene.classifier.bias.tolist(),
    }
    with open(classifier_sidecar_path(path), "w", encoding="ascii") as fh:
        json.dump(classifier, fh, sort_keys=True, indent=1)
        fh.write("\n")


def _parse_ply_header(fh) -> Tuple[int, List[Tuple[str, str]]]:
    line = fh.readline().strip()
    if line != _PLY_MAGIC:
        raise ValueError("not a PLY file")
    count = None
    props: List[Tuple[str, str]] = []
    fmt = None
    while True:
        line = fh.readline()
        if not line:
            raise ValueError("unterminated PLY header")
        parts = line.decode("ascii").strip().split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            if parts[1] != "vertex":
                raise ValueError(f"unsupported PLY element '{parts[1]}'")
            count = int(parts[2])
        elif parts[0] == "property":
            props.append((parts[1], parts[2]))
        elif parts[0] == "end_header":
            break
    if fmt != "binary_little_endian":
        raise ValueError("PLY must be binary little-endian")
    if count is None:
        raise ValueError("PLY missing vertex element")
    return count, props


_PLY_DTYPE = {"float": "<f4", "float32": "<f4", "double": "<f8",
              "uchar": "u1", "uint8": "u1", "int": "<i4", "uint": "<u4",
              "ushort": "<u2", "short": "<i2"}


def _read_ply_vertices(path: str):
    with open(path, "rb") as fh:
        count, props = _parse_ply_header(fh)
        dtype = np.dtype([(name, _PLY_DTYPE[kind]) for kind, name in props])
        raw = fh.read(count * dtype.itemsize)
    if len(raw) < count * dtype.itemsize:
        raise ValueError("PLY vertex data truncated")
    return np.frombuffer(raw, dtype=dtype, count=count), [p[1] for p in props]


def load_scene(path: str) -> Scene:
    """Load a splat PLY and its classifier sidecar."""
    verts, names = _read_ply_vertices(path)
    n = verts.shape[0]
    have = set(names)
    id_fields = [f"f_id_{i}" for i in range(IDENTITY_DIM)]
    if not all(f in have for f in id_fields):
        raise ValueError("not a grouped scene")
    rest_count = sum(1 for name in names if name.startswith("f_rest_"))
    if rest_count % 3 != 0:
        raise ValueError("malformed f_rest field count")
    basis = rest_count // 3 + 1
    degree = int(round(np.sqrt(basis))) - 1
    if sh_basis_size(degree) != basis:
        raise ValueError("f_rest count does not correspond to an SH degree")

    def cols(prefix: str, k: int) -> np.ndarray:
        return np.stack([verts[f"{prefix}{i}"] for i in range(k)], axis=1)

    positions = np.stack([verts["x"], verts["y"], verts["z"]], axis=1)
    sh = np.zeros((n, basis, 3), dtype=np.float64)
    sh[:, 0, :] = cols("f_dc_", 3)
    if basis > 1:
        rest = cols("f_rest_", 3 * (basis - 1))
        sh[:, 1:, :] = rest.reshape(n, 3, basis - 1).transpose(0, 2, 1)

    sidecar = classifier_sidecar_path(path)
    if not os.path.exists(sidecar):
        raise ValueError(f"missing classifier sidecar: {sidecar}")
    with open(sidecar, "r", encoding="ascii") as fh:
        blob = json.load(fh)
    classifier = Classifier(np.asarray(blob["weights"], dtype=np.float64),
                            np.asarray(blob["bias"], dtype=np.float64))
    if classifier.channels != int(blob["channels"]):
        raise ValueError("classifier sidecar channel count mismatch")

    return Scene(
        positions=positions,
        log_scales=cols("scale_", 3),
        rotations=cols("rot_", 4),
        opacity_logits=np.asarray(verts["opacity"], dtype=np.float64),
        sh=sh,
        identities=cols("f_id_", IDENTITY_DIM),
        classifier=classifier,
        sh_degree=degree,
    )


# ---------------------------------------------------------------------------
# point clouds (scene initialization input)

def save_points(path: str, points: np.ndarray, colors: np.ndarray) -> None:
    """xyz float32 + rgb uint8 PLY (SfM-style seed cloud)."""
    points = np.asarray(points, dtype=np.float64)
    colors = np.asarray(colors, dtype=np.float64)
    n = points.shape[0]
    dtype = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                      ("red", "u1"), ("green", "u1"), ("blue", "u1")])
    data = np.zeros(n, dtype=dtype)
    data["x"], data["y"], data["z"] = points.T.astype("<f4")
    rgb = np.clip(np.rint(colors * 255.0), 0, 255).astype("u1")
    data["red"], data["green"], data["blue"] = rgb.T
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}",
              "property float x", "property float y", "property float z",
              "property uchar red", "property uchar green", "property uchar blue",
              "end_header"]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(data.tobytes())


def load_points(path: str) -> Tuple[np.ndarray, np.ndarray]:
    """Load an xyz(+rgb) PLY; colors default to mid-gray when absent."""
    verts, names = _read_ply_vertices(path)
    points = np.stack([verts["x"], verts["y"], verts["z"]], axis=1).astype(np.float64)
    if {"red", "green", "blue"} <= set(names):
        colors = np.stack([verts["red"], verts["green"], verts["blue"]],
                          axis=1).astype(np.float64) / 255.0
    else:
        colors = np.full((points.shape[0], 3), 0.5)
    return points, colors


# ---------------------------------------------------------------------------
# images and masks

def save_image(path: str, image: np.ndarray) -> None:
    """float [0,1] (H, W, 3) -> 8-bit RGB PNG."""
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def load_image(path: str) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def save_mask(path: str, mask: np.ndarray) -> None:
    """Integer ID map -> 16-bit grayscale PNG."""
    arr = np.asarray(mask)
    if arr.min() < 0 or arr.max() > np.iinfo(np.uint16).max:
        raise ValueError("mask ids must fit in uint16")
    Image.fromarray(arr.astype(np.uint16)).save(path)


def load_mask(path: str) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im)
    return arr.astype(np.uint16)


# ---------------------------------------------------------------------------
# datasets: cameras.json + images/ + masks/

@dataclass
class ViewRecord:
    camera: Camera
    image_path: str
    mask_path: Optional[str]


@dataclass
class DatasetMeta:
    views: List[ViewRecord]
    num_ids: int


def _camera_entry(camera: Camera, image_rel: str, mask_rel: Optional[str]) -> dict:
    return {
        "image": image_rel,
        "mask": mask_rel,
        "width": camera.width,
        "height": camera.height,
        "fx": camera.fx,
        "fy": camera.fy,
        "cx": camera.cx,
        "cy": camera.cy,
        "world_to_camera": [float(v) for v in camera.world_to_camera.reshape(16)],
    }


def save_dataset(out_dir: str, cameras: Sequence[Camera],
                 images: Sequence[np.ndarray],
                 masks: Optional[Sequence[np.ndarray]] = None,
                 raw_masks: Optional[Sequence[np.ndarray]] = None,
                 points: Optional[np.ndarray] = None,
                 point_colors: Optional[np.ndarray] = None) -> None:
    """Write cameras.json, images/, masks/ (id maps), optional masks_raw/
    (per-view unassociated labels), and points.ply."""
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    entries = []
    if masks is not None:
        os.makedirs(os.path.join(out_dir, "masks"), exist_ok=True)
    if raw_masks is not None:
        os.makedirs(os.path.join(out_dir, "masks_raw"), exist_ok=True)
    for i, (camera, image) in enumerate(zip(cameras, images)):
        image_rel = f"images/{i:03d}.png"
        save_image(os.path.join(out_dir, image_rel), image)
        mask_rel = None
        if masks is not None:
            mask_rel = f"masks/{i:03d}.png"
            save_mask(os.path.join(out_dir, mask_rel), masks[i])
        if raw_masks is not None:
            save_mask(os.path.join(out_dir, f"masks_raw/{i:03d}.png"), raw_masks[i])
        entries.append(_camera_entry(camera, image_rel, mask_rel))
    with open(os.path.join(out_dir, "cameras.json"), "w", encoding="ascii") as fh:
        json.dump(entries, fh, sort_keys=True, indent=1)
        fh.write("\n")
    if points is not None:
        colors = point_colors if point_colors is not None \
            else np.full((len(points), 3), 0.5)
        save_points(os.path.join(out_dir, "points.ply"), points, colors)


def load_cameras(path: str) -> List[dict]:
    with open(path, "r", encoding="ascii") as fh:
        entries = json.load(fh)
    if not isinstance(entries, list):
        raise ValueError("cameras.json must contain a list of views")
    return entries


def load_dataset(data_dir: str, with_masks: bool = True
                 ) -> Tuple[DatasetMeta, List[np.ndarray], List[Optional[np.ndarray]]]:
    """Read a dataset directory. Returns (meta, images, masks); each mask is
    None when absent or when ``with_masks`` is off. num_ids is the global max
    id over the loaded masks (0 when running without masks)."""
    entries = load_cameras(os.path.join(data_dir, "cameras.json"))
    views: List[ViewRecord] = []
    images: List[np.ndarray] = []
    masks: List[Optional[np.ndarray]] = []
    num_ids = 0
    for entry in entries:
        camera = Camera(
            width=int(entry["width"]), height=int(entry["height"]),
            fx=float(entry["fx"]), fy=float(entry["fy"]),
            cx=float(entry["cx"]), cy=float(entry["cy"]),
            world_to_camera=np.asarray(entry["world_to_camera"],
                                       dtype=np.float64).reshape(4, 4),
            near=float(entry.get("near", 0.01)),
            far=float(entry.get("far", 1.0e6)),
        )
        image_path = os.path.join(data_dir, entry["image"])
        image = load_image(image_path)
        if image.shape[:2] != (camera.height, camera.width):
            raise ValueError(f"image size mismatch for {entry['image']}")
        mask = None
        mask_path = None
        if with_masks and entry.get("mask"):
            mask_path = os.path.join(data_dir, entry["mask"])
            mask = load_mask(mask_path)
            if mask.shape != (camera.height, camera.width):
                raise ValueError(f"mask size mismatch for {entry['mask']}")
            num_ids = max(num_ids, int(mask.max()))
        views.append(ViewRecord(camera, image_path, mask_path))
        images.append(image)
        masks.append(mask)
    return DatasetMeta(views=views, num_ids=num_ids), images, masks


# ---------------------------------------------------------------------------
# edit scripts and training logs

def load_edit_script(path: str) -> EditScript:
    """JSON of the form {"operations": [{"op": "remove", "id": 2, ...}, ...]}."""
    with open(path, "r", encoding="ascii") as fh:
        blob = json.load(fh)
    ops = blob.get("operations")
    if not isinstance(ops, list):
        raise ValueError("edit script must contain an 'operations' list")
    operations = []
    for op in ops:
        if "op" not in op:
            raise ValueError("each edit operation needs an 'op' field")
        params = {k: v for k, v in op.items() if k != "op"}
        operations.append(EditOperation(kind=op["op"], params=params))
    return EditScript(operations=operations)


def write_training_log(path: str, records: Sequence[dict]) -> None:
    """Line-delimited JSON, one record per line."""
    with open(path, "w", encoding="ascii") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True))
            fh.write("\n")
