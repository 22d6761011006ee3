"""Dataset manifest: scenes, frames, poses and split membership.

Stored as deterministic JSON (sorted keys, 2-space indent) next to the frame
files it references; all paths are relative to the manifest's directory.

Schema (version "poco-manifest-v1"):

    {
      "format": "poco-manifest-v1",
      "frame_coords": "world" | "sensor",
      "scenes": [
        {"scene_id": "...",
         "frames": [{"frame_id": "...", "path": "frames/...", "pose": [x, y, z]}]}
      ],
      "splits": {"train": ["scene_id", ...], "val": [...], "test": [...]}
    }

frame_coords states which coordinate frame the point positions inside the
referenced PCF files use: "world" (scene coordinates; the recorded pose is
the camera position in the same frame) or "sensor" (camera-centered:
positions are relative to the camera, which sits at the origin of every
frame).  Poses are always world-frame camera positions — they drive the
positive/negative/database distance rules regardless of frame_coords.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from poco.errors import ContractViolation, FormatError

FORMAT_TAG = "poco-manifest-v1"
FRAME_COORDS = ("world", "sensor")


@dataclass(frozen=True)
class FrameRecord:
    frame_id: str
    scene_id: str
    path: str                     # relative to the manifest directory
    pose_translation: tuple[float, float, float]

    @property
    def pose(self) -> np.ndarray:
        return np.asarray(self.pose_translation, dtype=np.float64)


@dataclass(frozen=True)
class SceneRecord:
    scene_id: str
    frames: tuple[FrameRecord, ...]


@dataclass
class DatasetManifest:
    scenes: tuple[SceneRecord, ...]
    splits: dict[str, tuple[str, ...]] = field(default_factory=dict)
    root: str = "."               # directory frame paths are resolved against
    frame_coords: str = "world"   # coordinate frame of PCF positions

    def validate(self) -> None:
        if self.frame_coords not in FRAME_COORDS:
            raise ContractViolation(
                f"frame_coords must be one of {FRAME_COORDS}, got {self.frame_coords!r}")
        seen: set[str] = set()
        scene_ids = set()
        for scene in self.scenes:
            if scene.scene_id in scene_ids:
                raise ContractViolation(f"duplicate scene_id {scene.scene_id!r}")
            scene_ids.add(scene.scene_id)
            for fr in scene.frames:
                if fr.frame_id in seen:
                    raise ContractViolation(f"duplicate frame_id {fr.frame_id!r}")
                if fr.scene_id != scene.scene_id:
                    raise ContractViolation(
                        f"frame {fr.frame_id!r} carries scene {fr.scene_id!r} "
                        f"inside scene {scene.scene_id!r}")
                seen.add(fr.frame_id)
        for name, ids in self.splits.items():
            unknown = set(ids) - scene_ids
            if unknown:
                raise ContractViolation(f"split {name!r} references unknown scenes {sorted(unknown)}")

    def scene_by_id(self, scene_id: str) -> SceneRecord:
        for s in self.scenes:
            if s.scene_id == scene_id:
                return s
        raise ContractViolation(f"unknown scene_id {scene_id!r}")

    def frames(self) -> list[FrameRecord]:
        return [fr for s in self.scenes for fr in s.frames]

    def frame_by_id(self, frame_id: str) -> FrameRecord:
        for fr in self.frames():
            if fr.frame_id == frame_id:
                return fr
        raise ContractViolation(f"unknown frame_id {frame_id!r}")

    def scenes_for_split(self, split: str) -> tuple[SceneRecord, ...]:
        if split not in self.splits:
            raise ContractViolation(f"unknown split {split!r}; have {sorted(self.splits)}")
        wanted = set(self.splits[split])
        return tuple(s for s in self.scenes if s.scene_id in wanted)

    def frames_for_split(self, split: str) -> list[FrameRecord]:
        return [fr for s in self.scenes_for_split(split) for fr in s.frames]

    def frame_path(self, record: FrameRecord) -> str:
        return os.path.join(self.root, record.path)


def save_manifest(path, manifest: DatasetManifest) -> None:
    manifest.validate()
    doc = {
        "format": FORMAT_TAG,
        "frame_coords": manifest.frame_coords,
        "scenes": [
            {
                "scene_id": s.scene_id,
                "frames": [
                    {
                        "frame_id": fr.frame_id,
                        "path": fr.path,
                        "pose": [float(v) for v in fr.pose_translation],
                    }
                    for fr in s.frames
                ],
            }
            for s in manifest.scenes
        ],
        "splits": {name: list(ids) for name, ids in manifest.splits.items()},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except ValueError as e:
        raise FormatError(f"manifest is not valid JSON: {path}: {e}") from e
    if not isinstance(doc, dict) or doc.get("format") != FORMAT_TAG:
        raise FormatError(f"manifest format tag missing or unsupported in {path}")
    root = os.path.dirname(os.path.abspath(str(path)))
    try:
        scenes = tuple(
            SceneRecord(
                scene_id=s["scene_id"],
                frames=tuple(
                    FrameRecord(
                        frame_id=fr["frame_id"],
                        scene_id=s["scene_id"],
                        path=fr["path"],
                        pose_translation=tuple(float(v) for v in fr["pose"]),
                    )
                    for fr in s["frames"]
                ),
            )
            for s in doc["scenes"]
        )
        splits = {name: tuple(ids) for name, ids in doc.get("splits", {}).items()}
        frame_coords = str(doc.get("frame_coords", "world"))
    except (KeyError, TypeError) as e:
        raise FormatError(f"manifest structure invalid in {path}: {e}") from e
    if frame_coords not in FRAME_COORDS:
        raise FormatError(
            f"manifest frame_coords must be one of {FRAME_COORDS} in {path}, "
            f"got {frame_coords!r}")
    manifest = DatasetManifest(scenes=scenes, splits=splits, root=root,
                               frame_coords=frame_coords)
    manifest.validate()
    if check_files:
        for fr in manifest.frames():
            full = manifest.frame_path(fr)
            if not os.path.isfile(full):
                raise FormatError(f"manifest references missing file {full}")
    return manifest
