"""From OpenPose JSON to a stored clip tensor.

Builds a short two-person clip in memory, runs it through assembly, the
quality gate and coordinate normalization, and round-trips it through an
STGT file.
"""
import json
import tempfile
from pathlib import Path

import numpy as np

from stgcn.data import (assemble_clip, import_tensor, export_tensor, joint_recognition_rate,
                        normalize_coordinates, parse_openpose_frame, quality_filter)

rng = np.random.default_rng(0)


def fake_person(conf, missing=0):
    kp = np.column_stack([rng.uniform(0, 340, 18), rng.uniform(0, 256, 18), np.full(18, conf)])
    kp[18 - missing:] = 0
    return {"pose_keypoints_2d": kp.ravel().round(2).tolist()}


# 12 source frames; the weaker detection ends up in slot 1
frames = [parse_openpose_frame(json.dumps({"people": [fake_person(0.4, missing=4), fake_person(0.9)]}))
          for _ in range(12)]
clip = assemble_clip(frames, "demo", label=0)
print("tensor", clip.tensor.shape, "from", clip.source_frame_count, "frames")
print("recognition rate %.3f ->" % joint_recognition_rate(clip), quality_filter(clip))

clip = normalize_coordinates(clip)
with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "demo.stgt"
    export_tensor(clip, path)
    back = import_tensor(path)
    print(path.stat().st_size, "bytes; round trip exact:", back.tensor.tobytes() == clip.tensor.tobytes())
