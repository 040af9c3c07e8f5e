"""Monocular event-camera human motion capture.

Hybrid pipeline: asynchronous event feature trajectories + low-rate
intensity frames + per-frame joint detections -> batch pose optimization
-> event-boundary refinement, at the event stream's temporal resolution.
"""

from .body import (BodyMesh, CameraIntrinsics, SkeletonModel, SkeletonPose,
                   default_intrinsics, default_mesh, default_skeleton,
                   forward_kinematics, load_model, save_model)
from .events import (EventCameraConfig, EventSimulator, EventStream,
                     IntensityFrame, LatentImage, edi_sharpen, load_events,
                     save_events, simulate_events)
from .pipeline import (MotionOutput, PipelineConfig, export_bvh, load_config,
                       load_motion, run_capture, save_motion)
from .synth import (DetectorNoise, EvalReport, MotionClip, evaluate,
                    procrustes_align, synthesize_dataset)

__version__ = "0.1.0"

__all__ = [
    "BodyMesh", "CameraIntrinsics", "SkeletonModel", "SkeletonPose",
    "default_intrinsics", "default_mesh", "default_skeleton",
    "forward_kinematics", "load_model", "save_model",
    "EventCameraConfig", "EventSimulator", "EventStream", "IntensityFrame",
    "LatentImage", "edi_sharpen", "load_events", "save_events",
    "simulate_events",
    "MotionOutput", "PipelineConfig", "export_bvh", "load_config",
    "load_motion", "run_capture", "save_motion",
    "DetectorNoise", "EvalReport", "MotionClip", "evaluate",
    "procrustes_align", "synthesize_dataset",
]
