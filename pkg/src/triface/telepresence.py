"""Two-peer telepresence at desk scale: blendshape wire protocol, generic
driver rig, synchronized session simulator with pose fusion, and stereoscopic
avatar rendering through the reenactment model.

Wire packet ("VXPF", little-endian, 310 bytes)
----------------------------------------------
    magic      4s  = b"VXPF"
    version    u16 = 1
    timestamp  u64 microseconds
    blendshapes 63 * f32 in [0, 1] (indices 56..62 reserved for tongue)
    gaze        4 * f32 radians (yaw, pitch per eye)
    head pose   7 * f32 (quaternion wxyz, translation xyz)

Per tick each peer sends exactly one packet; avatar photos are exchanged
once at session start. The receiving side maps blendshapes to the synthetic
rig's expression parameters, renders the canonical frontal CG driver (head
pose is never applied to the rig), fuses the remote subject's head pose with
the local viewer's head pose into the render camera, and renders a stereo
pair through the one-shot reenactor (plus optional 2x super-resolution).
"""

from __future__ import annotations

import logging
import struct
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import InvalidArgumentError, InvalidStateError, ProtocolError
from .geometry import Camera, RigidPose, compose, fuse_head_camera, stereo_pair
from .synthdata import (
    CANONICAL_FOCAL,
    EXP_DIM,
    EXP_PARAM_NAMES,
    ID_DIM,
    build_scene,
    canonical_camera,
    gt_render,
)

logger = logging.getLogger(__name__)

WIRE_MAGIC = b"VXPF"
WIRE_VERSION = 1
PACKET_SIZE = 4 + 2 + 8 + 63 * 4 + 4 * 4 + 7 * 4  # 310 bytes
N_BLENDSHAPES = 63
TONGUE_CHANNELS = tuple(range(56, 63))

# Named channel ordering. Only the channels the synthetic rig can express
# map to expression parameters; the rest are accepted and ignored.
_CORE_CHANNELS = (
    "browInnerUp", "browDownLeft", "browDownRight",
    "browOuterUpLeft", "browOuterUpRight",
    "cheekPuff", "cheekSquintLeft", "cheekSquintRight",
    "eyeBlinkLeft", "eyeBlinkRight", "eyeSquintLeft", "eyeSquintRight",
    "eyeWideLeft", "eyeWideRight",
    "jawForward", "jawLeft", "jawRight", "jawOpen",
    "mouthClose", "mouthFunnel", "mouthPucker",
    "mouthLeft", "mouthRight",
    "mouthSmileLeft", "mouthSmileRight",
    "mouthFrownLeft", "mouthFrownRight",
    "mouthDimpleLeft", "mouthDimpleRight",
    "mouthStretchLeft", "mouthStretchRight",
    "mouthRollLower", "mouthRollUpper", "mouthShrugLower", "mouthShrugUpper",
    "mouthPressLeft", "mouthPressRight",
    "mouthLowerDownLeft", "mouthLowerDownRight",
    "mouthUpperUpLeft", "mouthUpperUpRight",
    "noseSneerLeft", "noseSneerRight",
)
CHANNEL_NAMES = tuple(
    list(_CORE_CHANNELS)
    + [f"reserved{i:02d}" for i in range(len(_CORE_CHANNELS), 56)]
    + ["tongueOut", "tongueUp", "tongueDown", "tongueLeft", "tongueRight",
       "tongueRoll", "tongueCurl"]
)
assert len(CHANNEL_NAMES) == N_BLENDSHAPES
CHANNEL_INDEX = {n: i for i, n in enumerate(CHANNEL_NAMES)}

_EXP_INDEX = {n: i for i, n in enumerate(EXP_PARAM_NAMES)}

# channel name -> (expression parameter, weight); the sparse linear map
RIG_CHANNEL_MAP = {
    "jawOpen": ("mouth_open", 1.0),
    "mouthRight": ("mouth_asym", 1.0),
    "mouthLeft": ("mouth_asym", -1.0),
    "browOuterUpLeft": ("brow_left", 1.0),
    "browOuterUpRight": ("brow_right", 1.0),
    "tongueOut": ("tongue", 1.0),
}
GAZE_ANGLE_SCALE = 0.5  # radians mapping to the [-1, 1] gaze parameters


@dataclass
class BlendshapeFrame:
    """The per-tick driving signal: 63 blendshapes, 4 gaze angles, head pose."""

    timestamp_us: int = 0
    blendshapes: np.ndarray = field(default_factory=lambda: np.zeros(N_BLENDSHAPES, np.float32))
    gaze: np.ndarray = field(default_factory=lambda: np.zeros(4, np.float32))
    quaternion: np.ndarray = field(default_factory=lambda: np.array([1, 0, 0, 0], np.float32))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3, np.float32))

    def __post_init__(self):
        self.blendshapes = np.clip(np.asarray(self.blendshapes, np.float32), 0.0, 1.0)
        if self.blendshapes.shape != (N_BLENDSHAPES,):
            raise InvalidArgumentError(f"need exactly {N_BLENDSHAPES} blendshape values")
        self.gaze = np.asarray(self.gaze, np.float32).reshape(4)
        q = np.asarray(self.quaternion, np.float64).reshape(4)
        n = np.linalg.norm(q)
        if n < 1e-6:
            raise InvalidArgumentError("zero quaternion in blendshape frame")
        self.quaternion = (q / n).astype(np.float32)
        self.translation = np.asarray(self.translation, np.float32).reshape(3)

    @property
    def head_pose(self) -> RigidPose:
        return RigidPose(self.quaternion.astype(np.float64),
                         self.translation.astype(np.float64))

    def equals(self, other: "BlendshapeFrame") -> bool:
        return (self.timestamp_us == other.timestamp_us
                and np.array_equal(self.blendshapes, other.blendshapes)
                and np.array_equal(self.gaze, other.gaze)
                and np.array_equal(self.quaternion, other.quaternion)
                and np.array_equal(self.translation, other.translation))


def encode_frame(f: BlendshapeFrame) -> bytes:
    out = bytearray()
    out += WIRE_MAGIC
    out += struct.pack("<H", WIRE_VERSION)
    out += struct.pack("<Q", f.timestamp_us)
    out += f.blendshapes.astype("<f4").tobytes()
    out += f.gaze.astype("<f4").tobytes()
    out += f.quaternion.astype("<f4").tobytes()
    out += f.translation.astype("<f4").tobytes()
    assert len(out) == PACKET_SIZE
    return bytes(out)


def decode_frame(data: bytes) -> BlendshapeFrame:
    """Validate and decode one packet; bit-exact inverse of encode_frame."""
    if len(data) != PACKET_SIZE:
        raise ProtocolError(
            f"packet must be {PACKET_SIZE} bytes, got {len(data)} "
            f"({PACKET_SIZE - len(data)} missing)" if len(data) < PACKET_SIZE
            else f"packet must be {PACKET_SIZE} bytes, got {len(data)}")
    if data[:4] != WIRE_MAGIC:
        raise ProtocolError(f"bad magic {data[:4]!r}", offset=0)
    (version,) = struct.unpack("<H", data[4:6])
    if version > WIRE_VERSION:
        raise ProtocolError(f"unsupported packet version {version}", offset=4)
    (ts,) = struct.unpack("<Q", data[6:14])
    off = 14
    bs = np.frombuffer(data, dtype="<f4", count=N_BLENDSHAPES, offset=off).copy()
    off += N_BLENDSHAPES * 4
    gaze = np.frombuffer(data, dtype="<f4", count=4, offset=off).copy()
    off += 16
    quat = np.frombuffer(data, dtype="<f4", count=4, offset=off).copy()
    off += 16
    trans = np.frombuffer(data, dtype="<f4", count=3, offset=off).copy()
    norm = float(np.linalg.norm(quat.astype(np.float64)))
    if abs(norm - 1.0) > 1e-3:
        raise ProtocolError(f"quaternion norm {norm:.6f} outside tolerance", offset=off - 16)
    frame = BlendshapeFrame.__new__(BlendshapeFrame)
    frame.timestamp_us = ts
    frame.blendshapes = bs
    frame.gaze = gaze
    # keep raw values bit-exact; renormalization happens in head_pose
    frame.quaternion = quat
    frame.translation = trans
    return frame


class GenericRig:
    """Maps blendshape frames to the synthetic generic identity's expression
    parameters and renders the canonical frontal CG driver. The 6DoF head
    pose is never applied to the rig render."""

    GENERIC_THETA_ID = np.zeros(ID_DIM, dtype=np.float32)

    def __init__(self, resolution: int = 32):
        self.resolution = resolution
        self.camera = canonical_camera(resolution)
        self._warned_ignored = False

    def map_expression(self, f: BlendshapeFrame) -> np.ndarray:
        theta = np.zeros(EXP_DIM, dtype=np.float64)
        for chan, (param, weight) in RIG_CHANNEL_MAP.items():
            theta[_EXP_INDEX[param]] += weight * float(f.blendshapes[CHANNEL_INDEX[chan]])
        theta[_EXP_INDEX["gaze_left_yaw"]] = f.gaze[0] / GAZE_ANGLE_SCALE
        theta[_EXP_INDEX["gaze_left_pitch"]] = f.gaze[1] / GAZE_ANGLE_SCALE
        theta[_EXP_INDEX["gaze_right_yaw"]] = f.gaze[2] / GAZE_ANGLE_SCALE
        theta[_EXP_INDEX["gaze_right_pitch"]] = f.gaze[3] / GAZE_ANGLE_SCALE
        mapped = {CHANNEL_INDEX[c] for c in RIG_CHANNEL_MAP}
        ignored = [i for i in range(N_BLENDSHAPES)
                   if i not in mapped and f.blendshapes[i] != 0]
        if ignored and not self._warned_ignored:
            logger.info("rig ignores %d unmapped blendshape channels (e.g. %s)",
                        len(ignored), CHANNEL_NAMES[ignored[0]])
            self._warned_ignored = True
        return np.clip(theta, -1.0, 1.0)

    def render(self, f: BlendshapeFrame, resolution: int | None = None) -> np.ndarray:
        res = resolution or self.resolution
        scene = build_scene(self.GENERIC_THETA_ID, self.map_expression(f))
        cam = self.camera if res == self.resolution else canonical_camera(res)
        return gt_render(scene, cam)


def rig_render(rig: GenericRig, f: BlendshapeFrame, resolution: int | None = None) -> np.ndarray:
    return rig.render(f, resolution)


# ---------------------------------------------------------------------------
# Scripts

def make_script(n_ticks: int, kind: str = "conversation", seed: int = 0,
                tick_ms: float = 33.0) -> list[BlendshapeFrame]:
    """Scripted driving sequences standing in for live HMD capture.

    'extreme' sweeps the asymmetric and tongue channels hard, mirroring the
    stressed expression scripts."""
    rng = np.random.default_rng(seed)
    frames = []
    phase = rng.uniform(0, 2 * np.pi, size=6)
    for t in range(n_ticks):
        s = t / max(n_ticks - 1, 1)
        bs = np.zeros(N_BLENDSHAPES, np.float32)
        w = 2 * np.pi * s
        if kind == "conversation":
            bs[CHANNEL_INDEX["jawOpen"]] = 0.4 + 0.4 * np.sin(w * 2 + phase[0])
            bs[CHANNEL_INDEX["browOuterUpLeft"]] = 0.3 + 0.3 * np.sin(w + phase[1])
            bs[CHANNEL_INDEX["browOuterUpRight"]] = 0.3 + 0.3 * np.sin(w + phase[1])
            gaze = 0.2 * np.array([np.sin(w + phase[2]), np.cos(w + phase[2])] * 2)
            yaw = 0.25 * np.sin(w + phase[3])
        elif kind == "extreme":
            bs[CHANNEL_INDEX["jawOpen"]] = 0.5 + 0.5 * np.sin(w * 3 + phase[0])
            bs[CHANNEL_INDEX["mouthLeft"]] = max(0.0, np.sin(w * 2 + phase[1]))
            bs[CHANNEL_INDEX["mouthRight"]] = max(0.0, -np.sin(w * 2 + phase[1]))
            bs[CHANNEL_INDEX["browOuterUpLeft"]] = 0.5 + 0.5 * np.sin(w * 2 + phase[2])
            bs[CHANNEL_INDEX["browOuterUpRight"]] = 0.5 - 0.5 * np.sin(w * 2 + phase[2])
            bs[CHANNEL_INDEX["tongueOut"]] = max(0.0, np.sin(w + phase[4]))
            gaze = 0.4 * np.array([np.sin(w * 2), np.cos(w * 2)] * 2)
            yaw = 0.5 * np.sin(w + phase[5])
        else:
            raise InvalidArgumentError(f"unknown script kind {kind!r}")
        pose = RigidPose.from_axis_angle((0, 1, 0), yaw,
                                         (0.05 * np.sin(w), 0.0, 0.02 * np.cos(w)))
        frames.append(BlendshapeFrame(
            timestamp_us=int(t * tick_ms * 1000),
            blendshapes=np.clip(bs, 0, 1),
            gaze=np.clip(gaze, -GAZE_ANGLE_SCALE, GAZE_ANGLE_SCALE),
            quaternion=pose.quaternion,
            translation=pose.translation,
        ))
    return frames


def save_script(frames: list[BlendshapeFrame], path) -> None:
    with open(path, "wb") as f:
        for frame in frames:
            f.write(encode_frame(frame))


def load_script(path) -> list[BlendshapeFrame]:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) % PACKET_SIZE != 0:
        raise ProtocolError(
            f"script size {len(data)} is not a multiple of packet size {PACKET_SIZE}",
            offset=len(data) - len(data) % PACKET_SIZE)
    return [decode_frame(data[i:i + PACKET_SIZE])
            for i in range(0, len(data), PACKET_SIZE)]


# ---------------------------------------------------------------------------
# Session simulation

@dataclass(frozen=True)
class SessionConfig:
    latency_ms: float = 0.0
    jitter_ms: float = 0.0
    drop_rate: float = 0.0
    tick_ms: float = 33.0
    ipd: float = 0.06
    render_resolution: int = 32
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.drop_rate < 1:
            raise InvalidArgumentError("drop_rate must be in [0, 1)")
        if self.tick_ms <= 0:
            raise InvalidArgumentError("tick_ms must be positive")


class SimChannel:
    """In-process transport with injectable latency, jitter, and drops."""

    def __init__(self, cfg: SessionConfig, seed: int):
        self.cfg = cfg
        self.rng = np.random.default_rng(seed)
        self.in_flight: list[tuple[int, bytes]] = []
        self.dropped = 0

    def send(self, tick: int, packet: bytes) -> bool:
        """Returns False when the packet was dropped."""
        if self.cfg.drop_rate > 0 and self.rng.random() < self.cfg.drop_rate:
            self.dropped += 1
            return False
        delay_ms = self.cfg.latency_ms
        if self.cfg.jitter_ms > 0:
            delay_ms += self.rng.uniform(0, self.cfg.jitter_ms)
        arrival = tick + int(np.ceil(delay_ms / self.cfg.tick_ms - 1e-9))
        self.in_flight.append((arrival, packet))
        return True

    def receive(self, tick: int) -> list[bytes]:
        ready = [p for a, p in self.in_flight if a <= tick]
        self.in_flight = [(a, p) for a, p in self.in_flight if a > tick]
        return ready


@dataclass
class SessionLog:
    """Deterministic tick records plus (non-deterministic) timings."""

    ticks: list[dict] = field(default_factory=list)
    timings: list[dict] = field(default_factory=list)
    avatar_exchange_bytes: dict = field(default_factory=dict)

    def deterministic_blob(self) -> str:
        import json
        return json.dumps(self.ticks, sort_keys=True)


TIMING_STAGES = ("capture", "encode", "transport", "decode", "rig_render",
                 "reenact", "render", "superres")


def run_session(peer_a_source: np.ndarray, peer_b_source: np.ndarray,
                script_a: list[BlendshapeFrame], script_b: list[BlendshapeFrame],
                model, cfg: SessionConfig, superres=None, collect_frames: bool = False):
    """Simulate a two-way session in lockstep.

    Avatar photos are exchanged once up front (A's photo to B's system and
    vice versa); per tick each peer's frame crosses the simulated channel and
    the receiving side renders the remote avatar's stereo pair. A tick
    completes only when both eyes of both peers are rendered. Dropped or
    late packets are covered by holding the last received frame (logged).
    """
    if model is None:
        raise InvalidStateError("run_session requires a trained reenactment model")
    if len(script_a) != len(script_b):
        raise InvalidArgumentError("scripts must have equal length (lockstep ticks)")
    n_ticks = len(script_a)
    rig = GenericRig(cfg.render_resolution)
    log = SessionLog()
    # one-time avatar exchange: B renders A's avatar, so A's photo goes to B
    log.avatar_exchange_bytes = {
        "a_to_b": int(np.asarray(peer_a_source).nbytes),
        "b_to_a": int(np.asarray(peer_b_source).nbytes),
    }
    chan_ab = SimChannel(cfg, cfg.seed * 2 + 1)
    chan_ba = SimChannel(cfg, cfg.seed * 2 + 2)
    held: dict[str, BlendshapeFrame] = {
        "a": BlendshapeFrame(), "b": BlendshapeFrame()}
    frames_out: dict[str, list] = {"a": [], "b": []}
    canon_extrinsic = canonical_camera(cfg.render_resolution).extrinsic
    from .triplane import RenderConfig, render_batch
    rcfg = RenderConfig(samples_per_ray=16, render_resolution=cfg.render_resolution,
                        stratified=False, seed=0)

    class _Timed:
        __slots__ = ("timing", "stage", "start")

        def __init__(self, timing):
            self.timing = timing

        def __call__(self, stage):
            self.stage = stage
            return self

        def __enter__(self):
            self.start = time.perf_counter()

        def __exit__(self, *exc):
            self.timing[self.stage] += time.perf_counter() - self.start

    for tick in range(n_ticks):
        t0 = time.perf_counter()
        timing = dict.fromkeys(TIMING_STAGES, 0.0)
        record = {"tick": tick, "directions": {}}
        timed = _Timed(timing)

        # capture + encode + transport for both directions first
        packets = {}
        for name, script, chan in (("a", script_a, chan_ab), ("b", script_b, chan_ba)):
            with timed("capture"):
                frame = script[tick]
            with timed("encode"):
                pkt = encode_frame(frame)
            with timed("transport"):
                sent = chan.send(tick, pkt)
            packets[name] = (frame, sent)

        renders = []
        for sender, receiver, chan, source in (
                ("a", "b", chan_ab, peer_a_source), ("b", "a", chan_ba, peer_b_source)):
            with timed("transport"):
                arrivals = chan.receive(tick)
            dropped_or_late = not arrivals
            with timed("decode"):
                if arrivals:
                    frame = decode_frame(arrivals[-1])
                    held[sender] = frame
                else:
                    frame = held[sender]
                record["directions"][f"{sender}->{receiver}"] = {
                    "bytes": PACKET_SIZE if packets[sender][1] else 0,
                    "dropped_or_late": dropped_or_late,
                    "driver_timestamp_us": int(frame.timestamp_us),
                }
            with timed("rig_render"):
                driver_img = rig.render(frame)
            with timed("reenact"):
                viewer_frame = script_a[tick] if receiver == "a" else script_b[tick]
                fused = fuse_head_camera(viewer_frame.head_pose, frame.head_pose)
                view_pose = compose(fused, canon_extrinsic)
                center = Camera(view_pose, CANONICAL_FOCAL, (0.5, 0.5),
                                (cfg.render_resolution, cfg.render_resolution))
                left, right = stereo_pair(center, cfg.ipd)
                src_t = model._prep(source)
                drv_t = model._prep(driver_img)
                record["directions"][f"{sender}->{receiver}"]["fused_pose"] = [
                    round(float(v), 9)
                    for v in list(fused.quaternion) + list(fused.translation)]
            eyes = []
            for eye_cam in (left, right):
                with timed("reenact"):
                    planes = model.reenact_planes(src_t, drv_t)
                with timed("render"):
                    with torch.no_grad():
                        rgb, _, _ = render_batch(planes, model.lifter.decoder,
                                                 [eye_cam], rcfg)
                    img = rgb[0]
                if superres is not None:
                    with timed("superres"):
                        with torch.no_grad():
                            img = superres(img.permute(2, 0, 1).unsqueeze(0))[0] \
                                .permute(1, 2, 0).clamp(0, 1)
                eyes.append(img.numpy())
            renders.append((receiver, eyes))

        # lockstep barrier: a tick is complete only with all four eye renders
        with timed("render"):
            assert len(renders) == 2 and all(len(e) == 2 for _, e in renders)
            if collect_frames:
                for receiver, eyes in renders:
                    frames_out[receiver].append(eyes)
            record["complete"] = True
            log.ticks.append(record)
        timing["total"] = time.perf_counter() - t0
        timing["tick"] = tick
        log.timings.append(timing)

    return log, frames_out


def latency_report(log: SessionLog) -> list[dict]:
    """Per-tick stage timing rows (milliseconds) plus a totals row."""
    if not log.timings:
        raise InvalidArgumentError("empty session log")
    rows = []
    for t in log.timings:
        row = {"tick": t["tick"]}
        for s in TIMING_STAGES:
            row[s + "_ms"] = t[s] * 1000.0
        row["stage_sum_ms"] = sum(t[s] for s in TIMING_STAGES) * 1000.0
        row["total_ms"] = t["total"] * 1000.0
        rows.append(row)
    return rows


def write_latency_csv(rows: list[dict], path) -> None:
    import csv
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        w.writeheader()
        w.writerows(rows)
