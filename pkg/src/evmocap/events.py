"""Event stream data model, event-camera forward simulation and EDI
intensity-image sharpening.

Timestamps are integer microseconds throughout.  An event carries a pixel,
a timestamp and a polarity in {-1,+1}; the stream is globally sorted by
time and strictly increasing per pixel.

The simulator and the sharpening operator are exact inverses up to the
contrast-threshold quantization: for a latent log-brightness video L the
reconstruction error of ``edi_sharpen(simulate_events(L))`` is bounded by
the threshold C per pixel.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

# packed little-endian binary record: u64 t_us, u16 x, u16 y, i8 p (13 bytes)
BINARY_DTYPE = np.dtype({
    "names": ["t", "x", "y", "p"],
    "formats": ["<u8", "<u2", "<u2", "i1"],
    "offsets": [0, 8, 10, 12],
    "itemsize": 13,
})

CSV_HEADER = "t_us,x,y,p"


@dataclass(frozen=True)
class EventCameraConfig:
    contrast_threshold: float          # C, log-brightness units
    exposure: float                    # seconds
    intensity_fps: float
    sensor_size: tuple[int, int]       # (W, H)

    def __post_init__(self):
        if self.contrast_threshold <= 0:
            raise ValueError("contrast threshold must be positive")
        if self.exposure > 1.0 / self.intensity_fps + 1e-12:
            raise ValueError("exposure cannot exceed the frame interval")


@dataclass
class IntensityFrame:
    pixels: np.ndarray        # (H,W) non-negative DN
    center_timestamp: float   # seconds
    exposure: float           # seconds

    def __post_init__(self):
        if np.any(self.pixels < 0):
            raise ValueError("intensity pixels must be non-negative")


@dataclass
class LatentImage:
    log_pixels: np.ndarray    # (H,W)
    timestamp: float          # seconds
    clamped_pixels: int = 0

    def __post_init__(self):
        if not np.all(np.isfinite(self.log_pixels)):
            raise ValueError("latent image must be finite")


class LatentVideo:
    """Dense time-sampled latent image sequence (timestamps in us)."""

    def __init__(self, timestamps_us, frames):
        self.timestamps_us = np.asarray(timestamps_us, dtype=np.int64)
        self.frames = np.asarray(frames, dtype=np.float64)
        if self.frames.ndim != 3 or len(self.frames) != len(self.timestamps_us):
            raise ValueError("frames must be (T,H,W) matching timestamps")
        if len(self.timestamps_us) and np.any(np.diff(self.timestamps_us) <= 0):
            raise ValueError("timestamps must be strictly increasing")

    def __len__(self):
        return len(self.timestamps_us)

    def __getitem__(self, i) -> LatentImage:
        return LatentImage(self.frames[i], self.timestamps_us[i] * 1e-6)

    @staticmethod
    def from_images(images: list[LatentImage]) -> "LatentVideo":
        ts = [int(round(im.timestamp * 1e6)) for im in images]
        return LatentVideo(ts, np.stack([im.log_pixels for im in images]))


class EventStream:
    """Time-sorted event arrays with a per-pixel CSR index for window queries."""

    def __init__(self, t, x, y, p, sensor_size, validate=True):
        self.t = np.asarray(t, dtype=np.int64)
        self.x = np.asarray(x, dtype=np.int32)
        self.y = np.asarray(y, dtype=np.int32)
        self.p = np.asarray(p, dtype=np.int8)
        self.sensor_size = (int(sensor_size[0]), int(sensor_size[1]))
        if validate:
            self._validate()
        self._index = None

    def _validate(self):
        W, H = self.sensor_size
        n = len(self.t)
        if not (len(self.x) == len(self.y) == len(self.p) == n):
            raise ValueError("event field arrays must have equal length")
        if n == 0:
            return
        if np.any(self.t < 0):
            raise ValueError("event timestamps must be non-negative")
        if np.any(np.diff(self.t) < 0):
            raise ValueError("event timestamps must be non-decreasing")
        if np.any((self.x < 0) | (self.x >= W) | (self.y < 0) | (self.y >= H)):
            raise ValueError("event pixel out of sensor bounds")
        if not np.all(np.abs(self.p) == 1):
            raise ValueError("polarity must be -1 or +1")
        pix = self.pixel_ids()
        order = np.lexsort((self.t, pix))
        same = pix[order][1:] == pix[order][:-1]
        if np.any(same & (np.diff(self.t[order]) <= 0)):
            raise ValueError("per-pixel timestamps must be strictly increasing")

    def __len__(self):
        return len(self.t)

    def pixel_ids(self) -> np.ndarray:
        W, _ = self.sensor_size
        return self.y.astype(np.int64) * W + self.x

    @property
    def index(self):
        """(order, ptr): events sorted by (pixel, t) and CSR offsets per pixel id."""
        if self._index is None:
            W, H = self.sensor_size
            pix = self.pixel_ids()
            order = np.lexsort((self.t, pix))
            counts = np.bincount(pix, minlength=W * H)
            ptr = np.concatenate([[0], np.cumsum(counts)])
            self._index = (order, ptr)
        return self._index

    def pixel_events(self, x, y):
        """Indices of this pixel's events, time-sorted."""
        W, H = self.sensor_size
        if not (0 <= x < W and 0 <= y < H):
            raise ValueError("pixel out of sensor bounds")
        order, ptr = self.index
        pid = y * W + x
        return order[ptr[pid]:ptr[pid + 1]]

    def time_slice(self, t_start, t_end):
        """Indices of events with t_start < t <= t_end (global order)."""
        a = np.searchsorted(self.t, t_start, side="right")
        b = np.searchsorted(self.t, t_end, side="right")
        return np.arange(a, b)

    @staticmethod
    def empty(sensor_size) -> "EventStream":
        return EventStream(np.empty(0, np.int64), np.empty(0, np.int32),
                           np.empty(0, np.int32), np.empty(0, np.int8), sensor_size)


def accumulate_events(stream: EventStream, pixel, t_start, t_end, C) -> float:
    """Sum of polarity*C over the pixel's events with t_start < t <= t_end."""
    if t_start > t_end:
        raise ValueError("t_start must not exceed t_end")
    idx = stream.pixel_events(int(pixel[0]), int(pixel[1]))
    t = stream.t[idx]
    a = np.searchsorted(t, t_start, side="right")
    b = np.searchsorted(t, t_end, side="right")
    return float(C * stream.p[idx[a:b]].sum(dtype=np.int64))


def edi_sharpen(frame: IntensityFrame, stream: EventStream,
                config: EventCameraConfig) -> LatentImage:
    """Sharpen a blurred exposure-averaged frame into its log latent image.

    Per pixel:  L(t_k) = log I - log( (1/T) * integral exp(E(t)) dt )
    with E(t) the signed event accumulation relative to t_k; exp(E) is
    piecewise constant between events so the integral is an exact sum.
    """
    W, H = config.sensor_size
    if frame.pixels.shape != (H, W):
        raise ValueError("frame size does not match sensor size")
    T_us = frame.exposure * 1e6
    if T_us <= 0:
        raise ValueError("empty exposure window")
    tk_us = frame.center_timestamp * 1e6
    a_us = tk_us - T_us / 2.0
    b_us = tk_us + T_us / 2.0

    pixels = frame.pixels
    n_clamped = int(np.count_nonzero(pixels < 1.0))
    if n_clamped:
        log.warning("edi_sharpen: clamped %d sub-black pixels to 1 DN", n_clamped)
        pixels = np.maximum(pixels, 1.0)

    C = config.contrast_threshold
    sel = stream.time_slice(a_us, b_us)
    # exclude the open lower edge: time_slice uses t > a
    log_corr = np.zeros((H, W))
    if sel.size:
        pix = stream.y[sel].astype(np.int64) * W + stream.x[sel]
        order = np.lexsort((stream.t[sel], pix))
        pix = pix[order]
        t = stream.t[sel][order].astype(np.float64)
        pc = C * stream.p[sel][order].astype(np.float64)

        starts = np.flatnonzero(np.r_[True, pix[1:] != pix[:-1]])
        seg_of = np.cumsum(np.r_[True, pix[1:] != pix[:-1]]) - 1
        cs = np.cumsum(pc)
        base = np.r_[0.0, cs[:-1]][starts]      # cumsum just before each segment
        c_level = cs - base[seg_of]             # accumulation A(t) after event i

        # durations: to the next event in the segment, or to the window end
        nxt = np.empty_like(t)
        nxt[:-1] = t[1:]
        nxt[-1] = b_us
        ends = np.r_[starts[1:] - 1, len(t) - 1]
        nxt[ends] = b_us
        dur = nxt - t

        integ = np.add.reduceat(np.exp(c_level) * dur, starts)
        integ += t[starts] - a_us               # exp(0) before the first event
        # A(t_k): accumulation of events with t <= t_k
        a_tk = np.add.reduceat(np.where(t <= tk_us, pc, 0.0), starts)

        upix = pix[starts]
        log_corr.reshape(-1)[upix] = np.log(integ / T_us) - a_tk

    lat = np.log(pixels) - log_corr
    return LatentImage(lat, frame.center_timestamp, clamped_pixels=n_clamped)


class EventSimulator:
    """Incremental event-camera forward model over a latent video.

    Feed time-increasing latent log images; events are emitted whenever a
    pixel's linearly interpolated log brightness crosses a multiple-of-C
    step from its per-pixel reference level, which resets at each emitted
    event.  Intensity frames are exact exposure averages of exp(L) under
    the piecewise-linear interpolation.
    """

    def __init__(self, config: EventCameraConfig):
        self.config = config
        W, H = config.sensor_size
        self.W, self.H = W, H
        self._ref = None
        self._prev_L = None
        self._prev_t = None
        self._t0 = None
        self._chunks = []
        self._frame_integrals = []   # (center_us, accumulator array)
        self._frames_done = []
        self._next_center = None

    def feed(self, t_us: int, L: np.ndarray):
        t_us = int(t_us)
        L = np.asarray(L, dtype=np.float64)
        if L.shape != (self.H, self.W):
            raise ValueError("latent frame size mismatch")
        if self._ref is None:
            self._ref = L.copy()
            self._prev_L, self._prev_t = L.copy(), t_us
            self._t0 = t_us
            T_us = self.config.exposure * 1e6
            self._next_center = t_us + T_us / 2.0
            return
        if t_us <= self._prev_t:
            raise ValueError("latent timestamps must be strictly increasing")
        self._emit_step(self._prev_t, t_us, self._prev_L, L)
        self._integrate_frames(self._prev_t, t_us, self._prev_L, L)
        self._prev_L, self._prev_t = L.copy(), t_us

    def _emit_step(self, t0, t1, L0, L1):
        C = self.config.contrast_threshold
        diff = L1 - self._ref
        k = np.zeros(diff.shape, dtype=np.int64)
        up = diff >= C
        dn = diff <= -C
        k[up] = np.floor(diff[up] / C).astype(np.int64)
        k[dn] = -np.floor(-diff[dn] / C).astype(np.int64)
        ys, xs = np.nonzero(k)
        if len(ys) == 0:
            return
        kk = k[ys, xs]
        counts = np.abs(kk)
        total = int(counts.sum())
        rep = np.repeat(np.arange(len(ys)), counts)
        i_within = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts) + 1
        sign = np.sign(kk)[rep]
        level = self._ref[ys, xs][rep] + sign * C * i_within
        l0 = L0[ys, xs][rep]
        l1 = L1[ys, xs][rep]
        frac = (level - l0) / (l1 - l0)
        t_ev = np.rint(t0 + frac * (t1 - t0)).astype(np.int64)
        self._chunks.append((t_ev, xs[rep].astype(np.int32),
                             ys[rep].astype(np.int32), sign.astype(np.int8)))
        self._ref[ys, xs] += C * kk

    def _integrate_frames(self, t0, t1, L0, L1):
        T_us = self.config.exposure * 1e6
        period_us = 1e6 / self.config.intensity_fps
        # open new frames whose exposure begins before t1
        while self._next_center - T_us / 2.0 < t1:
            self._frame_integrals.append((self._next_center,
                                          np.zeros((self.H, self.W))))
            self._next_center += period_us
        still_open = []
        for center, acc in self._frame_integrals:
            a, b = center - T_us / 2.0, center + T_us / 2.0
            lo, hi = max(a, t0), min(b, t1)
            if hi > lo:
                # interpolate L at the sub-interval ends, integrate exp exactly
                fa = (lo - t0) / (t1 - t0)
                fb = (hi - t0) / (t1 - t0)
                la = L0 + fa * (L1 - L0)
                lb = L0 + fb * (L1 - L0)
                d = lb - la
                small = np.abs(d) < 1e-12
                seg = np.where(small,
                               np.exp(0.5 * (la + lb)),
                               (np.exp(lb) - np.exp(la)) / np.where(small, 1.0, d))
                acc += seg * (hi - lo)
            if b <= t1 + 1e-9:
                self._frames_done.append(IntensityFrame(acc / T_us, center * 1e-6,
                                                        self.config.exposure))
            else:
                still_open.append((center, acc))
        self._frame_integrals = still_open

    def finish(self):
        """Return (EventStream, [IntensityFrame]) for everything fed so far."""
        if self._prev_t is None or self._prev_t == self._t0:
            raise ValueError("need at least 2 latent samples")
        if self._chunks:
            t = np.concatenate([c[0] for c in self._chunks])
            x = np.concatenate([c[1] for c in self._chunks])
            y = np.concatenate([c[2] for c in self._chunks])
            p = np.concatenate([c[3] for c in self._chunks])
            # enforce strictly increasing per-pixel timestamps after rounding
            pix = y.astype(np.int64) * self.W + x
            order = np.lexsort((np.arange(len(t)), pix))  # stable by feed order
            t, x, y, p, pix = t[order], x[order], y[order], p[order], pix[order]
            starts = np.flatnonzero(np.r_[True, pix[1:] != pix[:-1]])
            offs = np.arange(len(t)) - np.repeat(starts, np.diff(np.r_[starts, len(t)]))
            u = t - offs
            for s, e in zip(starts, np.r_[starts[1:], len(t)]):
                u[s:e] = np.maximum.accumulate(u[s:e])
            t = u + offs
            final = np.lexsort((x, y, t))
            stream = EventStream(t[final], x[final], y[final], p[final],
                                 self.config.sensor_size)
        else:
            stream = EventStream.empty(self.config.sensor_size)
        return stream, list(self._frames_done)


def simulate_events(latent_video: LatentVideo, config: EventCameraConfig):
    """Run the forward model over an in-memory latent video."""
    if len(latent_video) < 2:
        raise ValueError("need at least 2 latent samples")
    sim = EventSimulator(config)
    for ts, im in zip(latent_video.timestamps_us, latent_video.frames):
        sim.feed(ts, im)
    return sim.finish()


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------

def save_events(path, stream: EventStream):
    """CSV for '.csv', packed binary otherwise (canonical '.evb')."""
    path = Path(path)
    if path.suffix == ".csv":
        with open(path, "w") as f:
            f.write(CSV_HEADER + "\n")
            for t, x, y, p in zip(stream.t, stream.x, stream.y, stream.p):
                f.write(f"{t},{x},{y},{p}\n")
    else:
        rec = np.zeros(len(stream), dtype=BINARY_DTYPE)
        rec["t"], rec["x"], rec["y"], rec["p"] = stream.t, stream.x, stream.y, stream.p
        rec.tofile(path)


def load_events(path, sensor_size) -> EventStream:
    path = Path(path)
    if path.suffix == ".csv":
        data = np.loadtxt(path, delimiter=",", skiprows=1, dtype=np.int64, ndmin=2)
        if data.size == 0:
            return EventStream.empty(sensor_size)
        return EventStream(data[:, 0], data[:, 1], data[:, 2], data[:, 3], sensor_size)
    rec = np.fromfile(path, dtype=BINARY_DTYPE)
    return EventStream(rec["t"].astype(np.int64), rec["x"], rec["y"], rec["p"],
                       sensor_size)


def save_intensity_frame(path, frame: IntensityFrame):
    """16-bit grayscale PNG plus a JSON sidecar with the timing metadata."""
    import cv2

    path = Path(path)
    px = np.clip(np.rint(frame.pixels), 0, 65535).astype(np.uint16)
    cv2.imwrite(str(path), px)
    sidecar = {
        "center_timestamp_us": int(round(frame.center_timestamp * 1e6)),
        "exposure_us": int(round(frame.exposure * 1e6)),
    }
    with open(path.with_suffix(".json"), "w") as f:
        json.dump(sidecar, f)


def load_intensity_frame(path) -> IntensityFrame:
    import cv2

    path = Path(path)
    px = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if px is None:
        raise IOError(f"cannot read image {path}")
    with open(path.with_suffix(".json")) as f:
        sidecar = json.load(f)
    return IntensityFrame(px.astype(np.float64),
                          sidecar["center_timestamp_us"] * 1e-6,
                          sidecar["exposure_us"] * 1e-6)


def render_event_overlay(stream: EventStream, window, pose_boundary, path):
    """Accumulated polarity-colored events with the model boundary overlaid.

    window: (t_start_us, t_end_us); pose_boundary: (K,2) pixel points.
    Deterministic PNG output for fixed inputs.
    """
    from PIL import Image

    W, H = stream.sensor_size
    img = np.zeros((H, W, 3), dtype=np.uint8)
    sel = stream.time_slice(window[0], window[1])
    if sel.size:
        acc = np.zeros((H, W), dtype=np.int64)
        np.add.at(acc, (stream.y[sel], stream.x[sel]), stream.p[sel])
        pos = acc > 0
        neg = acc < 0
        mag = np.clip(np.abs(acc) * 85 + 85, 0, 255).astype(np.uint8)
        img[pos, 0] = mag[pos]
        img[neg, 2] = mag[neg]
    pts = np.asarray(pose_boundary, dtype=np.float64).reshape(-1, 2)
    if len(pts):
        xi = np.rint(pts[:, 0]).astype(int)
        yi = np.rint(pts[:, 1]).astype(int)
        keep = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
        img[yi[keep], xi[keep], 1] = 255
    Image.fromarray(img).save(path, format="PNG")
