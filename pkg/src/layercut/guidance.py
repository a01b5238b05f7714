"""Noise-prediction guidance: schedule, conditions, SDS gradient, mock and remote models."""

from __future__ import annotations

import base64
import dataclasses
import json
import math
import socket
import time
import urllib.error
import urllib.request
from typing import Callable, Protocol

import numpy as np

from layercut.errors import GuidanceError, GuidanceHTTPError, GuidanceTimeout, MalformedResponse

VIEW_TAGS = ("front", "side", "back")


@dataclasses.dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """DDPM-style schedule indexed t = 1..T (alpha_bar[t - 1] is the value at step t)."""

    alpha_bar: np.ndarray
    weight: np.ndarray

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=float)
        w = np.asarray(self.weight, dtype=float)
        if ab.ndim != 1 or ab.shape != w.shape or len(ab) == 0:
            raise ValueError("alpha_bar and weight must be equal-length 1-D arrays")
        if not (np.all(ab > 0) and np.all(ab < 1)):
            raise ValueError("alpha_bar must lie in (0, 1)")
        if np.any(np.diff(ab) >= 0):
            raise ValueError("alpha_bar must be strictly decreasing")
        if np.any(w <= 0):
            raise ValueError("weights must be positive")
        object.__setattr__(self, "alpha_bar", ab)
        object.__setattr__(self, "weight", w)

    @classmethod
    def linear(cls, T: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2) -> NoiseSchedule:
        betas = np.linspace(beta_start, beta_end, T)
        ab = np.cumprod(1.0 - betas)
        return cls(ab, 1.0 - ab)

    @property
    def T(self) -> int:
        return len(self.alpha_bar)

    def check_t(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ValueError(f"t must be in [1, {self.T}], got {t}")

    def ab(self, t: int) -> float:
        self.check_t(t)
        return float(self.alpha_bar[t - 1])

    def w(self, t: int) -> float:
        self.check_t(t)
        return float(self.weight[t - 1])

    def sample_t(self, rng: np.random.Generator, lo: float = 0.02, hi: float = 0.98) -> int:
        return int(rng.integers(max(1, int(lo * self.T)), int(hi * self.T) + 1))


@dataclasses.dataclass(frozen=True, eq=False)
class Condition:
    text_positive: str = ""
    text_negative: str = ""
    pose_keypoints: np.ndarray | None = None  # (18, 2) pixels
    keypoint_visible: np.ndarray | None = None  # (18,) bool
    view_tag: str = "front"
    # renderer-side facts (camera, pose, space) handed to models that want them;
    # never serialized to the remote service
    context: dict = dataclasses.field(default_factory=dict)

    def __post_init__(self):
        if self.view_tag not in VIEW_TAGS:
            raise ValueError(f"view_tag must be one of {VIEW_TAGS}")
        if self.pose_keypoints is not None:
            kp = np.asarray(self.pose_keypoints, dtype=float)
            if not np.all(np.isfinite(kp)):
                raise ValueError("keypoint coordinates must be finite")
            object.__setattr__(self, "pose_keypoints", kp)

    def wire_fields(self) -> dict:
        d = {"text_positive": self.text_positive, "text_negative": self.text_negative, "view_tag": self.view_tag}
        if self.pose_keypoints is not None:
            d["pose_keypoints"] = self.pose_keypoints.tolist()
            vis = self.keypoint_visible
            d["keypoint_visible"] = (np.ones(len(self.pose_keypoints), bool) if vis is None else vis).tolist()
        return d


class GuidanceModel(Protocol):
    def predict_noise(self, x_t: np.ndarray, cond: Condition, t: int) -> np.ndarray: ...


def forward_diffuse(x: np.ndarray, t: int, schedule: NoiseSchedule, rng_seed):
    """x_t = sqrt(ab) x + sqrt(1 - ab) eps with eps ~ N(0, I)."""
    ab = schedule.ab(t)
    x = np.asarray(x, dtype=float)
    eps = np.random.default_rng(rng_seed).standard_normal(x.shape)
    return math.sqrt(ab) * x + math.sqrt(1 - ab) * eps, eps


@dataclasses.dataclass(eq=False)
class SDSResult:
    grad: np.ndarray
    eps_hat: np.ndarray
    eps: np.ndarray
    t: int

    def residual(self, schedule: NoiseSchedule) -> float:
        """Mean squared gap between x and the model's one-step denoised estimate."""
        ab = schedule.ab(self.t)
        return float(np.mean((self.eps_hat - self.eps) ** 2) * (1 - ab) / ab)


def sds_pixel_gradient(x, cond: Condition, model: GuidanceModel, schedule: NoiseSchedule, t: int,
                       rng_seed) -> SDSResult:
    """omega(t) (eps_hat - eps) dz_t/dx with an identity encoder, so dz_t/dx = sqrt(ab)."""
    x = np.asarray(x, dtype=float)
    x_t, eps = forward_diffuse(x, t, schedule, rng_seed)
    eps_hat = np.asarray(model.predict_noise(x_t, cond, t), dtype=float)
    if eps_hat.shape != x.shape:
        raise ValueError(f"guidance returned shape {eps_hat.shape} for input {x.shape}")
    if not np.all(np.isfinite(eps_hat)):
        raise GuidanceError("guidance returned non-finite noise")
    grad = schedule.w(t) * (eps_hat - eps) * math.sqrt(schedule.ab(t))
    return SDSResult(grad, eps_hat, eps, t)


class MockGuidance:
    """eps_hat = (x_t - sqrt(ab) target) / sqrt(1 - ab): an exact denoiser toward ``target``.

    ``target`` is an image or a callable (x_t, cond) -> image, for targets that
    depend on the camera or pose carried in ``cond.context``.
    """

    def __init__(self, target: np.ndarray | Callable[[np.ndarray, Condition], np.ndarray],
                 schedule: NoiseSchedule | None = None):
        self.target = target if callable(target) else np.asarray(target, dtype=float)
        self.schedule = schedule or NoiseSchedule.linear()

    def target_for(self, x_t, cond) -> np.ndarray:
        tgt = self.target(x_t, cond) if callable(self.target) else self.target
        tgt = np.asarray(tgt, dtype=float)
        if tgt.shape != np.shape(x_t):
            raise ValueError(f"mock target shape {tgt.shape} does not match image {np.shape(x_t)}")
        return tgt

    def predict_noise(self, x_t, cond, t):
        ab = self.schedule.ab(t)
        return (np.asarray(x_t, dtype=float) - math.sqrt(ab) * self.target_for(x_t, cond)) / math.sqrt(1 - ab)


def mock_guidance(target, schedule: NoiseSchedule | None = None) -> MockGuidance:
    return MockGuidance(target, schedule)


# ------------------------------------------------------------- remote service


def encode_image(x: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(x, dtype="<f4").tobytes()).decode("ascii")


def decode_image(data: str, shape) -> np.ndarray:
    try:
        raw = base64.b64decode(data, validate=True)
    except (ValueError, TypeError) as exc:
        raise MalformedResponse(f"image payload is not base64: {exc}") from exc
    arr = np.frombuffer(raw, dtype="<f4")
    if arr.size != int(np.prod(shape)):
        raise MalformedResponse(f"expected {int(np.prod(shape))} floats, got {arr.size}")
    return arr.astype(np.float64).reshape(shape)


class RemoteGuidance:
    """HTTP client: POST {endpoint}/predict_noise with a JSON header and base64 f32 image.

    Request body: {"t", "H", "W", "C", "cond": {...}, "image": base64}. The
    response must carry {"H", "W", "C", "image"} with matching dimensions.
    Transient failures (timeouts, connection errors, HTTP 5xx) are retried twice.
    """

    def __init__(self, endpoint_url: str, timeout: float = 30.0, retries: int = 2, backoff: float = 0.1):
        self.url = endpoint_url.rstrip("/") + "/predict_noise"
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff

    def _post(self, body: bytes) -> bytes:
        req = urllib.request.Request(self.url, data=body, headers={"Content-Type": "application/json"})
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            return resp.read()

    def predict_noise(self, x_t, cond: Condition, t: int) -> np.ndarray:
        x_t = np.asarray(x_t, dtype=float)
        h, w = x_t.shape[:2]
        c = 1 if x_t.ndim == 2 else x_t.shape[2]
        body = json.dumps({"t": int(t), "H": h, "W": w, "C": c, "cond": cond.wire_fields(),
                           "image": encode_image(x_t)}).encode()
        last: Exception | None = None
        for attempt in range(self.retries + 1):
            try:
                payload = self._post(body)
                break
            except urllib.error.HTTPError as exc:
                last = GuidanceHTTPError(exc.code, exc.reason)
                if exc.code < 500:
                    raise last from exc
            except (socket.timeout, TimeoutError) as exc:
                last = GuidanceTimeout(f"no response from {self.url} within {self.timeout}s")
                last.__cause__ = exc
            except urllib.error.URLError as exc:
                if isinstance(exc.reason, (socket.timeout, TimeoutError)):
                    last = GuidanceTimeout(f"no response from {self.url} within {self.timeout}s")
                else:
                    last = GuidanceTimeout(f"cannot reach {self.url}: {exc.reason}")
                last.__cause__ = exc
            except (ConnectionError, OSError) as exc:
                last = GuidanceTimeout(f"connection to {self.url} failed: {exc}")
                last.__cause__ = exc
            if attempt < self.retries:
                time.sleep(self.backoff * (attempt + 1))
        else:
            raise last
        try:
            doc = json.loads(payload)
            shape = (int(doc["H"]), int(doc["W"])) + (() if x_t.ndim == 2 else (int(doc["C"]),))
            image = doc["image"]
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise MalformedResponse(f"bad response from {self.url}: {exc}") from exc
        if shape != x_t.shape:
            raise MalformedResponse(f"response image is {shape}, request was {x_t.shape}")
        return decode_image(image, shape)


def remote_guidance(endpoint_url: str, timeout: float = 30.0) -> RemoteGuidance:
    return RemoteGuidance(endpoint_url, timeout)


# -------------------------------------------------------------------- prompts


def build_prompts(space: str, gender_word: str, object_name: str, view_tag: str) -> tuple[str, str]:
    """(positive, negative) prompt text for the human or composite space."""
    if view_tag not in VIEW_TAGS:
        raise ValueError(f"view_tag must be one of {VIEW_TAGS}")
    if space == "human":
        return f"A photo of a {gender_word}, {view_tag} view", object_name
    if space == "composite":
        return f"A photo of a {gender_word} wearing {object_name}, {view_tag} view", ""
    raise ValueError(f"space must be 'human' or 'composite', got {space!r}")
