"""Per-pixel multilayer perceptrons with hand-written gradients.

A map prediction evaluates one small MLP at every pixel on the flattened
``P x P x C`` neighbourhood around it (shared weights, so it behaves like a
fully convolutional head). Everything is float64 so gradients can be checked
against finite differences to tight tolerances.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .rng import stream
from .sim import Observation

CHANNELS = 5  # height, nx, ny, nz, intensity
DEFAULT_PATCH = 5
DEFAULT_HIDDEN = (64, 64)

CHECKPOINT_MAGIC = b"GUCBMLP\x00"
CHECKPOINT_VERSION = 1


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class MlpParams:
    """Weights ``W[i]`` of shape (fan_in, fan_out) and biases ``b[i]``."""

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix")
        for w, b in zip(self.weights, self.biases):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError("inconsistent layer shapes")
        for a, b in zip(self.weights[1:], self.weights[:-1]):
            if a.shape[0] != b.shape[1]:
                raise ValueError("layer widths do not chain")

    @classmethod
    def from_arrays(cls, weights: Sequence[np.ndarray], biases: Sequence[np.ndarray]) -> "MlpParams":
        return cls(tuple(_frozen(w) for w in weights), tuple(_frozen(b) for b in biases))

    @property
    def sizes(self) -> tuple[int, ...]:
        return (self.weights[0].shape[0],) + tuple(w.shape[1] for w in self.weights)

    @property
    def input_width(self) -> int:
        return self.weights[0].shape[0]

    @property
    def head_count(self) -> int:
        return self.weights[-1].shape[1]

    def arrays(self) -> list[np.ndarray]:
        """Parameters in declared order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "MlpParams":
        return MlpParams.from_arrays(arrays[0::2], arrays[1::2])

    def checksum(self) -> str:
        h = hashlib.blake2b(digest_size=16)
        for a in self.arrays():
            h.update(a.tobytes())
        return h.hexdigest()

    def is_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays())


@dataclass(frozen=True, eq=False)
class GradientBundle:
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    input: np.ndarray  # dL/dx, same shape as the input batch
    loss: float = float("nan")

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out


def init_params(seed: int, sizes: Sequence[int]) -> MlpParams:
    """Fan-in scaled uniform init: ``W ~ U(-sqrt(6/fan_in), sqrt(6/fan_in))``, zero biases."""
    rng = stream(seed, "init", *sizes)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpParams.from_arrays(weights, biases)


def zeros_like_params(params: MlpParams) -> MlpParams:
    return params.with_arrays([np.zeros_like(a) for a in params.arrays()])


# --------------------------------------------------------------------------
# patches


def extract_patch(obs: Observation, row: int, col: int, size: int = DEFAULT_PATCH) -> np.ndarray:
    """Flattened ``size x size x 5`` window centred on ``(row, col)``.

    Order is row-major over the window with channels last
    (height, nx, ny, nz, intensity). Cells outside the grid copy the nearest
    edge pixel.
    """
    if size % 2 == 0:
        raise ValueError("window must be odd")
    h, w = obs.shape
    if not (0 <= row < h and 0 <= col < w):
        raise IndexError(f"pixel {(row, col)} outside the grid")
    r = size // 2
    rows = np.clip(np.arange(row - r, row + r + 1), 0, h - 1)
    cols = np.clip(np.arange(col - r, col + r + 1), 0, w - 1)
    return obs.channels()[np.ix_(rows, cols)].reshape(-1)


def extract_patches(obs: Observation, size: int = DEFAULT_PATCH) -> np.ndarray:
    """All per-pixel patches as an ``(H*W, size*size*5)`` matrix, row-major over pixels."""
    if size % 2 == 0:
        raise ValueError("window must be odd")
    r = size // 2
    padded = np.pad(obs.channels(), ((r, r), (r, r), (0, 0)), mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(padded, (size, size), axis=(0, 1))
    # win: (H, W, C, size, size) -> (H, W, size, size, C)
    h, w = obs.shape
    return np.ascontiguousarray(win.transpose(0, 1, 3, 4, 2)).reshape(h * w, -1)


# --------------------------------------------------------------------------
# forward / backward


def _check_input(params: MlpParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.input_width or x.ndim not in (1, 2):
        raise ValueError(f"input width {x.shape} does not match network input {params.input_width}")
    return x


def _forward_cache(params: MlpParams, x: np.ndarray):
    acts = [x]
    a = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = a @ w + b
        a = z if i == last else np.tanh(z)
        acts.append(a)
    return acts


def forward(params: MlpParams, x: np.ndarray) -> np.ndarray:
    """Evaluate on one input ``(F,)`` or a batch ``(B, F)``. Hidden layers are tanh, heads linear."""
    x = _check_input(params, x)
    return _forward_cache(params, x)[-1]


def backward(params: MlpParams, x: np.ndarray, grad_out: np.ndarray) -> GradientBundle:
    """Reverse-mode gradients of ``sum(forward(x) * grad_out)``.

    For a batch the parameter gradients are summed over samples; ``input``
    keeps one row per sample.
    """
    x = _check_input(params, x)
    single = x.ndim == 1
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape[-1] != params.head_count or grad_out.ndim != x.ndim:
        raise ValueError("grad_out shape does not match the heads")
    if single:
        x, grad_out = x[None], grad_out[None]
    acts = _forward_cache(params, x)
    n = len(params.weights)
    gw, gb = [None] * n, [None] * n
    delta = grad_out
    for i in range(n - 1, -1, -1):
        gw[i] = acts[i].T @ delta
        gb[i] = delta.sum(axis=0)
        delta = delta @ params.weights[i].T
        if i > 0:
            delta = delta * (1.0 - acts[i] ** 2)
    grad_in = delta[0] if single else delta
    return GradientBundle(tuple(gw), tuple(gb), grad_in)


# --------------------------------------------------------------------------
# optimiser


@dataclass(frozen=True, eq=False)
class AdamState:
    m: tuple[np.ndarray, ...]
    v: tuple[np.ndarray, ...]
    t: int = 0

    @classmethod
    def zeros(cls, params: MlpParams) -> "AdamState":
        arrays = params.arrays()
        return cls(tuple(np.zeros_like(a) for a in arrays), tuple(np.zeros_like(a) for a in arrays), 0)


ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def adam_step(params: MlpParams, grads: GradientBundle, lr: float,
              state: AdamState) -> tuple[MlpParams, AdamState]:
    """One Adam update (beta1=0.9, beta2=0.999, eps=1e-8); returns new params and state.

    Raises:
        FloatingPointError: "diverged" if any gradient entry is not finite.
    """
    g = grads.arrays()
    if not all(np.isfinite(a).all() for a in g):
        raise FloatingPointError("diverged")
    t = state.t + 1
    c1 = 1.0 - ADAM_BETA1**t
    c2 = 1.0 - ADAM_BETA2**t
    new_p, new_m, new_v = [], [], []
    for p, gi, m, v in zip(params.arrays(), g, state.m, state.v):
        m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * gi
        v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * gi * gi
        new_p.append(p - lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS))
        new_m.append(m)
        new_v.append(v)
    return params.with_arrays(new_p), AdamState(tuple(new_m), tuple(new_v), t)


# --------------------------------------------------------------------------
# checkpoints


def params_to_bytes(params: MlpParams) -> bytes:
    """Binary layout (little-endian):

    ``magic[8] | u32 version | u32 n_sizes | u32 sizes[n_sizes] | f64 W0 | f64 b0 | ...``

    Weight matrices are row-major ``(fan_in, fan_out)``.
    """
    sizes = params.sizes
    head = CHECKPOINT_MAGIC + struct.pack(f"<II{len(sizes)}I", CHECKPOINT_VERSION, len(sizes), *sizes)
    body = b"".join(a.astype("<f8").tobytes() for a in params.arrays())
    return head + body


def params_from_bytes(data: bytes) -> MlpParams:
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError("not a network checkpoint")
    version, n = struct.unpack_from("<II", data, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    sizes = struct.unpack_from(f"<{n}I", data, 16)
    offset = 16 + 4 * n
    arrays = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        for shape in ((fan_in, fan_out), (fan_out,)):
            count = int(np.prod(shape))
            arrays.append(np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape))
            offset += 8 * count
    if offset != len(data):
        raise ValueError("trailing bytes in checkpoint")
    return MlpParams.from_arrays(arrays[0::2], arrays[1::2])


def save_params(params: MlpParams, path: str | Path) -> None:
    path = Path(path)
    path.write_bytes(params_to_bytes(params))
    manifest = {"format": "graspucb-mlp", "version": CHECKPOINT_VERSION, "sizes": list(params.sizes),
                "activation": "tanh", "checksum": params.checksum()}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(manifest, indent=1) + "\n")


def load_params(path: str | Path) -> MlpParams:
    return params_from_bytes(Path(path).read_bytes())
