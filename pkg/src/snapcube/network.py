"""Recurrent convolutional policy network with hand-written backprop.

Layout per time step::

    faces (4, S, S) -> conv5x5/2 -> conv5x5/2 -> conv3x3/2 -> FC -> f_t   (feature extractor)
    h_t = tanh(f_t Wx + h_{t-1} Wh + b)                                      (aggregator)
    pdf = softmax(FC(ReLU(FC(h_t))))                                         (predictor)

All convolutions use ReLU and ``kernel // 2`` zero padding.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

MAGIC = b"SNAP1"


@dataclass(frozen=True)
class Architecture:
    face_size: int = 64
    n_actions: int = 21
    channels: tuple = (8, 16, 32)
    kernels: tuple = (5, 5, 3)
    stride: int = 2
    feature_size: int = 128
    hidden_size: int = 128
    predictor_size: int = 64
    in_channels: int = 4

    def conv_shapes(self):
        shapes = []
        c_in, s = self.in_channels, self.face_size
        for c_out, k in zip(self.channels, self.kernels):
            s = (s + 2 * (k // 2) - k) // self.stride + 1
            shapes.append((c_out, c_in, k, k))
            c_in = c_out
        return shapes, c_in * s * s

    def param_shapes(self) -> dict:
        convs, flat = self.conv_shapes()
        shapes = {}
        for i, w in enumerate(convs, 1):
            shapes[f"conv{i}.w"] = w
            shapes[f"conv{i}.b"] = (w[0],)
        shapes["feat.w"] = (flat, self.feature_size)
        shapes["feat.b"] = (self.feature_size,)
        shapes["rnn.wx"] = (self.feature_size, self.hidden_size)
        shapes["rnn.wh"] = (self.hidden_size, self.hidden_size)
        shapes["rnn.b"] = (self.hidden_size,)
        shapes["pred1.w"] = (self.hidden_size, self.predictor_size)
        shapes["pred1.b"] = (self.predictor_size,)
        shapes["pred2.w"] = (self.predictor_size, self.n_actions)
        shapes["pred2.b"] = (self.n_actions,)
        return shapes


GROUPS = {"feature": ("conv", "feat"), "aggregator": ("rnn",), "predictor": ("pred",)}


class PolicyWeights:
    """Parameters of the feature extractor, aggregator and predictor."""

    def __init__(self, arch: Architecture, params: dict):
        expected = arch.param_shapes()
        if set(params) != set(expected):
            raise ValueError(f"parameter names {sorted(params)} do not match {sorted(expected)}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {params[name].shape}")
        self.arch = arch
        self.params = {k: np.asarray(params[k], dtype=np.float64) for k in expected}

    @classmethod
    def initialize(cls, arch: Architecture | None = None, seed=0) -> "PolicyWeights":
        arch = arch or Architecture()
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in arch.param_shapes().items():
            if name.endswith(".b"):
                params[name] = np.zeros(shape)
            else:
                fan_in = int(np.prod(shape[1:])) if name.startswith("conv") else shape[0]
                bound = 1 / np.sqrt(fan_in)
                params[name] = rng.uniform(-bound, bound, size=shape)
        return cls(arch, params)

    @classmethod
    def zeros(cls, arch: Architecture | None = None) -> "PolicyWeights":
        arch = arch or Architecture()
        return cls(arch, {k: np.zeros(s) for k, s in arch.param_shapes().items()})

    def copy(self) -> "PolicyWeights":
        return PolicyWeights(self.arch, {k: v.copy() for k, v in self.params.items()})

    def group(self, name: str) -> dict:
        prefixes = GROUPS[name]
        return {k: v for k, v in self.params.items() if k.split(".")[0].rstrip("0123456789") in prefixes}

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.params.values())

    def __getitem__(self, name):
        return self.params[name]

    # -- serialization -------------------------------------------------
    def to_bytes(self) -> bytes:
        a = self.arch
        meta = {
            "arch.face_size": [a.face_size], "arch.n_actions": [a.n_actions],
            "arch.channels": list(a.channels), "arch.kernels": list(a.kernels),
            "arch.stride": [a.stride], "arch.feature_size": [a.feature_size],
            "arch.hidden_size": [a.hidden_size], "arch.predictor_size": [a.predictor_size],
            "arch.in_channels": [a.in_channels],
        }
        tensors = [(k, np.asarray(v, dtype=np.float64)) for k, v in meta.items()]
        tensors += list(self.params.items())
        out = [MAGIC, struct.pack("<I", len(tensors))]
        for name, arr in tensors:
            raw = name.encode("utf-8")
            out.append(struct.pack("<I", len(raw)))
            out.append(raw)
            out.append(struct.pack("<I", arr.ndim))
            out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "PolicyWeights":
        if data[:len(MAGIC)] != MAGIC:
            raise ValueError("not a snapcube weights file (bad magic)")
        pos = len(MAGIC)

        def take(fmt):
            nonlocal pos
            vals = struct.unpack_from(fmt, data, pos)
            pos += struct.calcsize(fmt)
            return vals

        (count,) = take("<I")
        tensors = {}
        for _ in range(count):
            (n,) = take("<I")
            name = data[pos:pos + n].decode("utf-8")
            pos += n
            (ndim,) = take("<I")
            dims = take(f"<{ndim}I") if ndim else ()
            size = int(np.prod(dims)) if dims else 1
            arr = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(dims)
            pos += 8 * size
            tensors[name] = arr.astype(np.float64)
        meta = {k[5:]: v for k, v in tensors.items() if k.startswith("arch.")}
        ints = lambda v: tuple(int(x) for x in v)
        arch = Architecture(
            face_size=int(meta["face_size"][0]), n_actions=int(meta["n_actions"][0]),
            channels=ints(meta["channels"]), kernels=ints(meta["kernels"]),
            stride=int(meta["stride"][0]), feature_size=int(meta["feature_size"][0]),
            hidden_size=int(meta["hidden_size"][0]),
            predictor_size=int(meta["predictor_size"][0]),
            in_channels=int(meta["in_channels"][0]))
        params = {k: v for k, v in tensors.items() if not k.startswith("arch.")}
        return cls(arch, params)

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "PolicyWeights":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


# -- layers ---------------------------------------------------------------

def _windows(x, k, stride, pad):
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    return xp.shape, win


def conv_forward(x, w, b, stride):
    k = w.shape[2]
    xp_shape, win = _windows(x, k, stride, k // 2)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # B, Ho, Wo, O
    out = out.transpose(0, 3, 1, 2) + b[None, :, None, None]
    return out, (win, xp_shape)


def conv_backward(dout, w, cache, stride, need_dx=True):
    win, xp_shape = cache
    k = w.shape[2]
    pad = k // 2
    dw = np.tensordot(dout, win, axes=([0, 2, 3], [0, 2, 3]))
    db = dout.sum(axis=(0, 2, 3))
    if not need_dx:
        return None, dw, db
    ho, wo = dout.shape[2:]
    dxp = np.zeros(xp_shape)
    cols = np.tensordot(dout, w, axes=([1], [0]))  # B, Ho, Wo, C, k, k
    cols = cols.transpose(0, 3, 1, 2, 4, 5)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[..., i, j]
    return dxp[:, :, pad:xp_shape[2] - pad, pad:xp_shape[3] - pad], dw, db


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def initial_hidden(w: PolicyWeights, batch=None):
    shape = (w.arch.hidden_size,) if batch is None else (batch, w.arch.hidden_size)
    return np.zeros(shape)


# -- forward / backward ---------------------------------------------------

def extract_features(x, w: PolicyWeights, keep=False):
    """Conv stack + FC for a batch of face stacks ``(B, 4, S, S)``."""
    p = w.params
    stride = w.arch.stride
    caches = []
    a = np.asarray(x, dtype=np.float64)
    for i in range(1, len(w.arch.channels) + 1):
        z, cache = conv_forward(a, p[f"conv{i}.w"], p[f"conv{i}.b"], stride)
        a = np.maximum(z, 0)
        caches.append((cache, z))
    flat = a.reshape(a.shape[0], -1)
    zf = flat @ p["feat.w"] + p["feat.b"]
    f = np.maximum(zf, 0)
    if keep:
        return f, (caches, flat, zf, a.shape)
    return f


def _head(f, h_prev, p):
    h = np.tanh(f @ p["rnn.wx"] + h_prev @ p["rnn.wh"] + p["rnn.b"])
    z1 = h @ p["pred1.w"] + p["pred1.b"]
    a1 = np.maximum(z1, 0)
    logits = a1 @ p["pred2.w"] + p["pred2.b"]
    return h, z1, a1, logits


def forward(fg, hidden, w: PolicyWeights):
    """One step of the policy: action pdf and the next aggregator state.

    ``fg`` is a ``(4, S, S)`` lateral-face stack (or a batch of them with a
    matching batch of hidden states).
    """
    x = getattr(fg, "lateral_faces", fg)
    x = np.asarray(x)
    single = x.ndim == 3
    if single:
        x = x[None]
        hidden = np.asarray(hidden)[None]
    s = w.arch.face_size
    if x.shape[1:] != (w.arch.in_channels, s, s):
        raise ValueError(f"expected faces of shape ({w.arch.in_channels}, {s}, {s}), "
                         f"got {x.shape[1:]}")
    if hidden.shape != (x.shape[0], w.arch.hidden_size):
        raise ValueError(f"hidden state shape {hidden.shape} does not match the network")
    f = extract_features(x, w)
    h, _, _, logits = _head(f, hidden, w.params)
    pdf = softmax(logits)
    if single:
        return pdf[0], h[0]
    return pdf, h


def episode_forward(obs, w: PolicyWeights):
    """Run whole episodes; ``obs`` is ``(B, T, 4, S, S)``. Returns pdfs and caches."""
    obs = np.asarray(obs)
    b, t = obs.shape[:2]
    f, fcache = extract_features(obs.reshape((b * t,) + obs.shape[2:]), w, keep=True)
    f = f.reshape(b, t, -1)
    h = initial_hidden(w, b)
    steps = []
    pdfs = np.empty((b, t, w.arch.n_actions))
    for i in range(t):
        h_prev = h
        h, z1, a1, logits = _head(f[:, i], h_prev, w.params)
        pdfs[:, i] = softmax(logits)
        steps.append((h_prev, h, z1, a1))
    return pdfs, (f, fcache, steps)


def surrogate(obs, actions, rewards, w: PolicyWeights) -> float:
    """REINFORCE objective ``sum_b sum_t R[b, t] * log pi(a[b, t])``."""
    pdfs, _ = episode_forward(obs, w)
    b, t = np.indices(actions.shape)
    return float(np.sum(rewards * np.log(pdfs[b, t, actions])))


def surrogate_grad(obs, actions, rewards, w: PolicyWeights, entropy_coef=0.0):
    """Gradient of :func:`surrogate` with respect to every parameter.

    A positive ``entropy_coef`` adds that multiple of the summed per-step
    policy entropy to the objective.
    """
    actions = np.asarray(actions)
    rewards = np.asarray(rewards, dtype=np.float64)
    p = w.params
    pdfs, (f, fcache, steps) = episode_forward(obs, w)
    bsz, tlen, n_act = pdfs.shape
    onehot = np.eye(n_act)[actions]
    dlogits = rewards[..., None] * (onehot - pdfs)
    if entropy_coef:
        logp = np.log(np.maximum(pdfs, 1e-300))
        ent = -(pdfs * logp).sum(-1, keepdims=True)
        dlogits -= entropy_coef * pdfs * (logp + ent)

    g = {k: np.zeros_like(v) for k, v in p.items()}
    df = np.zeros_like(f)
    dh_next = np.zeros((bsz, w.arch.hidden_size))
    for i in reversed(range(tlen)):
        h_prev, h, z1, a1 = steps[i]
        dl = dlogits[:, i]
        g["pred2.w"] += a1.T @ dl
        g["pred2.b"] += dl.sum(0)
        dz1 = (dl @ p["pred2.w"].T) * (z1 > 0)
        g["pred1.w"] += h.T @ dz1
        g["pred1.b"] += dz1.sum(0)
        dh = dz1 @ p["pred1.w"].T + dh_next
        dpre = dh * (1 - h * h)
        g["rnn.wx"] += f[:, i].T @ dpre
        g["rnn.wh"] += h_prev.T @ dpre
        g["rnn.b"] += dpre.sum(0)
        df[:, i] = dpre @ p["rnn.wx"].T
        dh_next = dpre @ p["rnn.wh"].T

    caches, flat, zf, a_shape = fcache
    dzf = df.reshape(bsz * tlen, -1) * (zf > 0)
    g["feat.w"] += flat.T @ dzf
    g["feat.b"] += dzf.sum(0)
    da = (dzf @ p["feat.w"].T).reshape(a_shape)
    stride = w.arch.stride
    for i in reversed(range(len(caches))):
        cache, z = caches[i]
        dz = da * (z > 0)
        dx, dw, db = conv_backward(dz, p[f"conv{i + 1}.w"], cache, stride, need_dx=i > 0)
        g[f"conv{i + 1}.w"] += dw
        g[f"conv{i + 1}.b"] += db
        da = dx
    return g
