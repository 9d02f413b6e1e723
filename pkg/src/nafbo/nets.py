"""Minimal dense networks with hand-rolled reverse-mode gradients.

Double precision throughout; relu hidden layers and an identity output.
The optimizer mirrors standard adaptive-moment updates (beta1=0.9,
beta2=0.999, eps=1e-8).  No gradient clipping is applied anywhere.
Checkpoints use a small versioned binary layout so reloads are
bit-identical.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CKPT_MAGIC = b"NAFBO-CKPT v1\n"


class StaleCacheError(RuntimeError):
    """Raised when backward() receives a cache from an older forward pass."""


@dataclass
class ForwardCache:
    version: int
    layer_inputs: list[np.ndarray]


class Mlp:
    """Fully connected network: widths[0] inputs, widths[-1] outputs.

    Hidden layers use variance-scaled (He) initialisation; the final
    layer's weights are multiplied by ``final_scale`` so a policy head can
    start near-uniform.
    """

    def __init__(self, widths: list[int], rng: np.random.Generator,
                 final_scale: float = 1.0):
        if len(widths) < 2 or any(w < 1 for w in widths):
            raise ValueError(f"need at least [in, out] positive widths, got {widths}")
        self.widths = list(widths)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            scale = np.sqrt(2.0 / fan_in)
            if i == len(widths) - 2:
                scale *= final_scale
            self.weights.append(scale * rng.standard_normal((fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))
        self.version = 0

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def set_params(self, params: list[np.ndarray]) -> None:
        if len(params) != 2 * self.n_layers:
            raise ValueError("parameter list length mismatch")
        for i in range(self.n_layers):
            w, b = params[2 * i], params[2 * i + 1]
            if w.shape != self.weights[i].shape or b.shape != self.biases[i].shape:
                raise ValueError("parameter shape mismatch")
            self.weights[i] = w
            self.biases[i] = b
        self.version += 1

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.widths[0]:
            raise ValueError(f"expected {self.widths[0]} input features, got {x.shape[1]}")
        inputs = [x]
        h = x
        for i in range(self.n_layers):
            z = h @ self.weights[i] + self.biases[i]
            h = z if i == self.n_layers - 1 else np.maximum(z, 0.0)
            if i < self.n_layers - 1:
                inputs.append(h)
        return h, ForwardCache(self.version, inputs)

    def backward(self, cache: ForwardCache, dout: np.ndarray) -> list[np.ndarray]:
        """Gradients of sum(dout * output) wrt params, matching params() order."""
        if cache.version != self.version:
            raise StaleCacheError("forward cache predates the current parameters")
        dout = np.atleast_2d(np.asarray(dout, dtype=np.float64))
        grads: list[np.ndarray] = [None] * (2 * self.n_layers)
        delta = dout
        for i in range(self.n_layers - 1, -1, -1):
            h_in = cache.layer_inputs[i]
            grads[2 * i] = h_in.T @ delta
            grads[2 * i + 1] = delta.sum(axis=0)
            if i > 0:
                delta = (delta @ self.weights[i].T) * (cache.layer_inputs[i] > 0)
        return grads


@dataclass
class AdamState:
    """First/second moment accumulators; created lazily from the param list."""

    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    t: int = 0


def adam_step(params: list[np.ndarray], grads: list[np.ndarray],
              state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> list[np.ndarray]:
    """One adaptive-moment descent step; returns new params, advances state."""
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(grads) != len(params):
        raise ValueError("params/grads length mismatch")
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = beta1 * state.m[i] + (1 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1 - beta2) * g * g
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        out.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
    return out


HIDDEN_WIDTHS = [200, 200, 200, 200]


def init_policy_net(in_width: int, rng: np.random.Generator) -> Mlp:
    """Policy head over per-candidate features; starts near-uniform."""
    return Mlp([in_width, *HIDDEN_WIDTHS, 1], rng, final_scale=0.01)


def init_value_net(rng: np.random.Generator) -> Mlp:
    """Scalar value estimate from (step, budget) alone."""
    return Mlp([2, *HIDDEN_WIDTHS, 1], rng)


def finite_difference_check(net: Mlp, x: np.ndarray, dout: np.ndarray,
                            h: float = 1e-5) -> float:
    """Worst relative error between backward() and central differences."""
    _, cache = net.forward(x)
    grads = net.backward(cache, dout)
    params = net.params()
    worst = 0.0
    for pi, p in enumerate(params):
        flat = p.ravel()
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            up = float(np.sum(net.forward(x)[0] * dout))
            flat[j] = orig - h
            dn = float(np.sum(net.forward(x)[0] * dout))
            flat[j] = orig
            fd = (up - dn) / (2 * h)
            an = grads[pi].ravel()[j]
            denom = max(abs(fd), abs(an), 1e-8)
            worst = max(worst, abs(fd - an) / denom)
    return worst


def save_checkpoint(path: str | Path, policy: Mlp, value: Mlp, meta: dict) -> None:
    """Write both networks: magic, JSON header, then raw row-major blocks."""
    header = {
        "policy_widths": policy.widths,
        "value_widths": value.widths,
        "dtype": "<f8",
        "meta": meta,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for net in (policy, value):
            for w, b in zip(net.weights, net.biases):
                fh.write(np.ascontiguousarray(w).tobytes())
                fh.write(b.tobytes())


def load_checkpoint(path: str | Path) -> tuple[Mlp, Mlp, dict]:
    with open(path, "rb") as fh:
        magic = fh.read(len(CKPT_MAGIC))
        if magic != CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic {magic!r})")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode())
        nets = []
        for widths in (header["policy_widths"], header["value_widths"]):
            net = Mlp(widths, np.random.default_rng(0))
            params = []
            for fan_in, fan_out in zip(widths[:-1], widths[1:]):
                w = np.frombuffer(fh.read(8 * fan_in * fan_out)).reshape(fan_in, fan_out)
                b = np.frombuffer(fh.read(8 * fan_out))
                params.extend([w.copy(), b.copy()])
            net.set_params(params)
            nets.append(net)
        trailing = fh.read(1)
        if trailing:
            raise ValueError(f"{path}: trailing bytes after parameter blocks")
    return nets[0], nets[1], header["meta"]
