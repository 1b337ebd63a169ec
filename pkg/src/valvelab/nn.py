"""Minimal MLP numerics: forward, exact reverse-mode gradients, Adam,
soft target updates, and a portable array container for checkpoints.

Networks are plain lists of numpy arrays (float64 throughout). Hidden
activations are ReLU; the output is either identity or tanh. This is all
the machinery the actor-critic agents need, with no framework behind it.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Mlp",
    "AdamState",
    "mlp_init",
    "mlp_forward",
    "mlp_forward_cache",
    "mlp_backward",
    "mlp_gradient",
    "adam_init",
    "adam_step",
    "soft_update",
    "mlp_to_arrays",
    "mlp_from_arrays",
    "save_arrays",
    "load_arrays",
]

_SQUASHES = ("identity", "tanh")


@dataclass
class Mlp:
    """Weights/biases per layer plus the output squash name.

    weights[i] has shape (fan_in, fan_out); biases[i] shape (fan_out,).
    """

    weights: list = field(default_factory=list)
    biases: list = field(default_factory=list)
    out_squash: str = "identity"

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def parameters(self) -> list:
        """Flat parameter list [W0, b0, W1, b1, ...] (live views)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def copy(self) -> "Mlp":
        return Mlp(
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            out_squash=self.out_squash,
        )


def mlp_init(
    sizes,
    rng: np.random.Generator,
    out_squash: str = "identity",
    final_scale: float = 1.0,
) -> Mlp:
    """Build an MLP with uniform fan-in initialization.

    sizes is the full layer-width chain (in, hidden..., out). Entries are
    drawn U(-1/sqrt(fan_in), +1/sqrt(fan_in)); the last layer is scaled by
    final_scale (0.01 for actor/perturbation nets keeps the initial policy
    near zero).
    """
    if len(sizes) < 2:
        raise ValueError("need at least input and output widths")
    if out_squash not in _SQUASHES:
        raise ValueError(f"out_squash must be one of {_SQUASHES}")
    weights, biases = [], []
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = 1.0 / np.sqrt(n_in)
        w = rng.uniform(-bound, bound, size=(n_in, n_out))
        b = rng.uniform(-bound, bound, size=n_out)
        if i == len(sizes) - 2:
            w *= final_scale
            b *= final_scale
        weights.append(w)
        biases.append(b)
    return Mlp(weights=weights, biases=biases, out_squash=out_squash)


def _as_batch(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return x[None, :], True
    if x.ndim == 2:
        return x, False
    raise ValueError(f"input must be 1-d or 2-d, got shape {x.shape}")


def mlp_forward(net: Mlp, x) -> np.ndarray:
    """Evaluate the network; accepts a single vector or a (batch, in) array."""
    y, _ = mlp_forward_cache(net, x)
    return y


def mlp_forward_cache(net: Mlp, x):
    """Forward pass keeping per-layer activations for the backward pass.

    Returns (output, cache); the 1-d/2-d convention of the input carries
    through to the output.
    """
    h, squeeze = _as_batch(x)
    if h.shape[1] != net.in_dim:
        raise ValueError(f"input width {h.shape[1]} != network in_dim {net.in_dim}")
    acts = [h]
    n = len(net.weights)
    for i in range(n):
        z = h @ net.weights[i] + net.biases[i]
        if i < n - 1:
            h = np.maximum(z, 0.0)
        elif net.out_squash == "tanh":
            h = np.tanh(z)
        else:
            h = z
        acts.append(h)
    out = acts[-1][0] if squeeze else acts[-1]
    return out, (acts, squeeze)


def mlp_backward(net: Mlp, cache, upstream):
    """Reverse-mode gradients of sum(output * upstream).

    Args:
        cache: second element returned by mlp_forward_cache.
        upstream: array shaped like the output (seed of the backward pass;
            for a mean loss the caller folds the 1/batch factor in here).

    Returns:
        (grads, dx): grads is the flat list [dW0, db0, dW1, db1, ...]
        aligned with Mlp.parameters(); dx is the gradient w.r.t. the input,
        shaped like it.
    """
    acts, squeeze = cache
    g, _ = _as_batch(upstream)
    if g.shape != acts[-1].shape:
        raise ValueError(f"upstream shape {g.shape} != output shape {acts[-1].shape}")
    g = g.astype(float, copy=True)
    if net.out_squash == "tanh":
        g *= 1.0 - acts[-1] ** 2
    n = len(net.weights)
    dws: list = [None] * n
    dbs: list = [None] * n
    for i in range(n - 1, -1, -1):
        dws[i] = acts[i].T @ g
        dbs[i] = g.sum(axis=0)
        g = g @ net.weights[i].T
        if i > 0:
            g *= acts[i] > 0.0
    grads = []
    for dw, db in zip(dws, dbs):
        grads.append(dw)
        grads.append(db)
    dx = g[0] if squeeze else g
    return grads, dx


def mlp_gradient(net: Mlp, x, upstream):
    """Forward + backward in one call; see mlp_backward for the contract."""
    _, cache = mlp_forward_cache(net, x)
    return mlp_backward(net, cache, upstream)


@dataclass
class AdamState:
    """Optimizer state over a flat parameter list."""

    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_init(params, lr: float = 3e-4, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    return AdamState(
        lr=lr, beta1=beta1, beta2=beta2, eps=eps, step=0,
        m=[np.zeros_like(p) for p in params],
        v=[np.zeros_like(p) for p in params],
    )


def adam_step(state: AdamState, params, grads) -> None:
    """One bias-corrected Adam update, mutating params in place."""
    if not (len(params) == len(grads) == len(state.m)):
        raise ValueError("params, grads and optimizer state are misaligned")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def soft_update(target: Mlp, online: Mlp, tau: float) -> Mlp:
    """target <- (1-tau)*target + tau*online, elementwise in place."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must be in [0, 1]")
    tp, op = target.parameters(), online.parameters()
    if len(tp) != len(op):
        raise ValueError("networks have different layer counts")
    for t, o in zip(tp, op):
        if t.shape != o.shape:
            raise ValueError(f"shape mismatch {t.shape} vs {o.shape}")
        t *= 1.0 - tau
        t += tau * o
    return target


# --- checkpoint container ------------------------------------------------
#
# A zip file holding manifest.json plus one .bin blob per named array.
# Blobs are raw little-endian float64 in C order; the manifest records
# shapes, so a round trip is bit-exact on any platform.

_FORMAT_NAME = "valvelab-arrays"
_FORMAT_VERSION = 1


def save_arrays(path, arrays: dict, meta: dict | None = None) -> None:
    """Write named float arrays plus a JSON metadata block.

    Args:
        arrays: name -> array; names must be nonempty and unique (dict
            guarantees uniqueness) and are used as blob file names.
        meta: JSON-serializable extras stored verbatim in the manifest.
    """
    entries = {}
    blobs = {}
    for name, arr in arrays.items():
        if not name:
            raise ValueError("array names must be nonempty")
        a = np.asarray(arr, dtype="<f8")
        if not a.flags.c_contiguous:
            a = np.ascontiguousarray(a)
        entries[name] = {"shape": list(a.shape), "file": f"{name}.bin"}
        blobs[f"{name}.bin"] = a.tobytes()
    manifest = {
        "format": _FORMAT_NAME,
        "version": _FORMAT_VERSION,
        "arrays": entries,
        "meta": meta if meta is not None else {},
    }
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, indent=2, sort_keys=True))
        for fname in sorted(blobs):
            zf.writestr(fname, blobs[fname])
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_arrays(path) -> tuple[dict, dict]:
    """Read a container written by save_arrays; returns (arrays, meta)."""
    try:
        zf = zipfile.ZipFile(path, "r")
    except zipfile.BadZipFile as exc:
        raise ValueError(f"{path}: not an array container ({exc})") from exc
    with zf:
        try:
            manifest = json.loads(zf.read("manifest.json"))
        except (KeyError, json.JSONDecodeError) as exc:
            raise ValueError(f"{path}: corrupted manifest ({exc})") from exc
        if manifest.get("format") != _FORMAT_NAME:
            raise ValueError(f"{path}: not a {_FORMAT_NAME} container")
        if manifest.get("version") != _FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported container version")
        arrays = {}
        for name, entry in manifest["arrays"].items():
            raw = zf.read(entry["file"])
            shape = tuple(entry["shape"])
            arr = np.frombuffer(raw, dtype="<f8").reshape(shape)
            arrays[name] = arr.astype(np.float64, copy=True)
        return arrays, manifest["meta"]


def mlp_to_arrays(net: Mlp, prefix: str) -> dict:
    """Flatten a network into {prefix.w0, prefix.b0, ...} for save_arrays."""
    out = {}
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        out[f"{prefix}.w{i}"] = w
        out[f"{prefix}.b{i}"] = b
    return out


def mlp_from_arrays(arrays: dict, prefix: str, out_squash: str) -> Mlp:
    """Rebuild a network saved by mlp_to_arrays; layers found by scan."""
    if out_squash not in _SQUASHES:
        raise ValueError(f"out_squash must be one of {_SQUASHES}")
    weights, biases = [], []
    i = 0
    while f"{prefix}.w{i}" in arrays:
        weights.append(arrays[f"{prefix}.w{i}"].copy())
        biases.append(arrays[f"{prefix}.b{i}"].copy())
        i += 1
    if not weights:
        raise ValueError(f"no layers under prefix {prefix!r}")
    return Mlp(weights=weights, biases=biases, out_squash=out_squash)
