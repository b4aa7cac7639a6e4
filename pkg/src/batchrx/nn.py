"""Network building blocks: dense layers, an LSTM cell with sequence
unrolling, MLPs, Glorot initialization, and binary checkpoint files.

Every block has two forward paths that share the same parameter tensors:

* a taped path (``forward(tape, x)``) used during training, differentiable
  through :mod:`batchrx.autodiff`;
* a raw numpy path (``forward_raw(x)``) for inference, target computation
  and rollouts, where no gradients are needed.

The two paths are required to agree bitwise; the test suite checks this.
"""

from __future__ import annotations

import json
import struct

import numpy as np
from scipy.special import expit

from .autodiff import ShapeError, Tape, Tensor

ACTIVATIONS = ("tanh", "relu", "sigmoid", "linear")

CHECKPOINT_MAGIC = b"BXP\x01"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Checkpoint file is malformed or does not match the architecture."""


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int,
                   shape: tuple[int, int]) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class DenseLayer:
    """Affine map plus pointwise activation.

    The weight is stored as (in, out) so a batch (B, in) forwards with a
    single matmul; the bias is a (1, out) row broadcast across the batch.
    """

    def __init__(self, w: Tensor, b: Tensor, activation: str):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.w = w
        self.b = b
        self.activation = activation

    @property
    def n_in(self) -> int:
        return self.w.shape[0]

    @property
    def n_out(self) -> int:
        return self.w.shape[1]

    def forward(self, tape: Tape, x: Tensor) -> Tensor:
        z = tape.add(tape.matmul(x, self.w), self.b)
        if self.activation == "tanh":
            return tape.tanh(z)
        if self.activation == "relu":
            return tape.relu(z)
        if self.activation == "sigmoid":
            return tape.sigmoid(z)
        return z

    def forward_raw(self, x: np.ndarray) -> np.ndarray:
        z = x @ self.w.values + self.b.values
        if self.activation == "tanh":
            return np.tanh(z)
        if self.activation == "relu":
            return np.maximum(z, 0.0)
        if self.activation == "sigmoid":
            return expit(z)
        return z

    def named_params(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        return [(f"{prefix}w", self.w), (f"{prefix}b", self.b)]


class Mlp:
    """A stack of dense layers with conforming shapes."""

    def __init__(self, layers: list[DenseLayer]):
        for a, b in zip(layers, layers[1:]):
            if a.n_out != b.n_in:
                raise ShapeError(f"mlp: layer widths {a.n_out} and {b.n_in} do not conform")
        self.layers = layers

    @property
    def n_in(self) -> int:
        return self.layers[0].n_in

    @property
    def n_out(self) -> int:
        return self.layers[-1].n_out

    def forward(self, tape: Tape, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer.forward(tape, x)
        return x

    def forward_raw(self, x: np.ndarray) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward_raw(x)
        return x

    def named_params(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = []
        for i, layer in enumerate(self.layers):
            out.extend(layer.named_params(f"{prefix}l{i}."))
        return out


class LstmCell:
    """Single LSTM cell: input, forget, output gates and a tanh candidate.

    Each gate has a (in+H, H) weight applied to the concatenated [h, x]
    and a (1, H) bias.  Hidden state components stay in (-1, 1) because
    h = sigmoid(.) * tanh(c).
    """

    GATES = ("i", "f", "o", "g")

    def __init__(self, input_size: int, hidden_size: int,
                 weights: dict[str, Tensor], biases: dict[str, Tensor]):
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.weights = weights
        self.biases = biases

    def _fused(self, tape: Tape) -> tuple[Tensor, Tensor]:
        # One concat per unroll lets every step run a single matmul.
        w = tape.concat([self.weights[g] for g in self.GATES], axis=1)
        b = tape.concat([self.biases[g] for g in self.GATES], axis=1)
        return w, b

    def step(self, tape: Tape, w: Tensor, b: Tensor, x: Tensor,
             h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        hx = tape.concat([h, x], axis=1)
        pre = tape.add(tape.matmul(hx, w), b)
        H = self.hidden_size
        i = tape.sigmoid(tape.slice(pre, 0, H))
        f = tape.sigmoid(tape.slice(pre, H, 2 * H))
        o = tape.sigmoid(tape.slice(pre, 2 * H, 3 * H))
        g = tape.tanh(tape.slice(pre, 3 * H, 4 * H))
        c_next = tape.add(tape.mul(f, c), tape.mul(i, g))
        h_next = tape.mul(o, tape.tanh(c_next))
        return h_next, c_next

    def step_raw(self, w: np.ndarray, b: np.ndarray, x: np.ndarray,
                 h: np.ndarray, c: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        pre = np.concatenate([h, x], axis=1) @ w + b
        H = self.hidden_size
        i = expit(pre[:, :H])
        f = expit(pre[:, H:2 * H])
        o = expit(pre[:, 2 * H:3 * H])
        g = np.tanh(pre[:, 3 * H:])
        c_next = f * c + i * g
        return o * np.tanh(c_next), c_next

    def fused_raw(self) -> tuple[np.ndarray, np.ndarray]:
        w = np.concatenate([self.weights[g].values for g in self.GATES], axis=1)
        b = np.concatenate([self.biases[g].values for g in self.GATES], axis=1)
        return w, b

    def named_params(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = []
        for g in self.GATES:
            out.append((f"{prefix}w_{g}", self.weights[g]))
        for g in self.GATES:
            out.append((f"{prefix}b_{g}", self.biases[g]))
        return out


def lstm_unroll(tape: Tape, cell: LstmCell, sequence: list[np.ndarray]) -> Tensor:
    """Run one sequence through the cell from zero state; returns h_T.

    Differentiable through all steps (backpropagation through time).
    """
    if not sequence:
        raise ShapeError("lstm_unroll: empty sequence")
    steps = []
    for x in sequence:
        x = np.asarray(x, dtype=np.float64).reshape(1, -1)
        if x.shape[1] != cell.input_size:
            raise ShapeError(
                f"lstm_unroll: input width {x.shape[1]} != cell width {cell.input_size}")
        steps.append(Tensor(x))
    w, b = cell._fused(tape)
    h = Tensor(np.zeros((1, cell.hidden_size)))
    c = Tensor(np.zeros((1, cell.hidden_size)))
    for x in steps:
        h, c = cell.step(tape, w, b, x, h, c)
    return h


def lstm_unroll_batch(tape: Tape, cell: LstmCell, steps: list[Tensor],
                      masks: list[np.ndarray]) -> tuple[Tensor, Tensor]:
    """Batched unroll over right-padded sequences; returns (h_T, c_T).

    `steps[k]` is the (B, in) input at step k; `masks[k]` is (B, 1) with 1
    while the sequence is live and 0 on padding.  Padded steps carry the
    previous state through unchanged, so h_T equals each row's final live
    state and padding contributes no gradient.
    """
    B = steps[0].shape[0]
    w, b = cell._fused(tape)
    h = Tensor(np.zeros((B, cell.hidden_size)))
    c = Tensor(np.zeros((B, cell.hidden_size)))
    for x, m in zip(steps, masks):
        m_t = Tensor(m)
        inv = Tensor(1.0 - m)
        h_new, c_new = cell.step(tape, w, b, x, h, c)
        h = tape.add(tape.mul(m_t, h_new), tape.mul(inv, h))
        c = tape.add(tape.mul(m_t, c_new), tape.mul(inv, c))
    return h, c


def lstm_unroll_raw(cell: LstmCell, steps: list[np.ndarray],
                    masks: list[np.ndarray] | None = None) -> np.ndarray:
    """No-tape twin of the batched unroll (single sequences: B=1, no mask)."""
    w, b = cell.fused_raw()
    B = steps[0].shape[0]
    h = np.zeros((B, cell.hidden_size))
    c = np.zeros((B, cell.hidden_size))
    for k, x in enumerate(steps):
        h_new, c_new = cell.step_raw(w, b, x, h, c)
        if masks is None:
            h, c = h_new, c_new
        else:
            m = masks[k]
            h = m * h_new + (1.0 - m) * h
            c = m * c_new + (1.0 - m) * c
    return h


# --- construction ---

def make_dense(rng: np.random.Generator, n_in: int, n_out: int,
               activation: str, name: str = "") -> DenseLayer:
    w = Tensor(glorot_uniform(rng, n_in, n_out, (n_in, n_out)), name=f"{name}w")
    b = Tensor(np.zeros((1, n_out)), name=f"{name}b")
    return DenseLayer(w, b, activation)


def make_mlp(rng: np.random.Generator, sizes: list[int],
             activations: list[str], name: str = "") -> Mlp:
    if len(activations) != len(sizes) - 1:
        raise ValueError("make_mlp: need one activation per layer")
    layers = [
        make_dense(rng, sizes[i], sizes[i + 1], activations[i], name=f"{name}l{i}.")
        for i in range(len(sizes) - 1)
    ]
    return Mlp(layers)


def make_lstm(rng: np.random.Generator, input_size: int, hidden_size: int,
              name: str = "") -> LstmCell:
    fan_in = input_size + hidden_size
    weights = {}
    biases = {}
    for g in LstmCell.GATES:
        weights[g] = Tensor(
            glorot_uniform(rng, fan_in, hidden_size, (fan_in, hidden_size)),
            name=f"{name}w_{g}")
        biases[g] = Tensor(np.zeros((1, hidden_size)), name=f"{name}b_{g}")
    return LstmCell(input_size, hidden_size, weights, biases)


# --- checkpoint files (.bxp) ---
#
# Layout: magic "BXP\x01", uint32 little-endian header length, UTF-8 JSON
# header {"version", "meta", "tensors": [{"name", "shape"}, ...]}, then the
# tensors' float64 values little-endian C-order, in header order.

def save_params(named: list[tuple[str, Tensor]], path, meta: dict | None = None) -> None:
    header = {
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "tensors": [{"name": n, "shape": list(t.shape)} for n, t in named],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, t in named:
            fh.write(np.ascontiguousarray(t.values, dtype="<f8").tobytes())


def read_params(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a checkpoint into (meta, {name: array}). Raises CheckpointError
    on truncation, bad magic, or version mismatch."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8 or raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a parameter checkpoint")
    (hlen,) = struct.unpack("<I", raw[4:8])
    if len(raw) < 8 + hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc})") from None
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: version {header.get('version')} != {CHECKPOINT_VERSION}")
    offset = 8 + hlen
    arrays: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated at tensor {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(
            raw[offset:offset + nbytes], dtype="<f8").reshape(shape).copy()
        offset += nbytes
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return header.get("meta", {}), arrays


def load_params(named: list[tuple[str, Tensor]], path) -> dict:
    """Load a checkpoint into existing tensors; returns the meta dict.

    The checkpoint must carry exactly the expected tensor names with
    matching shapes, otherwise CheckpointError describes the mismatch.
    """
    meta, arrays = read_params(path)
    expected = {n: t for n, t in named}
    missing = sorted(set(expected) - set(arrays))
    extra = sorted(set(arrays) - set(expected))
    if missing or extra:
        raise CheckpointError(
            f"{path}: tensor names differ (missing {missing}, unexpected {extra})")
    for n, t in named:
        if arrays[n].shape != t.shape:
            raise CheckpointError(
                f"{path}: tensor {n!r} has shape {arrays[n].shape}, expected {t.shape}")
    for n, t in named:
        t.values = arrays[n]
    return meta
