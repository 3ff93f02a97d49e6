"""Neural building blocks on top of the autodiff tape.

Parameter storage, Xavier-uniform initialization, shared-weight MLPs,
multi-head self/cross attention, and the binary weight-file format with its
JSON manifest sidecar.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor

WEIGHT_MAGIC = b"DPMW"
WEIGHT_FORMAT_VERSION = 1


class WeightFileError(RuntimeError):
    pass


class ParameterStore:
    """Ordered named parameters with deterministic seeded initialization.

    Weight sharing is expressed by multiple call sites referencing one name.
    The store is treated as immutable during inference and may then be shared
    across threads; the optimizer owns it exclusively while training.
    """

    def __init__(self, rng_seed: int = 0):
        self.rng_seed = int(rng_seed)
        self._rng = np.random.default_rng(self.rng_seed)
        self._params: dict[str, np.ndarray] = {}

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self._params[name]
        except KeyError:
            raise WeightFileError(f"unknown parameter {name!r}") from None

    def __setitem__(self, name: str, value: np.ndarray):
        self._params[name] = np.asarray(value, dtype=np.float64)

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params.keys())

    def items(self):
        return self._params.items()

    def copy(self) -> "ParameterStore":
        out = ParameterStore(self.rng_seed)
        for k, v in self._params.items():
            out[k] = v.copy()
        return out

    # ------------------------------------------------------------------
    # initializers
    # ------------------------------------------------------------------
    def add_linear(self, prefix: str, fan_in: int, fan_out: int):
        """Weight uniform in +-sqrt(6/(fan_in+fan_out)), zero bias."""
        if f"{prefix}.w" in self._params:
            return
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        self[f"{prefix}.w"] = self._rng.uniform(-bound, bound, size=(fan_in, fan_out))
        self[f"{prefix}.b"] = np.zeros(fan_out)

    def add_layer_norm(self, prefix: str, dim: int):
        if f"{prefix}.gain" in self._params:
            return
        self[f"{prefix}.gain"] = np.ones(dim)
        self[f"{prefix}.bias"] = np.zeros(dim)

    def add_mlp(self, prefix: str, dims: list[int] | tuple[int, ...]):
        for i in range(len(dims) - 1):
            self.add_linear(f"{prefix}.l{i}", dims[i], dims[i + 1])


def linear_forward(tape: Tape, store: ParameterStore, prefix: str, x: Tensor) -> Tensor:
    w = tape.param(store, f"{prefix}.w")
    b = tape.param(store, f"{prefix}.b")
    return ad.add(ad.matmul(x, w), b)


def mlp_forward(
    tape: Tape,
    store: ParameterStore,
    prefix: str,
    x: Tensor,
    layer_dims: list[int] | tuple[int, ...],
) -> Tensor:
    """linear -> relu per hidden layer, final layer linear."""
    if x.data.shape[-1] != layer_dims[0]:
        raise ad.ShapeError(
            f"mlp_forward: input last dim {x.data.shape[-1]} != layer_dims[0] {layer_dims[0]}"
        )
    h = x
    n_layers = len(layer_dims) - 1
    for i in range(n_layers):
        h = linear_forward(tape, store, f"{prefix}.l{i}", h)
        if i < n_layers - 1:
            h = ad.relu(h)
    return h


def layer_norm_forward(tape: Tape, store: ParameterStore, prefix: str, x: Tensor) -> Tensor:
    gain = tape.param(store, f"{prefix}.gain")
    bias = tape.param(store, f"{prefix}.bias")
    return ad.layer_norm(x, gain, bias)


def add_attention_params(store: ParameterStore, prefix: str, dim: int):
    for part in ("q", "k", "v", "o"):
        store.add_linear(f"{prefix}.{part}", dim, dim)


def multi_head_attention(
    tape: Tape,
    store: ParameterStore,
    prefix: str,
    queries_src: Tensor,
    keyval_src: Tensor,
    heads: int,
) -> Tensor:
    """Scaled dot-product attention; self-attention when both sources coincide.

    ``queries_src`` is (M, D), ``keyval_src`` is (N, D), output is (M, D).
    """
    d = queries_src.data.shape[-1]
    if d % heads != 0:
        raise ad.ShapeError(f"attention: dim {d} not divisible by {heads} heads")
    dh = d // heads
    q = linear_forward(tape, store, f"{prefix}.q", queries_src)
    k = linear_forward(tape, store, f"{prefix}.k", keyval_src)
    v = linear_forward(tape, store, f"{prefix}.v", keyval_src)
    outs = []
    for h in range(heads):
        qh = ad.slice_cols(q, h * dh, (h + 1) * dh)
        kh = ad.slice_cols(k, h * dh, (h + 1) * dh)
        vh = ad.slice_cols(v, h * dh, (h + 1) * dh)
        scores = ad.scale(ad.matmul(qh, ad.transpose(kh)), 1.0 / np.sqrt(dh))
        attn = ad.softmax(scores)
        outs.append(ad.matmul(attn, vh))
    merged = outs[0]
    for o in outs[1:]:
        merged = ad.concat(merged, o)
    return linear_forward(tape, store, f"{prefix}.o", merged)


# ----------------------------------------------------------------------
# weight file IO
#
# layout: magic "DPMW", version u32, count u32, then per parameter:
#   name length u16, UTF-8 name, rank u8, dims u32 each,
#   payload little-endian IEEE-754 float32.
# A JSON manifest sidecar (<path>.manifest.json) lists names and shapes.
# ----------------------------------------------------------------------
def save_weights(store: ParameterStore, path: str | Path) -> Path:
    path = Path(path)
    chunks = [WEIGHT_MAGIC, struct.pack("<II", WEIGHT_FORMAT_VERSION, len(store))]
    manifest = {"format_version": WEIGHT_FORMAT_VERSION, "rng_seed": store.rng_seed, "parameters": []}
    for name, value in store.items():
        raw_name = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack("<B", value.ndim))
        chunks.append(struct.pack(f"<{value.ndim}I", *value.shape))
        chunks.append(value.astype("<f4").tobytes())
        manifest["parameters"].append({"name": name, "shape": list(value.shape)})
    path.write_bytes(b"".join(chunks))
    manifest_path = path.with_suffix(path.suffix + ".manifest.json")
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_weights(path: str | Path, expected_manifest: dict | None = None) -> ParameterStore:
    """Read a weight file; optionally check names/shapes against a manifest."""
    raw = Path(path).read_bytes()
    if raw[:4] != WEIGHT_MAGIC:
        raise WeightFileError(f"{path}: bad magic {raw[:4]!r}")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != WEIGHT_FORMAT_VERSION:
        raise WeightFileError(f"{path}: format version {version}, expected {WEIGHT_FORMAT_VERSION}")
    off = 12
    store = ParameterStore()
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off : off + name_len].decode("utf-8")
        off += name_len
        (rank,) = struct.unpack_from("<B", raw, off)
        off += 1
        shape = struct.unpack_from(f"<{rank}I", raw, off)
        off += 4 * rank
        n = int(np.prod(shape)) if rank else 1
        values = np.frombuffer(raw, dtype="<f4", count=n, offset=off).astype(np.float64)
        off += 4 * n
        store[name] = values.reshape(shape)
    if off != len(raw):
        raise WeightFileError(f"{path}: {len(raw) - off} trailing bytes")
    if expected_manifest is not None:
        expected = {p["name"]: tuple(p["shape"]) for p in expected_manifest["parameters"]}
        actual = {k: v.shape for k, v in store.items()}
        if expected != actual:
            missing = sorted(set(expected) - set(actual))
            extra = sorted(set(actual) - set(expected))
            raise WeightFileError(
                f"{path}: parameter mismatch against manifest "
                f"(missing={missing}, unexpected={extra})"
            )
    return store
