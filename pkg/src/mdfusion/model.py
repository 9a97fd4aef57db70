"""Fusion model: modality tokens, one-layer fusion MLP, classifier head, projector.

Frozen unimodal encoders are represented by their precomputed embeddings;
only the parts after them live here.
"""
from __future__ import annotations

import enum
import json
import math
import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError, FormatError
from .rng import Xoshiro256pp, derive_seed

MODEL_MAGIC = b"MMF1"


class Mode(str, enum.Enum):
    BOTH = "both"
    IMAGE = "image"
    TABULAR = "tabular"


class TokenPolicy(str, enum.Enum):
    LEARNED = "learned"
    ZERO = "zero"


ALL_MODES = (Mode.BOTH, Mode.IMAGE, Mode.TABULAR)


@dataclass
class ModelParams:
    image_token: Tensor      # 1 x dim_c, stands in for a missing image embedding
    tabular_token: Tensor    # 1 x dim_t
    fuse_w: Tensor           # (dim_c + dim_t) x d_f
    fuse_b: Tensor           # 1 x d_f
    head_w: Tensor           # d_f x 1
    head_b: Tensor           # 1 x 1
    proj_w: Tensor           # d_f x d_p
    proj_b: Tensor           # 1 x d_p
    log_scale: Tensor        # 1 x 1; contrastive scale t = exp(log_scale)
    logit_bias: Tensor       # 1 x 1; contrastive bias b

    @property
    def dim_c(self) -> int:
        return self.image_token.cols

    @property
    def dim_t(self) -> int:
        return self.tabular_token.cols

    @property
    def d_f(self) -> int:
        return self.fuse_w.cols

    @property
    def d_p(self) -> int:
        return self.proj_w.cols

    def named(self) -> dict[str, Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def copy(self) -> ModelParams:
        return ModelParams(**{k: ad.parameter(v.data) for k, v in self.named().items()})

    def zero_grad(self) -> None:
        for t in self.named().values():
            t.zero_grad()

    def dims(self) -> dict[str, int]:
        return {"dim_c": self.dim_c, "dim_t": self.dim_t, "d_f": self.d_f, "d_p": self.d_p}


# Parameters that AdamW must not decay.
NO_DECAY = frozenset({"image_token", "tabular_token", "log_scale", "logit_bias",
                      "fuse_b", "head_b", "proj_b"})
TOKEN_NAMES = ("image_token", "tabular_token")
HEAD_NAMES = ("head_w", "head_b")
PROJECTOR_NAMES = ("proj_w", "proj_b", "log_scale", "logit_bias")


def _glorot(rng: Xoshiro256pp, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniforms(-bound, bound, fan_in, fan_out)


def init_params(dim_c: int, dim_t: int, d_f: int = 64, d_p: int = 32, seed: int = 0) -> ModelParams:
    """Glorot-uniform weights, zero biases and tokens, t = 10, b = -10.

    Weights are drawn in the order fusion, head, projector, each from its
    own stream derived from ``seed``, so re-initialising only the head
    reproduces the same head as a fresh init with the same seed.
    """
    for name, v in (("dim_c", dim_c), ("dim_t", dim_t), ("d_f", d_f), ("d_p", d_p)):
        if v < 1:
            raise DimensionError(f"{name} must be >= 1, got {v}")
    p = ad.parameter
    fuse_in = dim_c + dim_t
    return ModelParams(
        image_token=p(np.zeros((1, dim_c))),
        tabular_token=p(np.zeros((1, dim_t))),
        fuse_w=p(_glorot(Xoshiro256pp(derive_seed(seed, 1)), fuse_in, d_f)),
        fuse_b=p(np.zeros((1, d_f))),
        head_w=p(_glorot(Xoshiro256pp(derive_seed(seed, 2)), d_f, 1)),
        head_b=p(np.zeros((1, 1))),
        proj_w=p(_glorot(Xoshiro256pp(derive_seed(seed, 3)), d_f, d_p)),
        proj_b=p(np.zeros((1, d_p))),
        log_scale=p(np.full((1, 1), math.log(10.0))),
        logit_bias=p(np.full((1, 1), -10.0)),
    )


def _as_input(x) -> Tensor | None:
    if x is None or isinstance(x, Tensor):
        return x
    return ad.constant(x)


def _fill(token: Tensor, n: int, policy: TokenPolicy) -> Tensor:
    if policy is TokenPolicy.ZERO:
        return ad.constant(np.zeros((n, token.cols)))
    return ad.repeat_rows(token, n)


def fuse(params: ModelParams, x_c, x_t, policy: TokenPolicy = TokenPolicy.LEARNED) -> Tensor:
    """relu([image block | tabular block] @ W + b); a ``None`` block is filled.

    Missing blocks become the modality token repeated over the batch
    (LEARNED) or zeros (ZERO).
    """
    policy = TokenPolicy(policy)
    x_c, x_t = _as_input(x_c), _as_input(x_t)
    if x_c is None and x_t is None:
        raise ContractError("fuse needs at least one modality")
    n = x_c.rows if x_c is not None else x_t.rows
    if x_c is not None and x_t is not None and x_c.rows != x_t.rows:
        raise DimensionError(f"modality row counts differ: {x_c.shape} vs {x_t.shape}")
    if x_c is not None and x_c.cols != params.dim_c:
        raise DimensionError(f"image block has {x_c.cols} columns, model expects {params.dim_c}")
    if x_t is not None and x_t.cols != params.dim_t:
        raise DimensionError(f"tabular block has {x_t.cols} columns, model expects {params.dim_t}")
    block_c = x_c if x_c is not None else _fill(params.image_token, n, policy)
    block_t = x_t if x_t is not None else _fill(params.tabular_token, n, policy)
    h = ad.matmul(ad.concat_cols(block_c, block_t), params.fuse_w)
    return ad.relu(ad.add_row(h, params.fuse_b))


def forward_logit(params: ModelParams, x_c, x_t, mode: Mode = Mode.BOTH,
                  policy: TokenPolicy = TokenPolicy.LEARNED) -> Tensor:
    """n x 1 logits for the given inference mode; p(y=1) = sigmoid(logit)."""
    mode = Mode(mode)
    if mode is not Mode.TABULAR and x_c is None:
        raise ContractError(f"mode '{mode.value}' needs image embeddings")
    if mode is not Mode.IMAGE and x_t is None:
        raise ContractError(f"mode '{mode.value}' needs tabular embeddings")
    if mode is Mode.IMAGE:
        x_t = None
    elif mode is Mode.TABULAR:
        x_c = None
    h = fuse(params, x_c, x_t, policy)
    return ad.add_row(ad.matmul(h, params.head_w), params.head_b)


def predict_proba(params: ModelParams, x_c, x_t, mode: Mode = Mode.BOTH,
                  policy: TokenPolicy = TokenPolicy.LEARNED) -> np.ndarray:
    return ad.sigmoid(forward_logit(params, x_c, x_t, mode, policy)).data[:, 0].copy()


def forward_repr(params: ModelParams, x_c, x_t, which: str,
                 policy: TokenPolicy = TokenPolicy.LEARNED) -> Tensor:
    """Unit-norm projected representation: 'f' fused, 'c' image-only, 't' tabular-only."""
    if x_c is None or x_t is None:
        raise ContractError("forward_repr needs both modalities")
    if which == "f":
        h = fuse(params, x_c, x_t, policy)
    elif which == "c":
        h = fuse(params, x_c, None, policy)
    elif which == "t":
        h = fuse(params, None, x_t, policy)
    else:
        raise ValueError(f"which must be 'c', 't' or 'f', got {which!r}")
    z = ad.add_row(ad.matmul(h, params.proj_w), params.proj_b)
    return ad.l2_normalize_rows(z)


# --------------------------------------------------------------------------
# MMF1 model files
# --------------------------------------------------------------------------
#
# b"MMF1" | header length u32 LE | UTF-8 JSON header | f64 LE tensors
#
# Header offsets are absolute file positions.

def save_model(params: ModelParams, meta: dict, path: str | Path,
               extra: dict[str, np.ndarray] | None = None) -> None:
    """Write parameters (plus optional extra arrays, e.g. optimizer moments)."""
    arrays = {k: t.data for k, t in params.named().items()}
    if extra:
        arrays.update(extra)
    names = list(arrays)

    def header_for(base: int) -> bytes:
        index, off = {}, base
        for k in names:
            a = arrays[k]
            index[k] = {"shape": list(a.shape), "offset": off, "nbytes": a.size * 8}
            off += a.size * 8
        hdr = {"format": "MMF1", "dims": params.dims(), "meta": meta, "tensors": index}
        return json.dumps(hdr, sort_keys=True).encode("utf-8")

    # Offsets depend on the header length, which depends on the offsets' digits.
    blob = header_for(0)
    while True:
        new = header_for(8 + len(blob))
        if len(new) == len(blob):
            blob = new
            break
        blob = new
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for k in names:
            fh.write(np.ascontiguousarray(arrays[k], dtype="<f8").tobytes())


def read_model_header(path: str | Path) -> dict:
    with open(path, "rb") as fh:
        head = fh.read(8)
        if len(head) < 8 or head[:4] != MODEL_MAGIC:
            raise FormatError(f"{path}: not an MMF1 model file (bad magic)")
        (hlen,) = struct.unpack("<I", head[4:])
        blob = fh.read(hlen)
    if len(blob) != hlen:
        raise FormatError(f"{path}: truncated header")
    try:
        return json.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header ({exc})") from None


def read_tensor(path: str | Path, name: str) -> np.ndarray:
    """Random-access read of one named tensor using the header offsets."""
    entry = read_model_header(path)["tensors"].get(name)
    if entry is None:
        raise FormatError(f"{path}: no tensor named {name!r}")
    with open(path, "rb") as fh:
        fh.seek(entry["offset"])
        raw = fh.read(entry["nbytes"])
    if len(raw) != entry["nbytes"]:
        raise FormatError(f"{path}: truncated payload for {name!r}")
    return np.frombuffer(raw, dtype="<f8").reshape(entry["shape"]).astype(np.float64)


def load_model(path: str | Path, with_extra: bool = False):
    """Return ``(params, meta)`` (and the extra arrays when ``with_extra``)."""
    raw = Path(path).read_bytes()
    header = read_model_header(path)
    arrays = {}
    for name, e in header["tensors"].items():
        end = e["offset"] + e["nbytes"]
        if end > len(raw):
            raise FormatError(f"{path}: truncated payload for {name!r}")
        arrays[name] = np.frombuffer(raw[e["offset"]:end], dtype="<f8").reshape(e["shape"]).astype(np.float64)
    names = [f.name for f in fields(ModelParams)]
    missing = [n for n in names if n not in arrays]
    if missing:
        raise FormatError(f"{path}: missing tensors {missing}")
    params = ModelParams(**{n: ad.parameter(arrays.pop(n)) for n in names})
    if with_extra:
        return params, header["meta"], arrays
    return params, header["meta"]
