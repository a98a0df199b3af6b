"""A tiny byte-level language model with exact analytic gradients.

The model scores one byte (or end-of-sequence) at a time from a fixed window
of the previous ``k`` tokens: each context token is embedded, the ``k``
embeddings are concatenated, and a one-hidden-layer tanh MLP maps the
concatenation to logits over 258 symbols (256 byte values, then BOS, then
EOS). All arithmetic is float64 numpy and the backward pass is written out
by hand, so gradients are exact rather than approximate.

Text becomes bytes via UTF-8 with surrogateescape, which makes
encode/decode a lossless round trip even for byte sequences the model
invents that are not valid UTF-8.
"""

from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from .rng import SplitMix64, derive_seed

VOCAB_SIZE = 258
BOS = 256
EOS = 257

DEFAULT_CONTEXT = 8
DEFAULT_EMBED_DIM = 16
DEFAULT_HIDDEN_DIM = 64
MAX_PROMPT_BYTES = 256
MAX_TOTAL_BYTES = 512

INIT_SCALE = 0.02

_MAGIC = b"PALM"
_FORMAT_VERSION = 1


def encode_text(text: str) -> bytes:
    return text.encode("utf-8", errors="surrogateescape")


def decode_bytes(data: bytes) -> str:
    return data.decode("utf-8", errors="surrogateescape")


def _gaussian_array(shape: tuple[int, ...], seed: int) -> np.ndarray:
    """Standard normal draws from the package PRNG via Box-Muller.

    Avoids numpy's generators so initialization is pinned to this code
    rather than to a numpy version.
    """
    rng = SplitMix64(seed)
    n = int(np.prod(shape))
    out = np.empty(((n + 1) // 2) * 2, dtype=np.float64)
    for i in range(0, out.size, 2):
        u1 = 1.0 - rng.random()  # (0, 1], keeps log finite
        u2 = rng.random()
        r = math.sqrt(-2.0 * math.log(u1))
        out[i] = r * math.cos(2.0 * math.pi * u2)
        out[i + 1] = r * math.sin(2.0 * math.pi * u2)
    return out[:n].reshape(shape)


@dataclass
class ModelParams:
    """All learnable arrays plus the shape hyperparameters they imply."""

    context: int
    embed_dim: int
    hidden_dim: int
    emb: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    frozen: bool = False

    def arrays(self) -> tuple[np.ndarray, ...]:
        return (self.emb, self.w1, self.b1, self.w2, self.b2)

    @property
    def num_parameters(self) -> int:
        return sum(a.size for a in self.arrays())

    def clone(self, frozen: bool = False) -> "ModelParams":
        return ModelParams(
            context=self.context,
            embed_dim=self.embed_dim,
            hidden_dim=self.hidden_dim,
            emb=self.emb.copy(),
            w1=self.w1.copy(),
            b1=self.b1.copy(),
            w2=self.w2.copy(),
            b2=self.b2.copy(),
            frozen=frozen,
        )


def clone_frozen(params: ModelParams) -> ModelParams:
    """Deep copy flagged immutable; gradient accumulation against it raises."""
    return params.clone(frozen=True)


def init_params(
    seed: int,
    context: int = DEFAULT_CONTEXT,
    embed_dim: int = DEFAULT_EMBED_DIM,
    hidden_dim: int = DEFAULT_HIDDEN_DIM,
) -> ModelParams:
    """Gaussian weights at scale 0.02, zero biases, one stream per array."""
    if context < 1 or embed_dim < 1 or hidden_dim < 1:
        raise ValueError("model dims must be >= 1")
    flat = context * embed_dim
    return ModelParams(
        context=context,
        embed_dim=embed_dim,
        hidden_dim=hidden_dim,
        emb=INIT_SCALE * _gaussian_array((VOCAB_SIZE, embed_dim), derive_seed(seed, 0)),
        w1=INIT_SCALE * _gaussian_array((flat, hidden_dim), derive_seed(seed, 1)),
        b1=np.zeros(hidden_dim, dtype=np.float64),
        w2=INIT_SCALE * _gaussian_array((hidden_dim, VOCAB_SIZE), derive_seed(seed, 2)),
        b2=np.zeros(VOCAB_SIZE, dtype=np.float64),
    )


@dataclass
class GradBuffer:
    """Accumulator with one slot per parameter array."""

    emb: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "GradBuffer":
        return cls(*(np.zeros_like(a) for a in params.arrays()))

    def arrays(self) -> tuple[np.ndarray, ...]:
        return (self.emb, self.w1, self.b1, self.w2, self.b2)

    def scale(self, factor: float) -> None:
        for a in self.arrays():
            a *= factor


def truncate_example(prompt: str, response: str) -> tuple[bytes, bytes]:
    """Apply the byte caps (256 prompt, 512 total), warning when they bite."""
    p = encode_text(prompt)
    r = encode_text(response)
    if len(p) > MAX_PROMPT_BYTES:
        warnings.warn(
            f"prompt truncated from {len(p)} to {MAX_PROMPT_BYTES} bytes",
            stacklevel=3,
        )
        p = p[:MAX_PROMPT_BYTES]
    budget = MAX_TOTAL_BYTES - len(p)
    if len(r) > budget:
        warnings.warn(
            f"response truncated from {len(r)} to {budget} bytes", stacklevel=3
        )
        r = r[:budget]
    return p, r


def _context_matrix(params: ModelParams, prompt: bytes, response: bytes) -> tuple[np.ndarray, np.ndarray]:
    """Sliding k-token windows and their prediction targets.

    Step t sees the k tokens before response byte t and predicts it; the
    final step predicts EOS.
    """
    k = params.context
    full = np.concatenate(
        [
            np.full(k, BOS, dtype=np.int64),
            np.frombuffer(prompt, dtype=np.uint8).astype(np.int64),
            np.frombuffer(response, dtype=np.uint8).astype(np.int64),
        ]
    )
    targets = np.concatenate(
        [np.frombuffer(response, dtype=np.uint8).astype(np.int64), [EOS]]
    )
    steps = targets.size
    start = len(prompt)  # index into full, after the BOS pad
    idx = start + np.arange(steps)[:, None] + np.arange(k)[None, :]
    return full[idx], targets


def _forward(params: ModelParams, ctx: np.ndarray) -> tuple[np.ndarray, ...]:
    x = params.emb[ctx].reshape(ctx.shape[0], -1)
    h = np.tanh(x @ params.w1 + params.b1)
    logits = h @ params.w2 + params.b2
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1)) + logits.max(axis=1)
    return x, h, logits, log_z


def logprob_response(params: ModelParams, prompt: str, response: str) -> float:
    """Total log probability of the response bytes plus EOS given the prompt."""
    p, r = truncate_example(prompt, response)
    ctx, targets = _context_matrix(params, p, r)
    _, _, logits, log_z = _forward(params, ctx)
    return float((logits[np.arange(targets.size), targets] - log_z).sum())


def accumulate_logprob_grad(
    params: ModelParams,
    prompt: str,
    response: str,
    coeff: float,
    buf: GradBuffer,
) -> float:
    """Add coeff * d(logprob)/d(theta) into buf; returns the logprob.

    The caller chooses coeff as the derivative of its loss with respect to
    this item's log probability, so buf ends up holding the loss gradient.
    """
    if params.frozen:
        raise ValueError("cannot accumulate gradients against frozen parameters")
    p, r = truncate_example(prompt, response)
    ctx, targets = _context_matrix(params, p, r)
    x, h, logits, log_z = _forward(params, ctx)
    steps = targets.size
    rows = np.arange(steps)
    logprob = float((logits[rows, targets] - log_z).sum())

    probs = np.exp(logits - log_z[:, None])
    d_logits = -probs
    d_logits[rows, targets] += 1.0
    d_logits *= coeff

    buf.w2 += h.T @ d_logits
    buf.b2 += d_logits.sum(axis=0)
    d_h = (d_logits @ params.w2.T) * (1.0 - h**2)
    buf.w1 += x.T @ d_h
    buf.b1 += d_h.sum(axis=0)
    d_x = (d_h @ params.w1.T).reshape(steps, params.context, params.embed_dim)
    np.add.at(buf.emb, ctx, d_x)
    return logprob


def greedy_decode(
    params: ModelParams,
    prompt: str,
    max_new_bytes: int = 64,
    temperature: float = 0.0,
    seed: int = 0,
) -> str:
    """Generate until EOS or the byte budget runs out.

    temperature 0 picks the argmax (lowest id on ties); otherwise symbols
    are sampled from softmax(logits / temperature) with the package PRNG.
    """
    if temperature < 0:
        raise ValueError("temperature must be >= 0")
    p = encode_text(prompt)[:MAX_PROMPT_BYTES]
    budget = min(max_new_bytes, MAX_TOTAL_BYTES - len(p))
    window = [BOS] * params.context + list(p)
    rng = SplitMix64(seed)
    out = bytearray()
    for _ in range(max(0, budget)):
        ctx = np.asarray(window[-params.context :], dtype=np.int64)[None, :]
        _, _, logits, log_z = _forward(params, ctx)
        if temperature == 0.0:
            token = int(np.argmax(logits[0]))
        else:
            logp = logits[0] / temperature
            logp -= logp.max()
            cdf = np.cumsum(np.exp(logp))
            cdf /= cdf[-1]
            token = int(np.searchsorted(cdf, rng.random(), side="right"))
            token = min(token, VOCAB_SIZE - 1)
        if token == EOS:
            break
        if token == BOS:  # never a valid output byte; treat like EOS
            break
        out.append(token)
        window.append(token)
    return decode_bytes(bytes(out))


def save_params(params: ModelParams, path: str) -> None:
    """Fixed-layout binary checkpoint; byte-identical for identical params."""
    header = struct.pack(
        "<4sIIIIII",
        _MAGIC,
        _FORMAT_VERSION,
        params.context,
        params.embed_dim,
        params.hidden_dim,
        MAX_PROMPT_BYTES,
        MAX_TOTAL_BYTES,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        for a in params.arrays():
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_params(path: str) -> ModelParams:
    with open(path, "rb") as fh:
        header = fh.read(struct.calcsize("<4sIIIIII"))
        magic, version, k, d, h, _, _ = struct.unpack("<4sIIIIII", header)
        if magic != _MAGIC:
            raise ValueError(f"not a model checkpoint: bad magic {magic!r}")
        if version != _FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        shapes = [
            (VOCAB_SIZE, d),
            (k * d, h),
            (h,),
            (h, VOCAB_SIZE),
            (VOCAB_SIZE,),
        ]
        arrays = []
        for shape in shapes:
            n = int(np.prod(shape))
            raw = fh.read(n * 8)
            if len(raw) != n * 8:
                raise ValueError("checkpoint truncated")
            arrays.append(np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape))
        if fh.read(1):
            raise ValueError("checkpoint has trailing bytes")
    return ModelParams(k, d, h, *arrays)
