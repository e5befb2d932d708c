"""Permutation-invariant Q-network over target-feature sets.

Per-element 2-layer encoder, a stack of multi-head self-attention blocks
with residual connections (no layer normalization), sum pooling, and a
2-layer decoder emitting one Q-value per motion primitive. Parameters
live in one flat float64 vector with named views, which keeps Adam,
Polyak averaging, and checkpointing trivial. The heavy math runs in the
kernels package; gradients are exact reverse-mode, derived by hand.

Also provides the fixed-cardinality MLP baseline, which is NOT
permutation-invariant and only accepts the target count it was built
for.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import kernels
from .core import SeededStream
from .encoding import FeatureSet

CHECKPOINT_FORMAT = "swarmtrack-qnet-v1"


@dataclass(frozen=True)
class NetConfig:
    """Architecture hyperparameters. embed_dim must split evenly across heads."""

    embed_dim: int = 64
    n_heads: int = 2
    n_attention_blocks: int = 2
    decoder_hidden: int = 128
    feature_dim: int = 6
    n_actions: int = 12
    activation: str = "relu"
    attention_normalizer: str = "softmax"

    def __post_init__(self):
        if self.embed_dim % self.n_heads != 0:
            raise ValueError(
                f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}"
            )
        if min(self.embed_dim, self.n_heads, self.n_attention_blocks,
               self.decoder_hidden, self.feature_dim) < 1:
            raise ValueError("all architecture sizes must be positive")
        if self.n_actions != 12:
            raise ValueError(f"n_actions is fixed at 12, got {self.n_actions}")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")
        if self.attention_normalizer != "softmax":
            raise ValueError(
                f"unsupported attention normalizer {self.attention_normalizer!r}"
            )


def param_shapes(cfg: NetConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Named parameter shapes in canonical (kernel) order."""
    E = cfg.embed_dim
    shapes = [
        ("psi_w1", (cfg.feature_dim, E)), ("psi_b1", (E,)),
        ("psi_w2", (E, E)), ("psi_b2", (E,)),
    ]
    for k in range(cfg.n_attention_blocks):
        for nm in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"):
            shapes.append((f"blk{k}_{nm}", (E, E) if nm[0] == "w" else (E,)))
    shapes += [
        ("dec_w1", (E, cfg.decoder_hidden)), ("dec_b1", (cfg.decoder_hidden,)),
        ("dec_w2", (cfg.decoder_hidden, cfg.n_actions)), ("dec_b2", (cfg.n_actions,)),
    ]
    return shapes


def param_offsets(cfg: NetConfig) -> np.ndarray:
    """Cumulative flat offsets, length n_tensors + 1, int64."""
    sizes = [int(np.prod(s)) for _, s in param_shapes(cfg)]
    offs = np.zeros(len(sizes) + 1, dtype=np.int64)
    offs[1:] = np.cumsum(sizes)
    return offs


class _NamedFlat:
    """Flat float64 vector plus named reshaped views of its segments."""

    def __init__(self, cfg: NetConfig, values: np.ndarray):
        values = np.ascontiguousarray(values, dtype=np.float64)
        offs = param_offsets(cfg)
        if values.shape != (int(offs[-1]),):
            raise ValueError(
                f"expected flat vector of {int(offs[-1])} values, got {values.shape}"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("non-finite parameter values")
        self.cfg = cfg
        self._flat = values
        self._offs = offs
        self._shapes = param_shapes(cfg)
        self._index = {name: i for i, (name, _) in enumerate(self._shapes)}

    def names(self) -> list[str]:
        return [name for name, _ in self._shapes]

    def view(self, name: str) -> np.ndarray:
        i = self._index[name]
        lo, hi = self._offs[i], self._offs[i + 1]
        return self._flat[lo:hi].reshape(self._shapes[i][1])

    @property
    def n_values(self) -> int:
        return int(self._offs[-1])


class NetParams(_NamedFlat):
    """One immutable-by-convention parameter snapshot."""

    def __init__(self, cfg: NetConfig, theta: np.ndarray):
        super().__init__(cfg, theta)
        self.theta = self._flat

    def block(self, k: int) -> dict:
        """The k-th attention block's tensors keyed wq, bq, ... bo."""
        return {nm: self.view(f"blk{k}_{nm}")
                for nm in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")}

    def copy(self) -> "NetParams":
        return NetParams(self.cfg, self.theta.copy())


class Gradients(_NamedFlat):
    """Parameter gradient with the same named structure as NetParams."""

    def __init__(self, cfg: NetConfig, values: np.ndarray):
        super().__init__(cfg, values)
        self.values = self._flat


def init_params(cfg: NetConfig, stream: SeededStream) -> NetParams:
    """Glorot-uniform weight matrices, zero biases.

    Each matrix draws uniform(-b, b) with b = sqrt(6 / (fan_in + fan_out));
    biases consume no randomness, so layouts with different bias counts
    stay comparable under one seed.
    """
    offs = param_offsets(cfg)
    theta = np.zeros(int(offs[-1]))
    for i, (name, shape) in enumerate(param_shapes(cfg)):
        if len(shape) == 2:
            bound = math.sqrt(6.0 / (shape[0] + shape[1]))
            theta[offs[i]:offs[i + 1]] = stream.uniform(-bound, bound, shape).ravel()
    return NetParams(cfg, theta)


# ------------------------------------------------------------ forward

def _check_batch(F: np.ndarray, cfg: NetConfig):
    if F.ndim != 3:
        raise ValueError(f"expected (batch, set, feature) array, got shape {F.shape}")
    if F.shape[1] < 1:
        raise ValueError("feature sets must contain at least one element")
    if F.shape[2] != cfg.feature_dim:
        raise ValueError(f"feature dim {F.shape[2]} != config {cfg.feature_dim}")


def qvalues(F: np.ndarray, params: NetParams) -> np.ndarray:
    """Q-values for a (B, M, feature_dim) batch of same-size sets, (B, 12)."""
    cfg = params.cfg
    F = np.ascontiguousarray(F, dtype=np.float64)
    _check_batch(F, cfg)
    return kernels.qvalues_batch(
        F, params.theta, params._offs, cfg.embed_dim, cfg.n_heads,
        cfg.n_attention_blocks, cfg.decoder_hidden,
    )


def forward(fs: FeatureSet, params: NetParams) -> np.ndarray:
    """Q-vector (12,) for one feature set of any cardinality."""
    return qvalues(fs.to_array()[None, :, :], params)[0]


def qgrad(F: np.ndarray, dQ: np.ndarray, params: NetParams) -> np.ndarray:
    """Flat parameter gradient of sum_b dQ[b] . Q(F[b]), summed over the batch."""
    cfg = params.cfg
    F = np.ascontiguousarray(F, dtype=np.float64)
    _check_batch(F, cfg)
    dQ = np.ascontiguousarray(dQ, dtype=np.float64)
    if dQ.shape != (F.shape[0], cfg.n_actions):
        raise ValueError(f"dQ shape {dQ.shape} does not match batch")
    return kernels.grad_batch(
        F, dQ, params.theta, params._offs, cfg.embed_dim, cfg.n_heads,
        cfg.n_attention_blocks, cfg.decoder_hidden,
    )


def backward(fs: FeatureSet, params: NetParams, dQ: np.ndarray) -> Gradients:
    """Exact reverse-mode gradient for one set, contracted against dQ (12,)."""
    g = qgrad(fs.to_array()[None, :, :], np.asarray(dQ, dtype=np.float64)[None, :],
              params)
    return Gradients(params.cfg, g)


def attention_block(X: np.ndarray, block: dict, n_heads: int) -> np.ndarray:
    """One multi-head self-attention block on a (M, embed) set.

    Per head: A = softmax(Q K^T / sqrt(d)); heads concatenate, project
    through wo, and add residually onto X. Mirrors one kernel block for
    direct inspection in tests.
    """
    M, E = X.shape
    if E % n_heads != 0:
        raise ValueError("embed dim not divisible by head count")
    d = E // n_heads
    scale = 1.0 / math.sqrt(d)
    Q = X @ block["wq"] + block["bq"]
    K = X @ block["wk"] + block["bk"]
    V = X @ block["wv"] + block["bv"]
    O = np.empty_like(X)
    for h in range(n_heads):
        lo, hi = h * d, (h + 1) * d
        S = Q[:, lo:hi] @ K[:, lo:hi].T * scale
        S -= S.max(axis=1, keepdims=True)
        A = np.exp(S)
        A /= A.sum(axis=1, keepdims=True)
        O[:, lo:hi] = A @ V[:, lo:hi]
    return X + O @ block["wo"] + block["bo"]


# ------------------------------------------------------------ baseline

@dataclass
class MlpParams:
    """Fixed-cardinality MLP baseline: 2 hidden layers over concatenated features."""

    n_targets: int
    feature_dim: int
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray


def init_mlp_params(
    n_targets: int, hidden: int, stream: SeededStream,
    feature_dim: int = 6, n_actions: int = 12,
) -> MlpParams:
    def glorot(rows, cols):
        bound = math.sqrt(6.0 / (rows + cols))
        return stream.uniform(-bound, bound, (rows, cols))

    d_in = n_targets * feature_dim
    return MlpParams(
        n_targets, feature_dim,
        glorot(d_in, hidden), np.zeros(hidden),
        glorot(hidden, hidden), np.zeros(hidden),
        glorot(hidden, n_actions), np.zeros(n_actions),
    )


def mlp_forward(x: np.ndarray, p: MlpParams) -> np.ndarray:
    """Q-vector from the concatenated fixed-M feature vector (length 6M)."""
    x = np.asarray(x, dtype=np.float64)
    expected = p.n_targets * p.feature_dim
    if x.shape != (expected,):
        raise ValueError(
            f"input length {x.shape} does not match the fixed cardinality "
            f"({p.n_targets} targets -> {expected})"
        )
    h = np.maximum(x @ p.w1 + p.b1, 0.0)
    h = np.maximum(h @ p.w2 + p.b2, 0.0)
    return h @ p.w3 + p.b3


# ------------------------------------------------------------ updates

def polyak_update(target: NetParams, online: NetParams, tau: float) -> NetParams:
    """New target parameters tau * online + (1 - tau) * target."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    if target.cfg != online.cfg:
        raise ValueError("parameter sets built from different configs")
    return NetParams(target.cfg, tau * online.theta + (1.0 - tau) * target.theta)


# ------------------------------------------------------------ checkpoints

def save_checkpoint(path, nets: dict[str, NetParams]) -> None:
    """Write named nets as one manifest line plus a float32 blob.

    The manifest records every tensor's name ("<net>/<param>"), shape,
    and byte offset into the blob; values are little-endian float32 in
    manifest order. Loading and re-saving reproduces the file bit for
    bit.
    """
    if not nets:
        raise ValueError("nothing to save")
    first = next(iter(nets.values())).cfg
    if any(p.cfg != first for p in nets.values()):
        raise ValueError("all nets in one checkpoint must share a config")
    entries = []
    parts = []
    offset = 0
    for net_name, p in nets.items():
        for name, shape in param_shapes(p.cfg):
            data = np.asarray(p.view(name), dtype="<f4").tobytes()
            entries.append(
                {"name": f"{net_name}/{name}", "shape": list(shape), "offset": offset}
            )
            parts.append(data)
            offset += len(data)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "config": asdict(first),
        "entries": entries,
    }
    with open(path, "wb") as f:
        f.write(json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode())
        f.write(b"\n")
        f.write(b"".join(parts))


def load_checkpoint(path) -> dict[str, NetParams]:
    """Inverse of save_checkpoint; validates names and shapes against the config."""
    with open(path, "rb") as f:
        raw = f.read()
    nl = raw.index(b"\n")
    manifest = json.loads(raw[:nl].decode())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unrecognized checkpoint format {manifest.get('format')!r}")
    blob = raw[nl + 1:]
    cfg = NetConfig(**manifest["config"])
    expected = param_shapes(cfg)
    per_net: dict[str, list] = {}
    for e in manifest["entries"]:
        net_name, _, pname = e["name"].partition("/")
        per_net.setdefault(net_name, []).append((pname, tuple(e["shape"]), e["offset"]))
    nets = {}
    for net_name, items in per_net.items():
        if [(n, s) for n, s, _ in items] != expected:
            raise ValueError(f"checkpoint entries for {net_name!r} do not match config")
        segs = []
        for _, shape, off in items:
            count = int(np.prod(shape))
            segs.append(
                np.frombuffer(blob, dtype="<f4", count=count, offset=off)
                .astype(np.float64)
            )
        nets[net_name] = NetParams(cfg, np.concatenate(segs))
    return nets
