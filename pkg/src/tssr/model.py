"""Two-stream sequential recommender network and its ablation variants."""
import enum
import json
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx

CHECKPOINT_MAGIC = b"TSSR"
CHECKPOINT_VERSION = 1


class ModelMode(str, enum.Enum):
    TSSR = "tssr"
    ID_ONLY = "id"
    CONTENT_ONLY = "content"
    HYBRID_CONCAT = "hybrid"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        value = str(value).lower()
        aliases = {"id_only": "id", "content_only": "content", "hybrid_concat": "hybrid"}
        return cls(aliases.get(value, value))

    @property
    def uses_content(self):
        return self is not ModelMode.ID_ONLY


@dataclass
class ModelConfig:
    n_items: int
    d: int = 128
    max_len: int = 10
    n_heads: int = 4
    n_uni_layers: int = 2
    n_multi_layers: int = 1
    multi_ffn: bool = True
    dropout: float = 0.1
    dim_raw: int = 0
    mode: ModelMode = ModelMode.TSSR
    freeze_content: bool = False
    init_std: float = 0.02

    def __post_init__(self):
        self.mode = ModelMode.parse(self.mode)
        if self.d % self.n_heads:
            raise ValueError(f"d={self.d} is not divisible by n_heads={self.n_heads}")
        if self.mode.uses_content and self.dim_raw <= 0:
            raise ValueError(f"mode {self.mode.value} needs content vectors (dim_raw > 0)")

    @property
    def pad(self):
        return self.n_items

    def to_dict(self):
        out = asdict(self)
        out["mode"] = self.mode.value
        return out


@dataclass
class ForwardTrace:
    E_id_raw: object = None
    E_con_raw: object = None
    F_id: object = None
    F_con: object = None
    Fbar_id: object = None
    Fbar_con: object = None
    S: object = None
    F: object = None
    mask: np.ndarray = None
    extras: dict = field(default_factory=dict)


# parameters ----------------------------------------------------------------------

def _block_shapes(prefix, d, ffn=True):
    shapes = {}
    for w in ("q", "k", "v", "o"):
        shapes[f"{prefix}.W{w}"] = (d, d)
        if w != "k":
            # a key bias only shifts each query's logits uniformly; softmax cancels it
            shapes[f"{prefix}.b{w}"] = (d,)
    shapes[f"{prefix}.ln1.g"] = (d,)
    shapes[f"{prefix}.ln1.b"] = (d,)
    if ffn:
        shapes[f"{prefix}.W1"] = (d, d)
        shapes[f"{prefix}.b1"] = (d,)
        shapes[f"{prefix}.W2"] = (d, d)
        shapes[f"{prefix}.b2"] = (d,)
        shapes[f"{prefix}.ln2.g"] = (d,)
        shapes[f"{prefix}.ln2.b"] = (d,)
    return shapes


def param_shapes(cfg):
    d, V = cfg.d, cfg.n_items + 1
    mode = cfg.mode
    shapes = {"M_id": (V, d)}
    id_stream = mode in (ModelMode.TSSR, ModelMode.ID_ONLY, ModelMode.HYBRID_CONCAT)
    con_stream = mode in (ModelMode.TSSR, ModelMode.CONTENT_ONLY)
    if mode.uses_content:
        shapes["content_rows"] = (V, cfg.dim_raw)
        shapes["W_proj"] = (cfg.dim_raw, d)
    if mode is ModelMode.HYBRID_CONCAT:
        shapes["W_hyb"] = (2 * d, d)
        shapes["b_hyb"] = (d,)
    if id_stream:
        shapes["P_id"] = (cfg.max_len, d)
        for i in range(cfg.n_uni_layers):
            shapes.update(_block_shapes(f"uni_id.{i}", d))
    if con_stream:
        shapes["P_con"] = (cfg.max_len, d)
        for i in range(cfg.n_uni_layers):
            shapes.update(_block_shapes(f"uni_con.{i}", d))
    if mode is ModelMode.TSSR:
        for i in range(cfg.n_multi_layers):
            shapes.update(_block_shapes(f"multi_id.{i}", d, cfg.multi_ffn))
            shapes.update(_block_shapes(f"multi_con.{i}", d, cfg.multi_ffn))
        shapes["gate.W"] = (2 * d, d)
        shapes["gate.b"] = (d,)
    return shapes


def init_params(cfg, content=None, seed=0, dtype=np.float64):
    """Normal(0, init_std) weights, unit LayerNorm gains, zero biases and PAD rows."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name.endswith(".g"):
            arr = np.ones(shape)
        elif leaf.startswith("b") and name != "M_id":
            arr = np.zeros(shape)
        elif name == "content_rows":
            if content is None:
                raise ValueError("content vectors required for this mode")
            arr = np.array(getattr(content, "vectors", content), dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"content table shape {arr.shape} != expected {shape}")
        else:
            arr = rng.normal(0.0, cfg.init_std, size=shape)
        params[name] = arr.astype(dtype)
    params["M_id"][cfg.pad] = 0
    if "content_rows" in params:
        params["content_rows"][cfg.pad] = 0
    return params


def frozen_rows(cfg):
    """Parameter rows that must stay exactly zero (PAD embeddings)."""
    rows = {"M_id": cfg.pad}
    if cfg.mode.uses_content:
        rows["content_rows"] = cfg.pad
    return rows


def trainable_names(cfg, params):
    names = list(params)
    if cfg.freeze_content and "content_rows" in names:
        names.remove("content_rows")
    return names


# building blocks --------------------------------------------------------------------

def attention_allow(mask):
    """Key-visibility matrix: query l sees key j iff j <= l and j is a real position."""
    t = mask.shape[1]
    causal = np.tril(np.ones((t, t), dtype=bool))
    return causal[None, :, :] & mask[:, None, :]


def multi_head_attention(xq, xkv, allow, P, prefix, n_heads, drop=0.0, rng=None):
    B, t, d = xq.shape
    dh = d // n_heads

    def heads(x):
        return nx.transpose(nx.reshape(x, (B, t, n_heads, dh)), (0, 2, 1, 3))

    q = heads(nx.linear(xq, P[f"{prefix}.Wq"], P[f"{prefix}.bq"]))
    k = heads(nx.linear(xkv, P[f"{prefix}.Wk"]))
    v = heads(nx.linear(xkv, P[f"{prefix}.Wv"], P[f"{prefix}.bv"]))
    logits = nx.scale(nx.matmul(q, nx.transpose(k)), 1.0 / math.sqrt(dh))
    attn = nx.softmax(logits, axis=-1, mask=allow[:, None, :, :])
    attn = nx.dropout(attn, drop, rng)
    out = nx.reshape(nx.transpose(nx.matmul(attn, v), (0, 2, 1, 3)), (B, t, d))
    return nx.linear(out, P[f"{prefix}.Wo"], P[f"{prefix}.bo"])


def encoder_block(xq, xkv, allow, maskf, P, prefix, n_heads, ffn=True, drop=0.0, rng=None):
    """Post-norm block: attention -> add & norm -> feed-forward -> add & norm.

    Self-attention when ``xq is xkv``; cross-attention otherwise.
    """
    a = nx.dropout(multi_head_attention(xq, xkv, allow, P, prefix, n_heads, drop, rng), drop, rng)
    h = nx.layer_norm(nx.add(xq, a), P[f"{prefix}.ln1.g"], P[f"{prefix}.ln1.b"])
    h = nx.mul(h, maskf)
    if ffn:
        f = nx.relu(nx.linear(h, P[f"{prefix}.W1"], P[f"{prefix}.b1"]))
        f = nx.dropout(nx.linear(f, P[f"{prefix}.W2"], P[f"{prefix}.b2"]), drop, rng)
        h = nx.layer_norm(nx.add(h, f), P[f"{prefix}.ln2.g"], P[f"{prefix}.ln2.b"])
        h = nx.mul(h, maskf)
    return h


def _maskf(mask, dtype):
    return mask[:, :, None].astype(dtype)


def embed_ids(batch, P):
    """Return ``(E_id_raw, E_id_pos)``; PAD positions are zero in both."""
    maskf = _maskf(batch.mask, P["M_id"].dtype)
    raw = nx.take(P["M_id"], batch.id_seq)
    pos = nx.mul(nx.add(raw, P["P_id"]), maskf)
    return raw, pos


def embed_content(batch, P):
    maskf = _maskf(batch.mask, P["W_proj"].dtype)
    raw = nx.matmul(nx.take(P["content_rows"], batch.id_seq), P["W_proj"])
    if "P_con" not in P:
        return raw, None
    pos = nx.mul(nx.add(raw, P["P_con"]), maskf)
    return raw, pos


def unimodal_encode(E_pos, mask, P, prefix, cfg, rng=None):
    allow = attention_allow(mask)
    maskf = _maskf(mask, E_pos.dtype)
    drop = cfg.dropout if rng is not None else 0.0
    h = E_pos
    for i in range(cfg.n_uni_layers):
        h = encoder_block(h, h, allow, maskf, P, f"{prefix}.{i}", cfg.n_heads, True, drop, rng)
    return h


def multimodal_encode(F_id, F_con, mask, P, cfg, rng=None):
    """Cross-attention layers; both streams update from the previous layer's states."""
    allow = attention_allow(mask)
    maskf = _maskf(mask, F_id.dtype)
    drop = cfg.dropout if rng is not None else 0.0
    h_id, h_con = F_id, F_con
    for i in range(cfg.n_multi_layers):
        new_id = encoder_block(h_id, h_con, allow, maskf, P, f"multi_id.{i}", cfg.n_heads,
                               cfg.multi_ffn, drop, rng)
        new_con = encoder_block(h_con, h_id, allow, maskf, P, f"multi_con.{i}", cfg.n_heads,
                                cfg.multi_ffn, drop, rng)
        h_id, h_con = new_id, new_con
    return h_id, h_con


def gate_fuse(Fbar_id, Fbar_con, P):
    """S = sigmoid([F_id, F_con] W + b);  F = S * F_id + (1 - S) * F_con."""
    S = nx.sigmoid(nx.linear(nx.concat([Fbar_id, Fbar_con], axis=-1), P["gate.W"], P["gate.b"]))
    F = nx.add(nx.mul(S, Fbar_id), nx.mul(nx.sub(1.0, S), Fbar_con))
    return S, F


def score_items(F, P, n_items):
    """Inner-product logits against every real item (PAD row excluded)."""
    items = nx.take(P["M_id"], np.arange(n_items))
    return nx.matmul(F, nx.transpose(items))


def forward(batch, P, cfg, rng=None, score=True):
    """Run the network. ``rng`` enables dropout (training); None means eval mode.

    ``P`` maps parameter names to Tensors. Returns ``(trace, logits)``.
    """
    mode = cfg.mode
    trace = ForwardTrace(mask=batch.mask)
    if mode is ModelMode.ID_ONLY:
        trace.E_id_raw, pos = embed_ids(batch, P)
        trace.F_id = unimodal_encode(pos, batch.mask, P, "uni_id", cfg, rng)
        trace.F = trace.F_id
    elif mode is ModelMode.CONTENT_ONLY:
        trace.E_con_raw, pos = embed_content(batch, P)
        trace.F_con = unimodal_encode(pos, batch.mask, P, "uni_con", cfg, rng)
        trace.F = trace.F_con
    elif mode is ModelMode.HYBRID_CONCAT:
        maskf = _maskf(batch.mask, P["M_id"].dtype)
        trace.E_id_raw = nx.take(P["M_id"], batch.id_seq)
        trace.E_con_raw, _ = embed_content(batch, P)
        joint = nx.linear(nx.concat([trace.E_id_raw, trace.E_con_raw], axis=-1), P["W_hyb"], P["b_hyb"])
        pos = nx.mul(nx.add(joint, P["P_id"]), maskf)
        trace.F = unimodal_encode(pos, batch.mask, P, "uni_id", cfg, rng)
    else:
        trace.E_id_raw, pos_id = embed_ids(batch, P)
        trace.E_con_raw, pos_con = embed_content(batch, P)
        trace.F_id = unimodal_encode(pos_id, batch.mask, P, "uni_id", cfg, rng)
        trace.F_con = unimodal_encode(pos_con, batch.mask, P, "uni_con", cfg, rng)
        trace.Fbar_id, trace.Fbar_con = multimodal_encode(trace.F_id, trace.F_con, batch.mask, P, cfg, rng)
        trace.S, trace.F = gate_fuse(trace.Fbar_id, trace.Fbar_con, P)
    logits = score_items(trace.F, P, cfg.n_items) if score else None
    return trace, logits


def as_leaves(params, names=()):
    """Wrap numpy parameters as Tensors; those in ``names`` require gradients."""
    names = set(names)
    return {k: nx.Tensor(v, requires_grad=k in names, name=k) for k, v in params.items()}


# checkpoint -------------------------------------------------------------------------

def save_checkpoint(path, params, config):
    """Binary layout: magic, u32 version, u32 tensor count, tensors, u32 JSON length, JSON."""
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(params)))
        for name in sorted(params):
            arr = np.ascontiguousarray(params[name], dtype="<f4")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)) + raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())
        fh.write(struct.pack("<I", len(blob)) + blob)


class CheckpointError(ValueError):
    pass


def load_checkpoint(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic {data[:4]!r})")
    try:
        version, count = struct.unpack_from("<II", data, 4)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        off = 12
        params = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", data, off)
            name = data[off + 4: off + 4 + n].decode("utf-8")
            off += 4 + n
            (rank,) = struct.unpack_from("<I", data, off)
            shape = struct.unpack_from(f"<{rank}I", data, off + 4)
            off += 4 + 4 * rank
            size = int(np.prod(shape))
            params[name] = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(shape).astype(np.float64)
            off += 4 * size
        (n,) = struct.unpack_from("<I", data, off)
        config = json.loads(data[off + 4: off + 4 + n].decode("utf-8"))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: corrupted checkpoint ({exc})") from None
    return params, config
