"""Masked-reconstruction transformer over network-aligned token grids.

Encoder: pre-norm self-attention blocks over unmasked tokens only.
Decoder: mask-token queries (one per masked position) attend to encoder
outputs through cross-attention blocks with no query-query mixing, so a
masked network is reconstructed purely from the other networks. An
ablation decoder replaces this with plain self-attention over the
concatenated [queries; context] sequence.

Shapes follow the convention (B, S, D): batch, sequence, embedding.
Residual blocks carry no final normalization, so zeroed block output
weights make encoder and decoder exact identities.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import MaskPlan, NetworkAtlas, SegmentSpec, TokenGrid

CHECKPOINT_MAGIC = b"NRCP"
CHECKPOINT_VERSION = 1

DECODER_MODES = ("cross", "self")
MASK_MODES = ("network", "random")


class CheckpointError(ValueError):
    """Unreadable, truncated, or version-mismatched checkpoint."""


@dataclass
class ModelConfig:
    d_emb: int = 128
    enc_layers: int = 4
    dec_layers: int = 2
    heads: int = 6
    d_mlp: int = 256
    token_dim: int = 256
    max_tokens: int = 512
    decoder_mode: str = "cross"
    mask_mode: str = "network"
    dropout: float = 0.0
    dtype: str = "float32"

    def __post_init__(self):
        if self.d_emb % self.heads != 0:
            raise ValueError(f"d_emb={self.d_emb} not divisible by heads={self.heads}")
        if self.enc_layers < 1 or self.dec_layers < 1:
            raise ValueError("encoder and decoder need at least one layer")
        if self.decoder_mode not in DECODER_MODES:
            raise ValueError(f"decoder_mode must be one of {DECODER_MODES}")
        if self.mask_mode not in MASK_MODES:
            raise ValueError(f"mask_mode must be one of {MASK_MODES}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


@dataclass
class ModelState:
    """All learnable parameters plus config and the init seed."""

    config: ModelConfig
    seed: int
    params: dict[str, Tensor] = field(default_factory=dict)

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def copy(self) -> "ModelState":
        out = ModelState(replace(self.config), self.seed)
        for k, v in self.params.items():
            out.params[k] = Tensor(v.data.copy(), requires_grad=True)
        return out


def init_model(config: ModelConfig, seed: int = 0) -> ModelState:
    rng = np.random.default_rng(seed)
    dt = config.np_dtype
    state = ModelState(config, seed)
    p = state.params

    def w(name, *shape, scale=0.02):
        p[name] = Tensor(rng.normal(0.0, scale, shape).astype(dt), requires_grad=True)

    def zeros(name, *shape):
        p[name] = Tensor(np.zeros(shape, dtype=dt), requires_grad=True)

    def ones(name, *shape):
        p[name] = Tensor(np.ones(shape, dtype=dt), requires_grad=True)

    d, dm = config.d_emb, config.d_mlp
    w("embed.w", config.token_dim, d)
    zeros("embed.b", d)
    w("pos", config.max_tokens, d)
    w("mask_token", d)
    for i in range(config.enc_layers):
        _block_params(w, zeros, ones, f"enc.{i}", d, dm)
    for i in range(config.dec_layers):
        _block_params(w, zeros, ones, f"dec.{i}", d, dm,
                      kv_norm=config.decoder_mode == "cross")
    w("recon.w", d, config.token_dim)
    zeros("recon.b", config.token_dim)
    w("cls.w1", d, 64)
    zeros("cls.b1", 64)
    w("cls.w2", 64, 3)
    zeros("cls.b2", 3)
    return state


def _block_params(w, zeros, ones, prefix, d, dm, kv_norm=False):
    ones(f"{prefix}.ln1.g", d)
    zeros(f"{prefix}.ln1.b", d)
    if kv_norm:
        ones(f"{prefix}.lnkv.g", d)
        zeros(f"{prefix}.lnkv.b", d)
    for name in ("wq", "wk", "wv", "wo"):
        w(f"{prefix}.attn.{name}", d, d)
    for name in ("bq", "bk", "bv", "bo"):
        zeros(f"{prefix}.attn.{name}", d)
    ones(f"{prefix}.ln2.g", d)
    zeros(f"{prefix}.ln2.b", d)
    w(f"{prefix}.mlp.w1", d, dm)
    zeros(f"{prefix}.mlp.b1", dm)
    w(f"{prefix}.mlp.w2", dm, d)
    zeros(f"{prefix}.mlp.b2", d)


@dataclass
class EncoderOutput:
    """Contextual embeddings of the unmasked tokens."""

    Z: Tensor                    # (N_u, D) or batched (B, N_u, D)
    plan: MaskPlan


@dataclass
class AttnRecord:
    """Captured decoder cross-attention, (layers, heads, masked, N_u)."""

    weights: np.ndarray
    plan: MaskPlan

    @property
    def layers(self) -> int:
        return self.weights.shape[0]

    @property
    def heads(self) -> int:
        return self.weights.shape[1]


def write_attention_csv(record: AttnRecord, path) -> None:
    """Dump one capture as `layer,head,query_token,key_token,weight` rows."""
    masked = record.plan.masked_indices
    unmasked = record.plan.unmasked_indices
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write("layer,head,query_token,key_token,weight\n")
        for l in range(record.layers):
            for h in range(record.heads):
                a = record.weights[l, h]
                for qi in range(a.shape[0]):
                    for ki in range(a.shape[1]):
                        fh.write(f"{l},{h},{masked[qi]},{unmasked[ki]},"
                                 f"{float(a[qi, ki])!r}\n")


# -- forward pieces (batched; single-sample wrappers at the bottom) ------


def _mha(state: ModelState, prefix: str, q_in: Tensor, kv_in: Tensor,
         capture: list | None = None, rng=None) -> Tensor:
    p = state.params
    cfg = state.config
    h, d = cfg.heads, cfg.d_emb
    dh = d // h
    b, m = q_in.shape[0], q_in.shape[1]
    s = kv_in.shape[1]
    q = ad.matmul(q_in, p[f"{prefix}.wq"]) + p[f"{prefix}.bq"]
    k = ad.matmul(kv_in, p[f"{prefix}.wk"]) + p[f"{prefix}.bk"]
    v = ad.matmul(kv_in, p[f"{prefix}.wv"]) + p[f"{prefix}.bv"]
    qh = ad.transpose(ad.reshape(q, (b, m, h, dh)), (0, 2, 1, 3))
    kh = ad.transpose(ad.reshape(k, (b, s, h, dh)), (0, 2, 1, 3))
    vh = ad.transpose(ad.reshape(v, (b, s, h, dh)), (0, 2, 1, 3))
    scores = ad.matmul(qh, ad.transpose(kh)) * (1.0 / np.sqrt(dh))
    attn = ad.softmax_rows(scores)                      # (B, H, M, S)
    if capture is not None:
        capture.append(np.array(attn.data, copy=True))
    out = ad.transpose(ad.matmul(attn, vh), (0, 2, 1, 3))
    out = ad.reshape(out, (b, m, d))
    out = ad.matmul(out, p[f"{prefix}.wo"]) + p[f"{prefix}.bo"]
    if rng is not None and cfg.dropout > 0:
        out = ad.dropout(out, cfg.dropout, rng)
    return out


def _mlp(state: ModelState, prefix: str, x: Tensor, rng=None) -> Tensor:
    p = state.params
    h = ad.gelu(ad.matmul(x, p[f"{prefix}.w1"]) + p[f"{prefix}.b1"])
    out = ad.matmul(h, p[f"{prefix}.w2"]) + p[f"{prefix}.b2"]
    if rng is not None and state.config.dropout > 0:
        out = ad.dropout(out, state.config.dropout, rng)
    return out


def _ln(state: ModelState, prefix: str, x: Tensor) -> Tensor:
    return ad.layer_norm(x, state.params[f"{prefix}.g"], state.params[f"{prefix}.b"])


def embed_batch(state: ModelState, tokens: np.ndarray) -> Tensor:
    """Project raw tokens and add flat-position embeddings.

    tokens: (B, S, token_dim) in row-major lattice order.
    """
    cfg = state.config
    if tokens.shape[-1] != cfg.token_dim:
        raise ValueError(f"token_dim {tokens.shape[-1]} != config {cfg.token_dim}")
    s = tokens.shape[1]
    if s > cfg.max_tokens:
        raise ValueError(f"grid has {s} tokens, model supports {cfg.max_tokens}")
    x = Tensor(tokens.astype(cfg.np_dtype, copy=False))
    x = ad.matmul(x, state.params["embed.w"]) + state.params["embed.b"]
    return x + state.params["pos"][:s]


def encode_batch(state: ModelState, embeddings: Tensor,
                 unmasked_idx: np.ndarray, rng=None) -> Tensor:
    """Drop masked rows, then run the self-attention blocks."""
    if unmasked_idx.shape[-1] == 0:
        raise ValueError("cannot encode an empty unmasked set")
    x = ad.take_tokens(embeddings, unmasked_idx)
    for i in range(state.config.enc_layers):
        y = _ln(state, f"enc.{i}.ln1", x)
        x = x + _mha(state, f"enc.{i}.attn", y, y, rng=rng)
        x = x + _mlp(state, f"enc.{i}.mlp", _ln(state, f"enc.{i}.ln2", x), rng=rng)
    return x


def _mask_queries(state: ModelState, masked_idx: np.ndarray, batch: int) -> Tensor:
    if masked_idx.ndim == 1:
        masked_idx = np.broadcast_to(masked_idx, (batch, masked_idx.size))
    pos = ad.take(state.params["pos"], masked_idx)       # (B, M, D)
    return state.params["mask_token"] + pos


def decode_cross_batch(state: ModelState, z: Tensor, masked_idx: np.ndarray,
                       capture: bool = False, rng=None):
    """Cross-attention decoder: mask queries attend only to encoder output."""
    if state.config.decoder_mode != "cross":
        raise ValueError("model was built with a self-attention decoder")
    if masked_idx.shape[-1] == 0:
        raise ValueError("empty masked set; nothing to decode")
    b = z.shape[0]
    q = _mask_queries(state, masked_idx, b)
    captured: list | None = [] if capture else None
    for i in range(state.config.dec_layers):
        yq = _ln(state, f"dec.{i}.ln1", q)
        ykv = _ln(state, f"dec.{i}.lnkv", z)
        q = q + _mha(state, f"dec.{i}.attn", yq, ykv, capture=captured, rng=rng)
        q = q + _mlp(state, f"dec.{i}.mlp", _ln(state, f"dec.{i}.ln2", q), rng=rng)
    recon = ad.matmul(q, state.params["recon.w"]) + state.params["recon.b"]
    if capture:
        # captured[i]: (B, H, M, S) -> (B, L, H, M, S)
        return recon, np.stack(captured, axis=1)
    return recon


def decode_self_batch(state: ModelState, z: Tensor, masked_idx: np.ndarray,
                      rng=None) -> Tensor:
    """Ablation decoder: [queries; context] under plain self-attention."""
    if state.config.decoder_mode != "self":
        raise ValueError("model was built with a cross-attention decoder")
    if masked_idx.shape[-1] == 0:
        raise ValueError("empty masked set; nothing to decode")
    b = z.shape[0]
    m = masked_idx.shape[-1]
    q = _mask_queries(state, masked_idx, b)
    x = ad.concat([q, z], axis=1)
    for i in range(state.config.dec_layers):
        y = _ln(state, f"dec.{i}.ln1", x)
        x = x + _mha(state, f"dec.{i}.attn", y, y, rng=rng)
        x = x + _mlp(state, f"dec.{i}.mlp", _ln(state, f"dec.{i}.ln2", x), rng=rng)
    q_out = x[:, :m, :]
    return ad.matmul(q_out, state.params["recon.w"]) + state.params["recon.b"]


def recon_loss_batch(pred: Tensor, truth: np.ndarray, masked_idx: np.ndarray,
                     atlas: NetworkAtlas, spec: SegmentSpec) -> Tensor:
    """Per-sample MSE over non-pad elements of the masked tokens; (B,)."""
    if masked_idx.shape[-1] == 0:
        raise ValueError("empty masked set")
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} != truth {truth.shape}")
    col_mask = atlas.token_pad_mask(spec)                # (cols, token_dim)
    n_cols = col_mask.shape[0]
    elem = col_mask[masked_idx % n_cols]                 # (M, dim) or (B, M, dim)
    elem = elem.astype(pred.dtype)
    count = elem.reshape(-1, elem.shape[-2] * elem.shape[-1]).sum(axis=-1)
    if np.any(count == 0):
        raise ValueError("masked set contains only pad elements")
    diff = pred - Tensor(truth.astype(pred.dtype, copy=False))
    sq = ad.mul(diff, diff)
    masked_sq = ad.mul(sq, Tensor(elem))
    per_sample = ad.sum_(masked_sq, axis=(1, 2))
    scale = 1.0 / count if count.size > 1 else float(1.0 / count[0])
    return ad.mul(per_sample, Tensor(np.asarray(scale, dtype=pred.dtype)))


def encoder_pool_batch(state: ModelState, tokens: np.ndarray, rng=None) -> Tensor:
    """Encoder over the full grid (empty mask), mean-pooled over tokens."""
    emb = embed_batch(state, tokens)
    all_idx = np.arange(tokens.shape[1])
    z = encode_batch(state, emb, all_idx, rng=rng)
    return ad.mean(z, axis=1)                            # (B, D)


def classify_logits_batch(state: ModelState, tokens: np.ndarray, rng=None) -> Tensor:
    pooled = encoder_pool_batch(state, tokens, rng=rng)
    p = state.params
    h = ad.gelu(ad.matmul(pooled, p["cls.w1"]) + p["cls.b1"])
    return ad.matmul(h, p["cls.w2"]) + p["cls.b2"]       # (B, 3)


# -- single-sample API ----------------------------------------------------


def embed_tokens(grid: TokenGrid, state: ModelState) -> Tensor:
    """Full token embedding sequence for one grid, (token_count, D)."""
    out = embed_batch(state, grid.flat()[None, :, :])
    return ad.reshape(out, out.shape[1:])


def encode(embeddings: Tensor, plan: MaskPlan, state: ModelState) -> EncoderOutput:
    """Run the encoder over the unmasked tokens of one embedded grid."""
    if plan.n_unmasked == 0:
        raise ValueError("mask plan leaves no unmasked tokens to encode")
    emb3 = ad.reshape(embeddings, (1,) + tuple(embeddings.shape))
    z = encode_batch(state, emb3, plan.unmasked_indices)
    return EncoderOutput(ad.reshape(z, z.shape[1:]), plan)


def decode_masked(enc_out: EncoderOutput, plan: MaskPlan, state: ModelState,
                  capture: bool = False):
    """Reconstruct the masked tokens; optionally capture attention."""
    _check_plan(enc_out, plan)
    z3 = ad.reshape(enc_out.Z, (1,) + tuple(enc_out.Z.shape))
    out = decode_cross_batch(state, z3, plan.masked_indices, capture=capture)
    if capture:
        recon, attn = out
        record = AttnRecord(attn[0], plan)
        return ad.reshape(recon, recon.shape[1:]), record
    return ad.reshape(out, out.shape[1:])


def decode_ablation_self(enc_out: EncoderOutput, plan: MaskPlan,
                         state: ModelState) -> Tensor:
    _check_plan(enc_out, plan)
    z3 = ad.reshape(enc_out.Z, (1,) + tuple(enc_out.Z.shape))
    out = decode_self_batch(state, z3, plan.masked_indices)
    return ad.reshape(out, out.shape[1:])


def _check_plan(enc_out: EncoderOutput, plan: MaskPlan) -> None:
    if plan is not enc_out.plan and not np.array_equal(
            plan.masked_indices, enc_out.plan.masked_indices):
        raise ValueError("decode plan does not match the encoder's plan")


def reconstruction_loss(pred: Tensor, truth: np.ndarray, plan: MaskPlan,
                        atlas: NetworkAtlas, spec: SegmentSpec) -> Tensor:
    """Scalar MSE over the masked tokens' non-pad elements."""
    p3 = ad.reshape(pred, (1,) + tuple(pred.shape))
    per = recon_loss_batch(p3, truth[None], plan.masked_indices, atlas, spec)
    return ad.reshape(per, ())


def pool_and_classify(state: ModelState, grid: TokenGrid) -> Tensor:
    """3-class logits from the mean-pooled full-context encoder output."""
    with_batch = classify_logits_batch(state, grid.flat()[None, :, :])
    return ad.reshape(with_batch, (3,))


def embedding_summary(state: ModelState, grid: TokenGrid) -> tuple[np.ndarray, float]:
    """Mean-pooled encoder vector and its l2 norm (inference only)."""
    with ad.no_grad():
        pooled = encoder_pool_batch(state, grid.flat()[None, :, :])
    v = pooled.data[0]
    return v, float(np.linalg.norm(v))


# -- checkpointing --------------------------------------------------------

_DTYPE_CODES = {"float32": 1, "float64": 2}
_CODE_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


def save_checkpoint(state: ModelState, path) -> None:
    cfg = state.config
    cfg_text = "\n".join([
        f"d_emb = {cfg.d_emb}",
        f"enc_layers = {cfg.enc_layers}",
        f"dec_layers = {cfg.dec_layers}",
        f"heads = {cfg.heads}",
        f"d_mlp = {cfg.d_mlp}",
        f"token_dim = {cfg.token_dim}",
        f"max_tokens = {cfg.max_tokens}",
        f"decoder_mode = {cfg.decoder_mode}",
        f"mask_mode = {cfg.mask_mode}",
        f"dropout = {cfg.dropout!r}",
        f"dtype = {cfg.dtype}",
        f"seed = {state.seed}",
    ]).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(cfg_text)))
        fh.write(cfg_text)
        fh.write(struct.pack("<I", len(state.params)))
        for name, p in state.params.items():
            blob = np.ascontiguousarray(p.data).astype(
                _CODE_DTYPES[_DTYPE_CODES[cfg.dtype]], copy=False).tobytes()
            nm = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nm)))
            fh.write(nm)
            fh.write(struct.pack("<BB", _DTYPE_CODES[cfg.dtype], p.data.ndim))
            for dim in p.data.shape:
                fh.write(struct.pack("<Q", dim))
            fh.write(struct.pack("<Q", len(blob)))
            fh.write(blob)
        fh.write(b"NREN")


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return buf


def load_checkpoint(path) -> ModelState:
    path = Path(path)
    with path.open("rb") as fh:
        if _read_exact(fh, 4, "magic") != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: format version {version}, "
                                  f"expected {CHECKPOINT_VERSION}")
        (cfg_len,) = struct.unpack("<Q", _read_exact(fh, 8, "config length"))
        if cfg_len > 1 << 20:
            raise CheckpointError(f"{path}: corrupted config length {cfg_len}")
        cfg_map: dict[str, str] = {}
        for line in _read_exact(fh, cfg_len, "config").decode("utf-8").splitlines():
            key, _, val = line.partition("=")
            cfg_map[key.strip()] = val.strip()
        config = ModelConfig(
            d_emb=int(cfg_map["d_emb"]), enc_layers=int(cfg_map["enc_layers"]),
            dec_layers=int(cfg_map["dec_layers"]), heads=int(cfg_map["heads"]),
            d_mlp=int(cfg_map["d_mlp"]), token_dim=int(cfg_map["token_dim"]),
            max_tokens=int(cfg_map["max_tokens"]),
            decoder_mode=cfg_map["decoder_mode"], mask_mode=cfg_map["mask_mode"],
            dropout=float(cfg_map["dropout"]), dtype=cfg_map["dtype"])
        state = ModelState(config, int(cfg_map["seed"]))
        (n_params,) = struct.unpack("<I", _read_exact(fh, 4, "parameter count"))
        for _ in range(n_params):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "name length"))
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            code, ndim = struct.unpack("<BB", _read_exact(fh, 2, "dtype/ndim"))
            if code not in _CODE_DTYPES:
                raise CheckpointError(f"{path}: unknown dtype code {code}")
            shape = tuple(struct.unpack("<Q", _read_exact(fh, 8, "dim"))[0]
                          for _ in range(ndim))
            (nbytes,) = struct.unpack("<Q", _read_exact(fh, 8, "blob length"))
            expected = int(np.prod(shape, dtype=np.int64)) * _CODE_DTYPES[code].itemsize
            if nbytes != expected:
                raise CheckpointError(f"{path}: corrupted length field for "
                                      f"'{name}' ({nbytes} != {expected})")
            arr = np.frombuffer(_read_exact(fh, nbytes, name),
                                dtype=_CODE_DTYPES[code]).reshape(shape)
            state.params[name] = Tensor(
                arr.astype(config.np_dtype, copy=True), requires_grad=True)
        if _read_exact(fh, 4, "trailer") != b"NREN":
            raise CheckpointError(f"{path}: missing end marker")
    return state
