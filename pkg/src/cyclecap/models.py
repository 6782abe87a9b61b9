"""The four networks and their checkpoint format.

* ``ImageProjection`` maps raw region features into the model space (the
  stand-in for a CNN encoder, whose features arrive via feature files).
* ``SoftAttentionDecoder`` is an LSTM captioner with one attention head over
  image regions; with an English vocabulary it is the first-stage model,
  with a German vocabulary it is the single-stage baseline.
* ``CaptionEncoder`` is a bidirectional GRU over caption tokens.
* ``DualAttentionDecoder`` is the German decoder with two attention heads,
  one over image regions and one over encoded caption states.

``ImageCaptioner`` bundles projection + soft-attention decoder (the
pretraining artifact); ``ModelBundle`` adds the caption encoder and the
dual-attention decoder for the full two-stage pipeline.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import init
from .attention import AttentionLayer, attend
from .cells import GRUParams, LSTMParams, gru_step, lstm_step
from .cycle import AttentionRecord
from .data import FeatureGrid
from .errors import DataError, DimensionError, FormatError
from .tensor import (Parameter, Tensor, add, concat, dropout, embedding_lookup,
                     log_softmax, matmul, mean_rows, stack_rows, tanh)


@dataclass(frozen=True)
class ModelDims:
    """Architecture sizes. Desk-scale defaults; ``full_scale`` mirrors the
    512-unit configuration used with real CNN features."""

    feature_dim: int
    en_vocab: int
    de_vocab: int = 0
    proj_dim: int = 64
    embed_dim: int = 64
    hidden_dim: int = 64
    attn_dim: int = 64

    @classmethod
    def full_scale(cls, feature_dim: int, en_vocab: int, de_vocab: int = 0) -> "ModelDims":
        return cls(feature_dim=feature_dim, en_vocab=en_vocab, de_vocab=de_vocab,
                   proj_dim=512, embed_dim=512, hidden_dim=512, attn_dim=512)


def init_state(rows: Tensor, w: Parameter, b: Parameter) -> Tensor:
    """tanh-squashed projection of the row mean; permutation invariant."""
    return tanh(add(matmul(mean_rows(rows), w), b))


class ImageProjection:
    """Per-region affine map with tanh from feature space into model space."""

    def __init__(self, rng: np.random.Generator, feature_dim: int, proj_dim: int,
                 prefix: str):
        self.feature_dim = feature_dim
        self.w = init.weight(rng, (feature_dim, proj_dim), f"{prefix}/w")
        self.b = init.bias((proj_dim,), f"{prefix}/b")

    def project(self, grid: FeatureGrid) -> Tensor:
        if grid.dim != self.feature_dim:
            raise DimensionError(
                f"image projection expects feature dim {self.feature_dim}, "
                f"grid has {grid.dim}")
        return tanh(add(matmul(Tensor(grid.values), self.w), self.b))

    def named(self) -> dict[str, Parameter]:
        return {self.w.name: self.w, self.b.name: self.b}


class SoftAttentionDecoder:
    """LSTM decoder attending over image regions.

    Per step: attend with the previous hidden state as query, feed
    [context; previous word embedding] into the LSTM, project the new hidden
    state to vocabulary log-probabilities.
    """

    def __init__(self, rng: np.random.Generator, vocab_size: int, dims: ModelDims,
                 prefix: str):
        self.vocab_size = vocab_size
        self.embedding = init.weight(rng, (vocab_size, dims.embed_dim),
                                     f"{prefix}/embedding")
        self.attn = AttentionLayer(rng, key_dim=dims.proj_dim,
                                   query_dim=dims.hidden_dim,
                                   attn_dim=dims.attn_dim, prefix=f"{prefix}/attn")
        self.lstm = LSTMParams(rng, dims.proj_dim + dims.embed_dim, dims.hidden_dim,
                               f"{prefix}/lstm")
        self.w_out = init.weight(rng, (dims.hidden_dim, vocab_size), f"{prefix}/w_out")
        self.b_out = init.bias((vocab_size,), f"{prefix}/b_out")
        self.w_h0 = init.weight(rng, (dims.proj_dim, dims.hidden_dim), f"{prefix}/w_h0")
        self.b_h0 = init.bias((dims.hidden_dim,), f"{prefix}/b_h0")
        self.w_c0 = init.weight(rng, (dims.proj_dim, dims.hidden_dim), f"{prefix}/w_c0")
        self.b_c0 = init.bias((dims.hidden_dim,), f"{prefix}/b_c0")

    def initial_state(self, keys: Tensor) -> tuple[Tensor, Tensor]:
        return (init_state(keys, self.w_h0, self.b_h0),
                init_state(keys, self.w_c0, self.b_c0))

    def step(self, keys: Tensor, h: Tensor, c: Tensor, y_prev: int, *,
             dropout_rate: float = 0.0,
             rng: np.random.Generator | None = None):
        """One decode step; returns (log_probs, h, c, region_weights)."""
        att = attend(self.attn, keys, h)
        x = concat([att.context, embedding_lookup(self.embedding, int(y_prev))])
        h, c = lstm_step(self.lstm, x, h, c)
        pre = dropout(h, dropout_rate, rng) if dropout_rate > 0.0 else h
        logits = add(matmul(pre, self.w_out), self.b_out)
        return log_softmax(logits), h, c, att.weights

    def named(self) -> dict[str, Parameter]:
        out = {self.embedding.name: self.embedding}
        out.update(self.attn.named())
        out.update(self.lstm.named())
        for p in (self.w_out, self.b_out, self.w_h0, self.b_h0, self.w_c0, self.b_c0):
            out[p.name] = p
        return out


class CaptionEncoder:
    """Bidirectional GRU over caption tokens; state row j is [forward_j; backward_j]."""

    def __init__(self, rng: np.random.Generator, vocab_size: int, dims: ModelDims,
                 prefix: str):
        self.vocab_size = vocab_size
        self.hidden_dim = dims.hidden_dim
        self.embedding = init.weight(rng, (vocab_size, dims.embed_dim),
                                     f"{prefix}/embedding")
        self.fwd = GRUParams(rng, dims.embed_dim, dims.hidden_dim, f"{prefix}/fwd")
        self.bwd = GRUParams(rng, dims.embed_dim, dims.hidden_dim, f"{prefix}/bwd")

    def encode(self, token_ids: Sequence[int]) -> Tensor:
        """Encode N tokens into an (N, 2*hidden) state matrix."""
        if len(token_ids) == 0:
            raise DataError("caption encoder: empty token sequence")
        embeds = [embedding_lookup(self.embedding, int(t)) for t in token_ids]
        zeros = Tensor(np.zeros(self.hidden_dim))
        forward = []
        h = zeros
        for e in embeds:
            h = gru_step(self.fwd, e, h)
            forward.append(h)
        backward: list[Tensor] = [zeros] * len(embeds)
        h = zeros
        for j in range(len(embeds) - 1, -1, -1):
            h = gru_step(self.bwd, embeds[j], h)
            backward[j] = h
        return stack_rows([concat([f, b]) for f, b in zip(forward, backward)])

    def named(self) -> dict[str, Parameter]:
        out = {self.embedding.name: self.embedding}
        out.update(self.fwd.named())
        out.update(self.bwd.named())
        return out


class DualAttentionDecoder:
    """LSTM decoder with attention over regions and over caption states.

    The step input is the concatenation [region context; caption context;
    previous word embedding].
    """

    def __init__(self, rng: np.random.Generator, vocab_size: int, dims: ModelDims,
                 prefix: str):
        self.vocab_size = vocab_size
        self.embedding = init.weight(rng, (vocab_size, dims.embed_dim),
                                     f"{prefix}/embedding")
        self.attn_regions = AttentionLayer(rng, key_dim=dims.proj_dim,
                                           query_dim=dims.hidden_dim,
                                           attn_dim=dims.attn_dim,
                                           prefix=f"{prefix}/attn_regions")
        self.attn_caption = AttentionLayer(rng, key_dim=2 * dims.hidden_dim,
                                           query_dim=dims.hidden_dim,
                                           attn_dim=dims.attn_dim,
                                           prefix=f"{prefix}/attn_caption")
        in_dim = dims.proj_dim + 2 * dims.hidden_dim + dims.embed_dim
        self.lstm = LSTMParams(rng, in_dim, dims.hidden_dim, f"{prefix}/lstm")
        self.w_out = init.weight(rng, (dims.hidden_dim, vocab_size), f"{prefix}/w_out")
        self.b_out = init.bias((vocab_size,), f"{prefix}/b_out")
        self.w_s0 = init.weight(rng, (dims.proj_dim, dims.hidden_dim), f"{prefix}/w_s0")
        self.b_s0 = init.bias((dims.hidden_dim,), f"{prefix}/b_s0")
        self.w_m0 = init.weight(rng, (dims.proj_dim, dims.hidden_dim), f"{prefix}/w_m0")
        self.b_m0 = init.bias((dims.hidden_dim,), f"{prefix}/b_m0")

    def initial_state(self, keys: Tensor) -> tuple[Tensor, Tensor]:
        return (init_state(keys, self.w_s0, self.b_s0),
                init_state(keys, self.w_m0, self.b_m0))

    def step(self, region_keys: Tensor, caption_states: Tensor, s: Tensor, mem: Tensor,
             y_prev: int, *, dropout_rate: float = 0.0,
             rng: np.random.Generator | None = None):
        """One decode step; returns (log_probs, s, mem, region_weights,
        caption_weights)."""
        att_img = attend(self.attn_regions, region_keys, s)
        att_cap = attend(self.attn_caption, caption_states, s)
        x = concat([att_img.context, att_cap.context,
                    embedding_lookup(self.embedding, int(y_prev))])
        s, mem = lstm_step(self.lstm, x, s, mem)
        pre = dropout(s, dropout_rate, rng) if dropout_rate > 0.0 else s
        logits = add(matmul(pre, self.w_out), self.b_out)
        return log_softmax(logits), s, mem, att_img.weights, att_cap.weights

    def named(self) -> dict[str, Parameter]:
        out = {self.embedding.name: self.embedding}
        out.update(self.attn_regions.named())
        out.update(self.attn_caption.named())
        out.update(self.lstm.named())
        for p in (self.w_out, self.b_out, self.w_s0, self.b_s0, self.w_m0, self.b_m0):
            out[p.name] = p
        return out


class ImageCaptioner:
    """Stage-one model: image projection plus soft-attention decoder."""

    def __init__(self, dims: ModelDims, seed: int):
        self.dims = dims
        rng = np.random.default_rng(seed)
        self.image_proj = ImageProjection(rng, dims.feature_dim, dims.proj_dim,
                                          "captioner/proj")
        self.decoder = SoftAttentionDecoder(rng, dims.en_vocab, dims,
                                            "captioner/decoder")

    def project(self, grid: FeatureGrid) -> Tensor:
        return self.image_proj.project(grid)

    def named_parameters(self) -> dict[str, Parameter]:
        out = self.image_proj.named()
        out.update(self.decoder.named())
        return out


class ModelBundle:
    """Full two-stage pipeline: captioner, caption encoder, dual decoder."""

    def __init__(self, dims: ModelDims, seed: int, captioner: ImageCaptioner | None = None):
        if dims.de_vocab < 5:
            raise DataError("bundle needs a German vocabulary (>= 4 reserved ids + 1)")
        self.dims = dims
        self.captioner = captioner if captioner is not None else ImageCaptioner(dims, seed)
        if self.captioner.dims.proj_dim != dims.proj_dim \
                or self.captioner.dims.hidden_dim != dims.hidden_dim:
            raise DimensionError("captioner dims do not match bundle dims")
        rng = np.random.default_rng(seed)
        self.cap_encoder = CaptionEncoder(rng, dims.en_vocab, dims, "cap_encoder")
        self.de_decoder = DualAttentionDecoder(rng, dims.de_vocab, dims, "de_decoder")

    def named_parameters(self) -> dict[str, Parameter]:
        out = self.captioner.named_parameters()
        out.update(self.cap_encoder.named())
        out.update(self.de_decoder.named())
        return out

    def part1_parameters(self) -> dict[str, Parameter]:
        return self.captioner.named_parameters()

    def part2_parameters(self) -> dict[str, Parameter]:
        out = self.cap_encoder.named()
        out.update(self.de_decoder.named())
        return out


# ---------------------------------------------------------------------------
# Teacher-forced unrolling
# ---------------------------------------------------------------------------

def unroll_captioner(captioner: ImageCaptioner, keys: Tensor, ids: Sequence[int], *,
                     dropout_rate: float = 0.0,
                     rng: np.random.Generator | None = None
                     ) -> tuple[list[Tensor], list[Tensor]]:
    """Teacher-force the soft-attention decoder over an encoded caption.

    ``ids`` is the BOS..EOS sequence; step t conditions on ids[t] and predicts
    ids[t+1], so both returned lists have len(ids) - 1 entries (one log-prob
    row and one region-attention row per target, EOS included).
    """
    dec = captioner.decoder
    h, c = dec.initial_state(keys)
    logp_rows, region_rows = [], []
    for t in range(len(ids) - 1):
        logp, h, c, region_w = dec.step(keys, h, c, ids[t],
                                        dropout_rate=dropout_rate, rng=rng)
        logp_rows.append(logp)
        region_rows.append(region_w)
    return logp_rows, region_rows


def unroll_german(bundle: ModelBundle, keys: Tensor, cap_states: Tensor,
                  de_ids: Sequence[int], *, dropout_rate: float = 0.0,
                  rng: np.random.Generator | None = None
                  ) -> tuple[list[Tensor], list[Tensor], list[Tensor]]:
    """Teacher-force the dual-attention decoder; returns log-prob rows plus
    region-attention and caption-attention rows, one triple per target."""
    dec = bundle.de_decoder
    s, mem = dec.initial_state(keys)
    logp_rows, region_rows, caption_rows = [], [], []
    for t in range(len(de_ids) - 1):
        logp, s, mem, region_w, caption_w = dec.step(
            keys, cap_states, s, mem, de_ids[t], dropout_rate=dropout_rate, rng=rng)
        logp_rows.append(logp)
        region_rows.append(region_w)
        caption_rows.append(caption_w)
    return logp_rows, region_rows, caption_rows


def teacher_forced_record(bundle: ModelBundle, features: FeatureGrid,
                          en_ids: Sequence[int],
                          de_ids: Sequence[int]) -> AttentionRecord:
    """Attention record for ground-truth captions, evaluation mode (no
    dropout, no tape). The caption encoder consumes the English targets
    (content plus EOS, BOS dropped) so its state count matches the English
    attention rows."""
    keys = bundle.captioner.project(features)
    _, en_rows = unroll_captioner(bundle.captioner, keys, en_ids)
    cap_states = bundle.cap_encoder.encode(en_ids[1:])
    _, de_region_rows, de_caption_rows = unroll_german(bundle, keys, cap_states, de_ids)
    return AttentionRecord(
        en_to_regions=np.stack([r.data for r in en_rows]),
        de_to_regions=np.stack([r.data for r in de_region_rows]),
        de_to_en=np.stack([r.data for r in de_caption_rows]),
    )


# ---------------------------------------------------------------------------
# Checkpoints: versioned container of (name, shape, float64 payload) entries
# with a JSON header describing the architecture.
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"CYCC"
CHECKPOINT_VERSION = 1


def save_checkpoint(path: Path | str, kind: str, dims: ModelDims,
                    params: Mapping[str, Parameter]) -> None:
    header = json.dumps({"kind": kind, "dims": asdict(dims)}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<HI", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            arr = np.ascontiguousarray(params[name].data, dtype="<f8")
            encoded = name.encode()
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path: Path | str) -> tuple[str, ModelDims, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    off = 0

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(raw):
            raise FormatError(f"{path}: truncated at offset {off}")
        chunk = raw[off:off + n]
        off += n
        return chunk

    if take(4) != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic")
    version, header_len = struct.unpack("<HI", take(6))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(take(header_len))
    dims = ModelDims(**header["dims"])
    (count,) = struct.unpack("<I", take(4))
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode()
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).copy()
    if off != len(raw):
        raise FormatError(f"{path}: {len(raw) - off} trailing bytes at offset {off}")
    return header["kind"], dims, arrays


def load_into(params: Mapping[str, Parameter], arrays: Mapping[str, np.ndarray]) -> None:
    """Copy checkpoint arrays into parameters; names and shapes must match exactly."""
    missing = sorted(set(params) - set(arrays))
    extra = sorted(set(arrays) - set(params))
    if missing or extra:
        raise FormatError(f"checkpoint does not match architecture; "
                          f"missing={missing[:3]} extra={extra[:3]}")
    for name, p in params.items():
        if arrays[name].shape != p.data.shape:
            raise FormatError(f"checkpoint entry {name!r} has shape "
                              f"{arrays[name].shape}, expected {p.data.shape}")
        p.data = arrays[name].astype(np.float64, copy=True)


def save_captioner(captioner: ImageCaptioner, path: Path | str) -> None:
    save_checkpoint(path, "captioner", captioner.dims, captioner.named_parameters())


def load_captioner(path: Path | str) -> ImageCaptioner:
    kind, dims, arrays = load_checkpoint(path)
    if kind != "captioner":
        raise FormatError(f"{path}: expected a captioner checkpoint, found {kind!r}")
    model = ImageCaptioner(dims, seed=0)
    load_into(model.named_parameters(), arrays)
    return model


def save_bundle(bundle: ModelBundle, path: Path | str) -> None:
    save_checkpoint(path, "bundle", bundle.dims, bundle.named_parameters())


def load_bundle(path: Path | str) -> ModelBundle:
    kind, dims, arrays = load_checkpoint(path)
    if kind != "bundle":
        raise FormatError(f"{path}: expected a bundle checkpoint, found {kind!r}")
    bundle = ModelBundle(dims, seed=0)
    load_into(bundle.named_parameters(), arrays)
    return bundle
