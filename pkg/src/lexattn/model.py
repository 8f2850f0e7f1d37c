"""The classification network and its lexicon-conditioned attention variants.

Per token: embed (optionally with the lexicon vector concatenated), run a
single-layer unidirectional LSTM to produce annotations h_1..h_T, score each
annotation through one of the conditioning functions, pool the annotations
with the masked softmax of those scores, and classify the pooled vector with
a linear head.

Variants:
  baseline            score input tanh(W_a h + b_a); lexicon unused
  emb_conc            lexicon vector concatenated to the embedding; baseline attention
  attn_conc           score input tanh(W_c [h || c] + b_c)
  attn_gate           score input sigmoid(W_g c + b_g) * h
  attn_affine         score input (W_gamma c + b_gamma) * h + (W_beta c + b_beta)
  gate_plus_emb_conc  attn_gate conditioning plus the emb_conc input concat

The pooled representation always sums the unconditioned annotations h_i;
conditioning only shapes the attention distribution.
"""

from __future__ import annotations

import dataclasses
import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .textdata import PAD_INDEX

__all__ = [
    "CHECKPOINT_MAGIC",
    "Checkpoint",
    "ConfigError",
    "ForwardResult",
    "ModelConfig",
    "ModelParams",
    "VARIANTS",
    "attend",
    "condition",
    "forward",
    "init_params",
    "linear",
    "load_checkpoint",
    "lstm_step",
    "predict",
    "save_checkpoint",
]

VARIANTS = ("baseline", "emb_conc", "attn_conc", "attn_gate", "attn_affine",
            "gate_plus_emb_conc")

_EMB_CONC_VARIANTS = ("emb_conc", "gate_plus_emb_conc")


class ConfigError(ValueError):
    """Model configuration inconsistent with itself, the data, or the params."""


def conditioning_kind(variant: str) -> str:
    if variant in ("baseline", "emb_conc"):
        return "none"
    if variant == "attn_conc":
        return "conc"
    if variant in ("attn_gate", "gate_plus_emb_conc"):
        return "gate"
    if variant == "attn_affine":
        return "affine"
    raise ConfigError(f"unknown variant {variant!r}")


@dataclass
class ModelConfig:
    variant: str
    embed_dim: int
    hidden_dim: int
    num_classes: int
    lex_dim: int = 0
    attn_dim: int = 0  # 0 means: same as hidden_dim
    dropout_p: float = 0.2
    noise_std: float = 0.1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; "
                              f"expected one of {VARIANTS}")
        if self.attn_dim == 0:
            self.attn_dim = self.hidden_dim
        for name in ("embed_dim", "hidden_dim", "attn_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.lex_dim < 0:
            raise ConfigError("lex_dim must be >= 0")
        if self.lex_dim == 0 and self.variant != "baseline":
            raise ConfigError(
                f"variant {self.variant!r} needs lexicon features (lex_dim >= 1)")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError("dropout_p must lie in [0, 1)")
        if self.noise_std < 0.0:
            raise ConfigError("noise_std must be >= 0")

    @property
    def lstm_input_dim(self) -> int:
        extra = self.lex_dim if self.variant in _EMB_CONC_VARIANTS else 0
        return self.embed_dim + extra

    @property
    def score_dim(self) -> int:
        """Width of the conditioning output, hence of v_a."""
        return self.attn_dim if conditioning_kind(self.variant) in ("none", "conc") \
            else self.hidden_dim


@dataclass
class LstmParams:
    W_i: np.ndarray
    b_i: np.ndarray
    W_f: np.ndarray
    b_f: np.ndarray
    W_o: np.ndarray
    b_o: np.ndarray
    W_c: np.ndarray
    b_c: np.ndarray


@dataclass
class AttentionParams:
    v_a: np.ndarray
    W_a: np.ndarray | None = None
    b_a: np.ndarray | None = None


@dataclass
class ConditioningParams:
    W_c: np.ndarray | None = None
    b_c: np.ndarray | None = None
    W_g: np.ndarray | None = None
    b_g: np.ndarray | None = None
    W_gamma: np.ndarray | None = None
    b_gamma: np.ndarray | None = None
    W_beta: np.ndarray | None = None
    b_beta: np.ndarray | None = None


@dataclass
class ClassifierParams:
    W_out: np.ndarray
    b_out: np.ndarray


@dataclass
class ModelParams:
    """All learnable arrays of one variant. Field values are numpy arrays,
    except inside a forward pass where :meth:`on_tape` mirrors them as
    tape-registered tensors."""

    embedding: np.ndarray
    lstm: LstmParams
    attn: AttentionParams
    cond: ConditioningParams
    cls: ClassifierParams

    def named(self):
        """(name, array) pairs in a fixed order; absent fields are skipped."""
        out = [("embedding", self.embedding)]
        for group, obj in (("lstm", self.lstm), ("attn", self.attn),
                           ("cond", self.cond), ("cls", self.cls)):
            for f in dataclasses.fields(obj):
                value = getattr(obj, f.name)
                if value is not None:
                    out.append((f"{group}.{f.name}", value))
        return out

    def copy(self) -> "ModelParams":
        named = {name: arr.copy() for name, arr in self.named()}
        return params_from_named(named)

    def on_tape(self, tape: ad.Tape):
        """Mirror every array as a leaf tensor on ``tape``.

        Returns (tensor-valued ModelParams, {name: leaf tensor}).
        """
        leaves = {name: tape.tensor(arr) for name, arr in self.named()}

        def group(cls_, prefix):
            kwargs = {}
            for f in dataclasses.fields(cls_):
                kwargs[f.name] = leaves.get(f"{prefix}.{f.name}")
            return cls_(**kwargs)

        taped = ModelParams(
            embedding=leaves["embedding"],
            lstm=group(LstmParams, "lstm"),
            attn=group(AttentionParams, "attn"),
            cond=group(ConditioningParams, "cond"),
            cls=group(ClassifierParams, "cls"),
        )
        return taped, leaves


def params_from_named(named: dict) -> ModelParams:
    def group(cls_, prefix):
        kwargs = {f.name: named.get(f"{prefix}.{f.name}")
                  for f in dataclasses.fields(cls_)}
        return cls_(**kwargs)

    return ModelParams(
        embedding=named["embedding"],
        lstm=group(LstmParams, "lstm"),
        attn=group(AttentionParams, "attn"),
        cond=group(ConditioningParams, "cond"),
        cls=group(ClassifierParams, "cls"),
    )


def init_params(config: ModelConfig, vocab_size: int, rng,
                embedding=None) -> ModelParams:
    """Initialize one variant's parameters.

    Weights are uniform(-k, k) with k = 1/sqrt(fan_in); biases are zero
    except the LSTM forget bias, which starts at 1.0. The embedding is
    either the given pretrained matrix or uniform(-0.05, 0.05) rows; the
    PAD row is zero either way. Draw order is fixed, so one seeded rng
    yields reproducible parameters.
    """
    def weight(out_dim, in_dim):
        k = 1.0 / np.sqrt(in_dim)
        return rng.uniform(-k, k, (out_dim, in_dim))

    def vector(dim):
        k = 1.0 / np.sqrt(dim)
        return rng.uniform(-k, k, dim)

    if embedding is not None:
        matrix = np.array(embedding.matrix, dtype=np.float64)
        if matrix.shape != (vocab_size, config.embed_dim):
            raise ConfigError(
                f"embedding shape {matrix.shape} does not match vocabulary "
                f"{vocab_size} x embed_dim {config.embed_dim}")
        matrix[PAD_INDEX] = 0.0
    else:
        matrix = rng.uniform(-0.05, 0.05, (vocab_size, config.embed_dim))
        matrix[PAD_INDEX] = 0.0

    dh = config.hidden_dim
    zin = config.lstm_input_dim + dh
    lstm = LstmParams(
        W_i=weight(dh, zin), b_i=np.zeros(dh),
        W_f=weight(dh, zin), b_f=np.ones(dh),
        W_o=weight(dh, zin), b_o=np.zeros(dh),
        W_c=weight(dh, zin), b_c=np.zeros(dh),
    )

    kind = conditioning_kind(config.variant)
    cond = ConditioningParams()
    if kind == "none":
        attn = AttentionParams(W_a=weight(config.attn_dim, dh),
                               b_a=np.zeros(config.attn_dim),
                               v_a=vector(config.attn_dim))
    elif kind == "conc":
        cond.W_c = weight(config.attn_dim, dh + config.lex_dim)
        cond.b_c = np.zeros(config.attn_dim)
        attn = AttentionParams(v_a=vector(config.attn_dim))
    elif kind == "gate":
        cond.W_g = weight(dh, config.lex_dim)
        cond.b_g = np.zeros(dh)
        attn = AttentionParams(v_a=vector(dh))
    else:  # affine
        cond.W_gamma = weight(dh, config.lex_dim)
        cond.b_gamma = np.zeros(dh)
        cond.W_beta = weight(dh, config.lex_dim)
        cond.b_beta = np.zeros(dh)
        attn = AttentionParams(v_a=vector(dh))

    cls = ClassifierParams(W_out=weight(config.num_classes, dh),
                           b_out=np.zeros(config.num_classes))
    return ModelParams(matrix, lstm, attn, cond, cls)


def linear(x, W, b):
    """x @ W^T + b for row-stacked x, or W @ x + b for a single vector."""
    xd = x.data if isinstance(x, ad.Tensor) else np.asarray(x)
    if xd.ndim == 1:
        return ad.add(ad.matmul(W, x), b)
    return ad.add(ad.matmul(x, W, transpose_b=True), b)


def lstm_step(x_t, state, params: LstmParams):
    """One LSTM step on a vector or a row-stacked batch.

    i = sigmoid(W_i [x||h] + b_i), f, o likewise; g = tanh(W_c [x||h] + b_c);
    c' = f*c + i*g; h' = o*tanh(c').
    """
    h, c = state
    z = ad.concat(x_t, h)
    i = ad.sigmoid(linear(z, params.W_i, params.b_i))
    f = ad.sigmoid(linear(z, params.W_f, params.b_f))
    o = ad.sigmoid(linear(z, params.W_o, params.b_o))
    g = ad.tanh(linear(z, params.W_c, params.b_c))
    c_next = f * c + i * g
    h_next = o * c_next.tanh()
    return h_next, c_next


def condition(h, c, variant: str, attn: AttentionParams,
              cond: ConditioningParams):
    """The score input f(h, c) for one variant.

    Works on single vectors or row-stacked matrices (rows are independent
    items: timesteps of one sequence, or one timestep across a batch).
    Output width is attn_dim for none/conc and hidden_dim for gate/affine.
    """
    kind = conditioning_kind(variant)
    if kind == "none":
        if attn.W_a is None or attn.b_a is None:
            raise ConfigError(f"variant {variant!r} needs W_a/b_a")
        return ad.tanh(linear(h, attn.W_a, attn.b_a))
    if kind == "conc":
        if cond is None or cond.W_c is None:
            raise ConfigError(f"variant {variant!r} needs W_c/b_c")
        return ad.tanh(linear(ad.concat(h, c), cond.W_c, cond.b_c))
    if kind == "gate":
        if cond is None or cond.W_g is None:
            raise ConfigError(f"variant {variant!r} needs W_g/b_g")
        return ad.sigmoid(linear(c, cond.W_g, cond.b_g)) * h
    if cond is None or cond.W_gamma is None or cond.W_beta is None:
        raise ConfigError(f"variant {variant!r} needs W_gamma/W_beta")
    gamma = linear(c, cond.W_gamma, cond.b_gamma)
    beta = linear(c, cond.W_beta, cond.b_beta)
    return gamma * h + beta


def attend(H, C, valid_len: int, variant: str, attn: AttentionParams,
           cond: ConditioningParams | None = None):
    """Score, normalize, and pool one sequence of annotations.

    H is (T, hidden); C is (T, lex_dim) or None for unconditioned variants.
    Returns (r, a): the pooled representation r = sum_i a_i h_i over the
    raw annotations, and the weights a (zero beyond valid_len).
    """
    f = condition(H, C, variant, attn, cond)
    scores = ad.matmul(f, attn.v_a)
    weights = ad.masked_softmax(scores, valid_len)
    r = ad.matmul(weights, H)
    return r, weights


@dataclass
class ForwardResult:
    logits: ad.Tensor       # (B, num_classes)
    attn: ad.Tensor         # (B, T), rows sum to 1 over valid positions
    tape: ad.Tape
    leaves: dict            # parameter name -> leaf tensor


def forward(batch, params: ModelParams, config: ModelConfig,
            mode: str = "eval", rng=None, tape: ad.Tape | None = None
            ) -> ForwardResult:
    """Run the network over one padded batch.

    Train mode adds Gaussian noise (noise_std) to the embeddings and applies
    inverted dropout (dropout_p) to each annotation before attention; eval
    mode is deterministic. Causality plus the exactly-zero masked softmax
    make every output independent of padded positions.
    """
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    train = mode == "train"
    if train and (config.noise_std > 0 or config.dropout_p > 0) and rng is None:
        raise ConfigError("train mode needs an rng for noise/dropout")
    kind = conditioning_kind(config.variant)
    needs_lex = kind != "none" or config.variant in _EMB_CONC_VARIANTS
    if needs_lex and batch.lex_feats.shape[2] != config.lex_dim:
        raise ConfigError(
            f"batch lexicon width {batch.lex_feats.shape[2]} != config "
            f"lex_dim {config.lex_dim}")
    if np.any(batch.labels < 0) or np.any(batch.labels >= config.num_classes):
        raise ConfigError(f"labels outside [0, {config.num_classes})")

    tape = tape if tape is not None else ad.Tape()
    taped, leaves = params.on_tape(tape)
    B, T = batch.tokens.shape
    dh = config.hidden_dim
    state = (np.zeros((B, dh)), np.zeros((B, dh)))
    annotations = []
    for t in range(T):
        x = ad.gather_rows(taped.embedding, batch.tokens[:, t])
        if train and config.noise_std > 0:
            x = x + rng.normal(0.0, config.noise_std, (B, config.embed_dim))
        if config.variant in _EMB_CONC_VARIANTS:
            x = ad.concat(x, batch.lex_feats[:, t, :])
        state = lstm_step(x, state, taped.lstm)
        h_t = state[0]
        if train and config.dropout_p > 0:
            keep = rng.random((B, dh)) >= config.dropout_p
            h_t = h_t * (keep / (1.0 - config.dropout_p))
        annotations.append(h_t)

    scores = []
    for t in range(T):
        c_t = batch.lex_feats[:, t, :] if kind != "none" else None
        f_t = condition(annotations[t], c_t, config.variant, taped.attn,
                        taped.cond)
        scores.append(ad.matmul(f_t, taped.attn.v_a))
    attn_weights = ad.masked_softmax(ad.stack_columns(scores), batch.lengths)
    pooled = ad.weighted_sum(attn_weights, annotations)
    logits = linear(pooled, taped.cls.W_out, taped.cls.b_out)
    return ForwardResult(logits, attn_weights, tape, leaves)


def predict(batch, params: ModelParams, config: ModelConfig):
    """Deterministic class predictions and attention weights for one batch."""
    res = forward(batch, params, config, mode="eval")
    return res.logits.data.argmax(axis=1), res.attn.data, res.logits.data


# --- checkpoint container -------------------------------------------------
#
# Byte layout (documented for external readers):
#   bytes 0..7    magic b"LXATTN01"
#   bytes 8..11   uint32 little-endian: length H of the JSON header
#   bytes 12..12+H-1
#                 UTF-8 JSON, sorted keys: {"config": {ModelConfig fields},
#                 "labels": [class names in index order],
#                 "vocab_sha256": hex digest of the vocabulary file,
#                 "tensors": [{"name": str, "shape": [int, ...]}, ...]}
#   remaining     for each tensors[] entry in order, the row-major (C order)
#                 little-endian float64 values, densely packed
#
# Writes are atomic (temp file + rename) and fully deterministic, so saving
# identical params/config twice yields identical bytes.

CHECKPOINT_MAGIC = b"LXATTN01"


@dataclass
class Checkpoint:
    params: ModelParams
    config: ModelConfig
    labels: list[str]
    vocab_sha256: str


def save_checkpoint(path, params: ModelParams, config: ModelConfig,
                    labels, vocab_sha256: str) -> None:
    named = params.named()
    header = {
        "config": dataclasses.asdict(config),
        "labels": list(labels),
        "vocab_sha256": vocab_sha256,
        "tensors": [{"name": name, "shape": list(arr.shape)}
                    for name, arr in named],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, arr in named:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise ConfigError(f"{path}: not a checkpoint (bad magic {magic!r})")
        (header_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        named = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 8)
            if len(buf) != count * 8:
                raise ConfigError(f"{path}: truncated tensor {entry['name']!r}")
            named[entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    config = ModelConfig(**header["config"])
    return Checkpoint(params_from_named(named), config, list(header["labels"]),
                      header["vocab_sha256"])
