"""Multimodal transformer: 3D patch image branch, per-feature tabular
tokenizer, fusion encoder over the concatenated sequences, and a 2-logit MLP
head. Pre-norm residual blocks; attention probabilities are retained per
block for relevance propagation.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from math import sqrt
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import data

CHECKPOINT_MAGIC = b"MMTC"
CHECKPOINT_VERSION = 1

_default_features = tuple(
    (f.kind, f.cardinality) for f in data.FEATURE_SCHEMA
)


@dataclass
class ModelConfig:
    input_h: int = 32
    input_w: int = 32
    input_t: int = 16
    channels: int = 1
    patch: int = 8
    embed_dim: int = 64
    n_heads: int = 4
    mlp_hidden: int = 128
    n_blocks: int = 2
    feature_spec: tuple = _default_features   # (kind, cardinality) per feature
    p_drop: float = 0.1
    head_hidden: int = 32
    head_p_drop: float = 0.2

    def validate(self) -> None:
        for name, dim in (("input_h", self.input_h), ("input_w", self.input_w),
                          ("input_t", self.input_t)):
            if dim % self.patch != 0:
                raise ValueError(f"{name}={dim} not divisible by patch={self.patch}")
        if self.embed_dim % self.n_heads != 0:
            raise ValueError(f"embed_dim={self.embed_dim} not divisible by "
                             f"n_heads={self.n_heads}")
        if self.channels != 1:
            raise ValueError("only single-channel volumes are supported")
        if self.n_patches < 1:
            raise ValueError("no patches")
        for kind, card in self.feature_spec:
            if kind not in ("numeric", "categorical"):
                raise ValueError(f"unknown feature kind {kind!r}")
            if kind == "categorical" and card < 2:
                raise ValueError("categorical features need cardinality >= 2")

    @property
    def n_patches(self) -> int:
        return (self.input_h * self.input_w * self.input_t) // self.patch ** 3

    @property
    def n_tabular(self) -> int:
        return len(self.feature_spec)

    @property
    def patch_width(self) -> int:
        return self.patch ** 3 * self.channels

    @property
    def fusion_len(self) -> int:
        return self.n_patches + self.n_tabular + 2

    def to_json_dict(self) -> dict:
        return {
            "input_h": self.input_h, "input_w": self.input_w, "input_t": self.input_t,
            "channels": self.channels, "patch": self.patch,
            "embed_dim": self.embed_dim, "n_heads": self.n_heads,
            "mlp_hidden": self.mlp_hidden, "n_blocks": self.n_blocks,
            "feature_spec": [[k, c] for k, c in self.feature_spec],
            "p_drop": self.p_drop, "head_hidden": self.head_hidden,
            "head_p_drop": self.head_p_drop,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["feature_spec"] = tuple((k, int(c)) for k, c in d["feature_spec"])
        return cls(**d)


@dataclass
class TokenSequence:
    tokens: ad.Tensor
    branch: str     # "image" | "table" | "fusion"

    def __post_init__(self) -> None:
        if self.tokens.data.ndim != 2:
            raise ValueError("token sequence must be 2D (tokens x dim)")

    def __len__(self) -> int:
        return self.tokens.data.shape[0]


@dataclass
class ForwardArtifacts:
    logits: ad.Tensor                 # (1, 2)
    probs: ad.Tensor                  # (1, 2) softmax of logits
    prob_positive: float
    image_attention: list             # per block: Tensor (heads, n, n)
    table_attention: list
    fusion_attention: list
    image_tokens: TokenSequence       # Z_L
    table_tokens: Optional[TokenSequence]
    fusion_tokens: TokenSequence      # V_L


def patchify(voxels: np.ndarray, patch: int) -> np.ndarray:
    """(T, H, W) voxels -> (N_p, P^3) rows.

    Patch enumeration is lexicographic over (z, y, x) blocks; each row is the
    row-major flattening of its P^3 block in the same axis order.
    """
    t, h, w = voxels.shape
    if t % patch or h % patch or w % patch:
        raise ValueError(f"dims {(h, w, t)} not divisible by patch {patch}")
    nz, ny, nx = t // patch, h // patch, w // patch
    blocks = voxels.reshape(nz, patch, ny, patch, nx, patch)
    blocks = blocks.transpose(0, 2, 4, 1, 3, 5)
    return blocks.reshape(nz * ny * nx, patch ** 3)


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    sd = sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(0.0, sd, size=(fan_in, fan_out))


class Model:
    """Parameters live in an ordered name -> Tensor mapping. Prefixes
    ("image.", "table.", "fusion.", "head.") define the update groups."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        config.validate()
        self.config = config
        self.params: dict[str, ad.Tensor] = {}
        rng = np.random.default_rng([seed, 0xA77])
        d = config.embed_dim

        self._add("image.patch_proj", _glorot(rng, config.patch_width, d))
        self._add("image.patch_bias", np.zeros(d))
        self._add("image.class_token", rng.normal(0.0, 0.02, size=(1, d)))
        self._add("image.pos_embed", rng.normal(0.0, 0.02, size=(config.n_patches + 1, d)))
        self._add_stack("image", rng)

        self._add("table.class_token", rng.normal(0.0, 0.02, size=(1, d)))
        for j, (kind, card) in enumerate(config.feature_spec):
            if kind == "numeric":
                self._add(f"table.feat{j}.weight", rng.normal(0.0, 1.0 / sqrt(d), size=(1, d)))
            else:
                self._add(f"table.feat{j}.embed", rng.normal(0.0, 1.0 / sqrt(d), size=(card, d)))
            self._add(f"table.feat{j}.bias", np.zeros((1, d)))
        self._add_stack("table", rng)

        self._add_stack("fusion", rng)

        self._add("head.w1", _glorot(rng, d, config.head_hidden))
        self._add("head.b1", np.zeros(config.head_hidden))
        self._add("head.w2", _glorot(rng, config.head_hidden, 2))
        self._add("head.b2", np.zeros(2))

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = ad.tensor(value, requires_grad=True)

    def _add_stack(self, stack: str, rng: np.random.Generator) -> None:
        cfg = self.config
        d, f = cfg.embed_dim, cfg.mlp_hidden
        for i in range(cfg.n_blocks):
            p = f"{stack}.block{i}"
            self._add(f"{p}.ln1_gain", np.ones(d))
            self._add(f"{p}.ln1_bias", np.zeros(d))
            for w in ("wq", "wk", "wv", "wo"):
                self._add(f"{p}.{w}", _glorot(rng, d, d))
            for b in ("bq", "bk", "bv", "bo"):
                self._add(f"{p}.{b}", np.zeros(d))
            self._add(f"{p}.ln2_gain", np.ones(d))
            self._add(f"{p}.ln2_bias", np.zeros(d))
            self._add(f"{p}.w1", _glorot(rng, d, f))
            self._add(f"{p}.b1", np.zeros(f))
            self._add(f"{p}.w2", _glorot(rng, f, d))
            self._add(f"{p}.b2", np.zeros(d))

    # ---- parameter plumbing ----

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def named_in_group(self, prefix: str) -> list[str]:
        return [n for n in self.params if n.startswith(prefix)]

    def state_hash(self, prefix: str = "") -> int:
        import zlib
        crc = 0
        for name in self.named_in_group(prefix):
            crc = zlib.crc32(self.params[name].data.tobytes(), crc)
        return crc

    # ---- branch forwards ----

    def embed_image(self, patches: np.ndarray) -> TokenSequence:
        cfg = self.config
        if patches.ndim != 2 or patches.shape[1] != cfg.patch_width:
            raise ValueError(f"patch rows must be width {cfg.patch_width}, "
                             f"got {patches.shape}")
        p = self.params
        projected = ad.add(ad.matmul(ad.tensor(patches), p["image.patch_proj"]),
                           p["image.patch_bias"])
        seq = ad.concat([p["image.class_token"], projected], axis=0)
        return TokenSequence(ad.add(seq, p["image.pos_embed"]), "image")

    def feature_tokenize(self, encoded: list) -> TokenSequence:
        cfg = self.config
        if len(encoded) != cfg.n_tabular:
            raise ValueError(f"expected {cfg.n_tabular} features, got {len(encoded)}")
        p = self.params
        rows = [p["table.class_token"]]
        for j, ((kind, card), value) in enumerate(zip(cfg.feature_spec, encoded)):
            bias = p[f"table.feat{j}.bias"]
            if kind == "numeric":
                if not np.isfinite(value):
                    raise ValueError(f"feature {j}: non-finite numeric value")
                tok = ad.smul(p[f"table.feat{j}.weight"], float(value))
            else:
                code = int(value)
                if not 0 <= code < card:
                    raise ValueError(f"feature {j}: category {code} out of range")
                tok = ad.gather_rows(p[f"table.feat{j}.embed"], [code])
            rows.append(ad.add(tok, bias))
        return TokenSequence(ad.concat(rows, axis=0), "table")

    # ---- encoder ----

    def _mhsa(self, prefix: str, x: ad.Tensor, rng, training: bool):
        cfg = self.config
        p = self.params
        n, d = x.data.shape
        heads, dh = cfg.n_heads, d // cfg.n_heads
        q = ad.add(ad.matmul(x, p[f"{prefix}.wq"]), p[f"{prefix}.bq"])
        k = ad.add(ad.matmul(x, p[f"{prefix}.wk"]), p[f"{prefix}.bk"])
        v = ad.add(ad.matmul(x, p[f"{prefix}.wv"]), p[f"{prefix}.bv"])
        q3 = ad.transpose(ad.reshape(q, (n, heads, dh)), (1, 0, 2))
        k3t = ad.transpose(ad.reshape(k, (n, heads, dh)), (1, 2, 0))
        v3 = ad.transpose(ad.reshape(v, (n, heads, dh)), (1, 0, 2))
        scores = ad.smul(ad.matmul(q3, k3t), 1.0 / sqrt(dh))
        probs = ad.softmax(scores)                        # (heads, n, n), retained
        kept = ad.dropout(probs, cfg.p_drop, rng, training)
        ctx = ad.matmul(kept, v3)
        merged = ad.reshape(ad.transpose(ctx, (1, 0, 2)), (n, d))
        out = ad.add(ad.matmul(merged, p[f"{prefix}.wo"]), p[f"{prefix}.bo"])
        return ad.dropout(out, cfg.p_drop, rng, training), probs

    def _block(self, prefix: str, x: ad.Tensor, rng, training: bool, retained: list) -> ad.Tensor:
        p = self.params
        normed = ad.layer_norm(x, p[f"{prefix}.ln1_gain"], p[f"{prefix}.ln1_bias"])
        att, probs = self._mhsa(prefix, normed, rng, training)
        retained.append(probs)
        mid = ad.add(att, x)
        normed2 = ad.layer_norm(mid, p[f"{prefix}.ln2_gain"], p[f"{prefix}.ln2_bias"])
        hidden = ad.dropout(ad.gelu(ad.add(ad.matmul(normed2, p[f"{prefix}.w1"]),
                                           p[f"{prefix}.b1"])),
                            self.config.p_drop, rng, training)
        out = ad.dropout(ad.add(ad.matmul(hidden, p[f"{prefix}.w2"]), p[f"{prefix}.b2"]),
                         self.config.p_drop, rng, training)
        return ad.add(out, mid)

    def _stack(self, stack: str, seq: TokenSequence, rng, training: bool):
        retained: list = []
        x = seq.tokens
        for i in range(self.config.n_blocks):
            x = self._block(f"{stack}.block{i}", x, rng, training, retained)
        return TokenSequence(x, seq.branch), retained

    # ---- full forwards ----

    def image_encode(self, crop: np.ndarray, rng=None, training: bool = False):
        """Image branch only; returns (Z_L sequence, attention list)."""
        self._check_mode(rng, training)
        patches = patchify(crop, self.config.patch)
        z0 = self.embed_image(patches)
        z0 = TokenSequence(ad.dropout(z0.tokens, self.config.p_drop, rng, training),
                           "image")
        return self._stack("image", z0, rng, training)

    def image_embedding(self, crop: np.ndarray, rng=None, training: bool = False) -> ad.Tensor:
        """Class-token row of Z_L: the metric-learning embedding."""
        z_l, _ = self.image_encode(crop, rng, training)
        return ad.narrow(z_l.tokens, 0, 0, 1)

    def forward(self, crop: np.ndarray, encoded_features: list,
                rng=None, training: bool = False) -> ForwardArtifacts:
        self._check_mode(rng, training)
        z_l, image_att = self.image_encode(crop, rng, training)
        w0 = self.feature_tokenize(encoded_features)
        w_l, table_att = self._stack("table", w0, rng, training)
        v0 = TokenSequence(ad.concat([z_l.tokens, w_l.tokens], axis=0), "fusion")
        v_l, fusion_att = self._stack("fusion", v0, rng, training)

        cls = ad.narrow(v_l.tokens, 0, 0, 1)
        p = self.params
        hidden = ad.gelu(ad.add(ad.matmul(cls, p["head.w1"]), p["head.b1"]))
        hidden = ad.dropout(hidden, self.config.head_p_drop, rng, training)
        logits = ad.add(ad.matmul(hidden, p["head.w2"]), p["head.b2"])
        probs = ad.softmax(logits)
        return ForwardArtifacts(
            logits=logits,
            probs=probs,
            prob_positive=float(probs.data[0, 1]),
            image_attention=image_att,
            table_attention=table_att,
            fusion_attention=fusion_att,
            image_tokens=z_l,
            table_tokens=w_l,
            fusion_tokens=v_l,
        )

    @staticmethod
    def _check_mode(rng, training: bool) -> None:
        if training and rng is None:
            raise ValueError("training-mode forward needs an rng for dropout")


# ---- checkpoint container ----

def save_checkpoint(model: Model, path, extra: Optional[dict] = None) -> None:
    meta = {"config": model.config.to_json_dict(), "extra": extra or {}}
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(model.params)))
        for name, tensor in model.params.items():
            encoded = name.encode("utf-8")
            arr = tensor.data
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f8", copy=False).tobytes())


def load_checkpoint(path) -> tuple[Model, dict]:
    with open(path, "rb") as fh:
        raw = fh.read()
    view = memoryview(raw)
    if len(raw) < 12 or view[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, blob_len = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    offset = 12
    meta = json.loads(bytes(view[offset:offset + blob_len]).decode("utf-8"))
    offset += blob_len
    (n_tensors,) = struct.unpack_from("<I", raw, offset)
    offset += 4

    config = ModelConfig.from_json_dict(meta["config"])
    model = Model(config, seed=0)
    seen = set()
    for _ in range(n_tensors):
        (name_len,) = struct.unpack_from("<H", raw, offset)
        offset += 2
        name = bytes(view[offset:offset + name_len]).decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<B", raw, offset)
        offset += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, offset)
        offset += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
        offset += 8 * count
        if name not in model.params:
            raise ValueError(f"{path}: unknown parameter {name!r}")
        if model.params[name].data.shape != tuple(shape):
            raise ValueError(f"{path}: shape mismatch for {name!r}")
        model.params[name].data = arr.reshape(shape).copy()
        seen.add(name)
    if offset != len(raw):
        raise ValueError(f"{path}: trailing bytes")
    if seen != set(model.params):
        raise ValueError(f"{path}: missing parameters {set(model.params) - seen}")
    return model, meta["extra"]
