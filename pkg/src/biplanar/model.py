"""Biplanar X-ray to CT-slice network.

One shared encoder turns each X-ray into a local feature map (and optionally
a pooled global vector).  For a target slice, every sampling point is
projected into both views and the local features are bilinearly gathered
there.  The decoder sees, per point, both views' local features, the
replicated global vectors and a sinusoidal encoding of the point's 3D
position.  It applies self-attention at that lowest resolution and then
upsamples to the output slice.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .autodiff import Module, Tensor, as_tensor, concat, default_dtype, select, sigmoid
from .autodiff import functional as F
from .autodiff.checkpoint import load_checkpoint, save_checkpoint
from .autodiff.nn import Conv2d, ConvBlock, SelfAttention
from .errors import ParameterError, VersionError
from .geometry import make_biplanar_rig
from .resample import resampling_operator


def _log2_exact(ratio: float, what: str) -> int:
    n = int(round(math.log2(ratio))) if ratio > 0 else -1
    if n < 0 or 2 ** n != ratio:
        raise ParameterError(f"{what} must be a power of two, got {ratio}")
    return n


@dataclass
class ModelConfig:
    image_size: int = 64
    c_local: int = 64
    c_global: int = 32
    h_local: int = 8
    w_local: int = 8
    h_feat: int = 16
    w_feat: int = 16
    h_out: int = 64
    w_out: int = 64
    pe_freqs: int = 10
    use_global: bool = False
    use_pe: bool = True
    projection: str = "perspective"
    decoder_channels: tuple = (64, 32, 16)
    norm_groups: int = 8
    source_dist: float = 3.0
    focal: float = 2.0
    padding: str = "border"
    seed: int = 0

    def __post_init__(self):
        self.decoder_channels = tuple(int(c) for c in self.decoder_channels)
        if self.projection not in ("perspective", "orthogonal"):
            raise ParameterError(f"unknown projection {self.projection!r}")
        if self.pe_freqs < 1:
            raise ParameterError("pe_freqs must be >= 1")
        if self.h_local != self.w_local:
            raise ParameterError("local feature map must be square")
        n_down = _log2_exact(self.image_size / self.h_local, "image_size / h_local")
        if n_down < 1:
            raise ParameterError("encoder needs at least one downsampling block")
        n_up = _log2_exact(self.h_out / self.h_feat, "h_out / h_feat")
        if _log2_exact(self.w_out / self.w_feat, "w_out / w_feat") != n_up:
            raise ParameterError("h_out / h_feat and w_out / w_feat must match")
        if len(self.decoder_channels) != n_up + 1:
            raise ParameterError(
                f"decoder_channels needs {n_up + 1} entries for {n_up} upsampling blocks")

    @property
    def pe_channels(self) -> int:
        return 3 + 6 * self.pe_freqs

    @property
    def decoder_in_channels(self) -> int:
        return (2 * self.c_local + 2 * self.c_global * self.use_global
                + self.pe_channels * self.use_pe)

    @property
    def feat_res(self):
        return self.h_feat, self.w_feat

    @property
    def out_res(self):
        return self.h_out, self.w_out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decoder_channels"] = list(self.decoder_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ParameterError(f"unknown model config keys {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> str:
        return config_digest(self.to_dict())


def config_digest(d: dict) -> str:
    canonical = json.dumps(d, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def positional_encoding(x, n_freqs: int = 10) -> np.ndarray:
    """``[x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^(L-1) pi x), cos(2^(L-1) pi x)]``.

    Applied per coordinate: a trailing axis of 3 becomes ``3 + 6 L``.
    """
    x = np.asarray(x, dtype=np.float64)
    parts = [x]
    for l in range(n_freqs):
        arg = (2.0 ** l) * np.pi * x
        parts.append(np.sin(arg))
        parts.append(np.cos(arg))
    return np.concatenate(parts, axis=-1)


@dataclass
class SliceQuery:
    """Everything the decoder needs about one target grid, precomputed once."""
    grid: np.ndarray                      # (H_f, W_f, 3)
    operators: tuple                      # sparse PA / Lat resampling operators
    encoding: np.ndarray | None = field(default=None)  # (3 + 6L, H_f, W_f)


class Encoder(Module):
    def __init__(self, cfg: ModelConfig, rng):
        n_down = int(round(math.log2(cfg.image_size / cfg.h_local)))
        chans = [max(2, cfg.c_local // 2 ** (n_down - 1 - i)) for i in range(n_down)]
        chans[-1] = cfg.c_local
        c_in = 1
        self.blocks = []
        for c in chans:
            self.blocks.append(ConvBlock(c_in, c, 3, 2, cfg.norm_groups, rng=rng))
            c_in = c
        self.global_block = (ConvBlock(cfg.c_local, cfg.c_global, 3, 2, cfg.norm_groups, rng=rng)
                             if cfg.use_global else None)

    def forward(self, images):
        x = images
        for block in self.blocks:
            x = block(x)
        g = F.spatial_mean(self.global_block(x)) if self.global_block is not None else None
        return x, g


class Decoder(Module):
    def __init__(self, cfg: ModelConfig, rng):
        ch = cfg.decoder_channels
        # per-position channel mixing of the concatenated inputs
        self.stem = ConvBlock(cfg.decoder_in_channels, ch[0], 1, 1, cfg.norm_groups, rng=rng)
        self.attention = SelfAttention(ch[0], rng=rng)
        self.up_blocks = [ConvBlock(ch[i], ch[i + 1], 3, 1, cfg.norm_groups, rng=rng)
                          for i in range(len(ch) - 1)]
        self.head = Conv2d(ch[-1], 1, 1, rng=rng)

    def forward(self, x):
        x = self.attention(self.stem(x))
        for block in self.up_blocks:
            x = block(F.nearest_upsample(x, 2))
        return sigmoid(self.head(x))


class SliceReconstructor(Module):
    def __init__(self, cfg: ModelConfig | None = None):
        self.cfg = cfg or ModelConfig()
        rng = np.random.default_rng(self.cfg.seed)
        self.encoder = Encoder(self.cfg, rng)
        self.decoder = Decoder(self.cfg, rng)
        self.rig = make_biplanar_rig(self.cfg.source_dist, self.cfg.focal)

    # -- geometry ---------------------------------------------------------------
    def query(self, grid: np.ndarray) -> SliceQuery:
        cfg = self.cfg
        if grid.shape != (cfg.h_feat, cfg.w_feat, 3):
            raise ParameterError(f"grid shape {grid.shape} != {(cfg.h_feat, cfg.w_feat, 3)}")
        ops = tuple(
            resampling_operator(pose, grid, (cfg.h_local, cfg.w_local), cfg.projection, cfg.padding)
            for pose in self.rig)
        enc = None
        if cfg.use_pe:
            enc = positional_encoding(grid, cfg.pe_freqs).transpose(2, 0, 1)
        return SliceQuery(grid, ops, enc)

    # -- network ----------------------------------------------------------------
    def encode(self, images):
        """(N, 1, H, W) images -> local maps (N, C_l, H_l, W_l) and globals (N, C_g) or None."""
        images = as_tensor(images)
        n, c, h, w = images.shape
        if c != 1 or h != self.cfg.image_size or w != self.cfg.image_size:
            raise ParameterError(
                f"expected images (N, 1, {self.cfg.image_size}, {self.cfg.image_size}), got {images.shape}")
        return self.encoder(images)

    def decoder_input(self, img_pa, img_lat, queries):
        """Channel-wise concatenation of both views' local features, globals and encodings."""
        cfg = self.cfg
        img_pa, img_lat = as_tensor(img_pa), as_tensor(img_lat)
        n = img_pa.shape[0]
        if img_lat.shape != img_pa.shape or len(queries) != n:
            raise ParameterError("need matching PA/Lat batches and one query per item")
        # one encoder pass over both views: items [0, n) are PA, [n, 2n) lateral
        local, glob = self.encode(concat([img_pa, img_lat], axis=0))
        parts = [
            F.sample_features(_view(local, v, n), [q.operators[v] for q in queries], cfg.feat_res)
            for v in range(2)
        ]
        if cfg.use_global:
            parts += [F.replicate_global(_view(glob, v, n), cfg.h_feat, cfg.w_feat) for v in range(2)]
        if cfg.use_pe:
            enc = np.stack([q.encoding for q in queries]).astype(local.dtype)
            parts.append(Tensor(enc, dtype=local.dtype))
        x = F.concat_channels(parts)
        if x.shape[1] != cfg.decoder_in_channels:
            raise ParameterError(
                f"decoder input has {x.shape[1]} channels, config expects {cfg.decoder_in_channels}")
        return x

    def forward(self, img_pa, img_lat, queries):
        """Predicted slices (N, 1, H_out, W_out) in [0, 1]."""
        return self.decoder(self.decoder_input(img_pa, img_lat, queries))

    # -- persistence ------------------------------------------------------------
    def save(self, path) -> None:
        path = Path(path)
        save_checkpoint(path, self.state_dict())
        meta = {"config": self.cfg.to_dict(), "digest": self.cfg.digest()}
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2))


def _view(t: Tensor, view: int, n: int) -> Tensor:
    return select(t.reshape(2, n, *t.shape[1:]), view)


def load_model(path, dtype=np.float32) -> SliceReconstructor:
    """Rebuild a model from ``path`` (.pxct) and its sibling ``.json`` config."""
    path = Path(path)
    meta_path = path.with_suffix(".json")
    if not meta_path.exists():
        raise VersionError(f"{path}: missing config file {meta_path.name}")
    meta = json.loads(meta_path.read_text())
    cfg = ModelConfig.from_dict(meta["config"])
    if meta.get("digest") != cfg.digest():
        raise VersionError(f"{path}: config digest does not match its contents")
    with default_dtype(dtype):
        model = SliceReconstructor(cfg)
    state = load_checkpoint(path)
    try:
        model.load_state_dict(state)
    except (KeyError, ValueError) as exc:
        raise VersionError(f"{path}: checkpoint does not fit its config ({exc})") from None
    return model
