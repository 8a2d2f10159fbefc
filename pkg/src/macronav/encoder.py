"""Patch context encoder, reconstruction decoder, and SSL pretraining.

The encoder consumes a context map cut into flattened P x P patches.  Three
self-supervised tasks share it:

* ``spm``: masked patches are replaced by a learnable token, full sequence
  encoded;
* ``fov``: ring patches are replaced by a token, patches outside the ring
  are dropped from the sequence entirely;
* ``mae``: only visible patches are encoded, masked positions are filled in
  with a decoder-side token before reconstruction.

A shared lightweight decoder reconstructs patch contents; the loss is the
per-element MSE over masked patches only.
"""

from __future__ import annotations

import dataclasses
import time
from typing import Callable

import numpy as np
import torch

from . import checkpoint as ckpt
from . import gridmap, maskgen, nets
from .errors import ConfigError, NumericError
from .maskgen import MaskSpec, PretrainBatch
from .nets import ParamStore


@dataclasses.dataclass(frozen=True)
class EncoderCfg:
    """Architecture of the context encoder and shared decoder."""

    d: int = 512
    layers: int = 6
    heads: int = 4
    patch: int = 8
    map_hw: int = 128
    dec_d: int = 256
    dec_layers: int = 2
    dec_heads: int = 4

    def __post_init__(self):
        if self.map_hw % self.patch != 0:
            raise ConfigError(f"map size {self.map_hw} not divisible by patch {self.patch}")
        if self.d % self.heads != 0:
            raise ConfigError(f"dim {self.d} not divisible by {self.heads} heads")
        if self.dec_d % self.dec_heads != 0:
            raise ConfigError(f"decoder dim {self.dec_d} not divisible by "
                              f"{self.dec_heads} heads")

    @property
    def grid_side(self) -> int:
        return self.map_hw // self.patch

    @property
    def n_patches(self) -> int:
        return self.grid_side ** 2

    @property
    def token_dim(self) -> int:
        return self.patch ** 2


# Desk-scale configuration used by the test suites; the full-scale setup
# (d=512, 6 layers) is available through config files.
DESK_CFG = EncoderCfg(d=128, layers=4, heads=4, patch=8, map_hw=128)


def tokenize(m: np.ndarray, patch: int) -> np.ndarray:
    """Cut maps into row-major P x P patches, each flattened row-major.

    Accepts ``[H, W]`` or ``[B, H, W]``; returns ``[N, P^2]`` or ``[B, N, P^2]``.
    """
    single = m.ndim == 2
    if single:
        m = m[None]
    b, h, w = m.shape
    if h % patch or w % patch:
        raise ConfigError(f"map {h}x{w} not divisible by patch {patch}")
    x = m.reshape(b, h // patch, patch, w // patch, patch)
    x = x.swapaxes(2, 3).reshape(b, (h // patch) * (w // patch), patch * patch)
    x = np.ascontiguousarray(x, dtype=np.float32)
    return x[0] if single else x


def detokenize(tokens: np.ndarray, patch: int, hw: int) -> np.ndarray:
    """Inverse of :func:`tokenize` for square maps of side ``hw``."""
    single = tokens.ndim == 2
    if single:
        tokens = tokens[None]
    b = tokens.shape[0]
    side = hw // patch
    x = tokens.reshape(b, side, side, patch, patch).swapaxes(2, 3)
    x = x.reshape(b, hw, hw)
    return x[0] if single else x


# ---------------------------------------------------------------------------
# parameter initialization

_EMB_INIT = 0.02


def init_ssl_model(store: ParamStore, cfg: EncoderCfg, gen: torch.Generator) -> None:
    """Add all encoder and decoder parameters under ``enc.*`` / ``dec.*``."""
    nets.init_linear(store, "enc.proj", cfg.token_dim, cfg.d, gen)
    store.add("enc.pos", nets._uniform((cfg.n_patches, cfg.d), _EMB_INIT, gen))
    for task in maskgen.TASKS:
        store.add(f"enc.mask.{task}", nets._uniform((cfg.d,), _EMB_INIT, gen))
    for i in range(cfg.layers):
        nets.init_transformer_layer(store, f"enc.blk{i}", cfg.d, gen)
    nets.init_linear(store, "dec.in", cfg.d, cfg.dec_d, gen)
    store.add("dec.pos", nets._uniform((cfg.n_patches, cfg.dec_d), _EMB_INIT, gen))
    store.add("dec.mask.mae", nets._uniform((cfg.d,), _EMB_INIT, gen))
    for i in range(cfg.dec_layers):
        nets.init_transformer_layer(store, f"dec.blk{i}", cfg.dec_d, gen)
    nets.init_linear(store, "dec.head", cfg.dec_d, cfg.token_dim, gen)


def init_encoder_only(store: ParamStore, cfg: EncoderCfg, gen: torch.Generator) -> None:
    """Encoder-side parameters only (what the navigation policy consumes)."""
    nets.init_linear(store, "enc.proj", cfg.token_dim, cfg.d, gen)
    store.add("enc.pos", nets._uniform((cfg.n_patches, cfg.d), _EMB_INIT, gen))
    for task in maskgen.TASKS:
        store.add(f"enc.mask.{task}", nets._uniform((cfg.d,), _EMB_INIT, gen))
    for i in range(cfg.layers):
        nets.init_transformer_layer(store, f"enc.blk{i}", cfg.d, gen)


# ---------------------------------------------------------------------------
# forward passes


@dataclasses.dataclass
class EncodeResult:
    """Encoded sequence plus the mapping back to original patch positions.

    ``z`` is ``[B, S, d]`` where S is the padded sequence length; ``kept[b, s]``
    is the original patch index of slot ``s`` (0 for padding slots, which are
    flagged in ``pad``).
    """

    z: torch.Tensor
    kept: torch.Tensor
    pad: torch.Tensor
    task: str | None


def _check_masks(masks: list[MaskSpec], n: int) -> str:
    task = masks[0].task
    for m in masks:
        if m.task != task:
            raise ValueError(f"mixed tasks in one batch: {m.task!r} vs {task!r}")
        idx = m.masked
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise ValueError(f"mask indices out of range for N={n}")
        if m.task == "fov" and m.core.size and m.core.max() >= n:
            raise ValueError(f"core indices out of range for N={n}")
    return task


def _run_layers(x: torch.Tensor, heads: int, layers: int, store: ParamStore,
                prefix: str, pad: torch.Tensor | None,
                capture_layer: int | None = None):
    captured = None
    for i in range(layers):
        want = capture_layer == i
        out = nets.transformer_layer(x, heads, store, f"{prefix}.blk{i}", pad,
                                     return_attention=want)
        if want:
            x, captured = out
        else:
            x = out
    return x, captured


def encode(tokens, masks: list[MaskSpec] | None, cfg: EncoderCfg,
           store: ParamStore) -> EncodeResult:
    """Embed patches, apply the task's masking scheme, run the encoder stack."""
    dtype = store["enc.proj.w"].dtype
    x = torch.as_tensor(tokens, dtype=dtype)
    if x.ndim == 2:
        x = x[None]
    b, n, _ = x.shape
    if n != cfg.n_patches:
        raise ValueError(f"got {n} patches, config expects {cfg.n_patches}")
    base = nets.linear(x, store, "enc.proj") + store["enc.pos"]

    if masks is None:
        z, _ = _run_layers(base, cfg.heads, cfg.layers, store, "enc", None)
        kept = torch.arange(n).expand(b, n)
        return EncodeResult(z, kept, torch.zeros(b, n, dtype=torch.bool), None)

    if len(masks) != b:
        raise ValueError(f"{len(masks)} masks for batch of {b}")
    task = _check_masks(masks, n)

    if task == "spm":
        seq = base.clone()
        token = store["enc.mask.spm"]
        for i, m in enumerate(masks):
            if m.masked.size:
                idx = torch.as_tensor(m.masked)
                seq[i, idx] = token + store["enc.pos"][idx]
        z, _ = _run_layers(seq, cfg.heads, cfg.layers, store, "enc", None)
        kept = torch.arange(n).expand(b, n)
        return EncodeResult(z, kept, torch.zeros(b, n, dtype=torch.bool), task)

    if task == "fov":
        kept_lists = []
        for m in masks:
            kept_lists.append(np.sort(np.concatenate([m.core, m.masked])))
        s_max = max(len(k) for k in kept_lists)
        seq = torch.zeros(b, s_max, cfg.d, dtype=dtype)
        kept = torch.zeros(b, s_max, dtype=torch.long)
        pad = torch.ones(b, s_max, dtype=torch.bool)
        token = store["enc.mask.fov"]
        for i, (m, k) in enumerate(zip(masks, kept_lists)):
            idx = torch.as_tensor(k)
            rows = base[i, idx]
            ring = torch.as_tensor(np.isin(k, m.masked))
            rows = torch.where(ring[:, None],
                               token + store["enc.pos"][idx], rows)
            seq[i, :len(k)] = rows
            kept[i, :len(k)] = idx
            pad[i, :len(k)] = False
        z, _ = _run_layers(seq, cfg.heads, cfg.layers, store, "enc", pad)
        return EncodeResult(z, kept, pad, task)

    # mae: encoder sees only the visible patches
    kept_lists = []
    for m in masks:
        vis = np.setdiff1d(np.arange(n), m.masked)
        kept_lists.append(vis)
    s_max = max(len(k) for k in kept_lists)
    seq = torch.zeros(b, s_max, cfg.d, dtype=dtype)
    kept = torch.zeros(b, s_max, dtype=torch.long)
    pad = torch.ones(b, s_max, dtype=torch.bool)
    for i, k in enumerate(kept_lists):
        idx = torch.as_tensor(k)
        seq[i, :len(k)] = base[i, idx]
        kept[i, :len(k)] = idx
        pad[i, :len(k)] = False
    z, _ = _run_layers(seq, cfg.heads, cfg.layers, store, "enc", pad)
    return EncodeResult(z, kept, pad, task)


def decode_reconstruct(enc: EncodeResult, masks: list[MaskSpec],
                       cfg: EncoderCfg, store: ParamStore) -> torch.Tensor:
    """Reconstruct every patch; positions never seen by the decoder read 0."""
    dtype = enc.z.dtype
    b, _, _ = enc.z.shape
    n = cfg.n_patches
    if enc.task == "mae":
        # Interleave visible embeddings with the decoder mask token at the
        # original patch positions.
        full = store["dec.mask.mae"].to(dtype).expand(b, n, cfg.d).clone()
        for i in range(b):
            real = ~enc.pad[i]
            full[i, enc.kept[i, real]] = enc.z[i, real]
        x = nets.linear(full, store, "dec.in") + store["dec.pos"]
        h, _ = _run_layers(x, cfg.dec_heads, cfg.dec_layers, store, "dec", None)
        return nets.linear(h, store, "dec.head")

    # spm/fov: decode the encoded sequence in place, with decoder position
    # embeddings looked up by original patch index.
    x = nets.linear(enc.z, store, "dec.in") + store["dec.pos"][enc.kept]
    pad = enc.pad if bool(enc.pad.any()) else None
    h, _ = _run_layers(x, cfg.dec_heads, cfg.dec_layers, store, "dec", pad)
    pred = nets.linear(h, store, "dec.head")
    out = torch.zeros(b, n, cfg.token_dim, dtype=dtype)
    for i in range(b):
        real = ~enc.pad[i]
        out[i, enc.kept[i, real]] = pred[i, real]
    return out


def ssl_loss(recon: torch.Tensor, target, masks: list[MaskSpec]) -> torch.Tensor:
    """Mean squared error per element, over masked patches only."""
    dtype = recon.dtype
    tgt = torch.as_tensor(target, dtype=dtype)
    if tgt.ndim == 2:
        tgt = tgt[None]
    if recon.shape != tgt.shape:
        raise ValueError(f"recon {tuple(recon.shape)} vs target {tuple(tgt.shape)}")
    diffs = []
    for i, m in enumerate(masks):
        if m.masked.size == 0:
            raise ValueError(f"item {i}: empty mask has no reconstruction target")
        idx = torch.as_tensor(m.masked)
        diffs.append((recon[i, idx] - tgt[i, idx]).reshape(-1))
    err = torch.cat(diffs)
    return (err ** 2).mean()


@dataclasses.dataclass
class SslOutput:
    task: str
    recon: torch.Tensor
    loss: torch.Tensor


def ssl_forward(batch: PretrainBatch, cfg: EncoderCfg,
                store: ParamStore) -> SslOutput:
    tokens = tokenize(batch.maps, cfg.patch)
    enc = encode(tokens, batch.masks, cfg, store)
    recon = decode_reconstruct(enc, batch.masks, cfg, store)
    loss = ssl_loss(recon, tokens, batch.masks)
    return SslOutput(batch.task, recon, loss)


def pretrain_step(batch: PretrainBatch, cfg: EncoderCfg, store: ParamStore,
                  opt: nets.AdamW) -> dict:
    """One optimization step on the batch's task; other tasks' parameters
    receive no gradient and are left untouched by the optimizer."""
    out = ssl_forward(batch, cfg, store)
    nets.assert_finite(out.loss, f"{batch.task} loss")
    store.zero_grad()
    out.loss.backward()
    opt.step()
    return {"task": out.task, "loss": float(out.loss.detach())}


# ---------------------------------------------------------------------------
# attention export


def export_attention(ctx_map: np.ndarray, cfg: EncoderCfg, store: ParamStore,
                     layer: int, head: int) -> np.ndarray:
    """Mean attention received per patch, on the patch grid, scaled to [0,1].

    When the raw variation is tiny (untrained or uniform models), the values
    are only shifted to zero-min rather than stretched, so flat inputs stay
    visibly flat.
    """
    if not 0 <= layer < cfg.layers:
        raise ValueError(f"layer {layer} out of range [0, {cfg.layers})")
    if not 0 <= head < cfg.heads:
        raise ValueError(f"head {head} out of range [0, {cfg.heads})")
    tokens = tokenize(ctx_map, cfg.patch)
    dtype = store["enc.proj.w"].dtype
    x = torch.as_tensor(tokens, dtype=dtype)[None]
    base = nets.linear(x, store, "enc.proj") + store["enc.pos"]
    with torch.no_grad():
        _, att = _run_layers(base, cfg.heads, cfg.layers, store, "enc", None,
                             capture_layer=layer)
    received = att[0, head].mean(dim=0)  # mean over queries
    heat = received.numpy().astype(np.float64)
    heat = heat.reshape(cfg.grid_side, cfg.grid_side)
    heat = heat - heat.min()
    spread = heat.max()
    if spread > 1e-3:
        heat = heat / spread
    return heat.astype(np.float32)


def save_attention_pgm(path, heat: np.ndarray) -> None:
    img = np.clip(np.round(heat * 255.0), 0, 255).astype(np.uint8)
    gridmap.save_pgm(path, img)


# ---------------------------------------------------------------------------
# pretraining loop


@dataclasses.dataclass
class PretrainRunCfg:
    """Everything a pretraining run needs; maps 1:1 onto config-file keys."""

    cfg: EncoderCfg
    steps: int
    batch: int = 8
    lr: float = 1e-4
    weight_decay: float = 0.0
    seed: int = 0
    tasks: tuple[str, ...] = maskgen.TASKS
    sources: tuple[maskgen.MapSource, ...] = ()
    maps_per_source: int = 64
    partial_frac: float = 0.5


def default_sources(map_hw: int) -> tuple[maskgen.MapSource, ...]:
    size = max(map_hw, 48)
    return (
        maskgen.MapSource("rooms", weight=2.0, style="rooms", size=size, density=0.12),
        maskgen.MapSource("maze", weight=1.0, style="maze", size=size, density=0.2),
        maskgen.MapSource("cluttered", weight=1.0, style="cluttered", size=size,
                          density=0.15),
    )


def run_pretraining(run: PretrainRunCfg, store: ParamStore | None = None,
                    on_step: Callable[[int, dict], None] | None = None
                    ) -> tuple[ParamStore, list[dict]]:
    """Task-sampled SSL pretraining; returns the trained store and history."""
    cfg = run.cfg
    if store is None:
        gen = torch.Generator()
        gen.manual_seed(run.seed)
        store = ParamStore()
        init_ssl_model(store, cfg, gen)
    sources = run.sources or default_sources(cfg.map_hw)
    pool = maskgen.MapPool(list(sources), per_source=run.maps_per_source,
                           seed=run.seed)
    rng = np.random.default_rng(run.seed)
    opt = nets.AdamW(store, lr=run.lr, weight_decay=run.weight_decay)
    history = []
    for step in range(run.steps):
        batch = maskgen.build_pretrain_batch(
            pool, run.batch, cfg.map_hw, cfg.patch, rng, tasks=run.tasks,
            partial_frac=run.partial_frac)
        t0 = time.perf_counter()
        metrics = pretrain_step(batch, cfg, store, opt)
        metrics["step"] = step
        metrics["ms"] = (time.perf_counter() - t0) * 1e3
        history.append(metrics)
        if on_step is not None:
            on_step(step, metrics)
    return store, history


def save_model(path, store: ParamStore) -> None:
    ckpt.save_checkpoint(path, store.to_arrays())


def load_model(path, store: ParamStore, subset: bool = False) -> list[str]:
    return store.load_arrays(ckpt.load_checkpoint(path), subset=subset)
