"""Alternating adversarial training, checkpoints and full-image synthesis."""
from __future__ import annotations

import dataclasses
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import config as kv
from .data import (IDENTITY, PatchSpec, PreprocessConfig, apply_transform, crop_aligned,
                   draw_transform, load_manifest, prepare_pair, sample_specs)
from .errors import ConfigError, DivergenceError
from .extractors import load_extractor
from .losses import (LossReport, LossTerms, LossWeights, cgan_loss, fm_loss,
                     perceptual_loss, total_objective)
from .models import GeneratorConfig, TwoLevelGAN, downsample, upsample

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 2
    epochs: int = 200
    seed: int = 0
    checkpoint_every: int = 1000
    loss_weights: LossWeights = field(default_factory=LossWeights)
    generator_config: GeneratorConfig = field(default_factory=GeneratorConfig)
    preprocess_config: PreprocessConfig = field(default_factory=PreprocessConfig)
    # 0 means run all epochs.
    max_steps: int = 0
    d_steps: int = 1
    separate_optimizers: bool = False
    dedup_vgg: bool = False
    literal_minimax: bool = False
    extractor: str = "random:0"
    deterministic: bool = True

    NESTED = ("loss_weights", "generator_config", "preprocess_config")

    def validate(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0 or self.max_steps < 0:
            raise ConfigError("batch_size must be >= 1; epochs, max_steps >= 0")
        if self.checkpoint_every < 1 or self.d_steps < 1:
            raise ConfigError("checkpoint_every and d_steps must be >= 1")
        g, p = self.generator_config, self.preprocess_config
        if g.coarse_factor != p.coarse_factor:
            raise ConfigError("generator and preprocess coarse_factor differ")
        self.loss_weights.validate()
        g.validate()
        p.validate(max(g.fine_downs, g.coarse_downs))
        step = g.coarse_factor * 2 ** g.coarse_downs
        if p.target_height % step or p.target_width % step:
            raise ConfigError(
                f"image {p.target_height}x{p.target_width} must be divisible by {step} "
                "for the coarse path"
            )
        # The deepest normalized discriminator layer needs at least 2x2 positions.
        smallest = min(p.target_height // (2 * g.coarse_factor), p.target_width // (2 * g.coarse_factor),
                       p.patch_height, p.patch_width)
        if smallest < 2 ** (g.disc_depth + 1):
            raise ConfigError(
                f"discriminator inputs as small as {smallest}px are too small for "
                f"disc_depth={g.disc_depth}; need >= {2 ** (g.disc_depth + 1)}"
            )

    def flat(self) -> dict:
        """Flat key -> value view, the inverse of :func:`train_config_from_kv`."""
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.name in self.NESTED:
                out.update(dataclasses.asdict(v))
            else:
                out[f.name] = v
        return out


def config_keys() -> list[str]:
    return list(TrainConfig().flat())


def train_config_from_kv(values: dict, base: TrainConfig | None = None) -> TrainConfig:
    """Build a config from flat string values. Unknown keys are errors."""
    base = base or TrainConfig()
    consumed: set = set()
    nested = {name: kv.update_dataclass(getattr(base, name), values, consumed)
              for name in TrainConfig.NESTED}
    top = {}
    for f in dataclasses.fields(base):
        if f.name in TrainConfig.NESTED:
            continue
        if f.name in values:
            top[f.name] = kv.coerce(f.name, values[f.name], getattr(base, f.name))
            consumed.add(f.name)
    unknown = sorted(set(values) - consumed)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    cfg = dataclasses.replace(base, **top, **nested)
    cfg.validate()
    return cfg


def load_train_config(path) -> TrainConfig:
    return train_config_from_kv(kv.read_kv(path))


# -------------------------------------------------------------------- batches

@dataclass
class Batch:
    source_full: torch.Tensor  # [B, 3, H, W] in [-1, 1]
    target_full: torch.Tensor  # [B, 1, H, W]
    specs: list
    items: list  # (pair index, PatchSpec, Transform) for logging / determinism checks


def to_model_range(arr) -> torch.Tensor:
    return torch.as_tensor(np.asarray(arr), dtype=torch.float32) * 2.0 - 1.0


def from_model_range(t: torch.Tensor) -> np.ndarray:
    return ((t.detach().double().clamp(-1, 1) + 1.0) / 2.0).numpy()


class PairStore:
    """Prepared (sharpened, resized) pairs held in model range."""

    def __init__(self, pairs, cfg: PreprocessConfig):
        prepared = [prepare_pair(p, cfg) for p in pairs]
        self.ids = [p.pair_id for p in prepared]
        self.sources = [to_model_range(p.source) for p in prepared]
        self.targets = [to_model_range(p.target) for p in prepared]
        self.shape = tuple(self.sources[0].shape[-2:]) if prepared else None

    def __len__(self):
        return len(self.sources)


def steps_per_epoch(n_pairs: int, cfg: TrainConfig) -> int:
    return math.ceil(n_pairs * cfg.preprocess_config.patches_per_image / cfg.batch_size)


def epoch_items(store: PairStore, cfg: TrainConfig, epoch: int) -> list:
    """Shuffled (pair, spec, transform) triples for one epoch.

    Pure function of ``(seed, epoch)`` and the pair count, so resuming and
    re-running reproduce the same sequence.
    """
    pc = cfg.preprocess_config
    h, w = store.shape
    items = []
    for i in range(len(store)):
        rng = np.random.default_rng([cfg.seed, epoch, i])
        for spec in sample_specs(h, w, pc, rng):
            t = draw_transform(rng, square=h == w) if pc.augment else IDENTITY
            items.append((i, spec, t))
    order = np.random.default_rng([cfg.seed, epoch]).permutation(len(items))
    return [items[k] for k in order]


def make_batch(store: PairStore, items) -> Batch:
    srcs, tgts = [], []
    for i, _, t in items:
        srcs.append(apply_transform(store.sources[i], t))
        tgts.append(apply_transform(store.targets[i], t))
    return Batch(torch.stack(srcs).contiguous(), torch.stack(tgts).contiguous(),
                 [s for _, s, _ in items], list(items))


def iter_batches(store: PairStore, cfg: TrainConfig, start_step: int = 0):
    """Yield ``(step, batch)`` from ``start_step`` onward, across epochs."""
    spe = steps_per_epoch(len(store), cfg)
    total = spe * cfg.epochs
    if cfg.max_steps:
        total = cfg.max_steps
    step = start_step
    while step < total and spe:
        epoch, offset = divmod(step, spe)
        items = epoch_items(store, cfg, epoch)
        for k in range(offset, spe):
            if step >= total:
                return
            chunk = items[k * cfg.batch_size:(k + 1) * cfg.batch_size]
            yield step, make_batch(store, chunk)
            step += 1


# ---------------------------------------------------------------------- state

class TrainState:
    def __init__(self, cfg: TrainConfig, model: TwoLevelGAN | None = None):
        cfg.validate()
        self.cfg = cfg
        if cfg.deterministic:
            torch.use_deterministic_algorithms(True)
        torch.manual_seed(cfg.seed)
        self.model = model or TwoLevelGAN(cfg.generator_config)
        self.extractor = load_extractor(cfg.extractor)
        betas = (cfg.beta1, cfg.beta2)
        if cfg.separate_optimizers:
            self.opt_g = [
                torch.optim.Adam(self.model.gen_coarse.parameters(), lr=cfg.learning_rate, betas=betas),
                torch.optim.Adam([p for p in self.model.generator_parameters()
                                  if all(p is not q for q in self.model.gen_coarse.parameters())],
                                 lr=cfg.learning_rate, betas=betas),
            ]
        else:
            self.opt_g = [torch.optim.Adam(self.model.generator_parameters(),
                                           lr=cfg.learning_rate, betas=betas)]
        self.opt_d = torch.optim.Adam(self.model.discriminator_parameters(),
                                      lr=cfg.learning_rate, betas=betas)
        self.step = 0

    def state_dict(self):
        return {
            "model": self.model.state_dict(),
            "opt_g": [o.state_dict() for o in self.opt_g],
            "opt_d": self.opt_d.state_dict(),
            "step": self.step,
        }

    def load_state_dict(self, state):
        self.model.load_state_dict(state["model"], strict=True)
        for o, s in zip(self.opt_g, state["opt_g"]):
            o.load_state_dict(s)
        self.opt_d.load_state_dict(state["opt_d"])
        self.step = int(state["step"])


def _crop_batch(t, specs):
    return torch.stack([crop_aligned(t[b], s) for b, s in enumerate(specs)])


def _check_specs(batch: Batch, shape, factor):
    h, w = shape
    for s in batch.specs:
        if any(v % factor for v in (s.top, s.left, s.height, s.width)):
            raise ConfigError(f"patch {s} is not aligned to coarse_factor {factor}")
        if s.top + s.height > h or s.left + s.width > w or s.top < 0 or s.left < 0:
            raise ConfigError(f"patch {s} lies outside the {h}x{w} image")


def forward_generators(model: TwoLevelGAN, batch: Batch):
    """Coarse pass on the down-sampled image, then the fine pass on aligned crops."""
    f = model.cfg.coarse_factor
    src, tgt = batch.source_full, batch.target_full
    _check_specs(batch, src.shape[-2:], f)
    x_c, coarse_out = model.coarse_pass(src)
    coarse_up = upsample(coarse_out, src.shape[-2:])
    coarse_patch = _crop_batch(coarse_up, batch.specs)
    src_patch = _crop_batch(src, batch.specs)
    tgt_patch = _crop_batch(tgt, batch.specs)
    fine_out = model.fine_pass(src_patch, coarse_patch)
    return dict(x_c=x_c, y_c=downsample(tgt, f), coarse_out=coarse_out,
                src_patch=src_patch, tgt_patch=tgt_patch, fine_out=fine_out)


def _unit(t):
    return (t + 1.0) / 2.0


def train_step(state: TrainState, batch: Batch, update_generators: bool = True) -> LossReport:
    """One discriminator update then one joint generator update."""
    cfg, model = state.cfg, state.model
    model.train()
    step = state.step + 1
    out = forward_generators(model, batch)
    x_c, y_c, c_out = out["x_c"], out["y_c"], out["coarse_out"]
    x_c2, y_c2 = downsample(x_c, 2), downsample(y_c, 2)
    s_p, t_p, f_out = out["src_patch"], out["tgt_patch"], out["fine_out"]

    for _ in range(cfg.d_steps):
        c_det, f_det = c_out.detach(), f_out.detach()
        d_c1 = cgan_loss(model.d_c1(x_c, y_c).logits, model.d_c1(x_c, c_det).logits)
        d_c2 = cgan_loss(model.d_c2(x_c2, y_c2).logits,
                         model.d_c2(x_c2, downsample(c_det, 2)).logits)
        d_f = cgan_loss(model.d_f(s_p, t_p).logits, model.d_f(s_p, f_det).logits)
        for name, v in (("cgan_d_c1", d_c1), ("cgan_d_c2", d_c2), ("cgan_d_f", d_f)):
            if not torch.isfinite(v):
                raise DivergenceError(name, step)
        state.opt_d.zero_grad(set_to_none=True)
        (d_c1 + d_c2 + d_f).backward()
        state.opt_d.step()

    with torch.no_grad():
        real_c1 = model.d_c1(x_c, y_c)
        real_c2 = model.d_c2(x_c2, y_c2)
        real_f = model.d_f(s_p, t_p)
    fake_c1 = model.d_c1(x_c, c_out)
    fake_c2 = model.d_c2(x_c2, downsample(c_out, 2))
    fake_f = model.d_f(s_p, f_out)
    lit = cfg.literal_minimax
    vgg_c = perceptual_loss(_unit(y_c), _unit(c_out), state.extractor)
    terms = LossTerms(
        cgan_d_c1=d_c1.detach(), cgan_d_c2=d_c2.detach(), cgan_d_f=d_f.detach(),
        cgan_g_c=(cgan_loss(None, fake_c1.logits, "generator", lit)
                  + cgan_loss(None, fake_c2.logits, "generator", lit)),
        cgan_g_f=cgan_loss(None, fake_f.logits, "generator", lit),
        fm_c=[fm_loss(real_c1, fake_c1), fm_loss(real_c2, fake_c2)],
        vgg_c=[vgg_c] if cfg.dedup_vgg else [vgg_c, vgg_c],
        fm_f=fm_loss(real_f, fake_f),
        vgg_f=perceptual_loss(_unit(t_p), _unit(f_out), state.extractor),
    )
    g_total, d_total = total_objective(terms, cfg.loss_weights, step)
    if update_generators:
        for o in state.opt_g:
            o.zero_grad(set_to_none=True)
        g_total.backward()
        for o in state.opt_g:
            o.step()
    state.step = step
    return LossReport.from_terms(step, terms, g_total, d_total)


# ---------------------------------------------------------------- checkpoints

def _metadata(state: TrainState) -> dict:
    meta = {"format_version": CHECKPOINT_FORMAT, "step": state.step, "seed": state.cfg.seed,
            "variant": state.cfg.generator_config.variant}
    meta.update(state.cfg.flat())
    return meta


def save_checkpoint(state: TrainState, path) -> Path:
    """Write ``<path>`` (tensors) and ``<path>.meta`` (key=value); both atomic."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    torch.save(state.state_dict(), tmp)
    os.replace(tmp, path)
    kv.write_kv(meta_path(path), _metadata(state), header="checkpoint metadata")
    return path


def meta_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta")


def read_metadata(path) -> dict:
    return kv.read_kv(meta_path(path))


def config_from_checkpoint(path) -> TrainConfig:
    meta = read_metadata(path)
    fmt = int(meta.pop("format_version", -1))
    if fmt != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path}: unsupported checkpoint format {fmt}")
    for k in ("step", "variant"):
        meta.pop(k, None)
    return train_config_from_kv(meta)


def load_checkpoint(path, cfg: TrainConfig | None = None) -> TrainState:
    """Restore a training state; ``cfg`` (if given) must match the stored architecture."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    stored = config_from_checkpoint(path)
    if cfg is None:
        cfg = stored
    elif cfg.generator_config != stored.generator_config:
        diff = [k for k, v in dataclasses.asdict(cfg.generator_config).items()
                if dataclasses.asdict(stored.generator_config)[k] != v]
        raise ConfigError(f"{path}: architecture mismatch in {', '.join(diff)}")
    state = TrainState(cfg)
    try:
        state.load_state_dict(torch.load(path, map_location="cpu", weights_only=True))
    except RuntimeError as exc:
        raise ConfigError(f"{path}: parameters do not match the configuration: {exc}") from exc
    return state


# ----------------------------------------------------------------- synthesis

def tile_starts(size: int, tile: int, stride: int) -> list[int]:
    if tile >= size:
        return [0]
    starts = list(range(0, size - tile + 1, stride))
    if starts[-1] != size - tile:
        starts.append(size - tile)
    return starts


def ramp(n: int) -> np.ndarray:
    """Linear ramp rising from both edges; strictly positive."""
    i = np.arange(n, dtype=np.float64)
    return np.minimum(i + 1, n - i)


def tile_plan(height, width, tile_h, tile_w, overlap=0.5, align=1):
    """Tile specs and their blend weights.

    Returns ``(specs, weights)`` where ``weights[k]`` is the [th, tw] weight of
    tile ``k``, already divided by the per-pixel total so all tiles covering a
    pixel sum to one.
    """
    th, tw = min(tile_h, height), min(tile_w, width)
    sy = max(align, int(th * (1 - overlap)) // align * align)
    sx = max(align, int(tw * (1 - overlap)) // align * align)
    specs = [PatchSpec(t, l, th, tw) for t in tile_starts(height, th, sy)
             for l in tile_starts(width, tw, sx)]
    base = np.outer(ramp(th), ramp(tw))
    total = np.zeros((height, width))
    for s in specs:
        total[s.slices()] += base
    weights = [base / total[s.slices()] for s in specs]
    return specs, weights


def _pad_to(x, multiple):
    h, w = x.shape[-2:]
    ph, pw = (-h) % multiple, (-w) % multiple
    if not (ph or pw):
        return x
    mode = "reflect" if ph < h and pw < w else "replicate"
    return torch.nn.functional.pad(x, (0, pw, 0, ph), mode=mode)


@torch.no_grad()
def synthesize(slo: np.ndarray, model: TwoLevelGAN, tile: bool = False,
               tile_size=(608, 768), overlap: float = 0.5) -> np.ndarray:
    """Predict a [1, H, W] angiogram in [0, 1] from a [3, H, W] image in [0, 1]."""
    cfg = model.cfg
    model.eval()
    h, w = slo.shape[-2:]
    fine_step = 2 ** cfg.fine_downs
    multiple = math.lcm(cfg.coarse_factor * 2 ** cfg.coarse_downs, fine_step)
    x = _pad_to(to_model_range(slo)[None], multiple)
    hp, wp = x.shape[-2:]
    try:
        _, coarse = model.coarse_pass(x)
        coarse_up = upsample(coarse, (hp, wp))
        if not tile:
            out = model.fine_pass(x, coarse_up)[0]
        else:
            th = min(tile_size[0], hp) // fine_step * fine_step
            tw = min(tile_size[1], wp) // fine_step * fine_step
            specs, weights = tile_plan(hp, wp, th, tw, overlap, align=fine_step)
            out = torch.zeros((1, hp, wp), dtype=x.dtype)
            for s, wgt in zip(specs, weights):
                rows, cols = s.slices()
                pred = model.fine_pass(x[..., rows, cols], coarse_up[..., rows, cols])[0]
                out[..., rows, cols] += pred * torch.as_tensor(wgt, dtype=x.dtype)
    except (RuntimeError, MemoryError) as exc:
        if isinstance(exc, MemoryError) or "memory" in str(exc).lower():
            raise MemoryError(
                f"out of memory synthesizing a {h}x{w} image; rerun with tiling "
                "(tile=True / --tile)"
            ) from exc
        raise
    return from_model_range(out[..., :h, :w])


def heldout_l1(model: TwoLevelGAN, pairs) -> float:
    """Mean absolute error of full-image synthesis against the targets."""
    errs = [np.abs(synthesize(p.source, model) - p.target).mean() for p in pairs]
    return float(np.mean(errs))


# ------------------------------------------------------------------- driver

def train(cfg: TrainConfig, manifest, out_dir, resume=None, pairs=None,
          log_every: int = 10) -> Path:
    """Run training, writing checkpoints, ``losses.jsonl`` and ``config.txt``.

    Returns the path of the final checkpoint.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if pairs is None:
        pairs = load_manifest(manifest)
    if not pairs:
        raise ConfigError(f"manifest {manifest} lists no pairs")
    state = load_checkpoint(resume, cfg) if resume else TrainState(cfg)
    kv.write_kv(out / "config.txt", cfg.flat(), header="resolved training config")
    store = PairStore(pairs, cfg.preprocess_config)
    loss_log = out / "losses.jsonl"
    final = out / "final.pt"
    with open(loss_log, "a", encoding="utf-8") as fh:
        for step, batch in iter_batches(store, cfg, state.step):
            report = train_step(state, batch)
            fh.write(report.to_json() + "\n")
            if report.step % log_every == 0:
                log.info("step %d  g=%.4f  d=%.4f", report.step, report.total_g, report.total_d)
            if state.step % cfg.checkpoint_every == 0:
                fh.flush()
                save_checkpoint(state, out / f"step_{state.step:07d}.pt")
    save_checkpoint(state, final)
    return final
