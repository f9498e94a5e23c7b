import dataclasses
import hashlib
import json

import numpy as np
import pytest
import torch

from angiosynth import ConfigError, DivergenceError
from angiosynth.config import write_kv
from angiosynth.data import PatchSpec, PreprocessConfig
from angiosynth.losses import LossWeights
from angiosynth.synthetic import SynthConfig, generate_dataset
from angiosynth.trainer import (
    Batch, PairStore, TrainConfig, TrainState, config_keys, iter_batches, load_checkpoint,
    load_train_config, read_metadata, save_checkpoint, steps_per_epoch, synthesize, tile_plan,
    train, train_config_from_kv, train_step,
)

from conftest import with_generator


def _params_hash(module):
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def _first_batch(cfg, pairs):
    return next(iter_batches(PairStore(pairs, cfg.preprocess_config), cfg))[1]


# -------------------------------------------------------------------- config

def test_defaults_match_recipe():
    cfg = TrainConfig()
    assert (cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.batch_size, cfg.epochs) == \
        (2e-4, 0.5, 0.999, 2, 200)
    assert cfg.loss_weights == LossWeights(10.0, 10.0, 10.0, 10.0)


@pytest.mark.parametrize("changes", [
    dict(learning_rate=0.0), dict(beta1=1.0), dict(beta2=-0.1), dict(batch_size=0),
])
def test_config_invariants(tiny_cfg, changes):
    with pytest.raises(ConfigError):
        dataclasses.replace(tiny_cfg, **changes).validate()


def test_coarse_factor_must_agree(tiny_cfg):
    with pytest.raises(ConfigError):
        with_generator(tiny_cfg, coarse_factor=4).validate()


def test_discriminator_too_deep_for_inputs(tiny_cfg):
    with pytest.raises(ConfigError, match="disc_depth"):
        with_generator(tiny_cfg, disc_depth=5).validate()


def test_config_file_round_trip(tmp_path, tiny_cfg):
    write_kv(tmp_path / "c.cfg", tiny_cfg.flat())
    assert load_train_config(tmp_path / "c.cfg") == tiny_cfg
    assert set(config_keys()) == set(tiny_cfg.flat())


def test_config_unknown_key(tiny_cfg):
    with pytest.raises(ConfigError, match="bogus"):
        train_config_from_kv({"bogus": "1"}, tiny_cfg)


def test_config_bad_value(tiny_cfg):
    with pytest.raises(ConfigError):
        train_config_from_kv({"batch_size": "two"}, tiny_cfg)


def test_shared_coarse_factor_key_sets_both(tiny_cfg):
    cfg = train_config_from_kv({"coarse_factor": "4"}, tiny_cfg)
    assert cfg.generator_config.coarse_factor == cfg.preprocess_config.coarse_factor == 4


# ------------------------------------------------------------------- batches

def test_step_count_full_scale_example():
    cfg = TrainConfig(epochs=1, batch_size=2, preprocess_config=PreprocessConfig(patches_per_image=50))
    assert steps_per_epoch(4, cfg) == 100


def test_iter_batches_counts_and_shapes(tiny_cfg, tiny_pairs):
    store = PairStore(tiny_pairs, tiny_cfg.preprocess_config)
    cfg = dataclasses.replace(tiny_cfg, epochs=3)
    steps = [(s, b) for s, b in iter_batches(store, cfg)]
    assert [s for s, _ in steps] == list(range(3 * 4))
    b = steps[0][1]
    assert b.source_full.shape == (2, 3, 128, 160) and b.target_full.shape == (2, 1, 128, 160)
    assert all(s.height == 64 and s.width == 80 for s in b.specs)


def test_iter_batches_resume_matches(tiny_cfg, tiny_pairs):
    store = PairStore(tiny_pairs, tiny_cfg.preprocess_config)
    cfg = dataclasses.replace(tiny_cfg, epochs=2)
    full = [b.items for _, b in iter_batches(store, cfg)]
    tail = [b.items for _, b in iter_batches(store, cfg, start_step=5)]
    assert tail == full[5:]


# --------------------------------------------------------------------- steps

def test_same_batch_same_report(tiny_cfg, tiny_pairs):
    batch = _first_batch(tiny_cfg, tiny_pairs)
    a = train_step(TrainState(tiny_cfg), batch)
    b = train_step(TrainState(tiny_cfg), batch)
    assert a == b
    assert all(np.isfinite(v) for v in dataclasses.asdict(a).values())


def test_discriminator_learns_on_fixed_batch(tiny_cfg, tiny_pairs):
    cfg = dataclasses.replace(tiny_cfg, loss_weights=LossWeights(0.0, 0.0, 0.0, 0.0))
    state = TrainState(cfg)
    batch = _first_batch(cfg, tiny_pairs)
    g_before = _params_hash(state.model.gen_fine) + _params_hash(state.model.gen_coarse)
    losses = [train_step(state, batch, update_generators=False).total_d for _ in range(20)]
    assert losses[-1] < losses[0]
    assert _params_hash(state.model.gen_fine) + _params_hash(state.model.gen_coarse) == g_before


def test_one_step_changes_all_five_networks(tiny_cfg, tiny_pairs):
    state = TrainState(tiny_cfg)
    nets = ("gen_coarse", "gen_fine", "d_c1", "d_c2", "d_f")
    before = {n: _params_hash(getattr(state.model, n)) for n in nets}
    train_step(state, _first_batch(tiny_cfg, tiny_pairs))
    assert all(_params_hash(getattr(state.model, n)) != before[n] for n in nets)


def test_update_ordering(tiny_cfg, tiny_pairs):
    """The generator half-step leaves discriminators untouched and vice versa."""
    batch = _first_batch(tiny_cfg, tiny_pairs)
    disc = lambda m: "".join(_params_hash(d) for d in (m.d_c1, m.d_c2, m.d_f))  # noqa: E731
    gens = lambda m: _params_hash(m.gen_coarse) + _params_hash(m.gen_fine)  # noqa: E731

    d_only = TrainState(tiny_cfg)
    g0 = gens(d_only.model)
    train_step(d_only, batch, update_generators=False)
    assert gens(d_only.model) == g0

    both = TrainState(tiny_cfg)
    train_step(both, batch)
    assert disc(both.model) == disc(d_only.model)
    assert gens(both.model) != g0


def test_separate_optimizers_and_dedup_run(tiny_cfg, tiny_pairs):
    cfg = dataclasses.replace(tiny_cfg, separate_optimizers=True, dedup_vgg=True, literal_minimax=True)
    rep = train_step(TrainState(cfg), _first_batch(cfg, tiny_pairs))
    assert np.isfinite(rep.total_g)


def test_nan_raises_divergence_error(tiny_cfg, tiny_pairs):
    state = TrainState(tiny_cfg)
    with torch.no_grad():
        next(state.model.gen_fine.parameters()).fill_(float("nan"))
    with pytest.raises(DivergenceError, match="step 1"):
        train_step(state, _first_batch(tiny_cfg, tiny_pairs))


def test_misaligned_batch_rejected(tiny_cfg, tiny_pairs):
    b = _first_batch(tiny_cfg, tiny_pairs)
    bad = Batch(b.source_full, b.target_full, [PatchSpec(1, 0, 64, 80)] * 2, b.items)
    with pytest.raises(ConfigError, match="aligned"):
        train_step(TrainState(tiny_cfg), bad)
    oob = Batch(b.source_full, b.target_full, [PatchSpec(96, 0, 64, 80)] * 2, b.items)
    with pytest.raises(ConfigError, match="outside"):
        train_step(TrainState(tiny_cfg), oob)


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip_then_step(tmp_path, tiny_cfg, tiny_pairs):
    store = PairStore(tiny_pairs, tiny_cfg.preprocess_config)
    batches = [b for _, b in iter_batches(store, dataclasses.replace(tiny_cfg, max_steps=3))]

    straight = TrainState(tiny_cfg)
    for b in batches:
        train_step(straight, b)

    first = TrainState(tiny_cfg)
    for b in batches[:2]:
        train_step(first, b)
    path = save_checkpoint(first, tmp_path / "ck.pt")
    resumed = load_checkpoint(path)
    assert resumed.step == 2
    train_step(resumed, batches[2])
    for (n, a), (_, b) in zip(straight.model.state_dict().items(), resumed.model.state_dict().items()):
        torch.testing.assert_close(a, b, rtol=1e-5, atol=1e-6, msg=n)


def test_checkpoint_metadata(tmp_path, tiny_cfg):
    state = TrainState(with_generator(tiny_cfg, use_attention=False))
    path = save_checkpoint(state, tmp_path / "ck.pt")
    meta = read_metadata(path)
    assert meta["variant"] == "M_NA" and meta["step"] == "0" and meta["seed"] == "3"
    assert meta["format_version"] == "1"


def test_checkpoint_architecture_mismatch(tmp_path, tiny_cfg):
    path = save_checkpoint(TrainState(tiny_cfg), tmp_path / "ck.pt")
    with pytest.raises(ConfigError, match="base_channels"):
        load_checkpoint(path, with_generator(tiny_cfg, base_channels=8))
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing.pt")


def test_train_driver_writes_outputs_and_resumes(tmp_path, tiny_cfg):
    manifest = generate_dataset(SynthConfig(seed=5, height=128, width=160), 4, tmp_path / "data")
    cfg = dataclasses.replace(tiny_cfg, checkpoint_every=2, max_steps=3)
    final = train(cfg, manifest, tmp_path / "run")
    assert final.is_file() and (tmp_path / "run" / "step_0000002.pt").is_file()
    assert (tmp_path / "run" / "config.txt").is_file()
    lines = (tmp_path / "run" / "losses.jsonl").read_text().splitlines()
    assert [json.loads(x)["step"] for x in lines] == [1, 2, 3]

    cfg5 = dataclasses.replace(cfg, max_steps=5)
    train(cfg5, manifest, tmp_path / "run", resume=tmp_path / "run" / "step_0000002.pt")
    lines = (tmp_path / "run" / "losses.jsonl").read_text().splitlines()
    assert [json.loads(x)["step"] for x in lines][3:] == [3, 4, 5]
    assert read_metadata(tmp_path / "run" / "final.pt")["step"] == "5"


# ------------------------------------------------------------------ synthesis

@pytest.mark.parametrize("shape,tile", [((2432, 3072), (608, 768)), ((100, 130), (32, 48))])
def test_tile_weights_sum_to_one(shape, tile):
    specs, weights = tile_plan(*shape, *tile, overlap=0.5, align=8)
    acc = np.zeros(shape)
    for s, w in zip(specs, weights):
        acc[s.slices()] += w
    np.testing.assert_allclose(acc, 1.0, rtol=0, atol=1e-12)


def _full_geometry_model(**kw):
    g = dict(base_channels=2, residual_blocks=1, attention_heads=1, attention_pool=32,
             disc_channels=4)
    g.update(kw)
    cfg = TrainConfig(generator_config=dataclasses.replace(TrainConfig().generator_config, **g))
    torch.manual_seed(0)
    from angiosynth.models import TwoLevelGAN
    return TwoLevelGAN(cfg.generator_config)


def test_single_tile_equivalence():
    model = _full_geometry_model()
    slo = np.random.default_rng(0).random((3, 608, 768))
    a = synthesize(slo, model, tile=False)
    b = synthesize(slo, model, tile=True, tile_size=(608, 768))
    assert a.shape == (1, 608, 768)
    assert np.abs(a - b).max() <= 1e-5


def test_tiled_full_resolution_shape():
    model = _full_geometry_model(use_attention=False)
    slo = np.random.default_rng(0).random((3, 2432, 3072)).astype(np.float32)
    out = synthesize(slo, model, tile=True)
    assert out.shape == (1, 2432, 3072)
    assert out.min() >= 0 and out.max() <= 1


def test_synthesize_pads_odd_sizes(tiny_cfg):
    from angiosynth.models import TwoLevelGAN
    model = TwoLevelGAN(tiny_cfg.generator_config)
    slo = np.random.default_rng(0).random((3, 100, 130))
    for tile in (False, True):
        out = synthesize(slo, model, tile=tile, tile_size=(64, 64))
        assert out.shape == (1, 100, 130)


def test_synthesize_memory_error_guidance(monkeypatch, tiny_cfg):
    from angiosynth.models import TwoLevelGAN
    model = TwoLevelGAN(tiny_cfg.generator_config)

    def boom(*a, **k):
        raise RuntimeError("DefaultCPUAllocator: can't allocate memory")

    monkeypatch.setattr(model, "fine_pass", boom)
    with pytest.raises(MemoryError, match="tiling"):
        synthesize(np.zeros((3, 128, 160)), model)

