import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from stylecond.checkpoint import load_checkpoint, read_state
from stylecond.config import ConfigError, GeneratorConfig, RunConfig, TrainConfig
from stylecond.model import ModelPair
from stylecond.training import (
    TrainingDiverged,
    grid_images,
    schedule_phase,
    snapshot_grid,
    train,
)


def tiny_config(**train_kw) -> RunConfig:
    model = GeneratorConfig(latent_dim=16, mapping_depth=2, channels={4: 16, 8: 8, 16: 8}, max_resolution=16)
    defaults = dict(images_per_phase=400, images_per_transition=400, batch_sizes={4: 8, 8: 8, 16: 8},
                    total_images=2000, log_every=1, checkpoint_every=100, grid_every=100, grid_samples=4, seed=0)
    defaults.update(train_kw)
    return RunConfig(model, TrainConfig(**defaults))


class TestSchedule:
    cfg = TrainConfig(images_per_phase=1000, images_per_transition=1000)

    def test_start(self):
        assert schedule_phase(0, self.cfg, 3) == (0, 1.0)

    def test_mid_transition(self):
        assert schedule_phase(1500, self.cfg, 3) == (1, 0.5)

    def test_stabilizing_second_phase(self):
        assert schedule_phase(2500, self.cfg, 3) == (1, 1.0)

    def test_terminal(self):
        assert schedule_phase(6000, self.cfg, 3) == (3, 1.0)
        assert schedule_phase(10**9, self.cfg, 3) == (3, 1.0)

    def test_single_phase_model(self):
        assert schedule_phase(1500, self.cfg, 0) == (0, 1.0)

    def test_negative(self):
        with pytest.raises(ValueError):
            schedule_phase(-1, self.cfg, 2)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 20_000), st.integers(1, 500))
    def test_monotone(self, seen, delta):
        p0, a0 = schedule_phase(seen, self.cfg, 3)
        p1, a1 = schedule_phase(seen + delta, self.cfg, 3)
        assert p1 >= p0
        if p1 == p0 and a0 < 1.0:
            assert a1 >= a0

    def test_alpha_continuous_and_reaches_endpoints(self):
        alphas = [schedule_phase(s, self.cfg, 3)[1] for s in range(1000, 2001)]
        assert alphas[0] == 0.0 and alphas[-1] == 1.0
        assert max(abs(b - a) for a, b in zip(alphas, alphas[1:])) <= 1e-3 + 1e-12


class TestTrain:
    def test_smoke_run(self, tmp_path, shapes_store):
        m, labels, _ = shapes_store
        res = train(tiny_config(), m, labels, tmp_path / "run")
        assert res.checkpoint.exists()
        assert res.grids and all(p.exists() for p in res.grids)
        assert res.state.images_seen >= 2000
        lines = res.metrics.read_text().splitlines()
        assert lines[0] == "step,images_seen,phase,alpha,d_loss,g_loss,gp"
        rows = [ln.split(",") for ln in lines[1:]]
        assert all(math.isfinite(float(v)) for r in rows for v in r[4:])
        assert max(int(r[2]) for r in rows) == 2

    def test_resume_matches_uninterrupted(self, tmp_path, shapes_store):
        m, labels, _ = shapes_store
        full = train(tiny_config(total_images=1200), m, labels, tmp_path / "full")
        train(tiny_config(total_images=1200, max_steps=60, checkpoint_every=30), m, labels, tmp_path / "part")
        ckpt = tmp_path / "part" / "checkpoints" / "step30"
        assert read_state(ckpt)["images_seen"] == 240
        resumed = train(tiny_config(total_images=1200), m, labels, tmp_path / "part", resume=ckpt)
        assert resumed.metrics.read_bytes() == full.metrics.read_bytes()
        a, _, _ = load_checkpoint(full.checkpoint)
        b, _, _ = load_checkpoint(resumed.checkpoint)
        for pa, pb in zip(a.generator.state_dict().values(), b.generator.state_dict().values()):
            assert torch.equal(pa, pb)

    def test_class_count_mismatch(self, tmp_path, shapes_store):
        m, labels, _ = shapes_store
        cfg = tiny_config()
        cfg.model.num_classes = 3
        with pytest.raises(ConfigError, match="K=2"):
            train(cfg, m, labels, tmp_path / "run")

    def test_store_lacks_resolution(self, tmp_path, shapes_store):
        m, labels, _ = shapes_store
        cfg = tiny_config(batch_sizes={4: 8, 8: 8, 16: 8, 32: 8})
        cfg.model.max_resolution = 32
        cfg.model.channels = {4: 8, 8: 8, 16: 8, 32: 8}
        with pytest.raises(ConfigError, match="resolutions"):
            train(cfg, m, labels, tmp_path / "run")

    def test_nan_aborts_with_diagnostic_checkpoint(self, tmp_path, shapes_store):
        m, labels, _ = shapes_store
        with pytest.raises(TrainingDiverged, match="diagnostic"):
            train(tiny_config(lr_d=float("inf")), m, labels, tmp_path / "run")
        assert list((tmp_path / "run" / "checkpoints").glob("diverged_step*"))

    def test_unconditional(self, tmp_path, shapes_store):
        m, _, _ = shapes_store
        res = train(tiny_config(total_images=160), m, None, tmp_path / "run")
        _, _, stored = load_checkpoint(res.checkpoint)
        assert stored.model.num_classes == 0


class TestGrid:
    @pytest.fixture
    def gen(self):
        cfg = GeneratorConfig(latent_dim=16, num_classes=2, mapping_depth=2, channels={4: 16, 8: 8, 16: 8},
                              max_resolution=16)
        return ModelPair.create(cfg, seed=0).generator

    def test_layout(self, tmp_path, gen):
        path = snapshot_grid(gen, [0, 1], 4, None, 0, tmp_path / "g.png")
        assert np.asarray(Image.open(path)).shape == (32, 64, 3)

    def test_padding(self, tmp_path, gen):
        path = snapshot_grid(gen, [0, 1], 4, None, 0, tmp_path / "g.png", padding=2)
        assert np.asarray(Image.open(path)).shape == (34, 70, 3)

    def test_same_seed_same_bytes(self, tmp_path, gen):
        a = snapshot_grid(gen, [0, 1], 4, 0.7, 3, tmp_path / "a.png")
        b = snapshot_grid(gen, [0, 1], 4, 0.7, 3, tmp_path / "b.png")
        assert a.read_bytes() == b.read_bytes()

    def test_psi_zero_collapses_rows(self, gen):
        images, rows = grid_images(gen, [0, 1], 4, 0.0, seed=2)
        images = images.reshape(rows, 4, *images.shape[1:])
        for r in range(rows):
            assert all(np.array_equal(images[r, 0], images[r, j]) for j in range(4))
        assert not np.array_equal(images[0, 0], images[1, 0])

    def test_rows_share_latents(self, gen):
        images, _ = grid_images(gen, [1, 1], 3, None, seed=5)
        assert np.array_equal(images[:3], images[3:])

    def test_class_out_of_range(self, gen):
        with pytest.raises(ValueError):
            grid_images(gen, [2], 2, None, 0)

    def test_unconditional_single_row(self, tmp_path):
        cfg = GeneratorConfig(latent_dim=8, num_classes=0, mapping_depth=1, channels={4: 8, 8: 8}, max_resolution=8)
        g = ModelPair.create(cfg, seed=0).generator
        path = snapshot_grid(g, [], 5, None, 0, tmp_path / "u.png")
        assert np.asarray(Image.open(path)).shape == (8, 40, 3)
