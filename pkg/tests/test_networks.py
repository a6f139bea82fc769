import pytest
import torch

from firereg import geometry as G
from firereg.networks import FireModel, ModelConfig
from test_losses import perturb_zero_init


@pytest.fixture(scope="module")
def model():
    return FireModel(ModelConfig(n=2, base_width=8, image_shape=(64, 64)), seed=0)


def images(batch=2, shape=(64, 64), seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(batch, 1, *shape, generator=g) * 2 - 1


class TestConfig:
    def test_c_g(self):
        assert ModelConfig(base_width=32).c_g == 128

    @pytest.mark.parametrize("kwargs", [
        {"image_shape": (62, 64)}, {"base_width": 2}, {"nr_scale": 0.0}, {"nr_scale": 1.5}, {"n": 4},
        {"n": 3, "image_shape": (16, 16)},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            ModelConfig(**kwargs)


def test_encoder_shape_default_width():
    m = FireModel(ModelConfig(base_width=32, image_shape=(64, 64)))
    with torch.no_grad():
        f = m.encode(images(1))
    assert f.shape == (1, 128, 16, 16)


class TestEncoder:
    def test_constant_input_is_finite(self, model):
        with torch.no_grad():
            f = model.encode(torch.full((1, 1, 64, 64), 0.3))
        assert torch.isfinite(f).all()

    def test_deterministic(self, model):
        x = images()
        with torch.no_grad():
            assert torch.equal(model.encode(x), model.encode(x))

    def test_shape_mismatch(self, model):
        with pytest.raises(ValueError):
            model.encode(images(shape=(32, 32)))

    def test_instance_norm_statistics(self, model):
        outputs = []
        hooks = [m.register_forward_hook(lambda mod, i, o: outputs.append(o.clone()))
                 for m in model.modules() if isinstance(m, torch.nn.InstanceNorm2d)]
        with torch.no_grad():
            model.encode(images())
        for h in hooks:
            h.remove()
        assert outputs
        for o in outputs:
            mean = o.mean(dim=(2, 3))
            var = o.var(dim=(2, 3), unbiased=False)
            live = var > 0.5  # channels with non-degenerate input statistics
            assert mean.abs().max() < 1e-4
            assert (var[live] - 1).abs().max() < 1e-3


class TestDecoder:
    def test_shape_and_range(self, model):
        g = torch.Generator().manual_seed(1)
        with torch.no_grad():
            for d in ("AB", "BA"):
                for _ in range(10):
                    f = 3 * torch.randn(10, model.cfg.c_g, 16, 16, generator=g)
                    x = model.decode(f, d)
                    assert x.shape == (10, 1, 64, 64)
                    assert x.min() >= -1 and x.max() <= 1

    def test_independent_parameters(self, model):
        a = dict(model.decoders["AB"].named_parameters())
        b = dict(model.decoders["BA"].named_parameters())
        assert all(a[k] is not b[k] for k in a)
        assert any(not torch.equal(a[k], b[k]) for k in a if a[k].dim() > 1)

    def test_channel_mismatch(self, model):
        with pytest.raises(ValueError):
            model.decode(torch.zeros(1, 5, 16, 16), "AB")


class TestTransformNets:
    @pytest.mark.parametrize("n,shape", [(2, (16, 16)), (3, (16, 16, 16))])
    def test_fresh_affine_is_identity(self, n, shape):
        m = FireModel(ModelConfig(n=n, base_width=4, image_shape=shape))
        xa, xb = images(2, shape), images(2, shape, seed=1)
        with torch.no_grad():
            A, u = m.forward_transform(xa, xb, "AB")
        assert A.shape == (2, n, n + 1)
        assert torch.equal(A, G.identity_affine(n, 2))
        assert u.shape == (2, *shape, n)
        assert torch.equal(u, torch.zeros_like(u))

    def test_fresh_warp_is_identity(self, model):
        xa, xb = images(), images(seed=1)
        with torch.no_grad():
            A, u = model.forward_transform(xa, xb, "BA")
            assert (G.warp_image(xa, A, u) - xa).abs().max() < 1e-6

    def test_field_bound(self):
        m = perturb_zero_init(FireModel(ModelConfig(base_width=4, image_shape=(16, 16), nr_scale=0.3)), scale=5.0)
        g = torch.Generator().manual_seed(0)
        with torch.no_grad():
            for _ in range(100):
                f1 = torch.randn(1, 16, 4, 4, generator=g) * 3
                f2 = torch.randn(1, 16, 4, 4, generator=g) * 3
                u = m.nonrigid(f1, f2, "AB")
                assert u.shape == (1, 16, 16, 2)
                assert torch.isfinite(u).all() and u.abs().max() <= 0.3

    def test_affine_not_symmetric_after_training(self):
        from firereg.training import TrainConfig, train
        xa, xb = images(4, (16, 16)), images(4, (16, 16), seed=1)
        cfg = TrainConfig(iterations=30, batch_size=4, lr_taf=1e-3, lr_tnr=1e-3, lr_gf=1e-3,
                          model=ModelConfig(base_width=4, image_shape=(16, 16)))
        trainer, _ = train(cfg, (xa, xb))
        m = trainer.model
        assert trainer.step_counts["t_af"] == 10
        with torch.no_grad():
            fa, fb = m.encode(xa), m.encode(xb)
            assert not torch.allclose(m.affine(fa, fb, "AB"), m.affine(fb, fa, "AB"))

    def test_deterministic_transform(self, model):
        xa, xb = images(), images(seed=1)
        with torch.no_grad():
            a1, u1 = model.forward_transform(xa, xb, "AB")
            a2, u2 = model.forward_transform(xa, xb, "AB")
        assert torch.equal(a1, a2) and torch.equal(u1, u2)


class TestParameters:
    def test_groups_partition(self, model):
        ids = {g: {id(p) for p in model.group_parameters(g)} for g in ("g", "t_af", "t_nr")}
        assert not (ids["g"] & ids["t_af"]) and not (ids["g"] & ids["t_nr"]) and not (ids["t_af"] & ids["t_nr"])
        assert sum(len(v) for v in ids.values()) == len(list(model.parameters()))
        assert sum(p.numel() for g in ids for p in model.group_parameters(g)) == sum(p.numel() for p in model.parameters())

    def test_same_seed_same_model(self):
        cfg = ModelConfig(base_width=4, image_shape=(16, 16))
        a, b = FireModel(cfg, seed=3), FireModel(cfg, seed=3)
        for (ka, pa), (kb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert ka == kb and torch.equal(pa, pb)
        c = FireModel(cfg, seed=4)
        assert not torch.equal(next(a.parameters()), next(c.parameters()))

    def test_seed_does_not_touch_global_rng(self):
        torch.manual_seed(0)
        expected = torch.rand(1)
        torch.manual_seed(0)
        FireModel(ModelConfig(base_width=4, image_shape=(16, 16)), seed=9)
        assert torch.equal(torch.rand(1), expected)
