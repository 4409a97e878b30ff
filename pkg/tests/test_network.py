import copy

import pytest
import torch

from elastic_stereo.arch_space import ArchConfig, SearchSpace, estimate_cost, sample_uniform
from elastic_stereo.network import ElasticStereoNet, check_stereo_batch, extract_subnet

SPACE = SearchSpace()


def _perturbed_store(seed=0):
    """A store whose zero-initialised parts are nonzero, so every path matters."""
    torch.manual_seed(seed)
    net = ElasticStereoNet(SPACE)
    g = torch.Generator().manual_seed(seed + 1)
    with torch.no_grad():
        for name, p in net.named_parameters():
            if "transforms" in name:
                p.add_(0.05 * torch.randn(p.shape, generator=g))
            elif p.abs().max() == 0:
                p.normal_(0, 0.05, generator=g)
    return net


@pytest.fixture(scope="module")
def store():
    return _perturbed_store()


def test_store_size(store):
    # max-subnet parameters plus one 25x25 and one 9x9 transform per searchable layer
    assert store.num_parameters() == 527899
    max_params = estimate_cost(SPACE.max_config(), SPACE, (48, 48)).params
    assert store.num_parameters() == max_params + 16 * (625 + 81)


def test_store_size_independent_of_use(store):
    n = store.num_parameters()
    for seed in range(3):
        store.extract(sample_uniform(SPACE, seed))
    assert store.num_parameters() == n


def test_max_config_bit_exact(store):
    x = torch.rand(1, 3, 48, 48), torch.rand(1, 3, 48, 48)
    sub = store.extract(SPACE.max_config())
    a, b = store(*x).maps, sub(*x).maps
    assert all(torch.equal(p, q) for p, q in zip(a, b))


@pytest.mark.parametrize("seed", range(8))
def test_extracted_param_count_matches_cost(store, seed):
    cfg = sample_uniform(SPACE, seed)
    assert extract_subnet(store, cfg).num_parameters() == estimate_cost(cfg, SPACE, (48, 48)).params


@pytest.mark.parametrize("seed", range(8))
def test_extracted_matches_supernet(store, seed):
    cfg = sample_uniform(SPACE, 100 + seed)
    g = torch.Generator().manual_seed(seed)
    left, right = torch.rand(1, 3, 48, 48, generator=g), torch.rand(1, 3, 48, 48, generator=g)
    ref = store(left, right, cfg).maps
    out = store.extract(cfg)(left, right).maps
    assert len(out) == len(ref) == cfg.scale + cfg.refine_depth
    for a, b in zip(out, ref):
        assert torch.allclose(a, b, rtol=1e-5, atol=1e-5 * float(b.detach().abs().max()))


def test_extraction_idempotent(store):
    cfg = sample_uniform(SPACE, 5)
    a, b = store.extract(cfg).state_dict(), store.extract(cfg).state_dict()
    assert a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)


def test_extracted_is_independent_copy():
    net = _perturbed_store(3)
    sub = net.extract(SPACE.max_config())
    with torch.no_grad():
        for p in sub.parameters():
            p.zero_()
    assert all(p.abs().sum() > 0 for n, p in net.named_parameters() if "features.stem" == n)


def test_static_forward_has_no_elastic_modules(store):
    from elastic_stereo.elastic_ops import ElasticInvertedResidual
    sub = store.extract(sample_uniform(SPACE, 1))
    assert not any(isinstance(m, ElasticInvertedResidual) for m in sub.modules())
    assert not any("transforms" in n for n, _ in sub.named_parameters())


def test_untouched_parameters_get_no_gradient():
    net = _perturbed_store(4)
    cfg = ArchConfig.uniform(SPACE, 3, 2, 2, 2, 1)
    out = net(torch.rand(1, 3, 48, 48), torch.rand(1, 3, 48, 48), cfg)
    sum(m.sum() for m in out.maps).backward()
    grads = {n: p.grad for n, p in net.named_parameters()}
    for n, g in grads.items():
        used_unit = n.startswith("features.units.0.") or n.startswith("features.units.1.")
        layer_ok = used_unit and n.split(".")[3] in ("0", "1")
        if n.startswith("features.units.") and not layer_ok:
            assert g is None or g.abs().sum() == 0, n
        if n.startswith("refiner.stages.1."):
            assert g is None or g.abs().sum() == 0, n
        if ".isa.2." in n or ".isa.3." in n:
            assert g is None or g.abs().sum() == 0, n
    # inside a used layer: channels past the width cut and the kernel ring
    layer = net.features.units[0][0]
    h = layer.hidden_channels(2)
    assert layer.expand.grad[h:].abs().sum() == 0
    # perturbed transforms read the whole 5x5 crop, so only the 7x7 rim is unused
    assert layer.depthwise.grad[:, :, 0].abs().sum() == 0
    assert layer.depthwise.grad[:, :, 1].abs().sum() > 0
    assert layer.transforms["7to5"].grad.abs().sum() > 0


def test_identity_transforms_leave_ring_untouched():
    torch.manual_seed(0)
    net = ElasticStereoNet(SPACE)
    cfg = ArchConfig.uniform(SPACE, 3, 8, 4, 4, 2)
    out = net(torch.rand(1, 3, 48, 48), torch.rand(1, 3, 48, 48), cfg)
    sum(m.sum() for m in out.maps).backward()
    for unit in net.features.units:
        for layer in unit:
            ring = layer.depthwise.grad.clone()
            ring[..., 2:5, 2:5] = 0
            assert ring.abs().sum() == 0


def test_batch_checks():
    with pytest.raises(ValueError):
        check_stereo_batch(torch.rand(1, 3, 48, 48), torch.rand(1, 3, 48, 24), 4)
    with pytest.raises(ValueError):
        check_stereo_batch(torch.rand(1, 1, 48, 48), torch.rand(1, 1, 48, 48), 4)
    with pytest.raises(ValueError, match="divisible"):
        check_stereo_batch(torch.rand(1, 3, 36, 36), torch.rand(1, 3, 36, 36), 4)
    check_stereo_batch(torch.rand(1, 3, 36, 36), torch.rand(1, 3, 36, 36), 3)
