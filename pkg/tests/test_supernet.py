import numpy as np
import pytest

from depsnet import autodiff as ad
from depsnet.checkpoint import (load_standalone, load_supernet, read_container, save_standalone,
                                save_supernet)
from depsnet.errors import CalibrationRequiredError, ContractError, FormatError, ValidationError
from depsnet.evaluation import bn_calibrate
from depsnet.rng import substream
from depsnet.supernet import (ArchConfig, ArchSpace, Minibatch, StageSpec, SupernetWeights,
                              count_macs, extract_standalone, forward_subnet, kernel_window,
                              mid_channels, sample_uniform, sandwich_sample, select_subnet)
from oracles import enumerate_space


def singleton_space():
    # two resolutions keep |A| = 2; every other dimension is a singleton
    return ArchSpace(stages=(StageSpec(1, (1,), 4, 4, (1.0,), (3,), 1),), num_classes=3,
                     stem_width=4, resolution_choices=(6, 8))


# -- space ----------------------------------------------------------------------


def test_cardinality_matches_enumeration(space):
    configs = list(space.enumerate())
    assert len(configs) == space.cardinality() == 64
    assert len({c.digest for c in configs}) == 64
    assert [c.digest for c in configs] == [c.digest for c in enumerate_space(space)]


def test_full_and_min_are_extremes(space):
    full, small = space.full(), space.minimal()
    assert full.depths == (2, 1) and small.depths == (1, 1)
    assert all(w == 1.0 for ws in full.widths for w in ws)
    assert all(k == 1 for k in small.kernels[0])


@pytest.mark.parametrize("bad,dim", [
    (dict(depth_choices=(2, 1)), "stages[0].depth_choices"),
    (dict(depth_choices=()), "stages[0].depth_choices"),
    (dict(kernel_choices=(2,)), "stages[0].kernel_choices"),
    (dict(width_fraction_choices=(0.0, 1.0)), "stages[0].width_fraction_choices"),
])
def test_space_validation_names_dimension(bad, dim):
    base = dict(max_depth=2, depth_choices=(1, 2), width=4, max_mid=4,
                width_fraction_choices=(0.5, 1.0), kernel_choices=(3,))
    base.update(bad)
    with pytest.raises(ValidationError) as e:
        ArchSpace(stages=(StageSpec(**base),), num_classes=3)
    assert e.value.dimension == dim


def test_space_needs_two_configs():
    with pytest.raises(ValidationError):
        ArchSpace(stages=(StageSpec(1, (1,), 4, 4, (1.0,), (3,), 1),), num_classes=3)


def test_space_round_trip(space):
    assert ArchSpace.from_dict(space.to_dict()) == space


def test_config_outside_space_names_dimension(weights):
    cfg = weights.space.full()
    bad = ArchConfig((3, 1), cfg.widths, cfg.kernels, cfg.resolution)
    with pytest.raises(ValidationError) as e:
        select_subnet(weights, bad)
    assert e.value.dimension == "stages[0].depth"
    bad = ArchConfig(cfg.depths, ((1.0, 0.3), (1.0,)), cfg.kernels, cfg.resolution)
    with pytest.raises(ValidationError) as e:
        select_subnet(weights, bad)
    assert e.value.dimension == "stages[0].blocks[1].width_fraction"


def test_digest_is_stable():
    a = ArchConfig((1, 2), ((0.5, 1.0),), ((3, 5),), 16)
    b = ArchConfig.from_dict(a.to_dict())
    assert a.digest == b.digest and len(a.digest) == 12


# -- slicing --------------------------------------------------------------------


def test_prefix_and_centering_rules():
    assert mid_channels(8, 0.5) == 4
    assert kernel_window(5, 3) == slice(1, 4)
    assert kernel_window(5, 5) == slice(0, 5)
    assert kernel_window(3, 1) == slice(1, 2)


def test_width_half_slices_first_four_channels():
    sp = ArchSpace(stages=(StageSpec(1, (1,), 4, 8, (0.5, 1.0), (3, 5), 1),), num_classes=3,
                   stem_width=4, resolution_choices=(8,))
    w = SupernetWeights.init(sp, substream(0, "init"))
    cfg = ArchConfig((1,), ((0.5,),), ((3,),), 8)
    view = select_subnet(w, cfg)
    a = view.param("stages.0.blocks.0.conv_a")
    assert a.shape == (4, 4, 3, 3)
    np.testing.assert_array_equal(a, w["stages.0.blocks.0.conv_a"].data[0:4, :, 1:4, 1:4])


def test_full_view_covers_every_parameter_once(weights):
    view = select_subnet(weights, weights.space.full())
    masks = view.coverage_mask()
    assert all(m.all() for m in masks.values())
    assert sum(view.param(n).size for n in view.slices) == weights.num_parameters()


def test_view_aliases_store(weights):
    view = select_subnet(weights, weights.space.minimal())
    p = view.param("stages.0.blocks.0.conv_a")
    p[...] = 0.25
    assert np.all(weights["stages.0.blocks.0.conv_a"].data[view.slices["stages.0.blocks.0.conv_a"]] == 0.25)


def test_update_through_view_leaves_disjoint_parameters(weights, batch):
    sp = weights.space
    small = sp.minimal()
    before = {n: a.copy() for n, a in weights.arrays().items()}
    view = select_subnet(weights, small)
    with ad.Tape():
        ad.backward(ad.loss_ce_smoothed(forward_subnet(view, batch, update_stats=False), batch.labels))
    masks = view.coverage_mask()
    for n in weights.order:
        g = weights[n].grad if weights[n].grad is not None else np.zeros_like(before[n])
        weights[n].data[...] -= 0.1 * g
        assert np.array_equal(weights[n].data[~masks[n]], before[n][~masks[n]])
    # overlapping config sees the change
    full_view = select_subnet(weights, sp.full())
    assert any(not np.array_equal(full_view.param(n), before[n]) for n in view.slices)


def test_forward_is_deterministic(weights, batch):
    view = select_subnet(weights, weights.space.full())
    a = forward_subnet(view, batch, update_stats=False).data
    b = forward_subnet(view, batch, update_stats=False).data
    assert a.tobytes() == b.tobytes()


def test_min_and_full_differ(weights, batch):
    f = forward_subnet(select_subnet(weights, weights.space.full()), batch, update_stats=False).data
    m = forward_subnet(select_subnet(weights, weights.space.minimal()), batch, update_stats=False).data
    assert np.abs(f - m).max() > 1e-3


def test_resolution_mismatch(weights):
    b = Minibatch(np.zeros((2, 1, 6, 6), np.float32), np.zeros(2, np.int64))
    with pytest.raises(ContractError):
        forward_subnet(select_subnet(weights, weights.space.full()), b)


def test_eval_needs_bn_bucket(weights, batch):
    cfg = next(c for c in weights.space.enumerate()
               if c.digest not in weights.bn_stats)
    with pytest.raises(CalibrationRequiredError):
        forward_subnet(select_subnet(weights, cfg), batch, "eval")


def test_train_mode_updates_only_own_bucket(weights, batch):
    sp = weights.space
    full_before = {k: (m.copy(), v.copy()) for k, (m, v) in weights.bn_stats[sp.full().digest].items()}
    forward_subnet(select_subnet(weights, sp.minimal()), batch)
    for k, (m, v) in weights.bn_stats[sp.full().digest].items():
        assert np.array_equal(m, full_before[k][0]) and np.array_equal(v, full_before[k][1])
    assert np.any(weights.bn_stats[sp.minimal().digest]["stem.bn"][0] != 0)


# -- sampling ---------------------------------------------------------------------


def test_sampling_reproducible(space):
    a = sample_uniform(space, 5, np.random.default_rng(9))
    b = sample_uniform(space, 5, np.random.default_rng(9))
    assert [c.digest for c in a] == [c.digest for c in b]


def test_sampling_frequencies(space):
    draws = sample_uniform(space, 10_000, np.random.default_rng(1))
    frac = np.mean([c.kernels[0][0] == 3 for c in draws])
    assert 0.47 <= frac <= 0.53


def test_sampling_degenerate_space():
    sp = ArchSpace(stages=(StageSpec(1, (1,), 4, 4, (1.0,), (3,), 1),), num_classes=3,
                   stem_width=4, resolution_choices=(8, 9))
    draws = sample_uniform(sp, 50, np.random.default_rng(0), exclude=(sp.minimal().digest,))
    assert all(c == sp.full() for c in draws)


def test_sample_k_zero(space):
    with pytest.raises(ContractError):
        sample_uniform(space, 0, np.random.default_rng(0))


def test_sandwich(space):
    s = sandwich_sample(space, np.random.default_rng(4))
    assert len(s) == 4 and s[0] == space.full() and s[1] == space.minimal()
    t = sandwich_sample(space, np.random.default_rng(4))
    assert s == t
    forced = sandwich_sample(space, np.random.default_rng(4), exclude_full_from_random=True)
    assert all(c != space.full() for c in forced[2:])


def test_sandwich_in_resolution_only_space():
    # a space cannot be fully singleton (|A| >= 2); here only resolution varies
    sp = singleton_space()
    s = sandwich_sample(sp, np.random.default_rng(0), exclude_full_from_random=True)
    assert s[0] == sp.full() and s[1] == sp.minimal()
    assert s[2] == s[3] == sp.minimal()


# -- MACs -------------------------------------------------------------------------


def test_single_conv_macs():
    with ad.count_macs_executed() as ctr:
        ad.conv2d(ad.Tensor(np.zeros((1, 4, 8, 8))), ad.Tensor(np.zeros((8, 4, 3, 3))), 1, 1)
    assert ctr.total == 8 * 8 * 8 * 4 * 9 == 18_432


def test_classifier_macs():
    with ad.count_macs_executed() as ctr:
        ad.matmul(ad.Tensor(np.zeros((1, 16))), ad.Tensor(np.zeros((16, 10))))
    assert ctr.total == 160


def test_macs_monotone(space):
    lo, hi = count_macs(space, space.minimal()), count_macs(space, space.full())
    for cfg in space.enumerate():
        assert lo <= count_macs(space, cfg) <= hi


def test_macs_hand_count(space):
    # stem 8x8x4x1x9; stage0 block0 (k=3, mid 8): 8x8x8x4x9 + 8x8x6x8; block1 same with cin 6;
    # stage1 (stride 2 -> 4x4, k=3, mid 8): 4x4x8x6x9 + 4x4x8x8; head 8x4
    expect = (64 * 4 * 9 + 64 * 8 * 4 * 9 + 64 * 6 * 8 + 64 * 8 * 6 * 9 + 64 * 6 * 8
              + 16 * 8 * 6 * 9 + 16 * 8 * 8 + 8 * 4)
    assert count_macs(space, space.full()) == expect


# -- extraction and checkpoints ---------------------------------------------------


def test_extract_needs_stats(weights):
    cfg = next(c for c in weights.space.enumerate() if c.digest not in weights.bn_stats)
    with pytest.raises(CalibrationRequiredError):
        extract_standalone(weights, cfg)


def test_extract_full_is_bit_identical(weights, batch):
    forward_subnet(select_subnet(weights, weights.space.full()), batch)  # non-trivial stats
    model = extract_standalone(weights, weights.space.full())
    for n in weights.order:
        assert np.array_equal(model.params[n], weights[n].data)
    a = forward_subnet(select_subnet(weights, weights.space.full()), batch, "eval").data
    assert a.tobytes() == model(batch).data.tobytes()


def test_extract_random_config_matches(weights, tiny_data, batch, tmp_path):
    cfg = sample_uniform(weights.space, 1, np.random.default_rng(5))[0]
    bn_calibrate(weights, cfg, tiny_data.train, 2)
    model = extract_standalone(weights, cfg)
    a = forward_subnet(select_subnet(weights, cfg), batch, "eval").data
    assert np.abs(a - model(batch).data).max() <= 1e-6
    save_standalone(tmp_path / "m.bin", model)
    back = load_standalone(tmp_path / "m.bin")
    assert back.config == cfg
    assert back(batch).data.tobytes() == model(batch).data.tobytes()


def test_supernet_round_trip(weights, batch, tmp_path):
    forward_subnet(select_subnet(weights, weights.space.full()), batch)
    save_supernet(tmp_path / "w.ckpt", weights, meta={"x": 1})
    back = load_supernet(tmp_path / "w.ckpt")
    assert back.space == weights.space and back.order == weights.order
    for n in weights.order:
        assert back[n].data.tobytes() == weights[n].data.tobytes()
    for d, s in weights.bn_stats.items():
        for layer, (m, v) in s.items():
            assert back.bn_stats[d][layer][0].tobytes() == m.tobytes()
            assert back.bn_stats[d][layer][1].tobytes() == v.tobytes()
    # save -> load -> save is byte-identical
    save_supernet(tmp_path / "w2.ckpt", back, meta={"x": 1})
    assert (tmp_path / "w.ckpt").read_bytes() == (tmp_path / "w2.ckpt").read_bytes()


def test_container_layout(weights, tmp_path):
    p = tmp_path / "w.ckpt"
    save_supernet(p, weights)
    blob = p.read_bytes()
    assert blob[:8] == b"DEPSNET\x00"
    hlen = int.from_bytes(blob[8:16], "little")
    assert int.from_bytes(blob[-16:-8], "little") == len(blob) - 16
    header, arrays = read_container(p)
    assert header["format_version"] == 1
    first = header["tensors"][0]
    n = int(np.prod(first["shape"]))
    raw = np.frombuffer(blob[16 + hlen:16 + hlen + 4 * n], dtype="<f4")
    assert np.array_equal(raw, weights[first["name"]].data.ravel())


@pytest.mark.parametrize("corrupt,offset", [
    (lambda b: b"XEPSNET\x00" + b[8:], 0),
    (lambda b: b[:-1], None),
    (lambda b: b[:40] + bytes([b[40] ^ 1]) + b[41:], None),
    (lambda b: b[:10], None),
])
def test_container_format_errors(weights, tmp_path, corrupt, offset):
    p = tmp_path / "w.ckpt"
    save_supernet(p, weights)
    p.write_bytes(corrupt(p.read_bytes()))
    with pytest.raises(FormatError) as e:
        load_supernet(p)
    assert e.value.offset is not None
    if offset is not None:
        assert e.value.offset == offset


def test_parameter_count_constant(weights, batch):
    n = weights.num_parameters()
    shapes = {k: v.shape for k, v in weights.arrays().items()}
    forward_subnet(select_subnet(weights, weights.space.minimal()), batch)
    assert weights.num_parameters() == n
    assert {k: v.shape for k, v in weights.arrays().items()} == shapes


def test_slice_gradients_zero_outside_view(weights, batch):
    for cfg in weights.space.enumerate():
        weights.zero_grad()
        view = select_subnet(weights, cfg)
        with ad.Tape():
            logits = forward_subnet(view, batch, update_stats=False)
            ad.backward(ad.loss_ce_smoothed(logits, batch.labels, 0.1))
        masks = view.coverage_mask()
        for n in weights.order:
            g = weights[n].grad
            if g is not None:
                assert np.all(g[~masks[n]] == 0.0)
    weights.zero_grad()
