import numpy as np
import pytest

from scpl import autodiff as ad
from scpl.autodiff import Tape
from scpl.layers import Flatten, Linear, Sequential, init_params
from scpl.losses import cross_entropy, supcon_loss
from scpl.network import (Component, NetworkTemplate, ScplNetwork, blocking_violations, build_bp_network,
                          build_from_template, component_step)


def small(H=2, head="linear", seed=0):
    dims = (5,) + (6,) * H + (3,)
    return build_from_template(NetworkTemplate(kind="mlp", dims=dims, projection_head=head, head_out=4), seed=seed)


def batch(n=8, d=5, seed=0):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 3, size=n)
    y[1] = y[0]
    return rng.normal(size=(n, d)), y


def test_mlp_template_shape():
    net = build_from_template(NetworkTemplate(kind="mlp", dims=(4, 8, 8, 3)))
    assert len(net.components) == 3 and net.H == 2
    assert net.output.out_shape == (3,) and net.output.objective == "ce"
    assert [c.objective for c in net.components[:-1]] == ["scl", "scl"]
    assert net.output.head is None


def test_same_seed_bitwise_identical():
    a, b = small(seed=4), small(seed=4)
    assert a.to_bytes() == b.to_bytes()
    assert small(seed=5).to_bytes() != a.to_bytes()


def test_vanilla_convnet_structure():
    t = NetworkTemplate(kind="vanilla_convnet")
    net = build_from_template(t, allocate=False)
    assert net.H == 3
    for c, ch in zip(net.components[:3], (128, 256, 512)):
        assert c.head.dim == 32 * 32 * ch
    lin = net.output.encoder.layers[-1]
    assert lin.weight.shape == (10, 32 * 32 * 512)


@pytest.mark.parametrize("t", [
    NetworkTemplate(kind="mlp", dims=(16, 64, 64, 3)),
    NetworkTemplate(kind="vanilla_convnet"),
])
def test_effective_params_equal_bp_params(t):
    net = build_from_template(t, allocate=False)
    bp = build_bp_network(t, allocate=False)
    assert net.effective_param_count() == bp.num_params()
    assert [p.shape for p in net.effective_params()] == [p.shape for p in bp.params()]
    assert net.affiliated_params() and all(p not in net.effective_params() for p in net.affiliated_params())


def test_vanilla_convnet_count_by_hand():
    convs = sum(9 * a * b + b for a, b in [(3, 128), (128, 256), (256, 512)])
    fc = 32 * 32 * 512 * 10 + 10
    net = build_from_template(NetworkTemplate(kind="vanilla_convnet"), allocate=False)
    assert net.effective_param_count() == convs + fc == 6_721_802


def test_component_step_blocks_every_pair():
    net = small(H=3)
    x, y = batch()
    for c in net.components:
        res = component_step(c, x, y)
        owned = {id(p) for p in c.params()}
        assert {id(p) for p in res.grads} <= owned
        assert blocking_violations(c, res.tape) == []
        for other in net.components:
            if other is not c:
                assert not any(p in res.grads for p in other.params())
        x = res.output
        assert isinstance(x, np.ndarray)


def test_component_rejects_attached_input():
    net = small()
    tape = Tape()
    with pytest.raises(ValueError, match="detach"):
        component_step(net.components[0], tape.watch(np.zeros((2, 5))), [0, 0])


def test_component_rejects_wrong_shape():
    with pytest.raises(ad.ShapeError):
        component_step(small().components[0], np.zeros((2, 4)), [0, 0])


def test_identity_encoder_and_head_zero_loss():
    comp = Component(1, Sequential(), Sequential(Flatten()), "scl", (3,), (3,))
    res = component_step(comp, np.array([[1.0, 2.0, 0.5], [0.1, -1.0, 3.0]]), [1, 1])
    assert res.loss == 0.0


def test_blocked_gradient_absent_but_true_gradient_nonzero():
    """Two linear components: L2 depends on theta_f1 end to end, yet blocking hides it."""
    net = small(H=1, head="linear")
    x, y = batch()
    c1, c2 = net.components
    w1 = c1.encoder.params()[0]

    def loss2_end_to_end(w):
        w1.value = w
        r1 = c1.encoder(x)
        return cross_entropy(c2.encoder(r1), y).item()

    base = w1.value.copy()
    h = 1e-6
    idx = np.unravel_index(np.argmax(np.abs(base)), base.shape)
    plus, minus = base.copy(), base.copy()
    plus[idx] += h
    minus[idx] -= h
    numeric = (loss2_end_to_end(plus) - loss2_end_to_end(minus)) / (2 * h)
    w1.value = base
    assert abs(numeric) > 1e-6

    r1 = component_step(c1, x, y).output
    res2 = component_step(c2, r1, y)
    assert w1 not in res2.grads
    assert all(p in res2.grads for p in c2.params())


def test_gradient_flow_depth_independent_of_H():
    depths = {}
    for H in (1, 3, 6):
        net = small(H=H)
        x, y = batch()
        ds = []
        for c in net.components:
            res = component_step(c, x, y)
            ds.append(res.depth)
            x = res.output
        depths[H] = max(ds)
    assert len(set(depths.values())) == 1


def test_global_loss_is_sum_of_component_losses():
    net = small(H=2)
    x, y = batch()
    got = net.global_loss(x, y)
    total, inp = 0.0, x
    for c in net.components:
        res = component_step(c, inp, y)
        total += res.loss
        inp = res.output
    assert got == pytest.approx(total, abs=1e-12)


def test_global_loss_h0_is_plain_ce():
    net = build_from_template(NetworkTemplate(kind="mlp", dims=(5, 3)))
    x, y = batch()
    assert net.global_loss(x, y) == cross_entropy(net.infer(x), y).item()


def test_global_loss_saturated_classification_near_zero():
    # identity classifier on confident one-hot inputs, plus an identity-head SCL component on one-hot rows
    y = np.array([0, 0, 1, 1, 2, 2])
    x = 50.0 * np.eye(3)[y]
    lin = Linear(3, 3)
    lin.weight.value, lin.bias.value = np.eye(3), np.zeros(3)
    out = Component(1, Sequential(lin), None, "ce", (3,), (3,))
    net = ScplNetwork([out])
    assert net.global_loss(x, y) < 1e-12


def test_infer_identity_encoders_equals_classifier():
    lin = Linear(3, 2)
    init_params(lin, 1)
    comps = [Component(1, Sequential(), Sequential(Flatten()), "scl", (3,), (3,)),
             Component(2, Sequential(lin), None, "ce", (3,), (2,))]
    net = ScplNetwork(comps)
    x = np.random.default_rng(0).normal(size=(4, 3))
    np.testing.assert_array_equal(net.infer(x), lin(x).data)


def test_infer_bitwise_equal_with_heads_stripped():
    net = small(H=2)
    x, _ = batch()
    stripped = ScplNetwork.from_bytes(net.to_bytes(include_heads=False))
    full = ScplNetwork.from_bytes(net.to_bytes(include_heads=True))
    assert net.infer(x).tobytes() == stripped.infer(x).tobytes() == full.infer(x).tobytes()
    assert all(p.value is None for p in stripped.affiliated_params())


def test_checkpoint_file_round_trip(tmp_path):
    net = small(H=2)
    net.save(tmp_path / "ck.bin")
    back = ScplNetwork.load(tmp_path / "ck.bin")
    assert back.to_bytes() == net.to_bytes()


def test_mismatched_component_chain_rejected():
    a = Component(1, Sequential(), Sequential(Flatten()), "scl", (3,), (3,))
    b = Component(2, Sequential(), None, "ce", (4,), (4,))
    with pytest.raises(ad.ShapeError):
        ScplNetwork([a, b])


def test_early_exit_heads():
    net = small(H=3).with_early_exit_heads(seed=0)
    aux = [c for c in net.components if not c.is_output]
    assert len(aux) == 3
    assert all(c.objective == "ce" and c.head.layers[-1].weight.shape[0] == 3 for c in aux)


def test_local_losses_use_normalized_contrastive_loss():
    net = small(H=1)
    x, y = batch()
    c1 = net.components[0]
    z = c1.head(c1.encoder(x))
    assert net.local_losses(x, y)[0] == pytest.approx(supcon_loss(z, y).item(), abs=1e-12)


def test_invalid_templates():
    with pytest.raises(ValueError):
        NetworkTemplate(kind="mlp", dims=(4,))
    with pytest.raises(ValueError):
        NetworkTemplate(kind="resnet")
    with pytest.raises(ValueError):
        NetworkTemplate(kind="mlp", dims=(4, 3), activation="gelu")
