import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from turnterm.corpus import Label
from turnterm.encoders import EMBED_DIM, EmbeddingPair
from turnterm.errors import BadDims, MissingBaseModels, MissingModality
from turnterm.heads import (
    HeadConfig,
    batch_logits,
    checkpoint_name,
    decide,
    expected_parameter_count,
    forward,
    init_head,
    layer_shapes,
    load_head,
    parameter_count,
    parameter_hash,
    predict,
    read_checkpoint_meta,
    save_head,
)


def _bases(seed=0):
    return init_head(HeadConfig("TO", seed=seed)), init_head(HeadConfig("AO", seed=seed + 1))


def _rand(n, seed=0):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, EMBED_DIM)).astype(np.float32), rng.standard_normal((n, EMBED_DIM)).astype(np.float32)


def test_layer_shapes():
    assert layer_shapes(init_head(HeadConfig("TO"))) == [(768, 256), (256, 64), (64, 2)]
    assert layer_shapes(init_head(HeadConfig("EF"))) == [(768, 256), (768, 256), (512, 256), (256, 64), (64, 2)]
    to, ao = _bases()
    assert layer_shapes(init_head(HeadConfig("LF"), to, ao)) == [(4, 2)]


def _dense(dims):
    # independent count: weights a*b plus biases b per layer
    total = 0
    for a, b in zip(dims, dims[1:]):
        total += a * b + b
    return total


@pytest.mark.parametrize("arch,hidden,ef", [("TO", (256, 64), 256), ("AO", (32,), 8), ("EF", (256, 64), 256),
                                            ("EF", (16, 8, 4), 12)])
def test_parameter_counts(arch, hidden, ef):
    cfg = HeadConfig(arch, hidden_dims=hidden, ef_modality_dim=ef)
    model = init_head(cfg)
    if arch == "EF":
        expect = 2 * (768 * ef + ef) + _dense((2 * ef, *hidden, 2))
    else:
        expect = _dense((768, *hidden, 2))
    assert parameter_count(model) == expected_parameter_count(cfg) == expect


def test_fusion_parameter_counts():
    to, ao = _bases()
    assert parameter_count(init_head(HeadConfig("LF"), to, ao)) == 10
    assert parameter_count(init_head(HeadConfig("AF"), to, ao)) == 0


def test_bad_configs():
    with pytest.raises(BadDims):
        HeadConfig("TO", hidden_dims=(0,))
    with pytest.raises(BadDims):
        HeadConfig("TO", hidden_dims=())
    with pytest.raises(MissingBaseModels):
        init_head(HeadConfig("LF"))
    with pytest.raises(MissingBaseModels):
        to, ao = _bases()
        init_head(HeadConfig("AF"), ao, to)


def test_af_example_logits():
    class Fixed(torch.nn.Module):
        def __init__(self, arch, out):
            super().__init__()
            self.config = HeadConfig(arch)
            self.out = torch.tensor(out)

        def forward(self, audio=None, text=None):
            x = text if text is not None else audio
            return self.out.expand(x.shape[0], 2)

    af = init_head(HeadConfig("AF"), Fixed("TO", [2.0, 0.0]), Fixed("AO", [0.0, 2.0]))
    a, t = _rand(1)
    assert batch_logits(af, a, t).tolist() == [[1.0, 1.0]]
    # TO and AO negatives of each other -> (0, 0) -> tie -> NonTerminal
    af = init_head(HeadConfig("AF"), Fixed("TO", [1.5, -1.5]), Fixed("AO", [-1.5, 1.5]))
    assert predict(af, EmbeddingPair("s", a[0], t[0])) is Label.NON_TERMINAL


def test_af_is_mean_of_base_logits():
    to, ao = _bases(3)
    af = init_head(HeadConfig("AF"), to, ao)
    a, t = _rand(1000, 1)
    expect = (batch_logits(to, text=t) + batch_logits(ao, audio=a)) / 2
    assert torch.max(torch.abs(batch_logits(af, a, t) - expect)) <= 1e-6


def test_lf_depends_on_its_layer_and_keeps_bases_frozen():
    to, ao = _bases(5)
    before = parameter_hash(to), parameter_hash(ao)
    lf = init_head(HeadConfig("LF", seed=1), to, ao)
    a, t = _rand(8, 2)
    out1 = batch_logits(lf, a, t)
    with torch.no_grad():
        lf.fuse.weight.add_(0.5)
    assert not torch.allclose(out1, batch_logits(lf, a, t))
    loss = batch_logits(lf, a, t, training=True).sum()
    loss.backward()
    assert all(p.grad is None for m in (to, ao) for p in m.parameters())
    assert (parameter_hash(to), parameter_hash(ao)) == before


@settings(max_examples=25, deadline=None)
@given(st.floats(-50, 50), st.integers(0, 10**6))
def test_argmax_shift_invariance(k, seed):
    to, ao = _bases(seed % 97)
    a, t = _rand(16, seed)
    lt, la = batch_logits(to, text=t).double(), batch_logits(ao, audio=a).double()
    base = decide(((lt + la) / 2).numpy())
    shifted = decide(((lt + k + la + k) / 2).numpy())
    assert np.array_equal(base, shifted)
    assert np.array_equal(decide(lt.numpy()), decide((lt + k).numpy()))


def test_decide_examples():
    assert decide(np.array([0.3, -0.3])) == 0
    assert decide(np.array([0.5, 0.5])) == 1
    assert Label.from_index(0) is Label.TERMINAL


@pytest.mark.parametrize("arch", ["TO", "AO", "EF", "LF", "AF"])
def test_shape_finiteness_and_inference_determinism(arch):
    to, ao = _bases()
    model = init_head(HeadConfig(arch), to, ao)
    a, t = _rand(1, 9)
    pair = EmbeddingPair("s", a[0], t[0])
    out = forward(model, pair)
    assert out.shape == (2,) and np.all(np.isfinite(out))
    assert np.array_equal(out, forward(model, pair))


def test_dropout_active_only_in_training():
    model = init_head(HeadConfig("TO"))
    a, t = _rand(4, 3)
    torch.manual_seed(0)
    o1 = batch_logits(model, text=t, training=True)
    o2 = batch_logits(model, text=t, training=True)
    assert not torch.equal(o1, o2)


def test_missing_modality():
    with pytest.raises(MissingModality):
        forward(init_head(HeadConfig("TO")), EmbeddingPair("s", np.zeros(EMBED_DIM), None))
    with pytest.raises(MissingModality):
        forward(init_head(HeadConfig("EF")), EmbeddingPair("s", None, np.zeros(EMBED_DIM)))


def test_init_deterministic_under_seed():
    assert parameter_hash(init_head(HeadConfig("EF", seed=4))) == parameter_hash(init_head(HeadConfig("EF", seed=4)))
    assert parameter_hash(init_head(HeadConfig("EF", seed=4))) != parameter_hash(init_head(HeadConfig("EF", seed=5)))


@pytest.mark.parametrize("arch", ["TO", "AO", "EF", "LF"])
def test_gradient_matches_finite_differences(arch):
    torch.manual_seed(0)
    small = dict(hidden_dims=(6, 5), ef_modality_dim=4, input_dim=7, dropout=0.0)
    to = init_head(HeadConfig("TO", seed=1, **small)).double()
    ao = init_head(HeadConfig("AO", seed=2, **small)).double()
    model = init_head(HeadConfig(arch, seed=3, **small), to, ao).double()
    model.eval()
    g = torch.Generator().manual_seed(1)
    a = torch.randn(5, 7, dtype=torch.float64, generator=g)
    t = torch.randn(5, 7, dtype=torch.float64, generator=g)
    y = torch.tensor([0, 1, 1, 0, 1])

    def loss():
        return torch.nn.functional.cross_entropy(model(audio=a, text=t), y)

    params = [p for p in model.parameters() if p.requires_grad]
    model.zero_grad()
    loss().backward()
    analytic = torch.cat([p.grad.flatten() for p in params])
    numeric = []
    h = 1e-6
    with torch.no_grad():
        for p in params:
            flat = p.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + h
                up = loss().item()
                flat[i] = old - h
                down = loss().item()
                flat[i] = old
                numeric.append((up - down) / (2 * h))
    numeric = torch.tensor(numeric, dtype=torch.float64)
    rel = torch.abs(analytic - numeric) / torch.clamp(torch.abs(analytic) + torch.abs(numeric), min=1e-8)
    assert torch.max(rel) < 1e-4


@pytest.mark.parametrize("arch", ["TO", "EF", "LF", "AF"])
def test_checkpoint_round_trip(tmp_path, arch):
    to, ao = _bases(2)
    save_head(to, tmp_path / "to.safetensors")
    save_head(ao, tmp_path / "ao.safetensors")
    model = init_head(HeadConfig(arch, seed=7), to, ao)
    path = tmp_path / checkpoint_name(arch, "ref_auto", 0, 7)
    refs = {"TO": "to.safetensors", "AO": "ao.safetensors"} if arch in ("LF", "AF") else {}
    save_head(model, path, base_refs=refs, extra={"note": 1})
    back = load_head(path)
    assert parameter_hash(back) == parameter_hash(model)
    a, t = _rand(5, 4)
    assert torch.equal(batch_logits(back, a, t), batch_logits(model, a, t))
    meta = read_checkpoint_meta(path)
    assert meta["config"]["architecture"] == arch and meta["extra"] == {"note": 1}
    # writing the same model again is byte-identical
    save_head(model, tmp_path / "again.safetensors", base_refs=refs, extra={"note": 1})
    assert (tmp_path / "again.safetensors").read_bytes() == path.read_bytes()
