import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import vedit.numkit as nk
from vedit.augment import EditTriplet
from vedit.diffusion import (DROP_LABELS, DenoiserModel, DropoutPolicy, GuidanceConfig, IdentityCodec, TEXT_DIM,
                             CheckpointError, TrainConfig, batch_loss, cfg_noise, drop_conditions, edit_video,
                             embed_text, float32_schedule, load_blobs, load_checkpoint, save_checkpoint, text_bucket,
                             tokenize, train, training_step)
from vedit.numkit import Rng, Tensor
from vedit.schedule import NoiseSchedule, default_schedule, linear_beta_schedule, sampling_timesteps

from oracles import central_fd, fnv1a64, guided_scalar


class ConstModel:
    """Ignores its inputs; returns ``value`` everywhere."""

    text_dim = TEXT_DIM

    def __init__(self, value=0.0):
        self.value = value

    def __call__(self, x, t, c):
        shape = x.shape[:-3] + (x.shape[-3] // 2,) + x.shape[-2:]
        return Tensor(np.full(shape, self.value, dtype=np.float32))


class BranchModel(ConstModel):
    """Returns a constant chosen by which conditions are null."""

    def __init__(self, e00, exc, e0c, ex0):
        self.table = {(False, False): e00, (True, True): exc, (False, True): e0c, (True, False): ex0}

    def __call__(self, x, t, c):
        C = x.shape[-3] // 2
        has_x = bool(np.any(x.data[..., :C, :, :]))
        has_c = bool(np.any(c.data))
        shape = x.shape[:-3] + (C,) + x.shape[-2:]
        return Tensor(np.full(shape, self.table[(has_x, has_c)], dtype=np.float32))


# --- text embedding ------------------------------------------------------------

def test_tokenize_and_hash():
    assert tokenize("Invert, the COLORS!") == ["invert", "the", "colors"]
    assert text_bucket("invert") == fnv1a64(b"invert") % 32
    assert (text_bucket("invert"), text_bucket("brighten")) == (1, 10)


def test_embed_text_examples():
    assert not np.any(embed_text("").data)
    a, b = embed_text("invert").data, embed_text("brighten").data
    assert float(a @ b) == 0.0
    assert np.array_equal(embed_text("invert invert").data, a)
    assert np.linalg.norm(a) == pytest.approx(1.0)


# --- condition dropout ---------------------------------------------------------

def test_dropout_edge_policies():
    x, c = Tensor(np.ones((2, 1, 2, 2))), embed_text("invert")
    for s in range(50):
        x2, c2, lab = drop_conditions(s, x, c, DropoutPolicy(0, 0, 0))
        assert lab == "keep" and x2 is x and c2 is c
        x2, c2, lab = drop_conditions(s, x, c, DropoutPolicy(0, 0, 1))
        assert lab == "drop_both" and not np.any(x2.data) and not np.any(c2.data)


def test_dropout_label_semantics():
    x, c = Tensor(np.ones((1, 1, 2, 2))), embed_text("invert")
    seen = set()
    for s in range(400):
        x2, c2, lab = drop_conditions(s, x, c)
        seen.add(lab)
        assert np.any(x2.data) == (lab in ("drop_text", "keep"))
        assert np.any(c2.data) == (lab in ("drop_vision", "keep"))
        assert lab == DropoutPolicy().choose(Rng(s).random())
    assert seen == set(DROP_LABELS)


def test_dropout_frequencies():
    pol = DropoutPolicy()
    u = Rng(77).uniform(100_000)
    labels = [pol.choose(v) for v in u]
    for lab, p in zip(DROP_LABELS, (0.10, 0.10, 0.05, 0.75)):
        assert abs(labels.count(lab) / len(labels) - p) < 0.005


def test_dropout_policy_validation():
    with pytest.raises(ValueError):
        DropoutPolicy(0.6, 0.6, 0.0)
    with pytest.raises(ValueError):
        DropoutPolicy(-0.1, 0, 0)


# --- model ------------------------------------------------------------------------

@pytest.mark.parametrize("shape,F,B", [((1, 8, 8), 4, None), ((3, 4, 6), 2, 3), ((2, 2, 2), 1, 1)])
@pytest.mark.parametrize("head", DenoiserModel.HEADS)
def test_model_output_shape(shape, F, B, head):
    m = DenoiserModel(shape, hidden=16, head=head)
    C, H, W = shape
    lead = (F,) if B is None else (B, F)
    x = nk.randn(list(lead) + [2 * C, H, W], 0)
    c = Tensor(np.zeros(TEXT_DIM)) if B is None else Tensor(np.zeros((B, TEXT_DIM)))
    out = m(x, 3 if B is None else np.arange(B), c)
    assert out.shape == lead + (C, H, W)
    with pytest.raises(nk.ShapeError):
        m(nk.randn([F, 2 * C + 1, H, W], 0), 0, Tensor(np.zeros(TEXT_DIM)))


def test_model_parameter_budget():
    assert DenoiserModel((1, 8, 8)).num_parameters() < 200_000
    assert DenoiserModel((1, 8, 8), head="affine").num_parameters() < 200_000
    assert DenoiserModel((3, 16, 16)).num_parameters() < 200_000


def test_model_init_deterministic():
    a, b = DenoiserModel((1, 4, 4), seed=5), DenoiserModel((1, 4, 4), seed=5)
    assert all(np.array_equal(p.data, q.data) for p, q in zip(a.parameters(), b.parameters()))


def denoiser_grad_error(seed: int, head: str = "pixel") -> float:
    """Max relative error of backward() against central differences on a tiny float64 denoiser."""
    r = Rng(seed)
    C, H, W = 1 + r.integers(2), 2, 2 + r.integers(2)
    F, B = 1 + r.integers(3), 1 + r.integers(2)
    m = DenoiserModel((C, H, W), hidden=3, head_hidden=3, text_dim=4, time_dim=4, seed=seed, head=head,
                      dtype=np.float64)
    x = Tensor(r.normal((B, F, 2 * C, H, W)), dtype=np.float64)
    c = Tensor(r.normal((B, 4)), dtype=np.float64)
    t = r.integers(50, B)
    tgt = Tensor(r.normal((B, F, C, H, W)), dtype=np.float64)
    m.zero_grad()
    nk.backward(nk.mse(m(x, t, c), tgt))
    worst = 0.0
    for name, p in m.params.items():
        base = p.data.copy()

        def f(v, p=p):
            p.data = v
            return nk.mse(m(x, t, c), tgt).item()
        fd = central_fd(f, base, h=1e-5)
        p.data = base
        denom = np.maximum(np.maximum(np.abs(fd), np.abs(p.grad)), 1e-5)
        worst = max(worst, float(np.max(np.abs(fd - p.grad) / denom)))
    return worst


@pytest.mark.parametrize("head", DenoiserModel.HEADS)
def test_denoiser_gradients(head):
    assert max(denoiser_grad_error(s, head) for s in range(3)) < 1e-4


# --- training ---------------------------------------------------------------------

def _trip(seed, instruction="invert", shape=(2, 1, 4, 4)):
    v = Rng(seed).uniform(int(np.prod(shape))).reshape(shape).astype(np.float32)
    return EditTriplet(v, instruction, 1 - v, "image_synth", seed)


def test_zero_model_loss_is_noise_power():
    s = linear_beta_schedule(50)
    losses = [batch_loss(ConstModel(), [_trip(i)], IdentityCodec(), s, i)[0].item() for i in range(100)]
    assert abs(np.mean(losses) - 1.0) < 0.1
    clean = NoiseSchedule.from_betas([1e-9])
    losses = [batch_loss(ConstModel(), [_trip(i)], IdentityCodec(), clean, i)[0].item() for i in range(100)]
    assert abs(np.mean(losses) - 1.0) < 0.1


def test_training_step_deterministic_and_populates_grads():
    s = default_schedule(20)
    outs = []
    for _ in range(2):
        m = DenoiserModel((1, 4, 4), hidden=8)
        loss = training_step(m, _trip(3), IdentityCodec(), s, seed=11)
        assert all(p.grad is not None and np.any(p.grad) for p in m.parameters())
        outs.append(loss.item())
    assert outs[0] == outs[1]


def test_training_step_shape_mismatch():
    v = np.zeros((2, 1, 4, 4), np.float32)
    with pytest.raises(ValueError):
        EditTriplet(v, "x", np.zeros((2, 1, 4, 5), np.float32), "image_synth", 0)
    m = DenoiserModel((1, 4, 4), hidden=8)
    with pytest.raises(nk.ShapeError):
        training_step(m, _trip(0, shape=(2, 1, 4, 5)), IdentityCodec(), default_schedule(10), 0)


def test_short_training_reduces_loss():
    data = [_trip(i, "invert" if i % 2 else "brighten") for i in range(32)]
    m = DenoiserModel((1, 4, 4), hidden=32)
    _, losses = train(m, [data], float32_schedule(default_schedule(20)), TrainConfig(steps=150, batch=8, seed=1))
    assert np.mean(losses[-30:]) < np.mean(losses[:30])


def test_checkpoint_resume_is_bit_identical(tmp_path):
    data = [_trip(i) for i in range(10)]
    other = [_trip(100 + i, "brighten") for i in range(4)]
    sched = float32_schedule(default_schedule(20))
    cfg = TrainConfig(steps=6, batch=4, seed=9)
    full = DenoiserModel((1, 4, 4), hidden=8, seed=9)
    _, full_losses = train(full, [data, other], sched, cfg)

    half = DenoiserModel((1, 4, 4), hidden=8, seed=9)
    state, first = train(half, [data, other], sched, TrainConfig(steps=3, batch=4, seed=9))
    save_checkpoint(tmp_path / "c.evdm", half, sched, state, 3, 9)
    ck = load_checkpoint(tmp_path / "c.evdm")
    assert ck.step == 3 and ck.seed == 9
    assert np.array_equal(ck.schedule.beta, sched.beta)
    _, rest = train(ck.model, [data, other], ck.schedule, cfg, state=ck.state, start_step=ck.step)
    assert first + rest == full_losses
    assert all(np.array_equal(p.data, q.data) for p, q in zip(full.parameters(), ck.model.parameters()))


def test_checkpoint_layout_and_errors(tmp_path):
    m = DenoiserModel((1, 4, 4), hidden=8, head="affine")
    p = tmp_path / "m.evdm"
    save_checkpoint(p, m, default_schedule(10))
    data = p.read_bytes()
    assert data[:4] == b"EVDM" and data[4:8] == (1).to_bytes(4, "little")
    blobs = load_blobs(p)
    assert blobs["param.trunk0.weight"].shape == m.params["trunk0.weight"].shape
    back = load_checkpoint(p)
    assert back.model.head == "affine" and back.state is None
    p.write_bytes(b"NOPE" + data[4:])
    with pytest.raises(CheckpointError):
        load_checkpoint(p)
    p.write_bytes(data[:-7])
    with pytest.raises(CheckpointError):
        load_checkpoint(p)


# --- guidance ----------------------------------------------------------------------

def _cfg(model, g, shape=(2, 1, 3, 3)):
    z = nk.randn(list(shape), 1)
    x = Tensor(np.full(shape, 0.5))
    return cfg_noise(model, z, x, embed_text("invert"), 5, g).data


def test_cfg_stub_example():
    out = _cfg(BranchModel(0.0, 1.0, 0.5, 0.25), GuidanceConfig(1.0, 1.0))
    assert np.all(out == 1.25)


def test_cfg_zero_scales_return_unconditional():
    out = _cfg(BranchModel(0.125, 1.0, 0.5, 0.25), GuidanceConfig(0.0, 0.0))
    assert np.all(out == 0.125)


@settings(max_examples=50, deadline=None)
@given(lt=st.floats(-5, 5), lv=st.floats(-5, 5), k=st.floats(-3, 3))
def test_cfg_condition_blind_model_returns_constant(lt, lv, k):
    k = float(np.float32(k))
    out = _cfg(ConstModel(k), GuidanceConfig(lt, lv))
    assert np.allclose(out, k, atol=1e-6)


@settings(max_examples=50, deadline=None)
@given(vals=st.tuples(*[st.floats(-2, 2)] * 4), lt=st.floats(-4, 4), lv=st.floats(-4, 4))
def test_cfg_matches_scalar_formula(vals, lt, lv):
    vals = tuple(float(np.float32(v)) for v in vals)
    out = _cfg(BranchModel(*vals), GuidanceConfig(lt, lv))
    assert np.allclose(out, guided_scalar(*vals, lt, lv), atol=1e-5)


def test_cfg_affine_in_scales():
    m = DenoiserModel((1, 3, 3), hidden=8, seed=2)
    f = lambda a, b: _cfg(m, GuidanceConfig(a, b)).astype(np.float64)
    p0, p1 = f(0.5, -1.0), f(2.5, 3.0)
    mid = f(1.5, 1.0)
    assert np.allclose(mid, 0.5 * (p0 + p1), atol=1e-5)
    assert np.allclose(f(4.5, 7.0), 2 * p1 - p0, atol=1e-4)


def test_cfg_four_evaluations_and_variants():
    calls = []

    class Counting(BranchModel):
        def __call__(self, x, t, c):
            calls.append(1)
            return super().__call__(x, t, c)

    vals = (0.0, 1.0, 0.5, 0.25)
    m = Counting(*vals)
    _cfg(m, GuidanceConfig(1.0, 1.0))
    assert len(calls) == 4
    e00, exc, e0c, ex0 = vals
    assert np.allclose(_cfg(m, GuidanceConfig(2.0, 3.0, "three_branch")), e00 + 3 * (ex0 - e00) + 2 * (exc - ex0))
    assert np.allclose(_cfg(m, GuidanceConfig(2.0, 3.0, "text_only")), ex0 + 2 * (exc - ex0))
    assert np.allclose(_cfg(m, GuidanceConfig(2.0, 3.0, "vision_only")), e0c + 3 * (exc - e0c))


def test_cfg_rejects_bad_model_output():
    with pytest.raises(nk.NonFiniteError):
        _cfg(ConstModel(np.inf), GuidanceConfig(1, 1))

    class Wrong(ConstModel):
        def __call__(self, x, t, c):
            return Tensor(np.zeros((1,)))
    with pytest.raises(nk.ShapeError):
        _cfg(Wrong(), GuidanceConfig(1, 1))
    with pytest.raises(ValueError):
        GuidanceConfig(float("nan"), 1.0)
    with pytest.raises(ValueError):
        GuidanceConfig(1.0, 1.0, "two_branch")


# --- sampling -----------------------------------------------------------------------

def test_edit_video_single_step_closed_form():
    s = default_schedule(50)
    v = np.zeros((2, 1, 3, 3), np.float32)
    out = edit_video(ConstModel(), v, "invert", IdentityCodec(), s, 1, GuidanceConfig(0, 0), seed=4)
    z = nk.randn([2, 1, 3, 3], 4).data.astype(np.float64)
    assert np.allclose(out, z / math.sqrt(s.alpha_bar[49]), rtol=1e-6)


def test_edit_video_deterministic():
    m = DenoiserModel((1, 4, 4), hidden=8)
    v = Rng(0).uniform(32).reshape(2, 1, 4, 4).astype(np.float32)
    a = edit_video(m, v, "invert", n_steps=5, seed=3)
    b = edit_video(m, v, "invert", n_steps=5, seed=3)
    c = edit_video(m, v, "invert", n_steps=5, seed=4)
    assert a.tobytes() == b.tobytes() and a.tobytes() != c.tobytes()


def test_edit_video_uses_requested_steps():
    seen = []

    class Rec(ConstModel):
        def __call__(self, x, t, c):
            seen.append(int(np.asarray(t).reshape(-1)[0]))
            return super().__call__(x, t, c)

    edit_video(Rec(), np.zeros((1, 1, 2, 2), np.float32), "x", n_steps=25, g=GuidanceConfig(1, 1))
    assert sorted(set(seen), reverse=True) == sampling_timesteps(50, 25)
    assert len(seen) == 4 * 25


def test_identity_codec_roundtrip():
    v = Rng(1).uniform(24).reshape(2, 1, 3, 4).astype(np.float32)
    c = IdentityCodec()
    assert c.decode(c.encode(v)).tobytes() == v.tobytes()
