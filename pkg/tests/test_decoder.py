import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from progseg.config import load_preset
from progseg.decoder import (
    AttentionMask,
    DecoderConfig,
    DecoderParams,
    GroundTruth,
    NumericOverflowError,
    QuerySet,
    StagePlan,
    aggregation_average,
    compute_mask,
    decoder_layer,
    predict,
    run_progressive,
)
from progseg.encoding import FourierSpec, fourier_encode
from progseg.matching import center_cost, hungarian, proposal_cost
from progseg.trainkit.model import Segmenter

T = lambda a: torch.as_tensor(np.asarray(a, dtype=np.float64))


def params(cfg, seed=0):
    torch.manual_seed(seed)
    return DecoderParams(cfg).double()


def queries(rng, k, d, de=None):
    return QuerySet(T(rng.normal(size=(k, d))), rng.uniform(0, 1, (k, 3)), T(rng.normal(size=(k, de or d))))


def np_layernorm(x, w, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = x.var(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * w + b


def np_attend(q, k, v, add, heads):
    dh = q.shape[1] // heads
    out = np.zeros((q.shape[0], v.shape[1]))
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        s = q[:, sl] @ k[:, sl].T / math.sqrt(dh)
        if add is not None:
            s = s + add
        s = np.exp(s - s.max(axis=1, keepdims=True))
        s /= s.sum(axis=1, keepdims=True)
        out[:, sl] = s @ v[:, sl]
    return out


def np_layer(qf, qe, f, e, allowed, p):
    P = {n: t.detach().numpy() for n, t in p.named_parameters()}
    lin = lambda x, name: x @ P[name + ".weight"].T + P[name + ".bias"]
    gelu = np.vectorize(lambda x: 0.5 * x * (1 + math.erf(x / math.sqrt(2))))
    qpos, kpos = lin(qe, "pos_proj"), lin(e, "pos_proj")
    add = np.where(allowed, 0.0, -np.inf)
    h = p.cfg.num_heads
    ca = np_attend(lin(qf + qpos, "cross_q"), lin(f + kpos, "cross_k"), lin(f, "cross_v"), add, h)
    x = np_layernorm(qf + lin(ca, "cross_out"), P["norm1.weight"], P["norm1.bias"])
    s = x + qpos
    sa = np_attend(lin(s, "self_q"), lin(s, "self_k"), lin(x, "self_v"), None, h)
    x = np_layernorm(x + lin(sa, "self_out"), P["norm2.weight"], P["norm2.bias"])
    ff = lin(gelu(lin(x, "ffn.0")), "ffn.2")
    return np_layernorm(x + ff, P["norm3.weight"], P["norm3.bias"])


def test_one_allowed_voxel_copies_its_feature(rng):
    p = params(DecoderConfig.literal(4))
    f = T(rng.normal(size=(5, 4)))
    q = queries(rng, 1, 4)
    allowed = np.zeros((1, 5), dtype=bool)
    allowed[0, 3] = True
    # k = 1: self-attention over a single key is the identity, so the layer returns F[j]
    out, cross, self_attn = decoder_layer(q, f, T(np.zeros((5, 4))), AttentionMask(allowed), p, return_attn=True)
    np.testing.assert_allclose(out.feats.detach().numpy()[0], f.numpy()[3], atol=1e-12)
    assert cross[0, 0].tolist() == [0, 0, 0, 1, 0]
    assert self_attn.flatten().tolist() == [1.0]


def test_full_layer_matches_reference_script():
    rng = np.random.default_rng(5)
    cfg = DecoderConfig(dim=4, pos_dim=6, num_classes=2, num_heads=2, ffn_dim=5)
    p = params(cfg, 3)
    q = queries(rng, 2, 4, 6)
    f, e = rng.normal(size=(3, 4)), rng.normal(size=(3, 6))
    allowed = np.array([[True, False, True], [False, True, True]])
    got = decoder_layer(q, T(f), T(e), AttentionMask(allowed), p).feats.detach().numpy()
    want = np_layer(q.feats.numpy(), q.pos_embed.numpy(), f, e, allowed, p)
    np.testing.assert_allclose(got, want, atol=1e-10)


def test_attention_rows_are_distributions_and_convex(rng):
    p = params(DecoderConfig.literal(4))
    f = T(rng.normal(size=(9, 4)))
    q = queries(rng, 3, 4)
    logits, mask = compute_mask(q, f, p)
    mask.allowed[1] = False  # force the fallback rule on a row
    mask = AttentionMask.from_logits(torch.where(torch.as_tensor(mask.allowed), 1.0, -1.0))
    _, cross, self_attn = decoder_layer(q, f, T(np.zeros((9, 4))), mask, p, return_attn=True)
    np.testing.assert_allclose(cross.sum(-1).numpy(), 1.0, atol=1e-9)
    np.testing.assert_allclose(self_attn.sum(-1).numpy(), 1.0, atol=1e-9)
    mixed = (cross[0] @ f).numpy()
    assert np.all(mixed >= f.numpy().min(0) - 1e-12) and np.all(mixed <= f.numpy().max(0) + 1e-12)


def test_mask_fallback_and_sign_rules(rng):
    p = params(DecoderConfig.literal(3))
    f = T(np.array([[1.0, 0, 0], [0, 1.0, 0]]))
    q = QuerySet(T([[0, 0, 1.0]]), np.zeros((1, 3)), T(np.zeros((1, 3))))
    logits, mask = compute_mask(q, f, p)
    assert torch.all(logits == 0) and mask.allowed.all()
    f = T(rng.normal(size=(4, 3)))
    logits, mask = compute_mask(QuerySet(f, np.zeros((4, 3)), f), f, p)
    assert np.all(np.diag(mask.allowed))
    logits = torch.as_tensor(rng.normal(size=(5, 7)))
    m = AttentionMask.from_logits(logits).allowed
    rows = (logits > 0).any(1).numpy()
    np.testing.assert_array_equal(m[rows], (logits > 0).numpy()[rows])
    assert AttentionMask(m).additive[~torch.as_tensor(m)].eq(-math.inf).all()


def test_aggregation_average_rules(rng):
    coords = np.array([[0.0, 0, 0], [2, 0, 0], [5, 5, 5]])
    logits = T([[1, 1, -1], [-1, -1, -1]])
    fb = np.array([[9.0, 9, 9], [7, 7, 7]])
    np.testing.assert_allclose(aggregation_average(logits, coords, fb), [[1, 0, 0], [7, 7, 7]])
    logits = rng.normal(size=(4, 10))
    coords = rng.uniform(size=(10, 3))
    fb = np.zeros((4, 3))
    got = aggregation_average(T(logits), coords, fb)
    for q in range(4):
        pos = [coords[j] for j in range(10) if logits[q, j] > 0]
        np.testing.assert_allclose(got[q], np.mean(pos, 0) if pos else fb[q])


def test_stage_plans():
    assert StagePlan.from_layers(6) == StagePlan(6, 5, 1)
    assert StagePlan.from_layers(6, fine=True, merge=False) == StagePlan(6, 5, 0)
    assert StagePlan.from_layers(6, fine=False, merge=True) == StagePlan(10, 0, 1)
    assert StagePlan.from_layers(6, fine=False, merge=False) == StagePlan(11, 0, 0)
    assert StagePlan.from_layers(6).total == 12


def test_parameter_count_independent_of_layers():
    counts = {L: Segmenter(load_preset("baseline", {"model": {"num_layers": L}})).num_parameters()
              for L in (2, 6)}
    assert counts[2] == counts[6]


@pytest.fixture
def toy():
    rng = np.random.default_rng(11)
    m, d = 40, 8
    coords = np.vstack([rng.normal([0, 0, 0], 0.2, (20, 3)), rng.normal([2, 0, 0], 0.2, (20, 3))])
    f = T(rng.normal(size=(m, d)))
    spec = FourierSpec(2, 1.0)
    enc = lambda x: fourier_encode(x, spec)
    e = enc(coords) * 1.0
    masks = np.zeros((2, m), dtype=bool)
    masks[0, :20] = masks[1, 20:] = True
    gt = GroundTruth(masks, np.array([0, 1]), np.array([coords[:20].mean(0), coords[20:].mean(0)]))
    init_idx = [0, 5, 25, 30]
    init = QuerySet(f[init_idx], coords[init_idx], e[init_idx])
    p = params(DecoderConfig(dim=d, pos_dim=12, num_classes=2, num_heads=2, ffn_dim=8), 2)
    return dict(init=init, feats=f, pos=e, mask_feats=f, coords=coords, p=p, gt=gt, encode_position=enc)


def test_single_coarse_layer_is_one_layer_plus_one_match(toy):
    res = run_progressive(toy["init"], toy["feats"], toy["pos"], toy["mask_feats"], toy["coords"],
                          StagePlan(1, 0, 0), toy["p"], toy["gt"], toy["encode_position"])
    _, mask = compute_mask(toy["init"], toy["mask_feats"], toy["p"])
    q = decoder_layer(toy["init"], toy["feats"], toy["pos"], mask, toy["p"])
    pred = predict(q, toy["mask_feats"], toy["p"])
    a = hungarian(proposal_cost(pred.mask_logits.detach(), pred.semantic_logits.detach(),
                                toy["gt"].masks, toy["gt"].classes))
    assert torch.equal(res.preds[0].mask_logits, pred.mask_logits)
    assert res.assignments == [a] and res.stages == ["coarse"]


def reference_schedule(t, plan):
    """Coarse/fine/merge composed by hand from the public primitives."""
    p, gt, f, e, mf, c = t["p"], t["gt"], t["feats"], t["pos"], t["mask_feats"], t["coords"]
    match = lambda pr: hungarian(proposal_cost(pr.mask_logits.detach(), pr.semantic_logits.detach(),
                                               gt.masks, gt.classes))
    q = t["init"]
    _, mask = compute_mask(q, mf, p)
    logits, assigns, qes = [], [], []
    for _ in range(plan.coarse):
        q = decoder_layer(q, f, e, mask, p)
        pr = predict(q, mf, p)
        logits.append(pr.mask_logits)
        assigns.append(match(pr))
        qes.append(q.pos_embed)
        mask = AttentionMask.from_logits(pr.mask_logits)
    c_avg = aggregation_average(logits[-1], c, t["init"].pos_coords)
    qe = t["encode_position"](c_avg)
    fixed = hungarian(center_cost(c_avg, gt.centers))
    q = QuerySet(q.feats, c_avg, qe)
    for stage in ["fine"] * plan.fine + ["merge"] * plan.merge:
        q = decoder_layer(q, f, e, mask, p)
        pr = predict(q, mf, p)
        logits.append(pr.mask_logits)
        assigns.append(fixed if stage == "fine" else match(pr))
        qes.append(qe)
        mask = AttentionMask.from_logits(pr.mask_logits)
    return logits, assigns, qes, c_avg


def test_full_schedule_matches_scripted_reference(toy):
    plan = StagePlan.from_layers(3)
    res = run_progressive(toy["init"], toy["feats"], toy["pos"], toy["mask_feats"], toy["coords"],
                          plan, toy["p"], toy["gt"], toy["encode_position"])
    logits, assigns, qes, c_avg = reference_schedule(toy, plan)
    assert res.stages == ["coarse"] * 3 + ["fine"] * 2 + ["merge"]
    for a, b in zip(res.preds, logits):
        assert torch.equal(a.mask_logits, b)
    assert res.assignments == assigns
    np.testing.assert_array_equal(res.c_avg, c_avg)
    for a, b in zip(res.query_pos_embed, qes):
        assert torch.equal(a, b)


def test_fine_stage_targets_and_embedding_fixed(toy):
    plan = StagePlan.from_layers(4)
    res = run_progressive(toy["init"], toy["feats"], toy["pos"], toy["mask_feats"], toy["coords"],
                          plan, toy["p"], toy["gt"], toy["encode_position"])
    fine = [i for i, s in enumerate(res.stages) if s == "fine"]
    assert len(fine) == 3
    for i in fine:
        assert res.assignments[i] == res.fine_assignment
        assert torch.equal(res.query_pos_embed[i], res.query_pos_embed[fine[0]])
        assert res.query_pos_embed[i] is res.query_pos_embed[fine[0]]


def test_replay_reproduces_forward_bitwise(toy):
    plan = StagePlan.from_layers(3)
    args = (toy["init"], toy["feats"], toy["pos"], toy["mask_feats"], toy["coords"], plan, toy["p"],
            toy["gt"], toy["encode_position"])
    a = run_progressive(*args)
    b = run_progressive(*args, replay=a.trace)
    for x, y in zip(a.preds, b.preds):
        assert torch.equal(x.mask_logits, y.mask_logits)
    assert a.assignments == b.assignments


def test_inference_mode_does_no_matching(toy):
    res = run_progressive(toy["init"], toy["feats"], toy["pos"], toy["mask_feats"], toy["coords"],
                          StagePlan.from_layers(2), toy["p"], None, toy["encode_position"])
    assert res.assignments == [None] * 4 and res.fine_assignment is None


@given(st.integers(0, 10_000))
def test_query_permutation_equivariance(seed):
    rng = np.random.default_rng(seed)
    p = params(DecoderConfig(dim=8, pos_dim=8, num_heads=2), 1)
    f, e = T(rng.normal(size=(12, 8))), T(rng.normal(size=(12, 8)))
    q = queries(rng, 5, 8)
    allowed = rng.uniform(size=(5, 12)) > 0.4
    allowed[:, 0] = True
    perm = rng.permutation(5)
    a = decoder_layer(q, f, e, AttentionMask(allowed), p).feats
    qp = QuerySet(q.feats[perm], q.pos_coords[perm], q.pos_embed[perm])
    b = decoder_layer(qp, f, e, AttentionMask(allowed[perm]), p).feats
    np.testing.assert_allclose(a[perm].detach().numpy(), b.detach().numpy(), atol=1e-12)


def test_overflow_detected(rng):
    p = params(DecoderConfig.literal(4))
    q = QuerySet(T(np.full((1, 4), np.inf)), np.zeros((1, 3)), T(np.zeros((1, 4))))
    with pytest.raises(NumericOverflowError):
        decoder_layer(q, T(rng.normal(size=(3, 4))), T(np.zeros((3, 4))), None, p)


def test_config_validation():
    with pytest.raises(ValueError):
        DecoderParams(DecoderConfig(dim=6, num_heads=4))
    with pytest.raises(ValueError):
        DecoderParams(DecoderConfig(dim=4, pos_dim=8, project_pos=False))
