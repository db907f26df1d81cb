"""Central-difference checks for every differentiable operation.

Each op is checked on many seeded micro-instances. Network outputs are
reduced to a scalar with a random linear functional, so every output
entry contributes to the checked gradient. Whole-network cases measure
errors against a gradient scale no smaller than ``noise_floor``: attention
and pace gradients there can be ~1e-8, below what central differences of an
O(1) objective resolve.
"""

import numpy as np
import pytest

from exrec.enhancer import EnhancerConfig, Generator, enhancer_loss_and_grad
from exrec.filtering import build_candidate_set
from exrec.kcmp import KcmpConfig, MasteryPredictor, _kcmp_loss_core
from exrec.reranker import Reranker, RerankerConfig, RerankInstance, _rerank_loss_core
from exrec.tensorkit import (
    LSTM,
    MLP,
    MLSTM,
    BiLSTM,
    MlstmState,
    ParameterSet,
    SelfAttention,
    check_params,
    grad_check,
    mlstm_step,
    mlstm_step_backward,
    noise_floor,
    sigmoid,
)

from conftest import micro_synthetic

TOL = 1e-4
EPS = 1e-6


def _mlstm_step_case(rng):
    B, d = 2, 3
    prev = MlstmState(rng.normal(size=(B, d, d)), rng.normal(size=(B, d)), np.zeros(B))
    arrs = {
        "key": rng.normal(size=(B, d)),
        "value": rng.normal(size=(B, d)),
        "query": rng.normal(size=(B, d)) * 2.0,
        "forget": rng.uniform(0.2, 0.9, size=B),
        "input": rng.uniform(0.5, 2.0, size=B),
        "output": rng.uniform(0.1, 0.9, size=(B, d)),
        "cell": prev.cell,
        "normalizer": prev.normalizer,
    }
    r_out, r_c, r_n = rng.normal(size=(B, d)), rng.normal(size=(B, d, d)), rng.normal(size=(B, d))

    def run():
        st = MlstmState(arrs["cell"], arrs["normalizer"], np.zeros(B))
        new, out = mlstm_step(st, arrs["key"], arrs["value"], arrs["query"], arrs["forget"], arrs["input"], arrs["output"])
        return st, new, out

    def fn():
        _, new, out = run()
        return float(np.sum(r_out * out) + np.sum(r_c * new.cell) + np.sum(r_n * new.normalizer))

    st, new, _ = run()
    g = mlstm_step_backward(st, new, arrs["key"], arrs["value"], arrs["query"], arrs["forget"], arrs["input"], arrs["output"], r_out, r_c, r_n)
    return grad_check(fn, arrs, g, EPS)


def _layer_case(build, run_forward, run_backward, x):
    """Check a layer's parameter and input gradients under a random functional."""

    def case(rng):
        params = ParameterSet()
        layer = build(params, rng)
        X = x(rng)
        out, _ = run_forward(layer, X)
        R = rng.normal(size=out.shape)

        def fn():
            return float(np.sum(R * run_forward(layer, X)[0]))

        def bw():
            params.zero_grad()
            o, cache = run_forward(layer, X)
            return {"x": run_backward(layer, R, cache)}

        return check_params(fn, bw, params, {"x": X}, EPS)

    return case


def _masked(T, B):
    lengths = np.array([T] + [max(1, T - 1 - b) for b in range(B - 1)])
    return lengths, (np.arange(T)[:, None] < lengths[None, :]).astype(float)


_LSTM = _layer_case(
    lambda p, rng: LSTM(p, "lstm", 3, 4, rng),
    lambda l, X: (lambda hs, cs, c: (hs, c))(*l.forward(X, _masked(*X.shape[:2])[1])),
    lambda l, R, c: l.backward(R, c)[0],
    lambda rng: rng.normal(size=(4, 3, 3)),
)
_MLSTM = _layer_case(
    lambda p, rng: MLSTM(p, "mlstm", 3, 4, rng),
    lambda l, X: l.forward(X, _masked(*X.shape[:2])[1]),
    lambda l, R, c: l.backward(R, c),
    lambda rng: rng.normal(size=(4, 3, 3)),
)
_BILSTM = _layer_case(
    lambda p, rng: BiLSTM(p, "bi", 3, 3, rng),
    lambda l, X: l.forward(X, _masked(*X.shape[:2])[0]),
    lambda l, R, c: l.backward(R, c),
    lambda rng: rng.normal(size=(4, 3, 3)),
)
_ATTN = _layer_case(
    lambda p, rng: SelfAttention(p, "attn", 4, 2, rng),
    lambda l, X: l.forward(X),
    lambda l, R, c: l.backward(R, c),
    lambda rng: rng.normal(size=(2, 3, 4)),
)


def _mlp(act):
    return _layer_case(
        lambda p, rng: MLP(p, "mlp", [4, 5, 2], rng, act),
        lambda l, X: l.forward(X),
        lambda l, R, c: l.backward(R, c),
        lambda rng: rng.normal(size=(3, 4)),
    )


def _kcmp_loss_case(rng):
    z = rng.normal(size=(5, 2, 4))
    cov = (rng.uniform(size=z.shape) < 0.5).astype(float)
    a = rng.integers(0, 2, size=z.shape[:-1]).astype(float)
    mask = (rng.uniform(size=a.shape) < 0.8).astype(float)
    _, dz = _kcmp_loss_core(sigmoid(z), cov, a, mask)
    return grad_check(lambda: _kcmp_loss_core(sigmoid(z), cov, a, mask, grad=False)[0], {"z": z}, {"z": dz}, EPS)


def _rerank_loss_case(rng):
    phi = rng.uniform(0.05, 0.95, size=6)
    y = rng.integers(0, 2, size=6).astype(float)
    _, dphi = _rerank_loss_core(phi, y)
    return grad_check(lambda: _rerank_loss_core(phi, y)[0], {"phi": phi}, {"phi": dphi}, EPS)


def _enhancer_loss_case(rng):
    params = ParameterSet()
    gen = Generator(params, "gen", 3, rng)
    h, r, w = rng.normal(size=(2, 3)), rng.normal(size=(2, 3)), rng.uniform(size=2)

    def bw():
        params.zero_grad()
        return {"r": enhancer_loss_and_grad(h, r, gen, w)[1]}

    return check_params(lambda: enhancer_loss_and_grad(h, r, gen, w, backward=False)[0], bw, params, {"r": r}, EPS)


def _reranker_instances(rng, seed):
    ds = micro_synthetic(seed=seed).dataset
    out = []
    for sid in ds.student_ids:
        cs = build_candidate_set(sid, rng.uniform(size=3), ds.catalog, 0.7, int(rng.integers(2, 5)))
        out.append(RerankInstance(sid, rng.normal(size=3), cs, ds.students[sid], rng.integers(0, 2, len(cs)).astype(float)))
    return ds, out


def _reranker_heads_case(rng, seed, use_diversity=True):
    ds, insts = _reranker_instances(rng, seed)
    cfg = RerankerConfig(q_s=2, q_e=2, q_h=3, heads=2, head_hidden=3, pace_window=4, use_diversity=use_diversity, seed=seed)
    m = Reranker(ds.catalog, 3, cfg)
    b = m._batch(insts)
    out, _ = m.forward(b)
    R = {k: rng.normal(size=out[k].shape) for k in ("mu", "sigma", "omega")}

    def fn():
        o = m.forward(b)[0]
        return float(sum(np.sum(R[k] * o[k]) for k in R))

    def bw():
        m.params.zero_grad()
        _, cache = m.forward(b)
        m.backward(R["mu"], R["sigma"], cache, R["omega"])

    return check_params(fn, bw, m.params, eps=EPS, floor=noise_floor(fn(), EPS))


def _reranker_loss_case(rng, seed, prob=True):
    ds, insts = _reranker_instances(rng, seed)
    cfg = RerankerConfig(q_s=2, q_e=2, q_h=3, heads=2, head_hidden=3, pace_window=4, seed=seed)
    m = Reranker(ds.catalog, 3, cfg)
    L = max(len(i.candidates) for i in insts)
    xi = rng.normal(size=(len(insts), L)) * 0.5 if prob else None

    def bw():
        m.params.zero_grad()
        m.batch_loss(insts, xi)

    fn = lambda: m.batch_loss(insts, xi, backward=False)  # noqa: E731
    # pace parameters reach the loss with ~1e-8 gradients; their exact check is the functional case
    return check_params(fn, bw, m.params, eps=EPS, floor=noise_floor(fn(), EPS))


def _kcmp_joint_case(rng, seed, lam):
    ds = micro_synthetic(seed=seed, n_students=5, n_exercises=5).dataset
    m = MasteryPredictor(ds.catalog, EnhancerConfig(dim=3, embed_dim=2, truncation=2), KcmpConfig(hidden=3, seed=seed))
    seqs = list(ds.students.values())
    active = rng.uniform(size=len(seqs)) < 0.5
    active[0] = True
    target = rng.normal(size=(int(active.sum()), 3))
    lens = [len(s) for s in seqs]
    args = (seqs, active, (1, 4), (min(lens), max(lens) + 1), lam)

    def bw():
        m.params.zero_grad()
        m.batch_loss(*args, enhancer_target=target)

    return check_params(lambda: m.batch_loss(*args, backward=False, enhancer_target=target)[0], bw, m.params, eps=EPS)


CHEAP = {
    "mlstm_step": _mlstm_step_case,
    "mlstm_layer": _MLSTM,
    "lstm": _LSTM,
    "bilstm": _BILSTM,
    "attention": _ATTN,
    "mlp_sigmoid": _mlp("sigmoid"),
    "mlp_softplus": _mlp("softplus"),
    "mlp_identity": _mlp("identity"),
    "kcmp_loss": _kcmp_loss_case,
    "rerank_loss": _rerank_loss_case,
    "enhancer_loss": _enhancer_loss_case,
}
CHEAP_SEEDS = range(8)


def all_cases():
    """(name, seed, thunk) for every micro-instance in the suite."""
    out = [(name, s, (lambda f=f, s=s: f(np.random.default_rng([s, 11])))) for name, f in CHEAP.items() for s in CHEAP_SEEDS]
    for s in range(3):
        out.append(("reranker_heads", s, lambda s=s: _reranker_heads_case(np.random.default_rng([s, 12]), s)))
        out.append(("reranker_heads_relevance_only", s, lambda s=s: _reranker_heads_case(np.random.default_rng([s, 13]), s, False)))
        out.append(("reranker_loss_prob", s, lambda s=s: _reranker_loss_case(np.random.default_rng([s, 14]), s)))
        out.append(("reranker_loss_det", s, lambda s=s: _reranker_loss_case(np.random.default_rng([s, 15]), s, False)))
        out.append(("kcmp_joint", s, lambda s=s: _kcmp_joint_case(np.random.default_rng([s, 16]), s, 0.7)))
        out.append(("kcmp_only", s, lambda s=s: _kcmp_joint_case(np.random.default_rng([s, 17]), s, 0.0)))
    return out


def test_case_count():
    assert len(all_cases()) >= 100


@pytest.mark.parametrize("name,seed,case", all_cases(), ids=lambda v: v if isinstance(v, (str, int)) else "")
def test_gradient(name, seed, case):
    assert case() <= TOL
