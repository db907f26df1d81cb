"""LSTM, bidirectional LSTM and matrix-memory LSTM with analytic backward passes.

Sequences are time-major arrays ``(T, B, D)``. An optional ``mask`` of shape
``(T, B)`` marks valid steps; on masked steps the recurrent state is carried
over unchanged, so the state after the last step is the state after each
sequence's last valid element.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import EmptyInputError, NumericError, ShapeError
from .functional import log_sigmoid, sigmoid
from .params import ParameterSet


def _as_mask(mask, T, B):
    if mask is None:
        return np.ones((T, B))
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != (T, B):
        raise ShapeError(f"mask shape {mask.shape} != {(T, B)}")
    return mask


def lengths_to_mask(lengths, T=None):
    lengths = np.asarray(lengths, dtype=np.int64)
    T = int(lengths.max()) if T is None else T
    return (np.arange(T)[:, None] < lengths[None, :]).astype(np.float64)


def pad_sequences(seqs, dim=None):
    """Stack a list of ``(len_i, D)`` arrays into ``(T, B, D)`` plus a mask."""
    if not seqs:
        raise EmptyInputError("no sequences")
    lengths = np.array([len(s) for s in seqs])
    if np.any(lengths == 0):
        raise EmptyInputError("empty sequence in batch")
    D = seqs[0].shape[-1] if dim is None else dim
    T = int(lengths.max())
    out = np.zeros((T, len(seqs), D))
    for b, s in enumerate(seqs):
        out[: len(s), b] = s
    return out, lengths_to_mask(lengths, T), lengths


@dataclass
class LstmState:
    hidden: np.ndarray
    cell: np.ndarray


class LSTM:
    """Single-layer LSTM with gate order (input, forget, candidate, output)."""

    def __init__(self, params: ParameterSet, name: str, n_in: int, n_hidden: int, rng):
        self.name = name
        self.n_in = n_in
        self.n_hidden = n_hidden
        H = n_hidden
        self.Wx = params.uniform(f"{name}.Wx", (n_in, 4 * H), n_in, rng)
        self.Wh = params.uniform(f"{name}.Wh", (H, 4 * H), H, rng)
        self.b = params.uniform(f"{name}.b", (4 * H,), H, rng)

    def forward(self, xs, mask=None, h0=None, c0=None):
        xs = np.asarray(xs, dtype=np.float64)
        if xs.ndim != 3 or xs.shape[0] == 0:
            raise EmptyInputError(f"{self.name}: expected non-empty (T, B, D) input, got {xs.shape}")
        T, B, D = xs.shape
        if D != self.n_in:
            raise ShapeError(f"{self.name}: input dim {D} != {self.n_in}")
        H = self.n_hidden
        m = _as_mask(mask, T, B)
        h = np.zeros((B, H)) if h0 is None else np.asarray(h0, dtype=np.float64)
        c = np.zeros((B, H)) if c0 is None else np.asarray(c0, dtype=np.float64)
        # input projection for all steps at once
        zx = xs @ self.Wx.value + self.b.value
        Wh = self.Wh.value
        hs = np.empty((T, B, H))
        cs = np.empty((T, B, H))
        h_prev = np.empty((T, B, H))
        c_prev = np.empty((T, B, H))
        gates = np.empty((T, B, 4 * H))
        tanh_c = np.empty((T, B, H))
        for t in range(T):
            h_prev[t] = h
            c_prev[t] = c
            z = zx[t] + h @ Wh
            g = np.empty_like(z)
            g[:, : 2 * H] = sigmoid(z[:, : 2 * H])
            g[:, 2 * H : 3 * H] = np.tanh(z[:, 2 * H : 3 * H])
            g[:, 3 * H :] = sigmoid(z[:, 3 * H :])
            i, f, gg, o = g[:, :H], g[:, H : 2 * H], g[:, 2 * H : 3 * H], g[:, 3 * H :]
            cn = f * c + i * gg
            tc = np.tanh(cn)
            hn = o * tc
            mt = m[t][:, None]
            c = mt * cn + (1.0 - mt) * c
            h = mt * hn + (1.0 - mt) * h
            hs[t] = h
            cs[t] = c
            gates[t] = g
            tanh_c[t] = tc
        cache = (xs, m, h_prev, c_prev, gates, tanh_c)
        return hs, cs, cache

    def backward(self, dhs, cache, dh_last=None, dc_last=None):
        """Backpropagate ``dL/dhs``; returns ``(dxs, dh0, dc0)``."""
        xs, m, h_prev, c_prev, gates, tanh_c = cache
        T, B, _ = xs.shape
        H = self.n_hidden
        Wh = self.Wh.value
        dz_all = np.empty((T, B, 4 * H))
        dh = np.zeros((B, H)) if dh_last is None else dh_last.copy()
        dc = np.zeros((B, H)) if dc_last is None else dc_last.copy()
        for t in range(T - 1, -1, -1):
            dh = dh + dhs[t]
            mt = m[t][:, None]
            g = gates[t]
            i, f, gg, o = g[:, :H], g[:, H : 2 * H], g[:, 2 * H : 3 * H], g[:, 3 * H :]
            tc = tanh_c[t]
            dhn = mt * dh
            dcn = mt * dc + dhn * o * (1.0 - tc * tc)
            dz = np.empty((B, 4 * H))
            dz[:, :H] = dcn * gg * i * (1.0 - i)
            dz[:, H : 2 * H] = dcn * c_prev[t] * f * (1.0 - f)
            dz[:, 2 * H : 3 * H] = dcn * i * (1.0 - gg * gg)
            dz[:, 3 * H :] = dhn * tc * o * (1.0 - o)
            dz_all[t] = dz
            dc = dcn * f + (1.0 - mt) * dc
            dh = dz @ Wh.T + (1.0 - mt) * dh
        dz2 = dz_all.reshape(T * B, 4 * H)
        self.Wx.grad += xs.reshape(T * B, -1).T @ dz2
        self.Wh.grad += h_prev.reshape(T * B, H).T @ dz2
        self.b.grad += dz2.sum(axis=0)
        dxs = dz_all @ self.Wx.value.T
        return dxs, dh, dc


def lstm_forward(lstm: LSTM, seq) -> list[LstmState]:
    """Run ``lstm`` over a single sequence given as a list of vectors."""
    if len(seq) == 0:
        raise EmptyInputError("empty sequence")
    xs = np.asarray(seq, dtype=np.float64)[:, None, :]
    hs, cs, _ = lstm.forward(xs)
    return [LstmState(hs[t, 0].copy(), cs[t, 0].copy()) for t in range(len(seq))]


def _reverse_index(lengths, T):
    t = np.arange(T)[:, None]
    n = np.asarray(lengths)[None, :]
    return np.where(t < n, n - 1 - t, t)


class BiLSTM:
    """Forward and backward LSTMs whose per-step outputs are concatenated."""

    def __init__(self, params: ParameterSet, name: str, n_in: int, n_hidden: int, rng):
        self.name = name
        self.n_hidden = n_hidden
        self.fwd = LSTM(params, f"{name}.fwd", n_in, n_hidden, rng)
        self.bwd = LSTM(params, f"{name}.bwd", n_in, n_hidden, rng)

    def forward(self, xs, lengths=None):
        xs = np.asarray(xs, dtype=np.float64)
        if xs.ndim != 3 or xs.shape[0] == 0:
            raise EmptyInputError(f"{self.name}: empty input")
        T, B, _ = xs.shape
        lengths = np.full(B, T) if lengths is None else np.asarray(lengths)
        mask = lengths_to_mask(lengths, T)
        rev = _reverse_index(lengths, T)
        cols = np.arange(B)[None, :]
        hf, _, cf = self.fwd.forward(xs, mask)
        hb_r, _, cb = self.bwd.forward(xs[rev, cols], mask)
        hb = hb_r[rev, cols]
        out = np.concatenate([hf, hb], axis=-1) * mask[:, :, None]
        return out, (cf, cb, rev, mask)

    def backward(self, dout, cache):
        cf, cb, rev, mask = cache
        H = self.n_hidden
        B = dout.shape[1]
        cols = np.arange(B)[None, :]
        dout = dout * mask[:, :, None]
        dxf, _, _ = self.fwd.backward(dout[..., :H], cf)
        dxr, _, _ = self.bwd.backward(dout[..., H:][rev, cols], cb)
        return dxf + dxr[rev, cols]


def bilstm_forward(bilstm: BiLSTM, seq) -> list[np.ndarray]:
    if len(seq) == 0:
        raise EmptyInputError("empty sequence")
    xs = np.asarray(seq, dtype=np.float64)[:, None, :]
    out, _ = bilstm.forward(xs)
    return [out[t, 0].copy() for t in range(len(seq))]


# --------------------------------------------------------------------------
# matrix memory


@dataclass
class MlstmState:
    """Matrix-memory state. Arrays may carry leading batch dimensions."""

    cell: np.ndarray
    normalizer: np.ndarray
    stabilizer: np.ndarray | float = 0.0

    @classmethod
    def zeros(cls, d, batch=None):
        if batch is None:
            return cls(np.zeros((d, d)), np.zeros(d), 0.0)
        return cls(np.zeros((batch, d, d)), np.zeros((batch, d)), np.zeros(batch))


def _mlstm_readout(cell, normalizer, query, stabilizer):
    num = np.einsum("...ij,...j->...i", cell, query)
    s = np.einsum("...i,...i->...", normalizer, query)
    den = np.maximum(np.abs(s), np.exp(-np.asarray(stabilizer, dtype=np.float64)))
    return num, s, den


def mlstm_step(state: MlstmState, key, value, query, forget, input, output, stabilizer=None):
    """One covariance-rule update followed by the normalised query readout.

    ``forget`` and ``input`` are activated gate values (one scalar per batch
    element), ``output`` is the activated output gate (same shape as ``value``).
    ``stabilizer`` is the new log-scale stabiliser; when omitted the previous
    one is kept, and with the default of 0 the readout denominator is
    ``max(|n.q|, 1)``.
    """
    key = np.asarray(key, dtype=np.float64)
    value = np.asarray(value, dtype=np.float64)
    query = np.asarray(query, dtype=np.float64)
    d = state.cell.shape[-1]
    for nm, v in (("key", key), ("value", value), ("query", query)):
        if v.shape[-1] != d or v.shape != state.normalizer.shape:
            raise ShapeError(f"{nm} shape {v.shape} incompatible with state dim {d}")
    f = np.asarray(forget, dtype=np.float64)
    i = np.asarray(input, dtype=np.float64)
    if not (np.all(np.isfinite(f)) and np.all(np.isfinite(i)) and np.all(np.isfinite(output))):
        raise NumericError("non-finite gate value")
    stab = state.stabilizer if stabilizer is None else stabilizer
    cell = f[..., None, None] * state.cell + i[..., None, None] * (value[..., :, None] * key[..., None, :])
    norm = f[..., None] * state.normalizer + i[..., None] * key
    num, _, den = _mlstm_readout(cell, norm, query, stab)
    out = output * num / den[..., None]
    return MlstmState(cell, norm, stab), out


def mlstm_step_backward(prev: MlstmState, new: MlstmState, key, value, query, forget, input, output, d_out, d_cell, d_norm):
    """Gradients of one :func:`mlstm_step` with the stabiliser held constant.

    ``d_cell``/``d_norm`` are gradients flowing into the new state from later
    steps. Returns a dict with entries for the previous state, key, value,
    query and the three gates.
    """
    f = np.asarray(forget, dtype=np.float64)
    i = np.asarray(input, dtype=np.float64)
    num, s, den = _mlstm_readout(new.cell, new.normalizer, query, new.stabilizer)
    h_tilde = num / den[..., None]
    d_o = d_out * h_tilde
    dh = d_out * output
    dnum = dh / den[..., None]
    dden = -np.sum(dh * num, axis=-1) / (den * den)
    active = np.abs(s) >= np.exp(-np.asarray(new.stabilizer, dtype=np.float64))
    ds = np.where(active, dden * np.sign(s), 0.0)
    dC = d_cell + dnum[..., :, None] * query[..., None, :]
    dn = d_norm + ds[..., None] * query
    dq = np.einsum("...ij,...i->...j", new.cell, dnum) + ds[..., None] * new.normalizer
    df = np.einsum("...ij,...ij->...", dC, prev.cell) + np.einsum("...i,...i->...", dn, prev.normalizer)
    Ck = np.einsum("...ij,...j->...i", dC, key)
    di = np.einsum("...i,...i->...", value, Ck) + np.einsum("...i,...i->...", dn, key)
    dv = i[..., None] * Ck
    dk = i[..., None] * (np.einsum("...ij,...i->...j", dC, value) + dn)
    return {
        "cell": f[..., None, None] * dC,
        "normalizer": f[..., None] * dn,
        "key": dk,
        "value": dv,
        "query": dq,
        "forget": df,
        "input": di,
        "output": d_o,
    }


class MLSTM:
    """Single-head matrix-memory LSTM layer.

    Gates: sigmoid forget, exponential input, sigmoid output. The exponential
    input gate is kept in range with a running log-scale stabiliser; the
    readout is invariant to the stabiliser, so it is treated as a constant in
    the backward pass.
    """

    def __init__(self, params: ParameterSet, name: str, n_in: int, dim: int, rng, forget_bias: float = 3.0):
        self.name = name
        self.n_in = n_in
        self.dim = dim
        self.Wq = params.uniform(f"{name}.Wq", (n_in, dim), n_in, rng)
        self.bq = params.uniform(f"{name}.bq", (dim,), n_in, rng)
        self.Wk = params.uniform(f"{name}.Wk", (n_in, dim), n_in, rng)
        self.bk = params.uniform(f"{name}.bk", (dim,), n_in, rng)
        self.Wv = params.uniform(f"{name}.Wv", (n_in, dim), n_in, rng)
        self.bv = params.uniform(f"{name}.bv", (dim,), n_in, rng)
        self.Wo = params.uniform(f"{name}.Wo", (n_in, dim), n_in, rng)
        self.bo = params.uniform(f"{name}.bo", (dim,), n_in, rng)
        # input/forget gate pre-activations: column 0 input, column 1 forget
        self.Wg = params.uniform(f"{name}.Wg", (n_in, 2), n_in, rng)
        bg = params.uniform(f"{name}.bg", (2,), n_in, rng)
        bg.value[1] += forget_bias
        self.bg = bg

    def _project(self, xs):
        scale = 1.0 / np.sqrt(self.dim)
        q = xs @ self.Wq.value + self.bq.value
        k = (xs @ self.Wk.value + self.bk.value) * scale
        v = xs @ self.Wv.value + self.bv.value
        o = sigmoid(xs @ self.Wo.value + self.bo.value)
        g = xs @ self.Wg.value + self.bg.value
        return q, k, v, o, g

    def forward(self, xs, mask=None):
        xs = np.asarray(xs, dtype=np.float64)
        if xs.ndim != 3 or xs.shape[0] == 0:
            raise EmptyInputError(f"{self.name}: expected non-empty (T, B, D) input")
        T, B, D = xs.shape
        if D != self.n_in:
            raise ShapeError(f"{self.name}: input dim {D} != {self.n_in}")
        d = self.dim
        m = _as_mask(mask, T, B)
        q, k, v, o, g = self._project(xs)
        i_pre, f_pre = g[..., 0], g[..., 1]
        log_f = log_sigmoid(f_pre)
        cells = np.empty((T + 1, B, d, d))
        norms = np.empty((T + 1, B, d))
        stabs = np.empty((T + 1, B))
        fg = np.empty((T, B))
        ig = np.empty((T, B))
        cells[0] = 0.0
        norms[0] = 0.0
        stabs[0] = 0.0
        out = np.empty((T, B, d))
        state = MlstmState(cells[0], norms[0], stabs[0])
        for t in range(T):
            valid = m[t] > 0
            m_prev = stabs[t]
            m_new = np.where(valid, np.maximum(log_f[t] + m_prev, i_pre[t]), m_prev)
            f_t = np.where(valid, np.exp(log_f[t] + m_prev - m_new), 1.0)
            i_t = np.where(valid, np.exp(i_pre[t] - m_new), 0.0)
            state, out[t] = mlstm_step(state, k[t], v[t], q[t], f_t, i_t, o[t], stabilizer=m_new)
            cells[t + 1] = state.cell
            norms[t + 1] = state.normalizer
            stabs[t + 1] = m_new
            fg[t] = f_t
            ig[t] = i_t
        out *= m[:, :, None]
        cache = (xs, m, q, k, v, o, f_pre, cells, norms, stabs, fg, ig)
        return out, cache

    def backward(self, dout, cache):
        xs, m, q, k, v, o, f_pre, cells, norms, stabs, fg, ig = cache
        T, B, _ = xs.shape
        d = self.dim
        dout = dout * m[:, :, None]
        dq = np.empty_like(q)
        dk = np.empty_like(k)
        dv = np.empty_like(v)
        do = np.empty_like(o)
        dg = np.empty((T, B, 2))
        dC = np.zeros((B, d, d))
        dn = np.zeros((B, d))
        sig_f = sigmoid(f_pre)
        for t in range(T - 1, -1, -1):
            prev = MlstmState(cells[t], norms[t], stabs[t])
            new = MlstmState(cells[t + 1], norms[t + 1], stabs[t + 1])
            g = mlstm_step_backward(prev, new, k[t], v[t], q[t], fg[t], ig[t], o[t], dout[t], dC, dn)
            dC, dn = g["cell"], g["normalizer"]
            dq[t], dk[t], dv[t], do[t] = g["query"], g["key"], g["value"], g["output"]
            mt = m[t]
            # i' = exp(i_pre - m), f' = exp(log_sigmoid(f_pre) + m_prev - m)
            dg[t, :, 0] = g["input"] * ig[t] * mt
            dg[t, :, 1] = g["forget"] * fg[t] * (1.0 - sig_f[t]) * mt
        dk *= 1.0 / np.sqrt(d)
        do_pre = do * o * (1.0 - o)
        X = xs.reshape(T * B, -1)
        dx = np.zeros_like(xs)
        for W, b, dy in (
            (self.Wq, self.bq, dq),
            (self.Wk, self.bk, dk),
            (self.Wv, self.bv, dv),
            (self.Wo, self.bo, do_pre),
            (self.Wg, self.bg, dg),
        ):
            dy2 = dy.reshape(T * B, -1)
            W.grad += X.T @ dy2
            b.grad += dy2.sum(axis=0)
            dx += dy @ W.value.T
        return dx
