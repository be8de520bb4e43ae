"""LSTM cell, sequence forward pass, dropout masks, and backpropagation through time.

The cell follows the standard formulation with four gates:

    g = tanh(W_gx x + W_gh h + b_g)     candidate update
    i = sigma(W_ix x + W_ih h + b_i)    input gate
    f = sigma(W_fx x + W_fh h + b_f)    forget gate
    o = sigma(W_ox x + W_oh h + b_o)    output gate
    s' = g * i + s * f                  cell state
    h' = tanh(s') * o                   hidden state
    y  = W_hy h' + b_y                  linear readout

All arithmetic is float64. Sequences may be a single (rho, input) matrix or a
batch tensor (batch, rho, input); batch gradients are accumulated by the
matrix products themselves, in fixed instance order, so results do not depend
on evaluation order.

This module also hosts the small numeric kernel (stable sigmoid, seeded RNG
construction) shared by the rest of the toolkit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ValidationError

DROPOUT_VARIANTS = ("none", "non_recurrent", "recurrent_constant", "memory_cell")

# Gate order used everywhere a fused (4*hidden, ...) buffer appears.
GATE_ORDER = ("g", "i", "f", "o")


def make_rng(seed) -> np.random.Generator:
    """Return a Generator; ints/SeedSequences are wrapped, Generators pass through."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def sigmoid(z):
    """Numerically stable logistic function, elementwise."""
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _require_finite(arr, what: str):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")


@dataclass
class LstmWeights:
    """All weight matrices and bias vectors of the cell plus the output layer.

    Matrices are row-major with shapes (hidden, input) for the x paths,
    (hidden, hidden) for the h paths and (output, hidden) for the readout.
    The same container doubles as the gradient holder returned by
    :func:`bptt_gradients`.
    """

    W_gx: np.ndarray
    W_ix: np.ndarray
    W_fx: np.ndarray
    W_ox: np.ndarray
    W_gh: np.ndarray
    W_ih: np.ndarray
    W_fh: np.ndarray
    W_oh: np.ndarray
    b_g: np.ndarray
    b_i: np.ndarray
    b_f: np.ndarray
    b_o: np.ndarray
    W_hy: np.ndarray
    b_y: np.ndarray
    input_size: int
    hidden_size: int
    output_size: int

    ARRAY_FIELDS = (
        "W_gx", "W_ix", "W_fx", "W_ox",
        "W_gh", "W_ih", "W_fh", "W_oh",
        "b_g", "b_i", "b_f", "b_o",
        "W_hy", "b_y",
    )

    def named_arrays(self):
        """Yield (name, array) pairs in a fixed, documented order."""
        for name in self.ARRAY_FIELDS:
            yield name, getattr(self, name)

    def validate(self):
        n_in, n_hid, n_out = self.input_size, self.hidden_size, self.output_size
        if min(n_in, n_hid, n_out) < 1:
            raise ValidationError("all layer sizes must be >= 1")
        expect = {
            "W_gx": (n_hid, n_in), "W_ix": (n_hid, n_in),
            "W_fx": (n_hid, n_in), "W_ox": (n_hid, n_in),
            "W_gh": (n_hid, n_hid), "W_ih": (n_hid, n_hid),
            "W_fh": (n_hid, n_hid), "W_oh": (n_hid, n_hid),
            "b_g": (n_hid,), "b_i": (n_hid,), "b_f": (n_hid,), "b_o": (n_hid,),
            "W_hy": (n_out, n_hid), "b_y": (n_out,),
        }
        for name, arr in self.named_arrays():
            if arr.shape != expect[name]:
                raise ValidationError(
                    f"{name} has shape {arr.shape}, expected {expect[name]}")
            _require_finite(arr, name)
        return self

    @classmethod
    def zeros(cls, input_size: int, hidden_size: int, output_size: int) -> "LstmWeights":
        h, i, o = hidden_size, input_size, output_size
        return cls(
            W_gx=np.zeros((h, i)), W_ix=np.zeros((h, i)),
            W_fx=np.zeros((h, i)), W_ox=np.zeros((h, i)),
            W_gh=np.zeros((h, h)), W_ih=np.zeros((h, h)),
            W_fh=np.zeros((h, h)), W_oh=np.zeros((h, h)),
            b_g=np.zeros(h), b_i=np.zeros(h), b_f=np.zeros(h), b_o=np.zeros(h),
            W_hy=np.zeros((o, h)), b_y=np.zeros(o),
            input_size=i, hidden_size=h, output_size=o,
        )

    def copy(self) -> "LstmWeights":
        out = LstmWeights.zeros(self.input_size, self.hidden_size, self.output_size)
        for name, arr in self.named_arrays():
            setattr(out, name, arr.copy())
        return out


@dataclass
class LstmState:
    """Hidden state h and cell state s of one sequence (or a batch of them)."""

    h: np.ndarray
    s: np.ndarray

    @classmethod
    def zeros(cls, hidden_size: int, batch: int | None = None) -> "LstmState":
        shape = (hidden_size,) if batch is None else (batch, hidden_size)
        return cls(h=np.zeros(shape), s=np.zeros(shape))


@dataclass
class DropoutSpec:
    """Which dropout masks to sample and at what rate.

    variant "non_recurrent" resamples an input mask every step,
    "recurrent_constant" samples one hidden-to-gate mask per sequence,
    "memory_cell" masks the candidate node g every step, "none" is identity.
    """

    variant: str = "none"
    rate: float = 0.0

    def validate(self):
        if self.variant not in DROPOUT_VARIANTS:
            raise ValidationError(
                f"unknown dropout variant {self.variant!r}; expected one of {DROPOUT_VARIANTS}")
        if not (0.0 <= self.rate < 1.0):
            raise ValidationError(f"dropout rate must lie in [0, 1), got {self.rate}")
        return self

    @property
    def is_identity(self) -> bool:
        return self.variant == "none" or self.rate == 0.0


class DropoutMasks:
    """Sampled masks for one forward pass. A ``None`` path means all-ones.

    Masks use inverted scaling: kept entries equal 1/(1-rate) so the
    expectation of a masked value equals the unmasked value.
    """

    def __init__(self, x=None, h=None, g=None, rho: int = 0):
        self.x = x          # (rho, ..., input) resampled each step
        self.h = h          # (..., hidden) constant across the sequence
        self.g = g          # (rho, ..., hidden) resampled each step
        self.rho = rho

    def x_at(self, t: int):
        return None if self.x is None else self.x[t]

    def g_at(self, t: int):
        return None if self.g is None else self.g[t]

    @property
    def is_identity(self) -> bool:
        return self.x is None and self.h is None and self.g is None


IDENTITY_MASKS = DropoutMasks()


def _apply(value, mask):
    return value if mask is None else value * mask


def init_weights(input_size: int, hidden_size: int, output_size: int, seed) -> LstmWeights:
    """Sample initial weights uniformly in +-1/sqrt(hidden); forget bias 1, other biases 0."""
    if min(input_size, hidden_size, output_size) < 1:
        raise ValidationError("layer sizes must be positive")
    rng = make_rng(seed)
    bound = 1.0 / np.sqrt(hidden_size)
    w = LstmWeights.zeros(input_size, hidden_size, output_size)
    # Fixed sampling order for seed determinism.
    for name in ("W_gx", "W_ix", "W_fx", "W_ox", "W_gh", "W_ih", "W_fh", "W_oh", "W_hy"):
        shape = getattr(w, name).shape
        setattr(w, name, rng.uniform(-bound, bound, size=shape))
    w.b_f = np.ones(hidden_size)
    return w.validate()


def sample_dropout_masks(spec: DropoutSpec, input_size: int, hidden_size: int,
                         rho: int, seed, batch: int | None = None) -> DropoutMasks:
    """Sample the mask set for one forward pass of length rho.

    For batch evaluation each instance gets independent masks. Identity
    variants (variant "none" or rate 0) consume no random numbers.
    """
    spec.validate()
    if rho < 1:
        raise ValidationError(f"sequence length must be >= 1, got {rho}")
    if spec.is_identity:
        return DropoutMasks(rho=rho)
    rng = make_rng(seed)
    keep = 1.0 - spec.rate

    def bernoulli(shape):
        return (rng.random(shape) >= spec.rate).astype(float) / keep

    inst = () if batch is None else (batch,)
    if spec.variant == "non_recurrent":
        return DropoutMasks(x=bernoulli((rho, *inst, input_size)), rho=rho)
    if spec.variant == "recurrent_constant":
        return DropoutMasks(h=bernoulli((*inst, hidden_size)), rho=rho)
    # memory_cell: per-step mask on the candidate node.
    return DropoutMasks(g=bernoulli((rho, *inst, hidden_size)), rho=rho)


class _Fused:
    """Gate weights stacked into (4*hidden, .) buffers; one matmul per path per step."""

    def __init__(self, w: LstmWeights):
        self.Wx = np.concatenate([w.W_gx, w.W_ix, w.W_fx, w.W_ox], axis=0)
        self.Wh = np.concatenate([w.W_gh, w.W_ih, w.W_fh, w.W_oh], axis=0)
        self.b = np.concatenate([w.b_g, w.b_i, w.b_f, w.b_o])
        self.W_hy = w.W_hy
        self.b_y = w.b_y
        self.H = w.hidden_size


def _fused_step(fw: _Fused, xd, hd, s_prev, mg):
    """One cell update on pre-masked inputs; returns gate activations and new state."""
    H = fw.H
    a = xd @ fw.Wx.T + hd @ fw.Wh.T + fw.b
    g = np.tanh(a[..., :H])
    i = sigmoid(a[..., H:2 * H])
    f = sigmoid(a[..., 2 * H:3 * H])
    o = sigmoid(a[..., 3 * H:])
    s = _apply(g, mg) * i + s_prev * f
    h = np.tanh(s) * o
    return g, i, f, o, s, h


@dataclass
class ForwardCache:
    """Everything needed to replay the forward pass exactly and run BPTT.

    Stacked arrays are time-major: shape (rho, dim) for a single sequence or
    (rho, batch, dim) for a batch.
    """

    x: np.ndarray
    masks: DropoutMasks
    h0: np.ndarray
    s0: np.ndarray
    g: np.ndarray
    i: np.ndarray
    f: np.ndarray
    o: np.ndarray
    s: np.ndarray
    h: np.ndarray
    y: np.ndarray
    input_size: int
    hidden_size: int
    output_size: int

    @property
    def rho(self) -> int:
        return self.x.shape[0]


def lstm_step(w: LstmWeights, x_t: np.ndarray, state: LstmState,
              masks: DropoutMasks | None = None, t: int = 0):
    """Advance the cell one step; returns (new state, output y_t, gate record).

    The gate record is a dict of the transient activations g, i, f, o for
    callers assembling their own caches.
    """
    x_t = np.asarray(x_t, dtype=float)
    if x_t.shape[-1] != w.input_size:
        raise ValidationError(
            f"input length {x_t.shape[-1]} does not match input_size {w.input_size}")
    if state.h.shape[-1] != w.hidden_size or state.s.shape[-1] != w.hidden_size:
        raise ValidationError("state dimensions do not match hidden_size")
    _require_finite(x_t, "x_t")
    masks = masks or IDENTITY_MASKS
    fw = _Fused(w)
    xd = _apply(x_t, masks.x_at(t))
    hd = _apply(state.h, masks.h)
    g, i, f, o, s, h = _fused_step(fw, xd, hd, state.s, masks.g_at(t))
    y = h @ fw.W_hy.T + fw.b_y
    return LstmState(h=h, s=s), y, {"g": g, "i": i, "f": f, "o": o}


def forward_sequence(w: LstmWeights, X: np.ndarray, initial_state: LstmState | None = None,
                     spec: DropoutSpec | None = None, seed=None,
                     masks: DropoutMasks | None = None):
    """Run the cell over a whole sequence (or batch of sequences).

    X has shape (rho, input) or (batch, rho, input). Masks are sampled from
    ``spec``/``seed`` unless given explicitly; passing the masks from a cache
    replays a previous pass bit-exactly. Returns (Y, ForwardCache).
    """
    X = np.asarray(X, dtype=float)
    if X.ndim not in (2, 3):
        raise ValidationError(f"X must be 2-D or 3-D, got shape {X.shape}")
    batched = X.ndim == 3
    rho = X.shape[1] if batched else X.shape[0]
    if rho < 1:
        raise ValidationError("sequence length must be >= 1")
    if X.shape[-1] != w.input_size:
        raise ValidationError(
            f"input width {X.shape[-1]} does not match input_size {w.input_size}")
    _require_finite(X, "X")

    n_batch = X.shape[0] if batched else None
    if masks is None:
        if spec is None or spec.is_identity:
            masks = DropoutMasks(rho=rho)
        else:
            masks = sample_dropout_masks(spec, w.input_size, w.hidden_size,
                                         rho, seed, batch=n_batch)

    if initial_state is None:
        initial_state = LstmState.zeros(w.hidden_size, batch=n_batch)
    h, s = initial_state.h, initial_state.s

    inst = (n_batch,) if batched else ()
    H, O = w.hidden_size, w.output_size
    G = np.empty((rho, *inst, H))
    I = np.empty_like(G)
    F = np.empty_like(G)
    Og = np.empty_like(G)
    S = np.empty_like(G)
    Hs = np.empty_like(G)
    Y = np.empty((rho, *inst, O))

    fw = _Fused(w)
    hd_const = masks.h
    x_tm = np.swapaxes(X, 0, 1) if batched else X  # time-major view
    for t in range(rho):
        xd = _apply(x_tm[t], masks.x_at(t))
        hd = _apply(h, hd_const)
        g, i, f, o, s, h = _fused_step(fw, xd, hd, s, masks.g_at(t))
        G[t], I[t], F[t], Og[t], S[t], Hs[t] = g, i, f, o, s, h
        Y[t] = h @ fw.W_hy.T + fw.b_y

    cache = ForwardCache(
        x=x_tm.copy(), masks=masks, h0=initial_state.h, s0=initial_state.s,
        g=G, i=I, f=F, o=Og, s=S, h=Hs, y=Y,
        input_size=w.input_size, hidden_size=w.hidden_size, output_size=w.output_size,
    )
    Y_out = np.swapaxes(Y, 0, 1) if batched else Y
    return Y_out, cache


def predict_sequence(w: LstmWeights, X: np.ndarray,
                     initial_state: LstmState | None = None,
                     return_final_state: bool = False):
    """Mask-free evaluation forward pass that keeps no cache (long sequences).

    With ``return_final_state`` the result is (Y, LstmState), e.g. for
    spin-up passes that only need the terminal state.
    """
    X = np.asarray(X, dtype=float)
    batched = X.ndim == 3
    if X.shape[-1] != w.input_size:
        raise ValidationError(
            f"input width {X.shape[-1]} does not match input_size {w.input_size}")
    _require_finite(X, "X")
    n_batch = X.shape[0] if batched else None
    state = initial_state or LstmState.zeros(w.hidden_size, batch=n_batch)
    h, s = state.h, state.s
    rho = X.shape[1] if batched else X.shape[0]
    fw = _Fused(w)
    x_tm = np.swapaxes(X, 0, 1) if batched else X
    Y = np.empty((rho, *(x_tm.shape[1:-1]), w.output_size))
    for t in range(rho):
        _, _, _, _, s, h = _fused_step(fw, x_tm[t], h, s, None)
        Y[t] = h @ fw.W_hy.T + fw.b_y
    Y = np.swapaxes(Y, 0, 1) if batched else Y
    if return_final_state:
        return Y, LstmState(h=h, s=s)
    return Y


def _outer_acc(da, v):
    # (..., A) x (..., B) -> (A, B), summed over any leading instance axis.
    if da.ndim == 1:
        return np.outer(da, v)
    return da.T @ v


def _bias_acc(da):
    return da if da.ndim == 1 else da.sum(axis=0)


def bptt_gradients(w: LstmWeights, cache: ForwardCache, dL_dY: np.ndarray) -> LstmWeights:
    """Exact reverse-mode gradients of the cached forward pass.

    dL_dY is (rho, output), (batch, rho, output) matching the forward layout,
    and the returned container has the LstmWeights layout. Dropout masks are
    replayed from the cache.
    """
    if (cache.input_size, cache.hidden_size, cache.output_size) != (
            w.input_size, w.hidden_size, w.output_size):
        raise ValidationError("cache does not match the weight dimensions")
    dL_dY = np.asarray(dL_dY, dtype=float)
    batched = cache.h.ndim == 3
    expected = (cache.rho,) + cache.y.shape[1:]
    if batched:
        if dL_dY.shape != (cache.y.shape[1], cache.rho, cache.output_size):
            raise ValidationError(
                f"dL_dY shape {dL_dY.shape} does not match forward outputs")
        dY = np.swapaxes(dL_dY, 0, 1)
    else:
        if dL_dY.shape != expected:
            raise ValidationError(
                f"dL_dY shape {dL_dY.shape} does not match forward outputs")
        dY = dL_dY

    masks = cache.masks
    grads = LstmWeights.zeros(w.input_size, w.hidden_size, w.output_size)
    fw = _Fused(w)
    H = w.hidden_size

    dWx = np.zeros_like(fw.Wx)
    dWh = np.zeros_like(fw.Wh)
    db = np.zeros_like(fw.b)

    dh_carry = np.zeros_like(cache.h[0])
    ds_carry = np.zeros_like(cache.s[0])

    for t in range(cache.rho - 1, -1, -1):
        dy = dY[t]
        h_t = cache.h[t]
        grads.W_hy += _outer_acc(dy, h_t)
        grads.b_y += _bias_acc(dy)
        dh = dy @ fw.W_hy + dh_carry

        o = cache.o[t]
        tanh_s = np.tanh(cache.s[t])
        do = dh * tanh_s
        ds = dh * o * (1.0 - tanh_s * tanh_s) + ds_carry

        g, i, f = cache.g[t], cache.i[t], cache.f[t]
        mg = masks.g_at(t)
        g_used = _apply(g, mg)
        dg = _apply(ds * i, mg)
        di = ds * g_used
        s_prev = cache.s[t - 1] if t > 0 else cache.s0
        df = ds * s_prev
        ds_carry = ds * f

        # Gate pre-activation gradients, fused in the g,i,f,o order.
        da = np.concatenate([
            dg * (1.0 - g * g),
            di * (i * (1.0 - i)),
            df * (f * (1.0 - f)),
            do * (o * (1.0 - o)),
        ], axis=-1)

        xd = _apply(cache.x[t], masks.x_at(t))
        h_prev = cache.h[t - 1] if t > 0 else cache.h0
        hd = _apply(h_prev, masks.h)
        dWx += _outer_acc(da, xd)
        dWh += _outer_acc(da, hd)
        db += _bias_acc(da)
        dh_carry = _apply(da @ fw.Wh, masks.h)

    grads.W_gx, grads.W_ix, grads.W_fx, grads.W_ox = (
        dWx[:H], dWx[H:2 * H], dWx[2 * H:3 * H], dWx[3 * H:])
    grads.W_gh, grads.W_ih, grads.W_fh, grads.W_oh = (
        dWh[:H], dWh[H:2 * H], dWh[2 * H:3 * H], dWh[3 * H:])
    grads.b_g, grads.b_i, grads.b_f, grads.b_o = (
        db[:H], db[H:2 * H], db[2 * H:3 * H], db[3 * H:])
    return grads
