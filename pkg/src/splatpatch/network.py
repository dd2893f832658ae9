"""Gaussian prediction network: local-feature encoder, K-way splitting
decoders, manual reverse-mode gradients and an Adam optimizer.

Everything is plain numpy with explicit backward passes; parameter arrays
carry the working dtype (float32 for training, float64 for checks).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument, MissingNormals, NonFiniteGradient
from .gaussians import Gaussian2DSet
from .geometry import NeighborIndex, k_nearest_all

LEAKY_SLOPE = 0.01
OPACITY_LOGIT_BIAS = 6.0  # sigmoid(6) ~ 0.9975, stand-in for the infinite logit of opacity 1
SCALE_SHIFT_CLIP = 10.0
DECODER_HEADS = ("x", "s", "c", "n", "a", "o")
HEAD_DIMS = {"x": 3, "s": 2, "c": 27, "n": 3, "a": 1, "o": 1}
INPUT_DIM = 11  # positions 3 + colors 3 + normals 3 + scales 2


@dataclass
class LinearLayerParams:
    weights: np.ndarray  # (out, in)
    biases: np.ndarray   # (out,)


@dataclass
class EncoderBlockParams:
    lin_in: LinearLayerParams    # w_in -> w_out
    lin_mix: LinearLayerParams   # 2*w_out -> w_out (center + neighborhood max)
    lin_skip: LinearLayerParams  # w_in -> w_out residual projection


@dataclass
class EncoderParams:
    blocks: list
    widths: tuple
    neighbor_k: int = 16

    @property
    def out_dim(self) -> int:
        return self.widths[-1]


@dataclass
class DecoderParams:
    heads: dict          # name -> list[LinearLayerParams]
    k_split: int
    hidden_widths: tuple


@dataclass
class ModuleParams:
    encoder: EncoderParams
    decoders: DecoderParams

    @property
    def k_split(self) -> int:
        return self.decoders.k_split

    def spec(self) -> dict:
        return {
            "k_split": self.decoders.k_split,
            "encoder_widths": list(self.encoder.widths),
            "neighbor_k": self.encoder.neighbor_k,
            "decoder_hiddens": list(self.decoders.hidden_widths),
        }


def _he_uniform(rng, n_out, n_in, dtype):
    bound = np.sqrt(6.0 / n_in)
    return LinearLayerParams(
        weights=rng.uniform(-bound, bound, (n_out, n_in)).astype(dtype),
        biases=np.zeros(n_out, dtype=dtype),
    )


def _zero_linear(n_out, n_in, dtype):
    return LinearLayerParams(
        weights=np.zeros((n_out, n_in), dtype=dtype),
        biases=np.zeros(n_out, dtype=dtype),
    )


def make_module_params(
    rng,
    k_split: int = 4,
    encoder_widths=(64, 128, 256, 640),
    decoder_hiddens=(512, 512, 512, 256, 128),
    neighbor_k: int = 16,
    dtype=np.float32,
) -> ModuleParams:
    """Fresh parameters; decoder final layers start at zero so the prediction
    initially reproduces the geometric initialization."""
    if k_split < 1:
        raise InvalidArgument("split count K must be >= 1")
    blocks = []
    w_in = INPUT_DIM
    for w_out in encoder_widths:
        blocks.append(
            EncoderBlockParams(
                lin_in=_he_uniform(rng, w_out, w_in, dtype),
                lin_mix=_he_uniform(rng, w_out, 2 * w_out, dtype),
                lin_skip=_he_uniform(rng, w_out, w_in, dtype),
            )
        )
        w_in = w_out
    encoder = EncoderParams(blocks=blocks, widths=tuple(encoder_widths), neighbor_k=neighbor_k)
    heads = {}
    feat_dim = encoder.out_dim + INPUT_DIM
    for name in DECODER_HEADS:
        layers = []
        w_in = feat_dim
        for w_out in decoder_hiddens:
            layers.append(_he_uniform(rng, w_out, w_in, dtype))
            w_in = w_out
        layers.append(_zero_linear(k_split * HEAD_DIMS[name], w_in, dtype))
        heads[name] = layers
    decoders = DecoderParams(heads=heads, k_split=k_split, hidden_widths=tuple(decoder_hiddens))
    return ModuleParams(encoder=encoder, decoders=decoders)


def named_params(m: ModuleParams):
    """Deterministically ordered (name, array) pairs over all parameters."""
    out = []
    for bi, blk in enumerate(m.encoder.blocks):
        for lname in ("lin_in", "lin_mix", "lin_skip"):
            lin = getattr(blk, lname)
            out.append((f"encoder.block{bi}.{lname}.weights", lin.weights))
            out.append((f"encoder.block{bi}.{lname}.biases", lin.biases))
    for head in DECODER_HEADS:
        for li, lin in enumerate(m.decoders.heads[head]):
            out.append((f"decoder.{head}.layer{li}.weights", lin.weights))
            out.append((f"decoder.{head}.layer{li}.biases", lin.biases))
    return out


def zero_like_params(m: ModuleParams) -> dict:
    return {name: np.zeros_like(arr) for name, arr in named_params(m)}


def _leaky(x):
    return np.where(x > 0, x, LEAKY_SLOPE * x)


def _leaky_grad(x):
    return np.where(x > 0, 1.0, LEAKY_SLOPE).astype(x.dtype)


def _lin_fwd(lin: LinearLayerParams, x):
    return x @ lin.weights.T + lin.biases


def _lin_bwd(lin: LinearLayerParams, x, dout, gacc: dict, name: str):
    gacc[f"{name}.weights"] += dout.T @ x
    gacc[f"{name}.biases"] += dout.sum(axis=0)
    return dout @ lin.weights


def _gather_inputs(init: Gaussian2DSet, dtype):
    """Per-point network inputs in the supplement order: X, C(dc), N, S."""
    dc = init.sh_colors[:, (0, 9, 18)]
    return (
        init.positions.astype(dtype),
        dc.astype(dtype),
        init.normals.astype(dtype),
        init.scales.astype(dtype),
    )


def encode(p: EncoderParams, x, c, n, s, index: NeighborIndex):
    """Per-point features via shared linears, k-NN max aggregation, residual
    projection per block. Returns an (N, out_dim) array."""
    feats, _ = _encode_cached(p, x, c, n, s, index)
    return feats


def _neighbor_ids(p: EncoderParams, x, index: NeighborIndex):
    k = min(p.neighbor_k, index.size)
    ids, _ = k_nearest_all(index, x.astype(np.float64), k=k)
    return ids


def _encode_cached(p: EncoderParams, x, c, n, s, index: NeighborIndex):
    for arr, dim in ((x, 3), (c, 3), (n, 3), (s, 2)):
        if arr.ndim != 2 or arr.shape[1] != dim:
            raise InvalidArgument("encoder input widths must be 3,3,3,2")
    h = np.concatenate([x, c, n, s], axis=1)
    nbr = _neighbor_ids(p, x, index)
    cache = {"nbr": nbr, "blocks": []}
    for blk in p.blocks:
        x_in = h
        pre = _lin_fwd(blk.lin_in, x_in)
        act = _leaky(pre)
        gathered = act[nbr]                      # (N, k, w)
        arg = np.argmax(gathered, axis=1)        # first max wins on ties
        pooled = np.take_along_axis(gathered, arg[:, None, :], axis=1)[:, 0, :]
        cat = np.concatenate([act, pooled], axis=1)
        mix_pre = _lin_fwd(blk.lin_mix, cat)
        h = _leaky(mix_pre) + _lin_fwd(blk.lin_skip, x_in)
        cache["blocks"].append(
            {"x_in": x_in, "pre": pre, "act": act, "arg": arg, "cat": cat, "mix_pre": mix_pre}
        )
    return h, cache


def _encode_backward(p: EncoderParams, cache, dout, gacc):
    nbr = cache["nbr"]
    n_pts, k = nbr.shape
    dh = dout
    for bi in range(len(p.blocks) - 1, -1, -1):
        blk = p.blocks[bi]
        cb = cache["blocks"][bi]
        name = f"encoder.block{bi}"
        dx_in = _lin_bwd(blk.lin_skip, cb["x_in"], dh, gacc, f"{name}.lin_skip")
        dmix_pre = dh * _leaky_grad(cb["mix_pre"])
        dcat = _lin_bwd(blk.lin_mix, cb["cat"], dmix_pre, gacc, f"{name}.lin_mix")
        w = cb["act"].shape[1]
        dact = dcat[:, :w].copy()
        dpool = dcat[:, w:]
        # route pooled gradient to the argmax source rows
        rows = np.take_along_axis(nbr, cb["arg"], axis=1)   # (N, w) point ids
        cols = np.broadcast_to(np.arange(w), (n_pts, w))
        flat = np.bincount(
            (rows * w + cols).ravel(), weights=dpool.ravel().astype(np.float64),
            minlength=n_pts * w,
        )
        dact += flat.reshape(n_pts, w).astype(dact.dtype)
        dpre = dact * _leaky_grad(cb["pre"])
        dx_in = dx_in + _lin_bwd(blk.lin_in, cb["x_in"], dpre, gacc, f"{name}.lin_in")
        dh = dx_in
    return dh  # gradient on the concatenated (x, c, n, s) input


def split_decode(head_layers, features, x, c, n, s, k_split: int):
    """One decoder head: MLP on (F, X, C, N, S), reshaped so rows
    j*K .. j*K+K-1 are the K shifts of point j."""
    out, _ = _decode_cached(head_layers, np.concatenate([features, x, c, n, s], axis=1))
    n_pts = x.shape[0]
    c_dim = out.shape[1] // k_split
    if out.shape[1] != k_split * c_dim:
        raise InvalidArgument("decoder output width is not a multiple of K")
    return out.reshape(n_pts * k_split, c_dim)


def _decode_cached(layers, inp):
    h = inp
    cache = []
    for li, lin in enumerate(layers):
        pre = _lin_fwd(lin, h)
        cache.append({"x": h, "pre": pre})
        h = _leaky(pre) if li < len(layers) - 1 else pre
    return h, cache


def _decode_backward(layers, cache, dout, gacc, name):
    dh = dout
    for li in range(len(layers) - 1, -1, -1):
        if li < len(layers) - 1:
            dh = dh * _leaky_grad(cache[li]["pre"])
        dh = _lin_bwd(layers[li], cache[li]["x"], dh, gacc, f"{name}.layer{li}")
    return dh


def forward_with_cache(m: ModuleParams, init: Gaussian2DSet, index: NeighborIndex):
    """Full prediction pass keeping every intermediate needed for backward."""
    if init.space_tag != "normalized":
        raise InvalidArgument("prediction expects a normalized-space set")
    dtype = m.encoder.blocks[0].lin_in.weights.dtype
    x, c, n, s = _gather_inputs(init, dtype)
    feats, enc_cache = _encode_cached(m.encoder, x, c, n, s, index)
    dec_in = np.concatenate([feats, x, c, n, s], axis=1)
    k = m.decoders.k_split
    n_pts = x.shape[0]
    shifts = {}
    dec_caches = {}
    for head in DECODER_HEADS:
        out, cachef = _decode_cached(m.decoders.heads[head], dec_in)
        dec_caches[head] = cachef
        shifts[head] = out.reshape(n_pts * k, HEAD_DIMS[head])

    rep = lambda a: np.repeat(a, k, axis=0)
    pos = rep(init.positions).astype(np.float64) + shifts["x"].astype(np.float64)
    ds_clip = np.clip(shifts["s"].astype(np.float64), -SCALE_SHIFT_CLIP, SCALE_SHIFT_CLIP)
    scales = rep(init.scales).astype(np.float64) * np.exp(ds_clip)
    sh = rep(init.sh_colors).astype(np.float64) + shifts["c"].astype(np.float64)
    raw_n = rep(init.normals).astype(np.float64) + shifts["n"].astype(np.float64)
    norms = np.linalg.norm(raw_n, axis=1, keepdims=True)
    tiny = norms[:, 0] < 1e-8
    if np.any(tiny):
        raw_n[tiny] = rep(init.normals)[tiny]
        norms[tiny] = 1.0
    normals = raw_n / norms
    angles = rep(init.angles).astype(np.float64) + shifts["a"][:, 0].astype(np.float64)
    logits = shifts["o"][:, 0].astype(np.float64) + OPACITY_LOGIT_BIAS
    opac = 1.0 / (1.0 + np.exp(-logits))

    predicted = Gaussian2DSet(
        positions=pos, scales=scales, opacities=opac, sh_colors=sh,
        normals=normals, angles=angles, space_tag="normalized",
    )
    cache = {
        "inputs": (x, c, n, s),
        "enc": enc_cache,
        "dec_in": dec_in,
        "dec": dec_caches,
        "shifts": shifts,
        "raw_n": raw_n,
        "norms": norms,
        "tiny": tiny,
        "opac": opac,
        "ds_clip": shifts["s"].astype(np.float64),
        "scales_rep": rep(init.scales).astype(np.float64),
        "exp_ds": np.exp(ds_clip),
        "n_pts": n_pts,
    }
    return predicted, cache


def predict_gaussians(
    m: ModuleParams, init: Gaussian2DSet, index: NeighborIndex
) -> Gaussian2DSet:
    """K-way splitting prediction: M = K*N, rows j*K..j*K+K-1 from point j."""
    predicted, _ = forward_with_cache(m, init, index)
    return predicted


def backward_from_cache(m: ModuleParams, init: Gaussian2DSet, cache, grads):
    """Reverse-mode pass from per-splat gradients to parameter gradients.

    `grads` is a GaussianGradients over the K*N prediction. Returns
    (param_grads: dict, input_grads: dict over the init fields).
    """
    k = m.decoders.k_split
    n_pts = cache["n_pts"]
    dtype = m.encoder.blocks[0].lin_in.weights.dtype
    if grads.position.shape[0] != n_pts * k:
        raise InvalidArgument("gradient length does not match K*N prediction")
    gacc = zero_like_params(m)

    sum_k = lambda a: a.reshape(n_pts, k, -1).sum(axis=1)

    d_shift = {}
    d_shift["x"] = grads.position.astype(np.float64)
    d_init_pos = sum_k(d_shift["x"])

    exp_ds = cache["exp_ds"]
    unclipped = np.abs(cache["ds_clip"]) < SCALE_SHIFT_CLIP
    d_scale = grads.scale.astype(np.float64)
    d_shift["s"] = np.where(unclipped, d_scale * cache["scales_rep"] * exp_ds, 0.0)
    d_init_scales = sum_k(d_scale * exp_ds)

    d_shift["c"] = grads.sh_colors.astype(np.float64)
    d_init_sh = sum_k(d_shift["c"])

    dn_out = grads.normal.astype(np.float64)
    raw_n, norms = cache["raw_n"], cache["norms"]
    nh = raw_n / norms
    proj = np.einsum("mi,mi->m", dn_out, nh)[:, None]
    d_raw = (dn_out - proj * nh) / norms
    d_raw[cache["tiny"]] = 0.0
    d_shift["n"] = d_raw
    d_init_normals = sum_k(d_raw)

    d_shift["a"] = grads.angle.astype(np.float64)[:, None]
    d_init_angles = sum_k(d_shift["a"])[:, 0]

    opac = cache["opac"]
    d_shift["o"] = (grads.opacity.astype(np.float64) * opac * (1.0 - opac))[:, None]

    dec_in_grad = np.zeros_like(cache["dec_in"], dtype=np.float64)
    for head in DECODER_HEADS:
        dout = d_shift[head].reshape(n_pts, k * HEAD_DIMS[head]).astype(dtype)
        dec_in_grad += _decode_backward(
            m.decoders.heads[head], cache["dec"][head], dout, gacc, f"decoder.{head}"
        ).astype(np.float64)

    feat_dim = m.encoder.out_dim
    dfeats = dec_in_grad[:, :feat_dim].astype(dtype)
    d_direct = dec_in_grad[:, feat_dim:]
    d_inp = _encode_backward(m.encoder, cache["enc"], dfeats, gacc).astype(np.float64)
    d_inp = d_inp + d_direct

    # the init DC coefficients enter twice: as network inputs and through
    # the additive color rule
    d_init_sh[:, (0, 9, 18)] += d_inp[:, 3:6]
    input_grads = {
        "positions": d_init_pos + d_inp[:, 0:3],
        "normals": d_init_normals + d_inp[:, 6:9],
        "scales": d_init_scales + d_inp[:, 9:11],
        "angles": d_init_angles,
        "sh_colors": d_init_sh,
    }
    return gacc, input_grads


def backward(m: ModuleParams, init: Gaussian2DSet, index: NeighborIndex, grads):
    """Stateless variant: recomputes the forward pass internally."""
    _, cache = forward_with_cache(m, init, index)
    return backward_from_cache(m, init, cache, grads)


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, m: ModuleParams, grads: dict) -> AdamState:
    """Standard bias-corrected Adam update, in place over the module params."""
    params = named_params(m)
    for name, arr in params:
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {name}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    for name, arr in params:
        g = grads[name].astype(arr.dtype)
        if name not in state.m:
            state.m[name] = np.zeros_like(arr)
            state.v[name] = np.zeros_like(arr)
        state.m[name] = b1 * state.m[name] + (1 - b1) * g
        state.v[name] = b2 * state.v[name] + (1 - b2) * (g * g)
        m_hat = state.m[name] / corr1
        v_hat = state.v[name] / corr2
        arr -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(arr.dtype)
    return state
