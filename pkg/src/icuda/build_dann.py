"""Transformer weights that execute the adversarial alignment branch.

Each optimization step spans three layers: (A) forward attention rebuilds the
label and domain scores per token and a gated MLP turns them into per-token
loss gradients, (B) gradient attention applies all six update families (label
and domain objectives for the three parameter blocks), (C) an MLP applies the
ball projections when needed and zeroes the scratch rows exactly.  A final
layer recomputes the label score and copies it into the output slot at the
query token only.

Parameter blocks live in every token and stay synchronized; per-token scratch
(scores and loss gradients) is rebuilt each step.  Certificates chain the
measured fit errors through the gradient formula with realized trace bounds.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import relu_approx as ra
from . import uda_ref as ur
from .datagen import DomainPair
from .tfcore import (
    AttentionHead,
    SlotLayout,
    TokenMatrix,
    Transformer,
    TransformerLayer,
    forward_trace,
    read_output,
)

_FIT_CACHE: dict = {}


def _round_up(x: float, step: float = 0.5) -> float:
    return float(np.ceil(x / step) * step)


@dataclass
class DannBuildConfig:
    d: int = 2
    K: int = 2
    eta: float = 0.1
    lam: float = 1.0
    L: int = 5
    delta_gamma: float = 0.05
    B_u: float = 2.0
    B_w: float = 1.0
    B_v: float = 1.0
    activation: str = "logistic"
    r_knots: int = 600
    gl_knots: int = 700
    p_terms: int = 520
    proj_terms: int = 600
    out_name: str = "fdann"
    seed: int = 0

    def params(self) -> ur.DannParams:
        return ur.DannParams(
            K=self.K, eta=self.eta, lam=self.lam, steps=self.L,
            delta_gamma=self.delta_gamma, B_u=self.B_u, B_w=self.B_w,
            B_v=self.B_v, activation=self.activation,
        )


def dann_layout(d: int, K: int) -> SlotLayout:
    slots = [("x", d), ("y", 1), ("t", 1), ("s", 1), ("one", 1)]
    slots += [(f"u{k}", d) for k in range(K)]
    slots += [("w", K), ("v", K), ("lam", 1), ("delta", 1),
              ("gl", 1), ("gd", 1), ("fdann", 1)]
    return SlotLayout.build(slots)


def encode_dann(pair: DomainPair, layout: SlotLayout, state: ur.DannState,
                query_index: int = 0) -> TokenMatrix:
    """Prompt carrying the data plus the initial parameter state in every
    token's parameter slots."""
    from .datagen import encode_tokens

    tm = encode_tokens(pair, layout, query_index)
    K = state.u.shape[0]
    for k in range(K):
        tm.data[layout.rows(f"u{k}"), :] = state.u[k][:, None]
    tm.data[layout.rows("w"), :] = state.w[:, None]
    tm.data[layout.rows("v"), :] = state.v[:, None]
    return tm


# ---------------------------------------------------------------------------
# fitted pieces (cached across instances)


def activation_fit(name: str, R1: float, knots: int):
    """Activation fit whose terms are normalized on the prescaled input t/R1.

    Fitting r(R1 t~) on the unit interval and folding 1/R1 back into the
    slopes keeps evaluation in original coordinates while guaranteeing
    |a t + b| <= 1 for |t| <= R1, which the source and target gates of the
    parameter-update heads rely on.
    """
    key = ("act", name, R1, knots)
    if key not in _FIT_CACHE:
        r, _ = ur.get_activation(name)
        rs, rep = ra.fit_1d(lambda z: r(R1 * np.asarray(z, dtype=float)), 1.0, knots)
        rs = ra.ReluSum(rs.a / R1, rs.b, rs.c, input_dim=1, radius=R1,
                        sup_error=rs.sup_error)
        _FIT_CACHE[key] = (rs, rep)
    return _FIT_CACHE[key]


def lossgrad_fit(name: str, R_score: float, delta: float, knots: int):
    """Per-token loss gradient d gamma(clamp(sig(score)), label) / d score as
    a binary-gated fit over (score, label)."""
    key = ("lg", name, R_score, delta, knots)
    if key not in _FIT_CACHE:
        def f(t, v):
            t = np.asarray(t, dtype=float)
            p = ur.logistic(t)
            _, d1 = ur.gamma_value_deriv(p, np.full_like(t, v), delta)
            return d1 * ur.dlogistic(t)
        _FIT_CACHE[key] = ra.fit_binary_gated(f, -R_score, R_score, knots)
    return _FIT_CACHE[key]


def lossgrad_lipschitz(R_score: float, delta: float) -> float:
    """Slope bound of the true per-token gradient over the fit box.

    Dense finite differences inflated 10 percent; the function is piecewise
    smooth with moderate curvature, so the inflation dominates the grid gap.
    """
    t = np.linspace(-R_score, R_score, 20001)
    worst = 0.0
    for v in (0.0, 1.0):
        p = ur.logistic(t)
        _, d1 = ur.gamma_value_deriv(p, np.full_like(t, v), delta)
        g = d1 * ur.dlogistic(t)
        worst = max(worst, float(np.max(np.abs(np.diff(g) / np.diff(t)))))
    return 1.1 * worst


def product_fit(name: str, R1: float, terms: int, seed: int = 0):
    """2-D fit of (s, z) -> s * r'(R1 z) on the unit box; s carries the
    prescaled weight-times-gradient product."""
    key = ("prod", name, R1, terms)
    if key not in _FIT_CACHE:
        _, dr = ur.get_activation(name)

        def f(P):
            return P[:, 0] * dr(R1 * P[:, 1])

        _FIT_CACHE[key] = ra.fit_nd(f, 2, 1.0, terms, seed=seed)
    return _FIT_CACHE[key]


def projection_fit(B: float, R_blk: float, dim: int, terms: int, seed: int = 0):
    """Componentwise fits of the ball-projection correction
    z -> z (min(1, B/|z|) - 1) over the box of radius R_blk."""
    key = ("proj", B, R_blk, dim, terms)
    if key not in _FIT_CACHE:
        fits = []
        errs = []
        for i in range(dim):
            def f(P, i=i):
                nrm = np.linalg.norm(P, axis=1)
                scale = np.minimum(1.0, B / np.maximum(nrm, 1e-300)) - 1.0
                return P[:, i] * scale
            rs, rep = ra.fit_nd(f, dim, R_blk, terms, seed=seed + i)
            fits.append(rs)
            errs.append(rep.sup_error)
        _FIT_CACHE[key] = (fits, np.array(errs))
    return _FIT_CACHE[key]


# ---------------------------------------------------------------------------
# layer builders


def build_forward_attn(layout: SlotLayout, cfg: DannBuildConfig, R1: float):
    """Heads rebuilding the label and domain scores into lam/delta rows."""
    D = layout.dim
    xs = layout.rows("x")
    one = layout.row("one")
    lam_r = layout.row("lam")
    del_r = layout.row("delta")
    wsl = layout.rows("w")
    vsl = layout.rows("v")
    rfit, _ = activation_fit(cfg.activation, R1, cfg.r_knots)
    heads = []
    d = cfg.d
    for k in range(cfg.K):
        usl = layout.rows(f"u{k}")
        for m in range(rfit.n_terms):
            Q = np.zeros((d + 1, D))
            K = np.zeros((d + 1, D))
            Q[:d, xs] = rfit.a[m, 0] * np.eye(d)
            K[:d, usl] = np.eye(d)
            Q[d, one] = rfit.b[m]
            K[d, one] = 1.0
            V = np.zeros((D, D))
            V[lam_r, wsl.start + k] = rfit.c[m]
            V[del_r, vsl.start + k] = rfit.c[m]
            heads.append(AttentionHead(Q, K, V))
    return heads


def build_lossgrad_mlp(layout: SlotLayout, cfg: DannBuildConfig, R_lam: float,
                       R_del: float):
    """Gated MLP: gl for source tokens from (lam, y), gd for train tokens
    from (delta, t); exactly zero elsewhere."""
    D = layout.dim
    gl_fit, _ = lossgrad_fit(cfg.activation, R_lam, cfg.delta_gamma, cfg.gl_knots)
    gd_fit, _ = lossgrad_fit(cfg.activation, R_del, cfg.delta_gamma, cfg.gl_knots)
    rows = []
    outs = []

    def add(fit, in_row, lbl_row, gate_row, out_row):
        R2 = float(np.max(np.abs(fit.a[:, 0])) * max(R_lam, R_del)
                   + np.max(np.abs(fit.a[:, 1])) + np.max(np.abs(fit.b))) + 1.0
        for m in range(fit.n_terms):
            w1 = np.zeros(D)
            w1[in_row] = fit.a[m, 0]
            w1[lbl_row] = fit.a[m, 1]
            w1[layout.row("one")] = fit.b[m] - R2
            w1[gate_row] = R2
            rows.append(w1)
            outs.append((out_row, fit.c[m]))

    add(gl_fit, layout.row("lam"), layout.row("y"), layout.row("t"), layout.row("gl"))
    add(gd_fit, layout.row("delta"), layout.row("t"), layout.row("s"), layout.row("gd"))
    W1 = np.array(rows)
    W2 = np.zeros((D, len(rows)))
    for i, (r, c) in enumerate(outs):
        W2[r, i] = c
    return W1, W2, gl_fit, gd_fit


def build_gd_attn(layout: SlotLayout, cfg: DannBuildConfig, n: int, n_prime: int,
                  R1: float, S1: float, S3: float):
    """The six update families as gated attention heads.

    Families 1/3 rebuild weight-times-gradient-times-slope terms through the
    2-D product fit and deliver the sender's point; families 2/4 rebuild the
    activation value and deliver the sender's loss gradient.
    """
    D = layout.dim
    xs = layout.rows("x")
    one = layout.row("one")
    t_r = layout.row("t")
    s_r = layout.row("s")
    gl_r = layout.row("gl")
    gd_r = layout.row("gd")
    wsl = layout.rows("w")
    vsl = layout.rows("v")
    N = n + n_prime
    d = cfg.d
    eta, lam = cfg.eta, cfg.lam
    pfit, _ = product_fit(cfg.activation, R1, cfg.p_terms, seed=cfg.seed)
    rfit, _ = activation_fit(cfg.activation, R1, cfg.r_knots)
    G = 2.0
    heads = []

    def gate_rows(Q, K, row, kind):
        # kind: "src" passes t=1 tokens, "tgt" passes s=1, t=0 tokens
        Q[row, one] = -G
        if kind == "src":
            K[row, one] = 1.0
            K[row, t_r] = -1.0
        else:
            K[row, one] = 1.0
            K[row, s_r] = -1.0
            K[row, t_r] = 1.0

    for k in range(cfg.K):
        usl = layout.rows(f"u{k}")
        # families 1, 3a, 3b: updates of u_k
        for coef_slot, scale, grad_row, specs in (
            (wsl.start + k, S1, gl_r, [("src", -(N + 1) * eta / n)]),
            (vsl.start + k, S3, gd_r, [("src", (N + 1) * lam * eta / n),
                                       ("tgt", (N + 1) * lam * eta / n_prime)]),
        ):
            for kind, vcoef in specs:
                for m in range(pfit.n_terms):
                    a_s, a_z = pfit.a[m]
                    Q = np.zeros((d + 3, D))
                    K = np.zeros((d + 3, D))
                    Q[0, coef_slot] = a_s / scale
                    K[0, grad_row] = 1.0
                    Q[1 : 1 + d, usl] = (a_z / R1) * np.eye(d)
                    K[1 : 1 + d, xs] = np.eye(d)
                    Q[1 + d, one] = pfit.b[m]
                    K[1 + d, one] = 1.0
                    gate_rows(Q, K, 2 + d, kind)
                    V = np.zeros((D, D))
                    V[usl, xs] = vcoef * scale * pfit.c[m] * np.eye(d)
                    heads.append(AttentionHead(Q, K, V))
        # families 2, 4a, 4b: updates of w_k and v_k
        for out_row, grad_row, specs in (
            (wsl.start + k, gl_r, [(None, -(N + 1) * eta / n)]),
            (vsl.start + k, gd_r, [("src", -(N + 1) * lam * eta / n),
                                   ("tgt", -(N + 1) * lam * eta / n_prime)]),
        ):
            for kind, vcoef in specs:
                for m in range(rfit.n_terms):
                    nrows = d + 2 if kind else d + 1
                    Q = np.zeros((nrows, D))
                    K = np.zeros((nrows, D))
                    Q[:d, usl] = rfit.a[m, 0] * np.eye(d)
                    K[:d, xs] = np.eye(d)
                    Q[d, one] = rfit.b[m]
                    K[d, one] = 1.0
                    if kind:
                        gate_rows(Q, K, d + 1, kind)
                    V = np.zeros((D, D))
                    V[out_row, grad_row] = vcoef * rfit.c[m]
                    heads.append(AttentionHead(Q, K, V))
    return heads, pfit, rfit


def build_projection_mlp(layout: SlotLayout, cfg: DannBuildConfig,
                         enable_proj: bool, R_blk: float):
    """Scratch-row zeroing (exact sign pairs) plus optional ball-projection
    corrections for every parameter block."""
    D = layout.dim
    rows = []
    cols = []
    for name in ("lam", "delta", "gl", "gd"):
        r = layout.row(name)
        for sign in (1.0, -1.0):
            w1 = np.zeros(D)
            w1[r] = sign
            rows.append(w1)
            cols.append((r, -sign))
    eps_proj = {"u": 0.0, "w": 0.0, "v": 0.0}
    if enable_proj:
        specs = [(f"u{k}", cfg.B_u, cfg.d, "u") for k in range(cfg.K)]
        specs += [("w", cfg.B_w, cfg.K, "w"), ("v", cfg.B_v, cfg.K, "v")]
        for slot, B, dim, tag in specs:
            fits, errs = projection_fit(B, R_blk, dim, cfg.proj_terms, seed=cfg.seed)
            sl = layout.rows(slot)
            for i, rs in enumerate(fits):
                for m in range(rs.n_terms):
                    w1 = np.zeros(D)
                    w1[sl] = rs.a[m]
                    w1[layout.row("one")] = rs.b[m]
                    rows.append(w1)
                    cols.append((sl.start + i, rs.c[m]))
            eps_proj[tag] = max(eps_proj[tag], float(np.sqrt(dim) * np.max(errs)))
    W1 = np.array(rows)
    W2 = np.zeros((D, len(rows)))
    for i, (r, c) in enumerate(cols):
        W2[r, i] = c
    return W1, W2, eps_proj


def build_readout_layer(layout: SlotLayout, cfg: DannBuildConfig, R1: float,
                        R_lam: float):
    """Recompute the label score, then copy it into the output slot at the
    query token only (both offsets vanish there)."""
    D = layout.dim
    heads = build_forward_attn(layout, cfg, R1)
    G = R_lam + 2.0
    lam_r = layout.row("lam")
    rows = []
    cols = []
    out = layout.row(cfg.out_name)
    for sign in (1.0, -1.0):
        w1 = np.zeros(D)
        w1[lam_r] = sign
        w1[layout.row("t")] = -G
        w1[layout.row("s")] = -G
        rows.append(w1)
        cols.append((out, sign))
    W1 = np.array(rows)
    W2 = np.zeros((D, len(rows)))
    for i, (r, c) in enumerate(cols):
        W2[r, i] = c
    return TransformerLayer(heads, W1, W2)


# ---------------------------------------------------------------------------
# build + verify


@dataclass
class DannBuild:
    tf: Transformer
    layout: SlotLayout
    cfg: DannBuildConfig
    state0: ur.DannState
    bounds: dict
    fits: dict
    eps_proj: dict
    proj_enabled: bool
    ref_trace: list


@dataclass
class DannStepRow:
    step: int
    dev_u: float
    dev_w: float
    dev_v: float
    bound_u: float
    bound_w: float
    bound_v: float
    ok: bool


@dataclass
class DannCertificate:
    rows: list
    cumulative: float
    final_gap: float
    prediction_tf: float
    prediction_ref: float
    eps_r: float
    eps_gl: float
    eps_gd: float
    eps_p: float
    checks: dict


def build_dann_transformer(pair: DomainPair, cfg: DannBuildConfig,
                           state0: ur.DannState | None = None) -> DannBuild:
    params = cfg.params()
    if state0 is None:
        state0 = ur.init_dann(params, pair.d, cfg.seed)
    ref_trace = ur.dann_run(state0, pair, params)

    all_x = np.concatenate([pair.source_x, pair.target_x, pair.query_x], axis=0)
    B_x = float(np.max(np.linalg.norm(all_x, axis=1)))
    # 2 percent headroom so approximate projections and small drifts stay
    # inside every fit domain; containment is re-measured at verify time
    R1 = _round_up(max(1.02 * cfg.B_u * B_x, 1.0))
    sqK = float(np.sqrt(cfg.K))
    r, _ = ur.get_activation(cfg.activation)
    r_max = float(np.max(np.abs(r(np.linspace(-R1, R1, 4001)))))
    R_lam = _round_up(max(1.02 * sqK * cfg.B_w * r_max, 1.0))
    R_del = _round_up(max(1.02 * sqK * cfg.B_v * r_max, 1.0))
    R_sc = max(R_lam, R_del)

    gl_fit, _ = lossgrad_fit(cfg.activation, R_sc, cfg.delta_gamma, cfg.gl_knots)
    B_g = _gl_value_bound(gl_fit, R_sc)
    S1 = 1.02 * cfg.B_w * B_g
    S3 = 1.02 * cfg.B_v * B_g

    # projection needed only if some pre-projection block can leave its ball
    pre_norms = _pre_projection_norms(ref_trace, pair, params)
    slack = 0.05 * min(cfg.B_u, cfg.B_w, cfg.B_v)
    enable_proj = bool(
        pre_norms["u"] > cfg.B_u - slack or pre_norms["w"] > cfg.B_w - slack
        or pre_norms["v"] > cfg.B_v - slack)
    R_blk = _round_up(max(pre_norms["u"], pre_norms["w"], pre_norms["v"],
                          cfg.B_u, cfg.B_w, cfg.B_v) * 1.5)

    layout = dann_layout(cfg.d, cfg.K)
    D = layout.dim
    fwd_heads = build_forward_attn(layout, cfg, R1)
    W1_lg, W2_lg, gl_fit, gd_fit = build_lossgrad_mlp(layout, cfg, R_sc, R_sc)
    layer_a = TransformerLayer(fwd_heads, W1_lg, W2_lg)
    gd_heads, pfit, rfit = build_gd_attn(layout, cfg, pair.n, pair.n_prime, R1, S1, S3)
    layer_b = TransformerLayer(gd_heads, np.zeros((0, D)), np.zeros((D, 0)))
    W1_p, W2_p, eps_proj = build_projection_mlp(layout, cfg, enable_proj, R_blk)
    layer_c = TransformerLayer([], W1_p, W2_p)

    layers = []
    for _ in range(cfg.L):
        layers.append(TransformerLayer(layer_a.heads, layer_a.W1, layer_a.W2))
        layers.append(TransformerLayer(layer_b.heads, layer_b.W1, layer_b.W2))
        layers.append(TransformerLayer(layer_c.heads, layer_c.W1, layer_c.W2))
    layers.append(build_readout_layer(layout, cfg, R1, R_lam))
    tf = Transformer(layers, layout, readout=(cfg.out_name, None))

    bounds = {"B_x": B_x, "R1": R1, "R_lam": R_lam, "R_del": R_del,
              "R_sc": R_sc, "B_g": B_g, "S1": S1, "S3": S3, "R_blk": R_blk,
              "r_max": r_max}
    fits = {"r": rfit, "gl": gl_fit, "gd": gd_fit, "p": pfit}
    return DannBuild(tf, layout, cfg, state0, bounds, fits, eps_proj,
                     enable_proj, ref_trace)


def _gl_value_bound(fit: ra.ReluSum, R_sc: float) -> float:
    t = np.linspace(-R_sc, R_sc, 4001)
    worst = 0.0
    for v in (0.0, 1.0):
        Z = np.stack([t, np.full_like(t, v)], axis=1)
        worst = max(worst, float(np.max(np.abs(ra.eval_batch(fit, Z)))))
    return worst + fit.sup_error


def _pre_projection_norms(trace: list, pair: DomainPair, params: ur.DannParams) -> dict:
    out = {"u": 0.0, "w": 0.0, "v": 0.0}
    for st in trace[:-1]:
        g = ur.dann_grads(st, pair, params)
        raw_u = st.u - params.eta * g.gu
        raw_w = st.w - params.eta * g.gw
        raw_v = st.v - params.eta * g.gv
        out["u"] = max(out["u"], float(np.max(np.linalg.norm(raw_u, axis=1))))
        out["w"] = max(out["w"], float(np.linalg.norm(raw_w)))
        out["v"] = max(out["v"], float(np.linalg.norm(raw_v)))
    return out


def _state_from(tm_data: np.ndarray, layout: SlotLayout, cfg: DannBuildConfig,
                col: int) -> ur.DannState:
    u = np.stack([tm_data[layout.rows(f"u{k}"), col] for k in range(cfg.K)])
    return ur.DannState(u, tm_data[layout.rows("w"), col].copy(),
                        tm_data[layout.rows("v"), col].copy())


def verify_dann(build: DannBuild, pair: DomainPair, query_index: int = 0) -> DannCertificate:
    """Per-step and cumulative certificates against the reference run."""
    cfg = build.cfg
    params = cfg.params()
    layout = build.layout
    tm = encode_dann(pair, layout, build.state0, query_index)
    out, trace = forward_trace(build.tf, tm)
    q = tm.query_index

    eps_r = build.fits["r"].sup_error
    eps_gl = build.fits["gl"].sup_error
    eps_gd = build.fits["gd"].sup_error
    eps_p = build.fits["p"].sup_error
    B = build.bounds
    L_gamma = lossgrad_lipschitz(B["R_sc"], cfg.delta_gamma)
    sqK = float(np.sqrt(cfg.K))
    r, dr = ur.get_activation(cfg.activation)
    B_rp = float(np.max(np.abs(dr(np.linspace(-B["R1"], B["R1"], 4001)))))
    B_r = B["r_max"] + eps_r

    rows = []
    cum = 0.0
    tf_states = [build.state0]
    ref_states = build.ref_trace
    gate_ok = True
    box_ok = True
    domain_ok = True
    for l in range(cfg.L):
        post_a = trace[3 * l].data
        post_c = trace[3 * l + 2].data
        prev = tf_states[-1]
        cur = _state_from(post_c, layout, cfg, q)
        tf_states.append(cur)

        # realized per-token quantities for this step
        Bg_l = float(np.max(np.abs(post_a[layout.row("gl"), :])))
        Bgd_l = float(np.max(np.abs(post_a[layout.row("gd"), :])))
        box_ok &= bool(np.max(np.abs(post_a[layout.row("lam"), :])) <= B["R_sc"]
                       and np.max(np.abs(post_a[layout.row("delta"), :])) <= B["R_sc"])
        gate_ok &= bool(Bg_l <= B["B_g"] and Bgd_l <= B["B_g"])
        # fit-domain containment for the product heads and score heads
        w_inf = float(np.max(np.abs(prev.w)))
        v_inf = float(np.max(np.abs(prev.v)))
        u_row = float(np.max(np.linalg.norm(prev.u, axis=1)))
        domain_ok &= bool(w_inf * Bg_l <= B["S1"] and v_inf * Bgd_l <= B["S3"]
                          and u_row * B["B_x"] <= B["R1"])
        if build.proj_enabled:
            raw = _state_from(trace[3 * l + 1].data, layout, cfg, q)
            domain_ok &= bool(
                max(float(np.max(np.linalg.norm(raw.u, axis=1))),
                    float(np.linalg.norm(raw.w)),
                    float(np.linalg.norm(raw.v))) <= B["R_blk"])

        # loss-gradient surrogate error chain (fit error at the streamed
        # score, plus the score drift through the true gradient's slope)
        wl1 = float(np.sum(np.abs(prev.w)))
        vl1 = float(np.sum(np.abs(prev.v)))
        E_gl = eps_gl + L_gamma * wl1 * eps_r
        E_gd = eps_gd + L_gamma * vl1 * eps_r

        per_u_src = B["B_x"] * (B["S1"] * eps_p + cfg.B_w * B_rp * E_gl)
        per_u_dom = B["B_x"] * (B["S3"] * eps_p + cfg.B_v * B_rp * E_gd)
        eps_u = sqK * (per_u_src + cfg.lam * 2.0 * per_u_dom)
        eps_w = sqK * ((Bg_l + E_gl) * eps_r + B_r * E_gl)
        eps_v = sqK * cfg.lam * 2.0 * ((Bgd_l + E_gd) * eps_r + B_r * E_gd)

        exact = ur.dann_step(prev, pair, params)
        dev_u = float(np.linalg.norm(cur.u - exact.u))
        dev_w = float(np.linalg.norm(cur.w - exact.w))
        dev_v = float(np.linalg.norm(cur.v - exact.v))
        bu = cfg.eta * eps_u + build.eps_proj["u"] * sqK
        bw = cfg.eta * eps_w + build.eps_proj["w"]
        bv = cfg.eta * eps_v + build.eps_proj["v"]
        ok = dev_u <= bu and dev_w <= bw and dev_v <= bv
        rows.append(DannStepRow(l + 1, dev_u, dev_w, dev_v, bu, bw, bv, ok))

        # cumulative recursion with realized amplification of the exact map
        dprev = float(np.linalg.norm(tf_states[-2].flat() - ref_states[l].flat()))
        if dprev > 0:
            amp = float(np.linalg.norm(
                exact.flat() - ref_states[l + 1].flat()) / dprev)
        else:
            amp = 1.0
        step_bound = float(np.sqrt(bu**2 + bw**2 + bv**2))
        cum = amp * cum + step_bound

    final = tf_states[-1]
    ref_final = ref_states[-1]
    domain_ok &= bool(
        float(np.max(np.linalg.norm(final.u, axis=1))) * B["B_x"] <= B["R1"])
    # Lipschitz constant of the true score in the parameters, along the
    # segment between the realized and reference final states
    W_seg = max(float(np.max(np.abs(final.w))), float(np.max(np.abs(ref_final.w))))
    G_lam = float(np.sqrt(cfg.K * B_r**2 + cfg.K * (W_seg * B_rp * B["B_x"])**2))
    cum_final = float(np.linalg.norm(final.flat() - ref_final.flat()))
    cumulative = eps_r * float(np.sum(np.abs(final.w))) + G_lam * cum

    pred_tf = float(out.data[layout.row(cfg.out_name), q])
    pred_ref = float(ur.dann_predict(ref_final,
                                     pair.query_x[query_index : query_index + 1],
                                     cfg.activation)[0])
    checks = {
        "score_box_contained": box_ok,
        "grad_bound_contained": gate_ok,
        "fit_domains_contained": domain_ok,
        "L_gamma": L_gamma,
        "state_gap_final": cum_final,
        "state_gap_bound": cum,
    }
    return DannCertificate(
        rows=rows,
        cumulative=cumulative,
        final_gap=abs(pred_tf - pred_ref),
        prediction_tf=pred_tf,
        prediction_ref=pred_ref,
        eps_r=eps_r,
        eps_gl=eps_gl,
        eps_gd=eps_gd,
        eps_p=eps_p,
        checks=checks,
    )
