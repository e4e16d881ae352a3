"""Transformer weights for overlap scoring and branch selection.

Three layers sit on top of the two branch constructions: layer one scores
source density at every token (kernel attention in difference coordinates)
and exponentiates with the soft-min temperature, layer two sums the
exponentials over target tokens and takes the scaled negative log, layer
three blends the two branch predictions through a clipped linear indicator
and copies the result into the label row of the query token.

The exponential and logarithm use interpolants on nonuniform knot grids;
the log interpolant is monotone with a flat left tail, so even when the
exponential sum underflows its fit domain the overlap statistic saturates
at a known cap above the decision threshold and the routing stays certified.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import relu_approx as ra
from . import uda_ref as ur
from .build_dann import DannBuildConfig, build_dann_transformer, encode_dann, verify_dann
from .build_iwl import IwlBuildConfig, build_iwl_transformer, verify_iwl
from .datagen import DomainPair, encode_tokens
from .tfcore import (
    AttentionHead,
    SlotLayout,
    TokenMatrix,
    Transformer,
    TransformerLayer,
    compose,
    forward_trace,
    union_layout,
)

SELECT_SLOTS = [("p_kde", 1), ("e_soft", 1), ("e_sum", 1), ("q_soft", 1), ("blend", 1)]


def _round_up(x: float, step: float = 0.5) -> float:
    return float(np.ceil(x / step) * step)


# ---------------------------------------------------------------------------
# fitted pieces


def kernel_diff_fit(d: int, h: float, B_x: float, knots: int,
                    seed: int = 0) -> tuple[ra.ReluSum, ra.FitReport]:
    """Gaussian bump in difference coordinates on the box of displacements."""
    R = 2.0 * B_x + 1e-6

    def g1(t):
        return np.exp(-np.asarray(t, dtype=float) ** 2 / (2.0 * h * h))

    if d == 1:
        return ra.fit_1d(g1, R, knots)
    if d in (2, 3):
        def gd(P):
            return np.exp(-np.sum(P * P, axis=1) / (2.0 * h * h))
        return ra.fit_nd(gd, d, R, knots, seed=seed)
    raise ValueError("kernel fits support point dimension 1, 2, or 3")


def exp_knot_grid(beta: float, lo: float, hi: float, M: int,
                  tail: int = 33) -> np.ndarray:
    """Knots for exp(-beta p) on [lo, hi], dense where the function is steep.

    Uniform in z = exp(-beta p / 2) the interpolation error per piece is
    (dz)^2 / 2; past the point where z collapses the function is below any
    tolerance and a sparse linear tail suffices.
    """
    if beta <= 0:
        return np.linspace(lo, hi, max(tail, 8))
    z_hi = np.exp(-beta * lo / 2.0)
    z_lo = max(np.exp(-beta * hi / 2.0), z_hi * 1e-7)
    z = np.linspace(z_lo, z_hi, M)
    knots = np.sort(-(2.0 / beta) * np.log(z))
    knots[0] = lo
    if knots[-1] < hi - 1e-12:
        knots = np.concatenate([knots, np.linspace(knots[-1], hi, tail)[1:]])
    knots[-1] = hi
    keep = np.concatenate([[True], np.diff(knots) > 1e-15])
    return knots[keep]


def log_knot_grid(s_lo: float, s_hi: float, M: int) -> np.ndarray:
    """Geometric knots: relative spacing, so the log error is uniform."""
    if s_lo <= 0 or s_hi <= s_lo:
        raise ValueError("need 0 < s_lo < s_hi")
    return np.geomspace(s_lo, s_hi, M)


# ---------------------------------------------------------------------------
# half-layer builders


def build_kde_attn(kernel_fit: ra.ReluSum, layout: SlotLayout, n: int, T: int,
                   B_x: float, p_name: str = "p_kde") -> list[AttentionHead]:
    """Heads writing the mean source-kernel mass at every receiving token.

    Each fit term relu(a . (x_i - x_j) + b) becomes one head; a source gate
    shifts the score out of range for non-source senders.
    """
    D = layout.dim
    xs = layout.rows("x")
    one = layout.row("one")
    t_r = layout.row("t")
    p_r = layout.row(p_name)
    G = 2.0 * max(B_x, 1.0) + 1.0
    heads = []
    for m in range(kernel_fit.n_terms):
        a = kernel_fit.a[m]
        Q = np.zeros((3, D))
        K = np.zeros((3, D))
        Q[0, xs] = a
        K[0, one] = 1.0
        Q[1, one] = 1.0
        K[1, xs] = -a
        K[1, one] = kernel_fit.b[m]
        Q[2, one] = -G
        K[2, one] = 1.0
        K[2, t_r] = -1.0
        V = np.zeros((D, D))
        V[p_r, one] = kernel_fit.c[m] * T / n
        heads.append(AttentionHead(Q, K, V))
    return heads


def build_exp_mlp(exp_fit: ra.ReluSum, layout: SlotLayout,
                  p_name: str = "p_kde", e_name: str = "e_soft"):
    """Per-token exponential of the density score."""
    D = layout.dim
    p_r = layout.row(p_name)
    one = layout.row("one")
    M = exp_fit.n_terms
    W1 = np.zeros((M, D))
    W1[:, p_r] = exp_fit.a[:, 0]
    W1[:, one] = exp_fit.b
    W2 = np.zeros((D, M))
    W2[layout.row(e_name), :] = exp_fit.c
    return W1, W2


def build_sum_attn(layout: SlotLayout, T: int, e_name: str = "e_soft",
                   sum_name: str = "e_sum") -> list[AttentionHead]:
    """Exact sum of the exponentials over target training tokens.

    The gate score s_j - t_j is already 0 or 1, so a single linear head sums
    with no approximation error.
    """
    D = layout.dim
    Q = np.zeros((1, D))
    K = np.zeros((1, D))
    Q[0, layout.row("one")] = 1.0
    K[0, layout.row("s")] = 1.0
    K[0, layout.row("t")] = -1.0
    V = np.zeros((D, D))
    V[layout.row(sum_name), layout.row(e_name)] = float(T)
    return [AttentionHead(Q, K, V)]


def build_log_mlp(log_fit: ra.ReluSum, layout: SlotLayout, beta: float,
                  sum_name: str = "e_sum", q_name: str = "q_soft"):
    """q = -(1/beta) log of the exponential sum, via the monotone interpolant."""
    D = layout.dim
    M = log_fit.n_terms
    W1 = np.zeros((M, D))
    W1[:, layout.row(sum_name)] = log_fit.a[:, 0]
    W1[:, layout.row("one")] = log_fit.b
    W2 = np.zeros((D, M))
    W2[layout.row(q_name), :] = -log_fit.c / beta
    return W1, W2


def build_select_attn(layout: SlotLayout, delta: float, a: float, G: float,
                      T: int, fiwl_name: str, fdann_name: str,
                      q_name: str = "q_soft",
                      sel_name: str = "blend") -> list[AttentionHead]:
    """Blend the branch predictions with the clipped linear indicator.

    relu(z + 1/2) - relu(z - 1/2) at z = a (q - delta) weights the ratio
    branch; the mirrored pair weights the adversarial branch; a sender gate
    admits only the query token, whose slots hold the branch outputs.
    """
    D = layout.dim
    one = layout.row("one")
    q_r = layout.row(q_name)
    sel = layout.row(sel_name)
    heads = []
    for src_row, a_sign in ((layout.row(fiwl_name), 1.0),
                            (layout.row(fdann_name), -1.0)):
        for off, v_sign in ((0.5, 1.0), (-0.5, -1.0)):
            Q = np.zeros((2, D))
            K = np.zeros((2, D))
            Q[0, q_r] = a_sign * a
            Q[0, one] = -a_sign * a * delta + off
            K[0, one] = 1.0
            Q[1, one] = -G
            K[1, layout.row("s")] = 1.0
            K[1, layout.row("t")] = 1.0
            V = np.zeros((D, D))
            V[sel, src_row] = v_sign * T
            heads.append(AttentionHead(Q, K, V))
    return heads


def build_copy_mlp(layout: SlotLayout, G: float, sel_name: str = "blend",
                   out_name: str = "y"):
    """Copy the blended value into the label row at the query token only."""
    D = layout.dim
    rows = []
    cols = []
    out = layout.row(out_name)
    for sign in (1.0, -1.0):
        w1 = np.zeros(D)
        w1[layout.row(sel_name)] = sign
        w1[layout.row("t")] = -G
        w1[layout.row("s")] = -G
        rows.append(w1)
        cols.append(sign)
    W1 = np.array(rows)
    W2 = np.zeros((D, len(rows)))
    for i, c in enumerate(cols):
        W2[out, i] = c
    return W1, W2


# ---------------------------------------------------------------------------
# composition


@dataclass
class IcudaBuildConfig:
    sel: ur.SelectorConfig = field(default_factory=ur.SelectorConfig)
    a: float = 100.0
    kernel_knots: int = 2500
    exp_knots: int = 3500
    exp_tail: int = 33
    log_knots: int = 3000
    s_floor: float | None = None
    iwl_feature_knots: int = 400
    iwl_grad_knots: int = 160
    dann_r_knots: int = 600
    dann_gl_knots: int = 700
    dann_p_terms: int = 520

    def iwl_config(self, d: int) -> IwlBuildConfig:
        s = self.sel
        return IwlBuildConfig(
            d=d, J=s.J, lam=s.lam, eta1=s.eta1, L1=s.L1, eta2=s.eta2,
            L2=s.L2, feature_knots=self.iwl_feature_knots,
            grad_knots=self.iwl_grad_knots, seed=s.seed,
        )

    def dann_config(self, d: int) -> DannBuildConfig:
        s = self.sel
        return DannBuildConfig(
            d=d, K=s.K, eta=s.eta, lam=s.lam_dann, L=s.L,
            delta_gamma=s.delta_gamma, B_u=s.B_u, B_w=s.B_w, B_v=s.B_v,
            activation=s.activation, r_knots=self.dann_r_knots,
            gl_knots=self.dann_gl_knots, p_terms=self.dann_p_terms,
            seed=s.seed,
        )


@dataclass
class IcudaBuild:
    tf: Transformer
    layout: SlotLayout
    cfg: IcudaBuildConfig
    iwl: object
    dann: object
    fits: dict
    consts: dict


@dataclass
class SelectionReport:
    q_tf: float
    q_oracle: float
    q_lo: float
    q_hi: float
    delta: float
    a: float
    choice_tf: str
    choice_oracle: str
    agreement: bool
    margin_certified: bool
    in_log_domain: bool
    blend_weight: float
    prediction_tf: float
    prediction_oracle: float
    branch_gap: float
    branch_bound: float
    within_branch_bound: bool
    eps: dict
    checks: dict
    iwl_certificate: object
    dann_certificate: object


def build_icuda_transformer(pair: DomainPair, cfg: IcudaBuildConfig) -> IcudaBuild:
    s = cfg.sel
    iwl_build = build_iwl_transformer(pair, cfg.iwl_config(pair.d))
    dann_build = build_dann_transformer(pair, cfg.dann_config(pair.d))

    unified, mappings = union_layout([iwl_build.tf, dann_build.tf],
                                     ["iwl", "dann"])
    slots = [(name, hi - lo) for name, lo, hi in unified.ranges]
    layout = SlotLayout.build(slots + SELECT_SLOTS)
    core = compose([iwl_build.tf, dann_build.tf], layout, mappings)

    h = s.kde_h if s.kde_h is not None else ur.median_bandwidth(pair.source_x)
    all_x = np.concatenate([pair.source_x, pair.target_x, pair.query_x], axis=0)
    B_x = float(np.max(np.abs(all_x)))
    T = pair.n + pair.n_prime + 1

    kernel_fit, krep = kernel_diff_fit(pair.d, h, B_x, cfg.kernel_knots, s.seed)
    eps1 = kernel_fit.sup_error
    exp_lo = -(4.0 * eps1 + 1e-4)
    exp_hi = 1.0 + 4.0 * eps1 + 1e-4
    exp_fit, erep = ra.fit_knots(
        lambda p: np.exp(-s.beta * np.asarray(p, dtype=float)),
        exp_knot_grid(s.beta, exp_lo, exp_hi, cfg.exp_knots, cfg.exp_tail))
    eps2 = exp_fit.sup_error

    # the flat left tail of the log interpolant caps q at -log(s_floor)/beta;
    # the floor must stay below any reachable sum yet keep that cap above the
    # routing threshold, and high enough that the interpolant's slopes do not
    # wreck float accumulation
    s_floor = cfg.s_floor
    if s_floor is None:
        s_floor = max(
            min(np.exp(-s.beta * (s.delta + 0.5 / cfg.a + 0.02)),
                0.5 * pair.n_prime * np.exp(-s.beta * exp_hi)),
            1e-8)
    S_hi = pair.n_prime * (np.exp(-s.beta * exp_lo) + eps2) + 1.0
    log_fit, lrep = ra.fit_knots(
        np.log, log_knot_grid(float(s_floor), float(S_hi), cfg.log_knots))
    eps4 = log_fit.sup_error
    knot_vals = np.log(lrep.breakpoints)
    if np.any(np.diff(knot_vals) < 0):
        raise RuntimeError("log interpolant lost monotonicity")

    q_cap = -float(np.log(s_floor)) / s.beta
    q_abs = max(q_cap, abs(-np.log(S_hi) / s.beta)) + eps4 / s.beta + 0.01
    G_sel = cfg.a * (q_abs + s.delta) + 1.0
    f_iwl_all = iwl_build.fmap(pair.query_x) @ iwl_build.ref["W"][-1]
    f_dann_all = ur.dann_predict(dann_build.ref_trace[-1], pair.query_x,
                                 s.activation)
    G_copy = _round_up(max(float(np.max(np.abs(f_iwl_all))),
                           float(np.max(np.abs(f_dann_all)))) + 2.0)

    kde_heads = build_kde_attn(kernel_fit, layout, pair.n, T, B_x)
    W1e, W2e = build_exp_mlp(exp_fit, layout)
    sum_heads = build_sum_attn(layout, T)
    W1l, W2l = build_log_mlp(log_fit, layout, s.beta)
    sel_heads = build_select_attn(layout, s.delta, cfg.a, G_sel, T,
                                  "iwl.fout", "dann.fdann")
    W1c, W2c = build_copy_mlp(layout, G_copy)

    layers = list(core.layers)
    layers.append(TransformerLayer(kde_heads, W1e, W2e))
    layers.append(TransformerLayer(sum_heads, W1l, W2l))
    layers.append(TransformerLayer(sel_heads, W1c, W2c))
    tf = Transformer(layers, layout, readout=("y", None))

    fits = {"kernel": kernel_fit, "exp": exp_fit, "log": log_fit,
            "reports": {"kernel": krep, "exp": erep, "log": lrep}}
    consts = {"h": h, "B_x": B_x, "T": T, "eps1": eps1, "eps2": eps2,
              "eps4": eps4, "s_floor": float(s_floor), "S_hi": float(S_hi),
              "exp_lo": exp_lo, "exp_hi": exp_hi, "q_cap": q_cap,
              "G_sel": G_sel, "G_copy": G_copy,
              "f_iwl_ref": float(f_iwl_all[0]),
              "f_dann_ref": float(f_dann_all[0])}
    return IcudaBuild(tf, layout, cfg, iwl_build, dann_build, fits, consts)


def encode_icuda(pair: DomainPair, build: IcudaBuild,
                 query_index: int = 0) -> TokenMatrix:
    tm = encode_tokens(pair, build.layout, query_index)
    st = build.dann.state0
    for k in range(st.u.shape[0]):
        tm.data[build.layout.rows(f"dann.u{k}"), :] = st.u[k][:, None]
    tm.data[build.layout.rows("dann.w"), :] = st.w[:, None]
    tm.data[build.layout.rows("dann.v"), :] = st.v[:, None]
    return tm


def verify_icuda(build: IcudaBuild, pair: DomainPair,
                 query_index: int = 0) -> SelectionReport:
    """Runs the composed transformer and certifies routing and prediction.

    The overlap statistic gets a rigorous bracket from the oracle densities
    plus the kernel and exponential fit errors, pushed through the monotone
    log interpolant; a bracket clear of the indicator band makes the blend
    weight exactly 0 or 1, reducing the composed error to the chosen
    branch's own certificate.
    """
    cfg = build.cfg
    s = cfg.sel
    layout = build.layout
    C = build.consts
    tm = encode_icuda(pair, build, query_index)
    out, _ = forward_trace(build.tf, tm)
    q_col = tm.query_index

    res = ur.icuda_predict(pair, s, query_index)

    # per-stage stream checks against their oracles
    all_x = np.concatenate([pair.source_x, pair.target_x,
                            pair.query_x[query_index : query_index + 1]], axis=0)
    p_oracle = ur.kde_eval(pair.source_x, all_x, C["h"])
    p_hat = out.data[layout.row("p_kde"), :]
    p_err = float(np.max(np.abs(p_hat - p_oracle)))
    p_in_dom = bool(np.min(p_hat) >= C["exp_lo"] and np.max(p_hat) <= C["exp_hi"])
    e_hat = out.data[layout.row("e_soft"), :]
    e_err = float(np.max(np.abs(e_hat - np.exp(-s.beta * p_hat))))
    S_hat = float(out.data[layout.row("e_sum"), q_col])
    sum_err = abs(S_hat - float(np.sum(e_hat[pair.n : pair.n + pair.n_prime])))
    q_tf = float(out.data[layout.row("q_soft"), q_col])
    q_direct = -float(ra.evaluate(build.fits["log"], [S_hat])) / s.beta
    q_err = abs(q_tf - q_direct)

    # rigorous overlap bracket from the oracle densities at target tokens,
    # pushed through the monotone log interpolant (valid on all of R thanks
    # to the flat left tail), padded by the measured evaluation-order noise
    p_t = p_oracle[pair.n : pair.n + pair.n_prime]
    e_up = np.exp(-s.beta * (p_t - C["eps1"])) + C["eps2"]
    e_dn = np.exp(-s.beta * (p_t + C["eps1"])) - C["eps2"]
    S_up = float(np.sum(e_up))
    S_dn = float(np.sum(e_dn))
    q_fuzz = max(1e-8, 2.0 * q_err)
    q_lo = -float(ra.evaluate(build.fits["log"], [S_up])) / s.beta - q_fuzz
    q_hi = -float(ra.evaluate(build.fits["log"], [S_dn])) / s.beta + q_fuzz
    band = 0.5 / cfg.a

    if q_lo >= s.delta + band:
        choice_tf = "iwl"
        margin_certified = True
    elif q_hi <= s.delta - band:
        choice_tf = "dann"
        margin_certified = True
    else:
        choice_tf = "iwl" if q_tf > s.delta else "dann"
        margin_certified = False
    blend = float(np.clip(cfg.a * (q_tf - s.delta) + 0.5, 0.0, 1.0))

    pred_tf = float(out.data[layout.row("y"), q_col])
    fiwl_q = float(out.data[layout.row("iwl.fout"), q_col])
    fdann_q = float(out.data[layout.row("dann.fdann"), q_col])

    iwl_cert = verify_iwl(build.iwl, pair, query_index)
    dann_cert = verify_dann(build.dann, pair, query_index)
    if choice_tf == "iwl":
        branch_gap = abs(pred_tf - res.f_iwl)
        branch_bound = iwl_cert.bound
    else:
        branch_gap = abs(pred_tf - res.f_dann)
        branch_bound = dann_cert.cumulative

    checks = {
        "p_err_max": p_err,
        "p_err_le_eps1": bool(p_err <= C["eps1"]),
        "p_in_exp_domain": p_in_dom,
        "e_err_max": e_err,
        "e_err_le_eps2": bool(e_err <= C["eps2"]),
        "sum_exact": bool(sum_err <= 1e-9),
        "q_matches_interpolant": bool(q_err <= 1e-7),
        "sum_below_cap": bool(S_hat <= C["S_hi"]),
        "blend_saturated": bool(blend in (0.0, 1.0)),
        "branch_iwl_consistent": bool(
            abs(fiwl_q - iwl_cert.prediction_tf) <= 1e-9),
        "branch_dann_consistent": bool(
            abs(fdann_q - dann_cert.prediction_tf) <= 1e-9),
        "sel_gate_ok": bool(cfg.a * (abs(q_tf) + s.delta) + 0.5 < C["G_sel"]),
        "copy_gate_ok": bool(
            max(abs(fiwl_q), abs(fdann_q)) + 1.0 < C["G_copy"]),
    }
    eps = {
        "eps1": C["eps1"],
        "eps2": C["eps2"],
        "eps4": C["eps4"],
        "softmin_gap": float(np.log(pair.n_prime)) / s.beta,
    }
    return SelectionReport(
        q_tf=q_tf,
        q_oracle=res.q,
        q_lo=q_lo,
        q_hi=q_hi,
        delta=s.delta,
        a=cfg.a,
        choice_tf=choice_tf,
        choice_oracle=res.choice,
        agreement=bool(choice_tf == res.choice),
        margin_certified=margin_certified,
        in_log_domain=bool(C["s_floor"] <= S_hat <= C["S_hi"]),
        blend_weight=blend,
        prediction_tf=pred_tf,
        prediction_oracle=res.prediction,
        branch_gap=branch_gap,
        branch_bound=branch_bound,
        within_branch_bound=bool(branch_gap <= branch_bound),
        eps=eps,
        checks=checks,
        iwl_certificate=iwl_cert,
        dann_certificate=dann_cert,
    )
