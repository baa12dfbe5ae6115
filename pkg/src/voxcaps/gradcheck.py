"""Central finite-difference verification of every analytic backward pass.

The oracle is independent of the code it checks: it only ever calls the
forward function, perturbing one input element at a time with a central
difference of step ``FD_STEP``. Checks run in float64 so the oracle's own
rounding error stays far below the tolerances being enforced.

Relative error is measured against the overall gradient scale,
``max|analytic - numeric| / max(max|analytic|, max|numeric|, tiny)``,
the usual convention for gradient checking.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

FD_STEP = 1e-3
E2E_FD_STEP = 1e-5    # one weight moves thousands of preactivations, so the
                      # chance of some relu crossing its kink inside the
                      # perturbation interval scales with the step; float64
                      # keeps rounding noise ~1e-11 even at this step
TOL_PLAIN = 1e-4      # plain differentiable ops
TOL_ROUTED = 1e-3     # anything whose gradient flows through unrolled routing


def numerical_grad(f: Callable[[np.ndarray], float], x: np.ndarray,
                   h: float = FD_STEP, indices=None) -> np.ndarray:
    """Central finite differences of a scalar-valued f at x.

    ``indices`` optionally restricts the sweep to a subset of flat indices;
    unvisited entries are returned as NaN so callers compare only what was
    computed.
    """
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(-1).copy()
    if indices is None:
        indices = range(flat.size)
        grad = np.zeros(flat.size)
    else:
        grad = np.full(flat.size, np.nan)
    for i in indices:
        orig = flat[i]
        flat[i] = orig + h
        fp = f(flat.reshape(x.shape))
        flat[i] = orig - h
        fm = f(flat.reshape(x.shape))
        flat[i] = orig
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape)


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Worst absolute deviation normalized by the gradient scale."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    mask = np.isfinite(numeric)
    a, n = analytic[mask], numeric[mask]
    if a.size == 0:
        return 0.0
    scale = max(np.abs(a).max(), np.abs(n).max(), 1e-8)
    return float(np.abs(a - n).max() / scale)


def check_grad(f: Callable[[np.ndarray], float], x: np.ndarray,
               analytic: np.ndarray, h: float = FD_STEP, indices=None) -> float:
    """Relative error between an analytic gradient and the FD oracle."""
    return rel_error(analytic, numerical_grad(f, x, h, indices))


@dataclass
class OpReport:
    name: str
    worst_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.worst_err < self.tol

    def line(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return f"{status}  {self.name:<34} worst rel err {self.worst_err:.3e}  (tol {self.tol:.0e})"


def _rand(rng, *shape):
    return rng.standard_normal(shape)


# ---------------------------------------------------------------------------
# Per-operation sweeps. Each returns the worst relative error across seeds.
# ---------------------------------------------------------------------------

def _loss_proj(rng, shape):
    """Fixed random projection turning a tensor-valued op into a scalar loss."""
    return rng.standard_normal(shape)


def sweep_conv3d(seeds) -> float:
    from . import tensor as T
    worst = 0.0
    for seed in seeds:
        rng = np.random.default_rng(seed)
        spec = T.ConvSpec(2, 3, kernel=3, stride=(1, 2, 1), dilation=(2, 1, 1),
                          padding=(2, 1, 1))
        x = _rand(rng, 1, 2, 4, 4, 4)
        w = _rand(rng, 3, 2, 3, 3, 3) * 0.5
        b = _rand(rng, 3) * 0.1
        out_shape = (1, 3) + spec.out_extents(x.shape[2:])
        pw = _loss_proj(rng, out_shape)

        def loss(xv, wv, bv):
            return float((T.conv3d_forward(xv, wv, bv, spec) * pw).sum())

        gx, gw, gb = T.conv3d_backward(pw, x, w, spec)
        worst = max(worst, rel_error(gx, numerical_grad(lambda v: loss(v, w, b), x)))
        worst = max(worst, rel_error(gw, numerical_grad(lambda v: loss(x, v, b), w)))
        worst = max(worst, rel_error(gb, numerical_grad(lambda v: loss(x, w, v), b)))
    return worst


def sweep_deconv3d(seeds) -> float:
    from . import tensor as T
    worst = 0.0
    for seed in seeds:
        rng = np.random.default_rng(seed)
        spec = T.ConvSpec(3, 2, kernel=2, stride=2, padding=0)
        x = _rand(rng, 1, 3, 3, 3, 3)
        w = _rand(rng, 3, 2, 2, 2, 2) * 0.5
        b = _rand(rng, 2) * 0.1
        out_shape = (1, 2) + spec.deconv_out_extents(x.shape[2:])
        pw = _loss_proj(rng, out_shape)

        def loss(xv, wv, bv):
            return float((T.deconv3d_forward(xv, wv, bv, spec) * pw).sum())

        gx, gw, gb = T.deconv3d_backward(pw, x, w, spec)
        worst = max(worst, rel_error(gx, numerical_grad(lambda v: loss(v, w, b), x)))
        worst = max(worst, rel_error(gw, numerical_grad(lambda v: loss(x, v, b), w)))
        worst = max(worst, rel_error(gb, numerical_grad(lambda v: loss(x, w, v), b)))
    return worst


def sweep_batchnorm(seeds) -> float:
    from . import tensor as T
    worst = 0.0
    for seed in seeds:
        rng = np.random.default_rng(seed)
        x = _rand(rng, 2, 3, 3, 2, 2)
        gamma = 1.0 + 0.2 * _rand(rng, 3)
        beta = 0.1 * _rand(rng, 3)
        pw = _loss_proj(rng, x.shape)

        def loss(xv, gv, bv):
            return float((T.batchnorm_forward(xv, gv, bv, None, "train") * pw).sum())

        gx, gg, gb = T.batchnorm_backward(pw, x, gamma)
        worst = max(worst, rel_error(gx, numerical_grad(lambda v: loss(v, gamma, beta), x)))
        worst = max(worst, rel_error(gg, numerical_grad(lambda v: loss(x, v, beta), gamma)))
        worst = max(worst, rel_error(gb, numerical_grad(lambda v: loss(x, gamma, v), beta)))
    return worst


def sweep_elementwise(seeds) -> float:
    from . import tensor as T
    worst = 0.0
    for seed in seeds:
        rng = np.random.default_rng(seed)
        x = _rand(rng, 3, 4, 4) + 0.05     # offset keeps relu away from its kink
        pw = _loss_proj(rng, x.shape)
        g = T.relu_backward(pw, x)
        worst = max(worst, rel_error(
            g, numerical_grad(lambda v: float((T.relu_forward(v) * pw).sum()), x)))

        y = T.softmax_forward(x, axis=1)
        gs = T.softmax_backward(pw, y, axis=1)
        worst = max(worst, rel_error(gs, numerical_grad(
            lambda v: float((T.softmax_forward(v, 1) * pw).sum()), x)))

        pn = _loss_proj(rng, (3, 4))
        gn = T.l2_norm_backward(pn, x, axis=2)
        worst = max(worst, rel_error(gn, numerical_grad(
            lambda v: float((T.l2_norm_forward(v, 2) * pn).sum()), x)))
    return worst


def sweep_squash(seeds) -> float:
    from . import capsules as C
    worst = 0.0
    for seed in seeds:
        rng = np.random.default_rng(seed)
        v = _rand(rng, 5, 4)
        pw = _loss_proj(rng, v.shape)
        g = C.squash_backward(pw, v)
        worst = max(worst, rel_error(g, numerical_grad(
            lambda u: float((C.squash(u) * pw).sum()), v)))
    return worst


def sweep_routing(seeds) -> float:
    from . import capsules as C
    worst = 0.0
    for seed in seeds:
        rng = np.random.default_rng(seed)
        u = _rand(rng, 6, 3, 4)            # [children, parents, dim]
        pw = _loss_proj(rng, (3, 4))

        def loss(uv):
            return float((C.dynamic_routing(uv, iterations=3) * pw).sum())

        v, cache = C.route_forward(u[None], iterations=3)
        gu = C.route_backward(pw[None], u[None], cache)[0]
        worst = max(worst, rel_error(gu, numerical_grad(loss, u)))
    return worst


def sweep_caps_conv(seeds) -> float:
    from . import capsules as C
    worst = 0.0
    for seed in seeds:
        rng = np.random.default_rng(seed)
        spec = C.CapsConvSpec(in_types=2, in_dim=3, out_types=2, out_dim=3,
                              kernel=2, stride=1, padding=0, routing_iterations=3)
        x = _rand(rng, 1, 3, 3, 3, 2, 3)
        w = 0.25 * _rand(rng, *C.caps_weight_shape(spec))
        out_sp = spec.conv.out_extents(x.shape[1:4])
        pw = _loss_proj(rng, (1,) + out_sp + (2, 3))

        def loss(xv, wv):
            return float((C.caps_conv3d_forward(xv, wv, spec)[0] * pw).sum())

        _, cache = C.caps_conv3d_forward(x, w, spec)
        gx, gw = C.caps_conv3d_backward(pw, cache)
        worst = max(worst, rel_error(gx, numerical_grad(lambda v: loss(v, w), x)))
        worst = max(worst, rel_error(gw, numerical_grad(lambda v: loss(x, v), w)))
    return worst


def sweep_losses(seeds) -> float:
    from . import losses as L
    worst = 0.0
    for seed in seeds:
        rng = np.random.default_rng(seed)
        # margins sit at 0.1 and 0.9; sampled well inside so the FD interval
        # never straddles a hinge (the hinge values themselves are pinned by
        # the exact loss-oracle tests)
        lengths = rng.uniform(0.15, 0.85, size=(2, 3, 4))
        onehot = np.zeros_like(lengths)
        idx = rng.integers(0, 4, size=(2, 3))
        for i in range(2):
            for j in range(3):
                onehot[i, j, idx[i, j]] = 1.0
        gm = L.margin_loss_backward(lengths, onehot)
        worst = max(worst, rel_error(gm, numerical_grad(
            lambda v: L.margin_loss(v, onehot), lengths)))

        logits = _rand(rng, 2, 3, 3)
        labels = rng.integers(0, 3, size=(2, 3))
        wts = rng.uniform(0.5, 2.0, size=3)
        gce = L.weighted_cross_entropy_backward(logits, labels, wts)
        worst = max(worst, rel_error(gce, numerical_grad(
            lambda v: L.weighted_cross_entropy(v, labels, wts), logits)))

        recon = _rand(rng, 2, 3, 3)
        orig = _rand(rng, 2, 3, 3)
        mask = (rng.uniform(size=(2, 3, 3)) > 0.4).astype(np.float64)
        gr = L.masked_reconstruction_loss_backward(recon, orig, mask)
        worst = max(worst, rel_error(gr, numerical_grad(
            lambda v: L.masked_reconstruction_loss(v, orig, mask), recon)))

        fa = _rand(rng, 2, 4, 3)
        fb = _rand(rng, 2, 4, 3)
        gp = L.pretext_loss_backward(fa, fb)[0]
        worst = max(worst, rel_error(gp, numerical_grad(
            lambda v: L.pretext_loss(v, fb), fa)))
    return worst


def sweep_network(seeds, params_per_seed: int = 10) -> float:
    """End-to-end check on the 16^3 two-class micro network.

    The >= 200 sampled parameters of the shape contract are spread across the
    seeds (params_per_seed each) to keep the suite inside its time budget.
    A single weight perturbation moves tens of thousands of relu
    preactivations, so any fixed step occasionally straddles a kink; entries
    over half tolerance are retried at smaller steps and judged on the
    converged error. Kink contamination vanishes as the step shrinks while a
    genuinely wrong analytic gradient stays put, so the retry cannot mask a
    real defect.
    """
    from . import network as N
    from . import losses as L

    worst = 0.0
    for seed in seeds:
        rng = np.random.default_rng(seed)
        arch = N.ArchSpec.micro(num_classes=2, in_channels=1)
        net = N.CapsSegNet(arch, seed=int(seed), dtype=np.float64)
        x = _rand(rng, 1, 1, 16, 16, 16)
        labels = (rng.uniform(size=(1, 16, 16, 16)) > 0.7).astype(np.int64)

        def total_loss():
            out = net.forward(x, mode="train")
            parts = L.downstream_terms(out, x, labels, arch.num_classes)
            return parts

        def entry_error(gp, i, h) -> float:
            orig = gp.value.reshape(-1)[i]
            gp.value.reshape(-1)[i] = orig + h
            fp = total_loss().breakdown.total
            gp.value.reshape(-1)[i] = orig - h
            fm = total_loss().breakdown.total
            gp.value.reshape(-1)[i] = orig
            num = (fp - fm) / (2 * h)
            ana = gp.grad.reshape(-1)[i]
            return abs(ana - num) / max(abs(ana), abs(num), 1e-6)

        parts = total_loss()
        net.zero_grad()
        net.backward(parts.g_logits, parts.g_lengths, parts.g_recon)
        named = dict(net.named_params())
        names = sorted(named)
        for _ in range(params_per_seed):
            pname = names[int(rng.integers(0, len(names)))]
            gp = named[pname]
            i = int(rng.integers(0, gp.value.size))
            err = entry_error(gp, i, E2E_FD_STEP)
            for shrink in (10.0, 30.0):
                if err <= TOL_ROUTED / 2:
                    break
                err = min(err, entry_error(gp, i, E2E_FD_STEP / shrink))
            worst = max(worst, err)
    return worst


SCOPES = {
    "tensor": [("conv3d", sweep_conv3d, TOL_PLAIN),
               ("deconv3d", sweep_deconv3d, TOL_PLAIN),
               ("batchnorm", sweep_batchnorm, TOL_PLAIN),
               ("elementwise(relu/softmax/l2)", sweep_elementwise, TOL_PLAIN)],
    "capsules": [("squash", sweep_squash, TOL_PLAIN),
                 ("dynamic_routing", sweep_routing, TOL_ROUTED),
                 ("caps_conv3d", sweep_caps_conv, TOL_ROUTED)],
    "losses": [("losses(margin/ce/recon/pretext)", sweep_losses, TOL_PLAIN)],
    "network": [("end_to_end_micro", sweep_network, TOL_ROUTED)],
}


def run_suite(scope: str = "all", n_seeds: int = 20, base_seed: int = 0):
    """Run the gradient suite; returns a list of OpReport."""
    seeds = [base_seed + i for i in range(n_seeds)]
    scopes = list(SCOPES) if scope == "all" else [scope]
    reports = []
    for sc in scopes:
        if sc not in SCOPES:
            raise ValueError(f"unknown gradcheck scope {sc!r}")
        for name, fn, tol in SCOPES[sc]:
            reports.append(OpReport(name, fn(seeds), tol))
    return reports
