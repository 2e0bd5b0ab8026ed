"""Central finite-difference checks of every hand-written gradient.

Each suite draws random instances, computes the analytic gradient and a
central-difference estimate (step ``h``), and records the relative error
``||analytic - numeric|| / max(||analytic||, ||numeric||)``.
"""

from dataclasses import dataclass

import numpy as np

from .cotrain import wce_loss, wkl_loss
from .model import PeerModel
from .pec import (
    CalibrationParams,
    ecl_loss,
    enll_loss,
    evidence_from_logits,
    kl_dirichlet_uniform,
)

STEP = 1e-5


def numeric_grad(f, x, h=STEP):
    """Central differences of scalar ``f`` with respect to array ``x`` (modified in place, restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + h
        fp = f()
        x[i] = orig - h
        fm = f()
        x[i] = orig
        g[i] = (fp - fm) / (2 * h)
    return g


def relative_error(a, n):
    a, n = np.ravel(a), np.ravel(n)
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale == 0:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


@dataclass
class SuiteResult:
    name: str
    max_rel_error: float
    tolerance: float
    instances: int

    @property
    def passed(self):
        return self.max_rel_error <= self.tolerance


def _instance(rng, N=None, C=None):
    N = N or int(rng.integers(2, 7))
    C = C or int(rng.integers(3, 8))
    z = rng.normal(0.0, 2.0, size=(N, C))
    theta = rng.normal(-1.0, 1.5, size=C)
    labels = rng.integers(0, C, size=N)
    return z, theta, labels


def _pec_suite(name, loss_fn, rng, n, tol, h):
    worst = 0.0
    for _ in range(n):
        z, theta, labels = _instance(rng)

        def value():
            state = evidence_from_logits(z, CalibrationParams(theta))
            return loss_fn(state, labels).value

        state = evidence_from_logits(z, CalibrationParams(theta))
        lw = loss_fn(state, labels)
        worst = max(worst,
                    relative_error(lw.grad_logits, numeric_grad(value, z, h)),
                    relative_error(lw.grad_theta, numeric_grad(value, theta, h)))
    return SuiteResult(name, worst, tol, n)


def _random_R(rng, N, C):
    R = np.zeros((N, C))
    R[np.arange(N), rng.integers(0, C, size=N)] = rng.uniform(0, 1, size=N)
    return R


def _peer_suite(name, loss_fn, rng, n, tol, h):
    worst = 0.0
    for _ in range(n):
        z1, _, _ = _instance(rng)
        z2 = rng.normal(0.0, 2.0, size=z1.shape)
        R1, R2 = _random_R(rng, *z1.shape), _random_R(rng, *z1.shape)
        out = loss_fn(z1, z2, R1, R2)

        def value():
            return loss_fn(z1, z2, R1, R2).value

        worst = max(worst,
                    relative_error(out.grad_logits1, numeric_grad(value, z1, h)),
                    relative_error(out.grad_logits2, numeric_grad(value, z2, h)))
    return SuiteResult(name, worst, tol, n)


def _model_loss(kind, net, net2, x, labels, R1, R2):
    _, z = net.forward(x)
    if kind == "ecl":
        lw = ecl_loss(evidence_from_logits(z, net.calibration()), labels, 0.5)
        return lw.value, lw.grad_logits, lw.grad_theta
    _, z2 = net2.forward(x)
    fn = wce_loss if kind == "wce" else wkl_loss
    out = fn(z, z2, R1, R2)
    return out.value, out.grad_logits1, None


def _model_suite(kind, rng, n, tol, h, N=4, C=5, d_in=8, d_emb=4):
    worst = 0.0
    for _ in range(n):
        seed = int(rng.integers(2**31))
        net = PeerModel(d_in, d_emb, C, seed=seed)
        net.b = rng.normal(0.0, 0.3, size=d_emb)
        net.theta = rng.normal(-1.0, 1.0, size=C)
        net2 = PeerModel(d_in, d_emb, C, seed=seed + 1)
        x = rng.normal(size=(N, d_in))
        x /= np.linalg.norm(x, axis=1, keepdims=True)
        labels = rng.integers(0, C, size=N)
        R1, R2 = _random_R(rng, N, C), _random_R(rng, N, C)

        _, gz, gt = _model_loss(kind, net, net2, x, labels, R1, R2)
        analytic = net.backward(x, gz, gt)
        for name in ("W", "b", "P", "theta"):
            if kind != "ecl" and name == "theta":
                continue
            param = getattr(net, name)
            numeric = numeric_grad(lambda: _model_loss(kind, net, net2, x, labels, R1, R2)[0], param, h)
            worst = max(worst, relative_error(analytic[name], numeric))
    return SuiteResult(f"{kind}_end_to_end", worst, tol, n)


def run_all(seed=0, instances=10, h=STEP, tol=1e-6, tol_end_to_end=1e-5):
    """Run every suite; returns a list of :class:`SuiteResult`."""
    rng = np.random.default_rng(seed)
    results = [
        _pec_suite("enll", enll_loss, rng, instances, tol, h),
        _pec_suite("kl_dirichlet", lambda s, y: kl_dirichlet_uniform(s), rng, instances, tol, h),
        _pec_suite("ecl", lambda s, y: ecl_loss(s, y, 0.5), rng, instances, tol, h),
        _peer_suite("wce", wce_loss, rng, instances, tol, h),
        _peer_suite("wkl", wkl_loss, rng, instances, tol, h),
    ]
    for kind in ("ecl", "wce", "wkl"):
        results.append(_model_suite(kind, rng, instances, tol_end_to_end, h))
    return results


def format_report(results):
    lines = [f"{'suite':<20} {'max_rel_error':>14} {'tolerance':>10}  status"]
    for r in results:
        lines.append(f"{r.name:<20} {r.max_rel_error:>14.3e} {r.tolerance:>10.0e}  "
                     f"{'ok' if r.passed else 'FAIL'}")
    return "\n".join(lines)
