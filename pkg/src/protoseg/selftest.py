"""Built-in verification battery: gradient checks and formula oracles.

Each check reports its max observed error; the CLI `selftest` subcommand
prints one line per check and fails on any violation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import losses, ops
from .prototypes import PrototypeBank

FD_TOL = 1e-3
FD_EPS = 1e-4


@dataclass
class CheckResult:
    name: str
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def _fd(name, loss_fn, inputs, results, tol=FD_TOL):
    err = ops.fd_check(loss_fn, inputs, eps=FD_EPS)
    results.append(CheckResult(name, err, tol))


def _rand_bank(rng, c=3, k=2, d=5, eta=0.9) -> PrototypeBank:
    return PrototypeBank(vectors=rng.normal(size=(c, k, d)), eta=eta)


def run_selftest(seeds=range(5)) -> list[CheckResult]:
    results: list[CheckResult] = []
    for seed in seeds:
        rng = np.random.default_rng(seed)

        # conv3d: scalar loss = weighted sum of outputs
        x = rng.normal(size=(1, 4, 4, 4))
        k = rng.normal(size=(2, 1, 3, 3, 3))
        b = rng.normal(size=2)
        wsum = rng.normal(size=(2, 4, 4, 4))

        def conv_loss(inp):
            xi, ki, bi = inp
            y = ops.conv3d_forward(xi, ki, bi)
            gy = wsum
            gx, gk, gb = ops.conv3d_backward(xi, ki, gy)
            return float((y * wsum).sum()), [gx, gk, gb]

        _fd(f"conv3d[seed={seed}]", conv_loss, [x, k, b], results)

        # relu
        xr = rng.normal(size=8) + 0.05  # keep away from the kink
        wr = rng.normal(size=8)

        def relu_loss(inp):
            (xi,) = inp
            return float((ops.relu_forward(xi) * wr).sum()), [
                ops.relu_backward(xi, wr)
            ]

        _fd(f"relu[seed={seed}]", relu_loss, [xr], results)

        # linear + softmax + CE (Eq. 3 composition)
        z = rng.normal(size=(3, 6))
        w = rng.normal(size=(4, 6))
        t = rng.integers(0, 4, size=3)

        def lin_ce(inp):
            zi, wi = inp
            probs, cache = losses.linear_head_forward(zi, wi)
            loss = losses.ce_loss(probs, t)
            gz, gw = losses.linear_head_backward(cache, losses.ce_grad(probs, t))
            return loss, [gz, gw]

        _fd(f"linear+softmax+ce[seed={seed}]", lin_ce, [z, w], results)

        # softmax with temperature
        logits = rng.normal(size=5)
        wsm = rng.normal(size=5)

        def sm_loss(inp):
            (li,) = inp
            p = ops.softmax_forward(li, temperature=0.7)
            return float((p * wsm).sum()), [
                ops.softmax_backward(p, wsm, temperature=0.7)
            ]

        _fd(f"softmax[seed={seed}]", sm_loss, [logits], results)

        # cosine similarity
        a = rng.normal(size=6)
        bb = rng.normal(size=6)

        def cos_loss(inp):
            (ai,) = inp
            return ops.cosine_sim(ai, bb), [ops.cosine_sim_backward(ai, bb, 1.0)]

        _fd(f"cosine_sim[seed={seed}]", cos_loss, [a], results)

        # prototype head + consistency (Eq. 1 + Eq. 4 composition)
        bank = _rand_bank(rng)
        zp = rng.normal(size=(4, 5))
        tp = rng.integers(0, 3, size=4)

        def proto_cons(inp):
            (zi,) = inp
            probs, cache = losses.proto_head_forward(zi, bank, 0.5)
            loss = losses.consistency_loss(probs, tp)
            gz = losses.proto_head_backward(
                cache, losses.consistency_grad(probs, tp)
            )
            return loss, [gz]

        _fd(f"proto_head+consistency[seed={seed}]", proto_cons, [zp], results)

        # dice through the linear head (Eq. 4 dice term)
        def lin_dice(inp):
            zi, wi = inp
            probs, cache = losses.linear_head_forward(zi, wi)
            loss = losses.dice_loss(probs, t)
            gz, gw = losses.linear_head_backward(cache, losses.dice_grad(probs, t))
            return loss, [gz, gw]

        _fd(f"linear+dice[seed={seed}]", lin_dice, [z, w], results)

        # contrastive loss (Eq. 5)
        def cont(inp):
            (zi,) = inp
            loss, cache = losses.contrastive_forward(zi, bank, 0.5)
            return loss, [losses.contrastive_backward(cache)]

        _fd(f"contrastive[seed={seed}]", cont, [zp], results)

        # total objective (Eq. 6 composition), lambda and gamma fixed
        lam, gamma = 0.37, 0.1
        bank4 = PrototypeBank(
            vectors=np.random.default_rng(seed + 100).normal(size=(4, 2, 6)), eta=0.9
        )

        def eq6(inp):
            zi, wi = inp
            probs_l, cache_l = losses.linear_head_forward(zi, wi)
            l_lin = losses.consistency_loss(probs_l, t)
            gz, gw = losses.linear_head_backward(
                cache_l, losses.consistency_grad(probs_l, t)
            )
            probs_p, cache_p = losses.proto_head_forward(zi, bank4, 0.5)
            l_proto = losses.consistency_loss(probs_p, t)
            gz_p = losses.proto_head_backward(
                cache_p, losses.consistency_grad(probs_p, t)
            )
            l_cont, cache_c = losses.contrastive_forward(zi, bank4, 0.5)
            gz_c = losses.contrastive_backward(cache_c)
            bd = losses.total_loss(l_lin, l_proto, l_cont, lam, gamma)
            return bd.total, [gz + lam * (gz_p + gamma * gz_c), gw]

        _fd(f"total_objective[seed={seed}]", eq6, [z, w], results)

    # formula spot checks (exact oracles)
    results.append(
        CheckResult(
            "ramp_endpoints",
            max(
                abs(losses.ramp_lambda(0, 100) - np.exp(-5.0)),
                abs(losses.ramp_lambda(100, 100) - 1.0),
            ),
            1e-12,
        )
    )
    p = ops.softmax_forward(np.array([10.0, 0.0]))
    results.append(
        CheckResult("softmax_scalar", abs(p[0] - np.e**10 / (np.e**10 + 1)), 1e-12)
    )
    return results


def format_report(results: list[CheckResult]) -> str:
    lines = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        lines.append(
            f"{status} {r.name} max_error={r.max_error:.3e} tolerance={r.tolerance:.0e}"
        )
    n_fail = sum(not r.passed for r in results)
    lines.append(f"{len(results) - n_fail}/{len(results)} checks passed")
    return "\n".join(lines)
