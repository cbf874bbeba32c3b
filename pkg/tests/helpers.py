"""Shared test utilities: synthetic RKHS model errors with verified coverage.

The containment oracles need a ground-truth model error that provably lies
inside the GP's beta-scaled confidence intervals (the premise of the
reliability assumption). We construct g as a finite kernel expansion, fit a
GP to noisy samples of it, and then verify the coverage on a dense probe
set, shrinking the expansion coefficients until the intervals hold with
margin.
"""

import numpy as np

from safempc.gp import Dataset, GPPosterior, KernelSpec, fit


class RKHSError:
    """Model error g_j(z) = sum_i alpha_ij k(z, c_i), one expansion per output."""

    def __init__(self, kern: KernelSpec, centers: np.ndarray, coefs: np.ndarray):
        self.kern = kern
        self.centers = centers
        self.coefs = coefs  # (n_centers, p)

    @property
    def output_dim(self) -> int:
        return self.coefs.shape[1]

    def __call__(self, Z) -> np.ndarray:
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        return self.kern(Z, self.centers) @ self.coefs

    def _jac_sups(self, box, n=400, seed=0):
        rng = np.random.default_rng(seed)
        box = np.asarray(box, dtype=float)
        d = box.shape[0]
        rows = np.zeros(self.output_dim)
        entries = np.zeros((self.output_dim, d))
        eps = 1e-5
        for _ in range(n):
            z = rng.uniform(box[:, 0], box[:, 1])
            J = np.zeros((self.output_dim, d))
            for i in range(d):
                dz = np.zeros(d)
                dz[i] = eps
                J[:, i] = (self(z + dz)[0] - self(z - dz)[0]) / (2 * eps)
            rows = np.maximum(rows, np.linalg.norm(J, axis=1))
            entries = np.maximum(entries, np.abs(J))
        return rows, entries

    def lipschitz(self, box, n=400, seed=0, margin=1.3) -> float:
        """Sampled spectral-norm bound on the Jacobian of g over a box."""
        rows, _ = self._jac_sups(box, n, seed)
        return margin * float(np.max(rows))

    def lipschitz_matrix(self, box, n=400, seed=0, margin=1.3) -> np.ndarray:
        """Per-output, per-input sups |d g_j / d z_i| over a box."""
        _, entries = self._jac_sups(box, n, seed)
        return margin * entries


def covered_rkhs_setup(kern: KernelSpec, box, p_out: int, *, n_centers=12,
                       n_train=40, noise_std=0.05, beta=2.0, seed=0,
                       coverage_margin=0.85):
    """(g, gp) with verified |mu_j - g_j| <= coverage_margin * beta * sigma_j.

    Coefficients are scaled down until coverage holds on a dense probe set,
    so downstream containment tests start from a valid premise.
    """
    rng = np.random.default_rng(seed)
    box = np.asarray(box, dtype=float)
    d = box.shape[0]
    centers = rng.uniform(box[:, 0], box[:, 1], size=(n_centers, d))
    coefs = rng.normal(size=(n_centers, p_out))
    Z_train = rng.uniform(box[:, 0], box[:, 1], size=(n_train, d))
    probes = rng.uniform(box[:, 0], box[:, 1], size=(3000, d))

    scale = 1.0
    for _ in range(40):
        g = RKHSError(kern, centers, scale * coefs)
        targets = g(Z_train) + rng.normal(scale=noise_std, size=(n_train, p_out))
        gp = fit(Dataset(Z_train, targets, noise_std), [kern] * p_out, beta=beta)
        mean, std = gp.predict(probes)
        gap = np.abs(mean - g(probes))
        if np.all(gap <= coverage_margin * beta * std):
            return g, gp
        scale *= 0.6
    raise RuntimeError("could not scale the synthetic error into coverage")


def rollout_true_system(prior, g: RKHSError, laws, x0s: np.ndarray) -> list[np.ndarray]:
    """Simulate x+ = h(x, u) + g(x, u) under the given feedback laws for a
    batch of initial states; returns states per step (len(laws) arrays)."""
    X = np.atleast_2d(np.asarray(x0s, dtype=float))
    out = []
    for law in laws:
        U = (X - law.anchor) @ law.K.T + law.k
        Z = np.hstack([X, U])
        H = X @ prior.A.T + U @ prior.B.T + prior.c
        X = H + g(Z)
        out.append(X)
    return out
