"""MR relaxation signal models and classical voxelwise parameter fitting.

Two magnitude signal models are supported:

* inversion recovery (T1):  ``|A - B * exp(-t / T1*)|`` with the derived
  longitudinal relaxation time ``T1 = (B/A - 1) * T1*``,
* echo decay (T2):          ``A * exp(-t / T2)``.

Fitting is damped Gauss-Newton (Levenberg-Marquardt) on the signed model,
batched over voxels. The magnitude in the T1 model discards signal polarity,
so the fitter restores it by trying a set of sign hypotheses on the
earliest samples and keeping the one with the lowest magnitude-domain
residual. Positivity of the time constants is enforced by fitting their
logarithm.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "RelaxTimes",
    "ParameterMap",
    "VoxelFit",
    "FitResult",
    "signal_t1",
    "signal_t2",
    "derive_t1",
    "fit_voxel",
    "fit_map",
]

# physiological parameter ranges (ms for time constants), used by the
# multi-start grid and by the phantom generator
T1_STAR_RANGE_MS = (200.0, 2000.0)
T2_RANGE_MS = (20.0, 200.0)
AMPLITUDE_RANGE = (0.1, 3.0)

# Levenberg-Marquardt schedule
_LM_DAMPING0 = 1e-3
_LM_FACTOR = 10.0
_LM_MAX_ITER = 200
_LM_REL_TOL = 1e-10
_LM_DAMPING_MAX = 1e12
# log time-constant bounds keep exp() finite during iteration
_LOG_T_BOUNDS = (np.log(1e-3), np.log(1e7))


@dataclass(frozen=True)
class RelaxTimes:
    """Inversion times (T1) or echo times (T2), in milliseconds.

    Times need not be sorted, but duplicates are forbidden. A zero echo
    time is allowed (T2-prepared acquisitions commonly start at t=0).
    """

    times: np.ndarray
    kind: str

    def __post_init__(self):
        if self.kind not in ("t1", "t2"):
            raise ValueError(f"kind must be 't1' or 't2', got {self.kind!r}")
        times = np.asarray(self.times, dtype=np.float64)
        if times.ndim != 1 or times.size == 0:
            raise ValueError("times must be a nonempty 1-D list")
        if np.any(times < 0):
            raise ValueError("relaxation times must be nonnegative")
        if np.unique(times).size != times.size:
            raise ValueError("duplicate relaxation times are forbidden")
        object.__setattr__(self, "times", times)

    @property
    def k_t(self) -> int:
        return self.times.size

    @property
    def num_params(self) -> int:
        return 3 if self.kind == "t1" else 2


@dataclass
class ParameterMap:
    """Voxelwise relaxometry parameters.

    T1 kind carries (a, b, t1_star) plus the derived t1; T2 kind carries
    (a, t2). Unused fields are None.
    """

    kind: str
    a: np.ndarray
    b: np.ndarray | None = None
    t1_star: np.ndarray | None = None
    t1: np.ndarray | None = None
    t2: np.ndarray | None = None

    def arrays(self) -> dict[str, np.ndarray]:
        """Named parameter maps, in a fixed order (for I/O and metrics)."""
        if self.kind == "t1":
            return {"a": self.a, "b": self.b, "t1_star": self.t1_star, "t1": self.t1}
        return {"a": self.a, "t2": self.t2}

    def fitted_arrays(self) -> dict[str, np.ndarray]:
        """Like :meth:`arrays` but only the directly fitted parameters."""
        out = self.arrays()
        out.pop("t1", None)
        return out


@dataclass
class VoxelFit:
    """Result of fitting a single voxel."""

    kind: str
    a: float = 0.0
    b: float = 0.0
    t1_star: float = 0.0
    t1: float = 0.0
    t2: float = 0.0
    residual: float = 0.0
    converged: bool = False
    degenerate: bool = False


@dataclass
class FitResult:
    """Voxelwise fit over a map.

    ``converged`` marks voxels whose LM iteration met the tolerance;
    ``degenerate`` marks voxels where no fit was attempted (outside the
    mask, or an all-zero signal).
    """

    pmap: ParameterMap
    residual: np.ndarray
    converged: np.ndarray
    degenerate: np.ndarray


def signal_t1(a, b, t1_star, t):
    """Magnitude inversion-recovery signal ``|a - b * exp(-t/t1_star)|``."""
    t1_star = np.asarray(t1_star, dtype=np.float64)
    if np.any(t1_star <= 0):
        raise ValueError("t1_star must be positive")
    return np.abs(a - b * np.exp(-np.asarray(t, dtype=np.float64) / t1_star))


def signal_t2(a, t2, t):
    """Echo decay signal ``a * exp(-t/t2)``."""
    t2 = np.asarray(t2, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    if np.any(t2 <= 0):
        raise ValueError("t2 must be positive")
    if np.any(a < 0):
        raise ValueError("amplitude must be nonnegative")
    return a * np.exp(-np.asarray(t, dtype=np.float64) / t2)


def derive_t1(a, b, t1_star, epsilon: float = 1e-12):
    """Derived longitudinal relaxation time ``(b/a - 1) * t1_star``.

    Voxels with ``a <= epsilon`` cannot be divided through; they map to 0
    and are flagged.

    Returns
    -------
    (t1, flagged) : tuple of np.ndarray
        The derived map and a boolean map of degenerate voxels.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    t1_star = np.asarray(t1_star, dtype=np.float64)
    flagged = a <= epsilon
    t1 = np.zeros(np.broadcast(a, b, t1_star).shape)
    np.divide(b, a, out=t1, where=~flagged)
    t1 = np.where(flagged, 0.0, (t1 - 1.0) * t1_star)
    return t1, flagged


# ---------------------------------------------------------------------------
# signed models over packed parameter vectors (last column = log time const)
# ---------------------------------------------------------------------------

def _model_t1(p: np.ndarray, t: np.ndarray) -> np.ndarray:
    decay = np.exp(-t[None, :] * np.exp(-p[:, 2:3]))
    return p[:, 0:1] - p[:, 1:2] * decay


def _jac_t1(p: np.ndarray, t: np.ndarray) -> np.ndarray:
    inv_t1s = np.exp(-p[:, 2])
    decay = np.exp(-t[None, :] * inv_t1s[:, None])
    jac = np.empty((p.shape[0], t.size, 3))
    jac[:, :, 0] = 1.0
    jac[:, :, 1] = -decay
    jac[:, :, 2] = -p[:, 1:2] * decay * (t[None, :] * inv_t1s[:, None])
    return jac


def _model_t2(p: np.ndarray, t: np.ndarray) -> np.ndarray:
    return p[:, 0:1] * np.exp(-t[None, :] * np.exp(-p[:, 1:2]))


def _jac_t2(p: np.ndarray, t: np.ndarray) -> np.ndarray:
    inv_t2 = np.exp(-p[:, 1])
    decay = np.exp(-t[None, :] * inv_t2[:, None])
    jac = np.empty((p.shape[0], t.size, 2))
    jac[:, :, 0] = decay
    jac[:, :, 1] = p[:, 0:1] * decay * (t[None, :] * inv_t2[:, None])
    return jac


def _lm(model, jac, p0, data, t, record=None):
    """Batched Levenberg-Marquardt. Accepted steps never increase the SSE.

    Parameters are (V, P), data (V, k_t). The last parameter column is a
    log time constant and is clipped to keep the exponentials finite.
    Returns (p, sse, converged).
    """
    p = p0.copy()
    n_vox = p.shape[0]
    lam = np.full(n_vox, _LM_DAMPING0)
    resid = model(p, t) - data
    sse = np.sum(resid * resid, axis=1)
    converged = np.zeros(n_vox, dtype=bool)
    active = np.ones(n_vox, dtype=bool)
    run = None
    if record is not None:
        run = [sse.copy()]
        record.append(run)

    for _ in range(_LM_MAX_ITER):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        pa = p[idx]
        ra = resid[idx]
        jac_a = jac(pa, t)
        jtj = np.einsum("vkp,vkq->vpq", jac_a, jac_a)
        jtr = np.einsum("vkp,vk->vp", jac_a, ra)
        n_par = pa.shape[1]
        damped = jtj.copy()
        diag = np.einsum("vpp->vp", jtj).copy()
        # strictly positive diagonal keeps the system positive definite
        damped[:, np.arange(n_par), np.arange(n_par)] += (
            lam[idx, None] * np.maximum(diag, 1e-12) + 1e-14)
        step = np.linalg.solve(damped, -jtr[:, :, None])[:, :, 0]
        p_try = pa + step
        p_try[:, -1] = np.clip(p_try[:, -1], *_LOG_T_BOUNDS)
        r_try = model(p_try, t) - data[idx]
        sse_try = np.sum(r_try * r_try, axis=1)
        sse_try = np.where(np.isfinite(sse_try), sse_try, np.inf)

        accept = sse_try < sse[idx]
        rel = np.abs(sse[idx] - sse_try) / np.maximum(sse[idx], 1e-300)
        done = accept & (rel < _LM_REL_TOL)

        acc_idx = idx[accept]
        p[acc_idx] = p_try[accept]
        resid[acc_idx] = r_try[accept]
        sse[acc_idx] = sse_try[accept]
        lam[acc_idx] = np.maximum(lam[acc_idx] / _LM_FACTOR, 1e-12)
        rej_idx = idx[~accept]
        lam[rej_idx] *= _LM_FACTOR

        converged[idx[done]] = True
        active[idx[done]] = False
        # damping blown up: the step size is effectively zero, stop trying
        active[rej_idx[lam[rej_idx] > _LM_DAMPING_MAX]] = False
        if run is not None:
            run.append(sse.copy())
    return p, sse, converged


def _linear_amplitude_init(data: np.ndarray, t: np.ndarray, log_tc: float,
                           kind: str) -> tuple[np.ndarray, np.ndarray]:
    """Exact least-squares amplitudes for a fixed time constant.

    The signed models are linear in their amplitudes, so for each grid
    value of the time constant the optimal (possibly negative) amplitudes
    have a closed form. Returns (params, sse) for this grid value.
    """
    decay = np.exp(-t * np.exp(-log_tc))
    if kind == "t1":
        design = np.stack([np.ones_like(t), -decay], axis=1)  # (k_t, 2)
        gram = design.T @ design
        rhs = data @ design                                   # (V, 2)
        amps = rhs @ np.linalg.inv(gram).T
        pred = amps @ design.T
        p = np.concatenate([amps, np.full((data.shape[0], 1), log_tc)], axis=1)
    else:
        denom = max(np.sum(decay * decay), 1e-300)
        a = (data @ decay) / denom
        pred = a[:, None] * decay[None, :]
        p = np.stack([a, np.full(data.shape[0], log_tc)], axis=1)
    sse = np.sum((pred - data) ** 2, axis=1)
    return p, sse


def _grid_init(data: np.ndarray, t: np.ndarray, kind: str) -> np.ndarray:
    lo, hi = T1_STAR_RANGE_MS if kind == "t1" else T2_RANGE_MS
    best_p = None
    best_sse = None
    for log_tc in np.log(np.geomspace(lo, hi, 3)):
        p, sse = _linear_amplitude_init(data, t, log_tc, kind)
        if best_p is None:
            best_p, best_sse = p, sse
        else:
            better = sse < best_sse
            best_p[better] = p[better]
            best_sse = np.minimum(best_sse, sse)
    return best_p


def _sign_hypotheses(times: np.ndarray) -> list[np.ndarray]:
    """Sign-restoration hypotheses for magnitude T1 data.

    All sign combinations of the min(k_t, 4) earliest samples, plus the
    longer monotone prefix flips (polarity crossing after the 4th sample);
    without the latter, crossings beyond the enumerated samples are
    unrecoverable.
    """
    k_t = times.size
    order = np.argsort(times)
    m = min(k_t, 4)
    hyps = []
    for bits in range(2 ** m):
        signs = np.ones(k_t)
        for j in range(m):
            if bits >> j & 1:
                signs[order[j]] = -1.0
        hyps.append(signs)
    for j in range(m + 1, k_t + 1):
        signs = np.ones(k_t)
        signs[order[:j]] = -1.0
        hyps.append(signs)
    return hyps


def _fit_t1_batch(mags, t, record=None):
    best = None
    for signs in _sign_hypotheses(t):
        signed = mags * signs[None, :]
        p0 = _grid_init(signed, t, "t1")
        p, _, conv = _lm(_model_t1, _jac_t1, p0, signed, t, record=record)
        # (A, B) and (-A, -B) give the same magnitudes; canonicalize B >= 0
        flip = (p[:, 1] < 0) | ((p[:, 1] == 0) & (p[:, 0] < 0))
        p[flip, 0:2] *= -1.0
        rms = np.sqrt(np.mean((np.abs(_model_t1(p, t)) - mags) ** 2, axis=1))
        if best is None:
            best = [p, rms, conv]
        else:
            better = rms < best[1]
            best[0][better] = p[better]
            best[1][better] = rms[better]
            best[2][better] = conv[better]
    p, rms, conv = best
    return {"a": p[:, 0], "b": p[:, 1], "t1_star": np.exp(p[:, 2])}, rms, conv


def _fit_t2_batch(mags, t, record=None):
    p0 = _grid_init(mags, t, "t2")
    p, _, conv = _lm(_model_t2, _jac_t2, p0, mags, t, record=record)
    rms = np.sqrt(np.mean((_model_t2(p, t) - mags) ** 2, axis=1))
    return {"a": p[:, 0], "t2": np.exp(p[:, 1])}, rms, conv


def fit_voxel(signal: np.ndarray, times: RelaxTimes,
              record_sse: list | None = None) -> VoxelFit:
    """Fit the relaxation model of ``times.kind`` to one voxel's signal.

    Parameters
    ----------
    signal : np.ndarray
        Magnitude samples, one per relaxation time.
    times : RelaxTimes
        Acquisition times and model kind.
    record_sse : list, optional
        If given, receives one SSE trace per LM run (one run per sign
        hypothesis); each trace is never increasing.

    Returns
    -------
    VoxelFit
        Best parameters over the multi-start sign hypotheses, the final
        RMS residual in the magnitude domain, and status flags.
    """
    signal = np.asarray(signal, dtype=np.float64).reshape(-1)
    if signal.size != times.k_t:
        raise ValueError(f"signal has {signal.size} samples, expected {times.k_t}")
    if times.k_t < times.num_params:
        raise ValueError("need at least as many samples as model parameters")
    if np.max(np.abs(signal)) == 0.0:
        return VoxelFit(kind=times.kind, degenerate=True)

    mags = signal[None, :]
    if times.kind == "t1":
        params, rms, conv = _fit_t1_batch(mags, times.times, record=record_sse)
        t1, _ = derive_t1(params["a"], params["b"], params["t1_star"])
        return VoxelFit(kind="t1", a=float(params["a"][0]), b=float(params["b"][0]),
                        t1_star=float(params["t1_star"][0]), t1=float(t1[0]),
                        residual=float(rms[0]), converged=bool(conv[0]))
    params, rms, conv = _fit_t2_batch(mags, times.times, record=record_sse)
    return VoxelFit(kind="t2", a=float(params["a"][0]), t2=float(params["t2"][0]),
                    residual=float(rms[0]), converged=bool(conv[0]))


def fit_map(stack: np.ndarray, times: RelaxTimes,
            mask: np.ndarray | None = None) -> FitResult:
    """Voxelwise fit of a magnitude baseline stack.

    Parameters
    ----------
    stack : np.ndarray
        Magnitude images, shape ``(k_t, H, W)``.
    times : RelaxTimes
        Acquisition times and model kind.
    mask : np.ndarray, optional
        Boolean object mask; voxels outside it are skipped and flagged
        degenerate. Defaults to all voxels.

    Notes
    -----
    Voxels are fitted jointly by a vectorized LM iteration whose results
    are identical to fitting them one at a time (no cross-voxel state).
    """
    stack = np.asarray(stack, dtype=np.float64)
    if stack.ndim != 3 or stack.shape[0] != times.k_t:
        raise ValueError(f"expected stack of shape ({times.k_t}, H, W)")
    shape = stack.shape[1:]
    if mask is None:
        mask = np.ones(shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != shape:
        raise ValueError("mask shape does not match stack")

    signals = stack.reshape(times.k_t, -1).T  # (V, k_t)
    fit_sel = mask.reshape(-1) & (np.max(np.abs(signals), axis=1) > 0)
    degenerate = ~fit_sel.reshape(shape)

    names = ["a", "b", "t1_star"] if times.kind == "t1" else ["a", "t2"]
    flat = {name: np.zeros(signals.shape[0]) for name in names}
    residual = np.zeros(signals.shape[0])
    converged = np.zeros(signals.shape[0], dtype=bool)

    if np.any(fit_sel):
        batch = signals[fit_sel]
        if times.kind == "t1":
            params, rms, conv = _fit_t1_batch(batch, times.times)
        else:
            params, rms, conv = _fit_t2_batch(batch, times.times)
        for name in names:
            flat[name][fit_sel] = params[name]
        residual[fit_sel] = rms
        converged[fit_sel] = conv

    maps = {name: arr.reshape(shape) for name, arr in flat.items()}
    if times.kind == "t1":
        t1, _ = derive_t1(maps["a"], maps["b"], maps["t1_star"])
        t1 = np.where(degenerate, 0.0, t1)
        pmap = ParameterMap(kind="t1", a=maps["a"], b=maps["b"],
                            t1_star=maps["t1_star"], t1=t1)
    else:
        pmap = ParameterMap(kind="t2", a=maps["a"], t2=maps["t2"])
    return FitResult(pmap=pmap, residual=residual.reshape(shape),
                     converged=converged.reshape(shape), degenerate=degenerate)
