"""Chain CRF over the lattice: potentials, exact inference, and training.

The unnormalized log score of a full assignment is

    sum_t  omega . f(point candidate at layer t)
  + sum_t  mu . g(path chosen at gap t)

with all features scaled by the model's fitted scaler. Inference is exact
dynamic programming in log space: Viterbi for the argmax, forward-backward
for the partition function and the marginal expectations the gradient needs.
Ties in Viterbi resolve to the lowest candidate index, then lowest path index
(front to back), matching plain lexicographic enumeration order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .features import (
    BIAS_FEATURES,
    FeatureCatalog,
    FilterConfig,
    Scaler,
    fit_scaler,
    path_features,
    point_features,
)
from .lattice import LabeledLattice, Lattice, LatticeConfig, PairKey, build_lattice
from .road_network import RoadNetwork
from .trajectory_io import Trajectory

MODEL_VERSION = 1


# ---------------------------------------------------------------------------
# model

@dataclass(frozen=True)
class CrfModel:
    omega: np.ndarray
    mu: np.ndarray
    catalog: FeatureCatalog
    scaler: Scaler
    lattice_cfg: LatticeConfig
    version: int = MODEL_VERSION

    def __post_init__(self):
        if len(self.omega) != self.catalog.n_point or len(self.mu) != self.catalog.n_path:
            raise ValueError("weight lengths do not match catalog lengths")
        if not (np.all(np.isfinite(self.omega)) and np.all(np.isfinite(self.mu))):
            raise ValueError("weights must be finite")

    def nonzero_count(self) -> int:
        return int(np.count_nonzero(self.omega) + np.count_nonzero(self.mu))


def model_to_dict(model: CrfModel) -> dict:
    cat = model.catalog
    sc = model.scaler
    lc = model.lattice_cfg
    return {
        "version": model.version,
        "point_features": list(cat.point_names),
        "path_features": list(cat.path_names),
        "omega": [float(x) for x in model.omega],
        "mu": [float(x) for x in model.mu],
        "scaler": {
            "point_min": [float(x) for x in sc.point_min],
            "point_max": [float(x) for x in sc.point_max],
            "path_min": [float(x) for x in sc.path_min],
            "path_max": [float(x) for x in sc.path_max],
        },
        "filter": {"v_min_kmh": cat.filter_cfg.v_min_kmh, "val_0": cat.filter_cfg.val_0},
        "lattice": {
            "radius_m": lc.radius_m,
            "radius_max_m": lc.radius_max_m,
            "max_candidates_k": lc.max_candidates_k,
            "paths_per_pair_k": lc.paths_per_pair_k,
            "length_cap_factor": lc.length_cap_factor,
            "length_cap_floor_m": lc.length_cap_floor_m,
            "speed_cap_kmh": lc.speed_cap_kmh,
        },
    }


def model_from_dict(doc: dict) -> CrfModel:
    if doc.get("version") != MODEL_VERSION:
        raise ValueError(f"unsupported model version {doc.get('version')!r}")
    filt = FilterConfig(**doc["filter"])
    catalog = FeatureCatalog(
        point_names=tuple(doc["point_features"]),
        path_names=tuple(doc["path_features"]),
        filter_cfg=filt,
    )
    sc = doc["scaler"]
    scaler = Scaler(
        point_min=np.array(sc["point_min"], dtype=float),
        point_max=np.array(sc["point_max"], dtype=float),
        path_min=np.array(sc["path_min"], dtype=float),
        path_max=np.array(sc["path_max"], dtype=float),
        point_bias_mask=np.array([n in BIAS_FEATURES for n in catalog.point_names]),
        path_bias_mask=np.array([n in BIAS_FEATURES for n in catalog.path_names]),
    )
    for arr, n in (
        (scaler.point_min, catalog.n_point),
        (scaler.point_max, catalog.n_point),
        (scaler.path_min, catalog.n_path),
        (scaler.path_max, catalog.n_path),
    ):
        if len(arr) != n:
            raise ValueError("scaler array length does not match catalog")
    return CrfModel(
        omega=np.array(doc["omega"], dtype=float),
        mu=np.array(doc["mu"], dtype=float),
        catalog=catalog,
        scaler=scaler,
        lattice_cfg=LatticeConfig(**doc["lattice"]),
    )


def save_model(model: CrfModel, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(model_to_dict(model), sort_keys=True, indent=2))
        fh.write("\n")


def load_model(path) -> CrfModel:
    with open(path, "r", encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# featurization

@dataclass(frozen=True, eq=False)
class FeaturizedLattice:
    """Feature matrices of one lattice, DP-ready.

    Per gap, path rows are flattened in (pair, path index) order; contiguous
    pair groups are described by ``gap_group_start`` / ``gap_group_pairs`` and
    ``gap_pair_map`` maps (i, j) to (first row, count).
    """

    lattice: Lattice
    point_feats: list[np.ndarray]
    gap_feats: list[np.ndarray]
    gap_pair_i: list[np.ndarray]
    gap_pair_j: list[np.ndarray]
    gap_group_start: list[np.ndarray]
    gap_group_pairs: list[np.ndarray]
    gap_pair_map: list[dict[PairKey, tuple[int, int]]]

    @property
    def n_cands(self) -> list[int]:
        return [len(layer) for layer in self.lattice.point_layers]


def featurize_lattice(lattice: Lattice, net: RoadNetwork, catalog: FeatureCatalog) -> FeaturizedLattice:
    """Raw (unscaled) feature matrices for every candidate and path."""
    point_feats = []
    for obs, layer in zip(lattice.observations, lattice.point_layers):
        point_feats.append(
            np.array([point_features(obs, state, catalog) for state in layer], dtype=float).reshape(
                len(layer), catalog.n_point
            )
        )
    gap_feats, gpi, gpj, gstart, gpairs, gmap = [], [], [], [], [], []
    for t, layer in enumerate(lattice.path_layers):
        obs_a = lattice.observations[t]
        obs_b = lattice.observations[t + 1]
        rows, pi, pj, starts, pairs = [], [], [], [], []
        pair_map: dict[PairKey, tuple[int, int]] = {}
        for (i, j), paths in sorted(layer.items()):
            starts.append(len(rows))
            pairs.append((i, j))
            pair_map[(i, j)] = (len(rows), len(paths))
            for path in paths:
                rows.append(path_features(path, obs_a, obs_b, net, catalog))
                pi.append(i)
                pj.append(j)
        gap_feats.append(np.array(rows, dtype=float).reshape(len(rows), catalog.n_path))
        gpi.append(np.array(pi, dtype=int))
        gpj.append(np.array(pj, dtype=int))
        gstart.append(np.array(starts, dtype=int))
        gpairs.append(np.array(pairs, dtype=int).reshape(len(pairs), 2))
        gmap.append(pair_map)
    return FeaturizedLattice(
        lattice=lattice,
        point_feats=point_feats,
        gap_feats=gap_feats,
        gap_pair_i=gpi,
        gap_pair_j=gpj,
        gap_group_start=gstart,
        gap_group_pairs=gpairs,
        gap_pair_map=gmap,
    )


def scale_featurized(fl: FeaturizedLattice, scaler: Scaler) -> FeaturizedLattice:
    return FeaturizedLattice(
        lattice=fl.lattice,
        point_feats=[scaler.scale_points(m) for m in fl.point_feats],
        gap_feats=[scaler.scale_paths(m) for m in fl.gap_feats],
        gap_pair_i=fl.gap_pair_i,
        gap_pair_j=fl.gap_pair_j,
        gap_group_start=fl.gap_group_start,
        gap_group_pairs=fl.gap_group_pairs,
        gap_pair_map=fl.gap_pair_map,
    )


def prepare_lattice(lattice: Lattice, net: RoadNetwork, model: CrfModel) -> FeaturizedLattice:
    """Featurize and scale with the model's catalog and fitted scaler."""
    return scale_featurized(featurize_lattice(lattice, net, model.catalog), model.scaler)


# ---------------------------------------------------------------------------
# inference

@dataclass(frozen=True)
class Assignment:
    """One full labeling: candidate index per point layer, ((i, j), path index) per gap."""

    point_idx: tuple[int, ...]
    path_choice: tuple[tuple[PairKey, int], ...]


def _lse_vec(v: np.ndarray) -> float:
    m = float(v.max())
    if not np.isfinite(m):
        return -np.inf
    return m + float(np.log(np.exp(v - m).sum()))


def _lse_axis(mat: np.ndarray, axis: int) -> np.ndarray:
    mx = mat.max(axis=axis)
    safe = np.where(np.isfinite(mx), mx, 0.0)
    with np.errstate(divide="ignore"):
        out = safe + np.log(np.exp(mat - np.expand_dims(safe, axis)).sum(axis=axis))
    return np.where(np.isfinite(mx), out, -np.inf)


def _point_scores(fl: FeaturizedLattice, omega: np.ndarray) -> list[np.ndarray]:
    return [m @ omega for m in fl.point_feats]


def _gap_matrix(fl: FeaturizedLattice, t: int, scores: np.ndarray, reducer) -> np.ndarray:
    """Reduce flat path scores of gap t into an (n_t, n_t+1) table, -inf where no path."""
    na = len(fl.lattice.point_layers[t])
    nb = len(fl.lattice.point_layers[t + 1])
    mat = np.full((na, nb), -np.inf)
    grouped = reducer(scores, fl.gap_group_start[t])
    pairs = fl.gap_group_pairs[t]
    mat[pairs[:, 0], pairs[:, 1]] = grouped
    return mat


def _forward_backward(
    fl: FeaturizedLattice, omega: np.ndarray, mu: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray]:
    """(log Z, expected point feature sums, expected path feature sums)."""
    pts = _point_scores(fl, omega)
    n = len(pts)
    gap_scores = [m @ mu for m in fl.gap_feats]
    mats = [_gap_matrix(fl, t, gap_scores[t], np.logaddexp.reduceat) for t in range(n - 1)]

    alphas = [pts[0]]
    for t in range(n - 1):
        alphas.append(_lse_axis(alphas[t][:, None] + mats[t], axis=0) + pts[t + 1])
    log_z = _lse_vec(alphas[-1])

    betas = [np.zeros(len(pts[-1]))]
    for t in range(n - 2, -1, -1):
        nxt = pts[t + 1] + betas[0]
        betas.insert(0, _lse_axis(mats[t] + nxt[None, :], axis=1))

    exp_point = np.zeros(fl.point_feats[0].shape[1])
    for t in range(n):
        marg = np.exp(alphas[t] + betas[t] - log_z)
        exp_point += marg @ fl.point_feats[t]
    exp_path = np.zeros(fl.gap_feats[0].shape[1] if n > 1 else 0)
    for t in range(n - 1):
        nxt = pts[t + 1] + betas[t + 1]
        log_p = alphas[t][fl.gap_pair_i[t]] + gap_scores[t] + nxt[fl.gap_pair_j[t]] - log_z
        exp_path += np.exp(log_p) @ fl.gap_feats[t]
    return log_z, exp_point, exp_path


def log_partition(fl: FeaturizedLattice, model: CrfModel) -> float:
    """log Z: log-space forward pass summing over all compatible assignments."""
    pts = _point_scores(fl, model.omega)
    alpha = pts[0]
    for t in range(len(pts) - 1):
        scores = fl.gap_feats[t] @ model.mu
        mat = _gap_matrix(fl, t, scores, np.logaddexp.reduceat)
        alpha = _lse_axis(alpha[:, None] + mat, axis=0) + pts[t + 1]
    return _lse_vec(alpha)


def log_score(fl: FeaturizedLattice, model: CrfModel, assignment: Assignment) -> float:
    """Unnormalized log score of one assignment; raises on incompatibility."""
    pts = _point_scores(fl, model.omega)
    n = len(pts)
    if len(assignment.point_idx) != n or len(assignment.path_choice) != n - 1:
        raise ValueError("incompatible assignment: layer counts do not match")
    total = 0.0
    for t, c in enumerate(assignment.point_idx):
        if not (0 <= c < len(pts[t])):
            raise ValueError(f"incompatible assignment: candidate {c} out of range at layer {t}")
        total += float(pts[t][c])
    for t, (pair, rank) in enumerate(assignment.path_choice):
        want = (assignment.point_idx[t], assignment.point_idx[t + 1])
        if tuple(pair) != want:
            raise ValueError(f"incompatible assignment: gap {t} pair {pair} != {want}")
        entry = fl.gap_pair_map[t].get(want)
        if entry is None or not (0 <= rank < entry[1]):
            raise ValueError(f"incompatible assignment: no path {rank} for pair {want} at gap {t}")
        total += float(fl.gap_feats[t][entry[0] + rank] @ model.mu)
    return total


def _viterbi_w(
    fl: FeaturizedLattice, omega: np.ndarray, mu: np.ndarray
) -> tuple[Assignment, float]:
    pts = _point_scores(fl, omega)
    n = len(pts)
    if n == 1:
        c = int(np.argmax(pts[0]))
        return Assignment((c,), ()), float(pts[0][c])
    gap_scores = [m @ mu for m in fl.gap_feats]
    mats = [_gap_matrix(fl, t, gap_scores[t], np.maximum.reduceat) for t in range(n - 1)]
    best = [None] * n
    best[n - 1] = pts[n - 1]
    for t in range(n - 2, -1, -1):
        best[t] = pts[t] + (mats[t] + best[t + 1][None, :]).max(axis=1)
    points = [int(np.argmax(best[0]))]
    score = float(best[0][points[0]])
    choices = []
    for t in range(n - 1):
        options = mats[t][points[-1], :] + best[t + 1]
        nxt = int(np.argmax(options))
        start, count = fl.gap_pair_map[t][(points[-1], nxt)]
        seg = gap_scores[t][start : start + count]
        choices.append(((points[-1], nxt), int(np.argmax(seg))))
        points.append(nxt)
    return Assignment(tuple(points), tuple(choices)), score


def viterbi(fl: FeaturizedLattice, model: CrfModel) -> tuple[Assignment, float]:
    """Maximum-score compatible assignment and its unnormalized log score."""
    return _viterbi_w(fl, np.asarray(model.omega, dtype=float), np.asarray(model.mu, dtype=float))


# ---------------------------------------------------------------------------
# likelihood and training

def _empirical_sums(
    fl: FeaturizedLattice, labeled: LabeledLattice
) -> tuple[np.ndarray, np.ndarray]:
    emp_f = np.zeros(fl.point_feats[0].shape[1])
    for t, c in enumerate(labeled.point_label_idx):
        emp_f += fl.point_feats[t][c]
    emp_g = np.zeros(fl.gap_feats[0].shape[1] if fl.gap_feats else 0)
    for t, choice in enumerate(labeled.path_label):
        pair, rank = choice
        start, _ = fl.gap_pair_map[t][tuple(pair)]
        emp_g += fl.gap_feats[t][start + rank]
    return emp_f, emp_g


def log_likelihood_and_gradient(
    pairs: list[tuple[FeaturizedLattice, LabeledLattice]],
    omega: np.ndarray,
    mu: np.ndarray,
    l2_lambda: float = 0.0,
) -> tuple[float, np.ndarray]:
    """Penalized conditional log likelihood and its gradient over omega||mu.

    value = sum_i [log_score(truth_i) - log Z_i] - l2_lambda * ||w||^2.
    Lattices must be free of missing-label flags. Accumulation follows list
    order, so results are bit-reproducible.
    """
    kf, ks = len(omega), len(mu)
    emp = np.zeros(kf + ks)
    exp = np.zeros(kf + ks)
    value = 0.0
    for fl, labeled in pairs:
        if labeled.missing_label:
            raise ValueError("lattice with missing_label cannot contribute to the likelihood")
        emp_f, emp_g = _empirical_sums(fl, labeled)
        log_z, exp_f, exp_g = _forward_backward(fl, omega, mu)
        value += float(emp_f @ omega) + (float(emp_g @ mu) if len(emp_g) else 0.0) - log_z
        emp[:kf] += emp_f
        exp[:kf] += exp_f
        if len(emp_g):
            emp[kf:] += emp_g
        if len(exp_g):
            exp[kf:] += exp_g
    w = np.concatenate([omega, mu])
    value -= l2_lambda * float(w @ w)
    grad = emp - exp - 2.0 * l2_lambda * w
    return value, grad


@dataclass(frozen=True)
class TrainConfig:
    regularizer: str = "l2"
    lambda_: float | None = None
    grad_tolerance: float = 1e-5
    max_iterations: int = 500
    lambda_grid: tuple[float, ...] = (0.01, 0.1, 1.0, 10.0)
    holdout_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.regularizer not in ("l1", "l2"):
            raise ValueError("regularizer must be 'l1' or 'l2'")
        if self.lambda_ is not None and self.lambda_ < 0:
            raise ValueError("lambda must be >= 0")
        if not self.lambda_grid:
            raise ValueError("lambda_grid must be non-empty")
        if not (0.0 < self.holdout_fraction <= 0.5):
            raise ValueError("holdout_fraction must lie in (0, 0.5]")


@dataclass
class TrainReport:
    regularizer: str
    lambda_selected: float
    iterations: int
    converged: bool
    final_objective: float
    final_grad_inf_norm: float
    nonzero_count: int
    objective_history: list[float] = field(default_factory=list)
    monotone: bool = True
    excluded_missing_label: int = 0
    holdout_errors: dict[float, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "regularizer": self.regularizer,
            "lambda_selected": self.lambda_selected,
            "iterations": self.iterations,
            "converged": self.converged,
            "final_objective": self.final_objective,
            "final_grad_inf_norm": self.final_grad_inf_norm,
            "nonzero_count": self.nonzero_count,
            "objective_history": self.objective_history,
            "monotone": self.monotone,
            "excluded_missing_label": self.excluded_missing_label,
            "holdout_errors": {repr(k): v for k, v in sorted(self.holdout_errors.items())},
        }


def _soft_threshold(x: np.ndarray, thresh: float) -> np.ndarray:
    return np.sign(x) * np.maximum(np.abs(x) - thresh, 0.0)


def _optimize_l2(pairs, kf, ks, lam, cfg: TrainConfig):
    """L-BFGS minimization of the negative penalized log likelihood."""
    cache: dict[bytes, tuple[float, np.ndarray]] = {}

    def objective(w):
        key = w.tobytes()
        if key not in cache:
            value, grad = log_likelihood_and_gradient(pairs, w[:kf], w[kf:], l2_lambda=lam)
            cache[key] = (-value, -grad)
            if len(cache) > 4096:
                cache.clear()
        return cache[key]

    history: list[float] = []

    def on_step(w):
        history.append(objective(np.asarray(w))[0])

    w0 = np.zeros(kf + ks)
    res = minimize(
        objective,
        w0,
        jac=True,
        method="L-BFGS-B",
        callback=on_step,
        options={"maxiter": cfg.max_iterations, "gtol": cfg.grad_tolerance, "ftol": 1e-13},
    )
    w = np.asarray(res.x, dtype=float)
    final_obj, final_grad = objective(w)
    grad_inf = float(np.abs(final_grad).max()) if len(final_grad) else 0.0
    converged = grad_inf <= cfg.grad_tolerance
    return w, {
        "iterations": int(res.nit),
        "converged": converged,
        "final_objective": float(final_obj),
        "final_grad_inf_norm": grad_inf,
        "history": history,
    }


def _optimize_l1(pairs, kf, ks, lam, cfg: TrainConfig):
    """Accelerated proximal gradient (monotone FISTA with backtracking).

    Minimizes nll(w) + lam * ||w||_1; the proximal step yields exact zeros.
    The monotone variant keeps the best iterate, so the recorded objective
    history never increases even though the extrapolated sequence may.
    """

    def smooth(w):
        value, grad = log_likelihood_and_gradient(pairs, w[:kf], w[kf:], l2_lambda=0.0)
        return -value, -grad

    def total(w, fval):
        return fval + lam * float(np.abs(w).sum())

    def prox_residual(point, grad, step):
        z = _soft_threshold(point - grad / step, lam / step)
        return z, float(np.abs(step * (point - z)).max())

    w = np.zeros(kf + ks)
    w_prev = w
    y = w
    f_w, _ = smooth(w)
    tot_w = total(w, f_w)
    history = [tot_w]
    t_mom = 1.0
    step_l = 1.0
    converged = False
    iterations = 0
    for _ in range(cfg.max_iterations):
        iterations += 1
        f_y, g_y = smooth(y)
        step_l = max(step_l / 2.0, 1e-8)
        while True:
            z = _soft_threshold(y - g_y / step_l, lam / step_l)
            dz = z - y
            f_z, _ = smooth(z)
            if f_z <= f_y + float(g_y @ dz) + step_l / 2.0 * float(dz @ dz) + 1e-12:
                break
            step_l *= 2.0
        gen_grad_inf = float(np.abs(step_l * (y - z)).max())
        t_next = (1.0 + np.sqrt(1.0 + 4.0 * t_mom * t_mom)) / 2.0
        tot_z = total(z, f_z)
        if tot_z <= tot_w:
            w_next, tot_next = z, tot_z
        else:
            w_next, tot_next = w, tot_w
        y = w_next + (t_mom / t_next) * (z - w_next) + ((t_mom - 1.0) / t_next) * (w_next - w_prev)
        w_prev, w, tot_w, t_mom = w, w_next, tot_next, t_next
        history.append(tot_w)
        if gen_grad_inf <= cfg.grad_tolerance:
            converged = True
            break
    _, g_final = smooth(w)
    _, final_residual = prox_residual(w, g_final, step_l)
    return w, {
        "iterations": iterations,
        "converged": converged,
        "final_objective": history[-1],
        "final_grad_inf_norm": final_residual,
        "history": history,
    }


def _optimize(pairs, kf, ks, lam, cfg: TrainConfig):
    if cfg.regularizer == "l2":
        return _optimize_l2(pairs, kf, ks, lam, cfg)
    return _optimize_l1(pairs, kf, ks, lam, cfg)


def _point_error_on(pairs, omega, mu) -> float:
    wrong = 0
    total = 0
    for fl, labeled in pairs:
        assignment, _ = _viterbi_w(fl, omega, mu)
        for pred, true in zip(assignment.point_idx, labeled.point_label_idx):
            total += 1
            if pred != true:
                wrong += 1
    return wrong / total if total else 0.0


def train(
    labeled: list[LabeledLattice],
    net: RoadNetwork,
    catalog: FeatureCatalog,
    config: TrainConfig,
    lattice_cfg: LatticeConfig | None = None,
) -> tuple[CrfModel, TrainReport]:
    """Fit weights from zero init; lambda from the holdout grid unless pinned.

    Lattices flagged missing_label are excluded (the truth has probability
    zero there) and counted in the report.
    """
    lattice_cfg = lattice_cfg or LatticeConfig()
    usable = [l for l in labeled if not l.missing_label]
    excluded = len(labeled) - len(usable)
    if not usable:
        raise ValueError("no usable lattices: every instance is missing its label")

    raw_usable = [featurize_lattice(l.lattice, net, catalog) for l in usable]
    point_matrix = np.concatenate([m for fl in raw_usable for m in fl.point_feats])
    path_rows = [m for fl in raw_usable for m in fl.gap_feats if len(m)]
    path_matrix = (
        np.concatenate(path_rows) if path_rows else np.empty((0, catalog.n_path))
    )
    scaler = fit_scaler(point_matrix, path_matrix, catalog)
    pairs = [(scale_featurized(fl, scaler), lab) for fl, lab in zip(raw_usable, usable)]

    kf, ks = catalog.n_point, catalog.n_path
    holdout_errors: dict[float, float] = {}
    if config.lambda_ is not None:
        lam = config.lambda_
    else:
        # Hold out a slice of ALL labeled instances: flagged ones cannot be
        # fit on, but their point error is still well defined (layers whose
        # truth was eliminated simply count as wrong, as in evaluation).
        by_id = {id(l): i for i, l in enumerate(usable)}
        scored = [
            pairs[by_id[id(l)]]
            if id(l) in by_id
            else (scale_featurized(featurize_lattice(l.lattice, net, catalog), scaler), l)
            for l in labeled
        ]
        perm = np.random.default_rng(config.seed).permutation(len(scored))
        n_hold = min(max(1, int(config.holdout_fraction * len(scored) + 0.5)), len(scored) - 1)
        hold = [scored[i] for i in perm[:n_hold]]
        fit = [scored[i] for i in perm[n_hold:] if not scored[i][1].missing_label]
        if not fit:
            lam = sorted(config.lambda_grid)[0]
        else:
            lam = None
            best_err = np.inf
            for cand in sorted(config.lambda_grid):
                w_cand, _ = _optimize(fit, kf, ks, cand, config)
                err = _point_error_on(hold, w_cand[:kf], w_cand[kf:])
                holdout_errors[cand] = err
                if err < best_err:
                    best_err = err
                    lam = cand
    w, info = _optimize(pairs, kf, ks, lam, config)
    model = CrfModel(
        omega=w[:kf],
        mu=w[kf:],
        catalog=catalog,
        scaler=scaler,
        lattice_cfg=lattice_cfg,
    )
    history = info["history"]
    monotone = all(b <= a + 1e-7 for a, b in zip(history, history[1:]))
    report = TrainReport(
        regularizer=config.regularizer,
        lambda_selected=float(lam),
        iterations=info["iterations"],
        converged=info["converged"],
        final_objective=info["final_objective"],
        final_grad_inf_norm=info["final_grad_inf_norm"],
        nonzero_count=model.nonzero_count(),
        objective_history=history,
        monotone=monotone,
        excluded_missing_label=excluded,
        holdout_errors=holdout_errors,
    )
    return model, report


# ---------------------------------------------------------------------------
# end-to-end matching

@dataclass(frozen=True, eq=False)
class MatchResult:
    """Per-observation edge predictions plus per-gap route predictions.

    ``point_edges[i]`` is the predicted edge for input observation i (None
    when dropped). ``gap_preds`` maps (a, b) observation-index pairs that are
    adjacent in some lattice piece to the predicted edge sequence; gaps at
    piece boundaries have no entry.
    """

    car_id: int
    n_obs: int
    point_edges: tuple[int | None, ...]
    gap_preds: dict[tuple[int, int], tuple[int, ...]]
    piece_log_scores: tuple[float, ...]
    dropped_observations: tuple[int, ...]
    lattices: tuple[Lattice, ...]
    assignments: tuple[Assignment, ...]


def decode_pieces(
    car_id: int, n_obs: int, pieces: list[Lattice], net: RoadNetwork, model: CrfModel
) -> MatchResult:
    """Viterbi-decode prebuilt lattice pieces into a MatchResult."""
    point_edges: list[int | None] = [None] * n_obs
    gap_preds: dict[tuple[int, int], tuple[int, ...]] = {}
    scores = []
    assignments = []
    if pieces:
        dropped = pieces[0].dropped_observations
    else:
        dropped = tuple(range(n_obs))
    for piece in pieces:
        fl = prepare_lattice(piece, net, model)
        assignment, score = viterbi(fl, model)
        assignments.append(assignment)
        scores.append(score)
        for t, c in enumerate(assignment.point_idx):
            point_edges[piece.obs_indices[t]] = piece.point_layers[t][c].edge_id
        for t, (pair, rank) in enumerate(assignment.path_choice):
            a, b = piece.obs_indices[t], piece.obs_indices[t + 1]
            path = piece.path_layers[t][tuple(pair)][rank]
            gap_preds[(a, b)] = path.edge_ids
    return MatchResult(
        car_id=car_id,
        n_obs=n_obs,
        point_edges=tuple(point_edges),
        gap_preds=gap_preds,
        piece_log_scores=tuple(scores),
        dropped_observations=dropped,
        lattices=tuple(pieces),
        assignments=tuple(assignments),
    )


def match(
    traj: Trajectory, net: RoadNetwork, model: CrfModel, lattice_cfg: LatticeConfig | None = None
) -> MatchResult:
    """Decode the most likely route for one trajectory."""
    cfg = lattice_cfg or model.lattice_cfg
    pieces = build_lattice(traj, net, cfg)
    return decode_pieces(traj.car_id, len(traj), pieces, net, model)


def match_result_to_dict(result: MatchResult) -> dict:
    return {
        "version": MODEL_VERSION,
        "car_id": result.car_id,
        "n_obs": result.n_obs,
        "point_edges": list(result.point_edges),
        "gap_preds": {f"{a},{b}": list(seq) for (a, b), seq in sorted(result.gap_preds.items())},
        "piece_log_scores": list(result.piece_log_scores),
        "dropped_observations": list(result.dropped_observations),
    }
