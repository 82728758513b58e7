"""Segmentation and reconstruction metrics plus permutation-invariant probing."""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np

GROUPINGS = ("per-frame", "per-video", "per-camera", "cross-camera", "cross-all")
PSNR_CLAMP_DB = 120.0


class MetricPreconditionError(ValueError):
    pass


def _pairs(x: np.ndarray) -> np.ndarray:
    return x * (x - 1) / 2.0


def _codes(x: np.ndarray) -> np.ndarray:
    """Small nonnegative integer codes; empty codes add nothing to pair counts."""
    if np.issubdtype(x.dtype, np.integer):
        lo = x.min()
        if int(x.max()) - int(lo) < 4 * x.size + 64:
            return (x - lo).astype(np.int64)
    return np.unique(x, return_inverse=True)[1].ravel()


def adjusted_rand_index(a, b) -> float:
    """ARI from the contingency table of two labelings of the same items."""
    a = np.asarray(a).ravel()
    b = np.asarray(b).ravel()
    if a.shape != b.shape:
        raise ValueError(f"label arrays differ in length: {a.size} vs {b.size}")
    n = a.size
    if n < 2:
        raise ValueError("ARI needs at least two items")
    ai, bi = _codes(a), _codes(b)
    nb = int(bi.max()) + 1
    cont = np.bincount(ai * nb + bi, minlength=(int(ai.max()) + 1) * nb).astype(np.float64)
    cont = cont.reshape(-1, nb)
    sum_ij = _pairs(cont).sum()
    sum_a = _pairs(cont.sum(axis=1)).sum()
    sum_b = _pairs(cont.sum(axis=0)).sum()
    expected = sum_a * sum_b / _pairs(float(n))
    max_index = (sum_a + sum_b) / 2.0
    if max_index == expected:
        return 1.0
    return float((sum_ij - expected) / (max_index - expected))


def fg_ari(pred, gt, background_id: int = 0) -> float:
    """ARI over the pixels whose ground-truth label is not background."""
    pred = np.asarray(pred).ravel()
    gt = np.asarray(gt).ravel()
    if pred.shape != gt.shape:
        raise ValueError(f"label arrays differ in length: {pred.size} vs {gt.size}")
    fg = gt != background_id
    if not fg.any():
        raise MetricPreconditionError("no foreground pixels")
    return adjusted_rand_index(pred[fg], gt[fg])


def _groups(shape: tuple[int, ...], grouping: str) -> list[tuple]:
    """Index tuples selecting each group's pixels from [T, (K,) H, W] arrays."""
    if grouping not in GROUPINGS:
        raise ValueError(f"grouping must be one of {GROUPINGS}")
    has_cam = len(shape) == 4
    if len(shape) not in (3, 4):
        raise ValueError("masks must be [T,H,W] or [T,K,H,W]")
    T = shape[0]
    if grouping == "per-video":
        return [(slice(None),)]
    if grouping == "per-frame":
        if has_cam:
            return [(t, k) for t in range(T) for k in range(shape[1])]
        return [(t,) for t in range(T)]
    if not has_cam:
        raise ValueError(f"grouping {grouping!r} needs a camera axis")
    K = shape[1]
    if grouping == "per-camera":
        return [(slice(None), k) for k in range(K)]
    if grouping == "cross-camera":
        return [(t,) for t in range(T)]
    return [(slice(None),)]


def grouped_fg_ari(pred, gt, grouping: str = "per-video", background_id: int = 0,
                   skip_empty: bool = False) -> float:
    """Mean FG-ARI over pixel groups.

    Masks are [T, H, W] or [T, K, H, W] (K cameras).  per-frame scores each
    (t[, k]) image; per-video pools every pixel; per-camera pools time for
    each camera; cross-camera pools cameras for each t; cross-all pools all.
    Groups without foreground raise unless ``skip_empty``.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    scores = []
    for idx in _groups(gt.shape, grouping):
        g = gt[idx]
        if skip_empty and not (g != background_id).any():
            continue
        scores.append(fg_ari(pred[idx], g, background_id))
    if not scores:
        raise MetricPreconditionError("no group has foreground pixels")
    return float(np.mean(scores))


def psnr_from_mse(mse: float, peak: float = 1.0) -> float:
    if mse < 1e-12:
        return PSNR_CLAMP_DB
    return float(10.0 * np.log10(peak * peak / mse))


def psnr(pred, target, peak: float = 1.0) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    return psnr_from_mse(float(np.mean((pred - target) ** 2)), peak)


# permutation-invariant linear probing

@dataclass
class ProbeProblem:
    """One episode: slots [T, N, D] and factors {name: [T, M, ...]}."""

    slots: np.ndarray
    factors: dict[str, np.ndarray]

    @property
    def num_objects(self) -> int:
        return next(iter(self.factors.values())).shape[1]


@dataclass
class RidgeProbe:
    """Linear map with an unpenalized intercept."""

    w: np.ndarray
    b: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray, y: np.ndarray, lam: float) -> "RidgeProbe":
        xm = x.mean(axis=0)
        ym = y.mean(axis=0)
        xc = x - xm
        gram = xc.T @ xc + lam * np.eye(x.shape[1])
        w = np.linalg.solve(gram, xc.T @ (y - ym))
        return cls(w, ym - xm @ w)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return x @ self.w + self.b

    def objective(self, x: np.ndarray, y: np.ndarray, lam: float) -> float:
        r = self.predict(x) - y
        return float((r * r).sum() + lam * (self.w * self.w).sum())


@dataclass
class ProbeResult:
    scores: dict[str, dict]
    perms: list[tuple[int, ...]]
    objective_history: list[float]
    rounds: int
    train_idx: np.ndarray
    test_idx: np.ndarray
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(self.scores, indent=2, sort_keys=True)


def _rows(problems, idx, perms, name):
    xs, ys = [], []
    for i in idx:
        p = problems[i]
        y = np.asarray(p.factors[name], dtype=np.float64)
        xs.append(p.slots[:, list(perms[i]), :].reshape(-1, p.slots.shape[-1]))
        ys.append(y.reshape(y.shape[0] * y.shape[1], -1))
    return np.concatenate(xs), np.concatenate(ys)


def best_assignment(pred: np.ndarray, target: np.ndarray) -> tuple[int, ...]:
    """Ordered M-subset of N slots minimizing squared error.

    pred [T, N, F] per-slot predictions, target [T, M, F].  Candidates are
    visited in lexicographic order and the first minimum wins.
    """
    N, M = pred.shape[1], target.shape[1]
    diff = pred[:, :, None, :] - target[:, None, :, :]
    cost = (diff * diff).sum(axis=(0, 3))                 # [N, M]
    perms = np.array(list(itertools.permutations(range(N), M)), dtype=np.int64)
    totals = cost[perms, np.arange(M)].sum(axis=1)
    return tuple(int(v) for v in perms[int(np.argmin(totals))])


def _score(problems, idx, perms, name, probe, categorical, classes):
    x, y = _rows(problems, idx, perms, name)
    if categorical:
        pred = classes[np.argmax(probe.predict(x), axis=1)]
        return {"metric": "accuracy", "value": float(np.mean(pred == y[:, 0]))}
    pred = probe.predict(x)
    sst = ((y - y.mean(axis=0)) ** 2).sum()
    sse = ((y - pred) ** 2).sum()
    return {"metric": "r2", "value": float(1.0 - sse / sst) if sst > 0 else 0.0}


def perm_invariant_probe(problems: list[ProbeProblem], factors=("position",),
                         categorical=("color", "shape", "size"), position_key: str = "position",
                         lam: float = 1e-4, max_rounds: int = 20,
                         holdout: float = 0.25) -> ProbeResult:
    """Jointly fit a position probe and one slot permutation per episode.

    EM on the training episodes: fit the ridge probe on the currently
    assigned (slot, object) rows, then reassign each episode to the ordered
    slot subset with the smallest position error.  Stops at a fixed point or
    after ``max_rounds``.  Held-out episodes are assigned with the final
    position probe.  Every requested factor is then probed on the training
    rows and scored on the held-out rows (R^2 or one-hot argmax accuracy).
    """
    if not problems:
        raise ValueError("no probe problems")
    for p in problems:
        if p.num_objects > p.slots.shape[1]:
            raise MetricPreconditionError(
                f"{p.num_objects} objects but only {p.slots.shape[1]} slots")
    B = len(problems)
    n_test = int(round(B * holdout)) if B > 1 else 0
    train_idx = np.arange(B - n_test)
    test_idx = np.arange(B - n_test, B) if n_test else train_idx
    perms = [tuple(range(p.num_objects)) for p in problems]

    def refit():
        x, y = _rows(problems, train_idx, perms, position_key)
        probe = RidgeProbe.fit(x, y, lam)
        return probe, probe.objective(x, y, lam)

    history = []
    rounds = 0
    probe, obj = refit()
    history.append(obj)
    while rounds < max_rounds:
        rounds += 1
        changed = False
        for i in train_idx:
            p = problems[i]
            new = best_assignment(probe.predict(p.slots), np.asarray(p.factors[position_key], dtype=np.float64))
            changed |= new != perms[i]
            perms[i] = new
        if not changed:
            break
        probe, obj = refit()
        history.append(obj)
    if n_test:
        for i in test_idx:
            p = problems[i]
            perms[i] = best_assignment(probe.predict(p.slots), np.asarray(p.factors[position_key], dtype=np.float64))

    scores = {}
    for name in factors:
        is_cat = name in categorical
        x, y = _rows(problems, train_idx, perms, name)
        classes = None
        if is_cat:
            classes = np.unique(np.concatenate(
                [np.asarray(problems[i].factors[name]).ravel() for i in range(B)]))
            y = (y[:, :1] == classes[None, :]).astype(np.float64)
        fprobe = RidgeProbe.fit(x, y, lam)
        entry = _score(problems, test_idx, perms, name, fprobe, is_cat, classes)
        entry["n_episodes"] = int(len(test_idx))
        scores[name] = entry
    return ProbeResult(scores, perms, history, rounds, train_idx, test_idx)
