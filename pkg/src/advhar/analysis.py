"""Post-hoc analyses: classical multidimensional scaling of adversarial vs.
clean samples, the feature-overlap correlation, and CSV emitters for heatmap
and epsilon-sweep figures.

MDS is the Torgerson construction: double-center the squared distance
matrix, then take the top two eigenpairs by symmetric power iteration with
deflation (only two are ever needed). Negative eigenvalues, which a true
Euclidean distance matrix cannot produce but floating point can, truncate to
zero and are flagged.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from advhar.harness import success_score


class ConvergenceError(RuntimeError):
    """Power iteration failed to reach tolerance."""


# ---------------------------------------------------------------------------
# distances
# ---------------------------------------------------------------------------

@dataclass
class DistanceMatrix:
    values: np.ndarray           # (n, n) Euclidean distances
    ids: list = field(default_factory=list)    # sample identifiers
    tags: list = field(default_factory=list)   # e.g. "clean" / "adversarial"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        n = len(self.values)
        if self.values.shape != (n, n):
            raise ValueError("distance matrix must be square")
        if not self.ids:
            self.ids = list(range(n))
        if not self.tags:
            self.tags = ["sample"] * n

    def __len__(self):
        return len(self.values)


def distance_matrix(samples, ids=None, tags=None) -> DistanceMatrix:
    """Pairwise Euclidean distances over flattened sample vectors."""
    samples = np.asarray(samples, dtype=np.float64)
    flat = samples.reshape(len(samples), -1)
    sq = (flat ** 2).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * flat @ flat.T
    np.maximum(d2, 0.0, out=d2)
    D = np.sqrt(d2)
    np.fill_diagonal(D, 0.0)
    D = 0.5 * (D + D.T)
    return DistanceMatrix(D, list(ids) if ids is not None else [],
                          list(tags) if tags is not None else [])


# ---------------------------------------------------------------------------
# classical MDS
# ---------------------------------------------------------------------------

@dataclass
class Embedding2D:
    coordinates: np.ndarray      # (n, 2)
    eigenvalues: np.ndarray      # top two, descending, clipped at zero
    stress: float
    negative_truncated: bool
    iterations: tuple            # power-iteration counts per eigenpair
    ids: list = field(default_factory=list)
    tags: list = field(default_factory=list)


def _power_iteration(B, shift, round_index=0, tol=1e-10, max_iter=10000):
    """Largest algebraic eigenpair of symmetric B via shifted power iteration.

    The shift makes B + shift*I positive semidefinite so the dominant
    eigenvalue is the largest algebraic one. Each deflation round starts from
    a distinct seeded random vector: with a shared start, the second round
    can begin exactly orthogonal to the eigendirection it is after whenever
    the top eigenvalues are degenerate. Convergence is declared when the
    eigen-residual is small relative to the shifted matrix scale; deflation
    noise makes anything much below that unattainable in floating point.
    """
    n = len(B)
    rng = np.random.default_rng(0x5EED + round_index)
    v = rng.standard_normal(n)
    v /= np.linalg.norm(v)
    M = B + shift * np.eye(n)
    scale = max(1.0, 2.0 * shift)
    for it in range(1, max_iter + 1):
        w = M @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0 - shift, v, it  # v spans the null space
        v = w / norm
        Mv = M @ v
        lam = float(v @ Mv)
        residual = np.linalg.norm(Mv - lam * v)
        if residual <= tol * scale:
            return lam - shift, v, it
    raise ConvergenceError(
        f"power iteration did not converge in {max_iter} iterations "
        f"(residual {residual:.3e})")


def classical_mds(D: DistanceMatrix, tol=1e-10, max_iter=10000) -> Embedding2D:
    """Torgerson scaling to two dimensions.

    B = -1/2 J D^2 J with J the centering matrix; coordinates are
    eigenvector * sqrt(eigenvalue) for the top two eigenpairs.
    """
    n = len(D)
    if n < 3:
        raise ValueError("need at least three points")
    D2 = D.values ** 2
    J = np.eye(n) - np.ones((n, n)) / n
    B = -0.5 * J @ D2 @ J
    B = 0.5 * (B + B.T)

    # Gershgorin-style shift guarantees the shifted matrix is PSD, so power
    # iteration homes in on the largest *algebraic* eigenvalue
    shift = float(np.abs(B).sum(axis=1).max())
    eigvals, eigvecs, iters = [], [], []
    M = B.copy()
    for round_index in range(2):
        lam, v, it = _power_iteration(M, shift, round_index,
                                      tol=tol, max_iter=max_iter)
        eigvals.append(lam)
        eigvecs.append(v)
        iters.append(it)
        M = M - lam * np.outer(v, v)

    eigvals = np.array(eigvals)
    negative = bool(np.any(eigvals < 0))
    clipped = np.maximum(eigvals, 0.0)
    coords = np.stack([eigvecs[0] * np.sqrt(clipped[0]),
                       eigvecs[1] * np.sqrt(clipped[1])], axis=1)

    recon = distance_matrix(coords).values
    denom = float((D.values ** 2).sum())
    stress = float(np.sqrt(((D.values - recon) ** 2).sum() / denom)) if denom > 0 else 0.0
    return Embedding2D(coords, clipped, stress, negative, tuple(iters),
                       ids=list(D.ids), tags=list(D.tags))


# ---------------------------------------------------------------------------
# top-k adversarial selection
# ---------------------------------------------------------------------------

def topk_adversarial(batch, target_scores, target_index, k, seed=0):
    """Indices of the k adversarial samples most confidently classified into
    the target class by the target model.

    Successful samples (argmax == target) rank first by target-class
    confidence; if fewer than k succeeded the remainder fills in by
    confidence; if none succeeded, k seeded-random samples stand in.
    """
    n = len(batch)
    if n == 0:
        raise ValueError("empty adversarial batch")
    if k > n:
        raise ValueError(f"k={k} exceeds batch size {n}")
    target_scores = np.asarray(target_scores, dtype=np.float64)
    pred = np.argmax(target_scores, axis=1)
    confidence = target_scores[:, target_index]
    success = pred == target_index
    if not np.any(success):
        rng = np.random.default_rng(seed)
        return np.sort(rng.choice(n, size=k, replace=False))
    order = np.lexsort((-confidence, ~success))  # successes first, then score
    return order[:k]


def mean_nearest_clean_distance(adv_points, clean_points):
    """Quantitative overlap proxy: mean distance from each adversarial point
    to its nearest clean point."""
    adv = np.asarray(adv_points, dtype=np.float64).reshape(len(adv_points), -1)
    clean = np.asarray(clean_points, dtype=np.float64).reshape(len(clean_points), -1)
    d2 = ((adv ** 2).sum(axis=1)[:, None] + (clean ** 2).sum(axis=1)[None, :]
          - 2.0 * adv @ clean.T)
    np.maximum(d2, 0.0, out=d2)
    return float(np.sqrt(d2.min(axis=1)).mean())


# ---------------------------------------------------------------------------
# feature-overlap correlation
# ---------------------------------------------------------------------------

@dataclass
class OverlapCase:
    name: str
    cross_accuracy: float        # target model accuracy on source test set, %
    transfer_success: float      # targeted BIM success on the target, %

    def __post_init__(self):
        for v in (self.cross_accuracy, self.transfer_success):
            if not 0.0 <= v <= 100.0:
                raise ValueError("overlap case values must be percentages")


@dataclass
class OverlapReport:
    cases: list
    spearman_rho: float


def _average_ranks(values):
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(x, y):
    """Rank correlation with average ranks on ties."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) != len(y) or len(x) < 2:
        raise ValueError("need two equal-length sequences of >= 2 values")
    rx = _average_ranks(x)
    ry = _average_ranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = np.sqrt((rx ** 2).sum() * (ry ** 2).sum())
    if denom == 0.0:
        return 0.0
    return float(np.clip((rx * ry).sum() / denom, -1.0, 1.0))


def overlap_correlation(cases) -> OverlapReport:
    """Pair cross-evaluation accuracy with targeted transfer success per case
    and report their Spearman rank correlation."""
    cases = [c if isinstance(c, OverlapCase) else OverlapCase(*c) for c in cases]
    if len(cases) < 3:
        raise ValueError("need at least three transfer cases")
    rho = spearman([c.cross_accuracy for c in cases],
                   [c.transfer_success for c in cases])
    return OverlapReport(cases=cases, spearman_rho=rho)


# ---------------------------------------------------------------------------
# CSV emitters
# ---------------------------------------------------------------------------

def emit_heatmap_csv(report, path_prefix):
    """One wide CSV per targeted flag (rows = target models, columns =
    attacks) at each epsilon, plus a long-format CSV for sweep curves."""
    if not report.cells:
        raise ValueError("empty report")
    written = []
    for targeted in sorted({c.targeted for c in report.cells}):
        for eps in sorted({c.epsilon for c in report.cells if c.targeted == targeted}):
            cells = [c for c in report.cells
                     if c.targeted == targeted and c.epsilon == eps]
            attacks = sorted({c.attack for c in cells})
            targets = sorted({c.target_id for c in cells})
            by_key = {(c.target_id, c.attack): c.success_target for c in cells}
            tag = "targeted" if targeted else "untargeted"
            path = f"{path_prefix}.heatmap.{tag}.eps{eps}.csv"
            with open(path, "w", encoding="utf-8") as fh:
                fh.write("target," + ",".join(attacks) + "\n")
                for tgt in targets:
                    row = [repr(by_key[(tgt, a)]) if (tgt, a) in by_key else ""
                           for a in attacks]
                    fh.write(tgt + "," + ",".join(row) + "\n")
            written.append(path)
    curve_path = f"{path_prefix}.curves.csv"
    with open(curve_path, "w", encoding="utf-8") as fh:
        fh.write("mode,attack,epsilon,targeted,source_id,target_id,"
                 "success_source,success_target,n\n")
        for c in sorted(report.cells, key=lambda c: (c.targeted, c.attack,
                                                     c.epsilon, c.target_id)):
            fh.write(f"{c.mode},{c.attack},{c.epsilon!r},{int(c.targeted)},"
                     f"{c.source_id},{c.target_id},{c.success_source!r},"
                     f"{c.success_target!r},{c.n}\n")
    written.append(curve_path)
    return written


def write_embedding_csv(embedding: Embedding2D, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("id,tag,dim1,dim2\n")
        for i in range(len(embedding.coordinates)):
            fh.write(f"{embedding.ids[i]},{embedding.tags[i]},"
                     f"{embedding.coordinates[i, 0]!r},"
                     f"{embedding.coordinates[i, 1]!r}\n")
