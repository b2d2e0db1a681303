"""Latent-space analyses: 2-D projections, first/third CCA, straight transversals."""

import os
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import artifacts
from .exceptions import DegenerateInput, DimensionMismatch, InsufficientSamples, IoError
from .synthetic import ACTIVITY_CLASSES

CCA_EPS = 1e-4


def _check_matrix(X, name="input"):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} has non-finite entries")
    return X


class PCA2(TransformerMixin, BaseEstimator):
    """Principal components with a fixed sign: each component's largest loading is positive."""

    def __init__(self, n_components=2):
        self.n_components = n_components

    def fit(self, X, y=None):
        X = _check_matrix(X)
        if len(X) < 3:
            raise InsufficientSamples(f"need at least 3 vectors, got {len(X)}")
        self.mean_ = X.mean(axis=0)
        centered = X - self.mean_
        if not np.any(centered):
            raise DegenerateInput("all vectors are identical")
        _, s, vt = np.linalg.svd(centered, full_matrices=False)
        k = self.n_components
        comps = vt[:k]
        if len(comps) < k:
            comps = np.vstack([comps, np.zeros((k - len(comps), X.shape[1]))])
            s = np.append(s, np.zeros(k - len(s)))
        signs = np.sign(comps[np.arange(k), np.argmax(np.abs(comps), axis=1)])
        signs[signs == 0] = 1.0
        self.components_ = comps * signs[:, None]
        self.explained_variance_ = s[:k] ** 2 / (len(X) - 1)
        return self

    def transform(self, X):
        check_is_fitted(self, "components_")
        return (_check_matrix(X) - self.mean_) @ self.components_.T


def project_2d(embeddings, method="pca", seed=0):
    """2-D coordinates for scatter plots (``"pca"`` or ``"tsne"``)."""
    X = _check_matrix(embeddings, "embeddings")
    if len(X) < 3:
        raise InsufficientSamples(f"need at least 3 vectors, got {len(X)}")
    if not np.any(X - X[0]):
        raise DegenerateInput("all vectors are identical")
    if method == "pca":
        return PCA2(2).fit_transform(X)
    if method == "tsne":
        from sklearn.manifold import TSNE

        perplexity = min(30.0, (len(X) - 1) / 3.0)
        return TSNE(2, perplexity=perplexity, random_state=seed, init="pca").fit_transform(X)
    raise ValueError(f"unknown projection method {method!r}")


def _inv_sqrt(C):
    w, V = np.linalg.eigh(C)
    return (V / np.sqrt(w)) @ V.T


class RegularizedCCA(TransformerMixin, BaseEstimator):
    """Canonical correlation analysis with ridge-conditioned covariance blocks.

    The ridge added to each block's diagonal is ``eps`` times that block's mean
    variance, so the directions are unaffected by rescaling either view. The
    reported correlations are the plain sample correlations of the resulting
    canonical variates, which makes ``CCA(A, A)`` exactly 1.
    """

    def __init__(self, n_components=1, eps=CCA_EPS):
        self.n_components = n_components
        self.eps = eps

    def fit(self, X, Y):
        X = _check_matrix(X, "X")
        Y = _check_matrix(Y, "Y")
        n = len(X)
        if len(Y) != n:
            raise InsufficientSamples(f"unpaired views: {n} vs {len(Y)} rows")
        if n < max(X.shape[1], Y.shape[1], 2):
            raise InsufficientSamples(
                f"{n} paired samples for {X.shape[1]}- and {Y.shape[1]}-dimensional views"
            )
        self.x_mean_ = X.mean(axis=0)
        self.y_mean_ = Y.mean(axis=0)
        Xc, Yc = X - self.x_mean_, Y - self.y_mean_
        cxx = Xc.T @ Xc / (n - 1)
        cyy = Yc.T @ Yc / (n - 1)
        cxy = Xc.T @ Yc / (n - 1)
        for C in (cxx, cyy):
            scale = np.trace(C) / len(C)
            if scale <= 0:
                raise DegenerateInput("a view has zero variance")
            C[np.diag_indices_from(C)] += self.eps * scale
        wx, wy = _inv_sqrt(cxx), _inv_sqrt(cyy)
        u, _, vt = np.linalg.svd(wx @ cxy @ wy)
        k = self.n_components
        self.x_weights_ = wx @ u[:, :k]
        self.y_weights_ = wy @ vt.T[:, :k]
        a, b = self.transform(X, Y)
        self.correlations_ = np.array([_pearson(a[:, i], b[:, i]) for i in range(k)])
        return self

    def transform(self, X, Y=None):
        check_is_fitted(self, "x_weights_")
        a = (_check_matrix(X, "X") - self.x_mean_) @ self.x_weights_
        if Y is None:
            return a
        return a, (_check_matrix(Y, "Y") - self.y_mean_) @ self.y_weights_


def _pearson(a, b):
    a = a - a.mean()
    b = b - b.mean()
    denom = np.sqrt((a @ a) * (b @ b))
    return float(np.clip(a @ b / denom, -1.0, 1.0)) if denom > 0 else 0.0


def cca_first_coefficient(A, B, eps=CCA_EPS):
    """First canonical correlation between paired rows of ``A`` and ``B``."""
    return float(RegularizedCCA(1, eps).fit(A, B).correlations_[0])


def class_cca_matrix(first_by_class, third_by_class, classes=ACTIVITY_CLASSES,
                     groups=None, eps=CCA_EPS):
    """Entry ``(i, j)``: first-view class ``i`` against third-view class ``j``.

    Rows are paired by position, truncating to the shorter of the two sets.
    When ``groups`` maps class -> per-row group labels, the coefficient is
    computed per group present in both classes and averaged.
    """
    out = np.empty((len(classes), len(classes)))
    for i, ci in enumerate(classes):
        for j, cj in enumerate(classes):
            if ci not in first_by_class or cj not in third_by_class:
                raise InsufficientSamples(f"no embeddings for class pair ({ci}, {cj})")
            A = _check_matrix(first_by_class[ci], f"first[{ci}]")
            B = _check_matrix(third_by_class[cj], f"third[{cj}]")
            if groups is None:
                n = min(len(A), len(B))
                out[i, j] = cca_first_coefficient(A[:n], B[:n], eps)
                continue
            gi, gj = np.asarray(groups[ci]), np.asarray(groups[cj])
            vals = []
            for g in sorted(set(gi.tolist()) & set(gj.tolist())):
                a, b = A[gi == g], B[gj == g]
                n = min(len(a), len(b))
                vals.append(cca_first_coefficient(a[:n], b[:n], eps))
            if not vals:
                raise InsufficientSamples(f"classes {ci} and {cj} share no sample group")
            out[i, j] = float(np.mean(vals))
    return out


def is_diagonally_dominant(M):
    """Every diagonal entry exceeds all other entries of its row and column."""
    M = np.asarray(M)
    for k in range(len(M)):
        off_row = np.delete(M[k], k)
        off_col = np.delete(M[:, k], k)
        if not (M[k, k] > off_row.max() and M[k, k] > off_col.max()):
            return False
    return True


@dataclass
class Transversal:
    beta: np.ndarray
    z: np.ndarray
    phi: np.ndarray
    skeletons: np.ndarray

    @property
    def z_start(self):
        return self.z[0]

    @property
    def z_end(self):
        return self.z[-1]


def beta_grid(step=0.1):
    n = int(round(1.0 / step))
    if not np.isclose(n * step, 1.0):
        raise ValueError(f"step {step} does not divide [0, 1]")
    return np.arange(n + 1) / n


def interpolate(a, b, beta):
    """``a + (b - a) * beta`` evaluated as ``(1 - beta) a + beta b``.

    That form reproduces both endpoints and the midpoint bit-for-bit.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)[:, None]
    return (1.0 - beta) * a + beta * b


def build_transversal(z_i, z_j, phi_i, phi_j, regressor, step=0.1):
    """Decode skeletons along the straight line between two embeddings.

    Base features are interpolated with the same coefficients.
    """
    from .transfer import FeatureSequence

    z_i, z_j = np.ravel(z_i), np.ravel(z_j)
    phi_i, phi_j = np.ravel(phi_i), np.ravel(phi_j)
    if z_i.shape != z_j.shape or phi_i.shape != phi_j.shape:
        raise DimensionMismatch("transversal endpoints have different dimensions")
    beta = beta_grid(step)
    z = interpolate(z_i, z_j, beta)
    phi = interpolate(phi_i, phi_j, beta)
    skeletons = regressor.predict(FeatureSequence(phi, z))
    return Transversal(beta, z, phi, skeletons)


def step_displacements(skeletons):
    """Mean joint displacement between consecutive skeletons."""
    skeletons = np.asarray(skeletons)
    return np.linalg.norm(np.diff(skeletons, axis=0), axis=2).mean(axis=1)


def smoothness_ratio(skeletons):
    """Largest consecutive displacement over the mean one (1.0 is uniform)."""
    d = step_displacements(skeletons)
    mean = d.mean()
    return float(d.max() / mean) if mean > 0 else 1.0


def emit_report(results, out_dir, plots=True):
    """Write result tables (and plots) under ``out_dir``; returns written paths.

    Recognized keys: ``cca`` (4x4 matrix, optional ``classes``), ``pca``
    (points plus labels), ``transversal`` (:class:`Transversal`) and
    ``errors`` (mapping of run name to error-table row). ``index.tsv`` lists
    every table; it is empty when ``results`` is.
    """
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {out_dir}: {exc}") from exc
    written = []

    if "cca" in results:
        cca = results["cca"]
        M = np.asarray(cca["matrix"])
        classes = list(cca.get("classes", ACTIVITY_CLASSES))
        path = os.path.join(out_dir, "cca_matrix.tsv")
        artifacts.write_records(path, ["first\\third"] + classes,
                                [[c] + list(M[i]) for i, c in enumerate(classes)])
        written.append(("cca", path))
        if plots:
            written.append(("cca_plot", _plot_matrix(M, classes, os.path.join(out_dir, "cca.png"))))

    if "pca" in results:
        pts = np.asarray(results["pca"]["points"])
        labels = list(results["pca"]["labels"])
        path = os.path.join(out_dir, "pca_points.tsv")
        artifacts.write_records(path, ["label", "pc1", "pc2"],
                                [[lab, p[0], p[1]] for lab, p in zip(labels, pts)])
        written.append(("pca", path))
        if plots:
            written.append(("pca_plot", _plot_scatter(pts, labels, os.path.join(out_dir, "pca.png"))))

    if "transversal" in results:
        tr = results["transversal"]
        path = os.path.join(out_dir, "transversal.tsv")
        rows = [[b] + list(s.ravel()) for b, s in zip(tr.beta, tr.skeletons)]
        from .skeleton import JOINT_NAMES
        header = ["beta"] + [f"{n}.{ax}" for n in JOINT_NAMES for ax in "xyz"]
        artifacts.write_records(path, header, rows)
        written.append(("transversal", path))
        if plots:
            written.append(("transversal_plot",
                            _plot_transversal(tr, os.path.join(out_dir, "transversal.png"))))

    if "errors" in results:
        path = os.path.join(out_dir, "errors.tsv")
        runs = results["errors"]
        cols = list(next(iter(runs.values())).keys()) if runs else []
        artifacts.write_records(path, ["run"] + cols,
                                [[name] + [row[c] for c in cols] for name, row in runs.items()])
        written.append(("errors", path))

    index = os.path.join(out_dir, "index.tsv")
    with open(index, "w") as f:
        if written:
            f.write("kind\tfile\n")
            for kind, path in written:
                f.write(f"{kind}\t{os.path.basename(path)}\n")
    return [p for _, p in written] + [index]


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _plot_matrix(M, classes, path):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 4))
    im = ax.imshow(M, vmin=-1, vmax=1, cmap="coolwarm")
    ax.set_xticks(range(len(classes)), classes, rotation=45, ha="right")
    ax.set_yticks(range(len(classes)), classes)
    ax.set_xlabel("third view")
    ax.set_ylabel("first view")
    for i in range(len(M)):
        for j in range(len(M)):
            ax.text(j, i, f"{M[i, j]:.2f}", ha="center", va="center", fontsize=8)
    fig.colorbar(im)
    fig.tight_layout()
    fig.savefig(path, dpi=80)
    plt.close(fig)
    return path


def _plot_scatter(pts, labels, path):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 4))
    for lab in sorted(set(labels)):
        sel = np.array([l == lab for l in labels])
        ax.scatter(pts[sel, 0], pts[sel, 1], s=6, label=str(lab))
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=80)
    plt.close(fig)
    return path


_BONES = (
    ("Hip", "Spine"), ("Spine", "Thorax"), ("Thorax", "Neck"), ("Neck", "Head"),
    ("Thorax", "LShoulder"), ("LShoulder", "LElbow"), ("LElbow", "LWrist"),
    ("Thorax", "RShoulder"), ("RShoulder", "RElbow"), ("RElbow", "RWrist"),
    ("Hip", "LKnee"), ("LKnee", "LAnkle"), ("LAnkle", "LFoot"),
    ("Hip", "RKnee"), ("RKnee", "RAnkle"), ("RAnkle", "RFoot"),
)


def _plot_transversal(tr, path):
    """Side-view stick figures along the line; endpoints drawn in green."""
    from .skeleton import JOINT_INDEX

    plt = _pyplot()
    n = len(tr.skeletons)
    fig, axes = plt.subplots(1, n, figsize=(1.2 * n, 2.4), sharey=True)
    for k, (ax, s) in enumerate(zip(np.atleast_1d(axes), tr.skeletons)):
        color = "green" if k in (0, n - 1) else "black"
        for a, b in _BONES:
            pa, pb = s[JOINT_INDEX[a]], s[JOINT_INDEX[b]]
            ax.plot([pa[0], pb[0]], [pa[2], pb[2]], color=color, lw=1)
        ax.set_title(f"{tr.beta[k]:.1f}", fontsize=7)
        ax.set_aspect("equal")
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=80)
    plt.close(fig)
    return path
