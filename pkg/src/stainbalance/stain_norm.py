"""Macenko stain normalization.

Pixels are mapped to optical density (OD), the two dominant stain
directions are read off the principal plane of the OD cloud at extreme
angle percentiles, per-pixel stain concentrations are solved by least
squares and the image is re-rendered with a fixed reference template.

Typical usage::

    from stainbalance.stain_norm import MacenkoNormalizer

    norm = MacenkoNormalizer().fit()          # built-in H&E template
    out = norm.transform([image])[0]
"""

import logging
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_image
from .exceptions import DataError, DegenerateStains, SingularStainMatrix, TooFewPixels

logger = logging.getLogger(__name__)

# Columns are the hematoxylin and eosin OD directions.
DEFAULT_REFERENCE_STAINS = np.array(
    [
        [0.5626, 0.2159],
        [0.7201, 0.8012],
        [0.4062, 0.5581],
    ]
)
DEFAULT_REFERENCE_MAX_CONCENTRATIONS = np.array([1.9705, 1.0308])

DEFAULT_ALPHA = 1.0
DEFAULT_OD_THRESHOLD = 0.15
DEFAULT_MAX_PERCENTILE = 99.0

# eigenvalue ratio below which the OD cloud is treated as rank 1
_RANK_TOL = 1e-8
_SINGULAR_TOL = 1e-12


@dataclass(frozen=True)
class StainReference:
    """Target stain basis and the concentration scale it is rendered at."""

    stains: np.ndarray
    max_concentrations: np.ndarray

    def __post_init__(self):
        stains = check_stain_matrix(self.stains)
        maxc = np.asarray(self.max_concentrations, dtype=np.float64).reshape(-1)
        if maxc.shape != (2,) or not np.all(maxc > 0) or not np.all(np.isfinite(maxc)):
            raise ValueError("max_concentrations must be two positive reals")
        object.__setattr__(self, "stains", stains)
        object.__setattr__(self, "max_concentrations", maxc)

    @classmethod
    def default(cls):
        return cls(
            _unit_columns(DEFAULT_REFERENCE_STAINS),
            DEFAULT_REFERENCE_MAX_CONCENTRATIONS.copy(),
        )

    def to_text(self):
        lines = []
        for j, stain in enumerate(("h", "e")):
            for i, ch in enumerate("rgb"):
                lines.append(f"{stain}_{ch} = {float(self.stains[i, j])!r}")
        lines.append(f"h_max = {float(self.max_concentrations[0])!r}")
        lines.append(f"e_max = {float(self.max_concentrations[1])!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        """Parse the ``key = value`` form written by :meth:`to_text`.

        Stain columns are renormalized to unit length so hand-edited
        files with rounded components are accepted.
        """
        values = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            sep = "=" if "=" in line else ":"
            if sep not in line:
                raise ValueError(f"line {lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split(sep, 1))
            values[key.lower()] = float(value)
        try:
            stains = np.array(
                [[values[f"{s}_{c}"] for s in ("h", "e")] for c in "rgb"]
            )
            maxc = np.array([values["h_max"], values["e_max"]])
        except KeyError as exc:
            raise ValueError(f"reference file is missing key {exc.args[0]!r}") from None
        if np.any(np.abs(np.linalg.norm(stains, axis=0) - 1.0) > 1e-12):
            stains = _unit_columns(stains)
        return cls(stains, maxc)


def _unit_columns(m):
    m = np.asarray(m, dtype=np.float64)
    return m / np.linalg.norm(m, axis=0, keepdims=True)


def check_stain_matrix(stains, tol=1e-9):
    stains = np.asarray(stains, dtype=np.float64)
    if stains.shape != (3, 2):
        raise ValueError(f"stain matrix must be 3x2, got {stains.shape}")
    if not np.all(np.isfinite(stains)) or np.any(stains < 0):
        raise ValueError("stain matrix entries must be finite and non-negative")
    norms = np.linalg.norm(stains, axis=0)
    if np.any(np.abs(norms - 1.0) > tol):
        raise ValueError("stain matrix columns must have unit norm")
    return stains


def rgb_to_od(image, background_intensity=255):
    """Optical density ``-log10((v + 1) / (I0 + 1))`` per channel.

    The +1 guard keeps black pixels finite and maps ``v == I0`` to exactly
    zero. Pixels brighter than the background are clamped to zero density.
    """
    if background_intensity < 1:
        raise ValueError("background_intensity must be >= 1")
    image = check_image(image)
    od = -np.log10((image.astype(np.float64) + 1.0) / (background_intensity + 1.0))
    return np.maximum(od, 0.0)


def od_to_rgb(od, background_intensity=255):
    v = np.round(background_intensity * np.power(10.0, -np.asarray(od, dtype=np.float64)))
    return np.clip(v, 0, 255).astype(np.uint8)


def estimate_stain_matrix(od, alpha_percentile=DEFAULT_ALPHA, od_threshold=DEFAULT_OD_THRESHOLD):
    """Estimate the two dominant stain vectors of an OD image.

    Args:
        od: OD values, any shape ending in 3.
        alpha_percentile: angle percentile used for the extreme directions.
        od_threshold: pixels whose largest channel OD falls below this are
            treated as background and ignored.

    Returns:
        3x2 matrix with unit, non-negative columns; column 0 has the larger
        red component (hematoxylin first).
    """
    if not 0 < alpha_percentile < 50:
        raise ValueError("alpha_percentile must lie in (0, 50)")
    if od_threshold < 0:
        raise ValueError("od_threshold must be non-negative")
    pix = np.asarray(od, dtype=np.float64).reshape(-1, 3)
    pix = pix[pix.max(axis=1) >= od_threshold]
    if pix.shape[0] < 3:
        raise TooFewPixels(
            f"{pix.shape[0]} pixels above OD threshold {od_threshold}, need 3"
        )

    # uncentered second-moment matrix; its top eigenvectors span the stain plane
    cov = pix.T @ pix / pix.shape[0]
    evals, evecs = np.linalg.eigh(cov)
    if evals[2] <= 0 or evals[1] / evals[2] < _RANK_TOL:
        raise DegenerateStains("optical density cloud is rank-deficient")
    basis = evecs[:, [2, 1]]
    basis *= np.where(basis.sum(axis=0) < 0, -1.0, 1.0)

    proj = pix @ basis
    phi = np.arctan2(proj[:, 1], proj[:, 0])
    lo, hi = np.percentile(phi, [alpha_percentile, 100 - alpha_percentile])

    vecs = []
    for angle in (lo, hi):
        v = np.cos(angle) * basis[:, 0] + np.sin(angle) * basis[:, 1]
        v = np.maximum(v, 0.0)
        n = np.linalg.norm(v)
        if n == 0:
            raise DegenerateStains("extreme stain direction has no positive component")
        vecs.append(v / n)
    v1, v2 = vecs
    stains = np.column_stack([v1, v2] if v1[0] >= v2[0] else [v2, v1])
    gram = stains.T @ stains
    if np.linalg.det(gram) < _RANK_TOL:
        raise DegenerateStains("estimated stain vectors are collinear")
    return stains


def solve_concentrations(od, stains):
    """Per-pixel least-squares stain concentrations, clamped at zero.

    Returns an array shaped like ``od`` with the last axis of length 2.
    """
    stains = check_stain_matrix(stains)
    od = np.asarray(od, dtype=np.float64)
    gram = stains.T @ stains
    if abs(np.linalg.det(gram)) < _SINGULAR_TOL:
        raise SingularStainMatrix("stain normal matrix is singular")
    pinv = np.linalg.solve(gram, stains.T)  # 2x3
    conc = od.reshape(-1, 3) @ pinv.T
    np.maximum(conc, 0.0, out=conc)
    return conc.reshape(od.shape[:-1] + (2,))


def concentration_percentile(conc, percentile=DEFAULT_MAX_PERCENTILE):
    return np.percentile(np.asarray(conc).reshape(-1, 2), percentile, axis=0)


def normalize_image(
    image,
    reference=None,
    alpha_percentile=DEFAULT_ALPHA,
    od_threshold=DEFAULT_OD_THRESHOLD,
    background_intensity=255,
    max_percentile=DEFAULT_MAX_PERCENTILE,
):
    """Re-render ``image`` with the stain basis and scale of ``reference``.

    Raises:
        TooFewPixels, DegenerateStains: the image cannot be stain-separated.
            The caller decides on a fallback.
    """
    if reference is None:
        reference = StainReference.default()
    image = check_image(image)
    od = rgb_to_od(image, background_intensity)
    stains = estimate_stain_matrix(od, alpha_percentile, od_threshold)
    conc = solve_concentrations(od, stains)
    src_max = concentration_percentile(conc, max_percentile)
    if np.any(src_max <= 0):
        raise DegenerateStains("a stain has zero concentration at the scaling percentile")
    conc = conc * (reference.max_concentrations / src_max)
    out_od = conc @ reference.stains.T
    return od_to_rgb(out_od, background_intensity)


def fit_reference(
    images,
    alpha_percentile=DEFAULT_ALPHA,
    od_threshold=DEFAULT_OD_THRESHOLD,
    background_intensity=255,
    max_percentile=DEFAULT_MAX_PERCENTILE,
):
    """Average stain matrices and percentile concentrations over ``images``.

    Images that cannot be separated are skipped with a warning; if none
    remain the last error is re-raised.
    """
    stains, maxc = [], []
    last_err = None
    for i, image in enumerate(images):
        try:
            od = rgb_to_od(image, background_intensity)
            s = estimate_stain_matrix(od, alpha_percentile, od_threshold)
            c = concentration_percentile(solve_concentrations(od, s), max_percentile)
        except DataError as err:
            logger.warning("skipping image %d while fitting reference: %s", i, err)
            last_err = err
            continue
        stains.append(s)
        maxc.append(c)
    if not stains:
        if last_err is not None:
            raise last_err
        raise TooFewPixels("no images to fit a reference from")
    return StainReference(_unit_columns(np.mean(stains, axis=0)), np.mean(maxc, axis=0))


class MacenkoNormalizer(TransformerMixin, BaseEstimator):
    """Stain normalizer with a fixed or fitted reference template.

    Parameters
    ----------
    alpha : float, default=1.0
        Angle percentile for the extreme stain directions.
    od_threshold : float, default=0.15
        Background threshold on the per-pixel maximum OD.
    background_intensity : int, default=255
    max_percentile : float, default=99
        Percentile of source concentrations mapped onto the reference maxima.
    reference : StainReference or None
        Template used when ``fit_reference`` is False. ``None`` means the
        built-in H&E constants.
    fit_reference : bool, default=False
        Estimate the template from the images passed to :meth:`fit`.
    on_error : {"raise", "passthrough"}
        What :meth:`transform` does with images that cannot be separated.
        ``"passthrough"`` returns them unmodified and logs a warning.
    """

    def __init__(
        self,
        alpha=DEFAULT_ALPHA,
        od_threshold=DEFAULT_OD_THRESHOLD,
        background_intensity=255,
        max_percentile=DEFAULT_MAX_PERCENTILE,
        reference=None,
        fit_reference=False,
        on_error="raise",
    ):
        self.alpha = alpha
        self.od_threshold = od_threshold
        self.background_intensity = background_intensity
        self.max_percentile = max_percentile
        self.reference = reference
        self.fit_reference = fit_reference
        self.on_error = on_error

    def fit(self, X=None, y=None):
        if self.on_error not in ("raise", "passthrough"):
            raise ValueError("on_error must be 'raise' or 'passthrough'")
        if self.fit_reference:
            if X is None:
                raise ValueError("fit_reference=True needs images")
            self.reference_ = fit_reference(
                X, self.alpha, self.od_threshold, self.background_intensity, self.max_percentile
            )
        elif self.reference is None:
            self.reference_ = StainReference.default()
        else:
            self.reference_ = self.reference
        return self

    def transform(self, X):
        check_is_fitted(self, "reference_")
        out = []
        for i, image in enumerate(X):
            try:
                out.append(
                    normalize_image(
                        image,
                        self.reference_,
                        self.alpha,
                        self.od_threshold,
                        self.background_intensity,
                        self.max_percentile,
                    )
                )
            except DataError as err:
                if self.on_error == "raise":
                    raise
                logger.warning("image %d left unnormalized: %s", i, err)
                out.append(check_image(image).copy())
        return out
