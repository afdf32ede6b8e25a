"""Synthetic two-feature patch data.

Each example holds ``P`` patches of dimension ``d``: one slow-feature patch
``beta_d * y * v_d``, one fast-feature patch ``beta_e * y * v_e`` that is
zeroed out with probability ``1 - alpha``, and ``P - 2`` Gaussian noise
patches. Patch order is shuffled per example.

Randomness comes from numpy's PCG64 bit generator seeded through a
``SeedSequence``; independent child streams are spawned for labels, the
fast-feature mask, the noise and the patch permutation, so changing one
quantity (say ``alpha``) does not perturb the others.
"""

from __future__ import annotations

import dataclasses
import io
import json
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from usefullab._io import atomic_write_bytes

RNG_IDENTITY = "numpy.random.PCG64+SeedSequence.spawn(4)"

# role indices inside Dataset.permutation
SLOW, FAST = 0, 1


@dataclass(frozen=True)
class DistributionSpec:
    """Parameters of the data distribution.

    ``sigma_p`` is the absolute noise scale; each noise coordinate is drawn
    from ``Normal(0, sigma_p**2 / d)``.
    """

    d: int = 50
    P: int = 3
    beta_e: float = 1.0
    beta_d: float = 0.2
    alpha: float = 0.9
    sigma_p: float = 0.125 * math.sqrt(50)
    n: int = 10000
    seed: int = 0
    orthogonalize_noise: bool = False

    def __post_init__(self):
        if self.d < 2:
            raise ValueError(f"d must be >= 2, got {self.d}")
        if self.P < 3:
            raise ValueError(f"P must be >= 3, got {self.P}")
        if self.n < 1:
            raise ValueError(f"n must be >= 1, got {self.n}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.beta_d < 0:
            raise ValueError(f"beta_d must be >= 0, got {self.beta_d}")
        if self.sigma_p < 0:
            raise ValueError(f"sigma_p must be >= 0, got {self.sigma_p}")

    @property
    def noise_std(self) -> float:
        return self.sigma_p / math.sqrt(self.d)

    @property
    def in_theory_regime(self) -> bool:
        """``0 <= beta_d < beta_e`` and ``alpha**(1/3) * beta_e > beta_d``."""
        return 0 <= self.beta_d < self.beta_e and self.alpha ** (1 / 3) * self.beta_e > self.beta_d

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class FeatureBasis:
    v_e: np.ndarray
    v_d: np.ndarray

    @property
    def d(self) -> int:
        return self.v_e.shape[0]


def make_basis(d: int, seed: int | None = None) -> FeatureBasis:
    """Orthonormal pair ``(v_e, v_d)``.

    With ``seed=None`` the coordinate axes ``e_1, e_2`` are returned. Otherwise
    a random pair is drawn from the seeded generator and orthonormalised with
    a QR (Gram-Schmidt) step.
    """
    if d < 2:
        raise ValueError(f"basis needs d >= 2, got {d}")
    if seed is None:
        eye = np.eye(d)
        v_e, v_d = eye[0].copy(), eye[1].copy()
    else:
        g = np.random.default_rng(seed).standard_normal((d, 2))
        q, r = np.linalg.qr(g)
        q = q * np.sign(np.diag(r))
        v_e, v_d = q[:, 0].copy(), q[:, 1].copy()
        # one more projection step pins the inner product at rounding level
        v_d -= (v_d @ v_e) * v_e
        v_d /= np.linalg.norm(v_d)
    v_e.setflags(write=False)
    v_d.setflags(write=False)
    return FeatureBasis(v_e, v_d)


class PatchedExample(NamedTuple):
    patches: np.ndarray
    label: float
    has_fast_feature: bool
    patch_permutation: np.ndarray


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """A labelled sample stored as dense arrays.

    ``patches[i, permutation[i, r]]`` is the patch playing role ``r`` in
    example ``i``: role 0 is the slow feature, role 1 the (possibly masked)
    fast feature, roles ``2..P-1`` are noise. ``multiplicity`` counts how
    many times an example enters the empirical risk.
    """

    spec: DistributionSpec
    basis: FeatureBasis
    patches: np.ndarray  # (n, P, d)
    labels: np.ndarray  # (n,) in {-1., +1.}
    has_fast: np.ndarray  # (n,) bool
    permutation: np.ndarray  # (n, P) int
    multiplicity: np.ndarray  # (n,) int64

    def __post_init__(self):
        n = self.labels.shape[0]
        if self.patches.ndim != 3 or self.patches.shape[0] != n:
            raise ValueError("patches must have shape (n, P, d)")
        if self.multiplicity.shape != (n,) or np.any(self.multiplicity < 1):
            raise ValueError("multiplicity must be a positive integer per example")
        for name in ("patches", "labels", "has_fast", "permutation", "multiplicity"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def n(self) -> int:
        return len(self)

    @property
    def effective_size(self) -> int:
        return int(self.multiplicity.sum())

    def example(self, i: int) -> PatchedExample:
        return PatchedExample(self.patches[i], float(self.labels[i]), bool(self.has_fast[i]), self.permutation[i])

    def role_patches(self, role: int) -> np.ndarray:
        """Patches of a given role, shape ``(n, d)``."""
        idx = self.permutation[:, role]
        return self.patches[np.arange(self.n), idx]

    def noise_patches(self) -> np.ndarray:
        """All noise patches, shape ``(n, P - 2, d)``."""
        rows = np.arange(self.n)[:, None]
        return self.patches[rows, self.permutation[:, 2:]]

    def with_multiplicity(self, multiplicity) -> "Dataset":
        m = np.asarray(multiplicity, dtype=np.int64)
        return dataclasses.replace(self, multiplicity=m)

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices)
        return dataclasses.replace(
            self,
            spec=dataclasses.replace(self.spec, n=int(idx.shape[0])),
            patches=self.patches[idx],
            labels=self.labels[idx],
            has_fast=self.has_fast[idx],
            permutation=self.permutation[idx],
            multiplicity=self.multiplicity[idx],
        )

    def flatten(self) -> "Dataset":
        """Physically duplicate every example ``multiplicity`` times."""
        idx = np.repeat(np.arange(self.n), self.multiplicity)
        flat = self.subset(idx)
        return flat.with_multiplicity(np.ones(flat.n, dtype=np.int64))


def generate(spec: DistributionSpec, basis: FeatureBasis | None = None) -> Dataset:
    if basis is None:
        basis = make_basis(spec.d)
    if basis.d != spec.d:
        raise ValueError(f"basis dimension {basis.d} does not match spec.d={spec.d}")
    n, P, d = spec.n, spec.P, spec.d

    s_label, s_mask, s_noise, s_perm = np.random.SeedSequence(spec.seed).spawn(4)
    labels = np.random.Generator(np.random.PCG64(s_label)).integers(0, 2, size=n) * 2.0 - 1.0
    has_fast = np.random.Generator(np.random.PCG64(s_mask)).random(n) < spec.alpha
    noise = np.random.Generator(np.random.PCG64(s_noise)).normal(0.0, spec.noise_std, size=(n, P - 2, d))
    if spec.orthogonalize_noise:
        for v in (basis.v_e, basis.v_d):
            noise -= (noise @ v)[..., None] * v
    base = np.tile(np.arange(P), (n, 1))
    permutation = np.random.Generator(np.random.PCG64(s_perm)).permuted(base, axis=1)

    roles = np.empty((n, P, d))
    roles[:, SLOW] = (spec.beta_d * labels)[:, None] * basis.v_d
    roles[:, FAST] = (spec.beta_e * labels * has_fast)[:, None] * basis.v_e
    roles[:, 2:] = noise
    patches = np.empty_like(roles)
    patches[np.arange(n)[:, None], permutation] = roles

    return Dataset(
        spec=spec,
        basis=basis,
        patches=patches,
        labels=labels,
        has_fast=has_fast,
        permutation=permutation,
        multiplicity=np.ones(n, dtype=np.int64),
    )


def _rescale_slow(dataset: Dataset, k: float) -> Dataset:
    rows = np.arange(dataset.n)
    slot = dataset.permutation[:, SLOW]
    patches = dataset.patches.copy()
    patches[rows, slot] = k * patches[rows, slot]
    spec = dataclasses.replace(dataset.spec, beta_d=k * dataset.spec.beta_d)
    return dataclasses.replace(dataset, spec=spec, patches=patches)


def amplify_slow(dataset: Dataset, k: float) -> Dataset:
    """Scale the slow-feature patch of every example by ``k >= 1``."""
    if not k >= 1:
        raise ValueError(f"amplification factor must be >= 1, got {k}")
    if k == 1:
        return dataset
    return _rescale_slow(dataset, k)


# --- serialization ---------------------------------------------------------

_MAGIC = b"USFLDS01"


def dumps_dataset(dataset: Dataset) -> bytes:
    """Binary form: magic, u64 header length, JSON header, then raw arrays.

    Arrays follow the header in this order, all little-endian: basis v_e and
    v_d (f8), patches (f8, row-major n*P*d), labels (i1), fast mask (u1),
    permutation (i4), multiplicity (i8).
    """
    header = {
        "format": "usefullab-dataset",
        "version": 1,
        "spec": dataset.spec.to_dict(),
        "rng": RNG_IDENTITY,
        "n": dataset.n,
        "P": int(dataset.patches.shape[1]),
        "d": int(dataset.patches.shape[2]),
    }
    head = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(np.uint64(len(head)).astype("<u8").tobytes())
    buf.write(head)
    for arr, dt in (
        (dataset.basis.v_e, "<f8"),
        (dataset.basis.v_d, "<f8"),
        (dataset.patches, "<f8"),
        (dataset.labels, "<i1"),
        (dataset.has_fast, "u1"),
        (dataset.permutation, "<i4"),
        (dataset.multiplicity, "<i8"),
    ):
        buf.write(np.ascontiguousarray(arr).astype(dt).tobytes())
    return buf.getvalue()


def loads_dataset(blob: bytes) -> Dataset:
    if blob[:8] != _MAGIC:
        raise ValueError("not a usefullab dataset file")
    hlen = int(np.frombuffer(blob, "<u8", count=1, offset=8)[0])
    header = json.loads(blob[16 : 16 + hlen])
    n, P, d = header["n"], header["P"], header["d"]
    off = 16 + hlen

    def take(dtype, count):
        nonlocal off
        a = np.frombuffer(blob, dtype, count=count, offset=off)
        off += a.nbytes
        return a

    v_e = take("<f8", d).astype(np.float64)
    v_d = take("<f8", d).astype(np.float64)
    patches = take("<f8", n * P * d).reshape(n, P, d).astype(np.float64)
    labels = take("<i1", n).astype(np.float64)
    has_fast = take("u1", n).astype(bool)
    permutation = take("<i4", n * P).reshape(n, P).astype(np.int64)
    multiplicity = take("<i8", n).astype(np.int64)
    if off != len(blob):
        raise ValueError("trailing bytes in dataset file")
    v_e.setflags(write=False)
    v_d.setflags(write=False)
    return Dataset(
        spec=DistributionSpec(**header["spec"]),
        basis=FeatureBasis(v_e, v_d),
        patches=patches,
        labels=labels,
        has_fast=has_fast,
        permutation=permutation,
        multiplicity=multiplicity,
    )


def save_dataset(path, dataset: Dataset) -> None:
    atomic_write_bytes(path, dumps_dataset(dataset))


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        return loads_dataset(fh.read())
