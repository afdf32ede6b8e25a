# %% [markdown]
# # Checking the numerics
#
# Each analytic quantity in the package has an independent route to the same
# number. This script runs the quick ones.

# %%
import numpy as np

from usefullab.cubic_cnn import empirical_loss, gradient, hessian_vector_product
from usefullab.spectral import dense_hessian, lanczos_top_k, model_spectrum
from usefullab.synthgen import DistributionSpec, generate, make_basis
from usefullab.theory import RecursionSpec, simulate_recursion, upsample_factor_oracle
from usefullab.useful import kmeans_two

rng = np.random.default_rng(0)
ds = generate(DistributionSpec(d=6, n=10, sigma_p=0.7, beta_d=0.5, seed=1), make_basis(6))
W = rng.normal(0, 0.5, (3, 6))

# %% [markdown]
# Gradient and Hessian-vector product against central differences.

# %%
h = 1e-6
fd = np.zeros_like(W)
for idx in np.ndindex(W.shape):
    E = np.zeros_like(W)
    E[idx] = h
    fd[idx] = (empirical_loss(W + E, ds) - empirical_loss(W - E, ds)) / (2 * h)
print("gradient rel. error:", np.linalg.norm(gradient(W, ds) - fd) / np.linalg.norm(fd))
V = rng.normal(size=W.shape)
a, b = hessian_vector_product(W, ds, V), hessian_vector_product(W, ds, V, mode="fd")
print("HVP rel. error:", np.linalg.norm(a - b) / np.linalg.norm(b))

# %% [markdown]
# Lanczos against a dense eigendecomposition, and a known diagonal spectrum.

# %%
rep = model_spectrum(W, ds, k=5, steps=W.size)
print(rep.eigenvalues)
print(np.linalg.eigvalsh(dense_hessian(W, ds))[::-1][:5])
diag = lanczos_top_k(lambda v: np.arange(1.0, 6.0) * v, 5, 5, 5)
print("diag(1..5): lambda_max", diag.lambda_max, "bulk ratio", diag.bulk_ratio)

# %% [markdown]
# Scalar two-means reaches the best threshold split.

# %%
x = rng.normal(size=40)
s = np.sort(x)
best = min(((s[:c] - s[:c].mean()) ** 2).sum() + ((s[c:] - s[c:].mean()) ** 2).sum() for c in range(1, 40))
print("kmeans:", kmeans_two(x).objective, " best split:", best)

# %% [markdown]
# Upsampling factor: one GD step on the amplified data has the same slow/fast
# balance as one SAM step on the original data.

# %%
zero_noise = generate(DistributionSpec(d=6, n=80, sigma_p=0.0, seed=3), make_basis(6))
w = np.array([0.8, 0.3, 0.1, -0.2, 0.0, 0.4]) * 1e-3
check = upsample_factor_oracle(w, zero_noise, rho_t=10.0)
print("k =", check.k, " relative mismatch =", check.relative_error)

# %% [markdown]
# Growth recursion: measured hitting time against the closed-form bound.

# %%
print(simulate_recursion(RecursionSpec(z0=0.1, rho=0.0, m=1.0, M=1.0, v=0.2)))
