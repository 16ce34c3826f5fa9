"""
Sparse Bayesian regression on a noisy sinc
==========================================

Fit a relevance vector machine to 100 noisy samples of sin(x)/x and look at
how few basis functions survive.
"""

# %%
import sys
import warnings
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from volharm import rvm

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_output")
out.mkdir(exist_ok=True)

rng = np.random.default_rng(0)
x = rng.uniform(-10, 10, 100)
t = np.sinc(x / np.pi) + 0.1 * rng.standard_normal(100)

# %% [markdown]
# A Gaussian kernel of length scale 2 on the raw inputs. Every training point
# starts as a candidate basis center; evidence maximization prunes most.

# %%
model = rvm.train(rvm.KernelSpec("rbf", 2.0), x[:, None], t, rvm.TrainConfig(standardize=False))
grid = np.linspace(-10, 10, 500)
mean, var = rvm.predict(model, grid[:, None])
rmse = np.sqrt(np.mean((mean - np.sinc(grid / np.pi)) ** 2))
print(f"{model.n_relevance} relevance vectors, noise sd {model.beta ** -0.5:.3f}, RMSE {rmse:.4f}")

# %% [markdown]
# Letting the evidence pick the length scale from a small grid instead.

# %%
with warnings.catch_warnings():
    warnings.simplefilter("ignore")
    picked = rvm.train_rbf_grid(x[:, None], t)
print("length scale (standardized units):", round(picked.kernel.rbf_gamma, 3),
      "relevance vectors:", picked.n_relevance)

# %%
fig, ax = plt.subplots(figsize=(6, 3.5))
sd = np.sqrt(var)
ax.fill_between(grid, mean - 2 * sd, mean + 2 * sd, color="0.85", label="predictive 2 sd")
ax.plot(grid, np.sinc(grid / np.pi), "k--", lw=1, label="sinc")
ax.plot(grid, mean, "C0", label="RVM mean")
ax.plot(x, t, ".", color="0.5", ms=3)
ax.plot(model.relevance_vectors[:, 0], t[model.relevance_indices], "o", mfc="none", mec="C3", label="relevance vectors")
ax.legend(fontsize=7)
fig.tight_layout()
fig.savefig(out / "rvm_sinc.png", dpi=120)
