# %% [markdown]
# # Rectified flow on toy data
#
# A rectified flow moves samples along straight lines from data (`tau = 0`) to
# Gaussian noise (`tau = 1`).  A network learns the velocity of those lines;
# integrating it backwards from noise with Euler steps produces new samples.

# %%
import numpy as np

from fourd.flow import (
    FMDConfig,
    clean_estimate,
    euler_sample,
    fmd_loss,
    forward_interpolate,
    target_velocity,
    toy_dataset,
    train_toy,
)

# %% [markdown]
# ## The straight path
#
# Given the true velocity, one step recovers the clean sample from any point on
# the path.

# %%
rng = np.random.default_rng(0)
z0, eps = rng.standard_normal((2, 4, 2))
z_tau = forward_interpolate(z0, eps, 0.7)
print("recovery error: %.1e" % np.abs(clean_estimate(z_tau, 0.7, target_velocity(z0, eps)) - z0).max())

# %% [markdown]
# ## Learning a two-mode distribution
#
# The data are two Gaussian blobs at x = -2 and x = +2.  After a short training
# run the sampler already splits its mass between them.

# %%
data = toy_dataset("mixture", 4096, seed=0)
model, losses = train_toy(data, 40, seed=0)
print("loss, first 100 steps %.3f, last 100 steps %.3f" % (np.mean(losses[:100]), np.mean(losses[-100:])))

samples = euler_sample(model, None, 50, seed=1, shape=(4000, 2))
left, right = samples[samples[:, 0] < 0], samples[samples[:, 0] >= 0]
print("left mode  mean", np.round(left.mean(axis=0), 2), "std", np.round(left.std(axis=0), 2), "count", len(left))
print("right mode mean", np.round(right.mean(axis=0), 2), "std", np.round(right.std(axis=0), 2), "count", len(right))

# %% [markdown]
# ## Distillation as a regularizer
#
# A trained flow can score an arbitrary sample: noise it, ask the model for the
# clean estimate, and measure how far that is from the sample.  Points near the
# data get a small loss, points between the modes a large one, and the gradient
# pulls them towards the data.  This is the term used later to regularize
# renders of a dynamic scene.

# %%
cfg = FMDConfig(tau_range=(0.2, 0.4))
for point in ([2.0, 0.0], [0.0, 0.0], [-2.0, 0.5]):
    x = np.tile(point, (256, 1))
    res = fmd_loss(x, model, None, cfg, seed=3)
    print(f"sample {point}: loss {res.loss / 256:.3f}, mean gradient direction {np.round(-res.grad.mean(axis=0), 3)}")
