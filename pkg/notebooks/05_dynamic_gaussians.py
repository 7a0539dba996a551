# %% [markdown]
# # Fitting a dynamic Gaussian scene
#
# A scene is a cloud of 3D Gaussians plus a small network that moves them over
# time.  Starting from the depth of the first frame of each view, the Gaussians
# and the network are fitted to the videos by differentiable rasterization.

# %%
import numpy as np

from fourd.pipeline.bench import held_out_poses, training_psnr
from fourd.pipeline.metrics import psnr, ssim
from fourd.pipeline.synth import synth_scene
from fourd.splat import OptimizeConfig, init_from_depth, optimize, render

# %% [markdown]
# ## A synthetic ground truth
#
# The generator places moving clusters of Gaussians in front of a ring of
# cameras, so every quantity (frames, depths, poses) is known exactly.

# %%
bundle = synth_scene(7, {"width": 32, "height": 32, "n_frames": 4, "n_views": 4})
print("frames (views, time, H, W, 3):", bundle.frames.shape)
print("pixels with valid depth in view 0, frame 1: %.0f%%" % (100 * bundle.depth_map(0, 1).valid.mean()))

# %% [markdown]
# ## Initialization from depth
#
# Pixels with valid depth are lifted to points, merged on a voxel grid and
# turned into small isotropic Gaussians with the pixel colours.

# %%
scene = init_from_depth(bundle.frames, bundle.depths, bundle.cams, seed=0)
print("initial Gaussians:", len(scene))
print("training PSNR at initialization: %.2f dB" % training_psnr(scene, bundle))

# %% [markdown]
# ## Optimization
#
# Each iteration renders one view at one timestamp and takes an Adam step on an
# L1 + SSIM photometric loss with rigidity and rotation-smoothness terms.
# Densification clones or splits Gaussians whose screen-space gradient stays
# large.

# %%
history = optimize(scene, bundle.frames, bundle.cams, iters=300, seed=0, config=OptimizeConfig(densify_from=100, densify_every=100))
print("loss, first 20 iterations %.4f, last 20 %.4f" % (np.mean(history.loss[:20]), np.mean(history.loss[-20:])))
print("Gaussians after densification:", len(scene))
print("training PSNR after 300 iterations: %.2f dB" % training_psnr(scene, bundle))

# %% [markdown]
# ## A viewpoint between the training cameras
#
# The held-out pose sits midway along the camera loop between two training
# cameras; the ground truth there comes from the generator.

# %%
cam = held_out_poses(bundle.cams, (0.5,))[0]
for t in range(1, bundle.n_frames + 1):
    pred = render(scene, cam, t)
    truth = bundle.scene.render(cam, t)[0]
    print(f"t={t}: PSNR {psnr(pred, truth):.2f} dB, SSIM {ssim(pred, truth):.3f}")
