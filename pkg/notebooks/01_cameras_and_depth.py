# %% [markdown]
# # Cameras, depth lifting and camera loops
#
# A view of a scene can be re-rendered from another camera if we know its depth:
# lift every pixel to a 3D point, then splat the points into the new camera.
# The same module also turns a handful of cameras into a smooth closed loop of
# poses, which is how novel viewpoints are chosen later on.

# %%
import numpy as np

from fourd.geometry import (
    DepthMap,
    back_project,
    interpolate_trajectory,
    look_at,
    render_point_cloud,
    slerp,
)

# %% [markdown]
# ## Lifting a depth map and projecting it back
#
# Rendering the lifted cloud from the camera it came from reproduces the image
# exactly on every pixel that had a valid depth.

# %%
rng = np.random.default_rng(0)
cam = look_at([0.0, 0.0, -4.0], [0.0, 0.0, 0.0], fx=40, fy=40, cx=16, cy=16, width=32, height=32)
image = rng.uniform(size=(32, 32, 3))
depth = DepthMap(rng.uniform(3.0, 5.0, (32, 32)), rng.uniform(size=(32, 32)) < 0.8)

cloud = back_project(depth, image, cam)
guide = render_point_cloud(cloud, cam)
print("points lifted:", len(cloud))
print("coverage matches validity:", np.array_equal(guide.coverage, depth.valid))
print("colours reproduced:", np.array_equal(guide.image[guide.coverage], image[guide.coverage]))

# %% [markdown]
# From a camera rotated by ten degrees, parts of the image become occluded or
# uncovered; the coverage mask records which target pixels received a point.

# %%
side = look_at([4 * np.sin(np.radians(10)), 0.0, -4 * np.cos(np.radians(10))], [0, 0, 0], fx=40, fy=40, cx=16, cy=16, width=32, height=32)
print("coverage from the rotated camera: %.1f%%" % (100 * render_point_cloud(cloud, side).coverage.mean()))

# %% [markdown]
# ## Interpolating rotations and building a loop
#
# Rotations are blended with spherical interpolation; the midpoint of a quarter
# turn is an eighth turn.

# %%
q90 = np.array([np.cos(np.pi / 4), 0.0, np.sin(np.pi / 4), 0.0])
print("slerp midpoint:", np.round(slerp([1.0, 0.0, 0.0, 0.0], q90, 0.5), 6))

# %% [markdown]
# Six cameras in arbitrary order are sorted by azimuth and joined into a closed
# loop of 120 poses: a cubic spline for the centres and slerp for the rotations.

# %%
azimuths = [250, 10, 130, 190, 70, 310]
rig = [look_at([4 * np.cos(np.radians(a)), 1.0, 4 * np.sin(np.radians(a))], [0, 0, 0], fx=40, fy=40, cx=16, cy=16, width=32, height=32) for a in azimuths]
loop = interpolate_trajectory(rig, 120)
centres = np.array([p.center for p in loop])
print("poses:", len(loop))
print("largest step between neighbouring centres: %.3f" % np.linalg.norm(np.diff(centres, axis=0), axis=1).max())
print("distance from last pose back to the first: %.3f" % np.linalg.norm(centres[-1] - centres[0]))
