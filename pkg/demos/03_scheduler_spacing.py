"""
Timestep spacing and why single-step needs "trailing"
=====================================================

A diffusion sampler picks N inference timesteps out of the T training
ones. The two spacing rules differ at the top end: leading never reaches
the final timestep, trailing always does. At N = 1 that difference is
the whole story, and the mismatch is quantifiable.
"""
import numpy as np

from matforge.scheduler import (NoiseSchedule, SpacingMode, forward_noise,
                                convert_prediction, make_timesteps,
                                noise_mismatch_ratio, single_step_infer)

sched = NoiseSchedule()  # T=1000, scaled-linear betas

print("timestep grids (descending):")
for n in (1, 4, 10):
    lead = make_timesteps(1000, SpacingMode("leading", n, 1))
    trail = make_timesteps(1000, SpacingMode("trailing", n))
    print(f"  N={n:2d}  leading  {lead.tolist()}")
    print(f"        trailing {trail.tolist()}")

# a single leading step asks the model to denoise at t=1 (noise variance
# 1 - abar_1, nearly zero) while actually handing it pure noise
# (variance ~ 1 - abar_999, nearly one). The ratio is the size of the lie.
ratio = noise_mismatch_ratio(sched)
v1 = 1.0 - sched.alpha_bar(1)
v999 = 1.0 - sched.alpha_bar(999)
print(f"\nnoise variance at t=1: {v1:.5f}, at t=999: {v999:.5f}, "
      f"ratio {ratio:.0f}x")

# prediction conversions are exact algebra on (x0, eps); round trip one
rng = np.random.default_rng(0)
x0 = rng.normal(size=(8, 8, 3))
eps = rng.normal(size=(8, 8, 3))
t = 749
x_t = forward_noise(x0, eps, t, sched)
sa, sb = np.sqrt(sched.alpha_bar(t)), np.sqrt(1.0 - sched.alpha_bar(t))
v = sa * eps - sb * x0  # the "velocity" encoding of the same pair
x0_back, eps_back = convert_prediction(v, x_t, t, "v", sched)
print(f"v-prediction round trip at t={t}: "
      f"max |x0 err| {np.abs(x0_back - x0).max():.2e}, "
      f"max |eps err| {np.abs(eps_back - eps).max():.2e}")

# single-step inference: latent starts at zeros, the model sees
# (latent, conditioning) stacked and t = 999. A model that encodes its
# answer as v makes the one-step reconstruction exact.
target = rng.uniform(0.0, 1.0, (8, 8, 3))


def oracle_model_v(stack, t):
    # stack = [zero latent | conditioning]; answer with the v that decodes
    # to the conditioning image: x0 = sa*x_t - sb*v, so v = (sa*x_t - x0)/sb
    cond = stack[..., 3:]
    latent = stack[..., :3]
    sa_t = np.sqrt(sched.alpha_bar(t))
    sb_t = np.sqrt(1.0 - sched.alpha_bar(t))
    return (sa_t * latent - cond) / sb_t


x0_hat = single_step_infer(oracle_model_v, target, sched, kind="v")
print(f"single-step trailing reconstruction: "
      f"max err {np.abs(x0_hat - target).max():.2e}")

# leading spacing is rejected for single-step outright
try:
    single_step_infer(oracle_model_v, target, sched,
                      spacing=SpacingMode("leading", 1, 1))
except Exception as e:
    print(f"leading single-step: {type(e).__name__}: {e}")
