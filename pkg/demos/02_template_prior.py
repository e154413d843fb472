"""
A template prior as a stand-in diffusion model
==============================================

With a finite set of training images the optimal denoiser has a closed
form: a softmax-weighted average of the templates.  Running the reverse
process with it lands on one of the templates.
"""

import numpy as np

from dudodp.diffusion import (AnalyticDenoiser, Normalizer, TemplatePrior, analytic_denoise, make_schedule,
                              sample_xt, subsequence_schedule, unconditional_sample)
from dudodp.phantom import PhantomFamily, generate_phantom

schedule = make_schedule(1000, 1e-4, 2e-2)
print(f"alpha_bar at t=1: {schedule.alphas_bar[1]:.6f}, at t=T: {schedule.alphas_bar[1000]:.3e}")

# ten held-out phantoms, mapped into the [-1, 1] diffusion range
norm = Normalizer()
fam = PhantomFamily(jitter=0.5)
prior = TemplatePrior.from_images([generate_phantom(fam.spec(s), 64) for s in range(10000, 10010)], norm)
print("templates:", prior.k, "checksum", prior.checksum()[:12])

# how sharp is the posterior mean at different noise levels?
rng = np.random.default_rng(0)
c = prior.templates[3]
for t in (1000, 500, 200, 50, 10):
    x_t = sample_xt(c, t, rng.standard_normal(c.shape), schedule)
    f = analytic_denoise(prior, x_t, t, schedule)
    print(f"t={t:4d}: RMSE of the prediction to its source template {np.sqrt(np.mean((f - c) ** 2)):.4f}")

# 100-step subsequence, as in the reconstruction loop
seq = subsequence_schedule(schedule, 100)
print("subsequence:", seq[:3], "...", seq[-2:])

den = AnalyticDenoiser(prior)
for seed in range(5):
    x = unconditional_sample(den, schedule, 100, seed, (64, 64))
    d = [np.sqrt(np.mean((x - t) ** 2)) for t in prior.templates]
    print(f"seed {seed}: nearest template {int(np.argmin(d))}, distance {min(d):.2e}")
