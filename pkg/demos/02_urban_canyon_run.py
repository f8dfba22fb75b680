#!/usr/bin/env python
"""
=========================================
GPS only versus GPS plus fisheye camera
=========================================
"""

# %%
# The urban canyon preset drives 100 s along a straight road. The first
# 70 s are in open sky. Then the road enters a street canyon where
# satellites 6, 12 and 24 lose line of sight and pick up multipath biases
# of 40 to 70 m. A patch of one facade also flickers in brightness, which
# breaks the brightness constancy the photometric factors rely on.
#
# Both estimator suites see exactly the same GNSS noise, so the difference
# between them comes from the camera alone.

import numpy as np

from slamim.pipeline import PipelineConfig, run_scored
from slamim.sim import urban_canyon_preset

SEED = 0
scn = urban_canyon_preset(SEED)

runs = {}
for suite in ("gps_only", "gps_vision"):
    results, bundles, summary = run_scored(scn, PipelineConfig(suite=suite, seed=SEED))
    runs[suite] = (results, bundles, summary)
    print(f"{suite:10s}  RMSE {summary.rmse:6.2f} m   mean PL {summary.mean_pl:5.2f} m   "
          f"PL violations {summary.violation_rate:.2f}")

# %%
# Error and protection level by phase
# -----------------------------------
#
# In open sky the camera adds little, and the few tracked facade pixels
# even cost some accuracy. In the canyon it helps in two ways. The sky mask
# inflates the variance of the blocked satellites, and the photometric
# factors constrain the motion between frames.

for suite, (results, bundles, _) in runs.items():
    err = np.array([np.linalg.norm(r.state.vehicle.pos - b.truth.vehicle.pos) for r, b in zip(results, bundles)])
    pl = np.array([r.report.pl for r in results])
    t = np.array([r.t for r in results])
    for label, sel in [("open sky", t < 70), ("canyon", t >= 70)]:
        print(f"{suite:10s} {label:9s} mean error {err[sel].mean():6.2f} m   mean PL {pl[sel].mean():5.2f} m")

# %%
# Which satellites were flagged?
# ------------------------------
#
# The GPS fault status comes from each residual's standardised distance
# under a Gaussian fitted to the open-sky residuals. A status above 0.5
# puts the satellite in the fault mode used for the protection level.

results, bundles, summary = runs["gps_vision"]
prns = list(results[-1].prn)
print("epoch  " + "  ".join(f"{p:5d}" for p in prns))
for r in results[66:100:6]:
    print(f"{r.index:5d}  " + "  ".join(f"{s:5.2f}" for s in r.gps_status))
print(f"GPS fault recall {summary.gps_recall:.2f}, precision {summary.gps_precision:.2f}")

# %%
# The multipath satellites are caught as soon as the canyon starts. The
# low precision comes from clean satellites. Once the biased ranges pull the
# position estimate off, their residuals grow too, and a residual of about
# one standard deviation is already enough to cross 0.5 on this status
# scale.
#
# Vision faults
# -------------
#
# Each superpixel fits a line of received against expected intensities.
# The superpixel whose pixels disagree with every other superpixel's line
# gets the highest status. The score counts the epochs where that is one of
# the superpixels covering the flickering patch.

print(f"vision hit rate {summary.vision_hit_rate:.2f} over {summary.vision_epochs} faulted epochs")
