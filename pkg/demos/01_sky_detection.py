#!/usr/bin/env python
"""
=====================================
Sky detection on simulated fisheye frames
=====================================
"""

# %%
# The camera looks straight up. Sky pixels decide which satellites are in
# line of sight, and the remaining pixels feed the photometric factors. The
# classifier combines an Otsu intensity threshold with a prior that favours
# pixels near the image centre.
#
# Two scenes are rendered here. The plaza puts a ring of buildings around
# the vehicle, so the sky is a disk around the centre. The street canyon
# opens a long bright strip across the image.

from pathlib import Path

import numpy as np

from slamim import io
from slamim.sim import generate, plaza_preset, urban_canyon_preset
from slamim.sky import SkyConfig, sky_probability

OUT = Path(__file__).with_name("out") / "sky"
OUT.mkdir(parents=True, exist_ok=True)


def frame_at(scn, index):
    for b in generate(scn):
        if b.index == index:
            return b
    raise IndexError(index)


# %%
# Classify one frame from each scene
# ----------------------------------
#
# ``eta`` is the probability cut between sky and structure. ``loc_scale``
# sets how quickly the centre prior decays, in pixels.

plaza = plaza_preset(0)
canyon = urban_canyon_preset(0)
cfg = SkyConfig(center=(plaza.intr.cx, plaza.intr.cy), eta=0.3, loc_scale=110.0)

for name, scn, idx in [("plaza", plaza, 5), ("canyon", canyon, 85), ("open", canyon, 20)]:
    b = frame_at(scn, idx)
    m = sky_probability(b.frame, cfg)
    acc = np.mean(m.is_sky == b.sky_truth)
    recall = np.mean(m.is_sky[b.sky_truth])
    print(f"{name:7s} frame {idx:3d}: Otsu threshold {m.otsu_threshold:6.1f}, "
          f"accuracy {acc:.3f}, sky recall {recall:.3f}")
    io.write_pgm(OUT / f"{name}_frame.pgm", b.frame.intensities)
    io.write_sky_mask(OUT / f"{name}_sky.pbm", m, OUT / f"{name}_prob.txt")

# %%
# The plaza disk is classified almost perfectly. In the canyon the strip
# reaches the image border, where the centre prior is weak, so the far ends
# of the street are labelled as structure. The blocked satellites sit on the
# facades next to the strip, so the satellite lookup still works.
#
# The open-sky frame before the canyon is the hard case. Sky fills the whole
# image and the centre prior rejects its outer ring.
#
# Sweeping the prior scale shows the trade-off. A wide prior rescues the
# open-sky frame but floods the plaza buildings with sky.

for scale in (80.0, 110.0, 200.0, 300.0):
    c = SkyConfig(center=cfg.center, eta=0.3, loc_scale=scale)
    accs = []
    for scn, idx in [(plaza, 5), (canyon, 85), (canyon, 20)]:
        b = frame_at(scn, idx)
        accs.append(np.mean(sky_probability(b.frame, c).is_sky == b.sky_truth))
    print(f"loc_scale {scale:5.0f}: plaza {accs[0]:.3f}  canyon {accs[1]:.3f}  open {accs[2]:.3f}")

print(f"frames and masks written to {OUT}")
