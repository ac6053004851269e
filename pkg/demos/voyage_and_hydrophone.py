"""Plan per-leg speeds past a receptor, then correct the model with one hydrophone.

Expects the model written by field_walkthrough.py:

    python3 demos/voyage_and_hydrophone.py /tmp/tl_demo
"""

import copy
import sys
from pathlib import Path

import numpy as np
import torch

from tlsurrogate import assimilate as A, datagen, geo, model as M, voyage

torch.set_num_threads(1)
out = Path(sys.argv[1] if len(sys.argv) > 1 else "tl_demo")
model = M.load(out / "model.json")
bathy = datagen.bathy_from_dict(model.metadata["bathymetry"])
splits, _ = datagen.load_splits(out)
test = splits["test"]

# a three-leg transit with the receptor placed at a test receiver
row = test.geometry[np.argmin(np.abs(test.geometry[:, 6] - 400.0))]
receptor = geo.GeoPoint(row[3], row[4], row[5])
route = voyage.Route([geo.GeoPoint(row[0], row[1] - 0.2), geo.GeoPoint(row[0], row[1]),
                      geo.GeoPoint(row[0] + 0.05, row[1] + 0.2)],
                     v0_knots=10.0, vmax_knots=16.0, source_depth_m=float(row[2]), dt_s=60.0)
plan = voyage.optimize_route(voyage.SurrogateTL(model, bathy), route, receptor)
for leg in plan.legs:
    print(f"leg {leg.index}: {leg.length_km:5.1f} km at {leg.speed_knots:5.2f} kn, SEL {leg.sel_db:6.2f} dB")
print(f"voyage SEL {plan.total_sel_db:.2f} dB over {plan.total_time_s / 60:.0f} min")
plan.write(out / "voyage_plan.json", out / "rl_series.csv")

# a deliberately biased copy of the model, then one oracle measurement at the hydrophone
biased = copy.deepcopy(model)
with torch.no_grad():
    biased.A.add_(1.0)
source, hydro, f_hz = geo.GeoPoint(*row[:3]), receptor, float(row[6])
rng = np.random.default_rng(0)
profile = datagen.sample_profile(source, hydro, bathy)
oracle = datagen.OracleConfig(seed=1)
y = datagen.oracle_tl(source, hydro, f_hz, profile, oracle, noisy=True, rng=rng)
qg = A.disk_queries(hydro, source, f_hz, 5.0, 200, rng)
qb = datagen.sample_profiles(qg[:, 0], qg[:, 1], qg[:, 3], qg[:, 4], bathy)
truth = datagen.oracle_tl_arrays(qg, qb, oracle)
_, report = A.assimilate(biased, [A.HydrophoneObs(source, hydro, f_hz, y, profile)], queries=(qg, qb),
                         truth=truth)
s = report.summary()
print(f"within 5 km of the hydrophone: bias {s['mean_signed_error_before']:+.2f} -> "
      f"{s['mean_signed_error_after']:+.2f} dB, sigma {s['mean_sigma_before']:.2f} -> {s['mean_sigma_after']:.2f} dB")
