"""Generate a small oracle dataset, train a surrogate, and map a TL field.

Runs in about a minute on one core. Pass an output directory (created if
missing); the trained model and field are written there.

    python3 demos/field_walkthrough.py /tmp/tl_demo
"""

import sys
from pathlib import Path

import numpy as np
import torch

from tlsurrogate import datagen, model as M, train as T

torch.set_num_threads(1)
out = Path(sys.argv[1] if len(sys.argv) > 1 else "tl_demo")
out.mkdir(parents=True, exist_ok=True)

# 6 sources along the default route, 8 receivers each, every third-octave band
spec = datagen.DatasetSpec(n_sources=6, receivers_per_source=8, seed=1)
bathy = datagen.AnalyticBathymetry()
splits, manifest = datagen.generate_dataset(spec, bathy, datagen.OracleConfig(seed=1), out)
print("rows:", manifest["row_counts"])

cfg = T.TrainConfig(max_epochs=40, batch_size=256, seed=1)
result = T.train(splits["train"], splits["val"], cfg, log_path=out / "train_log.jsonl",
                 progress=lambda r: print(f"epoch {r['epoch']:2d}  val MSE {r['val_mse']:8.2f} dB^2"))
model = result.model
model.metadata["bathymetry"] = manifest["bathymetry"]
M.save(model, out / "model.json")

metrics = T.validate(model, splits["test"])
print(f"test: MSE {metrics.mse:.2f} dB^2, bias {metrics.mean_signed_error:+.2f} dB, "
      f"2-sigma coverage {metrics.coverage_2sigma:.2f}")
print(f"learned physics mean: A={float(model.A):.2f}, B={float(model.B):.3f}")

# TL around the first training source at 400 Hz, receivers at mid depth
src = splits["train"].geometry[0]
lats = np.linspace(src[0] - 0.15, src[0] + 0.15, 40)
lons = np.linspace(src[1] - 0.25, src[1] + 0.25, 40)
LA, LO = np.meshgrid(lats, lons, indexing="ij")
n = LA.size
depth = float(np.mean(model.norm_ranges.rcv_depth))
geometry = np.column_stack([np.full(n, src[0]), np.full(n, src[1]), np.full(n, src[2]),
                            LA.ravel(), LO.ravel(), np.full(n, depth), np.full(n, 400.0)])
profiles = datagen.sample_profiles(geometry[:, 0], geometry[:, 1], geometry[:, 3], geometry[:, 4], bathy)
mean, var, clamped = M.predict_arrays(model, geometry, profiles)
truth = datagen.oracle_tl_arrays(geometry, profiles, datagen.OracleConfig(seed=1))
print(f"field: {n} points, TL {mean.min():.1f}..{mean.max():.1f} dB, "
      f"rms error vs oracle {np.sqrt(np.mean((mean - truth) ** 2)):.2f} dB, clamped {int(clamped.sum())}")
np.savetxt(out / "field.csv", np.column_stack([LA.ravel(), LO.ravel(), mean, np.sqrt(var), truth]),
           fmt="%.6f", delimiter=",", header="lat,lon,tl_mean,tl_sigma,tl_oracle", comments="")
