"""
What the merge saves
====================
"""

from erohprf import HPRFBConfig
from erohprf.bench import cost_report, measure_latency

for scales in [(3,), (3, 5), (3, 5, 7), (3, 5, 7, 9)]:
    cfg = HPRFBConfig(scales=scales, in_channels=8, out_channels=8)
    r = cost_report(cfg, (32, 32))
    print(scales, r.params_train, r.params_inference, r.macs_train, r.macs_inference)

# only the largest scale matters after merging
for types in ["S", "VC,HC", "VC,HC,VR,HR,S"]:
    print(types, cost_report(HPRFBConfig(rf_types=types, in_channels=8, out_channels=8), (32, 32)).params_inference)

cfg = HPRFBConfig(in_channels=8, out_channels=8)
t_train, t_merged = measure_latency(cfg, (32, 32), runs=30)
print(f"multi-branch {1e3 * t_train:.2f} ms, merged {1e3 * t_merged:.2f} ms")
