"""
Three channel models
====================

The same placement of vehicles can succeed or fail depending on how reception
is modelled.  This walk-through puts a transmitter at the origin and moves a
receiver away from it, with and without an interferer on the same TB.
"""
import numpy as np

from docasched import channel as ch

# E1_IDEAL: anyone in the area hears you unless another vehicle shares your TB.
print("ideal, alone:", ch.e1_receive(0, False), " with a co-channel user:", ch.e1_receive(1, False))

# E2_RANGE: a hard 120 m disc.  Interference only matters when the interferer
# is itself within range of the receiver.
rng_cfg = ch.ChannelConfig(model=ch.E2_RANGE, tx_power=-5.0)
for d in (50, 110, 130):
    ok = ch.range_receive((0.0, 0.0), (d, 0.0), [], False, rng_cfg)
    blocked = ch.range_receive((0.0, 0.0), (d, 0.0), [(d + 100.0, 0.0)], False, rng_cfg)
    print(f"range model, receiver at {d:3d} m: clear={ok}  interferer 100 m beyond={blocked}")

# E2_FULL: WINNER B1 line-of-sight pathloss plus log-normal shadowing.  The
# default noise floor equals the unshadowed power received at 100 m, the edge
# of the area where receivers are counted.
full = ch.ChannelConfig(model=ch.E2_FULL, tx_power=-5.0)
print(f"\nnoise floor {full.noise_dbm:.2f} dBm, breakpoint {ch.breakpoint_distance(full):.1f} m")
for d in (10, 50, 100, 150, 200):
    pl = float(ch.winner_b1_pathloss(d, full))
    snr = ch.sinr_db((0.0, 0.0), (float(d), 0.0), [], full)
    print(f"d={d:3d} m  pathloss {pl:6.2f} dB  SNR {snr:6.2f} dB")

# Shadowing is spatially correlated: it decorrelates over about 25 m, so a
# link's shadow changes slowly as two vehicles drift apart.
rng = np.random.default_rng(0)
state = ch.new_link_shadow(rng, 20.0, full.shadow_sigma)
trace = []
for sep in np.arange(20.0, 120.0, 5.0):
    ch.update_shadowing(state, sep, rng, full.shadow_sigma, full.decorrelation_distance)
    trace.append(round(state.value, 2))
print("\nshadow trace along 100 m (dB):", trace)
