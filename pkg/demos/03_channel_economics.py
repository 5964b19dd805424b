"""Price the remote-timing channel: requests, runtime, leakage, evasion.

The sandbox exposes no usable local timer, so every bit is timed by a pair of
requests to a remote high-resolution clock.  Amplification repeats the leak
gadget, growing the class gap linearly while per-iteration jitter only grows
with the square root, so requests-per-bit shrinks roughly in proportion.
This demo reproduces the measured leakage table, shows the conservation law,
and prices the two ways of ducking the branch/iTLB threshold.

    python3 demos/03_channel_economics.py   (takes ~20 s: Monte-Carlo budgeting)
"""

from spectreguard import (
    AttackProfile,
    evasion_cost,
    js_worker_params,
    leakage_table,
    required_requests,
)

print("measured-runtime leakage table (3600 / (requests x runtime)):")
print(f"{'amplification':>14} {'requests':>9} {'runtime':>9} {'bits/hour':>10}")
for row in leakage_table():
    print(f"{row.amplification:>14} {row.requests_per_bit:>9} "
          f"{row.script_runtime_s:>8.3f}s {row.bits_per_hour:>10.1f}")
print()

params = js_worker_params()
print("requests needed for a 99%-reliable bit (seeded Monte-Carlo):")
base = required_requests(1, params, target_success=0.99, rng_seed=7)
print(f"{'amplification':>14} {'requests':>9} {'requests x amplification':>25}")
print(f"{1:>14} {base:>9} {base:>25}")
for amplification in (10, 100, 1000):
    n = required_requests(amplification, params, target_success=0.99, rng_seed=7)
    print(f"{amplification:>14} {n:>9} {n * amplification:>25}")
print("(the product stays near the no-amplification request count)")
print()

print("evading a branch/iTLB threshold of 4096:")
cost = evasion_cost(4096.0, AttackProfile.for_variant("pht"))
print(f"  page inflation : {cost.code_pages} extra code pages per bit "
      f"= {cost.code_bytes / 1024:.0f} KB of code")
print(f"  slow down      : amplification {cost.amplification}, "
      f"{cost.requests_per_bit} requests/bit, "
      f"{cost.leakage_bits_per_hour:.2f} bits/hour residual leakage")
print("  backstop       : the 10000-subsequent-request cap bounds the slow route")
