"""Gap between the sum-group-MSE and sum-MSE designs across BS powers.

Usage: ``python demos/power_sweep.py [num_drops]`` (default 5).
"""

import sys

from cfmcast.harness import sweep_power
from cfmcast.scenario import preset


def main(num_drops: int = 5) -> None:
    cfg = preset("desk").replace(num_drops=num_drops)
    levels = [20.0, 30.0, 40.0]
    table = sweep_power(cfg, levels, ["centralized_group", "centralized"])
    print(f"{'rho_bs [dBm]':>12} {'sum-group':>10} {'sum-MSE':>10} {'gap':>8} {'gap %':>7}")
    for rho in levels:
        a = table.final_mean_rate("centralized_group", rho)
        b = table.final_mean_rate("centralized", rho)
        print(f"{rho:12.0f} {a:10.3f} {b:10.3f} {a - b:8.3f} {100 * (a - b) / b:7.2f}")
    drops = {r.drop for r in table.rows}
    print(f"\n{len(drops)} drops; mean over drops at the final iteration.")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 5)
