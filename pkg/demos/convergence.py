"""Sum-group rate versus bi-directional iterations on the desk profile.

Runs every method on a few paired drops and prints the across-drop mean of
the sum-group rate and the effective rate every ten iterations. Pass a
drop count as the first argument (default 3).
"""

import sys

from cfmcast.harness import METHODS, run_experiment
from cfmcast.scenario import preset


def main(num_drops: int = 3) -> None:
    cfg = preset("desk").replace(num_drops=num_drops, num_iterations=100)
    table = run_experiment(cfg, list(METHODS))
    rows = {(s["method"], s["iteration"]): s for s in table.summary()}
    marks = [1, 10, 20, 40, 60, 80, 100]
    print(f"{'method':<24}" + "".join(f"{'i=' + str(i):>9}" for i in marks))
    for method in METHODS:
        print(f"{method:<24}" + "".join(f"{rows[method, i]['mean_rate']:9.2f}" for i in marks))
    print("\neffective rate (r_tot = %d)" % cfg.r_tot)
    for method in METHODS:
        print(f"{method:<24}"
              + "".join(f"{rows[method, i]['mean_effective_rate']:9.2f}" for i in marks))


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 3)
