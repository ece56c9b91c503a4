"""Compare the data-driven and forced G=10 rules on small-cluster designs.

A short version of the grouping study: for each design, a handful of
replications under both rules, reporting failure and rejection rates.

    python3 demos/grouping_rules.py [reps]
"""
import sys

from mlmgof.simlab import find_scenarios, run_scenario


def main(reps=20, seed=7):
    print(f"{'scenario':<24}{'failure':>9}{'reject':>9}  failure kinds")
    for sc in find_scenarios(part=3):
        s = run_scenario(sc, reps, seed)
        print(f"{sc.id:<24}{s.failure_rate:>9.2f}{s.rejection_rate:>9.2f}  {s.failure_kinds}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 20)
