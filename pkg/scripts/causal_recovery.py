"""Recover planted linear SCMs over many seeds and report sign accuracy, skeleton F1 and weight sums.

    python scripts/causal_recovery.py --seeds 20 --n 10000
"""
import argparse
import statistics

from tracecausal.causal import FeatureMatrix, feature_tiers, learn_graph
from tracecausal.synth import sample_linear_scm

COLUMNS = ["gridX", "blockX", "grid_size", "workgroup_size", "runtime", "sq_waves", "tcc_hit", "tcc_miss"]


def f1(found, truth):
    tp = len(found & truth)
    if tp == 0:
        return float(found == truth)
    p, r = tp / len(found), tp / len(truth)
    return 2 * p * r / (p + r)


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--n", type=int, default=10_000)
    ap.add_argument("--alpha", type=float, default=0.05)
    ap.add_argument("--max-cond", type=int, default=3)
    ap.add_argument("--parents", type=int, default=3)
    ap.add_argument("--edge-prob", type=float, default=0.2)
    args = ap.parse_args()

    tiers = feature_tiers(COLUMNS, "perf_variation")
    scores, found_parents, right_signs, planted = [], 0, 0, 0
    for seed in range(args.seeds):
        scm = sample_linear_scm(COLUMNS, args.n, seed, tiers, n_parents=args.parents, edge_prob=args.edge_prob)
        g = learn_graph(FeatureMatrix(scm.columns, scm.rows, scm.target, scm.target_name),
                        args.alpha, args.max_cond, tiers)
        edges = {tuple(sorted((e.src, e.dst))) for e in g.edges}
        score = f1(edges, scm.edges)
        scores.append(score)
        signs = {e.src: e.sign for e in g.target_edges()}
        weights = sum(e.weight_percent for e in g.target_edges())
        missed = []
        for p, beta in scm.parents.items():
            planted += 1
            if p in signs:
                found_parents += 1
                right_signs += signs[p] == (1 if beta > 0 else -1)
            else:
                missed.append(p)
        print(f"seed {seed:>2}: F1={score:.3f} weight sum={weights:.12f}"
              + (f" missed parents={missed}" if missed else ""))
    print(f"median F1 {statistics.median(scores):.3f}; parents found {found_parents}/{planted}; "
          f"signs correct {right_signs}/{found_parents}")


if __name__ == "__main__":
    main()
