"""Captured events per node for several batch sizes, nodes sorted by degree.

Prints the aggregate per batch size and the captured fraction per degree decile.
"""
import argparse

import numpy as np

from tgpar.synth import SynthConfig, generate
from tgpar.tgraph import captured_events_analysis, event_degree, load_events


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--data", help="event CSV; default is a Wikipedia-sized synthetic stream")
    ap.add_argument("--batch-sizes", default="1,10,60,600,6000")
    args = ap.parse_args()
    g = load_events(args.data) if args.data else generate(
        SynthConfig(users=8227, items=1000, events=157474, communities=20))
    deg = event_degree(g)
    active = np.flatnonzero(deg > 0)
    order = active[np.argsort(-deg[active], kind="stable")]
    deciles = np.array_split(order, 10)
    print("batch  captured  " + "  ".join(f"d{k}" for k in range(10)))
    for b in (int(x) for x in args.batch_sizes.split(",")):
        cap = captured_events_analysis(g, b)
        frac = [cap[d].sum() / deg[d].sum() for d in deciles]
        print(f"{b:5d}  {cap.sum():8d}  " + "  ".join(f"{f:.2f}" for f in frac))


if __name__ == "__main__":
    main()
