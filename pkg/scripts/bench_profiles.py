#!/usr/bin/env python3
"""Per-event ingestion cost and model accounting across encoder profiles.

Usage: python scripts/bench_profiles.py [--events 20000]
"""

import argparse
from dataclasses import replace

from eva.config import ENCODER_PROFILES
from eva.counting import count_macs_per_event, count_params
from eva.events import SensorGeometry, synth_generate
from eva.params import init_encoder_params
from eva.pipeline import bench


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--events", type=int, default=20_000)
    ap.add_argument("--profiles", nargs="*", default=["small", "gen1", "dvs"])
    args = ap.parse_args()

    print(f"{'profile':>8} {'params':>9} {'MACs/ev':>9} {'us/event':>9} "
          f"{'kev/s':>7} {'p99 us':>7} {'decile':>7}")
    for name in args.profiles:
        cfg = replace(ENCODER_PROFILES[name], precision="f32")
        params = init_encoder_params(cfg, seed=0)
        side = cfg.patch * 4
        geom = SensorGeometry(side, side, cfg.patch)
        duration = 1_000_000
        events = synth_generate("moving_bar", geom, duration,
                                args.events * 1e6 / duration, seed=0)
        rep = bench(params, geom, events)
        print(f"{name:>8} {count_params(cfg):>9} {count_macs_per_event(cfg):>9} "
              f"{rep['mean_us']:>9.0f} {rep['events_per_sec'] / 1e3:>7.1f} "
              f"{rep['p99_us']:>7.0f} {rep['decile_ratio']:>7.2f}")


if __name__ == "__main__":
    main()
