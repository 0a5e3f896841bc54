"""Render throughput of the compiled oscillator kernel vs. the numpy fallback.

    python3 benchmarks/bench_render.py [--seconds 2] [--repeat 5]

Both kernels render the same workloads from identical bank states; outputs
are compared for bit equality before timings are reported.
"""

import argparse
import time

import numpy as np

from tactwin import wiretab
from tactwin.siggen import backend
from tactwin.siggen.machine import BankState, _lut

FS = 25_000


def workloads():
    one = wiretab.FrequencyTable.single_tone(250.0, 0.9, [0])
    full = wiretab.FrequencyTable.from_tuples(
        [[(37.0 * (k + 1) + 11 * ch, 0.095) for k in range(10)] for ch in range(4)])
    return {"1 tone": one, "40 tones": full}


def bank_for(table, settled):
    b = BankState.zeros()
    fc, ac = wiretab.decode_codes(wiretab.encode(table, FS))
    b.freq_target[:] = fc
    b.amp_target[:] = ac
    if settled:
        b.freq_state[:] = b.freq_target << 16
        b.amp_state[:] = b.amp_target << 16
    return b


def run(kernel, table, n, settled, alpha=1638):
    b = bank_for(table, settled)
    out = np.empty((4, n), np.uint16)
    t0 = time.perf_counter()
    kernel(_lut(), b.phase, b.freq_state, b.amp_state, b.freq_target, b.amp_target,
           alpha, 12, out)
    return time.perf_counter() - t0, out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seconds", type=float, default=2.0, help="emulated seconds per run")
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    n = int(args.seconds * FS)
    kernels = {"python": backend.python_render_block}
    if backend.compiled_render_block is not None:
        kernels["compiled"] = backend.compiled_render_block
    else:
        print("compiled kernel not built; timing the fallback only")

    print(f"{n} samples x 4 channels ({args.seconds:g} s at {FS} Hz), best of {args.repeat}")
    print(f"{'workload':<10} {'state':<9} {'kernel':<9} {'time ms':>9} {'x realtime':>11}")
    for name, table in workloads().items():
        for settled in (False, True):
            outs = {}
            for kname, kernel in kernels.items():
                best = min(run(kernel, table, n, settled)[0] for _ in range(args.repeat))
                outs[kname] = run(kernel, table, n, settled)[1]
                state = "settled" if settled else "ramping"
                print(f"{name:<10} {state:<9} {kname:<9} {best * 1e3:9.2f} "
                      f"{args.seconds / best:11.1f}")
            if len(outs) == 2:
                assert np.array_equal(outs["python"], outs["compiled"]), "kernels disagree"


if __name__ == "__main__":
    main()
