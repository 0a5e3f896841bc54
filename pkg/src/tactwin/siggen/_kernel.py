"""Pure numpy reference of the oscillator-bank kernel.

Bit-identical to the compiled ``_dds_ext.render_block``.  Per-sample work runs
vectorized over the 40 components; once every smoothing filter has settled on
its target the remaining samples are produced in closed form.
"""

import numpy as np

_FRAC = 16                      # extra fractional bits of the smoothing state
_HALF = 1 << (_FRAC - 1)
_PHASE_MASK = 0x7FFF
_CHUNK = 4096


def _settled(freq_state, amp_state, freq_target, amp_target):
    return (np.array_equal(freq_state, freq_target << _FRAC)
            and np.array_equal(amp_state, amp_target << _FRAC))


def _smooth(state, target, alpha_q15):
    diff = (target << _FRAC) - state
    step = (alpha_q15 * diff) >> 15
    # floor never stalls from above; from below force a minimum step of one
    step[(step == 0) & (diff > 0)] = 1
    state += step


def _to_duty(acc, depth):
    duty = (acc + (1 << 30)) >> (31 - depth)
    return np.clip(duty, 0, (1 << depth) - 1)


def render_block(lut, phase, freq_state, amp_state, freq_target, amp_target,
                 alpha_q15, depth, out):
    """Render ``out.shape[1]`` samples in place; return peak ``|accumulator|``."""
    n = out.shape[1]
    peak = 0
    k = 0
    while k < n and not _settled(freq_state, amp_state, freq_target, amp_target):
        _smooth(freq_state, freq_target, alpha_q15)
        _smooth(amp_state, amp_target, alpha_q15)
        inc = (freq_state + _HALF) >> _FRAC
        amp = (amp_state + _HALF) >> _FRAC
        acc = (amp * lut[phase >> 3]).sum(axis=1)
        peak = max(peak, int(np.abs(acc).max()))
        out[:, k] = _to_duty(acc, depth)
        phase[:] = (phase + inc) & _PHASE_MASK
        k += 1
    if k == n:
        return peak

    # settled: phases advance linearly, amplitudes are constant
    inc = freq_target[:, :, None]
    amp = amp_target[:, :, None]
    while k < n:
        m = min(_CHUNK, n - k)
        steps = np.arange(m, dtype=np.int64)
        ph = (phase[:, :, None] + steps * inc) & _PHASE_MASK
        acc = (amp * lut[ph >> 3]).sum(axis=1)
        peak = max(peak, int(np.abs(acc).max()))
        out[:, k:k + m] = _to_duty(acc, depth)
        phase[:] = (phase + m * freq_target) & _PHASE_MASK
        k += m
    return peak
