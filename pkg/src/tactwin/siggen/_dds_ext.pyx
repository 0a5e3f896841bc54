# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled oscillator-bank kernel; see ``_kernel.py`` for the reference."""

from libc.stdint cimport int64_t, uint16_t

cdef enum:
    FRAC = 16
    HALF = 32768
    PHASE_MASK = 0x7FFF


def render_block(const int64_t[::1] lut,
                 int64_t[:, ::1] phase,
                 int64_t[:, ::1] freq_state,
                 int64_t[:, ::1] amp_state,
                 const int64_t[:, ::1] freq_target,
                 const int64_t[:, ::1] amp_target,
                 int64_t alpha_q15,
                 int depth,
                 uint16_t[:, ::1] out):
    cdef Py_ssize_t n = out.shape[1]
    cdef Py_ssize_t nch = phase.shape[0]
    cdef Py_ssize_t ncomp = phase.shape[1]
    cdef Py_ssize_t k, ch, c
    cdef int64_t diff, step, acc, inc, amp, duty, peak = 0, mag
    cdef int64_t top = (1 << depth) - 1
    cdef int shift = 31 - depth
    cdef int64_t offset = 1 << 30

    for k in range(n):
        for ch in range(nch):
            acc = 0
            for c in range(ncomp):
                diff = (freq_target[ch, c] << FRAC) - freq_state[ch, c]
                step = (alpha_q15 * diff) >> 15
                if step == 0 and diff > 0:
                    step = 1
                freq_state[ch, c] += step

                diff = (amp_target[ch, c] << FRAC) - amp_state[ch, c]
                step = (alpha_q15 * diff) >> 15
                if step == 0 and diff > 0:
                    step = 1
                amp_state[ch, c] += step

                inc = (freq_state[ch, c] + HALF) >> FRAC
                amp = (amp_state[ch, c] + HALF) >> FRAC
                acc += amp * lut[phase[ch, c] >> 3]
                phase[ch, c] = (phase[ch, c] + inc) & PHASE_MASK
            mag = acc if acc >= 0 else -acc
            if mag > peak:
                peak = mag
            duty = (acc + offset) >> shift
            if duty < 0:
                duty = 0
            elif duty > top:
                duty = top
            out[ch, k] = <uint16_t>duty
    return peak
