"""Tick-based event-driven simulator of a compiled core array.

One logical tick is a full feedforward wave: cores are evaluated in
topological order, so spikes produced by a core are consumed by its
target cores within the same tick, and pending input lines are cleared
afterwards - histograms depend only on the current frame. Cores whose
input lines are all clear are skipped via a precomputed zero-input spike
vector, which is observationally identical to dense evaluation.

`pipelined=True` models hardware that advances one layer per tick
instead: routed spikes become visible at the next tick, so histograms
appear shifted by (number of core layers - 1) ticks but are otherwise
identical.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corelet import CoreletProgram, evaluation_order, validate
from .protocol import ClassHistogram, SpikeEvent


class ProgramLoadError(ValueError):
    """Program failed validation; message lists every violation."""


class SpikeRangeError(ValueError):
    """An injected event lies outside the program's declared input shape."""


@dataclass
class ChipStats:
    ticks: int = 0
    spikes_routed: int = 0
    cores_evaluated: int = 0
    cores_skipped: int = 0
    class_totals: list | None = None

    def as_dict(self) -> dict:
        return {
            "ticks": self.ticks,
            "spikes_routed": self.spikes_routed,
            "cores_evaluated": self.cores_evaluated,
            "cores_skipped": self.cores_skipped,
            "class_totals": list(self.class_totals or []),
        }


class ChipState:
    """Loaded core array plus per-tick line bitmaps. Single-threaded per
    instance; distinct states may run concurrently."""

    def __init__(self, program: CoreletProgram, pipelined: bool = False,
                 event_driven: bool = True):
        violations = validate(program)
        if violations:
            raise ProgramLoadError(
                f"{len(violations)} violation(s): " + "; ".join(violations)
            )
        self.program = program
        self.pipelined = pipelined
        self.event_driven = event_driven
        self.input_shape = program.input_shape
        self.num_classes = program.num_classes
        self.tick_count = 0
        self.stats = ChipStats(class_totals=[0] * program.num_classes)

        self._order = evaluation_order(program)
        n = len(program.cores)
        self._line_base = np.zeros(n + 1, dtype=np.int64)
        for core in program.cores:
            self._line_base[core.core_id + 1] = core.n_lines
        np.cumsum(self._line_base, out=self._line_base)
        total_lines = int(self._line_base[-1])
        # line bitmaps as 0.0/1.0 float32: synaptic sums are integers well
        # under 2**24, so BLAS matvecs stay exact while being much faster
        # than integer matmuls
        self._pending = np.zeros(total_lines, dtype=np.float32)
        self._pending_next = (
            np.zeros(total_lines, dtype=np.float32) if pipelined else None
        )

        self._W = [np.ascontiguousarray(c.weights, dtype=np.float32)
                   for c in program.cores]
        self._th = [c.thresholds.astype(np.float32) for c in program.cores]
        self._zero_spikes = [0 > c.thresholds for c in program.cores]
        # per-core routing flattened to (source slot, global target line)
        self._route_slots = []
        self._route_glines = []
        for core in program.cores:
            slots, glines = [], []
            for slot, tgt in enumerate(core.targets):
                for tc, tl in tgt:
                    slots.append(slot)
                    glines.append(self._line_base[tc] + tl)
            self._route_slots.append(np.asarray(slots, dtype=np.int64))
            self._route_glines.append(np.asarray(glines, dtype=np.int64))
        # per-core output class per slot (-1 when not an output neuron)
        self._out_class = []
        for core in program.cores:
            oc = np.full(core.n_neurons, -1, dtype=np.int64)
            for slot in range(core.n_neurons):
                ci = program.output_map.get(core.gid(slot))
                if ci is not None:
                    oc[slot] = ci
            self._out_class.append(oc)
        self._has_outputs = [bool((oc >= 0).any()) for oc in self._out_class]
        # external input CSR: flat (f*h + y)*w + x -> global line indices
        w, h, f = program.input_shape
        counts = np.zeros(w * h * f + 1, dtype=np.int64)
        for (x, y, fc), tgts in program.input_map.items():
            counts[(fc * h + y) * w + x + 1] = len(tgts)
        self._in_offsets = np.cumsum(counts)
        glines = np.zeros(int(self._in_offsets[-1]), dtype=np.int64)
        for (x, y, fc), tgts in program.input_map.items():
            base = self._in_offsets[(fc * h + y) * w + x]
            for i, (tc, tl) in enumerate(tgts):
                glines[base + i] = self._line_base[tc] + tl
        self._in_glines = glines

    # -- lifecycle ----------------------------------------------------------

    def reset(self) -> None:
        """Back to tick 0 with all line bitmaps clear."""
        self.tick_count = 0
        self._pending[:] = 0.0
        if self._pending_next is not None:
            self._pending_next[:] = 0.0

    # -- per-tick operations --------------------------------------------------

    def inject_spikes(self, spikes) -> None:
        """Set the input lines addressed by each (x, y, f) event.

        Duplicate events are idempotent (a line is set once). Out-of-range
        coordinates are rejected with the offending coordinate."""
        if isinstance(spikes, np.ndarray):
            arr = spikes.astype(np.int64, copy=False).reshape(-1, 3)
        else:
            events = list(spikes)
            if not events:
                return
            arr = np.array(events, dtype=np.int64)
        if arr.size == 0:
            return
        w, h, f = self.input_shape
        bad = (
            (arr[:, 0] < 0) | (arr[:, 0] >= w)
            | (arr[:, 1] < 0) | (arr[:, 1] >= h)
            | (arr[:, 2] < 0) | (arr[:, 2] >= f)
        )
        if bad.any():
            x, y, fc = arr[int(np.argmax(bad))]
            raise SpikeRangeError(
                f"spike ({x},{y},{fc}) outside input shape {w}x{h}x{f}"
            )
        flat = (arr[:, 2] * h + arr[:, 1]) * w + arr[:, 0]
        starts = self._in_offsets[flat]
        lens = self._in_offsets[flat + 1] - starts
        total = int(lens.sum())
        if not total:
            return
        gather = (
            np.repeat(starts, lens)
            + np.arange(total)
            - np.repeat(np.cumsum(lens) - lens, lens)
        )
        self._pending[self._in_glines[gather]] = 1.0

    def tick(self) -> ClassHistogram:
        """Run one full wave over the injected lines; returns this tick's
        class histogram and clears pending inputs."""
        counts = np.zeros(self.num_classes, dtype=np.int64)
        read_buf = self._pending
        write_buf = self._pending_next if self.pipelined else self._pending
        stats = self.stats
        for ci in self._order:
            lines = read_buf[self._line_base[ci] : self._line_base[ci + 1]]
            if self.event_driven and not lines.any():
                spikes = self._zero_spikes[ci]
                stats.cores_skipped += 1
                if not spikes.any():
                    continue
            else:
                spikes = self._W[ci] @ lines > self._th[ci]
                stats.cores_evaluated += 1
            if self._has_outputs[ci]:
                oc = self._out_class[ci]
                m = spikes & (oc >= 0)
                if m.any():
                    counts += np.bincount(oc[m], minlength=self.num_classes)
            slots = self._route_slots[ci]
            if slots.size:
                mask = spikes[slots]
                if mask.any():
                    write_buf[self._route_glines[ci][mask]] = 1.0
                    stats.spikes_routed += int(mask.sum())
        if self.pipelined:
            self._pending, self._pending_next = self._pending_next, self._pending
            self._pending_next[:] = 0.0
        else:
            self._pending[:] = 0.0
        hist = ClassHistogram(self.tick_count, tuple(int(c) for c in counts))
        self.tick_count += 1
        stats.ticks += 1
        for i, c in enumerate(hist.counts):
            stats.class_totals[i] += c
        return hist

    def run_frames(self, frames) -> list[ClassHistogram]:
        """inject + tick per frame; one histogram per frame, in order."""
        out = []
        for frame in frames:
            self.inject_spikes(frame)
            out.append(self.tick())
        return out

    @property
    def pipeline_latency(self) -> int:
        """Ticks between a frame and its histogram in pipelined mode."""
        layers = {c.layer for c in self.program.cores}
        return len(layers) - 1


def load_program(program: CoreletProgram, **kwargs) -> ChipState:
    """Validate and load a program; tick 0, all bitmaps clear."""
    return ChipState(program, **kwargs)
