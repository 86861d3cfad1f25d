"""Compiler from a trinary network onto crossbar cores.

Each core has at most 256 input lines and 256 neurons behind a 256x256
synaptic crossbar; a spiking neuron delivers to exactly one target core,
where a single input line fans out to every neuron of that core. A layer
is placed one feature group at a time, tiling its output plane row-major
into spatial tiles whose union of receptive fields fits a core's input
lines. Whenever a neuron's output is consumed by more than one core, an
exact duplicate (same weight row, same threshold) is placed for each extra
target core, recorded in `duplicate_groups`.

Compilation walks layers from the output backwards so the consumer cores -
and therefore every neuron's duplication factor - are known when the layer
producing them is packed. Core ids are then renumbered input-to-output.

With `paired_lines=True` every synapse is expanded to a (+1, -1) pair of
input lines carrying the same source spike, modeling hardware that builds
trinary weights from two binary lines; usable fan-in halves to 128.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .trinary_net import (
    KIND_CORE_CLASSIFIER,
    LayerSpec,
    TrinaryNetworkSpec,
    out_size,
)

CORE_LINES = 256
CORE_NEURONS = 256
MAX_CORES = 4096
MAX_NEURONS = 1_048_576
SLOTS = 256  # global neuron id = core_id * SLOTS + slot

PROGRAM_MAGIC = b"TNCP"
PROGRAM_VERSION = 1

SRC_INPUT = 0
SRC_NEURON = 1


class CompileError(ValueError):
    pass


class UncompilableLayerError(CompileError):
    """A layer's per-neuron fan-in cannot fit a core's input lines."""


class CapacityError(CompileError):
    """The compiled program exceeds the chip's core budget."""


class ProgramFormatError(ValueError):
    pass


@dataclass(eq=False)
class CoreSpec:
    """One crossbar core: input line sources, per-neuron weight rows,
    thresholds, and each neuron's delivery targets (core, line)."""

    core_id: int
    layer: int
    line_sources: list  # ("in", x, y, f) or ("n", gid)
    weights: np.ndarray  # int8 (n_neurons, n_lines)
    thresholds: np.ndarray  # int32 (n_neurons,)
    targets: list  # per neuron: list[(core_id, line)]

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.int8)
        self.thresholds = np.asarray(self.thresholds, dtype=np.int32)

    @property
    def n_lines(self) -> int:
        return len(self.line_sources)

    @property
    def n_neurons(self) -> int:
        return len(self.thresholds)

    def gid(self, slot: int) -> int:
        return self.core_id * SLOTS + slot


@dataclass(eq=False)
class CoreletProgram:
    cores: list[CoreSpec]
    duplicate_groups: list[tuple[int, ...]]
    input_map: dict  # (x, y, f) -> list[(core_id, line)]
    output_map: dict  # gid -> class index
    input_shape: tuple[int, int, int]  # (w, h, f)
    num_classes: int

    @property
    def routing(self) -> dict:
        """gid -> list of (core_id, line) deliveries."""
        out = {}
        for core in self.cores:
            for slot, tgt in enumerate(core.targets):
                out[core.gid(slot)] = list(tgt)
        return out

    @property
    def n_neurons(self) -> int:
        return sum(c.n_neurons for c in self.cores)

    @property
    def n_logical_neurons(self) -> int:
        extra = sum(len(g) - 1 for g in self.duplicate_groups)
        return self.n_neurons - extra

    def neuron(self, gid: int) -> tuple[CoreSpec, int]:
        core = self.cores[gid // SLOTS]
        return core, gid % SLOTS

    def to_bytes(self) -> bytes:
        return _program_to_bytes(self)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes) -> "CoreletProgram":
        return _program_from_bytes(data)

    @classmethod
    def load(cls, path) -> "CoreletProgram":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


# ---------------------------------------------------------------------------
# Compilation


def _choose_tile(layer: LayerSpec, out_w: int, out_h: int,
                 lines_per_source: int) -> tuple[int, int]:
    """Largest output tile whose interior receptive-field union fits the
    line budget. Deterministic: max positions, then smallest width."""
    cin_g = layer.in_per_group
    best = None
    for tw in range(1, out_w + 1):
        ext_w = (tw - 1) * layer.stride + layer.kw
        for th in range(1, out_h + 1):
            ext_h = (th - 1) * layer.stride + layer.kh
            lines = ext_w * ext_h * cin_g * lines_per_source
            if lines > CORE_LINES:
                break
            key = (tw * th, -tw)
            if best is None or key > best[0]:
                best = (key, (tw, th))
    if best is None:
        raise UncompilableLayerError(
            f"fan-in {layer.fan_in} x {lines_per_source} line(s) per synapse "
            f"exceeds {CORE_LINES} input lines"
        )
    return best[1]


def _window(layer: LayerSpec, oy: int, ox: int, in_w: int, in_h: int):
    """In-bounds input positions feeding output position (oy, ox), with the
    kernel offsets they map to. Padding cells carry no line."""
    cells = []
    for ky in range(layer.kh):
        iy = oy * layer.stride + ky - layer.padding
        if not 0 <= iy < in_h:
            continue
        for kx in range(layer.kw):
            ix = ox * layer.stride + kx - layer.padding
            if 0 <= ix < in_w:
                cells.append((iy, ix, ky, kx))
    return cells


def compile_spec(spec: TrinaryNetworkSpec, paired_lines: bool = False) -> CoreletProgram:
    """Place every on-chip layer onto cores and wire the routing tables.

    Raises UncompilableLayerError naming the first layer whose fan-in cannot
    fit, and CapacityError if more than 4096 cores would be needed.
    """
    bad = spec.validate()
    if bad:
        raise CompileError("invalid network: " + "; ".join(bad))
    lps = 2 if paired_lines else 1
    layers = spec.core_layers
    n_host = len(spec.host_layers)
    shapes = spec.layer_shapes()[n_host:]  # (w, h, f) entering each core layer
    for i, layer in enumerate(layers):
        if layer.fan_in * lps > CORE_LINES:
            raise UncompilableLayerError(
                f"core layer {i} ({layer.kind}): fan-in {layer.fan_in} "
                f"needs {layer.fan_in * lps} lines > {CORE_LINES}"
            )

    cores: list[CoreSpec] = []
    dup_groups: list[list[int]] = []
    output_map: dict[int, int] = {}
    # demands on the *current* layer's logical outputs, keyed by (f, y, x):
    # each value maps consumer core id -> [line indices]
    demand: dict[tuple[int, int, int], dict[int, list[int]]] = {}

    pop_of = {}
    for ci, pop in enumerate(spec.class_populations):
        for flat in pop:
            pop_of[flat] = ci

    for li in range(len(layers) - 1, -1, -1):
        layer = layers[li]
        in_w, in_h, _ = shapes[li]
        out_w, out_h, _ = shapes[li + 1]
        is_output = li == len(layers) - 1
        if layer.kind == KIND_CORE_CLASSIFIER:
            tile_w, tile_h = out_w, out_h
        else:
            tile_w, tile_h = _choose_tile(layer, out_w, out_h, lps)
        g = layer.feature_groups
        cin_g = layer.in_per_group
        if layer.kind == KIND_CORE_CLASSIFIER:
            feats_of_group = [list(range(b, layer.out_features, g)) for b in range(g)]
        else:
            out_g = layer.out_features // g
            feats_of_group = [list(range(b * out_g, (b + 1) * out_g)) for b in range(g)]

        next_demand: dict[tuple[int, int, int], dict[int, list[int]]] = {}

        for b in range(g):
            fc_base = b * cin_g
            for ty0 in range(0, out_h, tile_h):
                for tx0 in range(0, out_w, tile_w):
                    tile_ys = range(ty0, min(ty0 + tile_h, out_h))
                    tile_xs = range(tx0, min(tx0 + tile_w, out_w))
                    # physical entries: (f, oy, ox, targets-for-one-core)
                    entries = []
                    coord_copies: dict[tuple[int, int, int], list[int]] = {}
                    for f_out in feats_of_group[b]:
                        for oy in tile_ys:
                            for ox in tile_xs:
                                coord = (f_out, oy, ox)
                                tgt = demand.get(coord)
                                if tgt:
                                    for cid in sorted(tgt):
                                        entries.append(
                                            (coord, [(cid, l) for l in tgt[cid]])
                                        )
                                else:
                                    entries.append((coord, []))
                    # union of sources for a tile is shared by all features
                    # of the group; build the line layout once per chunk
                    for start in range(0, len(entries), CORE_NEURONS):
                        chunk = entries[start : start + CORE_NEURONS]
                        cid = len(cores)
                        window_of: dict[tuple[int, int], list] = {}
                        srcs = set()
                        for (f_out, oy, ox), _ in chunk:
                            if (oy, ox) not in window_of:
                                window_of[(oy, ox)] = _window(layer, oy, ox, in_w, in_h)
                            for iy, ix, _, _ in window_of[(oy, ox)]:
                                for fc in range(fc_base, fc_base + cin_g):
                                    srcs.add((fc, iy, ix))
                        src_list = sorted(srcs)
                        line_of = {}
                        for j, s in enumerate(src_list):
                            line_of[s] = j * lps
                        n_lines = len(src_list) * lps
                        assert n_lines <= CORE_LINES
                        weights = np.zeros((len(chunk), n_lines), dtype=np.int8)
                        thresholds = np.empty(len(chunk), dtype=np.int32)
                        targets = []
                        for slot, ((f_out, oy, ox), tgt) in enumerate(chunk):
                            thresholds[slot] = layer.thresholds[f_out]
                            targets.append(tgt)
                            coord_copies.setdefault((f_out, oy, ox), []).append(
                                cid * SLOTS + slot
                            )
                            for iy, ix, ky, kx in window_of[(oy, ox)]:
                                for fci in range(cin_g):
                                    w = layer.weights[f_out, fci, ky, kx]
                                    if w == 0:
                                        continue
                                    line = line_of[(fc_base + fci, iy, ix)]
                                    if lps == 2:
                                        line += 0 if w > 0 else 1
                                        weights[slot, line] = 1 if w > 0 else -1
                                    else:
                                        weights[slot, line] = w
                            if is_output:
                                flat = f_out * (out_h * out_w) + oy * out_w + ox
                                output_map[cid * SLOTS + slot] = pop_of[flat]
                        # expose line sources and register upstream demand
                        line_sources = []
                        for s in src_list:
                            fc, iy, ix = s
                            if li == 0:
                                src = ("in", ix, iy, fc)
                            else:
                                src = ("lg", fc, iy, ix)  # logical; resolved below
                            for k in range(lps):
                                line_sources.append(src)
                            nd = next_demand.setdefault((fc, iy, ix), {})
                            nd.setdefault(cid, []).extend(
                                range(line_of[s], line_of[s] + lps)
                            )
                        cores.append(
                            CoreSpec(cid, li, line_sources, weights, thresholds, targets)
                        )
                    for copies in coord_copies.values():
                        if len(copies) > 1:
                            dup_groups.append(copies)
        demand = next_demand

    # resolve logical line sources to the physical neuron that feeds them
    gid_feeding: dict[tuple[int, int], int] = {}
    for core in cores:
        for slot, tgt in enumerate(core.targets):
            for c, l in tgt:
                gid_feeding[(c, l)] = core.gid(slot)
    for core in cores:
        for j, src in enumerate(core.line_sources):
            if src[0] == "lg":
                core.line_sources[j] = ("n", gid_feeding[(core.core_id, j)])

    input_map = {}
    for (fc, iy, ix), by_core in sorted(demand.items()):
        input_map[(ix, iy, fc)] = [
            (cid, l) for cid in sorted(by_core) for l in by_core[cid]
        ]

    if len(cores) > MAX_CORES:
        raise CapacityError(f"network needs {len(cores)} cores > {MAX_CORES}")

    program = CoreletProgram(
        cores=cores,
        duplicate_groups=[tuple(g) for g in dup_groups],
        input_map=input_map,
        output_map=output_map,
        input_shape=shapes[0],
        num_classes=spec.num_classes,
    )
    return _renumber(program)


def _renumber(program: CoreletProgram) -> CoreletProgram:
    """Reassign core ids input-to-output (by layer, construction order)."""
    order = sorted(range(len(program.cores)),
                   key=lambda i: (program.cores[i].layer, i))
    new_of = {old: new for new, old in enumerate(order)}

    def remap_gid(gid: int) -> int:
        return new_of[gid // SLOTS] * SLOTS + gid % SLOTS

    cores = []
    for old in order:
        c = program.cores[old]
        cores.append(
            CoreSpec(
                new_of[old], c.layer,
                [("n", remap_gid(s[1])) if s[0] == "n" else s
                 for s in c.line_sources],
                c.weights, c.thresholds,
                [[(new_of[tc], tl) for tc, tl in tgt] for tgt in c.targets],
            )
        )
    return CoreletProgram(
        cores=cores,
        duplicate_groups=[tuple(sorted(remap_gid(g) for g in grp))
                          for grp in program.duplicate_groups],
        input_map={k: [(new_of[c], l) for c, l in v]
                   for k, v in program.input_map.items()},
        output_map={remap_gid(g): c for g, c in sorted(program.output_map.items())},
        input_shape=program.input_shape,
        num_classes=program.num_classes,
    )


# ---------------------------------------------------------------------------
# Validation and reporting


def validate(program: CoreletProgram) -> list[str]:
    """Check every program invariant; returns all violations (empty = valid)."""
    bad = []
    if len(program.cores) > MAX_CORES:
        bad.append(f"{len(program.cores)} cores exceed budget {MAX_CORES}")
    if program.n_neurons > MAX_NEURONS:
        bad.append(f"{program.n_neurons} neurons exceed budget {MAX_NEURONS}")
    w, h, f = program.input_shape
    fed_lines = set()
    for i, core in enumerate(program.cores):
        name = f"core {core.core_id}"
        if core.core_id != i:
            bad.append(f"{name}: id does not match its table position {i}")
        if core.n_lines > CORE_LINES:
            bad.append(f"{name}: {core.n_lines} input lines > {CORE_LINES}")
        if core.n_neurons > CORE_NEURONS:
            bad.append(f"{name}: {core.n_neurons} neurons > {CORE_NEURONS}")
        if core.weights.shape != (core.n_neurons, core.n_lines):
            bad.append(f"{name}: weight matrix {core.weights.shape} != "
                       f"({core.n_neurons}, {core.n_lines})")
            continue
        if core.weights.size and not np.isin(core.weights, (-1, 0, 1)).all():
            bad.append(f"{name}: weights outside {{-1,0,1}}")
        if len(core.targets) != core.n_neurons:
            bad.append(f"{name}: {len(core.targets)} target lists for "
                       f"{core.n_neurons} neurons")
            continue
        for slot, tgt in enumerate(core.targets):
            for tc, tl in tgt:
                if not (0 <= tc < len(program.cores)):
                    bad.append(f"{name} slot {slot}: target core {tc} missing")
                    continue
                tcore = program.cores[tc]
                if not (0 <= tl < tcore.n_lines):
                    bad.append(f"{name} slot {slot}: target line {tl} out of "
                               f"range on core {tc}")
                    continue
                if tcore.line_sources[tl] != ("n", core.gid(slot)):
                    bad.append(f"{name} slot {slot}: core {tc} line {tl} is "
                               f"sourced from {tcore.line_sources[tl]}, not it")
                fed_lines.add((tc, tl))
    for (x, y, fc), tgts in program.input_map.items():
        if not (0 <= x < w and 0 <= y < h and 0 <= fc < f):
            bad.append(f"input_map key ({x},{y},{fc}) outside {w}x{h}x{f}")
        for tc, tl in tgts:
            if not (0 <= tc < len(program.cores)) or not (
                0 <= tl < program.cores[tc].n_lines
            ):
                bad.append(f"input ({x},{y},{fc}): target ({tc},{tl}) missing")
                continue
            if program.cores[tc].line_sources[tl] != ("in", x, y, fc):
                bad.append(f"input ({x},{y},{fc}): core {tc} line {tl} is "
                           f"sourced from {program.cores[tc].line_sources[tl]}")
            fed_lines.add((tc, tl))
    for core in program.cores:
        for j, src in enumerate(core.line_sources):
            if (core.core_id, j) not in fed_lines:
                bad.append(f"core {core.core_id} line {j} ({src}) is never fed")
    rep = {}
    for grp in program.duplicate_groups:
        canon = min(grp)
        for gid in grp:
            rep[gid] = canon
    for gi, grp in enumerate(program.duplicate_groups):
        rows = []
        for gid in grp:
            if gid // SLOTS >= len(program.cores):
                bad.append(f"duplicate group {gi}: neuron {gid} missing")
                break
            core, slot = program.neuron(gid)
            if slot >= core.n_neurons:
                bad.append(f"duplicate group {gi}: neuron {gid} missing")
                break
            wmap = {
                core.line_sources[j]: int(wv)
                for j, wv in enumerate(core.weights[slot])
                if wv != 0
            }
            rows.append((wmap, int(core.thresholds[slot])))
        else:
            if len(set(th for _, th in rows)) > 1:
                bad.append(f"duplicate group {gi}: thresholds differ")
            resolved = [_resolve_sources(rep, r[0]) for r in rows]
            if any(r != resolved[0] for r in resolved[1:]):
                bad.append(f"duplicate group {gi}: weight rows differ")
    for gid, ci in program.output_map.items():
        core_idx = gid // SLOTS
        if core_idx >= len(program.cores) or gid % SLOTS >= program.cores[core_idx].n_neurons:
            bad.append(f"output_map: neuron {gid} missing")
        if not (0 <= ci < program.num_classes):
            bad.append(f"output_map: class {ci} out of range")
    bad.extend(_check_acyclic(program))
    return bad


def _resolve_sources(rep: dict, wmap: dict) -> dict:
    """Duplicate copies may read the same logical signal from duplicated
    upstream neurons; compare rows after collapsing duplicates to their
    canonical representatives."""
    out = {}
    for src, wv in wmap.items():
        if src[0] == "n":
            src = ("n", rep.get(src[1], src[1]))
        out[src] = wv
    return out


def _check_acyclic(program: CoreletProgram) -> list[str]:
    n = len(program.cores)
    succ = [set() for _ in range(n)]
    for core in program.cores:
        for tgt in core.targets:
            for tc, _ in tgt:
                if 0 <= tc < n and tc != core.core_id:
                    succ[core.core_id].add(tc)
    indeg = [0] * n
    for u in range(n):
        for v in succ[u]:
            indeg[v] += 1
    queue = [u for u in range(n) if indeg[u] == 0]
    seen = 0
    while queue:
        u = queue.pop()
        seen += 1
        for v in succ[u]:
            indeg[v] -= 1
            if indeg[v] == 0:
                queue.append(v)
    if seen != n:
        return ["routing graph has a cycle; core waves cannot be ordered"]
    return []


def evaluation_order(program: CoreletProgram) -> list[int]:
    """Topological wave order of cores (inputs first); ties by core id."""
    n = len(program.cores)
    succ = [set() for _ in range(n)]
    indeg = [0] * n
    for core in program.cores:
        for tgt in core.targets:
            for tc, _ in tgt:
                if tc != core.core_id and tc not in succ[core.core_id]:
                    succ[core.core_id].add(tc)
                    indeg[tc] += 1
    import heapq

    heap = [u for u in range(n) if indeg[u] == 0]
    heapq.heapify(heap)
    order = []
    while heap:
        u = heapq.heappop(heap)
        order.append(u)
        for v in sorted(succ[u]):
            indeg[v] -= 1
            if indeg[v] == 0:
                heapq.heappush(heap, v)
    if len(order) != n:
        raise ProgramFormatError("routing graph has a cycle")
    return order


@dataclass
class UtilizationReport:
    cores_used: int
    neurons_physical: int
    neurons_logical: int
    mean_line_occupancy: float
    duplicate_overhead: float
    per_layer_cores: dict

    def lines(self) -> list[str]:
        out = [
            f"cores used:          {self.cores_used}",
            f"physical neurons:    {self.neurons_physical}",
            f"logical neurons:     {self.neurons_logical}",
            f"duplicate overhead:  {self.duplicate_overhead:.3f}",
            f"mean line occupancy: {self.mean_line_occupancy:.3f}",
        ]
        for layer, n in sorted(self.per_layer_cores.items()):
            out.append(f"  layer {layer}: {n} cores")
        return out


def report(program: CoreletProgram) -> UtilizationReport:
    per_layer = {}
    for core in program.cores:
        per_layer[core.layer] = per_layer.get(core.layer, 0) + 1
    physical = program.n_neurons
    logical = program.n_logical_neurons
    return UtilizationReport(
        cores_used=len(program.cores),
        neurons_physical=physical,
        neurons_logical=logical,
        mean_line_occupancy=(
            float(np.mean([c.n_lines for c in program.cores])) / CORE_LINES
            if program.cores else 0.0
        ),
        duplicate_overhead=physical / logical if logical else 1.0,
        per_layer_cores=per_layer,
    )


# ---------------------------------------------------------------------------
# Program file ("TNCP")


def _program_to_bytes(program: CoreletProgram) -> bytes:
    from .trinary_net import pack_trits

    parts = [PROGRAM_MAGIC, struct.pack("<H", PROGRAM_VERSION)]
    w, h, f = program.input_shape
    parts.append(struct.pack("<3HH", w, h, f, program.num_classes))
    parts.append(struct.pack("<I", len(program.cores)))
    for core in program.cores:
        parts.append(struct.pack("<HHH", core.layer, core.n_lines, core.n_neurons))
        for src in core.line_sources:
            if src[0] == "in":
                parts.append(struct.pack("<B3H", SRC_INPUT, src[1], src[2], src[3]))
            else:
                parts.append(struct.pack("<BI", SRC_NEURON, src[1]))
        for slot in range(core.n_neurons):
            tgt = core.targets[slot]
            parts.append(struct.pack("<iH", int(core.thresholds[slot]), len(tgt)))
            for tc, tl in tgt:
                parts.append(struct.pack("<IH", tc, tl))
            parts.append(pack_trits(core.weights[slot]))
    parts.append(struct.pack("<I", len(program.duplicate_groups)))
    for grp in program.duplicate_groups:
        parts.append(struct.pack("<I", len(grp)))
        parts.append(struct.pack(f"<{len(grp)}I", *grp))
    parts.append(struct.pack("<I", len(program.input_map)))
    for (x, y, fc), tgts in sorted(program.input_map.items()):
        parts.append(struct.pack("<3HH", x, y, fc, len(tgts)))
        for tc, tl in tgts:
            parts.append(struct.pack("<IH", tc, tl))
    parts.append(struct.pack("<I", len(program.output_map)))
    for gid, ci in sorted(program.output_map.items()):
        parts.append(struct.pack("<IH", gid, ci))
    return b"".join(parts)


def _program_from_bytes(data: bytes) -> CoreletProgram:
    from .trinary_net import _Reader, ModelFormatError, unpack_trits

    r = _Reader(data)
    try:
        if r.take(4) != PROGRAM_MAGIC:
            raise ProgramFormatError("not a program file (bad magic)")
        (version,) = r.unpack("<H")
        if version != PROGRAM_VERSION:
            raise ProgramFormatError(f"program format version {version} unsupported")
        w, h, f, n_classes = r.unpack("<3HH")
        (n_cores,) = r.unpack("<I")
        cores = []
        for cid in range(n_cores):
            layer, n_lines, n_neurons = r.unpack("<HHH")
            sources = []
            for _ in range(n_lines):
                (kind,) = r.unpack("<B")
                if kind == SRC_INPUT:
                    x, y, fc = r.unpack("<3H")
                    sources.append(("in", x, y, fc))
                elif kind == SRC_NEURON:
                    (gid,) = r.unpack("<I")
                    sources.append(("n", gid))
                else:
                    raise ProgramFormatError(f"unknown line source kind {kind}")
            weights = np.zeros((n_neurons, n_lines), dtype=np.int8)
            thresholds = np.zeros(n_neurons, dtype=np.int32)
            targets = []
            for slot in range(n_neurons):
                th, n_tgt = r.unpack("<iH")
                thresholds[slot] = th
                targets.append([tuple(r.unpack("<IH")) for _ in range(n_tgt)])
                weights[slot] = unpack_trits(r.take((n_lines + 3) // 4), n_lines)
            cores.append(CoreSpec(cid, layer, sources, weights, thresholds, targets))
        (n_groups,) = r.unpack("<I")
        groups = []
        for _ in range(n_groups):
            (size,) = r.unpack("<I")
            groups.append(tuple(r.unpack(f"<{size}I")))
        (n_inputs,) = r.unpack("<I")
        input_map = {}
        for _ in range(n_inputs):
            x, y, fc, n_tgt = r.unpack("<3HH")
            input_map[(x, y, fc)] = [tuple(r.unpack("<IH")) for _ in range(n_tgt)]
        (n_out,) = r.unpack("<I")
        output_map = {}
        for _ in range(n_out):
            gid, ci = r.unpack("<IH")
            output_map[gid] = ci
        r.done()
    except ModelFormatError as exc:
        raise ProgramFormatError(str(exc)) from None
    return CoreletProgram(cores, groups, input_map, output_map, (w, h, f), n_classes)
