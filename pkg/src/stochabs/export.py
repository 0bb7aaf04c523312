"""Writers (and re-readers) for PRISM, MRMC and result artifacts.

All writers are pure: they return an :class:`ExportBundle` of file contents
and never touch the filesystem themselves.  The absorbing state is always
the last state and carries the label ``phi``.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .abstraction import AbstractModel
from .model import Box
from .partition import Partition
from .verification import Policy, ValueFunction

PHI_LABEL = "phi"


class ExportError(ValueError):
    pass


@dataclass(frozen=True)
class ExportFile:
    path: str
    role: str  # tra, sta, lab, prism-module, values-csv, policy-csv, heatmap-svg
    content: str


@dataclass(frozen=True)
class ExportBundle:
    files: tuple[ExportFile, ...]

    def __getitem__(self, role: str) -> str:
        for f in self.files:
            if f.role == role:
                return f.content
        raise KeyError(role)

    def roles(self) -> list[str]:
        return [f.role for f in self.files]

    def write(self, directory) -> list[Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        out = []
        for f in self.files:
            path = directory / f.path
            path.write_text(f.content, encoding="utf-8", newline="\n")
            out.append(path)
        return out


def fmt(x: float) -> str:
    """Shortest decimal that round-trips to the same double; integers lose the '.0'."""
    text = repr(float(x))
    return text[:-2] if text.endswith(".0") else text


def fmt_all(xs) -> list[str]:
    """:func:`fmt` over a sequence of floats."""
    return [r[:-2] if r.endswith(".0") else r for r in map(repr, map(float, xs))]


def _export_labels(model: AbstractModel) -> dict[str, list[int]]:
    labels = {sym: sorted(states) for sym, states in sorted(model.labels.items()) if sym != PHI_LABEL}
    labels[PHI_LABEL] = [model.phi]
    return labels


def _transitions(T: np.ndarray):
    src, dst = np.nonzero(T)
    return list(zip(src.tolist(), dst.tolist(), T[src, dst].tolist()))


def write_prism_explicit(model: AbstractModel, stem: str = "model") -> ExportBundle:
    """``.tra``/``.sta``/``.lab`` triple in PRISM's explicit-model format."""
    lines = []
    if model.kind == "MC":
        trans = _transitions(model.T)
        lines.append(f"{model.num_states} {len(trans)}")
        lines += [f"{s} {d} {p}" for (s, d, _), p in zip(trans, fmt_all(t[2] for t in trans))]
    else:
        q = model.num_inputs
        body = []
        for s in range(model.num_states):
            for a in range(q):
                row = model.T[a, s]
                nz = np.flatnonzero(row)
                body += [f"{s} {a} {d} {p}" for d, p in zip(nz.tolist(), fmt_all(row[nz].tolist()))]
        lines.append(f"{model.num_states} {model.num_states * q} {len(body)}")
        lines += body
    tra = "\n".join(lines) + "\n"

    n = model.partition.dims
    sta = ["(" + ",".join(f"x{i + 1}" for i in range(n)) + ")"]
    for i, rep in enumerate(model.partition.reps.tolist()):
        sta.append(f"{i}:(" + ",".join(fmt(c) for c in rep) + ")")
    sta.append(f"{model.phi}:(" + ",".join(["NaN"] * n) + ")")

    labels = _export_labels(model)
    names = ["init"] + list(labels)
    per_state: dict[int, list[int]] = {0: [0]}
    for k, sym in enumerate(labels, start=1):
        for s in labels[sym]:
            per_state.setdefault(s, []).append(k)
    lab = [" ".join(f'{k}="{name}"' for k, name in enumerate(names))]
    lab += [f"{s}: " + " ".join(map(str, ids)) for s, ids in sorted(per_state.items())]

    return ExportBundle((
        ExportFile(f"{stem}.tra", "tra", tra),
        ExportFile(f"{stem}.sta", "sta", "\n".join(sta) + "\n"),
        ExportFile(f"{stem}.lab", "lab", "\n".join(lab) + "\n"),
    ))


def read_prism_explicit(tra: str, sta: Optional[str] = None, lab: Optional[str] = None) -> dict:
    """Parse files produced by :func:`write_prism_explicit`."""
    rows = [ln.split() for ln in tra.strip().splitlines()]
    header = list(map(int, rows[0]))
    num_states = header[0]
    if len(header) == 2:
        T = np.zeros((num_states, num_states))
        for s, d, p in rows[1:]:
            T[int(s), int(d)] = float(p)
        count = header[1]
    else:
        q = header[1] // num_states
        T = np.zeros((q, num_states, num_states))
        for s, a, d, p in rows[1:]:
            T[int(a), int(s), int(d)] = float(p)
        count = header[2]
    if count != len(rows) - 1:
        raise ExportError(f"header announces {count} transitions, found {len(rows) - 1}")
    out = {"T": T}
    if sta is not None:
        lines = sta.strip().splitlines()
        reps = []
        for ln in lines[1:]:
            _, coords = ln.split(":", 1)
            reps.append([float(c) for c in coords.strip("()").split(",")])
        out["reps"] = np.array(reps)
    if lab is not None:
        lines = lab.strip().splitlines()
        names = {int(k): v for k, v in re.findall(r'(\d+)="([^"]*)"', lines[0])}
        labels: dict[str, set] = {name: set() for name in names.values()}
        for ln in lines[1:]:
            s, ids = ln.split(":", 1)
            for k in ids.split():
                labels[names[int(k)]].add(int(s))
        out["labels"] = labels
    return out


def write_prism_module(model: AbstractModel, stem: str = "model") -> ExportBundle:
    """PRISM language model with a single integer state variable ``z``."""
    p = model.phi
    kind = "dtmc" if model.kind == "MC" else "mdp"
    lines = [kind, "", "module abstraction", f"  z : [0..{p}] init 0;", ""]
    mats = model.matrices()
    for s in range(model.num_states):
        for a in range(mats.shape[0]):
            row = mats[a, s]
            nz = np.flatnonzero(row)
            updates = " + ".join(f"{p}:(z'={d})" for d, p in zip(nz.tolist(), fmt_all(row[nz].tolist())))
            action = "" if model.kind == "MC" else f"u{a}"
            lines.append(f"  [{action}] z={s} -> {updates};")
    lines += ["", "endmodule", ""]
    for sym, states in _export_labels(model).items():
        guard = " | ".join(f"z={s}" for s in states) or "false"
        lines.append(f'label "{sym}" = {guard};')
    return ExportBundle((ExportFile(f"{stem}.prism", "prism-module", "\n".join(lines) + "\n"),))


_CMD_RE = re.compile(r"^\s*\[(\w*)\]\s*z=(\d+)\s*->\s*(.*);\s*$")
_UPD_RE = re.compile(r"([^:+\s]+):\(z'=(\d+)\)")
_LAB_RE = re.compile(r'^label "([^"]+)" = (.*);$')


def read_prism_module(text: str) -> dict:
    """Parse a module written by :func:`write_prism_module`."""
    lines = text.splitlines()
    kind = lines[0].strip()
    m = re.search(r"z : \[0\.\.(\d+)\]", text)
    if m is None:
        raise ExportError("no state variable declaration")
    size = int(m.group(1)) + 1
    commands = []
    labels = {}
    for ln in lines:
        cm = _CMD_RE.match(ln)
        if cm:
            commands.append((cm.group(1), int(cm.group(2)),
                             [(int(d), float(p)) for p, d in _UPD_RE.findall(cm.group(3))]))
            continue
        lm = _LAB_RE.match(ln.strip())
        if lm:
            guard = lm.group(2)
            labels[lm.group(1)] = set() if guard == "false" else {int(x) for x in re.findall(r"z=(\d+)", guard)}
    actions = sorted({a for a, _, _ in commands}, key=lambda a: (len(a), a))
    T = np.zeros((len(actions), size, size))
    for a, s, upd in commands:
        for d, p in upd:
            T[actions.index(a), s, d] = p
    return {"kind": kind, "T": T[0] if kind == "dtmc" else T, "labels": labels}


def write_mrmc(model: AbstractModel, stem: str = "mrmc") -> ExportBundle:
    """MRMC ``.tra``/``.lab`` pair (1-indexed states)."""
    if model.kind != "MC":
        raise ExportError("MRMC export supports Markov chains only; use PRISM export for MDPs")
    trans = _transitions(model.T)
    tra = [f"STATES {model.num_states}", f"TRANSITIONS {len(trans)}"]
    tra += [f"{s + 1} {d + 1} {p}" for (s, d, _), p in zip(trans, fmt_all(t[2] for t in trans))]
    labels = _export_labels(model)
    per_state: dict[int, list[str]] = {}
    for sym, states in labels.items():
        for s in states:
            per_state.setdefault(s, []).append(sym)
    lab = ["#DECLARATION", " ".join(labels), "#END"]
    lab += [f"{s + 1} " + " ".join(syms) for s, syms in sorted(per_state.items())]
    return ExportBundle((
        ExportFile(f"{stem}.tra", "tra", "\n".join(tra) + "\n"),
        ExportFile(f"{stem}.lab", "lab", "\n".join(lab) + "\n"),
    ))


def read_mrmc(tra: str, lab: Optional[str] = None) -> dict:
    lines = tra.strip().splitlines()
    size = int(lines[0].split()[1])
    count = int(lines[1].split()[1])
    if count != len(lines) - 2:
        raise ExportError(f"header announces {count} transitions, found {len(lines) - 2}")
    T = np.zeros((size, size))
    for ln in lines[2:]:
        s, d, p = ln.split()
        T[int(s) - 1, int(d) - 1] = float(p)
    out = {"T": T}
    if lab is not None:
        ll = lab.strip().splitlines()
        declared = ll[1].split()
        labels = {sym: set() for sym in declared}
        for ln in ll[ll.index("#END") + 1:]:
            parts = ln.split()
            for sym in parts[1:]:
                labels[sym].add(int(parts[0]) - 1)
        out["labels"] = labels
        out["declared"] = declared
    return out


# result tables and plots

RAMP_LOW = (235, 235, 235)
RAMP_HIGH = (0, 84, 166)


def ramp_color(v: float) -> str:
    v = min(max(float(v), 0.0), 1.0)
    rgb = [round(a + (b - a) * v) for a, b in zip(RAMP_LOW, RAMP_HIGH)]
    return "#{:02x}{:02x}{:02x}".format(*rgb)


def _values_csv(values: ValueFunction, partition: Partition) -> str:
    n = partition.dims
    head = ["state"] + [f"lower_{i + 1}" for i in range(n)] + [f"upper_{i + 1}" for i in range(n)]
    head += [f"rep_{i + 1}" for i in range(n)] + ["value"]
    rows = [",".join(head)]
    v0 = values.initial
    for i in range(len(partition)):
        cells = [str(i)] + [fmt(x) for x in partition.lower[i]] + [fmt(x) for x in partition.upper[i]]
        cells += [fmt(x) for x in partition.reps[i]] + [fmt(v0[i])]
        rows.append(",".join(cells))
    return "\n".join(rows) + "\n"


def _policy_csv(policy: Policy, partition: Partition, input_points: Optional[np.ndarray]) -> str:
    m = 0 if input_points is None else input_points.shape[1]
    rows = [",".join(["step", "state", "input_index"] + [f"input_rep_{i + 1}" for i in range(m)])]
    for k in range(policy.choice.shape[0]):
        for z in range(len(partition)):
            a = int(policy.choice[k, z])
            rep = [] if input_points is None else [fmt(x) for x in input_points[a]]
            rows.append(",".join([str(k), str(z), str(a)] + rep))
    return "\n".join(rows) + "\n"


def heatmap_svg(partition: Partition, cell_values: np.ndarray, title: str = "value",
                vmin: float = 0.0, vmax: float = 1.0, frame: Optional[Box] = None) -> str:
    """Cells as rectangles coloured on the ramp, plus a vertical colour bar.

    ``frame`` widens the plotted area beyond the partition; the uncovered
    part is drawn as one background rectangle at ``vmin``.
    """
    n = partition.dims
    if n not in (1, 2):
        raise ExportError(f"heatmaps are available for 1-D and 2-D models only (got {n})")
    W, H, pad, bar = 400, 400 if n == 2 else 80, 40, 20
    dom = frame if frame is not None else partition.domain
    span = vmax - vmin or 1.0
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W + 2 * pad + bar + 50}" '
           f'height="{H + 2 * pad}" viewBox="0 0 {W + 2 * pad + bar + 50} {H + 2 * pad}">',
           f'<title>{title}</title>']
    if frame is not None:
        out.append(f'<rect class="complement" x="{pad}" y="{pad}" width="{W}" height="{H}" '
                   f'fill="{ramp_color(0.0)}" data-value="{fmt(vmin)}"/>')
    for i in range(len(partition)):
        lo, hi = partition.lower[i], partition.upper[i]
        x0 = pad + (lo[0] - dom.lower[0]) / dom.widths[0] * W
        x1 = pad + (hi[0] - dom.lower[0]) / dom.widths[0] * W
        if n == 2:
            y0 = pad + (dom.upper[1] - hi[1]) / dom.widths[1] * H
            y1 = pad + (dom.upper[1] - lo[1]) / dom.widths[1] * H
        else:
            y0, y1 = pad, pad + H
        v = float(cell_values[i])
        out.append(f'<rect x="{x0:.4f}" y="{y0:.4f}" width="{x1 - x0:.4f}" height="{y1 - y0:.4f}" '
                   f'fill="{ramp_color((v - vmin) / span)}" data-state="{i}" data-value="{fmt(v)}"/>')
    bx = W + 2 * pad
    steps = 50
    for k in range(steps):
        frac = (k + 0.5) / steps
        y = pad + H * (1 - (k + 1) / steps)
        out.append(f'<rect class="colorbar" x="{bx}" y="{y:.4f}" width="{bar}" height="{H / steps + 0.01:.4f}" '
                   f'fill="{ramp_color(frac)}"/>')
    for frac in (0.0, 0.5, 1.0):
        y = pad + H * (1 - frac)
        out.append(f'<text x="{bx + bar + 4}" y="{y + 4:.4f}" font-size="11">{fmt(vmin + frac * span)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_results(values: ValueFunction, policy: Optional[Policy], partition: Partition,
                  input_points: Optional[np.ndarray] = None, svg: bool = True,
                  frame: Optional[Box] = None) -> ExportBundle:
    """values.csv, policy.csv (when a policy exists) and heatmap.svg (n <= 2).

    Heatmaps for n >= 3 are skipped; callers learn about it through the
    missing role and a :class:`ExportError` from :func:`heatmap_svg`.
    """
    files = [ExportFile("values.csv", "values-csv", _values_csv(values, partition))]
    if policy is not None:
        files.append(ExportFile("policy.csv", "policy-csv", _policy_csv(policy, partition, input_points)))
    if svg and partition.dims in (1, 2):
        files.append(ExportFile("heatmap.svg", "heatmap-svg",
                                heatmap_svg(partition, values.initial[:len(partition)], "probability",
                                            frame=frame)))
        if policy is not None and policy.choice.shape[0] > 0 and input_points is not None \
                and input_points.shape[1] == 1:
            last = policy.choice[-1, :len(partition)]
            u = input_points[last, 0]
            files.append(ExportFile("policy.svg", "policy-svg",
                                    heatmap_svg(partition, u, "input at step N-1",
                                                float(input_points[:, 0].min()),
                                                float(input_points[:, 0].max()))))
    return ExportBundle(tuple(files))
