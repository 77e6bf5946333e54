"""Report writers: JSON verdict documents, JSON-lines traces and a timeline figure."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Iterable

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .trace import Trace, TraceEvent  # noqa: E402

REPORT_SCHEMA = "soapauth.report/1"

_LANES = ("IsMessagingApp", "IsRedirectURL", "Compromised", "IdpObservation", "SendIdP", "ReceiveIdP",
          "SendMessaging", "ReceiveMessaging", "Correspond", "CodeReplay")
_COLOURS = {"SendIdP": "tab:blue", "ReceiveIdP": "tab:blue", "SendMessaging": "tab:green",
            "ReceiveMessaging": "tab:green", "Correspond": "black", "Compromised": "tab:red",
            "CodeReplay": "tab:red", "IdpObservation": "tab:gray"}


def _lane(kind: str) -> str:
    return "Compromised" if kind.startswith("Compromised") else kind


def plot_timeline(events: Iterable[TraceEvent], path: str | Path, *, title: str = "",
                  highlight: Iterable[TraceEvent] = ()) -> Path:
    """One row per event kind; Send events are labelled with their Sender agent."""
    events = list(events)
    marked = set(highlight)
    senders = {e.tick: e["agent"] for e in events if e.kind == "Sender"}
    lanes = [lane for lane in _LANES if any(_lane(e.kind) == lane for e in events)] or ["(empty)"]
    row = {lane: i for i, lane in enumerate(lanes)}
    fig, ax = plt.subplots(figsize=(10, 0.45 * len(lanes) + 1.4))
    for e in events:
        lane = _lane(e.kind)
        if lane not in row:
            continue
        y = row[lane]
        colour = _COLOURS.get(lane, "tab:purple")
        ax.plot(e.tick, y, "o", color=colour, ms=6, mfc="white" if e.kind.startswith("Receive") else colour)
        if e in marked:
            ax.plot(e.tick, y, "s", color="tab:red", ms=12, mfc="none", mew=1.5)
        if e.kind.startswith("Send") and e.tick in senders:
            ax.annotate(senders[e.tick], (e.tick, y), xytext=(0, 6), textcoords="offset points",
                        ha="center", fontsize=7)
    ax.set_yticks(range(len(lanes)))
    ax.set_yticklabels(lanes, fontsize=8)
    ax.set_ylim(-0.7, len(lanes) - 0.3)
    ax.set_xlabel("tick")
    ax.grid(True, axis="x", lw=0.3)
    if title:
        ax.set_title(title, fontsize=10)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def write_report(out_dir: str | Path, name: str, document: dict[str, Any], trace: Trace, *,
                 highlight: Iterable[TraceEvent] = (), figure: bool = True) -> dict[str, str]:
    """Write ``{name}.json``, ``{name}.trace.jsonl`` and optionally ``{name}.timeline.png``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {"report": str(out / f"{name}.json"), "trace": str(out / f"{name}.trace.jsonl")}
    Path(files["trace"]).write_text(trace.to_jsonl())
    if figure:
        files["timeline"] = str(plot_timeline(trace.events, out / f"{name}.timeline.png", title=name,
                                              highlight=highlight))
    Path(files["report"]).write_text(json.dumps({"schema": REPORT_SCHEMA, **document, "files": files},
                                                indent=2, sort_keys=True, default=str))
    return files
