"""Report serialisation: JSON files, aligned text tables and TSV."""
from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Sequence

from .metrics import METRIC_NAMES

MODE_ORDER = ("both", "image", "tabular")
MODE_TITLES = {"both": "image-tabular", "image": "image-only", "tabular": "tabular-only"}


def write_json(obj, path: str | Path) -> None:
    """Deterministic JSON: sorted keys, fixed float repr, trailing newline."""
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n",
                          encoding="utf-8")


def fmt(v, digits: int = 3) -> str:
    if v is None:
        return "/"
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.{digits}f}"
    return str(v)


def aligned(headers: Sequence[str], rows: Sequence[Sequence]) -> str:
    cells = [list(headers)] + [[fmt(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]
    lines = []
    for k, r in enumerate(cells):
        lines.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))))
        if k == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


def tsv(headers: Sequence[str], rows: Sequence[Sequence], digits: int = 6) -> str:
    out = ["\t".join(headers)]
    out += ["\t".join(fmt(c, digits) if c is not None else "" for c in r) for r in rows]
    return "\n".join(out) + "\n"


def metrics_rows(modes: dict[str, dict]) -> tuple[list[str], list[list]]:
    headers = ["inference"] + list(METRIC_NAMES)
    rows = [[MODE_TITLES.get(m, m)] + [modes[m][k] for k in METRIC_NAMES] for m in MODE_ORDER if m in modes]
    return headers, rows


def ablation_rows(rows) -> tuple[list[str], list[list]]:
    headers = ["training", "token", "pretraining"] + [f"auroc[{MODE_TITLES[m]}]" for m in MODE_ORDER]
    out = []
    for r in rows:
        c = r.cfg
        loss = {"none": "base", "conventional": "md", "simultaneous": "smd"}[c.dropout.value]
        if c.dropout.value == "none":
            token = "/"
        else:
            token = "learned" if c.token_policy.value == "learned" else "-"
        pre = "-" if c.pretrain_loss.value == "none" else c.pretrain_loss.value
        out.append([loss, token, pre] + [r.auroc.get(m) for m in MODE_ORDER])
    return headers, out
