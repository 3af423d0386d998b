"""Terminal summaries printed by the CLI."""

from __future__ import annotations

import os
from collections import Counter


class ANSI:
    """ANSI escape code constants. Disabled when NO_COLOR is set."""
    @staticmethod
    def _enabled() -> bool:
        return "NO_COLOR" not in os.environ

    @classmethod
    def red(cls, text: str) -> str:
        return f"\033[31m{text}\033[0m" if cls._enabled() else text

    @classmethod
    def green(cls, text: str) -> str:
        return f"\033[32m{text}\033[0m" if cls._enabled() else text

    @classmethod
    def yellow(cls, text: str) -> str:
        return f"\033[33m{text}\033[0m" if cls._enabled() else text

    @classmethod
    def bold(cls, text: str) -> str:
        return f"\033[1m{text}\033[0m" if cls._enabled() else text


def _title_case(reason: str) -> str:
    return reason.replace("_", " ").title()


def format_extraction_summary(n_events: int, discard_reasons: list[str], n_rejected: int = 0) -> str:
    """Event count plus a breakdown of discarded crossings by reason."""
    lines = [ANSI.bold("Extraction Summary:"), ""]
    count = ANSI.green(str(n_events)) if n_events else ANSI.red(str(n_events))
    lines.append(f"  Events:          {count}")
    lines.append(f"  Discarded:       {len(discard_reasons)}")
    for reason, n in sorted(Counter(discard_reasons).items()):
        lines.append(f"    {_title_case(reason):<20} {n:>5}")
    if n_rejected:
        lines.append(f"  Rejected tracks: {ANSI.yellow(str(n_rejected))}")
    return "\n".join(lines)


def format_bic_table(rows: list[dict], title: str = "BIC Sweep:") -> str:
    """K, BIC, log-likelihood and parameter count; the selected row is marked."""
    lines = [ANSI.bold(title), ""]
    header = f"{'K':>3} {'BIC':>14} {'LogLik':>14} {'Params':>7}  "
    lines.append(ANSI.bold(header))
    lines.append("-" * 48)
    for row in rows:
        marker = ""
        if row.get("degenerate"):
            marker = ANSI.yellow("degenerate")
        elif row.get("selected"):
            marker = ANSI.green("<- selected")
        lines.append(
            f"{row['k']:>3} {row['bic']:>14.2f} {row['loglik']:>14.2f} {row['n_params']:>7}  {marker}"
        )
    return "\n".join(lines)


def format_fit_summary(n_fitted: int, n_total: int, selected_k: Counter) -> str:
    lines = [ANSI.bold("Fit Summary:"), ""]
    share = n_fitted / n_total if n_total else 0.0
    status = ANSI.green if share >= 0.9 else ANSI.red
    lines.append(f"  Fitted events: {status(f'{n_fitted}/{n_total}')}")
    for k, n in sorted(selected_k.items()):
        lines.append(f"    K={k:<3} {n:>5} events")
    return "\n".join(lines)


def format_inertia_curve(rows: list[dict], suggested_k: int) -> str:
    """lambda_w and change rate per k; the elbow suggestion is marked."""
    lines = [ANSI.bold("Inertia Curve:"), ""]
    lines.append(ANSI.bold(f"{'k':>3} {'lambda_w':>14} {'change':>8}"))
    lines.append("-" * 30)
    for row in rows:
        rate = "" if row["change_rate"] is None else f"{row['change_rate']:.3f}"
        marker = ANSI.green("  <- suggested") if row["k"] == suggested_k else ""
        lines.append(f"{row['k']:>3} {row['lambda_w']:>14.4f} {rate:>8}{marker}")
    return "\n".join(lines)


def format_pattern_table(summary: list[dict]) -> str:
    """Per-cluster share, duration and (v_x, v_y, acc_x, acc_y) signature."""
    lines = [ANSI.bold("Merging Behavior Patterns:"), ""]
    header = (f"{'#':>3} {'Count':>6} {'Share':>7} {'Frames':>7}  "
              f"{'v_x':>7} {'v_y':>7} {'acc_x':>7} {'acc_y':>7}")
    lines.append(ANSI.bold(header))
    lines.append("-" * len(header))
    for row in summary:
        sig = row["signature"]
        lines.append(
            f"{row['cluster']:>3} {row['count']:>6} {row['share']:>7.1%} {row['duration_mean']:>7.1f}  "
            f"{sig[0]:>7.2f} {sig[1]:>7.2f} {sig[2]:>7.2f} {sig[3]:>7.2f}"
        )
    return "\n".join(lines)
