"""Figures written next to the CSV output (non-interactive backend)."""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_STYLE = {"qmc": "o-", "mc": "s--"}


def plot_stderr(curves, path, title=None):
    """Log-log standard error against N.

    ``curves`` maps a label ``(method, functional)`` to ``{N: stderr}``.
    """
    fig, ax = plt.subplots(figsize=(6, 4.5))
    for (method, name), pts in sorted(curves.items()):
        N = np.array(sorted(pts))
        e = np.array([pts[n] for n in N])
        ok = e > 0
        if not ok.any():
            continue
        label = f"{method.upper()} {name}"
        if ok.sum() >= 2:
            slope = np.polyfit(np.log(N[ok]), -np.log(e[ok]), 1)[0]
            label += f" (rate {slope:.2f})"
        ax.loglog(N[ok], e[ok], _STYLE.get(method, "^-"), label=label)
    ax.set_xlabel("N")
    ax.set_ylabel("standard error")
    if title:
        ax.set_title(title)
    ax.grid(True, which="both", alpha=0.3)
    if ax.get_legend_handles_labels()[0]:
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def curves_from_reports(reports):
    out = {}
    for method, rep in reports.items():
        for name, N, _, se in rep.summary():
            out.setdefault((method, name), {})[N] = se
    return out


def plot_b_sequence(b, path, p_hat=None):
    """``b_j`` against ``j`` with the ``j^{-3/2}`` reference line."""
    b = np.asarray(b, dtype=float)
    j = np.arange(1, len(b) + 1)
    fig, ax = plt.subplots(figsize=(6, 4.5))
    ax.loglog(j, b, ".", label="b_j")
    ax.loglog(j, j ** -1.5, "k--", lw=1, label="j^(-3/2)")
    if p_hat is not None:
        ax.set_title(f"estimated p = {p_hat:.4f}")
    ax.set_xlabel("j")
    ax.set_ylabel("b_j")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
