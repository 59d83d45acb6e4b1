"""Figures written next to the CLI's text and CSV outputs."""

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata keeps PNG bytes identical across runs
_PNG_META = {"Software": None}


def _save(fig, path):
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)


def training_curve(records, path):
    """Validation objective against SGD step, one line per stage."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for stage in ("i", "ii"):
        pts = [(r["step"], r["validation_objective"]) for r in records
               if r.get("stage") == stage and math.isfinite(r.get("validation_objective", math.nan))]
        if not pts:
            continue
        x, y = zip(*pts)
        if len(pts) == 1:
            ax.axhline(y[0], ls="--", color="gray", label=f"stage {stage}")
        else:
            ax.plot(x, y, marker="o", ms=3, label=f"stage {stage}")
    ax.set_xlabel("SGD step")
    ax.set_ylabel("validation objective")
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    _save(fig, path)


def bench_chart(rows, path):
    """Grouped bar chart of ISNR per image and model variant."""
    images = sorted({r["image"] for r in rows})
    variants = sorted({(r["experiment"], r["model"]) for r in rows})
    fig, ax = plt.subplots(figsize=(max(5, 1.5 * len(images) * max(1, len(variants)) / 2), 4))
    width = 0.8 / max(1, len(variants))
    x = np.arange(len(images))
    for j, (exp, variant) in enumerate(variants):
        vals = []
        for img in images:
            hit = [r["isnr"] for r in rows
                   if r["image"] == img and r["experiment"] == exp and r["model"] == variant]
            v = hit[0] if hit else math.nan
            vals.append(v if math.isfinite(v) else math.nan)
        ax.bar(x + (j - (len(variants) - 1) / 2) * width, vals, width, label=f"{exp} {variant}")
    ax.set_xticks(x, images)
    ax.set_ylabel("ISNR (dB)")
    ax.axhline(0, color="black", lw=0.8)
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def dictionary_atoms(D, path, cols=16):
    """Tile the columns of ``D`` as square patches."""
    m = math.isqrt(D.shape[0])
    k = D.shape[1]
    rows = math.ceil(k / cols)
    tile = np.full((rows * (m + 1) + 1, cols * (m + 1) + 1), np.nan)
    for j in range(k):
        a = D[:, j].reshape(m, m)
        span = np.ptp(a)
        a = (a - a.min()) / span if span > 0 else np.zeros_like(a)
        r, c = divmod(j, cols)
        tile[1 + r * (m + 1):1 + r * (m + 1) + m, 1 + c * (m + 1):1 + c * (m + 1) + m] = a
    fig, ax = plt.subplots(figsize=(cols * 0.4, rows * 0.4 + 0.2))
    ax.imshow(tile, cmap="gray", interpolation="nearest")
    ax.axis("off")
    _save(fig, path)
