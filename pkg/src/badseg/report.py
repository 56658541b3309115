"""Human-readable run summaries, overlay images and score density plots."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from scipy.stats import gaussian_kde  # noqa: E402

from .pipeline import RunRecord  # noqa: E402

PALETTE = np.array(
    [[128, 64, 128], [244, 35, 232], [0, 0, 142], [220, 20, 60], [70, 70, 70], [107, 142, 35], [70, 130, 180], [250, 170, 30]],
    dtype=np.uint8,
)


def colorize(label: np.ndarray) -> np.ndarray:
    out = np.zeros(label.shape + (3,), dtype=np.uint8)
    valid = (label >= 0) & (label < 255)
    out[valid] = PALETTE[label[valid] % len(PALETTE)]
    return out


def _fmt(v) -> str:
    if v is None:
        return "n/a"
    if isinstance(v, str):
        return v
    return f"{v:.4f}"


def _table(header: list[str], rows: list[list]) -> list[str]:
    out = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    out += ["| " + " | ".join(_fmt(c) if not isinstance(c, str) else c for c in row) + " |" for row in rows]
    return out


def plot_overlays(examples_path: Path, out_dir: Path) -> list[Path]:
    data = np.load(examples_path)
    paths = []
    for k in range(len(data["ids"])):
        fig, axes = plt.subplots(1, 4, figsize=(10, 2.8))
        panels = [
            ("clean input", data["clean"][k]),
            ("triggered input", data["poisoned"][k]),
            ("target label", colorize(data["target"][k])),
            ("prediction", colorize(data["prediction"][k])),
        ]
        for ax, (title, img) in zip(axes, panels):
            ax.imshow(img, interpolation="nearest")
            ax.set_title(title, fontsize=9)
            ax.axis("off")
        fig.suptitle(str(data["ids"][k]), fontsize=9)
        path = out_dir / f"overlay_{k}.png"
        fig.savefig(path, dpi=80, bbox_inches="tight")
        plt.close(fig)
        paths.append(path)
    return paths


def plot_kde(groups: dict[str, np.ndarray], title: str, path: Path, xlabel: str = "score") -> Path:
    """One density curve per group; degenerate groups fall back to a histogram."""
    fig, ax = plt.subplots(figsize=(5, 3.2))
    finite = [v[np.isfinite(v)] for v in groups.values()]
    allv = np.concatenate([v for v in finite if len(v)]) if any(len(v) for v in finite) else np.zeros(1)
    lo, hi = float(allv.min()), float(allv.max())
    pad = 0.1 * (hi - lo) if hi > lo else 0.5
    xs = np.linspace(lo - pad, hi + pad, 200)
    for (name, _), v in zip(groups.items(), finite):
        if len(v) >= 2 and np.ptp(v) > 0:
            ax.plot(xs, gaussian_kde(v)(xs), label=f"{name} (n={len(v)})")
        elif len(v):
            ax.hist(v, bins=10, density=True, alpha=0.5, label=f"{name} (n={len(v)})")
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("density")
    ax.legend()
    fig.savefig(path, dpi=80, bbox_inches="tight")
    plt.close(fig)
    return path


def _read_tsv(path: Path) -> tuple[list[str], list[list[str]]]:
    lines = [l.split("\t") for l in path.read_text().splitlines() if l]
    return lines[0], lines[1:]


def report(run_dir) -> str:
    """Write ``report/summary.md`` and figures for a run; return the summary text."""
    run_dir = Path(run_dir)
    record = RunRecord.load(run_dir)
    cfg = record.config
    out_dir = run_dir / "report"
    out_dir.mkdir(exist_ok=True)
    attack = cfg.get("attack", {})
    lines = [f"# Run {cfg.get('name')}", "", f"status: {record.status}, seed {record.seed}, toolkit {record.version}", ""]
    if record.error:
        lines += [f"error: {record.error}", ""]

    if "eval_report" in record.artifacts:
        ev = json.loads((run_dir / record.artifacts["eval_report"]).read_text())
        st = ev.get("stealth") or {}
        lines += ["## Attack", ""]
        lines += _table(
            ["vector", "victim", "target", "ASR", "PBA", "CBA", "PSNR", "SSIM"],
            [[attack.get("vector"), str(attack.get("victim")), str(attack.get("target")), ev["asr"], ev["pba"], ev["cba"], st.get("psnr"), st.get("ssim")]],
        )
        if ev.get("extra"):
            lines += [""] + [f"- {k}: {_fmt(v) if not isinstance(v, int) else v}" for k, v in sorted(ev["extra"].items())]
        lines.append("")

    if "trigger" in record.artifacts:
        lines += ["## Trigger", "", "```", (run_dir / record.artifacts["trigger"]).read_text().strip(), "```", ""]

    if "ranking" in record.artifacts:
        header, rows = _read_tsv(run_dir / record.artifacts["ranking"])
        lines += ["## Closest class pairs", ""] + _table(header, rows) + [""]

    mitigation, detection = [], []
    for name, rel in sorted(record.artifacts.items()):
        if name.startswith("defense_"):
            d = json.loads((run_dir / rel).read_text())
            (detection if "auc" in d else mitigation).append((name, d))
    if mitigation:
        rows = [[d["method"], d["asr_before"], d["asr_after"], d["pba_after"], d["cba_after"]] for _, d in mitigation]
        lines += ["## Mitigation", ""] + _table(["defense", "ASR before", "ASR after", "PBA after", "CBA after"], rows) + [""]
        for name, d in mitigation:
            if d["method"] == "abl":
                tag = name[len("defense_"):]
                header, rows = _read_tsv(run_dir / record.artifacts[f"losses_{tag}"])
                groups = {
                    g: np.array([float(r[2]) for r in rows if r[1] == g]) for g in ("clean", "poisoned")
                }
                plot_kde(groups, "ABL per-sample loss", out_dir / f"kde_{tag}.png", "loss")
    if detection:
        rows = [[d["method"], d["acc"], d["recall"], d["f1"], d["auc"]] for _, d in detection]
        lines += ["## Detection", ""] + _table(["defense", "ACC", "Recall", "F1", "AUC"], rows) + [""]
        for name, d in detection:
            tag = name[len("defense_"):]
            s, l = np.array(d["scores"], dtype=float), np.array(d["labels"])
            plot_kde({"clean": s[l == 0], "poisoned": s[l == 1]}, f"{d['method']} scores", out_dir / f"kde_{tag}.png")

    if "examples" in record.artifacts:
        paths = plot_overlays(run_dir / record.artifacts["examples"], out_dir)
        lines += ["## Overlays", ""] + [f"![{p.stem}]({p.name})" for p in paths] + [""]

    text = "\n".join(lines)
    (out_dir / "summary.md").write_text(text)
    return text


def sweep_report(sweep_dir) -> str:
    sweep_dir = Path(sweep_dir)
    header, rows = _read_tsv(sweep_dir / "summary.tsv")
    text = "\n".join(["# Sweep", ""] + _table(header, rows)) + "\n"
    (sweep_dir / "summary.md").write_text(text)
    return text
