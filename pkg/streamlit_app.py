# streamlit_app.py
from __future__ import annotations

import os
from pathlib import Path
from typing import Any, Dict

import pandas as pd
import streamlit as st

# ───────────────────────── .env LOAD ─────────────────────────
try:
    from dotenv import load_dotenv  # type: ignore
    _ENV_LOADED = load_dotenv(Path(__file__).resolve().parent / ".env", override=True)
except Exception:
    _ENV_LOADED = False

DEFAULT_RUN_DIR = os.getenv("BATS_OUTPUT_DIR", "runs/mountain_car")
MAX_TABLE_ROWS = 500

from bats.stitching import StitchLog  # noqa: E402
from utils.helpers import read_json  # noqa: E402
from utils.report import build_pdf_bytes, run_sections  # noqa: E402


# ───────────────────────── Loading ─────────────────────────
@st.cache_data(show_spinner=False)
def load_run(root: str) -> Dict[str, Any]:
    """Everything the dashboard shows, read once per run directory."""
    base = Path(root)
    run: Dict[str, Any] = {}
    for key, name in (("manifest", "manifest.json"), ("evaluation", "evaluation.json"),
                      ("evaluation_raw", "evaluation_raw.json"), ("bounds", "bounds_report.json")):
        p = base / name
        run[key] = read_json(p) if p.is_file() else None
    for key, name in (("metrics", "metrics.csv"), ("residuals", "residuals.csv"),
                      ("value_map", "plots/value_map.csv"), ("harvest", "harvest_returns.csv"),
                      ("policy_traces", "plots/policy_traces.csv")):
        p = base / name
        run[key] = pd.read_csv(p) if p.is_file() else None
    log = base / "stitch_log.jsonl"
    run["stitches"] = pd.DataFrame(StitchLog.read(log)) if log.is_file() else None
    return run


def render_evaluation(title: str, report: Dict[str, Any] | None) -> None:
    with st.container(border=True):
        st.markdown(f"**{title}**")
        if not report:
            st.info("Not evaluated yet.")
            return
        mean, std = report.get("mean"), report.get("std")
        col1, col2, col3 = st.columns(3)
        col1.metric("Mean return", "—" if mean is None else f"{mean:.1f}")
        col2.metric("Std", "—" if std is None else f"{std:.1f}")
        goal = report.get("goal_fraction")
        col3.metric("Goal occupancy", "—" if goal is None else f"{goal:.0%}")
        threshold = report.get("solved_threshold")
        if threshold is not None and mean is not None:
            (st.success if mean >= threshold else st.warning)(f"Solved threshold {threshold:g}")


# ───────────────────────── UI ─────────────────────────
st.set_page_config(page_title="Trajectory Stitching Runs", page_icon="🧵", layout="wide")
st.title("🧵 Trajectory Stitching Runs")

run_dir = st.sidebar.text_input("Run directory", value=DEFAULT_RUN_DIR)
if st.sidebar.button("Reload"):
    load_run.clear()

if not Path(run_dir).is_dir():
    st.error(f"No run directory at {run_dir}. Run `python bats_cli.py run-all --preset mountain_car` first.")
    st.stop()

run = load_run(run_dir)
manifest = run["manifest"] or {}
st.caption(
    f"Seed **{manifest.get('seed', '—')}** • config **{str(manifest.get('config_hash', ''))[:12] or '—'}** "
    f"• stages: {', '.join(manifest.get('stages', {})) or 'none'}"
)

tabs = st.tabs(["📈 Stitching", "🗺️ Values", "🎯 Policy", "🧮 Bounds", "📄 Export"])

with tabs[0]:
    metrics = run["metrics"]
    if metrics is None:
        st.info("No stitching metrics yet.")
    else:
        st.line_chart(metrics.set_index("iteration")[["mean_start_value"]])
        st.bar_chart(metrics.set_index("iteration")[["n_attempted", "n_accepted"]])
        st.dataframe(metrics, use_container_width=True)
    stitches = run["stitches"]
    if stitches is not None and len(stitches):
        accepted = stitches[stitches["accepted"]]
        st.markdown(f"**Stitch log:** {len(accepted)} accepted of {len(stitches)} attempted")
        st.dataframe(stitches.head(MAX_TABLE_ROWS), use_container_width=True)

with tabs[1]:
    vm = run["value_map"]
    if vm is None:
        st.info("Run `export-plots` to see the value map.")
    else:
        dims = [c for c in vm.columns if c.startswith("s") and c[1:].isdigit()]
        if len(dims) >= 2:
            st.scatter_chart(vm, x=dims[0], y=dims[1], color="value_lower")
        st.dataframe(vm.head(MAX_TABLE_ROWS), use_container_width=True)
    harvest = run["harvest"]
    if harvest is not None and len(harvest):
        st.markdown("**Graph returns from start states** (pick `clone.return_threshold` from the gap)")
        st.bar_chart(harvest["return"].value_counts(bins=20, sort=False).rename_axis("bin").reset_index(drop=True))

with tabs[2]:
    col_a, col_b = st.columns(2)
    with col_a:
        render_evaluation("Stitched + cloned", run["evaluation"])
    with col_b:
        render_evaluation("Cloned on raw data", run["evaluation_raw"])
    residuals = run["residuals"]
    if residuals is not None and len(residuals):
        st.markdown("**Graph return vs environment return per start state**")
        st.scatter_chart(residuals, x="graph_return", y="env_return")
    traces = run["policy_traces"]
    if traces is not None and len(traces):
        st.line_chart(traces.pivot_table(index="t", columns="start", values="a0"))

with tabs[3]:
    bounds = run["bounds"]
    if not bounds:
        st.info("Run `verify-bounds` to certify the value bounds.")
    else:
        (st.success if bounds.get("passed") else st.error)(
            f"{bounds.get('n_instances')} instances, {bounds.get('sandwich_violations')} sandwich violations, "
            f"{bounds.get('improvement_violations')} improvement violations"
        )
        st.json(bounds)

# ───────────────────────── Export: Download PDF ─────────────────────────
with tabs[4]:
    meta, sections = run_sections(run_dir)
    pdf_bytes = build_pdf_bytes("Trajectory stitching run", meta, sections)
    st.download_button(
        "📄 Download PDF report",
        data=pdf_bytes,
        file_name=f"{Path(run_dir).name}_report.pdf",
        mime="application/pdf",
        type="primary",
    )
    for title, text in sections.items():
        with st.expander(title, expanded=False):
            st.code(text)
