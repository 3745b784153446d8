# utils/report.py
from __future__ import annotations
from io import BytesIO
from pathlib import Path
from typing import Any, Dict, List, Tuple
import json
import os
import unicodedata
from xml.sax.saxutils import escape

import pandas as pd

from utils.helpers import read_json
from utils.log import get_logger

logger = get_logger(__name__)

_EMPTY_PDF = b"%PDF-1.4\n1 0 obj <<>> endobj\ntrailer <<>>\n%%EOF\n"


# ───────────────────────── text helpers ─────────────────────────
def to_ascii(s: str) -> str:
    """Fallback for the built-in PDF fonts: Greek letters spelled out, accents stripped."""
    if not isinstance(s, str):
        return ""
    s = s.strip().replace("γ", "gamma").replace("ε", "eps").replace("δ", "delta").replace("±", "+/-")
    return unicodedata.normalize("NFKD", s).encode("ascii", "ignore").decode("ascii")


def payload_to_text(payload: Any) -> str:
    if payload is None:
        return "No data."
    if isinstance(payload, str):
        return payload
    if isinstance(payload, pd.DataFrame):
        return payload.to_string(index=False)
    if isinstance(payload, dict):
        return "\n".join(f"{k}: {_inline(v)}" for k, v in payload.items())
    return str(payload)


def _inline(v: Any) -> str:
    if isinstance(v, float):
        return f"{v:.4g}"
    if isinstance(v, (list, tuple)):
        if len(v) > 8:
            return f"[{', '.join(_inline(x) for x in v[:8])}, … ({len(v)} values)]"
        return "[" + ", ".join(_inline(x) for x in v) + "]"
    if isinstance(v, dict):
        return json.dumps(v, ensure_ascii=False)
    return str(v)


# ───────────────────────── run summary ─────────────────────────
def run_sections(root: str | Path) -> Tuple[Dict[str, str], Dict[str, str]]:
    """Title metadata and text sections for whatever artifacts exist in a run directory."""
    root = Path(root)
    meta: Dict[str, str] = {"Run": str(root)}
    sections: Dict[str, str] = {}

    manifest = root / "manifest.json"
    if manifest.is_file():
        doc = read_json(manifest)
        meta["Seed"] = str(doc.get("seed"))
        meta["Config hash"] = str(doc.get("config_hash", ""))[:16]
        meta["Environment"] = str(doc.get("config", {}).get("env", {}).get("name", ""))
        sections["Artifacts"] = "\n".join(f"{k}  {v[:12]}" for k, v in doc.get("artifacts", {}).items())

    metrics = root / "metrics.csv"
    if metrics.is_file():
        df = pd.read_csv(metrics)
        cols = ["iteration", "n_states", "n_candidates", "n_attempted", "n_accepted", "mean_start_value"]
        sections["Stitching iterations"] = df[[c for c in cols if c in df]].to_string(index=False)

    for name, title in (("evaluation.json", "Evaluation (stitched)"), ("evaluation_raw.json", "Evaluation (raw data)")):
        p = root / name
        if p.is_file():
            sections[title] = payload_to_text(read_json(p))

    residuals = root / "residuals.csv"
    if residuals.is_file():
        df = pd.read_csv(residuals)
        sections["Graph vs policy returns"] = payload_to_text({
            "starts": len(df),
            "mean graph return": float(df["graph_return"].mean()) if len(df) else float("nan"),
            "mean env return": float(df["env_return"].mean()) if len(df) else float("nan"),
            "mean |residual|": float(df["residual"].abs().mean()) if len(df) else float("nan"),
        })

    bounds = root / "bounds_report.json"
    if bounds.is_file():
        sections["Bound verification"] = payload_to_text(read_json(bounds))
    return meta, sections


# ───────────────────────── PDF ─────────────────────────
def build_pdf_bytes(title: str, meta: Dict[str, str], sections: Dict[str, str]) -> bytes:
    try:
        from reportlab.lib.pagesizes import A4
        from reportlab.lib.styles import getSampleStyleSheet
        from reportlab.pdfbase import pdfmetrics
        from reportlab.pdfbase.ttfonts import TTFont
        from reportlab.platypus import Paragraph, Preformatted, SimpleDocTemplate, Spacer
    except Exception:
        logger.warning("reportlab unavailable; writing an empty PDF")
        return _EMPTY_PDF

    buf = BytesIO()
    doc = SimpleDocTemplate(
        buf,
        pagesize=A4,
        leftMargin=36, rightMargin=36, topMargin=36, bottomMargin=36,
        title=title,
    )
    styles = getSampleStyleSheet()
    has_unicode_font = False
    try:
        candidates = [
            "/usr/share/fonts/truetype/dejavu/DejaVuSansMono.ttf",
            "/usr/local/share/fonts/DejaVuSansMono.ttf",
        ]
        font_path = next((p for p in candidates if os.path.exists(p)), None)
        if font_path:
            pdfmetrics.registerFont(TTFont("DejaVuSansMono", font_path))
            for name in ("Normal", "Heading1", "Heading2", "Code"):
                styles[name].fontName = "DejaVuSansMono"
            has_unicode_font = True
    except Exception:
        has_unicode_font = False

    def _txt(s: str) -> str:
        return s if has_unicode_font else to_ascii(s)

    story: List[Any] = [Paragraph(escape(_txt(title)), styles["Heading1"]), Spacer(1, 8)]
    meta_lines = [escape(f"{k}: {_txt(v)}") for k, v in meta.items() if v]
    if meta_lines:
        story.append(Paragraph("<br/>".join(meta_lines), styles["Normal"]))
    story.append(Spacer(1, 12))

    for sec_title, sec_text in sections.items():
        story.append(Paragraph(escape(_txt(sec_title)), styles["Heading2"]))
        story.append(Spacer(1, 6))
        story.append(Preformatted(_txt(sec_text), styles["Code"]))
        story.append(Spacer(1, 12))

    try:
        doc.build(story)
        return buf.getvalue()
    except Exception as e:
        logger.warning("PDF build failed: %s", e)
        return _EMPTY_PDF


def write_run_report(root: str | Path, path: str | Path | None = None) -> Path:
    root = Path(root)
    meta, sections = run_sections(root)
    out = Path(path) if path else root / "report.pdf"
    out.write_bytes(build_pdf_bytes("Trajectory stitching run", meta, sections))
    return out
