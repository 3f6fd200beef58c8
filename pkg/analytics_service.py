"""
Analytics Service for training runs and attention-variant ablations.
Summarises histories, builds the three-variant comparison and renders
plotly charts.
"""

from typing import Any, Dict, List, Optional

from loguru import logger

try:
    import plotly.graph_objects as go
    from plotly.subplots import make_subplots
    VISUALIZATION_AVAILABLE = True
except ImportError:
    VISUALIZATION_AVAILABLE = False

VARIANTS = ("none", "predicted-patch", "oracle-object")
ABLATION_COLUMNS = ("ce_loss", "bleu4", "rouge_l", "cider", "spice_slot")


class AnalyticsService:
    """Summaries and charts for training histories and evaluation reports"""

    def __init__(self):
        self.visualization_enabled = VISUALIZATION_AVAILABLE
        if not self.visualization_enabled:
            logger.warning("Visualization libraries not available")

    def summarize_history(self, history: Dict[str, Any]) -> Dict[str, Any]:
        """Best epoch, its validation numbers and the run length"""
        epochs = history.get("epochs", [])
        if not epochs:
            return {"epochs_run": 0, "message": "No epochs were run; checkpoint holds the initialization."}

        best_epoch = history.get("best_epoch")
        best = next((e for e in epochs if e["epoch"] == best_epoch), epochs[-1])
        return {
            "model": history.get("model"),
            "attention_source": history.get("attention_source"),
            "epochs_run": len(epochs),
            "best_epoch": best["epoch"],
            "best_validation": best["validation"],
            "final_train": epochs[-1]["train"],
            "stopped_early": history.get("stopped_early", False),
        }

    def generate_history_chart(self, history: Dict[str, Any]) -> Optional[str]:
        """HTML div with train/validation loss curves and the learning rate"""
        if not self.visualization_enabled:
            return None

        try:
            epochs = history.get("epochs", [])
            if not epochs:
                return None

            x = [e["epoch"] for e in epochs]
            fig = make_subplots(rows=2, cols=1, shared_xaxes=True, subplot_titles=("Loss", "Learning rate"))
            for split in ("train", "validation"):
                for name in epochs[0][split]:
                    if name in ("top1", "top3"):
                        continue
                    fig.add_trace(go.Scatter(x=x, y=[e[split][name] for e in epochs], mode="lines",
                                             name=f"{split} {name}"), row=1, col=1)
            for name in ("top1", "top3"):
                if name in epochs[0]["validation"]:
                    fig.add_trace(go.Scatter(x=x, y=[e["validation"][name] for e in epochs], mode="lines",
                                             name=f"validation {name}", line=dict(dash="dot")), row=1, col=1)
            fig.add_trace(go.Scatter(x=x, y=[e["lr"] for e in epochs], mode="lines", name="lr"), row=2, col=1)
            fig.update_yaxes(type="log", row=2, col=1)

            best_epoch = history.get("best_epoch")
            if best_epoch is not None:
                fig.add_vline(x=best_epoch, line=dict(color="#888", dash="dash"))
            fig.update_layout(
                title=f"{history.get('model', 'model')} training ({history.get('attention_source', 'none')})",
                margin=dict(b=20, l=5, r=5, t=60),
            )
            return fig.to_html(full_html=False, include_plotlyjs=True, div_id="history-chart")

        except Exception as e:
            logger.error(f"Error generating history chart: {str(e)}")
            return None

    def build_ablation(self, reports: Dict[str, Dict[str, Any]], margin: float = 0.02) -> Dict[str, Any]:
        """
        Ablation table over the attention variants and its ordering checks.

        Args:
            reports: variant name -> report.json content
            margin: minimum gain of predicted-patch over none for CIDEr and SPICE-slot

        Returns:
            rows per variant, plus whether each directional ordering holds
        """
        rows = []
        scores: Dict[str, Dict[str, Optional[float]]] = {}
        for variant in VARIANTS:
            report = reports.get(variant)
            if report is None:
                continue
            values = {column: report.get("scores", {}).get(column) for column in ABLATION_COLUMNS}
            scores[variant] = values
            rows.append({"attention_source": variant, **values})

        checks: Dict[str, Optional[bool]] = {}
        if all(v in scores for v in VARIANTS):
            none, predicted, oracle = (scores[v] for v in VARIANTS)
            checks["ce_loss"] = self._holds(lambda: none["ce_loss"] > predicted["ce_loss"] >= oracle["ce_loss"] - margin)
            for column in ("cider", "spice_slot"):
                checks[column] = self._holds(
                    lambda c=column: oracle[c] >= predicted[c] >= none[c] + margin
                )
        else:
            missing = [v for v in VARIANTS if v not in scores]
            logger.warning(f"Ablation is missing variants: {missing}")

        return {
            "columns": list(ABLATION_COLUMNS),
            "rows": rows,
            "margin": margin,
            "ordering": checks,
            "ordering_holds": bool(checks) and all(checks.values()),
        }

    def generate_ablation_chart(self, ablation: Dict[str, Any]) -> Optional[str]:
        """Grouped bar chart of every score per variant"""
        if not self.visualization_enabled:
            return None

        try:
            rows: List[Dict[str, Any]] = ablation.get("rows", [])
            if not rows:
                return None

            fig = go.Figure()
            for row in rows:
                fig.add_trace(go.Bar(
                    name=row["attention_source"],
                    x=list(ABLATION_COLUMNS),
                    y=[row.get(column) for column in ABLATION_COLUMNS],
                ))
            fig.update_layout(barmode="group", title="Attention variant comparison",
                              margin=dict(b=20, l=5, r=5, t=40))
            return fig.to_html(full_html=False, include_plotlyjs=True, div_id="ablation-chart")

        except Exception as e:
            logger.error(f"Error generating ablation chart: {str(e)}")
            return None

    def write_chart(self, html_div: Optional[str], path: str) -> bool:
        if html_div is None:
            return False
        with open(path, "w", encoding="utf-8") as f:
            f.write(f"<html><body>{html_div}</body></html>\n")
        logger.debug(f"Wrote chart {path}")
        return True

    @staticmethod
    def _holds(check) -> Optional[bool]:
        try:
            return bool(check())
        except TypeError:
            # a score is missing from one of the reports
            return None


# Global analytics service instance
analytics_service = AnalyticsService()
