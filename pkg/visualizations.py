"""
Visualization Module for the pacing optimizer
Power / velocity / energy profiles against distance and fitted-model charts
"""

import logging
from typing import Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import plotly.graph_objects as go
from plotly.subplots import make_subplots

from utils import PathLike

logger = logging.getLogger(__name__)


class PacingVisualizer:
    def __init__(self):
        self.theme = "plotly_white"
        self.plan_color = "#2980b9"
        self.baseline_color = "#e67e22"
        self.cp_color = "#e74c3c"

    def create_pacing_comparison(
        self, plan: pd.DataFrame, baseline: Optional[pd.DataFrame] = None, cp: Optional[float] = None
    ) -> go.Figure:
        """Optimal plan against a ride log: power, velocity and remaining energy vs distance"""

        if plan is None or plan.empty:
            return self._create_empty_chart("Plan has no intervals to display")

        fig = make_subplots(
            rows=3, cols=1,
            shared_xaxes=True,
            vertical_spacing=0.06,
            subplot_titles=("Power", "Velocity", "Remaining energy"),
        )
        distance_km = plan["distance_m"] / 1000.0

        # plan power is held over each interval
        fig.add_trace(go.Scatter(
            x=distance_km, y=plan["target_power_w"],
            mode="lines", line_shape="hv", name="Optimal power",
            line=dict(color=self.plan_color, width=2),
        ), row=1, col=1)
        fig.add_trace(go.Scatter(
            x=distance_km, y=plan["velocity_mps"],
            mode="lines", name="Optimal velocity",
            line=dict(color=self.plan_color, width=2),
        ), row=2, col=1)
        fig.add_trace(go.Scatter(
            x=distance_km, y=plan["remaining_energy_j"],
            mode="lines", name="Optimal energy",
            line=dict(color=self.plan_color, width=2),
        ), row=3, col=1)

        if baseline is not None and not baseline.empty:
            ride_km = baseline["distance_m"] / 1000.0
            power_col = "power_applied_w" if "power_applied_w" in baseline.columns else "power_w"
            fig.add_trace(go.Scatter(
                x=ride_km, y=baseline[power_col],
                mode="lines", name="Baseline power",
                line=dict(color=self.baseline_color, width=1.5),
            ), row=1, col=1)
            fig.add_trace(go.Scatter(
                x=ride_km, y=baseline["velocity_mps"],
                mode="lines", name="Baseline velocity",
                line=dict(color=self.baseline_color, width=1.5),
            ), row=2, col=1)
            if "remaining_energy_j" in baseline.columns:
                fig.add_trace(go.Scatter(
                    x=ride_km, y=baseline["remaining_energy_j"],
                    mode="lines", name="Baseline energy",
                    line=dict(color=self.baseline_color, width=1.5),
                ), row=3, col=1)

        if cp is not None:
            fig.add_hline(
                y=cp, row=1, col=1,
                line=dict(color=self.cp_color, width=1, dash="dash"),
                annotation_text=f"CP {cp:.0f} W",
            )

        fig.update_yaxes(title_text="W", row=1, col=1)
        fig.update_yaxes(title_text="m/s", row=2, col=1)
        fig.update_yaxes(title_text="J", row=3, col=1)
        fig.update_xaxes(title_text="Distance (km)", row=3, col=1)
        fig.update_layout(
            title={"text": "Pacing profile", "x": 0.5, "font": {"size": 18}},
            template=self.theme,
            height=800,
            showlegend=True,
        )
        return fig

    def create_max_power_fit(
        self, w: np.ndarray, p: np.ndarray, cp: float, a1: float, a2: float
    ) -> go.Figure:
        """Observed power against remaining energy with the fitted quadratic"""

        if len(w) == 0:
            return self._create_empty_chart("No samples to display")

        grid = np.linspace(0.0, float(np.max(w)), 200)
        fig = go.Figure()
        fig.add_trace(go.Scatter(
            x=w, y=p, mode="markers", name="Observed",
            marker=dict(size=5, color=self.baseline_color),
        ))
        fig.add_trace(go.Scatter(
            x=grid, y=a1 * grid * grid + a2 * grid + cp, mode="lines", name="Fitted max power",
            line=dict(color=self.plan_color, width=2),
        ))
        fig.update_layout(
            title={"text": "Maximum power vs remaining energy", "x": 0.5, "font": {"size": 18}},
            xaxis_title="Remaining energy (J)",
            yaxis_title="Power (W)",
            template=self.theme,
            height=450,
        )
        return fig

    def create_recovery_fit(self, points: Sequence[Tuple[float, float]], a: float, b: float) -> go.Figure:
        """Adjusted recovery power against actual recovery power"""

        if not points:
            return self._create_empty_chart("No recovery measurements to display")

        x = np.array([pt[0] for pt in points])
        y = np.array([pt[1] for pt in points])
        line_x = np.linspace(0.0, float(x.max()) * 1.1, 50)
        fig = go.Figure()
        fig.add_trace(go.Scatter(
            x=x, y=y, mode="markers", name="Measured",
            marker=dict(size=9, color=self.baseline_color),
        ))
        fig.add_trace(go.Scatter(
            x=line_x, y=a * line_x + b, mode="lines", name=f"p_adj = {a:.3f} p + {b:.1f}",
            line=dict(color=self.plan_color, width=2, dash="dash"),
        ))
        fig.update_layout(
            title={"text": "Recovery model", "x": 0.5, "font": {"size": 18}},
            xaxis_title="Recovery power (W)",
            yaxis_title="Adjusted power (W)",
            template=self.theme,
            height=450,
        )
        return fig

    def write_svg(self, fig: go.Figure, path: PathLike) -> None:
        fig.write_image(str(path), format="svg")
        logger.info("Wrote %s", path)

    def _create_empty_chart(self, message: str) -> go.Figure:
        """Create an empty chart with a message"""
        fig = go.Figure()
        fig.add_annotation(
            text=message,
            xref="paper", yref="paper",
            x=0.5, y=0.5,
            xanchor="center", yanchor="middle",
            font=dict(size=16, color="gray"),
        )
        fig.update_layout(
            template=self.theme,
            xaxis=dict(showgrid=False, showticklabels=False),
            yaxis=dict(showgrid=False, showticklabels=False),
            height=300,
        )
        return fig


# Global instance
visualizer = PacingVisualizer()
