import logging
import os
from typing import Dict, List, Optional

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import pandas as pd
import plotly.express as px
import plotly.graph_objects as go

logger = logging.getLogger(__name__)


class SimulationVisualizer:
    """Figures for experiment frames produced by the metrics module."""

    def __init__(self):
        self.color_palette = px.colors.qualitative.Set2
        self.theme = "plotly_white"

    def _error_figure(self, what: str, error: Exception) -> go.Figure:
        logger.error(f"Error creating {what}: {str(error)}")
        return go.Figure().add_annotation(text=f"Error: {str(error)}", x=0.5, y=0.5, showarrow=False)

    def create_throughput_plot(self, df: pd.DataFrame) -> go.Figure:
        """
        Throughput against malicious fraction, one line per shard count.

        Args:
            df: frame from metrics.throughput_frame

        Returns:
            Plotly line figure
        """
        try:
            summary = (df.groupby(["shards", "malicious_fraction"], as_index=False)["throughput_tps"].mean()
                       .sort_values(["shards", "malicious_fraction"]))
            fig = px.line(summary, x="malicious_fraction", y="throughput_tps", color="shards", markers=True,
                          color_discrete_sequence=self.color_palette)
            fig.update_layout(
                title="Throughput under single-shard flooding",
                xaxis_title="Malicious fraction",
                yaxis_title="Throughput (tps)",
                template=self.theme,
            )
            return fig
        except Exception as e:
            return self._error_figure("throughput plot", e)

    def create_latency_plot(self, df: pd.DataFrame) -> go.Figure:
        """Average latency (s) against malicious fraction, one line per shard count."""
        try:
            summary = (df.groupby(["shards", "malicious_fraction"], as_index=False)["avg_latency_ms"].mean()
                       .sort_values(["shards", "malicious_fraction"]))
            summary["avg_latency_s"] = summary["avg_latency_ms"] / 1000
            fig = px.line(summary, x="malicious_fraction", y="avg_latency_s", color="shards", markers=True,
                          color_discrete_sequence=self.color_palette)
            fig.update_layout(
                title="Confirmation latency",
                xaxis_title="Malicious fraction",
                yaxis_title="Average latency (s)",
                template=self.theme,
            )
            return fig
        except Exception as e:
            return self._error_figure("latency plot", e)

    def create_queue_plot(self, df: pd.DataFrame, group_by: str = "malicious_fraction",
                          shard: int = 0) -> go.Figure:
        """Queue size of one shard over time, one line per value of group_by."""
        try:
            fig = go.Figure()
            for i, (value, part) in enumerate(df.groupby(group_by)):
                fig.add_trace(go.Scatter(
                    x=part["time_s"], y=part["queue_size"], mode="lines", name=f"{group_by}={value}",
                    line={"color": self.color_palette[i % len(self.color_palette)]},
                ))
            fig.update_layout(
                title=f"Mempool size of shard {shard}",
                xaxis_title="Time (s)",
                yaxis_title="Pending transactions",
                template=self.theme,
            )
            return fig
        except Exception as e:
            return self._error_figure("queue plot", e)

    def create_affected_plot(self, df: pd.DataFrame) -> go.Figure:
        """Probability that a transaction touches the attacked shard."""
        try:
            fig = px.line(df, x="shards", y="affected_probability", color="inputs", markers=True,
                          color_discrete_sequence=self.color_palette)
            fig.update_layout(
                title="Transactions affected by a single-shard attack",
                xaxis_title="Shards",
                yaxis_title="Affected probability",
                yaxis_range=[0, 1],
                template=self.theme,
            )
            return fig
        except Exception as e:
            return self._error_figure("affected plot", e)

    def save_html(self, fig: go.Figure, path: str) -> str:
        fig.write_html(path, include_plotlyjs="cdn")
        logger.info(f"Figure written to {path}")
        return path

    def save_png(self, df: pd.DataFrame, x: str, y: str, group: str, path: str,
                 title: Optional[str] = None) -> str:
        """Static matplotlib rendering of a grouped line chart."""
        fig, ax = plt.subplots(figsize=(7, 4.5))
        try:
            for value, part in df.groupby(group):
                part = part.groupby(x, as_index=False)[y].mean().sort_values(x)
                ax.plot(part[x], part[y], marker="o", markersize=3, label=f"{group}={value}")
            ax.set_xlabel(x)
            ax.set_ylabel(y)
            if title:
                ax.set_title(title)
            ax.grid(alpha=0.3)
            ax.legend()
            fig.tight_layout()
            fig.savefig(path, dpi=150)
        finally:
            plt.close(fig)
        logger.info(f"Figure written to {path}")
        return path


def render_experiment(kind: str, frames: Dict[str, pd.DataFrame], out_dir: str) -> List[str]:
    """
    Write HTML and PNG figures for an experiment's frames.

    Args:
        kind: throughput | latency | queue | affected
        frames: frame name -> DataFrame (throughput, latency, queue_<shard>, affected)
        out_dir: target directory

    Returns:
        Paths written
    """
    visualizer = SimulationVisualizer()
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    if kind == "throughput" and "throughput" in frames:
        df = frames["throughput"]
        paths.append(visualizer.save_html(visualizer.create_throughput_plot(df),
                                          os.path.join(out_dir, "throughput.html")))
        paths.append(visualizer.save_png(df, "malicious_fraction", "throughput_tps", "shards",
                                         os.path.join(out_dir, "throughput.png"), "Throughput (tps)"))
    elif kind == "latency" and "latency" in frames:
        df = frames["latency"]
        paths.append(visualizer.save_html(visualizer.create_latency_plot(df),
                                          os.path.join(out_dir, "latency.html")))
        paths.append(visualizer.save_png(df, "malicious_fraction", "avg_latency_ms", "shards",
                                         os.path.join(out_dir, "latency.png"), "Average latency (ms)"))
    elif kind == "queue":
        for name, df in frames.items():
            if not name.startswith("queue_") or df.empty:
                continue
            shard = int(name.split("_", 1)[1])
            df = df.assign(series=df["shards"].astype(str) + " shards, f=" + df["malicious_fraction"].astype(str))
            group = "series"
            paths.append(visualizer.save_html(visualizer.create_queue_plot(df, group, shard),
                                              os.path.join(out_dir, f"{name}.html")))
            paths.append(visualizer.save_png(df, "time_s", "queue_size", group,
                                             os.path.join(out_dir, f"{name}.png"), f"Queue of shard {shard}"))
    elif kind == "affected" and "affected" in frames:
        df = frames["affected"]
        paths.append(visualizer.save_html(visualizer.create_affected_plot(df),
                                          os.path.join(out_dir, "affected.html")))
        paths.append(visualizer.save_png(df, "shards", "affected_probability", "inputs",
                                         os.path.join(out_dir, "affected.png"), "Affected probability"))
    else:
        logger.warning(f"No frames to plot for {kind}")
    return paths
