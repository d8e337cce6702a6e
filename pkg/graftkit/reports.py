"""Static plotly report figures written next to the CSV tables."""
import logging
from pathlib import Path

import pandas as pd
import plotly.express as px

logger = logging.getLogger(__name__)


def epoch_loss_frame(report):
    """Per-epoch loss curves of a TrainReport as a DataFrame (one column per term)."""
    df = pd.DataFrame(report.epoch_losses)
    df.insert(0, "epoch", range(len(df)))
    return df


def loss_curve_figure(epoch_df):
    df_melted = pd.melt(epoch_df, id_vars=["epoch"], value_vars=["frl", "fel", "fsl", "total"],
                        var_name="Term", value_name="Loss")
    fig = px.line(df_melted, x="epoch", y="Loss", color="Term", log_y=True,
                  title="Grafting loss per epoch")
    fig.update_xaxes(title_text="Epoch")
    return fig


def ablation_figure(runs_df, metric="metric"):
    fig = px.box(runs_df, x="terms", y=metric, points="all",
                 title=f"Loss-term ablation ({metric}, {runs_df['repeat'].nunique()} repeats)")
    fig.update_xaxes(title_text="Enabled loss terms")
    return fig


def split_sweep_figure(sweep_df, metric="metric"):
    df = sweep_df.assign(split=sweep_df["split_front"].astype(str) + "/" + sweep_df["split_mid"].astype(str))
    fig = px.bar(df, x="split", y=metric, hover_data=["trainable_params", "fraction"],
                 title="Front end / middle net split variants")
    fig.update_xaxes(title_text="(front end, middle net) block indices")
    return fig


def write_figure(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.write_html(path, include_plotlyjs="cdn")
    logger.info(f"Figure written to {path}")
    return path
