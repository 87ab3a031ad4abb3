import os

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import natsort
import numpy as np
import palettable
import pandas as pd
import seaborn as sns
from matplotlib.colors import ListedColormap

from .logger import logger


class PlotUtils:
    """Figures for a finished run directory, read back from its CSV outputs."""

    def __init__(self, run_dir: str, output_dir: str = None):
        self.run_dir = str(run_dir)
        self.output_dir = output_dir or os.path.join(self.run_dir, 'plots')
        os.makedirs(self.output_dir, exist_ok=True)
        cmap = ListedColormap(palettable.tableau.GreenOrange_12.mpl_colors)
        self.colors = [cmap(i) for i in range(cmap.N)]

    def _csv(self, name: str) -> pd.DataFrame:
        path = os.path.join(self.run_dir, name)
        if not os.path.exists(path):
            raise FileNotFoundError(f"File not found: {path}")
        return pd.read_csv(path)

    def _save(self, name: str):
        plt.tight_layout()
        sns.despine()
        plt.savefig(os.path.join(self.output_dir, f'{name}.pdf'), dpi=300, bbox_inches='tight')
        plt.savefig(os.path.join(self.output_dir, f'{name}.png'), dpi=300, bbox_inches='tight')
        plt.close()

    def _palette(self, keys):
        return {key: self.colors[i % len(self.colors)] for i, key in enumerate(keys)}

    def render(self, kind: str):
        method = getattr(self, 'plot_' + kind.replace('-', '_'), None)
        if method is None:
            logger.info(f"No figures defined for '{kind}'")
            return
        method()
        logger.info(f"Figures written to {self.output_dir}")

    # --- per kind ------------------------------------------------------------------

    def plot_profile(self):
        df = self._csv('profile.csv')
        objects = natsort.natsorted(df['n_objects'].unique())
        palette = self._palette(objects)

        plt.figure(figsize=(6, 4), dpi=300)
        sns.scatterplot(data=df, x='B', y='nms_time', hue='n_objects', hue_order=objects, palette=palette,
                        s=12, edgecolor='none')
        plt.xlabel('Candidate boxes above threshold (B)')
        plt.ylabel('NMS time (s)')
        plt.title('NMS Runtime vs Boxes')
        self._save('nms_time_vs_boxes')

        phases = df.groupby('n_objects')[['neural_time', 'nms_time']].mean()
        phases = phases.reindex(objects)
        fig, ax = plt.subplots(figsize=(5, 4), dpi=300)
        phases.plot(kind='bar', stacked=True, ax=ax, edgecolor='grey', width=0.8, color=self.colors[:2])
        ax.legend(loc='center left', bbox_to_anchor=(1, 0.9), frameon=False)
        plt.xlabel('Objects in scene')
        plt.ylabel('Mean time (s)')
        plt.title('Phase Breakdown')
        self._save('phase_breakdown')

    def plot_amplify_sweep(self):
        df = self._csv('measurements.csv')
        ks = sorted(df['k'].unique())
        fig, axes = plt.subplots(1, len(ks), figsize=(4 * len(ks), 4), dpi=300, squeeze=False)
        for ax, k, color in zip(axes[0], ks, self.colors):
            group = df[df['k'] == k]
            ax.scatter(group['B'], group['total_time'], s=6, color=color)
            ax.set_title(f'k = {k}')
            ax.set_xlabel('Boxes per object (B)')
        axes[0][0].set_ylabel('Total time (s)')
        self._save('total_time_by_k')

        table = self._csv('leakage.csv')
        plt.figure(figsize=(5, 4), dpi=300)
        sns.pointplot(data=table, x='k', y='rho_time', color=self.colors[0], errorbar='sd')
        plt.ylim(-0.05, 1.05)
        plt.ylabel('Spearman rho (B, NMS time)')
        plt.title('Leakage vs Amplification')
        self._save('leakage_by_k')

    def plot_calibrate(self):
        df = self._csv('calibration.csv')
        plt.figure(figsize=(6, 4), dpi=300)
        plt.scatter(df['pixel_count'], df['total_time'], s=10, color=self.colors[0], label='measured')
        order = np.argsort(df['pixel_count'].to_numpy())
        plt.plot(df['pixel_count'].to_numpy()[order], df['predicted'].to_numpy()[order],
                 color=self.colors[1], label='fit')
        plt.legend(frameon=False)
        plt.xlabel('Pixels')
        plt.ylabel('Total time on black raster (s)')
        plt.title('Neural Runtime Calibration')
        self._save('calibration_fit')

        estimates = self._csv('estimates.csv')
        plt.figure(figsize=(5, 5), dpi=300)
        plt.scatter(estimates['nms_time'], estimates['estimated_nms_time'], s=6, color=self.colors[2])
        lo = min(estimates['nms_time'].min(), estimates['estimated_nms_time'].min())
        hi = max(estimates['nms_time'].max(), estimates['estimated_nms_time'].max())
        plt.plot([lo, hi], [lo, hi], color='grey', linestyle='--', linewidth=0.8)
        plt.xlabel('True NMS time (s)')
        plt.ylabel('Estimated NMS time (s)')
        plt.title('NMS Time Estimates')
        self._save('estimate_vs_truth')

    def _budget_curves(self, hue: str, name: str, title: str):
        df = self._csv('budget_curves.csv')
        for metric in df['metric'].unique():
            subset = df[(df['metric'] == metric) & (df['scale'] == 'unit')]
            keys = natsort.natsorted(subset[hue].unique())
            plt.figure(figsize=(6, 4), dpi=300)
            sns.lineplot(data=subset, x='budget', y='percent_evaded', hue=hue, hue_order=keys,
                         palette=self._palette(keys))
            plt.xlabel(f'Perturbation budget ({metric})')
            plt.ylabel('Evaded (%)')
            plt.ylim(-2, 102)
            plt.title(title)
            self._save(f'{name}_{metric}')

    def plot_evade(self):
        self._budget_curves('attack', 'budget_curve', 'Evasion Success vs Budget')
        path = os.path.join(self.run_dir, 'amplification_success.csv')
        if os.path.exists(path):
            df = pd.read_csv(path)
            plt.figure(figsize=(5, 4), dpi=300)
            sns.boxplot(data=df, x='amplified_copies', y='l2', color=self.colors[0])
            plt.xlabel('Amplified copies still detected')
            plt.ylabel('L2 budget')
            plt.title('Budget vs Detected Copies')
            self._save('budget_vs_copies')

    def plot_evade_baseline(self):
        self._budget_curves('attack', 'budget_curve', 'Timing Attack vs Decision-Only Baseline')

    def plot_lambda_sweep(self):
        self._budget_curves('step_size', 'budget_curve', 'Evasion Success per Step Size')

    def plot_infer_dataset(self):
        df = self._csv('samples.csv')
        verdict = self._csv('verdict.csv').iloc[0]
        sets = ['member', 'nonmember', 'target']
        plt.figure(figsize=(6, 4), dpi=300)
        sns.histplot(data=df, x='runtime', hue='set', hue_order=sets, palette=self._palette(sets),
                     element='step', stat='density', common_norm=False, bins=40)
        plt.axvline(verdict['tau'], color='grey', linestyle='--', linewidth=0.8)
        plt.xlabel('Estimated NMS runtime (s)')
        plt.title(f"Runtime Distributions (verdict: {verdict['decision']})")
        self._save('runtime_histograms')

    def plot_fp_bound_curve(self):
        df = self._csv('fp_bound_curve.csv')
        plt.figure(figsize=(6, 4), dpi=300)
        plt.plot(df['n_target'], df['fp_bound'], color=self.colors[0], label='false positive')
        if 'fn_bound_raw' in df:
            plt.plot(df['n_target'], df['fn_bound_raw'].clip(upper=1.0), color=self.colors[1],
                     label='false negative')
        plt.legend(frameon=False)
        plt.xlabel('Target set size')
        plt.ylabel('Error bound')
        plt.title('Error Bound vs Target Size')
        self._save('fp_bound_curve')

    def plot_countermeasure_eval(self):
        df = self._csv('countermeasures.csv')
        variants = list(df['variant'].unique())
        g = sns.FacetGrid(df, col='variant', col_order=variants, sharey=False, height=3.5)
        g.map_dataframe(sns.scatterplot, x='B', y='total_time', s=6, color=self.colors[0], edgecolor='none')
        g.set_axis_labels('Candidate boxes (B)', 'Total time (s)')
        self._save('countermeasures')
