use serde::{Deserialize, Serialize};

use super::{pearson, AnalyticsError, StatsResult};
use crate::stimuli::ExpressionLabel;

/// Counts indexed `[true][predicted]` in canonical label order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; 8]; 8],
}

impl ConfusionMatrix {
    pub fn from_predictions<I>(preds: I) -> Self
    where
        I: IntoIterator<Item = (ExpressionLabel, ExpressionLabel)>,
    {
        let mut m = Self::default();
        for (t, p) in preds {
            m.add(t, p);
        }
        m
    }

    pub fn add(&mut self, truth: ExpressionLabel, predicted: ExpressionLabel) {
        self.counts[truth.index()][predicted.index()] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let hits: u64 = (0..8).map(|i| self.counts[i][i]).sum();
        hits as f64 / self.total().max(1) as f64
    }

    /// Rows with no samples.
    pub fn empty_rows(&self) -> [bool; 8] {
        std::array::from_fn(|i| self.counts[i].iter().all(|&c| c == 0))
    }

    /// Each non-empty row divided by its total; empty rows stay zero.
    pub fn normalized(&self) -> [[f64; 8]; 8] {
        let mut out = [[0.0; 8]; 8];
        for (row, counts) in out.iter_mut().zip(&self.counts) {
            let total: u64 = counts.iter().sum();
            if total > 0 {
                for (o, &c) in row.iter_mut().zip(counts) {
                    *o = c as f64 / total as f64;
                }
            }
        }
        out
    }

    /// Square roots of the normalized values, used for heatmap colors.
    pub fn sqrt_display(&self) -> [[f64; 8]; 8] {
        self.normalized().map(|row| row.map(f64::sqrt))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationMode {
    /// All 64 normalized entries.
    #[default]
    All,
    /// The 56 off-diagonal entries.
    OffDiagonal,
}

/// Pearson correlation of the row-normalized entries of two matrices.
pub fn matrix_correlation(
    a: &ConfusionMatrix,
    b: &ConfusionMatrix,
    mode: CorrelationMode,
) -> Result<StatsResult, AnalyticsError> {
    let flatten = |m: &ConfusionMatrix| -> Vec<f64> {
        let n = m.normalized();
        (0..8)
            .flat_map(|i| (0..8).map(move |j| (i, j)))
            .filter(|&(i, j)| mode == CorrelationMode::All || i != j)
            .map(|(i, j)| n[i][j])
            .collect()
    };
    pearson(&flatten(a), &flatten(b))
}
