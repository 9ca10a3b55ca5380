//! Aggregates probe results into the experiment artifacts: heatmaps,
//! average last-token curves, entity-gap curves, layer-binned tables, and
//! PCA snapshots; renders SVG and CSV.

mod pca;
mod svg;

pub use pca::pca_project;
pub use svg::{render_curve_svg, render_heatmap_svg, render_scatter_svg};

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use crate::extract::{Tap, TokenRole};
use crate::probe::ProbeResult;

/// Errors raised by aggregation and rendering.
#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("{0} must be non-empty")]
    EmptyInput(&'static str),
    #[error("results mix taps: {0} and {1}")]
    MixedTaps(Tap, Tap),
    #[error("result sets disagree on layers")]
    LayerMismatch,
    #[error("no item contributed entity tokens")]
    NoEntityTokens,
    #[error("bin width must be at least 1")]
    ZeroBinWidth,
    #[error("zero variance: all points identical")]
    ZeroVariance,
    #[error("PCA needs n >= 3 and d >= 2, got n={n}, d={d}")]
    TooSmall { n: usize, d: usize },
    #[error("PCA power iteration failed to converge")]
    NoConvergence,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Token-by-layer grid of v_info values for one cache/tap.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapGrid {
    pub tap: Tap,
    /// Row labels, one per question token.
    pub token_texts: Vec<String>,
    /// Column labels: model layer indices in ascending order.
    pub layers: Vec<usize>,
    /// `values[token][layer_pos]`; `None` renders as missing.
    pub values: Vec<Vec<Option<f64>>>,
}

/// Per-layer mean/std across items.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCurve {
    pub layers: Vec<usize>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Number of contributing items.
    pub n: usize,
}

/// Layer-binned last-token table keyed by the irrelevant-evidence count.
#[derive(Debug, Clone, PartialEq)]
pub struct BinTable {
    pub bin_width: usize,
    /// `[start, end)` layer ranges; the final bin may be partial.
    pub bins: Vec<(usize, usize)>,
    /// One row per n_irr value, ascending.
    pub rows: Vec<(usize, Vec<f64>)>,
}

fn sorted_layers(results: &[ProbeResult]) -> Vec<usize> {
    let mut layers: Vec<usize> = results.iter().map(|r| r.layer).collect();
    layers.sort_unstable();
    layers.dedup();
    layers
}

/// Arranges one cache's results into a token x layer grid; error-flagged
/// cells become missing.
pub fn heatmap(
    results: &[ProbeResult],
    token_texts: &[String],
) -> Result<HeatmapGrid, AnalysisError> {
    if results.is_empty() {
        return Err(AnalysisError::EmptyInput("results"));
    }
    let tap = results[0].tap;
    if let Some(other) = results.iter().find(|r| r.tap != tap) {
        return Err(AnalysisError::MixedTaps(tap, other.tap));
    }
    let layers = sorted_layers(results);
    let n_tokens = token_texts.len();
    let mut values = vec![vec![None; layers.len()]; n_tokens];
    for r in results {
        if r.token_index >= n_tokens {
            continue;
        }
        let col = layers.iter().position(|&l| l == r.layer).unwrap();
        values[r.token_index][col] = if r.is_ok() { Some(r.v_info) } else { None };
    }
    Ok(HeatmapGrid {
        tap,
        token_texts: token_texts.to_vec(),
        layers,
        values,
    })
}

fn last_token_values(results: &[ProbeResult], layers: &[usize]) -> Option<Vec<f64>> {
    let last = results.iter().map(|r| r.token_index).max()?;
    let mut out = Vec::with_capacity(layers.len());
    for &layer in layers {
        let cell = results
            .iter()
            .find(|r| r.layer == layer && r.token_index == last && r.is_ok())?;
        out.push(cell.v_info);
    }
    Some(out)
}

/// Mean and standard deviation per layer of the last-question-token v_info
/// across items.
pub fn avg_last_token_curve(result_sets: &[Vec<ProbeResult>]) -> Result<LayerCurve, AnalysisError> {
    if result_sets.is_empty() {
        return Err(AnalysisError::EmptyInput("result_sets"));
    }
    let layers = sorted_layers(&result_sets[0]);
    let mut per_item = Vec::with_capacity(result_sets.len());
    for set in result_sets {
        if sorted_layers(set) != layers {
            return Err(AnalysisError::LayerMismatch);
        }
        per_item.push(last_token_values(set, &layers).ok_or(AnalysisError::LayerMismatch)?);
    }
    let n = per_item.len();
    let mut mean = vec![0.0; layers.len()];
    let mut std = vec![0.0; layers.len()];
    for (li, m) in mean.iter_mut().enumerate() {
        *m = per_item.iter().map(|vals| vals[li]).sum::<f64>() / n as f64;
    }
    for (li, s) in std.iter_mut().enumerate() {
        let var = per_item
            .iter()
            .map(|vals| (vals[li] - mean[li]).powi(2))
            .sum::<f64>()
            / n as f64;
        *s = var.sqrt();
    }
    Ok(LayerCurve {
        layers,
        mean,
        std,
        n,
    })
}

/// Per-layer difference between the mean v_info of entity-role tokens and
/// other tokens, pooled at token level across items. Items without entity
/// tokens are excluded with a warning. The `std` field carries the standard
/// error of the difference estimate.
pub fn entity_gap_curve(result_sets: &[Vec<ProbeResult>]) -> Result<LayerCurve, AnalysisError> {
    if result_sets.is_empty() {
        return Err(AnalysisError::EmptyInput("result_sets"));
    }
    let layers = sorted_layers(&result_sets[0]);
    let mut contributing = 0usize;
    // Pooled per layer: (entity values, other values).
    let mut pools: Vec<(Vec<f64>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); layers.len()];
    for (idx, set) in result_sets.iter().enumerate() {
        if sorted_layers(set) != layers {
            return Err(AnalysisError::LayerMismatch);
        }
        let has_entity = set
            .iter()
            .any(|r| r.token_role == TokenRole::Entity && r.is_ok());
        if !has_entity {
            log::warn!("entity gap: item {idx} has no entity tokens; excluded");
            continue;
        }
        contributing += 1;
        for r in set.iter().filter(|r| r.is_ok()) {
            let col = layers.iter().position(|&l| l == r.layer).unwrap();
            match r.token_role {
                TokenRole::Entity => pools[col].0.push(r.v_info),
                TokenRole::Other => pools[col].1.push(r.v_info),
            }
        }
    }
    if contributing == 0 {
        return Err(AnalysisError::NoEntityTokens);
    }
    let mut mean = Vec::with_capacity(layers.len());
    let mut std = Vec::with_capacity(layers.len());
    for (entity, other) in &pools {
        let m_e = entity.iter().sum::<f64>() / entity.len().max(1) as f64;
        let m_o = other.iter().sum::<f64>() / other.len().max(1) as f64;
        mean.push(m_e - m_o);
        let var = |xs: &[f64], m: f64| {
            if xs.len() < 2 {
                0.0
            } else {
                xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
            }
        };
        let se = (var(entity, m_e) / entity.len().max(1) as f64
            + var(other, m_o) / other.len().max(1) as f64)
            .sqrt();
        std.push(se);
    }
    Ok(LayerCurve {
        layers,
        mean,
        std,
        n: contributing,
    })
}

/// Bins layers into `bin_width`-wide groups (final bin may be partial) and
/// averages last-token v_info per bin; one row per n_irr setting.
pub fn layer_bin_table(
    result_sets: &BTreeMap<usize, Vec<ProbeResult>>,
    bin_width: usize,
) -> Result<BinTable, AnalysisError> {
    if bin_width == 0 {
        return Err(AnalysisError::ZeroBinWidth);
    }
    if result_sets.is_empty() {
        return Err(AnalysisError::EmptyInput("result_sets"));
    }
    let layers = sorted_layers(result_sets.values().next().unwrap());
    let mut bins = Vec::new();
    let mut start = 0usize;
    while start < layers.len() {
        let end = (start + bin_width).min(layers.len());
        bins.push((layers[start], layers[end - 1] + 1));
        start = end;
    }
    let mut rows = Vec::with_capacity(result_sets.len());
    for (&n_irr, set) in result_sets {
        if sorted_layers(set) != layers {
            return Err(AnalysisError::LayerMismatch);
        }
        let values = last_token_values(set, &layers).ok_or(AnalysisError::LayerMismatch)?;
        let mut cells = Vec::with_capacity(bins.len());
        for chunk in values.chunks(bin_width) {
            cells.push(chunk.iter().sum::<f64>() / chunk.len() as f64);
        }
        rows.push((n_irr, cells));
    }
    Ok(BinTable {
        bin_width,
        bins,
        rows,
    })
}

/// Writes a layer curve as CSV (layer, mean, std, n).
pub fn write_curve_csv(curve: &LayerCurve, path: &Path) -> Result<(), AnalysisError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["layer", "mean_v_info", "std", "n_items"])?;
    for (i, &layer) in curve.layers.iter().enumerate() {
        w.write_record([
            layer.to_string(),
            format!("{:.6}", curve.mean[i]),
            format!("{:.6}", curve.std[i]),
            curve.n.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the bin table as CSV: one row per n_irr, one column per bin.
pub fn write_bin_table_csv(table: &BinTable, path: &Path) -> Result<(), AnalysisError> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["n_irr".to_string()];
    header.extend(
        table
            .bins
            .iter()
            .map(|&(s, e)| format!("layers_{}-{}", s, e - 1)),
    );
    w.write_record(&header)?;
    for (n_irr, cells) in &table.rows {
        let mut row = vec![n_irr.to_string()];
        row.extend(cells.iter().map(|v| format!("{v:.6}")));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(layer: usize, token: usize, role: TokenRole, v: f64) -> ProbeResult {
        ProbeResult {
            layer,
            tap: Tap::Block,
            token_index: token,
            token_role: role,
            accuracy: 0.5,
            h_y: 1.0,
            h_y_given_r: 1.0 - v,
            v_info: v,
            error: None,
        }
    }

    fn grid_results(n_layers: usize, n_tokens: usize, v: impl Fn(usize, usize) -> f64) -> Vec<ProbeResult> {
        let mut out = Vec::new();
        for l in 0..n_layers {
            for t in 0..n_tokens {
                let role = if t == 0 { TokenRole::Entity } else { TokenRole::Other };
                out.push(result(l, t, role, v(l, t)));
            }
        }
        out
    }

    #[test]
    fn heatmap_shape_and_missing_cells() {
        let mut results = grid_results(8, 10, |l, t| (l * 10 + t) as f64 / 100.0);
        results[3].error = Some("boom".into());
        let texts: Vec<String> = (0..10).map(|i| i.to_string()).collect();
        let grid = heatmap(&results, &texts).unwrap();
        assert_eq!(grid.values.len(), 10);
        assert_eq!(grid.layers.len(), 8);
        assert_eq!(grid.values[3][0], None, "error cell missing");
        assert_eq!(grid.values[5][2], Some(0.25));
    }

    #[test]
    fn heatmap_rejects_mixed_taps() {
        let mut results = grid_results(2, 2, |_, _| 0.0);
        results[1].tap = Tap::Mlp;
        let texts = vec!["a".to_string(), "b".to_string()];
        assert!(matches!(
            heatmap(&results, &texts),
            Err(AnalysisError::MixedTaps(..))
        ));
    }

    #[test]
    fn avg_curve_single_item_has_zero_std() {
        let results = grid_results(4, 3, |l, _| l as f64);
        let curve = avg_last_token_curve(std::slice::from_ref(&results)).unwrap();
        assert_eq!(curve.n, 1);
        assert_eq!(curve.mean, vec![0.0, 1.0, 2.0, 3.0]);
        assert!(curve.std.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn avg_curve_matches_direct_summation() {
        // Independent summation oracle over 50 synthetic items.
        let sets: Vec<Vec<ProbeResult>> = (0..50)
            .map(|i| grid_results(4, 3, move |l, _| l as f64 + i as f64))
            .collect();
        let curve = avg_last_token_curve(&sets).unwrap();
        for (li, m) in curve.mean.iter().enumerate() {
            let direct: f64 = (0..50).map(|i| li as f64 + i as f64).sum::<f64>() / 50.0;
            assert!((m - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn gap_zero_when_roles_equal() {
        let sets = vec![grid_results(4, 4, |l, _| l as f64 * 0.1)];
        let curve = entity_gap_curve(&sets).unwrap();
        assert!(curve.mean.iter().all(|&g| g.abs() < 1e-12));
    }

    #[test]
    fn gap_constant_offset_fixture() {
        // Entity cells = other cells + 0.3 at every layer.
        let sets = vec![grid_results(5, 4, |l, t| {
            l as f64 * 0.05 + if t == 0 { 0.3 } else { 0.0 }
        })];
        let curve = entity_gap_curve(&sets).unwrap();
        for g in curve.mean {
            assert!((g - 0.3).abs() < 1e-12);
        }
    }

    #[test]
    fn gap_excludes_items_without_entities() {
        let mut no_entity = grid_results(2, 2, |_, _| 0.1);
        for r in &mut no_entity {
            r.token_role = TokenRole::Other;
        }
        let with_entity = grid_results(2, 2, |_, t| if t == 0 { 0.5 } else { 0.1 });
        let curve = entity_gap_curve(&[no_entity.clone(), with_entity]).unwrap();
        assert_eq!(curve.n, 1);
        assert!(matches!(
            entity_gap_curve(&[no_entity]),
            Err(AnalysisError::NoEntityTokens)
        ));
    }

    #[test]
    fn bin_table_partial_bin() {
        let mut sets = BTreeMap::new();
        sets.insert(0usize, grid_results(8, 2, |_, _| 1.0));
        let table = layer_bin_table(&sets, 5).unwrap();
        assert_eq!(table.bins, vec![(0, 5), (5, 8)]);
        assert_eq!(table.rows[0].1, vec![1.0, 1.0]);
    }

    #[test]
    fn bin_means_recompose_global_mean() {
        let mut sets = BTreeMap::new();
        sets.insert(1usize, grid_results(8, 2, |l, _| (l as f64).sin()));
        let table = layer_bin_table(&sets, 3).unwrap();
        let sizes = [3.0, 3.0, 2.0];
        let weighted: f64 = table.rows[0]
            .1
            .iter()
            .zip(sizes)
            .map(|(m, s)| m * s)
            .sum::<f64>()
            / 8.0;
        let global: f64 = (0..8).map(|l| (l as f64).sin()).sum::<f64>() / 8.0;
        assert!((weighted - global).abs() < 1e-12);
    }

    #[test]
    fn bin_table_16_columns_for_80_layers() {
        let mut sets = BTreeMap::new();
        sets.insert(0usize, grid_results(80, 1, |_, _| 0.5));
        let table = layer_bin_table(&sets, 5).unwrap();
        assert_eq!(table.bins.len(), 16);
    }
}
