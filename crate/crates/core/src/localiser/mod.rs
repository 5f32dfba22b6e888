//! Distances to position.
//!
//! Each anchor with predicted distance d̂ defines a circle; the target is
//! placed at the point minimising the summed squared circle residuals
//! `Σ (‖p − pᵢ‖ − d̂ᵢ)²`. The minimiser is found by a brute-force grid over
//! the anchors' bounding box, refined by Nelder–Mead from the best few local
//! minima of the grid.

mod nelder_mead;

pub use nelder_mead::{minimise, SimplexCoefficients, SimplexOutcome};

use thiserror::Error;

use crate::geometry::Point2;
use crate::graph::MIN_ANCHORS;
use crate::prediction::DistancePredictionSet;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LocaliseError {
    #[error("{found} anchors available, at least {MIN_ANCHORS} are required")]
    TooFewAnchors { found: usize },
    #[error("anchor geometry is degenerate (condition number {condition:.3e})")]
    DegenerateGeometry { condition: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocaliserConfig {
    /// Anchors with a predicted distance above this are ignored (metres).
    pub cutoff: f64,
    /// Grid spacing of the brute-force initialisation (metres).
    pub grid_cell: f64,
    pub simplex: SimplexCoefficients,
    /// Stop once the simplex diameter falls below this (metres).
    pub tolerance: f64,
    pub max_iterations: usize,
    pub min_anchors: usize,
    /// Number of grid local minima (lowest cost first) refined by the simplex.
    pub starts: usize,
}

impl Default for LocaliserConfig {
    fn default() -> Self {
        Self {
            cutoff: 5.0,
            grid_cell: 0.2,
            simplex: SimplexCoefficients::default(),
            tolerance: 1e-7,
            max_iterations: 200,
            min_anchors: MIN_ANCHORS,
            starts: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalisationResult {
    pub position: Point2,
    /// Objective value at `position`.
    pub cost: f64,
    pub anchors_used: usize,
    /// `(anchor node, ‖p̂ − pᵢ‖ − d̂ᵢ)` for the anchors used.
    pub residuals: Vec<(usize, f64)>,
    /// Grid cell centre the winning simplex started from.
    pub seed: Point2,
    pub seed_cost: f64,
    pub iterations: usize,
}

/// Sum of squared circle residuals at `p`.
pub fn cost(p: Point2, anchors: &[(Point2, f64)]) -> f64 {
    anchors
        .iter()
        .map(|(a, d)| {
            let r = p.distance(a) - d;
            r * r
        })
        .sum()
}

/// Lowest-cost cell centre of a `cell`-spaced grid over the anchors' bounding
/// box grown by the largest distance. Ties go to the smallest `(x, y)`.
pub fn grid_minimum(anchors: &[(Point2, f64)], cell: f64) -> (Point2, f64) {
    grid_minima(anchors, cell, 1)[0]
}

/// Up to `k` cell centres of the same grid whose cost is no higher than any of
/// their eight neighbours, sorted by cost, then `(x, y)`.
pub fn grid_minima(anchors: &[(Point2, f64)], cell: f64, k: usize) -> Vec<(Point2, f64)> {
    let margin = anchors.iter().map(|a| a.1).fold(0.0, f64::max);
    let (mut x0, mut y0) = (f64::INFINITY, f64::INFINITY);
    let (mut x1, mut y1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for (p, _) in anchors {
        x0 = x0.min(p.x);
        y0 = y0.min(p.y);
        x1 = x1.max(p.x);
        y1 = y1.max(p.y);
    }
    let (x0, y0, x1, y1) = (x0 - margin, y0 - margin, x1 + margin, y1 + margin);
    let nx = (((x1 - x0) / cell).ceil() as usize).max(1);
    let ny = (((y1 - y0) / cell).ceil() as usize).max(1);
    let centre = |i: usize, j: usize| Point2::new(x0 + (i as f64 + 0.5) * cell, y0 + (j as f64 + 0.5) * cell);
    let costs: Vec<f64> = (0..nx).flat_map(|i| (0..ny).map(move |j| (i, j))).map(|(i, j)| cost(centre(i, j), anchors)).collect();
    let at = |i: usize, j: usize| costs[i * ny + j];
    let mut minima = Vec::new();
    for i in 0..nx {
        for j in 0..ny {
            let c = at(i, j);
            let lowest = (i.saturating_sub(1)..(i + 2).min(nx))
                .all(|a| (j.saturating_sub(1)..(j + 2).min(ny)).all(|b| at(a, b) >= c));
            if lowest {
                minima.push((centre(i, j), c));
            }
        }
    }
    minima.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.x.total_cmp(&b.0.x)).then(a.0.y.total_cmp(&b.0.y)));
    minima.truncate(k.max(1));
    minima
}

/// Localise from explicit `(position, distance)` anchors (no cutoff applied).
pub fn localise_anchors(anchors: &[(Point2, f64)], cfg: &LocaliserConfig) -> Result<(Point2, f64, Point2, f64, usize), LocaliseError> {
    if anchors.len() < cfg.min_anchors.max(1) {
        return Err(LocaliseError::TooFewAnchors { found: anchors.len() });
    }
    // canonical order so the result does not depend on input order
    let mut sorted = anchors.to_vec();
    sorted.sort_by(|a, b| {
        a.0.x.total_cmp(&b.0.x).then(a.0.y.total_cmp(&b.0.y)).then(a.1.total_cmp(&b.1))
    });
    let mut best: Option<(SimplexOutcome, Point2, f64)> = None;
    for (seed, seed_cost) in grid_minima(&sorted, cfg.grid_cell, cfg.starts) {
        let start = [
            seed,
            Point2::new(seed.x + cfg.grid_cell, seed.y),
            Point2::new(seed.x, seed.y + cfg.grid_cell),
        ];
        let out = minimise(|p| cost(p, &sorted), start, cfg.simplex, cfg.tolerance, cfg.max_iterations);
        if best.as_ref().is_none_or(|(b, _, _)| out.value < b.value) {
            best = Some((out, seed, seed_cost));
        }
    }
    let (out, seed, seed_cost) = best.expect("grid has at least one cell");
    Ok((out.best, out.value, seed, seed_cost, out.iterations))
}

/// Apply the distance cutoff, then grid search and simplex refinement.
pub fn localise(preds: &DistancePredictionSet, cfg: &LocaliserConfig) -> Result<LocalisationResult, LocaliseError> {
    if preds.anchors.len() < cfg.min_anchors {
        return Err(LocaliseError::TooFewAnchors { found: preds.anchors.len() });
    }
    let kept = preds.kept(cfg.cutoff, cfg.min_anchors);
    let used: Vec<_> = preds.anchors.iter().zip(&kept).filter(|(_, &k)| k).map(|(a, _)| a).collect();
    let anchors: Vec<(Point2, f64)> = used.iter().map(|a| (a.position, a.distance)).collect();
    let (position, cost, seed, seed_cost, iterations) = localise_anchors(&anchors, cfg)?;
    Ok(LocalisationResult {
        position,
        cost,
        anchors_used: used.len(),
        residuals: used.iter().map(|a| (a.node, position.distance(&a.position) - a.distance)).collect(),
        seed,
        seed_cost,
        iterations,
    })
}

/// Closed-form trilateration: subtract the first circle equation from the
/// others and solve the linear system by normal equations.
pub fn linear_least_squares(anchors: &[(Point2, f64)]) -> Result<Point2, LocaliseError> {
    if anchors.len() < MIN_ANCHORS {
        return Err(LocaliseError::TooFewAnchors { found: anchors.len() });
    }
    let (p0, d0) = anchors[0];
    let (mut a11, mut a12, mut a22, mut b1, mut b2) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &(p, d) in &anchors[1..] {
        let ax = 2.0 * (p.x - p0.x);
        let ay = 2.0 * (p.y - p0.y);
        let rhs = d0 * d0 - d * d + p.x * p.x - p0.x * p0.x + p.y * p.y - p0.y * p0.y;
        a11 += ax * ax;
        a12 += ax * ay;
        a22 += ay * ay;
        b1 += ax * rhs;
        b2 += ay * rhs;
    }
    // eigenvalues of the symmetric 2×2 normal matrix
    let mean = 0.5 * (a11 + a22);
    let spread = (0.25 * (a11 - a22).powi(2) + a12 * a12).sqrt();
    let (hi, lo) = (mean + spread, mean - spread);
    let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if !(condition <= 1e10) {
        return Err(LocaliseError::DegenerateGeometry { condition });
    }
    let det = a11 * a22 - a12 * a12;
    Ok(Point2::new((a22 * b1 - a12 * b2) / det, (a11 * b2 - a12 * b1) / det))
}
