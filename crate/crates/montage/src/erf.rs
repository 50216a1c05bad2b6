//! Effective receptive field measurement and per-region mass fractions.
//!
//! For a feature position (j, k), a unit gradient is injected on the feature
//! map summed over channels, backpropagated to the input, and aggregated as
//! per-pixel absolute gradient magnitude. The fraction of that mass falling
//! into each template region feeds the soft-label weights.

use rayon::prelude::*;

use crate::error::{MontageError, Result};
use crate::montage::MontageTemplate;
use crate::net::{backward_sample, forward_sample, FeatureGeometry, NetworkParams};
use crate::tensor::Tensor;

/// How per-channel input gradients are aggregated into the ERF map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ErfAggregation {
    /// Sum of absolute gradient values over channels.
    #[default]
    Absolute,
    /// Sum of squared gradient values over channels.
    Squared,
}

/// Input-space gradient-energy map for one feature position.
#[derive(Debug, Clone, PartialEq)]
pub struct ErfMap {
    pub position: (usize, usize),
    pub height: usize,
    pub width: usize,
    /// Nonnegative values, row-major H x W.
    pub values: Vec<f64>,
}

impl ErfMap {
    pub fn total_mass(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// Four disjoint binary masks that tile the input canvas.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMasks {
    pub height: usize,
    pub width: usize,
    pub masks: [Vec<u8>; 4],
}

/// Per-region mass fractions; nonnegative, summing to 1.
pub type MassFractions = [f64; 4];

/// Mask i is 1 exactly on the pixels of region R_i.
pub fn region_masks(template: &MontageTemplate, height: usize, width: usize) -> Result<RegionMasks> {
    if template.canvas_w != width || template.canvas_h != height {
        return Err(MontageError::ShapeMismatch {
            layer: "region_masks".into(),
            expected: format!("{}x{}", template.canvas_w, template.canvas_h),
            got: format!("{width}x{height}"),
        });
    }
    let mut masks: [Vec<u8>; 4] = std::array::from_fn(|_| vec![0u8; width * height]);
    for (mask, region) in masks.iter_mut().zip(template.regions()) {
        for y in region.y0..region.y1 {
            for x in region.x0..region.x1 {
                mask[y * width + x] = 1;
            }
        }
    }
    Ok(RegionMasks {
        height,
        width,
        masks,
    })
}

/// Region areas as fractions of the canvas area; the uniform-ERF fallback.
pub fn area_fractions(template: &MontageTemplate) -> MassFractions {
    let canvas = (template.canvas_w * template.canvas_h) as f64;
    let regions = template.regions();
    std::array::from_fn(|i| regions[i].area() as f64 / canvas)
}

/// Measure the ERF of feature position (j, k) on `probe`.
pub fn compute_erf(
    params: &NetworkParams,
    probe: &Tensor,
    position: (usize, usize),
    aggregation: ErfAggregation,
) -> Result<ErfMap> {
    let fwd = forward_sample(params, probe)?;
    let (cf, fh, fw) = (
        fwd.features.shape[0],
        fwd.features.shape[1],
        fwd.features.shape[2],
    );
    let (j, k) = position;
    assert!(j < fh && k < fw, "feature position out of grid");
    let mut inject = Tensor::zeros(vec![cf, fh, fw]);
    for c in 0..cf {
        inject.set3(c, j, k, 1.0);
    }
    let grads = backward_sample(params, &fwd, None, Some(&inject), true)?;
    let gi = grads.input.expect("input gradient requested");
    let (h, w) = (probe.shape[1], probe.shape[2]);
    let mut values = vec![0.0; h * w];
    for c in 0..probe.shape[0] {
        for y in 0..h {
            let row = gi.row(c, y);
            for x in 0..w {
                values[y * w + x] += match aggregation {
                    ErfAggregation::Absolute => row[x].abs(),
                    ErfAggregation::Squared => row[x] * row[x],
                };
            }
        }
    }
    let map = ErfMap {
        position,
        height: h,
        width: w,
        values,
    };
    if map.total_mass() == 0.0 {
        return Err(MontageError::DegenerateErf);
    }
    Ok(map)
}

/// rho_i = sum(g * m_i) / sum(g).
pub fn erf_mass(map: &ErfMap, masks: &RegionMasks) -> Result<MassFractions> {
    assert_eq!((map.height, map.width), (masks.height, masks.width));
    let total = map.total_mass();
    if total <= 0.0 {
        return Err(MontageError::DegenerateErf);
    }
    Ok(std::array::from_fn(|i| {
        map.values
            .iter()
            .zip(&masks.masks[i])
            .map(|(g, &m)| g * m as f64)
            .sum::<f64>()
            / total
    }))
}

/// Mass fractions for every feature position.
#[derive(Debug, Clone, PartialEq)]
pub struct MassGrid {
    pub feature_h: usize,
    pub feature_w: usize,
    pub rho: Vec<MassFractions>,
    /// Positions where the ERF degenerated and the area-fraction fallback was used.
    pub fallback_count: usize,
}

impl MassGrid {
    pub fn at(&self, j: usize, k: usize) -> &MassFractions {
        &self.rho[j * self.feature_w + k]
    }

    /// Uniform grid from region areas (the no-measurement baseline).
    pub fn uniform(geometry: &FeatureGeometry, template: &MontageTemplate) -> Self {
        let rho = area_fractions(template);
        MassGrid {
            feature_h: geometry.feature_h,
            feature_w: geometry.feature_w,
            rho: vec![rho; geometry.feature_h * geometry.feature_w],
            fallback_count: 0,
        }
    }
}

/// Compute mass fractions at every `stride`-th position (parallel over
/// positions); remaining positions copy their nearest computed neighbor,
/// row-major tie-break toward the smaller index.
pub fn erf_grid(
    params: &NetworkParams,
    probe: &Tensor,
    template: &MontageTemplate,
    stride: usize,
    aggregation: ErfAggregation,
) -> Result<MassGrid> {
    assert!(stride >= 1);
    let geometry = FeatureGeometry::for_input(&params.arch, probe.shape[1], probe.shape[2])?;
    let masks = region_masks(template, probe.shape[1], probe.shape[2])?;
    let fallback = area_fractions(template);

    let rows: Vec<usize> = (0..geometry.feature_h).step_by(stride).collect();
    let cols: Vec<usize> = (0..geometry.feature_w).step_by(stride).collect();
    let positions: Vec<(usize, usize)> = rows
        .iter()
        .flat_map(|&j| cols.iter().map(move |&k| (j, k)))
        .collect();

    let computed: Vec<((usize, usize), MassFractions, bool)> = positions
        .par_iter()
        .map(|&pos| match compute_erf(params, probe, pos, aggregation) {
            Ok(map) => {
                let rho = erf_mass(&map, &masks).unwrap_or(fallback);
                (pos, rho, false)
            }
            Err(MontageError::DegenerateErf) => (pos, fallback, true),
            Err(_) => (pos, fallback, true),
        })
        .collect();

    let mut grid = vec![fallback; geometry.feature_h * geometry.feature_w];
    let mut fallback_count = 0;
    for ((j, k), rho, fell_back) in &computed {
        grid[j * geometry.feature_w + k] = *rho;
        if *fell_back {
            fallback_count += 1;
        }
    }
    // fill rule: nearest computed index per axis, ties to the smaller index
    let nearest = |idx: usize, computed: &[usize]| -> usize {
        *computed
            .iter()
            .min_by_key(|&&c| (idx.abs_diff(c), c))
            .unwrap()
    };
    for j in 0..geometry.feature_h {
        let cj = nearest(j, &rows);
        for k in 0..geometry.feature_w {
            let ck = nearest(k, &cols);
            if cj != j || ck != k {
                grid[j * geometry.feature_w + k] = grid[cj * geometry.feature_w + ck];
            }
        }
    }
    Ok(MassGrid {
        feature_h: geometry.feature_h,
        feature_w: geometry.feature_w,
        rho: grid,
        fallback_count,
    })
}
