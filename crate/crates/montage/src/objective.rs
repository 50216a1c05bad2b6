//! The three pre-training objectives over the per-position logits map:
//! ERF-adaptive dense classification, block-wise classification, and global
//! classification.
//!
//! The soft-label mixing weights depend only on feature position and ERF, so
//! one weight grid serves every image in a batch; the mixed label vectors are
//! composed per image at loss time.

use crate::erf::{MassFractions, MassGrid};
use crate::montage::MontageTemplate;
use crate::net::FeatureGeometry;
use crate::tensor::Tensor;

/// Per-position soft-label mixing weights and home-region assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabelField {
    pub feature_h: usize,
    pub feature_w: usize,
    /// Mixing weights w_i per position, simplex over the four regions.
    pub weights: Vec<[f64; 4]>,
    /// Home region index per position.
    pub home: Vec<usize>,
    /// Iteration at which the field was last refreshed.
    pub refresh_stamp: u64,
    pub tau: f64,
}

/// Scalar loss with per-region breakdown.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub loss: f64,
    pub per_region: [f64; 4],
    pub loss_map: Option<Vec<f64>>,
}

/// Mixing weights for one position: the home region gets
/// `max(tau, rho_r)`, the rest share the remainder proportionally to their
/// mass. `rho_r = 1` is the containment limit (one-hot at r).
pub fn label_weights(rho: &MassFractions, home: usize, tau: f64) -> [f64; 4] {
    let w_r = tau.max(rho[home]);
    let rest = 1.0 - rho[home];
    std::array::from_fn(|i| {
        if i == home {
            w_r
        } else if rest <= 0.0 {
            0.0
        } else {
            (1.0 - w_r) * rho[i] / rest
        }
    })
}

/// Home region per feature position: the template region containing the
/// input-space center of the feature cell.
pub fn home_regions(template: &MontageTemplate, geometry: &FeatureGeometry) -> Vec<usize> {
    let mut home = Vec::with_capacity(geometry.feature_h * geometry.feature_w);
    for j in 0..geometry.feature_h {
        for k in 0..geometry.feature_w {
            let (x, y) = geometry.cell_center(j, k);
            home.push(
                template
                    .region_of_point(x, y)
                    .expect("feature cell center maps inside the canvas"),
            );
        }
    }
    home
}

/// Build the per-position weight grid from measured ERF mass fractions.
pub fn soft_label_field(
    mass: &MassGrid,
    template: &MontageTemplate,
    tau: f64,
    geometry: &FeatureGeometry,
    refresh_stamp: u64,
) -> SoftLabelField {
    assert_eq!(mass.feature_h, geometry.feature_h);
    assert_eq!(mass.feature_w, geometry.feature_w);
    let home = home_regions(template, geometry);
    let weights = home
        .iter()
        .enumerate()
        .map(|(idx, &r)| label_weights(&mass.rho[idx], r, tau))
        .collect();
    SoftLabelField {
        feature_h: geometry.feature_h,
        feature_w: geometry.feature_w,
        weights,
        home,
        refresh_stamp,
        tau,
    }
}

impl SoftLabelField {
    /// Mixed label vector at each position for one image's region labels:
    /// y~ = sum_i w_i y_i, flattened row-major, `num_labels` per position.
    pub fn soft_labels(&self, labels: &[Vec<f64>; 4]) -> Vec<f64> {
        let num_labels = labels[0].len();
        let mut out = vec![0.0; self.weights.len() * num_labels];
        for (pos, w) in self.weights.iter().enumerate() {
            let dst = &mut out[pos * num_labels..(pos + 1) * num_labels];
            for i in 0..4 {
                if w[i] == 0.0 {
                    continue;
                }
                for (d, y) in dst.iter_mut().zip(&labels[i]) {
                    *d += w[i] * y;
                }
            }
        }
        out
    }
}

fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        let e = (l - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Cross-entropy of a soft target against logits:
/// `logsumexp(l) - sum_c y_c l_c`.
fn cross_entropy(logits: &[f64], target: &[f64]) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    lse - logits.iter().zip(target).map(|(l, y)| l * y).sum::<f64>()
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

/// Per-position cross-entropy against the mixed labels, block-wise averaged:
/// L_i is the mean loss over positions homed in R_i and the final loss is the
/// mean of the four region losses. Also returns d(loss)/d(logits).
pub fn erf_adaptive_loss(
    logits: &Tensor,
    field: &SoftLabelField,
    labels: &[Vec<f64>; 4],
) -> (LossReport, Tensor) {
    let k = logits.shape[0];
    let (fh, fw) = (logits.shape[1], logits.shape[2]);
    assert_eq!((fh, fw), (field.feature_h, field.feature_w));
    let hw = fh * fw;
    let soft = field.soft_labels(labels);

    let mut region_sum = [0.0f64; 4];
    let mut region_count = [0usize; 4];
    for &r in &field.home {
        region_count[r] += 1;
    }
    let active = region_count.iter().filter(|&&c| c > 0).count().max(1);

    let mut loss_map = vec![0.0; hw];
    let mut grad = Tensor::zeros(logits.shape.clone());
    let mut channel = vec![0.0; k];
    let mut probs = vec![0.0; k];
    for pos in 0..hw {
        for c in 0..k {
            channel[c] = logits.data[c * hw + pos];
        }
        let target = &soft[pos * k..(pos + 1) * k];
        let l = cross_entropy(&channel, target);
        loss_map[pos] = l;
        let r = field.home[pos];
        region_sum[r] += l;
        softmax_into(&channel, &mut probs);
        let scale = 1.0 / (active as f64 * region_count[r] as f64);
        for c in 0..k {
            grad.data[c * hw + pos] = scale * (probs[c] - target[c]);
        }
    }
    let per_region: [f64; 4] = std::array::from_fn(|i| {
        if region_count[i] > 0 {
            region_sum[i] / region_count[i] as f64
        } else {
            0.0
        }
    });
    let loss = per_region
        .iter()
        .zip(&region_count)
        .filter(|(_, &c)| c > 0)
        .map(|(l, _)| l)
        .sum::<f64>()
        / active as f64;
    (
        LossReport {
            loss,
            per_region,
            loss_map: Some(loss_map),
        },
        grad,
    )
}

/// Mean of a (C, fh, fw) map over the feature positions homed in each region.
pub fn region_pool(map: &Tensor, home: &[usize]) -> [Vec<f64>; 4] {
    let c = map.shape[0];
    let hw = map.shape[1] * map.shape[2];
    assert_eq!(home.len(), hw);
    let mut sums: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; c]);
    let mut counts = [0usize; 4];
    for (pos, &r) in home.iter().enumerate() {
        counts[r] += 1;
        for ch in 0..c {
            sums[r][ch] += map.data[ch * hw + pos];
        }
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        if n > 0 {
            for v in s.iter_mut() {
                *v /= n as f64;
            }
        }
    }
    sums
}

/// Per-region average pooling then cross-entropy against the hard labels;
/// the loss is the mean of the four region losses. Pooling the logits map is
/// used directly: the 1x1 head is position-wise linear, so it commutes with
/// average pooling of the feature map.
pub fn blockwise_loss(
    logits: &Tensor,
    home: &[usize],
    labels: &[Vec<f64>; 4],
) -> (LossReport, Tensor) {
    let k = logits.shape[0];
    let hw = logits.shape[1] * logits.shape[2];
    let pooled = region_pool(logits, home);
    let mut counts = [0usize; 4];
    for &r in home {
        counts[r] += 1;
    }
    let active = counts.iter().filter(|&&c| c > 0).count().max(1);

    let mut per_region = [0.0f64; 4];
    let mut grad = Tensor::zeros(logits.shape.clone());
    let mut probs = vec![0.0; k];
    for r in 0..4 {
        if counts[r] == 0 {
            continue;
        }
        per_region[r] = cross_entropy(&pooled[r], &labels[r]);
        softmax_into(&pooled[r], &mut probs);
        for (pos, &h) in home.iter().enumerate() {
            if h != r {
                continue;
            }
            let scale = 1.0 / (active as f64 * counts[r] as f64);
            for c in 0..k {
                grad.data[c * hw + pos] = scale * (probs[c] - labels[r][c]);
            }
        }
    }
    let loss = per_region
        .iter()
        .zip(&counts)
        .filter(|(_, &c)| c > 0)
        .map(|(l, _)| l)
        .sum::<f64>()
        / active as f64;
    (
        LossReport {
            loss,
            per_region,
            loss_map: None,
        },
        grad,
    )
}

/// Whole-canvas average pooling against a single label mixed by region areas.
pub fn global_loss(
    logits: &Tensor,
    labels: &[Vec<f64>; 4],
    area_fractions: &[f64; 4],
) -> (LossReport, Tensor) {
    let k = logits.shape[0];
    let hw = logits.shape[1] * logits.shape[2];
    let mut pooled = vec![0.0; k];
    for c in 0..k {
        pooled[c] = logits.data[c * hw..(c + 1) * hw].iter().sum::<f64>() / hw as f64;
    }
    let mut target = vec![0.0; k];
    for i in 0..4 {
        for (t, y) in target.iter_mut().zip(&labels[i]) {
            *t += area_fractions[i] * y;
        }
    }
    let loss = cross_entropy(&pooled, &target);
    let mut probs = vec![0.0; k];
    softmax_into(&pooled, &mut probs);
    let mut grad = Tensor::zeros(logits.shape.clone());
    let scale = 1.0 / hw as f64;
    for c in 0..k {
        let g = scale * (probs[c] - target[c]);
        for pos in 0..hw {
            grad.data[c * hw + pos] = g;
        }
    }
    (
        LossReport {
            loss,
            per_region: [loss; 4],
            loss_map: None,
        },
        grad,
    )
}
