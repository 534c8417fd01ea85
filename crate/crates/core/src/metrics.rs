//! Distances between point sets, ensemble KL, trend statistics and scene error.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, param, Error, Result};
use crate::generator::{CameraPose, Generator, Scene};
use crate::linalg::{dot, log_sum_exp, sq_dist};
use crate::prior::{ConditionalPriorSet, GaussianMixturePrior};
use crate::rng::{standard_normal_vec, stream};

pub const DEFAULT_PROJECTIONS: usize = 128;
/// Grid points per axis for `ensemble_kl`.
pub const KL_GRID: usize = 512;
/// Reported PSNR when the scene matches exactly.
pub const PSNR_SENTINEL: f64 = 999.0;

/// Named scalar results with the sample sizes and seeds behind them.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub values: BTreeMap<String, f64>,
    pub sample_sizes: BTreeMap<String, usize>,
    pub seeds: Vec<u64>,
}

impl MetricReport {
    pub fn insert(&mut self, name: impl Into<String>, value: f64) -> Result<()> {
        let name = name.into();
        if !value.is_finite() {
            return param(format!("metric '{name}' is not finite ({value})"));
        }
        self.values.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.values.get(name).copied()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        for (k, v) in &self.values {
            let _ = writeln!(out, "{k},{v}");
        }
        out
    }
}

fn check_sets(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<usize> {
    if a.is_empty() || b.is_empty() {
        return param("point sets must be non-empty");
    }
    let d = a[0].len();
    for p in a.iter().chain(b) {
        check_dim(d, p.len(), "point")?;
    }
    Ok(d)
}

/// Exact 1-D 2-Wasserstein distance between empirical measures.
pub fn w2_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return param("point sets must be non-empty");
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len(), b.len());
    let mut acc = 0.0;
    if n == m {
        acc = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n as f64;
    } else {
        // integrate over the merged quantile breakpoints i/n and j/m
        let (mut i, mut j, mut u) = (0usize, 0usize, 0.0f64);
        while i < n && j < m {
            let next = ((i + 1) as f64 / n as f64).min((j + 1) as f64 / m as f64);
            acc += (next - u) * (a[i] - b[j]).powi(2);
            u = next;
            if (i + 1) as f64 / n as f64 <= u {
                i += 1;
            }
            if (j + 1) as f64 / m as f64 <= u {
                j += 1;
            }
        }
    }
    Ok(acc.sqrt())
}

/// Mean over `n_proj` seeded unit directions of the projected 1-D W2.
pub fn sliced_w2(a: &[Vec<f64>], b: &[Vec<f64>], n_proj: usize, seed: u64) -> Result<f64> {
    let d = check_sets(a, b)?;
    if n_proj == 0 {
        return param("n_proj must be >= 1");
    }
    let total: Result<Vec<f64>> = (0..n_proj)
        .into_par_iter()
        .map(|k| {
            let mut rng = stream(seed, &[0x5f2, k as u64]);
            let dir = loop {
                let v = standard_normal_vec(&mut rng, d);
                let n = dot(&v, &v).sqrt();
                if n > 1e-12 {
                    break v.iter().map(|x| x / n).collect::<Vec<_>>();
                }
            };
            let pa: Vec<f64> = a.iter().map(|p| dot(p, &dir)).collect();
            let pb: Vec<f64> = b.iter().map(|p| dot(p, &dir)).collect();
            w2_1d(&pa, &pb)
        })
        .collect();
    Ok(total?.iter().sum::<f64>() / n_proj as f64)
}

/// Unbiased MMD^2 with kernel `exp(-|x - y|^2 / (2 h^2))`.
pub fn mmd_rbf(a: &[Vec<f64>], b: &[Vec<f64>], bandwidth: f64) -> Result<f64> {
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return param("bandwidth must be positive");
    }
    if a.len() < 2 || b.len() < 2 {
        return param("MMD needs at least two points per set");
    }
    check_sets(a, b)?;
    let g = 1.0 / (2.0 * bandwidth * bandwidth);
    let k = |x: &[f64], y: &[f64]| (-g * sq_dist(x, y)).exp();
    let within = |s: &[Vec<f64>]| {
        let n = s.len();
        let sum: f64 = (0..n).into_par_iter().map(|i| (0..n).filter(|&j| j != i).map(|j| k(&s[i], &s[j])).sum::<f64>()).sum();
        sum / (n * (n - 1)) as f64
    };
    let cross: f64 = a.par_iter().map(|x| b.iter().map(|y| k(x, y)).sum::<f64>()).sum::<f64>() / (a.len() * b.len()) as f64;
    Ok(within(a) + within(b) - 2.0 * cross)
}

/// `sum_k lambda_k KL(q_sigma_k || p_sigma_k)` by grid quadrature.
///
/// `q_sigma` is the particle measure convolved with `N(0, sigma^2 I)`. Each
/// axis is covered by [`KL_GRID`] points over `[min - 6 w, max + 6 w]`, `w`
/// being the widest smoothed component; mass beyond six widths (below 2e-9
/// per axis for each component) is dropped.
pub fn ensemble_kl(particles: &[Vec<f64>], prior: &GaussianMixturePrior, sigmas: &[f64], weights: &[f64]) -> Result<f64> {
    let d = prior.dim();
    if d > 2 {
        return Err(Error::Unsupported(format!("ensemble KL quadrature supports dim <= 2, got {d}")));
    }
    if particles.is_empty() {
        return param("ensemble KL needs at least one particle");
    }
    for p in particles {
        check_dim(d, p.len(), "particle")?;
    }
    if sigmas.len() != weights.len() {
        return param("one weight per sigma is required");
    }
    let mut total = 0.0;
    for (&sigma, &lam) in sigmas.iter().zip(weights) {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return param(format!("ensemble KL needs sigma > 0, got {sigma}"));
        }
        if lam == 0.0 {
            continue;
        }
        let p = prior.smoothed(sigma)?;
        let q = GaussianMixturePrior::normalized(
            particles
                .iter()
                .map(|x| crate::prior::Component { weight: 1.0, mean: x.clone(), scale: sigma })
                .collect(),
            None,
        )?;
        let w = p.max_scale().max(sigma);
        let axes: Vec<Vec<f64>> = (0..d)
            .map(|ax| {
                let coords = particles.iter().map(|x| x[ax]).chain(prior.components().iter().map(|c| c.mean[ax]));
                let (lo, hi) = coords.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
                let (lo, hi) = (lo - 6.0 * w, hi + 6.0 * w);
                let h = (hi - lo) / (KL_GRID - 1) as f64;
                (0..KL_GRID).map(|i| lo + h * i as f64).collect()
            })
            .collect();
        let cell: f64 = axes.iter().map(|a| a[1] - a[0]).product();
        let n_pts = KL_GRID.pow(d as u32);
        let kl: f64 = (0..n_pts)
            .into_par_iter()
            .map(|idx| {
                let x: Vec<f64> = (0..d).map(|ax| axes[ax][(idx / KL_GRID.pow(ax as u32)) % KL_GRID]).collect();
                let lq = log_density(&q, &x);
                let lp = log_density(&p, &x);
                let qv = lq.exp();
                if qv == 0.0 {
                    0.0
                } else {
                    qv * (lq - lp)
                }
            })
            .sum::<f64>()
            * cell;
        total += lam * kl;
    }
    Ok(total)
}

/// Log density of an already-smoothed mixture.
fn log_density(m: &GaussianMixturePrior, x: &[f64]) -> f64 {
    let d = x.len() as f64;
    let terms: Vec<f64> = m
        .components()
        .iter()
        .map(|c| {
            let v = c.scale * c.scale;
            c.weight.ln() - 0.5 * sq_dist(x, &c.mean) / v - 0.5 * d * (std::f64::consts::TAU * v).ln()
        })
        .collect();
    log_sum_exp(&terms)
}

/// Average ranks (1-based), ties sharing their mean rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

/// Trend of a series against its index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrendStats {
    pub spearman_rho: f64,
    pub fraction_increasing: f64,
}

pub fn trend_stats(series: &[f64]) -> Result<TrendStats> {
    if series.len() < 3 {
        return param("trend statistics need at least 3 values");
    }
    if series.iter().any(|v| v.is_nan()) {
        return param("trend series contains NaN");
    }
    let idx: Vec<f64> = (1..=series.len()).map(|i| i as f64).collect();
    let spearman_rho = pearson(&idx, &average_ranks(series));
    let ups = series.windows(2).filter(|w| w[1] > w[0]).count();
    Ok(TrendStats { spearman_rho, fraction_increasing: ups as f64 / (series.len() - 1) as f64 })
}

/// Fraction of scenes whose best-scoring label is their source label.
///
/// A scene's score under a label is the mean over `poses` of the label
/// prior's log density of the rendered view.
pub fn retrieval_precision(
    scenes: &[(String, Scene)],
    priors: &ConditionalPriorSet,
    generator: &Generator,
    poses: &[CameraPose],
) -> Result<f64> {
    let labels: Vec<&str> = priors.labels().collect();
    if labels.len() < 2 {
        return param("retrieval needs at least two labels");
    }
    if scenes.is_empty() || poses.is_empty() {
        return param("retrieval needs scenes and poses");
    }
    let hits: Result<Vec<bool>> = scenes
        .par_iter()
        .map(|(src, scene)| {
            if !labels.contains(&src.as_str()) {
                return param(format!("scene label '{src}' is not in the prior set"));
            }
            let renders = poses.iter().map(|c| generator.render(scene, c)).collect::<Result<Vec<_>>>()?;
            let mut best = (f64::NEG_INFINITY, "");
            for &l in &labels {
                let p = priors.conditional(l)?;
                let mut s = 0.0;
                for r in &renders {
                    s += p.smoothed_logpdf(r, 0.0)?;
                }
                let s = s / renders.len() as f64;
                if s > best.0 {
                    best = (s, l);
                }
            }
            Ok(best.1 == src)
        })
        .collect();
    let hits = hits?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneError {
    /// `|theta - theta*| / |theta*|`, or the absolute error when `theta* = 0`.
    pub relative_l2: f64,
    /// `20 log10(range / rmse)`, [`PSNR_SENTINEL`] on an exact match.
    pub psnr_db: f64,
}

pub fn scene_error(theta: &[f64], theta_star: &[f64]) -> Result<SceneError> {
    check_dim(theta_star.len(), theta.len(), "scene")?;
    if theta.is_empty() {
        return param("scenes must be non-empty");
    }
    let err = sq_dist(theta, theta_star).sqrt();
    let ref_norm = dot(theta_star, theta_star).sqrt();
    let relative_l2 = if ref_norm > 0.0 { err / ref_norm } else { err };
    let (lo, hi) = theta_star.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let range = if hi > lo { hi - lo } else { 1.0 };
    let rmse = err / (theta.len() as f64).sqrt();
    let psnr_db = if rmse == 0.0 { PSNR_SENTINEL } else { 20.0 * (range / rmse).log10() };
    Ok(SceneError { relative_l2, psnr_db })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prior::Component;

    fn pts(v: &[f64]) -> Vec<Vec<f64>> {
        v.iter().map(|&x| vec![x]).collect()
    }

    #[test]
    fn sliced_w2_basics() {
        assert_eq!(sliced_w2(&pts(&[0.0]), &pts(&[1.0]), 16, 0).unwrap(), 1.0);
        let a = vec![vec![0.3, -1.0], vec![2.0, 0.5]];
        assert_eq!(sliced_w2(&a, &a, 32, 1).unwrap(), 0.0);
        assert!(sliced_w2(&[], &a, 4, 0).is_err());
        assert!(sliced_w2(&a, &a, 0, 0).is_err());
        let b = vec![vec![1.0, 1.0]];
        assert_eq!(sliced_w2(&a, &b, 32, 5).unwrap(), sliced_w2(&b, &a, 32, 5).unwrap());
    }

    #[test]
    fn w2_unequal_sizes() {
        // {0, 2} vs {1}: both halves move by 1
        assert!((w2_1d(&[0.0, 2.0], &[1.0]).unwrap() - 1.0).abs() < 1e-15);
        // {0} vs {0, 0, 3}: a third of the mass moves by 3
        assert!((w2_1d(&[0.0], &[0.0, 0.0, 3.0]).unwrap() - 3.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn mmd_limits() {
        let a = vec![vec![0.0], vec![0.01], vec![-0.01]];
        let b: Vec<Vec<f64>> = a.iter().map(|p| vec![p[0] + 100.0]).collect();
        let far = mmd_rbf(&a, &b, 1.0).unwrap();
        assert!((far - 2.0).abs() < 1e-3, "{far}");
        let shift = |s: &[Vec<f64>]| s.iter().map(|p| vec![p[0] + 7.5]).collect::<Vec<_>>();
        let c = vec![vec![0.2], vec![0.9], vec![1.4]];
        let m1 = mmd_rbf(&a, &c, 0.7).unwrap();
        let m2 = mmd_rbf(&shift(&a), &shift(&c), 0.7).unwrap();
        assert!((m1 - m2).abs() < 1e-12);
        assert!(mmd_rbf(&a[..1], &c, 1.0).is_err());
        assert!(mmd_rbf(&a, &c, 0.0).is_err());
    }

    #[test]
    fn trend_examples() {
        let t = trend_stats(&[3.0, 1.0, 2.0]).unwrap();
        assert!((t.spearman_rho + 0.5).abs() < 1e-12);
        assert_eq!(t.fraction_increasing, 0.5);
        let dec = trend_stats(&[5.0, 4.0, 1.0, -2.0]).unwrap();
        assert_eq!((dec.spearman_rho, dec.fraction_increasing), (-1.0, 0.0));
        let inc = trend_stats(&[0.1, 0.2, 0.25, 9.0]).unwrap();
        assert_eq!((inc.spearman_rho, inc.fraction_increasing), (1.0, 1.0));
        assert_eq!(trend_stats(&[2.0; 5]).unwrap().spearman_rho, 0.0);
        assert!(trend_stats(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[2.0, 1.0, 2.0, 5.0]), vec![2.5, 1.0, 2.5, 4.0]);
    }

    #[test]
    fn ensemble_kl_gaussian_closed_form() {
        let s = 0.7;
        let prior = GaussianMixturePrior::gaussian(vec![1.0], s).unwrap();
        let kl = ensemble_kl(&[vec![1.0]], &prior, &[s], &[1.0]).unwrap();
        // N(mu, s^2) vs N(mu, 2 s^2)
        let want = 0.5 * (0.5 - 1.0 + 2f64.ln());
        assert!((kl - want).abs() < 1e-3, "{kl} vs {want}");
        assert_eq!(ensemble_kl(&[vec![1.0]], &prior, &[s], &[0.0]).unwrap(), 0.0);
        let p3 = GaussianMixturePrior::gaussian(vec![0.0; 3], 1.0).unwrap();
        assert!(matches!(ensemble_kl(&[vec![0.0; 3]], &p3, &[1.0], &[1.0]), Err(Error::Unsupported(_))));
    }

    #[test]
    fn ensemble_kl_2d_closed_form() {
        let s = 0.5;
        let prior = GaussianMixturePrior::new(vec![Component { weight: 1.0, mean: vec![0.0, 1.0], scale: s }], None).unwrap();
        let kl = ensemble_kl(&[vec![0.0, 1.0]], &prior, &[s], &[1.0]).unwrap();
        let want = 2.0 * 0.5 * (0.5 - 1.0 + 2f64.ln());
        assert!((kl - want).abs() < 1e-3, "{kl} vs {want}");
    }

    #[test]
    fn scene_error_examples() {
        let star = vec![0.0, 1.0, 0.5, 0.25];
        let e = scene_error(&star, &star).unwrap();
        assert_eq!((e.relative_l2, e.psnr_db), (0.0, PSNR_SENTINEL));
        let off: Vec<f64> = star.iter().map(|v| v + 0.01).collect();
        assert!((scene_error(&off, &star).unwrap().psnr_db - 40.0).abs() < 1e-9);
        let zero = vec![0.0; 4];
        assert_eq!(scene_error(&[3.0, 4.0, 0.0, 0.0], &zero).unwrap().relative_l2, 5.0);
    }
}
