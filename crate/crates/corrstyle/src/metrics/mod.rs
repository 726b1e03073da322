//! Evaluation metrics: LPIPS, FID, ArtFID and CFSD over pluggable
//! pretrained feature extractors.

pub mod extractor;
pub mod linalg;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::RgbImage;
use extractor::FeatureExtractor;

/// Mean vector and covariance matrix of a feature-embedding set.
#[derive(Debug, Clone)]
pub struct DistributionStats {
    pub mean: Vec<f64>,
    pub covariance: Array2<f64>,
    pub sample_count: usize,
}

impl DistributionStats {
    /// Unbiased sample statistics. Requires at least two samples.
    pub fn from_samples(samples: &[Vec<f64>]) -> Result<Self> {
        let n = samples.len();
        if n < 2 {
            return Err(Error::EmptyInput(format!(
                "distribution stats need at least 2 samples, got {n}"
            )));
        }
        let d = samples[0].len();
        if samples.iter().any(|s| s.len() != d) {
            return Err(Error::shape("DistributionStats", format!("dim {d}"), "ragged sample set"));
        }
        let mut mean = vec![0.0; d];
        for s in samples {
            for (m, v) in mean.iter_mut().zip(s) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut cov = Array2::zeros((d, d));
        for s in samples {
            for i in 0..d {
                let di = s[i] - mean[i];
                for j in i..d {
                    cov[[i, j]] += di * (s[j] - mean[j]);
                }
            }
        }
        let denom = (n - 1) as f64;
        for i in 0..d {
            for j in i..d {
                let v = cov[[i, j]] / denom;
                cov[[i, j]] = v;
                cov[[j, i]] = v;
            }
        }
        Ok(Self {
            mean,
            covariance: cov,
            sample_count: n,
        })
    }
}

/// LPIPS: per-layer unit-normalized features, weighted squared differences,
/// spatially averaged, summed over layers.
pub fn lpips(x: &RgbImage, x0: &RgbImage, extractor: &dyn FeatureExtractor) -> Result<f64> {
    if (x.height(), x.width()) != (x0.height(), x0.width()) {
        return Err(Error::shape(
            "lpips",
            format!("{}x{}", x0.height(), x0.width()),
            format!("{}x{}", x.height(), x.width()),
        ));
    }
    let fx = extractor.extract(x)?;
    let fx0 = extractor.extract(x0)?;
    let mut total = 0.0;
    for ((a, b), spec) in fx.iter().zip(&fx0).zip(extractor.layers()) {
        let (c, h, w) = a.dim();
        let mut layer_sum = 0.0f64;
        for y in 0..h {
            for x in 0..w {
                // Unit-normalize each spatial descriptor across channels.
                let mut na = 0.0f64;
                let mut nb = 0.0f64;
                for k in 0..c {
                    na += (a[[k, y, x]] as f64).powi(2);
                    nb += (b[[k, y, x]] as f64).powi(2);
                }
                let na = na.sqrt().max(1e-10);
                let nb = nb.sqrt().max(1e-10);
                let mut d2 = 0.0f64;
                for k in 0..c {
                    let da = a[[k, y, x]] as f64 / na - b[[k, y, x]] as f64 / nb;
                    d2 += da * da;
                }
                layer_sum += d2;
            }
        }
        total += spec.weight * layer_sum / (h * w) as f64;
    }
    Ok(total)
}

/// Fréchet distance between the Gaussian fits of two embedding sets:
/// `||mu_r - mu_g||^2 + Tr(S_r + S_g - 2 (S_r S_g)^{1/2})`.
pub fn fid(real: &[Vec<f64>], generated: &[Vec<f64>]) -> Result<f64> {
    let r = DistributionStats::from_samples(real)?;
    let g = DistributionStats::from_samples(generated)?;
    if r.mean.len() != g.mean.len() {
        return Err(Error::shape(
            "fid",
            format!("dim {}", r.mean.len()),
            format!("dim {}", g.mean.len()),
        ));
    }
    fid_from_stats(&r, &g)
}

pub fn fid_from_stats(r: &DistributionStats, g: &DistributionStats) -> Result<f64> {
    let mean_term: f64 = r
        .mean
        .iter()
        .zip(&g.mean)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let trace = |m: &Array2<f64>| (0..m.nrows()).map(|i| m[[i, i]]).sum::<f64>();

    // Tr((S_r S_g)^{1/2}) computed via the similar symmetric matrix
    // A S_g A with A = S_r^{1/2}.
    let cross_trace = {
        let attempt = |cov_r: &Array2<f64>, cov_g: &Array2<f64>| -> Result<f64> {
            let a = linalg::psd_sqrt(cov_r, 1e-6)?;
            let inner = a.dot(cov_g).dot(&a);
            // Symmetrize against accumulation drift before the second root.
            let inner = 0.5 * (&inner + &inner.t());
            let root = linalg::psd_sqrt(&inner, 1e-6)?;
            Ok(trace(&root))
        };
        match attempt(&r.covariance, &g.covariance) {
            Ok(v) => v,
            Err(_) => {
                // Stabilize with a small diagonal epsilon and retry once.
                let eps = 1e-6;
                let d = r.covariance.nrows();
                let mut cr = r.covariance.clone();
                let mut cg = g.covariance.clone();
                for i in 0..d {
                    cr[[i, i]] += eps;
                    cg[[i, i]] += eps;
                }
                attempt(&cr, &cg).map_err(|e| {
                    Error::Numerical(format!("fid: covariance square root failed even with epsilon: {e}"))
                })?
            }
        }
    };
    let value = mean_term + trace(&r.covariance) + trace(&g.covariance) - 2.0 * cross_trace;
    // Exact-zero distances can come out at tiny negative values.
    Ok(value.max(0.0))
}

/// `(1 + LPIPS) * (1 + FID)`.
pub fn artfid(lpips_value: f64, fid_value: f64) -> Result<f64> {
    if lpips_value < 0.0 || fid_value < 0.0 {
        return Err(Error::Config(format!(
            "artfid inputs must be non-negative, got lpips={lpips_value}, fid={fid_value}"
        )));
    }
    Ok((1.0 + lpips_value) * (1.0 + fid_value))
}

/// CFSD: softmax-normalized self-correlation rows of mid-level features,
/// scored by mean KL(S_c || S_cs) over all rows.
pub fn cfsd(
    content: &RgbImage,
    stylized: &RgbImage,
    extractor: &dyn FeatureExtractor,
    layer: &str,
) -> Result<f64> {
    if (content.height(), content.width()) != (stylized.height(), stylized.width()) {
        return Err(Error::shape(
            "cfsd",
            format!("{}x{}", content.height(), content.width()),
            format!("{}x{}", stylized.height(), stylized.width()),
        ));
    }
    let idx = extractor.layer_index(layer)?;
    let fc = extractor.extract(content)?.swap_remove(idx);
    let fcs = extractor.extract(stylized)?.swap_remove(idx);
    let sc = self_correlation_softmax(&fc);
    let scs = self_correlation_softmax(&fcs);
    let n = sc.nrows();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            let p = sc[[i, j]];
            let q = scs[[i, j]].max(1e-30);
            if p > 0.0 {
                total += p * (p / q).ln();
            }
        }
    }
    Ok((total / n as f64).max(0.0))
}

/// Rows are spatial locations; `M = F F^T` row-softmaxed into distributions.
pub fn self_correlation_softmax(features: &ndarray::Array3<f32>) -> Array2<f64> {
    let (c, h, w) = features.dim();
    let n = h * w;
    let mut rows = Array2::<f64>::zeros((n, c));
    for k in 0..c {
        for y in 0..h {
            for x in 0..w {
                rows[[y * w + x, k]] = features[[k, y, x]] as f64;
            }
        }
    }
    let m = rows.dot(&rows.t());
    let mut out = Array2::zeros((n, n));
    for i in 0..n {
        let maxv = (0..n).fold(f64::NEG_INFINITY, |a, j| a.max(m[[i, j]]));
        let mut sum = 0.0;
        for j in 0..n {
            let e = (m[[i, j]] - maxv).exp();
            out[[i, j]] = e;
            sum += e;
        }
        for j in 0..n {
            out[[i, j]] /= sum;
        }
    }
    out
}

/// One evaluated pair inside a report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairScore {
    pub content_id: String,
    pub style_id: String,
    pub lpips: f64,
    pub cfsd: f64,
}

/// Aggregate metric values plus provenance for one evaluation run.
/// Field order is the stable serialization order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub fid: f64,
    pub lpips: f64,
    pub artfid: f64,
    pub cfsd: f64,
    pub config_hash: String,
    pub dataset: Vec<String>,
    pub excluded_pairs: usize,
    pub pairs: Vec<PairScore>,
}

impl MetricReport {
    pub fn new(
        fid: f64,
        lpips: f64,
        cfsd: f64,
        config_hash: String,
        dataset: Vec<String>,
        excluded_pairs: usize,
        pairs: Vec<PairScore>,
    ) -> Result<Self> {
        let artfid = artfid(lpips, fid)?;
        Ok(Self {
            fid,
            lpips,
            artfid,
            cfsd,
            config_hash,
            dataset,
            excluded_pairs,
            pairs,
        })
    }

    /// The stored artfid must reconstruct from the stored lpips and fid.
    pub fn validate(&self) -> Result<()> {
        let expect = (1.0 + self.lpips) * (1.0 + self.fid);
        if (expect - self.artfid).abs() > 1e-9 * expect.max(1.0) {
            return Err(Error::Numerical(format!(
                "MetricReport artfid {} does not reconstruct from lpips/fid (expected {expect})",
                self.artfid
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use extractor::SeededConvExtractor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn noisy_image(seed: u64) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = RgbImage::zeros(32, 32);
        img.data_mut().mapv_inplace(|_| rng.gen::<f32>());
        img
    }

    #[test]
    fn lpips_zero_on_identical_and_symmetric() {
        let ex = SeededConvExtractor::builtin();
        let a = noisy_image(1);
        let b = noisy_image(2);
        assert_eq!(lpips(&a, &a, &ex).unwrap(), 0.0);
        let ab = lpips(&a, &b, &ex).unwrap();
        let ba = lpips(&b, &a, &ex).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        assert!(ab > 0.0);
    }

    #[test]
    fn lpips_rejects_resolution_mismatch() {
        let ex = SeededConvExtractor::builtin();
        let a = RgbImage::zeros(32, 32);
        let b = RgbImage::zeros(32, 40);
        assert!(lpips(&a, &b, &ex).is_err());
    }

    #[test]
    fn fid_identical_sets_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let set: Vec<Vec<f64>> = (0..16)
            .map(|_| (0..6).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let v = fid(&set, &set).unwrap();
        assert!(v <= 1e-6, "fid(A,A) = {v}");
    }

    #[test]
    fn fid_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let a: Vec<Vec<f64>> = (0..32)
            .map(|_| (0..5).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let b: Vec<Vec<f64>> = (0..32)
            .map(|_| (0..5).map(|_| rng.sample::<f64, _>(StandardNormal) + 0.5).collect())
            .collect();
        let ab = fid(&a, &b).unwrap();
        let ba = fid(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-6);
    }

    #[test]
    fn fid_matches_independent_denman_beavers_oracle_on_fixture() {
        // Oracle route: Denman-Beavers iteration for the square root of the
        // (symmetrized via congruence is NOT used here) product matrix.
        fn db_sqrt(m: &Array2<f64>) -> Array2<f64> {
            let n = m.nrows();
            let mut y = m.clone();
            let mut z = Array2::<f64>::eye(n);
            for _ in 0..100 {
                let y_inv = invert(&y);
                let z_inv = invert(&z);
                let y_next = 0.5 * (&y + &z_inv);
                let z_next = 0.5 * (&z + &y_inv);
                y = y_next;
                z = z_next;
            }
            y
        }
        fn invert(m: &Array2<f64>) -> Array2<f64> {
            // Gauss-Jordan, fine for the tiny fixture.
            let n = m.nrows();
            let mut a = m.clone();
            let mut inv = Array2::<f64>::eye(n);
            for col in 0..n {
                let mut pivot = col;
                for r in col + 1..n {
                    if a[[r, col]].abs() > a[[pivot, col]].abs() {
                        pivot = r;
                    }
                }
                for c in 0..n {
                    let tmp = a[[col, c]];
                    a[[col, c]] = a[[pivot, c]];
                    a[[pivot, c]] = tmp;
                    let tmp = inv[[col, c]];
                    inv[[col, c]] = inv[[pivot, c]];
                    inv[[pivot, c]] = tmp;
                }
                let p = a[[col, col]];
                for c in 0..n {
                    a[[col, c]] /= p;
                    inv[[col, c]] /= p;
                }
                for r in 0..n {
                    if r != col {
                        let f = a[[r, col]];
                        for c in 0..n {
                            a[[r, c]] -= f * a[[col, c]];
                            inv[[r, c]] -= f * inv[[col, c]];
                        }
                    }
                }
            }
            inv
        }

        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let a: Vec<Vec<f64>> = (0..16)
            .map(|_| (0..4).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let b: Vec<Vec<f64>> = (0..16)
            .map(|_| {
                (0..4)
                    .map(|_| 0.7 * rng.sample::<f64, _>(StandardNormal) + 0.3)
                    .collect()
            })
            .collect();
        let implementation = fid(&a, &b).unwrap();

        let sr = DistributionStats::from_samples(&a).unwrap();
        let sg = DistributionStats::from_samples(&b).unwrap();
        let mean_term: f64 = sr
            .mean
            .iter()
            .zip(&sg.mean)
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let product = sr.covariance.dot(&sg.covariance);
        let root = db_sqrt(&product);
        let tr = |m: &Array2<f64>| (0..m.nrows()).map(|i| m[[i, i]]).sum::<f64>();
        let oracle = mean_term + tr(&sr.covariance) + tr(&sg.covariance) - 2.0 * tr(&root);
        assert!(
            (implementation - oracle).abs() < 1e-6 * oracle.abs().max(1.0),
            "implementation {implementation} vs oracle {oracle}"
        );
    }

    #[test]
    fn fid_rejects_single_sample_sets() {
        let a = vec![vec![1.0, 2.0]];
        let b = vec![vec![0.0, 0.0], vec![1.0, 1.0]];
        assert!(fid(&a, &b).is_err());
    }

    #[test]
    fn artfid_cases() {
        assert!((artfid(0.0, 0.0).unwrap() - 1.0).abs() < 1e-12);
        assert!((artfid(1.0, 1.0).unwrap() - 4.0).abs() < 1e-12);
        assert!(artfid(-0.1, 1.0).is_err());
    }

    #[test]
    fn cfsd_zero_on_identical_and_nonnegative() {
        let ex = SeededConvExtractor::builtin();
        let a = noisy_image(21);
        let b = noisy_image(22);
        assert!(cfsd(&a, &a, &ex, "conv3").unwrap() <= 1e-12);
        assert!(cfsd(&a, &b, &ex, "conv3").unwrap() >= 0.0);
    }

    #[test]
    fn cfsd_matches_hand_computed_toy() {
        // 1-channel 1x2 features -> 2 rows. F_c = [1, 0], F_cs = [0, 1].
        // M_c = [[1,0],[0,0]], rows softmaxed; same for cs with swapped rows.
        let fc = ndarray::Array3::from_shape_vec((1, 1, 2), vec![1.0, 0.0]).unwrap();
        let sc = self_correlation_softmax(&fc);
        let e = std::f64::consts::E;
        // Row 0: softmax([1, 0]) = [e/(e+1), 1/(e+1)]; row 1: softmax([0, 0]).
        assert!((sc[[0, 0]] - e / (e + 1.0)).abs() < 1e-12);
        assert!((sc[[0, 1]] - 1.0 / (e + 1.0)).abs() < 1e-12);
        assert!((sc[[1, 0]] - 0.5).abs() < 1e-12);
        assert!((sc[[1, 1]] - 0.5).abs() < 1e-12);
        // Rows sum to one.
        for i in 0..2 {
            let s: f64 = (0..2).map(|j| sc[[i, j]]).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn report_validates_its_own_artfid() {
        let r = MetricReport::new(2.0, 0.5, 0.1, "h".into(), vec![], 0, vec![]).unwrap();
        assert!((r.artfid - 4.5).abs() < 1e-12);
        r.validate().unwrap();
        let mut broken = r.clone();
        broken.artfid = 5.0;
        assert!(broken.validate().is_err());
    }
}
