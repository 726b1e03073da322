//! Structural (Sobel) content loss and Gram-matrix style loss for the
//! fitting cycle's stopping rule.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

/// Per-pixel gradient magnitudes, all entries non-negative.
#[derive(Debug, Clone)]
pub struct EdgeMap {
    pub data: Array2<f32>,
}

/// Channel-by-channel inner product matrix of flattened features.
#[derive(Debug, Clone)]
pub struct GramMatrix {
    pub data: Array2<f64>,
    /// Divisor applied to the raw inner products (`k * h * w`, or 1.0 when
    /// normalization is disabled).
    pub normalization: f64,
}

const SOBEL_X: [[f32; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f32; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

// Reflect index for borders, e.g. -1 -> 1 and n -> n-2.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 { -i } else if i >= n { 2 * n - 2 - i } else { i };
    r.clamp(0, n - 1) as usize
}

/// Gradient magnitude `sqrt(Gx^2 + Gy^2)` with the standard 3x3 Sobel
/// kernels and reflect-padded borders.
pub fn sobel_edges(image: &Array2<f32>) -> Result<EdgeMap> {
    let (h, w) = image.dim();
    if h < 3 || w < 3 {
        return Err(Error::shape("sobel_edges", "at least 3x3", format!("{h}x{w}")));
    }
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut gx = 0.0f32;
            let mut gy = 0.0f32;
            for ky in 0..3 {
                for kx in 0..3 {
                    let sy = reflect(y as isize + ky as isize - 1, h);
                    let sx = reflect(x as isize + kx as isize - 1, w);
                    let v = image[[sy, sx]];
                    gx += SOBEL_X[ky][kx] * v;
                    gy += SOBEL_Y[ky][kx] * v;
                }
            }
            out[[y, x]] = (gx * gx + gy * gy).sqrt();
        }
    }
    Ok(EdgeMap { data: out })
}

/// Mean absolute difference between the edge maps of the two images.
pub fn content_loss(generated: &Array2<f32>, content: &Array2<f32>) -> Result<f64> {
    if generated.dim() != content.dim() {
        return Err(Error::shape(
            "content_loss",
            format!("{:?}", content.dim()),
            format!("{:?}", generated.dim()),
        ));
    }
    let eg = sobel_edges(generated)?;
    let ec = sobel_edges(content)?;
    let n = eg.data.len() as f64;
    let sum: f64 = eg
        .data
        .iter()
        .zip(ec.data.iter())
        .map(|(a, b)| (a - b).abs() as f64)
        .sum();
    Ok(sum / n)
}

/// `G = F F^T / (k h w)` over `(k, h*w)`-flattened features.
pub fn gram_matrix(features: &Array3<f32>, normalize: bool) -> Result<GramMatrix> {
    let (k, h, w) = features.dim();
    if k == 0 || h == 0 || w == 0 {
        return Err(Error::EmptyInput("gram_matrix: empty feature block".into()));
    }
    let n = h * w;
    let divisor = if normalize { (k * n) as f64 } else { 1.0 };
    let flat: Vec<&[f32]> = (0..k)
        .map(|c| {
            features
                .index_axis(ndarray::Axis(0), c)
                .to_slice()
                .expect("contiguous feature block")
        })
        .collect();
    let mut gram = Array2::<f64>::zeros((k, k));
    for i in 0..k {
        for j in i..k {
            let dot: f64 = flat[i]
                .iter()
                .zip(flat[j].iter())
                .map(|(a, b)| (*a as f64) * (*b as f64))
                .sum();
            let v = dot / divisor;
            gram[[i, j]] = v;
            gram[[j, i]] = v;
        }
    }
    Ok(GramMatrix {
        data: gram,
        normalization: divisor,
    })
}

/// Sum over layers of the squared Frobenius distance between Gram matrices.
pub fn style_loss(
    generated_layers: &[Array3<f32>],
    style_layers: &[Array3<f32>],
    normalize: bool,
) -> Result<f64> {
    if generated_layers.len() != style_layers.len() {
        return Err(Error::shape(
            "style_loss: layer sets",
            format!("{} layers", style_layers.len()),
            format!("{} layers", generated_layers.len()),
        ));
    }
    let mut total = 0.0;
    for (g, s) in generated_layers.iter().zip(style_layers) {
        if g.dim().0 != s.dim().0 {
            return Err(Error::shape(
                "style_loss: channel counts",
                format!("{}", s.dim().0),
                format!("{}", g.dim().0),
            ));
        }
        let gg = gram_matrix(g, normalize)?;
        let gs = gram_matrix(s, normalize)?;
        total += gg
            .data
            .iter()
            .zip(gs.data.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // Independent convolution oracle: explicit 2D correlation with reflect
    // borders, written without reusing sobel_edges internals.
    fn conv_oracle(image: &Array2<f32>, kernel: &[[f32; 3]; 3]) -> Array2<f32> {
        let (h, w) = image.dim();
        let mut out = Array2::zeros((h, w));
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut acc = 0.0;
                for dy in -1..=1isize {
                    for dx in -1..=1isize {
                        let mut sy = y + dy;
                        let mut sx = x + dx;
                        if sy < 0 {
                            sy = -sy;
                        }
                        if sy >= h as isize {
                            sy = 2 * (h as isize) - 2 - sy;
                        }
                        if sx < 0 {
                            sx = -sx;
                        }
                        if sx >= w as isize {
                            sx = 2 * (w as isize) - 2 - sx;
                        }
                        acc += kernel[(dy + 1) as usize][(dx + 1) as usize]
                            * image[[sy as usize, sx as usize]];
                    }
                }
                out[[y as usize, x as usize]] = acc;
            }
        }
        out
    }

    fn step_edge_5x5() -> Array2<f32> {
        // Columns 0..=1 are 0, columns 2..=4 are 1.
        let mut img = Array2::zeros((5, 5));
        for y in 0..5 {
            for x in 2..5 {
                img[[y, x]] = 1.0;
            }
        }
        img
    }

    #[test]
    fn constant_image_has_zero_edges() {
        let img = Array2::from_elem((7, 9), 0.42f32);
        let e = sobel_edges(&img).unwrap();
        assert!(e.data.iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn step_edge_matches_hand_convolution() {
        let img = step_edge_5x5();
        let e = sobel_edges(&img).unwrap();
        let gx = conv_oracle(&img, &SOBEL_X);
        let gy = conv_oracle(&img, &SOBEL_Y);
        for y in 0..5 {
            for x in 0..5 {
                let expect = (gx[[y, x]].powi(2) + gy[[y, x]].powi(2)).sqrt();
                assert!((e.data[[y, x]] - expect).abs() < 1e-6);
            }
        }
        // The transition column sees the full kernel weight: 1+2+1 = 4.
        for y in 0..5 {
            assert!((e.data[[y, 2]] - 4.0).abs() < 1e-6);
            assert!((e.data[[y, 1]] - 4.0).abs() < 1e-6);
        }
        assert!(e.data[[2, 0]].abs() < 1e-6);
        assert!(e.data[[2, 4]].abs() < 1e-6);
    }

    #[test]
    fn sobel_magnitude_is_transpose_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let img = Array2::from_shape_fn((6, 9), |_| rng.gen::<f32>());
        let e = sobel_edges(&img).unwrap();
        let et = sobel_edges(&img.t().to_owned()).unwrap();
        for y in 0..6 {
            for x in 0..9 {
                assert!((e.data[[y, x]] - et.data[[x, y]]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn sobel_commutes_with_horizontal_flip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let img = Array2::from_shape_fn((8, 8), |_| rng.gen::<f32>());
        let flipped = Array2::from_shape_fn((8, 8), |(y, x)| img[[y, 7 - x]]);
        let e = sobel_edges(&img).unwrap();
        let ef = sobel_edges(&flipped).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                assert!((e.data[[y, x]] - ef.data[[y, 7 - x]]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn sobel_rejects_tiny_images() {
        let img = Array2::zeros((2, 5));
        assert!(sobel_edges(&img).is_err());
    }

    #[test]
    fn content_loss_zero_on_identical_and_symmetric() {
        let img = step_edge_5x5();
        assert_eq!(content_loss(&img, &img).unwrap(), 0.0);
        let flat = Array2::zeros((5, 5));
        let ab = content_loss(&img, &flat).unwrap();
        let ba = content_loss(&flat, &img).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        // Against a constant image the loss is the mean of the step image's
        // own edge map.
        let mean_edge: f64 = sobel_edges(&img)
            .unwrap()
            .data
            .iter()
            .map(|v| *v as f64)
            .sum::<f64>()
            / 25.0;
        assert!((ab - mean_edge).abs() < 1e-9);
    }

    #[test]
    fn content_loss_rejects_mismatched_resolutions() {
        let a = Array2::zeros((5, 5));
        let b = Array2::zeros((5, 6));
        assert!(content_loss(&a, &b).is_err());
    }

    #[test]
    fn gram_of_zero_features_is_zero() {
        let f = Array3::zeros((3, 2, 2));
        let g = gram_matrix(&f, true).unwrap();
        assert!(g.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gram_single_channel_hand_value() {
        // f = [1, 2]: <f, f> = 5, divisor k*h*w = 2 -> 2.5.
        let f = Array3::from_shape_vec((1, 1, 2), vec![1.0, 2.0]).unwrap();
        let g = gram_matrix(&f, true).unwrap();
        assert!((g.data[[0, 0]] - 2.5).abs() < 1e-12);
        let raw = gram_matrix(&f, false).unwrap();
        assert!((raw.data[[0, 0]] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn gram_orthogonal_channels_have_zero_off_diagonal() {
        let f = Array3::from_shape_vec((2, 1, 2), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let g = gram_matrix(&f, true).unwrap();
        assert_eq!(g.data[[0, 1]], 0.0);
        assert_eq!(g.data[[1, 0]], 0.0);
    }

    #[test]
    fn gram_is_symmetric_and_psd_on_random_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let k = rng.gen_range(1..6);
            let h = rng.gen_range(1..5);
            let w = rng.gen_range(1..5);
            let f = Array3::from_shape_fn((k, h, w), |_| rng.gen::<f32>() - 0.5);
            let g = gram_matrix(&f, true).unwrap();
            for i in 0..k {
                for j in 0..k {
                    assert!((g.data[[i, j]] - g.data[[j, i]]).abs() < 1e-9);
                }
            }
            let eig = crate::metrics::linalg::symmetric_eigenvalues(&g.data).unwrap();
            assert!(eig.iter().all(|&l| l >= -1e-7));
        }
    }

    #[test]
    fn style_loss_is_spatial_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = 3;
        let (h, w) = (4, 4);
        let gen = Array3::from_shape_fn((k, h, w), |_| rng.gen::<f32>());
        let style = Array3::from_shape_fn((k, h, w), |_| rng.gen::<f32>());
        let base = style_loss(&[gen.clone()], &[style.clone()], true).unwrap();

        // Permute spatial positions of the generated features (same
        // permutation across channels).
        let mut perm: Vec<usize> = (0..h * w).collect();
        for i in (1..perm.len()).rev() {
            let j = rng.gen_range(0..=i);
            perm.swap(i, j);
        }
        let permuted = Array3::from_shape_fn((k, h, w), |(c, y, x)| {
            let p = perm[y * w + x];
            gen[[c, p / w, p % w]]
        });
        let after = style_loss(&[permuted], &[style], true).unwrap();
        assert!((base - after).abs() < 1e-9);
    }

    #[test]
    fn style_loss_single_layer_hand_value() {
        // 1-channel, 2-pixel features: G_gen = (1*1+2*2)/2 = 2.5,
        // G_style = (3*3+4*4)/2 = 12.5, loss = (2.5-12.5)^2 = 100.
        let gen = Array3::from_shape_vec((1, 1, 2), vec![1.0, 2.0]).unwrap();
        let sty = Array3::from_shape_vec((1, 1, 2), vec![3.0, 4.0]).unwrap();
        let l = style_loss(&[gen], &[sty], true).unwrap();
        assert!((l - 100.0).abs() < 1e-9);
    }

    #[test]
    fn style_loss_zero_on_identical_sets() {
        let f = Array3::from_elem((2, 2, 2), 0.5f32);
        assert_eq!(style_loss(&[f.clone()], &[f], true).unwrap(), 0.0);
    }

    #[test]
    fn style_loss_rejects_layer_mismatch() {
        let f = Array3::<f32>::zeros((2, 2, 2));
        assert!(style_loss(&[f.clone(), f.clone()], &[f], true).is_err());
    }
}
