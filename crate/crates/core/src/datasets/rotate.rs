use crate::datasets::{subsample_per_class, Domain, DomainDataset};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// The six Rotated MNIST domains M0..M75.
pub const ROTATED_MNIST_ANGLES: [f64; 6] = [0.0, 15.0, 30.0, 45.0, 60.0, 75.0];

pub(crate) fn angle_label(angle: f64) -> String {
    if angle.fract() == 0.0 {
        format!("M{}", angle as i64)
    } else {
        format!("M{angle}")
    }
}

/// Rotate one `channels x side x side` image clockwise about its center.
///
/// Bilinear resampling; samples falling outside the canvas read as zero.
pub fn rotate_image(src: &[f32], channels: usize, side: usize, angle_deg: f64) -> Vec<f32> {
    let plane = side * side;
    debug_assert_eq!(src.len(), channels * plane);
    if angle_deg == 0.0 {
        return src.to_vec();
    }
    let theta = angle_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let center = (side as f64 - 1.0) / 2.0;
    let mut out = vec![0.0f32; src.len()];
    for r in 0..side {
        for c in 0..side {
            // Inverse map: output pixel (x', y') came from R(-theta)(x', y'),
            // with y pointing down so positive theta turns clockwise on screen.
            let xo = c as f64 - center;
            let yo = r as f64 - center;
            let xs = xo * cos + yo * sin + center;
            let ys = -xo * sin + yo * cos + center;
            let x0 = xs.floor();
            let y0 = ys.floor();
            let fx = xs - x0;
            let fy = ys - y0;
            let (x0, y0) = (x0 as i64, y0 as i64);
            for ch in 0..channels {
                let img = &src[ch * plane..(ch + 1) * plane];
                let at = |y: i64, x: i64| -> f64 {
                    if y < 0 || x < 0 || y >= side as i64 || x >= side as i64 {
                        0.0
                    } else {
                        img[y as usize * side + x as usize] as f64
                    }
                };
                let v = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1))
                    + fy * ((1.0 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
                out[ch * plane + r * side + c] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    out
}

/// One rotated copy of `base` per angle, named `M{angle}`; labels are kept.
pub fn generate_rotated_domains(base: &DomainDataset, angles: &[f64]) -> Result<Vec<DomainDataset>> {
    if angles.is_empty() {
        return Err(Error::invalid("angle list is empty"));
    }
    let [channels, h, w] = base.image_shape();
    if h != w {
        return Err(Error::invalid(format!("images must be square, got {h}x{w}")));
    }
    let per = channels * h * w;
    angles
        .iter()
        .map(|&angle| {
            let mut data = Vec::with_capacity(base.images().len());
            for img in base.images().data().chunks_exact(per) {
                data.extend(rotate_image(img, channels, h, angle));
            }
            DomainDataset::new(
                angle_label(angle),
                Tensor::from_vec(base.images().shape(), data)?,
                base.labels().to_vec(),
                base.num_classes(),
                base.split(),
            )
        })
        .collect()
}

/// Rotated MNIST domains: `per_class` training digits per class are drawn once
/// from `base_train` and rotated into every domain; each domain's test split is
/// the rotated `base_test`.
pub fn rotated_mnist(
    base_train: &DomainDataset,
    base_test: &DomainDataset,
    angles: &[f64],
    per_class: usize,
    seed: u64,
) -> Result<Vec<Domain>> {
    let train = subsample_per_class(base_train, per_class, seed)?;
    let trains = generate_rotated_domains(&train, angles)?;
    let tests = generate_rotated_domains(base_test, angles)?;
    trains
        .into_iter()
        .zip(tests)
        .zip(angles)
        .map(|((tr, te), &angle)| {
            let mut d = Domain::new(tr, te)?;
            d.angle = Some(angle);
            d.seed = Some(seed);
            Ok(d)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::Split;
    use proptest::prelude::*;

    fn blob(side: usize, cy: f64, cx: f64, sigma: f64) -> Vec<f32> {
        let mut img = vec![0.0f32; side * side];
        for r in 0..side {
            for c in 0..side {
                let d2 = (r as f64 - cy).powi(2) + (c as f64 - cx).powi(2);
                img[r * side + c] = (-d2 / (2.0 * sigma * sigma)).exp() as f32;
            }
        }
        img
    }

    #[test]
    fn zero_angle_is_identity() {
        let img: Vec<f32> = (0..49).map(|i| (i as f32 * 0.13).fract()).collect();
        assert_eq!(rotate_image(&img, 1, 7, 0.0), img);
    }

    #[test]
    fn quarter_turn_moves_pixel_clockwise() {
        // Oracle: clockwise quarter turn about the center of an n x n grid
        // sends (r, c) to (c, n - 1 - r).
        let n = 5;
        for r in 0..n {
            for c in 0..n {
                let mut img = vec![0.0f32; n * n];
                img[r * n + c] = 1.0;
                let out = rotate_image(&img, 1, n, 90.0);
                let (rr, cc) = (c, n - 1 - r);
                for i in 0..n * n {
                    let want = if i == rr * n + cc { 1.0 } else { 0.0 };
                    assert!((out[i] - want).abs() < 1e-6, "({r},{c}) -> index {i}");
                }
            }
        }
    }

    #[test]
    fn rotation_names_and_labels() {
        let n = 3;
        let ds = DomainDataset::new(
            "MNIST",
            Tensor::from_vec(&[n, 1, 4, 4], vec![0.5; n * 16]).unwrap(),
            vec![0, 1, 2],
            3,
            Split::Train,
        )
        .unwrap();
        let out = generate_rotated_domains(&ds, &ROTATED_MNIST_ANGLES).unwrap();
        let ids: Vec<_> = out.iter().map(|d| d.domain_id().to_string()).collect();
        assert_eq!(ids, ["M0", "M15", "M30", "M45", "M60", "M75"]);
        assert!(out.iter().all(|d| d.labels() == ds.labels()));
        assert_eq!(out[0], ds.clone().with_domain_id("M0"));
        assert!(generate_rotated_domains(&ds, &[]).is_err());
    }

    #[test]
    fn rejects_non_square_images() {
        let ds = DomainDataset::new(
            "x",
            Tensor::from_vec(&[1, 1, 2, 3], vec![0.0; 6]).unwrap(),
            vec![0],
            2,
            Split::Train,
        )
        .unwrap();
        assert!(generate_rotated_domains(&ds, &[15.0]).is_err());
    }

    proptest! {
        #[test]
        fn rotate_back_and_forth_is_close(
            angle in -75.0f64..75.0,
            cy in 10.0f64..18.0,
            cx in 10.0f64..18.0,
            sigma in 2.0f64..4.0,
        ) {
            let img = blob(28, cy, cx, sigma);
            let back = rotate_image(&rotate_image(&img, 1, 28, angle), 1, 28, -angle);
            let err = img.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
            prop_assert!(err <= 0.1, "max abs error {err}");
        }

        #[test]
        fn output_stays_in_unit_range(angle in -180.0f64..180.0, seed in 0u64..1000) {
            let img: Vec<f32> = (0..64).map(|i| ((i as u64 * 2654435761 + seed) % 1000) as f32 / 999.0).collect();
            let out = rotate_image(&img, 1, 8, angle);
            prop_assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
