//! Synthetic test images with analytic ground truth, and the Dice score.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::energy::RegionLabels;
use crate::imageio::GreyImage;

/// Disk of radius 16 centred at (32, 32) on a 64×64 image: 50 inside, 200 outside.
pub fn disk_image() -> GreyImage {
    let truth = disk_mask();
    GreyImage::from_fn(64, 64, |i, j| {
        if truth.interior[j * 64 + i] {
            50.0
        } else {
            200.0
        }
    })
    .expect("valid synthetic image")
}

/// Pixels whose centre lies strictly inside the disk.
pub fn disk_mask() -> RegionLabels {
    RegionLabels::from_fn(64, 64, |i, j| {
        let (x, y) = (i as f64 + 0.5 - 32.0, j as f64 + 0.5 - 32.0);
        x * x + y * y < 16.0 * 16.0
    })
}

/// Inner square `[16, 48)²` of pixels.
pub fn square_mask() -> RegionLabels {
    RegionLabels::from_fn(64, 64, |i, j| {
        (16..48).contains(&i) && (16..48).contains(&j)
    })
}

/// Mean-177 image whose inner square carries gaussian fluctuations of
/// variance 0.4 and the background of variance 0.05 (on the `[0, 1]` scale),
/// clipped to `[0, 255]`.
pub fn variance_square_image(seed: u64) -> GreyImage {
    let truth = square_mask();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inner = Normal::new(0.0, 0.4f64.sqrt()).expect("valid deviation");
    let outer = Normal::new(0.0, 0.05f64.sqrt()).expect("valid deviation");
    let data = (0..64 * 64)
        .map(|idx| {
            let n = if truth.interior[idx] {
                inner.sample(&mut rng)
            } else {
                outer.sample(&mut rng)
            };
            (177.0 / 255.0 + n).clamp(0.0, 1.0) * 255.0
        })
        .collect();
    GreyImage::new(64, 64, data).expect("valid synthetic image")
}

/// `2|A ∩ B| / (|A| + |B|)` over interior labels; 1 when both are empty.
pub fn dice(a: &RegionLabels, b: &RegionLabels) -> f64 {
    assert_eq!(
        a.interior.len(),
        b.interior.len(),
        "label grids differ in size"
    );
    let (mut both, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.interior.iter().zip(&b.interior) {
        both += (x && y) as usize;
        na += x as usize;
        nb += y as usize;
    }
    if na + nb == 0 {
        1.0
    } else {
        2.0 * both as f64 / (na + nb) as f64
    }
}

/// Labels from a mask image: interior where the grey level exceeds 127.5.
pub fn labels_from_mask(mask: &GreyImage) -> RegionLabels {
    RegionLabels::from_fn(mask.width(), mask.height(), |i, j| mask.get(i, j) > 127.5)
}

/// Mask image with interior 255 and exterior 0.
pub fn mask_image(labels: &RegionLabels) -> GreyImage {
    GreyImage::new(
        labels.width,
        labels.height,
        labels
            .interior
            .iter()
            .map(|&b| if b { 255.0 } else { 0.0 })
            .collect(),
    )
    .expect("labels cover at least 2x2 pixels")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dice_values() {
        let a = disk_mask();
        assert_eq!(dice(&a, &a), 1.0);
        let none = RegionLabels::from_fn(64, 64, |_, _| false);
        assert_eq!(dice(&a, &none), 0.0);
        assert_eq!(dice(&none, &none), 1.0);
    }

    #[test]
    fn variance_square_statistics() {
        let img = variance_square_image(5);
        let m = square_mask();
        let (mut si, mut so, mut ni, mut no) = (0.0, 0.0, 0.0, 0.0);
        for (idx, &u) in img.data().iter().enumerate() {
            if m.interior[idx] {
                si += u;
                ni += 1.0;
            } else {
                so += u;
                no += 1.0;
            }
        }
        // clipping pulls the wide inner distribution down; the background stays near 177
        assert!((so / no - 177.0).abs() < 3.0);
        assert!(si / ni < so / no);
    }
}
