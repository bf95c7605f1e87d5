//! Data-fidelity models: kernel-density region likelihoods and the
//! region-scalable fitting energy, with their Step A source terms.

use rayon::prelude::*;

use crate::fem::{gradient_p0, ScalarFieldP1};
use crate::imageio::{bilinear, EdgeDetector, GreyImage};
use crate::mesh::TriMesh;
use crate::tensor::{norm, Vec2};

pub const BINS: usize = 256;

/// `1/2 + arctan(φ/ε)/π`
pub fn heaviside_eps(phi: f64, eps: f64) -> f64 {
    0.5 + (phi / eps).atan() / std::f64::consts::PI
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Region {
    Interior,
    Exterior,
}

/// Per-pixel real values on the image grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelGrid {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl PixelGrid {
    pub fn at(&self, p: Vec2) -> f64 {
        bilinear(&self.values, self.width, self.height, p)
    }

    /// Value of the pixel containing `p` (clamped to the grid).
    pub fn pixel_at(&self, p: Vec2) -> f64 {
        let i = (p[0].floor().max(0.0) as usize).min(self.width - 1);
        let j = (p[1].floor().max(0.0) as usize).min(self.height - 1);
        self.values[j * self.width + i]
    }

    /// Per-element values: the pixel containing each element centroid.
    pub fn sample_centroids(&self, mesh: &TriMesh) -> Vec<f64> {
        (0..mesh.n_elements())
            .map(|k| self.pixel_at(mesh.centroid(k)))
            .collect()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Interior/exterior label per pixel, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionLabels {
    pub width: usize,
    pub height: usize,
    pub interior: Vec<bool>,
}

impl RegionLabels {
    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut interior = Vec::with_capacity(width * height);
        for j in 0..height {
            for i in 0..width {
                interior.push(f(i, j));
            }
        }
        RegionLabels {
            width,
            height,
            interior,
        }
    }

    pub fn is(&self, idx: usize, region: Region) -> bool {
        self.interior[idx] == (region == Region::Interior)
    }

    pub fn count(&self, region: Region) -> usize {
        (0..self.interior.len())
            .filter(|&i| self.is(i, region))
            .count()
    }
}

/// Interior iff `φ > 0` at the pixel centre.
pub fn classify_pixels(mesh: &TriMesh, phi: &ScalarFieldP1, img: &GreyImage) -> RegionLabels {
    let (w, h) = (img.width(), img.height());
    let interior = (0..w * h)
        .into_par_iter()
        .map(|idx| {
            let p = img.pixel_center(idx);
            phi.eval(mesh, p).map(|v| v > 0.0).unwrap_or(false)
        })
        .collect();
    RegionLabels {
        width: w,
        height: h,
        interior,
    }
}

/// Smoothed intensity histogram of one region with its evaluation floor.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionPdf {
    pub density: Vec<f64>,
    pub zeta: f64,
    pub region: Region,
}

impl RegionPdf {
    /// `max(density(κ), ζ)` with `κ` the nearest grey level.
    pub fn eval(&self, u: f64) -> f64 {
        self.density[bin(u)].max(self.zeta)
    }
}

#[inline]
fn bin(u: f64) -> usize {
    (u.round().clamp(0.0, 255.0)) as usize
}

pub fn histogram(img: &GreyImage, labels: &RegionLabels, region: Region) -> Vec<f64> {
    let mut hist = vec![0.0; BINS];
    for (idx, &u) in img.data().iter().enumerate() {
        if labels.is(idx, region) {
            hist[bin(u)] += 1.0;
        }
    }
    hist
}

pub fn estimate_pdf(
    img: &GreyImage,
    labels: &RegionLabels,
    region: Region,
    tau: f64,
    zeta: f64,
) -> RegionPdf {
    let hist = histogram(img, labels, region);
    let kernel: Vec<f64> = (0..BINS)
        .map(|t| {
            let t = t as f64;
            (-t * t / (2.0 * tau * tau)).exp() / ((2.0 * std::f64::consts::PI).sqrt() * tau)
        })
        .collect();
    let mut density: Vec<f64> = (0..BINS)
        .map(|kappa| {
            hist.iter()
                .enumerate()
                .filter(|(_, &c)| c > 0.0)
                .map(|(xi, &c)| c * kernel[kappa.abs_diff(xi)])
                .sum()
        })
        .collect();
    let mass: f64 = density.iter().sum();
    if mass > 0.0 && mass.is_finite() {
        density.iter_mut().for_each(|d| *d /= mass);
    } else {
        density = vec![1.0 / BINS as f64; BINS];
    }
    RegionPdf {
        density,
        zeta,
        region,
    }
}

/// `s = −log p̃_I(U) + log p̃_E(U)` per pixel.
pub fn source_bayes(img: &GreyImage, pdf_i: &RegionPdf, pdf_e: &RegionPdf) -> PixelGrid {
    PixelGrid {
        width: img.width(),
        height: img.height(),
        values: img
            .data()
            .iter()
            .map(|&u| -pdf_i.eval(u).ln() + pdf_e.eval(u).ln())
            .collect(),
    }
}

/// `|p̃_I(U) − p̃_E(U)|` per pixel.
pub fn delta_p(img: &GreyImage, pdf_i: &RegionPdf, pdf_e: &RegionPdf) -> PixelGrid {
    PixelGrid {
        width: img.width(),
        height: img.height(),
        values: img
            .data()
            .iter()
            .map(|&u| (pdf_i.eval(u) - pdf_e.eval(u)).abs())
            .collect(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FunctionalValue {
    pub data: f64,
    pub tv: f64,
}

impl FunctionalValue {
    pub fn total(&self) -> f64 {
        self.data + self.tv
    }
}

/// Region-restricted negative log-likelihood plus `ν Σ_K |K| g(c_K) ‖∇φ‖_K`.
pub fn functional_bayes(
    mesh: &TriMesh,
    phi: &ScalarFieldP1,
    img: &GreyImage,
    pdf_i: &RegionPdf,
    pdf_e: &RegionPdf,
    nu: f64,
    g: &EdgeDetector,
) -> FunctionalValue {
    let labels = classify_pixels(mesh, phi, img);
    let data = img
        .data()
        .iter()
        .zip(&labels.interior)
        .map(|(&u, &inside)| {
            if inside {
                -pdf_i.eval(u).ln()
            } else {
                -pdf_e.eval(u).ln()
            }
        })
        .sum();
    FunctionalValue {
        data,
        tv: nu * weighted_tv(mesh, phi, g),
    }
}

/// `Σ_K |K| g(c_K) ‖∇φ‖_K`
pub fn weighted_tv(mesh: &TriMesh, phi: &ScalarFieldP1, g: &EdgeDetector) -> f64 {
    let grad = gradient_p0(mesh, phi);
    (0..mesh.n_elements())
        .map(|k| mesh.area(k) * g.at(mesh.centroid(k)) * norm(grad.values[k]))
        .sum()
}

/// Local fitting fields of the region-scalable model.
#[derive(Clone, Debug, PartialEq)]
pub struct RsfeFields {
    pub width: usize,
    pub height: usize,
    pub f_i: Vec<f64>,
    pub f_e: Vec<f64>,
    pub e_i: Vec<f64>,
    pub e_e: Vec<f64>,
    pub sigma: f64,
}

/// Normalised 1D Gaussian taps over `[−⌈4σ⌉, ⌈4σ⌉]`.
pub fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let r = (4.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-r..=r)
        .map(|t| (-(t * t) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Separable convolution with zero extension outside the image.
fn convolve(values: &[f64], width: usize, height: usize, taps: &[f64]) -> Vec<f64> {
    let r = (taps.len() / 2) as i64;
    let mut rows = vec![0.0; width * height];
    rows.par_chunks_mut(width).enumerate().for_each(|(j, out)| {
        let src = &values[j * width..(j + 1) * width];
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (t, &w) in taps.iter().enumerate() {
                let x = i as i64 + t as i64 - r;
                if x >= 0 && (x as usize) < width {
                    acc += w * src[x as usize];
                }
            }
            *o = acc;
        }
    });
    let mut out = vec![0.0; width * height];
    out.par_chunks_mut(width).enumerate().for_each(|(j, o)| {
        for (t, &w) in taps.iter().enumerate() {
            let y = j as i64 + t as i64 - r;
            if y >= 0 && (y as usize) < height {
                let src = &rows[y as usize * width..(y as usize + 1) * width];
                for (oi, s) in o.iter_mut().zip(src) {
                    *oi += w * s;
                }
            }
        }
    });
    out
}

pub fn rsfe_fields(img: &GreyImage, labels: &RegionLabels, sigma: f64) -> RsfeFields {
    let (w, h) = (img.width(), img.height());
    let taps = gaussian_taps(sigma);
    let u = img.data();
    let ones = vec![1.0; w * h];
    let u2: Vec<f64> = u.iter().map(|v| v * v).collect();
    let m0 = convolve(&ones, w, h, &taps);
    let m1 = convolve(u, w, h, &taps);
    let m2 = convolve(&u2, w, h, &taps);
    let fit = |region: Region| {
        let chi: Vec<f64> = (0..w * h)
            .map(|i| if labels.is(i, region) { 1.0 } else { 0.0 })
            .collect();
        let chi_u: Vec<f64> = chi.iter().zip(u).map(|(c, v)| c * v).collect();
        let den = convolve(&chi, w, h, &taps);
        let num = convolve(&chi_u, w, h, &taps);
        let f: Vec<f64> = (0..w * h)
            .map(|i| {
                if den[i] > 1e-12 {
                    num[i] / den[i]
                } else {
                    m1[i] / m0[i]
                }
            })
            .collect();
        let e: Vec<f64> = (0..w * h)
            .map(|i| (m2[i] - 2.0 * f[i] * m1[i] + f[i] * f[i] * m0[i]).max(0.0))
            .collect();
        (f, e)
    };
    let (f_i, e_i) = fit(Region::Interior);
    let (f_e, e_e) = fit(Region::Exterior);
    RsfeFields {
        width: w,
        height: h,
        f_i,
        f_e,
        e_i,
        e_e,
        sigma,
    }
}

/// `μ_I e_I − μ_E e_E`, or the sum `μ_I e_I + μ_E e_E` when `sum_form` is set.
pub fn source_rsfe(fields: &RsfeFields, mu_i: f64, mu_e: f64, sum_form: bool) -> PixelGrid {
    let sign = if sum_form { 1.0 } else { -1.0 };
    PixelGrid {
        width: fields.width,
        height: fields.height,
        values: fields
            .e_i
            .iter()
            .zip(&fields.e_e)
            .map(|(ei, ee)| mu_i * ei + sign * mu_e * ee)
            .collect(),
    }
}

/// CSV rows `kappa,p_I,p_E` of the floored densities.
pub fn pdf_csv(pdf_i: &RegionPdf, pdf_e: &RegionPdf) -> String {
    let mut out = String::from("kappa,p_I,p_E\n");
    for kappa in 0..BINS {
        out.push_str(&format!(
            "{kappa},{:e},{:e}\n",
            pdf_i.eval(kappa as f64),
            pdf_e.eval(kappa as f64)
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heaviside_values() {
        assert_eq!(heaviside_eps(0.0, 0.01), 0.5);
        assert!((heaviside_eps(0.01, 0.01) - 0.75).abs() < 1e-15);
        assert!(heaviside_eps(-1.0, 0.01) < heaviside_eps(1.0, 0.01));
    }

    #[test]
    fn empty_region_is_uniform() {
        let img = GreyImage::filled(4, 4, 10.0).unwrap();
        let labels = RegionLabels::from_fn(4, 4, |_, _| true);
        let pdf = estimate_pdf(&img, &labels, Region::Exterior, 1.0, 1e-8);
        assert!(pdf.density.iter().all(|&d| d == 1.0 / 256.0));
    }

    #[test]
    fn tiny_tau_concentrates_on_occupied_bins() {
        let img = GreyImage::from_fn(4, 1 + 1, |i, _| if i == 0 { 30.0 } else { 90.0 }).unwrap();
        let labels = RegionLabels::from_fn(4, 2, |_, _| true);
        let pdf = estimate_pdf(&img, &labels, Region::Interior, 1e-3, 1e-8);
        assert!((pdf.density[30] - 0.25).abs() < 1e-12);
        assert!((pdf.density[90] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn source_sign_for_floored_example() {
        let mut dens_i = vec![0.0; 256];
        let mut dens_e = vec![0.0; 256];
        dens_i[7] = 1e-2;
        dens_e[7] = 1e-4;
        let pi = RegionPdf {
            density: dens_i,
            zeta: 1e-8,
            region: Region::Interior,
        };
        let pe = RegionPdf {
            density: dens_e,
            zeta: 1e-8,
            region: Region::Exterior,
        };
        let img = GreyImage::filled(2, 2, 7.0).unwrap();
        let s = source_bayes(&img, &pi, &pe);
        assert!((s.values[0] - (1e-4f64 / 1e-2).ln()).abs() < 1e-12);
        assert!((s.values[0] + 4.605_170_185_988_091).abs() < 1e-12);
        let dp = delta_p(&img, &pi, &pe);
        assert!((dp.values[0] - (1e-2 - 1e-4)).abs() < 1e-18);
        // both floors active elsewhere
        let img0 = GreyImage::filled(2, 2, 200.0).unwrap();
        assert_eq!(source_bayes(&img0, &pi, &pe).values, vec![0.0; 4]);
    }

    #[test]
    fn taps_sum_to_one() {
        let t = gaussian_taps(8.0);
        assert_eq!(t.len(), 65);
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn rsfe_source_forms() {
        let fields = RsfeFields {
            width: 2,
            height: 1,
            f_i: vec![0.0; 2],
            f_e: vec![0.0; 2],
            e_i: vec![3.0, 5.0],
            e_e: vec![3.0, 1.0],
            sigma: 8.0,
        };
        assert_eq!(source_rsfe(&fields, 0.5, 0.5, false).values, vec![0.0, 2.0]);
        assert_eq!(source_rsfe(&fields, 0.5, 0.5, true).values, vec![3.0, 3.0]);
    }
}
