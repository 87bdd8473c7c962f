//! Separable Gaussian smoothing of volumes.

use crate::error::{Error, Result};
use crate::volume::Volume;

/// `fwhm / (2 sqrt(2 ln 2))`.
pub fn fwhm_to_sigma(fwhm: f64) -> f64 {
    fwhm / (2.0 * (2.0 * std::f64::consts::LN_2).sqrt())
}

/// Unit-sum kernel truncated at 4 sigma. Returns `[1.0]` for sigma 0.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (4.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|w| *w /= s);
    k
}

/// Smooth an x-fastest grid in place-free fashion. Near the border the
/// kernel is renormalised over in-bounds taps, so constant fields stay constant.
pub fn smooth_grid(dims: [usize; 3], spacing: [f64; 3], data: &[f64], fwhm_mm: f64) -> Vec<f64> {
    let mut cur = data.to_vec();
    if fwhm_mm <= 0.0 {
        return cur;
    }
    let sigma_mm = fwhm_to_sigma(fwhm_mm);
    let strides = [1, dims[0], dims[0] * dims[1]];
    let mut line = Vec::new();
    for axis in 0..3 {
        let kernel = gaussian_kernel(sigma_mm / spacing[axis]);
        if kernel.len() == 1 || dims[axis] == 1 {
            continue;
        }
        let r = (kernel.len() / 2) as isize;
        let len = dims[axis];
        let stride = strides[axis];
        let (oa, ob) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        let mut next = vec![0.0; cur.len()];
        for b in 0..dims[ob] {
            for a in 0..dims[oa] {
                let base = a * strides[oa] + b * strides[ob];
                line.clear();
                line.extend((0..len).map(|t| cur[base + t * stride]));
                for t in 0..len as isize {
                    let lo = (t - r).max(0);
                    let hi = (t + r).min(len as isize - 1);
                    let mut acc = 0.0;
                    let mut wsum = 0.0;
                    for s in lo..=hi {
                        let w = kernel[(s - t + r) as usize];
                        acc += w * line[s as usize];
                        wsum += w;
                    }
                    next[base + t as usize * stride] = acc / wsum;
                }
            }
        }
        cur = next;
    }
    cur
}

/// Smooth with an isotropic Gaussian of the given FWHM (mm). FWHM 0 returns
/// the input unchanged; otherwise the result is an `f32` volume on the same grid.
pub fn gaussian_smooth(v: &Volume, fwhm_mm: f64) -> Result<Volume> {
    if !(fwhm_mm >= 0.0) || !fwhm_mm.is_finite() {
        return Err(Error::InvalidParameter(format!("fwhm must be >= 0, got {fwhm_mm}")));
    }
    if fwhm_mm == 0.0 {
        return Ok(v.clone());
    }
    let sp = v.spacing.map(|s| s as f64);
    let out = smooth_grid(v.dims, sp, &v.data.to_f64(), fwhm_mm);
    v.from_f64(&out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::VolumeData;

    #[test]
    fn sigma_for_8mm() {
        assert!((fwhm_to_sigma(8.0) - 3.3972).abs() < 1e-4);
        assert!((fwhm_to_sigma(18.0) - 7.6438).abs() < 1e-4);
    }

    #[test]
    fn zero_fwhm_is_identity() {
        let v = Volume::new([3, 3, 3], [2.0; 3], VolumeData::U8((0..27).map(|i| (i % 2) as u8).collect())).unwrap();
        assert_eq!(gaussian_smooth(&v, 0.0).unwrap(), v);
    }

    #[test]
    fn constant_stays_constant() {
        let v = Volume::new([9, 7, 5], [2.0; 3], VolumeData::F32(vec![3.5; 315])).unwrap();
        let s = gaussian_smooth(&v, 8.0).unwrap();
        for i in 0..s.len() {
            assert!((s.data.get_f64(i) - 3.5).abs() < 1e-5);
        }
    }

    #[test]
    fn interior_mass_is_preserved() {
        let dims = [31, 31, 31];
        let mut data = vec![0.0; 31 * 31 * 31];
        data[15 + 31 * (15 + 31 * 15)] = 1.0;
        data[14 + 31 * (16 + 31 * 15)] = 2.0;
        let out = smooth_grid(dims, [2.0; 3], &data, 8.0);
        let total: f64 = out.iter().sum();
        assert!((total - 3.0).abs() / 3.0 < 1e-6);
    }

    #[test]
    fn kernel_sums_to_one() {
        let k = gaussian_kernel(1.7);
        assert_eq!(k.len(), 2 * 7 + 1);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn negative_fwhm_rejected() {
        let v = Volume::zeros_u8([2, 2, 2], [1.0; 3]);
        assert!(gaussian_smooth(&v, -1.0).is_err());
    }
}
