use crate::error::{Error, Result};

/// A 2-D grayscale image stored row-major as `f32`. The value convention is
/// [0,1] for images; masks use exactly 0.0/1.0; precision maps and haze
/// fields may hold arbitrary non-negative / signed values.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Raster {
    pub fn zeros(height: usize, width: usize) -> Self {
        Raster { height, width, data: vec![0.0; height * width] }
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Raster { height, width, data: vec![value; height * width] }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "raster payload has {} values, expected {}x{}",
                data.len(),
                height,
                width
            )));
        }
        Ok(Raster { height, width, data })
    }

    /// Builds a raster by evaluating `f(row, col)`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Raster { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.width + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.width + c] = v;
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn same_shape(&self, other: &Raster) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn check_same_shape(&self, other: &Raster, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{what}: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )))
        }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Raster {
        Raster {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Raster, f: impl Fn(f32, f32) -> f32) -> Result<Raster> {
        self.check_same_shape(other, "zip_map")?;
        Ok(Raster {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn clamp01(&self) -> Raster {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn min(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// True if every value is exactly 0.0 or 1.0.
    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// Intensities at pixels where `mask` is nonzero.
    pub fn values_under(&self, mask: &Raster) -> Result<Vec<f32>> {
        self.check_same_shape(mask, "values_under")?;
        Ok(self
            .data
            .iter()
            .zip(&mask.data)
            .filter(|(_, &m)| m != 0.0)
            .map(|(&v, _)| v)
            .collect())
    }

    /// Count of nonzero pixels.
    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0.0).count()
    }
}

/// Population mean and variance of a sample vector (f64 accumulation).
pub fn mean_var(values: &[f32]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = values.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

/// Normalized 1-D Gaussian kernel truncated at radius ceil(3 sigma).
/// sigma <= 0 degenerates to the identity kernel.
pub fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f32> =
        (-r..=r).map(|i| (-0.5 * (i as f32 / sigma).powi(2)).exp()).collect();
    let total: f32 = k.iter().sum();
    for v in &mut k {
        *v /= total;
    }
    k
}

/// Separable Gaussian blur with replicate border padding.
pub fn gaussian_blur(src: &Raster, sigma: f32) -> Raster {
    let kernel = gaussian_kernel(sigma);
    if kernel.len() == 1 {
        return src.clone();
    }
    let r = (kernel.len() / 2) as i64;
    let (h, w) = src.shape();
    let mut tmp = Raster::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f32;
            for (ki, &kv) in kernel.iter().enumerate() {
                let sx = (x as i64 + ki as i64 - r).clamp(0, w as i64 - 1) as usize;
                acc += kv * src.get(y, sx);
            }
            tmp.set(y, x, acc);
        }
    }
    let mut out = Raster::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f32;
            for (ki, &kv) in kernel.iter().enumerate() {
                let sy = (y as i64 + ki as i64 - r).clamp(0, h as i64 - 1) as usize;
                acc += kv * tmp.get(sy, x);
            }
            out.set(y, x, acc);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(Raster::from_vec(2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn indexing_is_row_major() {
        let r = Raster::from_vec(2, 3, vec![0., 1., 2., 3., 4., 5.]).unwrap();
        assert_eq!(r.get(0, 2), 2.0);
        assert_eq!(r.get(1, 0), 3.0);
    }

    #[test]
    fn values_under_picks_masked_pixels() {
        let img = Raster::from_vec(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let mask = Raster::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(img.values_under(&mask).unwrap(), vec![0.1, 0.4]);
    }

    #[test]
    fn mean_var_population() {
        let (m, v) = mean_var(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_eq!(v, 1.0); // population variance, not sample
    }

    #[test]
    fn blur_with_zero_sigma_is_identity() {
        let r = Raster::from_fn(5, 7, |y, x| (y * 7 + x) as f32);
        assert_eq!(gaussian_blur(&r, 0.0), r);
    }

    #[test]
    fn blur_conserves_interior_impulse_mass() {
        // radius of sigma=4.2 is 13, so a pixel at (16,16) of a 33x33 image
        // keeps all its mass away from the borders
        let mut r = Raster::zeros(33, 33);
        r.set(16, 16, 1.0);
        let b = gaussian_blur(&r, 4.2);
        let total: f64 = b.as_slice().iter().map(|&v| v as f64).sum();
        assert!((total - 1.0).abs() < 1e-3, "mass {total}");
        assert!(b.get(16, 16) > b.get(16, 0));
    }

    #[test]
    fn blur_preserves_constants() {
        let r = Raster::filled(20, 20, 0.37);
        let b = gaussian_blur(&r, 2.0);
        for &v in b.as_slice() {
            assert!((v - 0.37).abs() < 1e-6);
        }
    }
}
