//! Grayscale page transforms: bilinear resize and horizontal shear.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::tensor::{Scalar, Tensor};

/// Fill value for pixels sheared in from outside the page.
pub const BACKGROUND: f64 = 1.0;

fn plane<T: Scalar>(img: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *img.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => shape_err(format!("expected [c, h, w] image, got {:?}", img.shape())),
    }
}

/// Bilinear resize to `target x target` with half-pixel centers.
pub fn resize<T: Scalar>(img: &Tensor<T>, target: usize) -> Result<Tensor<T>> {
    let (c, h, w) = plane(img)?;
    if target == 0 {
        return invalid("resize target must be positive");
    }
    if h == target && w == target {
        return Ok(img.clone());
    }
    let axis = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let ys = axis(target, h);
    let xs = axis(target, w);
    let src = img.data();
    let mut out = Vec::with_capacity(c * target * target);
    for ch in 0..c {
        let p = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let v = |y: usize, x: usize| p[y * w + x].as_f64();
                let top = v(y0, x0) * (1.0 - fx) + v(y0, x1) * fx;
                let bot = v(y1, x0) * (1.0 - fx) + v(y1, x1) * fx;
                out.push(T::from_f64(top * (1.0 - fy) + bot * fy));
            }
        }
    }
    Tensor::new(&[c, target, target], out)
}

/// Horizontal shear by `theta_deg` about the vertical center: the pixel at
/// `(x, y)` moves to `x + tan(theta) * (y - cy)`.
pub fn shear<T: Scalar>(img: &Tensor<T>, theta_deg: f64) -> Result<Tensor<T>> {
    let (c, h, w) = plane(img)?;
    if theta_deg == 0.0 {
        return Ok(img.clone());
    }
    let t = theta_deg.to_radians().tan();
    let cy = (h as f64 - 1.0) / 2.0;
    let src = img.data();
    let mut out = Vec::with_capacity(src.len());
    for ch in 0..c {
        for y in 0..h {
            let row = &src[(ch * h + y) * w..(ch * h + y + 1) * w];
            let shift = t * (y as f64 - cy);
            for x in 0..w {
                let s = x as f64 - shift;
                let v = if s < -1e-9 || s > (w - 1) as f64 + 1e-9 {
                    BACKGROUND
                } else {
                    let s = s.clamp(0.0, (w - 1) as f64);
                    let x0 = s.floor() as usize;
                    let x1 = (x0 + 1).min(w - 1);
                    let f = s - x0 as f64;
                    row[x0].as_f64() * (1.0 - f) + row[x1].as_f64() * f
                };
                out.push(T::from_f64(v));
            }
        }
    }
    Tensor::new(&[c, h, w], out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Inclusive shear range in degrees.
    #[serde(default = "default_range")]
    pub shear_deg: (f64, f64),
    #[serde(default = "yes")]
    pub apply_in_training_only: bool,
    #[serde(default = "yes")]
    pub enabled: bool,
}

fn default_range() -> (f64, f64) {
    (-5.0, 5.0)
}

fn yes() -> bool {
    true
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { shear_deg: default_range(), apply_in_training_only: true, enabled: true }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.shear_deg;
        if !(lo <= hi) || lo <= -90.0 || hi >= 90.0 {
            return invalid(format!("shear range [{lo}, {hi}] invalid"));
        }
        Ok(())
    }

    pub fn draw_angle(&self, rng: &mut impl Rng) -> f64 {
        let (lo, hi) = self.shear_deg;
        if lo == hi {
            lo
        } else {
            rng.random_range(lo..=hi)
        }
    }

    /// Whether the transform runs on a path with the given training flag.
    pub fn active(&self, training: bool) -> bool {
        self.enabled && (training || !self.apply_in_training_only)
    }
}

/// Random shear of one image.
pub fn augment<T: Scalar>(img: &Tensor<T>, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<Tensor<T>> {
    shear(img, cfg.draw_angle(rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn img(h: usize, w: usize, data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(&[1, h, w], data).unwrap()
    }

    #[test]
    fn resize_identity_and_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = Tensor::<f64>::uniform(&[1, 7, 7], 0.0, 1.0, &mut rng).unwrap();
        assert!(resize(&a, 7).unwrap().max_abs_diff(&a).unwrap() < 1e-7);
        let k = Tensor::<f64>::full(&[1, 5, 9], 0.37).unwrap();
        assert!(resize(&k, 13).unwrap().data().iter().all(|&v| (v - 0.37).abs() < 1e-15));
    }

    #[test]
    fn checkerboard_upsample_by_hand() {
        // src coords for 2 -> 4: -0.25, 0.25, 0.75, 1.25, clamped to 0, .25, .75, 1
        let a = img(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let r = resize(&a, 4).unwrap();
        let f = [0.0, 0.25, 0.75, 1.0];
        for (y, &fy) in f.iter().enumerate() {
            for (x, &fx) in f.iter().enumerate() {
                let top = fx;
                let bot = 1.0 - fx;
                let expect = top * (1.0 - fy) + bot * fy;
                assert!((r.data()[y * 4 + x] - expect).abs() < 1e-15, "({y},{x})");
            }
        }
    }

    #[test]
    fn resize_stays_in_unit_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::<f64>::uniform(&[1, 9, 5], 0.0, 1.0, &mut rng).unwrap();
        for t in [1, 3, 16, 40] {
            assert!(resize(&a, t).unwrap().data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn shear_45_moves_one_column_per_row() {
        let mut data = vec![0.5; 25];
        data[5 + 2] = 0.0; // row 1 (one above center row 2), column 2
        let s = shear(&img(5, 5, &data), 45.0).unwrap();
        assert!(s.data()[5 + 1].abs() < 1e-12);
        assert!((s.data()[5 + 2] - 0.5).abs() < 1e-12);
        // row 0 shifts two columns left; its last two pixels come from outside
        assert_eq!(s.data()[3], BACKGROUND);
        assert_eq!(s.data()[4], BACKGROUND);
        // center row is fixed
        assert_eq!(&s.data()[10..15], &data[10..15]);
        let z = img(5, 5, &data);
        assert_eq!(shear(&z, 0.0).unwrap().data(), z.data());
    }

    #[test]
    fn angles_within_range_and_roughly_uniform() {
        let cfg = AugmentConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut bins = [0usize; 10];
        for _ in 0..10_000 {
            let a = cfg.draw_angle(&mut rng);
            assert!((-5.0..=5.0).contains(&a));
            bins[(((a + 5.0) / 1.0) as usize).min(9)] += 1;
        }
        let chi2: f64 = bins.iter().map(|&b| (b as f64 - 1000.0).powi(2) / 1000.0).sum();
        // 9 degrees of freedom, p = 0.001 critical value
        assert!(chi2 < 27.88, "chi2 = {chi2}");
    }

    #[test]
    fn eval_path_untouched() {
        let cfg = AugmentConfig::default();
        assert!(cfg.active(true));
        assert!(!cfg.active(false));
    }
}
