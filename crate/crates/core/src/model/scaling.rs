//! Compound scaling of depth, width and input resolution.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvGeom, Padding};
use crate::error::{invalid, shape_err, Result};

/// Which base drives depth and which drives width.
///
/// The constraint `alpha * beta^2 * gamma^2 ~= 2` squares width and
/// resolution (their FLOP cost is quadratic), so `alpha` is naturally the
/// depth base. `WidthAlpha` swaps the two bases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Binding {
    #[default]
    DepthAlpha,
    WidthAlpha,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingSpec {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub phi: f64,
    #[serde(default)]
    pub binding: Binding,
}

impl Default for ScalingSpec {
    /// Coefficients found for the B0 baseline, at `phi = 0`.
    fn default() -> Self {
        Self {
            alpha: 1.2,
            beta: 1.1,
            gamma: 1.15,
            phi: 0.0,
            binding: Binding::DepthAlpha,
        }
    }
}

pub const CONSTRAINT_TOLERANCE: f64 = 0.05;

impl ScalingSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v >= 1.0) || !v.is_finite() {
                return invalid(format!("{name} = {v} must be >= 1"));
            }
        }
        if !(self.phi >= 0.0) || !self.phi.is_finite() {
            return invalid(format!("phi = {} must be >= 0", self.phi));
        }
        Ok(())
    }

    /// `|alpha * beta^2 * gamma^2 - 2|`.
    pub fn constraint_residual(&self) -> f64 {
        (self.alpha * self.beta.powi(2) * self.gamma.powi(2) - 2.0).abs()
    }

    /// True when the residual exceeds `tol`.
    pub fn is_flagged(&self, tol: f64) -> bool {
        self.constraint_residual() > tol
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaledDims {
    pub width_mult: f64,
    pub depth_mult: f64,
    pub resolution_mult: f64,
    /// `round(base * r)` before snapping.
    pub raw_input_size: usize,
    /// `raw_input_size` snapped to the nearest multiple of [`SIZE_MULTIPLE`].
    pub input_size: usize,
}

/// Total stride of the stem plus the four stride-2 stages.
pub const SIZE_MULTIPLE: usize = 32;

impl ScaledDims {
    /// Dimensions given directly rather than through `phi`.
    pub fn explicit(width_mult: f64, depth_mult: f64, input_size: usize) -> Self {
        Self {
            width_mult,
            depth_mult,
            resolution_mult: 1.0,
            raw_input_size: input_size,
            input_size,
        }
    }

    /// Published (width, depth, resolution) of the B-series.
    pub fn preset(name: &str) -> Result<Self> {
        let (w, d, r) = match name {
            "b0" => (1.0, 1.0, 224),
            "b1" => (1.0, 1.1, 240),
            "b2" => (1.1, 1.2, 260),
            "b3" => (1.2, 1.4, 300),
            "b4" => (1.4, 1.8, 380),
            other => return invalid(format!("unknown preset `{other}` (b0..b4)")),
        };
        Ok(Self::explicit(w, d, r))
    }
}

fn snap(v: usize, multiple: usize) -> usize {
    let snapped = ((v + multiple / 2) / multiple) * multiple;
    snapped.max(multiple)
}

/// Width, depth and resolution multipliers `base^phi`.
pub fn compound_scale(spec: &ScalingSpec, base_input_size: usize) -> Result<ScaledDims> {
    spec.validate()?;
    if base_input_size == 0 {
        return invalid("base input size must be positive");
    }
    let (depth_base, width_base) = match spec.binding {
        Binding::DepthAlpha => (spec.alpha, spec.beta),
        Binding::WidthAlpha => (spec.beta, spec.alpha),
    };
    let r = spec.gamma.powf(spec.phi);
    let raw = (base_input_size as f64 * r).round() as usize;
    Ok(ScaledDims {
        width_mult: width_base.powf(spec.phi),
        depth_mult: depth_base.powf(spec.phi),
        resolution_mult: r,
        raw_input_size: raw,
        input_size: if spec.phi == 0.0 { base_input_size } else { snap(raw, SIZE_MULTIPLE) },
    })
}

/// Output extent of a convolution/pooling window over an `l x b` input.
pub fn conv_output_dims(l: usize, b: usize, kernel: usize, stride: usize, padding: Padding) -> Result<(usize, usize)> {
    if l == 0 || b == 0 {
        return shape_err("non-positive input extent");
    }
    let g = ConvGeom::new(l, b, kernel, stride, padding)?;
    Ok((g.out_h, g.out_w))
}

/// Rounds `v` to a multiple of `divisor`, never dropping more than 10%.
pub fn make_divisible(v: f64, divisor: usize) -> usize {
    let d = divisor as f64;
    let mut out = (((v + d / 2.0) / d).floor() as usize * divisor).max(divisor);
    if (out as f64) < 0.9 * v {
        out += divisor;
    }
    out
}

/// Scaled repeat count, `ceil(repeats * d)`.
pub fn scale_repeats(repeats: usize, depth_mult: f64) -> usize {
    ((repeats as f64 * depth_mult) - 1e-9).ceil().max(repeats as f64) as usize
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn phi_zero_is_identity() {
        let d = compound_scale(&ScalingSpec::default(), 224).unwrap();
        assert_eq!((d.width_mult, d.depth_mult, d.resolution_mult), (1.0, 1.0, 1.0));
        assert_eq!(d.input_size, 224);
    }

    #[test]
    fn exact_constraint_example() {
        let spec = ScalingSpec { alpha: 2.0, beta: 1.0, gamma: 1.0, phi: 2.0, binding: Binding::DepthAlpha };
        let d = compound_scale(&spec, 224).unwrap();
        assert_eq!((d.depth_mult, d.width_mult, d.resolution_mult), (4.0, 1.0, 1.0));
        assert_eq!(spec.constraint_residual(), 0.0);
        assert!(!spec.is_flagged(CONSTRAINT_TOLERANCE));

        let swapped = ScalingSpec { binding: Binding::WidthAlpha, ..spec };
        let d = compound_scale(&swapped, 224).unwrap();
        assert_eq!((d.depth_mult, d.width_mult), (1.0, 4.0));
    }

    #[test]
    fn resolution_171_gives_384() {
        // gamma^phi = 1.71 with phi = 1
        let spec = ScalingSpec { alpha: 1.0, beta: 1.0, gamma: 1.71, phi: 1.0, binding: Binding::DepthAlpha };
        let d = compound_scale(&spec, 224).unwrap();
        assert_eq!(d.raw_input_size, 383);
        assert_eq!(d.input_size, 384);
    }

    #[test]
    fn rejects_bad_specs() {
        let bad = ScalingSpec { phi: -1.0, ..Default::default() };
        assert!(compound_scale(&bad, 224).is_err());
        let bad = ScalingSpec { beta: 0.9, ..Default::default() };
        assert!(compound_scale(&bad, 224).is_err());
    }

    #[test]
    fn conv_dims_examples() {
        assert_eq!(conv_output_dims(5, 5, 3, 1, Padding::Valid).unwrap(), (3, 3));
        assert_eq!(conv_output_dims(384, 384, 3, 1, Padding::Valid).unwrap(), (382, 382));
        assert_eq!(conv_output_dims(224, 224, 3, 2, Padding::Same).unwrap(), (112, 112));
        assert!(conv_output_dims(2, 2, 3, 1, Padding::Valid).is_err());
    }

    #[test]
    fn canonical_channel_rounding() {
        assert_eq!(make_divisible(32.0 * 1.1, 8), 32);
        assert_eq!(make_divisible(1280.0 * 1.1, 8), 1408);
        assert_eq!(make_divisible(16.0 * 1.1, 8), 16);
        assert_eq!(make_divisible(40.0 * 1.1, 8), 48);
        assert_eq!(scale_repeats(2, 1.2), 3);
        assert_eq!(scale_repeats(4, 1.0), 4);
    }

    proptest! {
        #[test]
        fn phi_zero_identity_any_bases(a in 1.0f64..3.0, b in 1.0f64..3.0, g in 1.0f64..3.0, base in 8usize..600) {
            let spec = ScalingSpec { alpha: a, beta: b, gamma: g, phi: 0.0, binding: Binding::DepthAlpha };
            let d = compound_scale(&spec, base).unwrap();
            prop_assert_eq!((d.width_mult, d.depth_mult, d.resolution_mult), (1.0, 1.0, 1.0));
            prop_assert_eq!(d.input_size, base);
        }

        #[test]
        fn multipliers_at_least_one(a in 1.0f64..2.0, b in 1.0f64..2.0, g in 1.0f64..2.0, phi in 0.0f64..4.0) {
            let spec = ScalingSpec { alpha: a, beta: b, gamma: g, phi, binding: Binding::DepthAlpha };
            let d = compound_scale(&spec, 224).unwrap();
            prop_assert!(d.width_mult >= 1.0 && d.depth_mult >= 1.0 && d.resolution_mult >= 1.0);
        }

        #[test]
        fn rounding_never_zero_and_repeats_never_shrink(ch in 1usize..400, w in 1.0f64..3.0, reps in 1usize..8, d in 1.0f64..3.0) {
            prop_assert!(make_divisible(ch as f64 * w, 8) >= 8);
            prop_assert!(scale_repeats(reps, d) >= reps);
        }

        #[test]
        fn valid_conv_matches_formula(l in 1usize..64, b in 1usize..64, f in 1usize..8) {
            let r = conv_output_dims(l, b, f, 1, Padding::Valid);
            if f <= l && f <= b {
                prop_assert_eq!(r.unwrap(), (l - f + 1, b - f + 1));
            } else {
                prop_assert!(r.is_err());
            }
        }

        #[test]
        fn same_conv_is_ceiling(l in 1usize..300, f in 1usize..8, s in 1usize..4) {
            let (o, _) = conv_output_dims(l, l, f, s, Padding::Same).unwrap();
            prop_assert_eq!(o, l.div_ceil(s));
        }
    }
}
