//! Seeded two-view augmentation: random rotation, optional equalization,
//! then a random-gamma transform, in that order.

use rand::Rng as _;

use super::{equalize, gamma_transform, rotate, GrayImage, DEFAULT_FILL};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    /// Closed interval of rotation angles in degrees.
    pub rotation_range_deg: (f64, f64),
    /// Closed interval of gamma exponents.
    pub gamma_range: (f64, f64),
    pub gamma_gain: f64,
    pub apply_equalization: bool,
    pub fill: u8,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotation_range_deg: (-15.0, 15.0),
            gamma_range: (0.7, 1.5),
            gamma_gain: 1.0,
            apply_equalization: true,
            fill: DEFAULT_FILL,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// No-op configuration: every transform degenerates to the identity.
    pub fn identity(seed: u64) -> Self {
        Self {
            rotation_range_deg: (0.0, 0.0),
            gamma_range: (1.0, 1.0),
            gamma_gain: 1.0,
            apply_equalization: false,
            fill: DEFAULT_FILL,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.rotation_range_deg;
        if !(lo.is_finite() && hi.is_finite() && -180.0 <= lo && lo <= hi && hi <= 180.0) {
            return Err(Error::InvalidParam(format!(
                "rotation range [{lo}, {hi}] must be ordered and within [-180, 180]"
            )));
        }
        let (lo, hi) = self.gamma_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::InvalidParam(format!(
                "gamma range [{lo}, {hi}] must be ordered and strictly positive"
            )));
        }
        if !(self.gamma_gain > 0.0 && self.gamma_gain.is_finite()) {
            return Err(Error::InvalidParam(format!(
                "gamma gain must be > 0, got {}",
                self.gamma_gain
            )));
        }
        Ok(())
    }
}

fn draw(rng: &mut rng::Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// One augmented view, drawn from the stream named by `(index, view)`.
pub fn augment_view(
    img: &GrayImage,
    cfg: &AugmentConfig,
    index: u64,
    view: u32,
) -> Result<GrayImage> {
    cfg.validate()?;
    let mut rng = rng::stream(cfg.seed, &format!("augment/{index}/view{view}"));
    let angle = draw(&mut rng, cfg.rotation_range_deg);
    let gamma = draw(&mut rng, cfg.gamma_range);
    let mut out = rotate(img, angle, cfg.fill);
    if cfg.apply_equalization {
        out = equalize(&out);
    }
    gamma_transform(&out, cfg.gamma_gain, gamma)
}

/// Two independently augmented views of `img`. The result is a pure
/// function of `(img, cfg, index)`.
pub fn augment_pair(
    img: &GrayImage,
    cfg: &AugmentConfig,
    index: u64,
) -> Result<(GrayImage, GrayImage)> {
    Ok((
        augment_view(img, cfg, index, 0)?,
        augment_view(img, cfg, index, 1)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn glyph() -> GrayImage {
        let mut px = vec![255u8; 16 * 16];
        for i in 2..14 {
            px[i * 16 + 5] = 0;
            px[8 * 16 + i] = 30;
        }
        GrayImage::new(16, 16, px).unwrap()
    }

    #[test]
    fn deterministic() {
        let cfg = AugmentConfig {
            seed: 11,
            ..Default::default()
        };
        assert_eq!(
            augment_pair(&glyph(), &cfg, 3).unwrap(),
            augment_pair(&glyph(), &cfg, 3).unwrap()
        );
    }

    #[test]
    fn degenerate_config_is_identity() {
        let (a, b) = augment_pair(&glyph(), &AugmentConfig::identity(5), 0).unwrap();
        assert_eq!(a, glyph());
        assert_eq!(b, glyph());
    }

    #[test]
    fn seeds_change_views() {
        let a = augment_pair(
            &glyph(),
            &AugmentConfig {
                seed: 1,
                ..Default::default()
            },
            0,
        )
        .unwrap();
        let b = augment_pair(
            &glyph(),
            &AugmentConfig {
                seed: 2,
                ..Default::default()
            },
            0,
        )
        .unwrap();
        assert_ne!(a, b);
        assert_ne!(a.0, a.1);
    }

    #[test]
    fn validation() {
        let bad = AugmentConfig {
            rotation_range_deg: (-200.0, 0.0),
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = AugmentConfig {
            gamma_range: (0.0, 1.0),
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = AugmentConfig {
            gamma_gain: -1.0,
            ..Default::default()
        };
        assert!(augment_pair(&glyph(), &bad, 0).is_err());
    }
}
