//! Quality Evaluation Score: the share of confidently predicted area within
//! all potentially manipulated area, used to drop unreliable annotations.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::image::ProbabilityMask;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QesConfig {
    pub t_high: f64,
    pub t_low: f64,
    pub keep_threshold: f64,
}

impl Default for QesConfig {
    fn default() -> Self {
        Self { t_high: 1.0 / 16.0, t_low: 1.0 / 16.0, keep_threshold: 0.5 }
    }
}

impl QesConfig {
    pub fn validate(&self) -> Result<()> {
        let open_half = |v: f64| v > 0.0 && v < 0.5;
        if !open_half(self.t_high) || !open_half(self.t_low) {
            return Err(Error::Config(format!("t_high={} and t_low={} must lie in (0, 0.5)", self.t_high, self.t_low)));
        }
        if !(0.0..=1.0).contains(&self.keep_threshold) {
            return Err(Error::Config(format!("keep_threshold={} outside [0, 1]", self.keep_threshold)));
        }
        Ok(())
    }
}

/// `count(p > 1 - t_high) / count(p > t_low)`, or 0 for an empty prediction.
pub fn qes_score(mask: &ProbabilityMask, cfg: &QesConfig) -> Result<f64> {
    cfg.validate()?;
    let hi = 1.0 - cfg.t_high;
    let (mut confident, mut candidate) = (0usize, 0usize);
    for &p in mask.data() {
        if !p.is_finite() || !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidProbability);
        }
        let p = p as f64;
        confident += (p > hi) as usize;
        candidate += (p > cfg.t_low) as usize;
    }
    Ok(if candidate == 0 { 0.0 } else { confident as f64 / candidate as f64 })
}

/// Strict `score > keep_threshold`.
pub fn is_retained(score: f64, cfg: &QesConfig) -> bool {
    score > cfg.keep_threshold
}

/// Anything that carries a prediction and can store its score.
pub trait Scored {
    fn id(&self) -> &str;
    fn mask(&self) -> Option<&ProbabilityMask>;
    fn set_quality(&mut self, qes: f64, retained: bool);
}

/// Scores every record in place and returns the indices of retained ones (input order).
pub fn filter_annotations<R: Scored>(records: &mut [R], cfg: &QesConfig) -> Result<Vec<usize>> {
    cfg.validate()?;
    let mut kept = Vec::new();
    for (i, r) in records.iter_mut().enumerate() {
        let mask = r.mask().ok_or_else(|| Error::MissingMask(r.id().into()))?;
        let score = qes_score(mask, cfg)?;
        let keep = is_retained(score, cfg);
        r.set_quality(score, keep);
        if keep {
            kept.push(i);
        }
    }
    Ok(kept)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::String;
    use alloc::vec;

    #[test]
    fn hand_computed_scores() {
        let cfg = QesConfig::default();
        assert_eq!(qes_score(&ProbabilityMask::filled(16, 16, 1.0), &cfg).unwrap(), 1.0);
        assert_eq!(qes_score(&ProbabilityMask::filled(16, 16, 0.5), &cfg).unwrap(), 0.0);
        assert_eq!(qes_score(&ProbabilityMask::filled(16, 16, 0.0), &cfg).unwrap(), 0.0);
        let mut data = vec![0.99f32; 8];
        data.extend([0.2f32; 8]);
        let s = qes_score(&ProbabilityMask::new(4, 4, data).unwrap(), &cfg).unwrap();
        assert_eq!(s, 0.5);
        assert!(!is_retained(s, &cfg));
    }

    #[test]
    fn config_bounds() {
        assert!(QesConfig { t_high: 0.5, ..Default::default() }.validate().is_err());
        assert!(QesConfig { t_low: 0.0, ..Default::default() }.validate().is_err());
    }

    struct Rec(String, Option<ProbabilityMask>, f64, bool);

    impl Scored for Rec {
        fn id(&self) -> &str {
            &self.0
        }
        fn mask(&self) -> Option<&ProbabilityMask> {
            self.1.as_ref()
        }
        fn set_quality(&mut self, qes: f64, retained: bool) {
            self.2 = qes;
            self.3 = retained;
        }
    }

    #[test]
    fn missing_mask_is_an_error() {
        let mut recs = [Rec("a".into(), None, 0.0, false)];
        assert_eq!(filter_annotations(&mut recs, &QesConfig::default()), Err(Error::MissingMask("a".into())));
    }
}
