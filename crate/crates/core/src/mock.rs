//! Stand-in detector for closed-loop runs: perturbs ground truth instead of
//! running a network.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::eval::{BBox, Detection, GroundTruth};

#[derive(Debug, Clone, PartialEq)]
pub struct MockDetectorConfig {
    /// Probability of missing an object, per class. Missing entries count as 0.
    pub drop_rate: Vec<f64>,
    /// Standard deviation of corner noise as a fraction of box width/height.
    pub jitter: f64,
    /// Confidence lower bound; confidences are uniform in `[min_confidence, 1]`.
    pub min_confidence: f64,
}

impl Default for MockDetectorConfig {
    fn default() -> Self {
        MockDetectorConfig {
            drop_rate: Vec::new(),
            jitter: 0.0,
            min_confidence: 1.0,
        }
    }
}

impl MockDetectorConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.drop_rate.iter().any(|d| !(0.0..=1.0).contains(d)) {
            return Err("drop rates must lie in [0, 1]".into());
        }
        if !(self.jitter.is_finite() && self.jitter >= 0.0) {
            return Err("jitter must be >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.min_confidence) {
            return Err("min_confidence must lie in [0, 1]".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct MockDetector {
    cfg: MockDetectorConfig,
}

impl MockDetector {
    pub fn new(cfg: MockDetectorConfig) -> Result<Self, String> {
        cfg.validate()?;
        Ok(MockDetector { cfg })
    }

    pub fn config(&self) -> &MockDetectorConfig {
        &self.cfg
    }

    /// One detection per kept ground truth.
    pub fn detect<R: Rng + ?Sized>(&self, gts: &[GroundTruth], rng: &mut R) -> Vec<Detection> {
        let noise = Normal::new(0.0, 1.0).expect("unit normal");
        let mut out = Vec::with_capacity(gts.len());
        for g in gts {
            let drop = usize::try_from(g.class_id)
                .ok()
                .and_then(|c| self.cfg.drop_rate.get(c))
                .copied()
                .unwrap_or(0.0);
            if drop > 0.0 && rng.random::<f64>() < drop {
                continue;
            }
            let b = g.bbox;
            let bbox = if self.cfg.jitter > 0.0 {
                let sx = self.cfg.jitter * b.width();
                let sy = self.cfg.jitter * b.height();
                let x0 = b.x_min + sx * noise.sample(rng);
                let y0 = b.y_min + sy * noise.sample(rng);
                let x1 = b.x_max + sx * noise.sample(rng);
                let y1 = b.y_max + sy * noise.sample(rng);
                BBox::new(x0.min(x1), y0.min(y1), x0.max(x1), y0.max(y1))
            } else {
                b
            };
            let confidence = if self.cfg.min_confidence < 1.0 {
                rng.random_range(self.cfg.min_confidence..=1.0)
            } else {
                1.0
            };
            out.push(Detection {
                image_id: g.image_id,
                class_id: g.class_id,
                bbox,
                confidence,
            });
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gts(n: usize, class: i64) -> Vec<GroundTruth> {
        (0..n)
            .map(|i| GroundTruth {
                image_id: i as u64,
                class_id: class,
                bbox: BBox::new(10.0, 10.0, 50.0, 40.0),
            })
            .collect()
    }

    #[test]
    fn zero_noise_is_identity() {
        let d = MockDetector::new(MockDetectorConfig::default()).unwrap();
        let g = gts(5, 0);
        let dets = d.detect(&g, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(dets.len(), 5);
        for (a, b) in dets.iter().zip(&g) {
            assert_eq!(a.bbox, b.bbox);
            assert_eq!(a.confidence, 1.0);
        }
    }

    #[test]
    fn drop_rate_is_per_class() {
        let d = MockDetector::new(MockDetectorConfig {
            drop_rate: vec![0.9, 0.0],
            ..Default::default()
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let kept0 = d.detect(&gts(2000, 0), &mut rng).len();
        let kept1 = d.detect(&gts(100, 1), &mut rng).len();
        assert!((150..250).contains(&kept0), "{kept0}");
        assert_eq!(kept1, 100);
    }

    #[test]
    fn invalid_config() {
        assert!(MockDetector::new(MockDetectorConfig {
            drop_rate: vec![1.5],
            ..Default::default()
        })
        .is_err());
    }
}
