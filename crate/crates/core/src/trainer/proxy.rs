use crate::dataset::{image_grid, ClassTable, Corpus, RgbImage};
use crate::error::{Error, Result};
use crate::gan::Generator;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Samples generated per class by [`evaluate_proxy`].
pub const PROXY_SAMPLES_PER_CLASS: usize = 8;
/// Added to a sample's distance when its nearest real image has another class.
pub const CLASS_PENALTY: f64 = 1.0;
/// Gutter width of sample grids, in pixels.
pub const GRID_GUTTER: usize = 2;

/// Outcome of a nearest-real-neighbour evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct ProxyReport {
    /// Mean over samples of distance plus class penalty; lower is better.
    pub score: f64,
    /// Mean over samples of the per-pixel L1 distance to the nearest real image.
    pub mean_l1: f64,
    /// Samples whose nearest real image has the conditioning class.
    pub sample_correct: usize,
    pub samples: usize,
    /// Per conditioning class, how many of its samples matched.
    pub class_hits: Vec<usize>,
    /// Per conditioning class, how many samples were drawn.
    pub class_totals: Vec<usize>,
}

impl ProxyReport {
    /// Classes where a strict majority of samples land nearest their own class.
    pub fn classes_correct(&self) -> usize {
        self.class_hits
            .iter()
            .zip(&self.class_totals)
            .filter(|(&hit, &total)| 2 * hit > total)
            .count()
    }
}

/// Score `(class, image)` samples against the real images of `corpus`.
/// Distances are mean absolute differences per element; nearest-neighbour
/// ties go to the earlier corpus image.
pub fn proxy_report(samples: &[(usize, Tensor<f32>)], corpus: &Corpus) -> Result<ProxyReport> {
    if samples.is_empty() || corpus.is_empty() {
        return Err(Error::invalid("proxy evaluation needs samples and real images"));
    }
    let k = corpus.num_classes();
    let mut report = ProxyReport {
        score: 0.0,
        mean_l1: 0.0,
        sample_correct: 0,
        samples: samples.len(),
        class_hits: vec![0; k],
        class_totals: vec![0; k],
    };
    let mut total_l1 = 0.0;
    let mut total_score = 0.0;
    for (class, image) in samples {
        if *class >= k {
            return Err(Error::invalid(format!("class {class} out of range for {k} classes")));
        }
        let mut nearest = (f64::INFINITY, 0);
        for real in &corpus.samples {
            let d = image.mean_abs_diff(&real.pixels)?;
            if d < nearest.0 {
                nearest = (d, real.label);
            }
        }
        let hit = nearest.1 == *class;
        report.class_totals[*class] += 1;
        if hit {
            report.class_hits[*class] += 1;
            report.sample_correct += 1;
        }
        total_l1 += nearest.0;
        total_score += nearest.0 + if hit { 0.0 } else { CLASS_PENALTY };
    }
    report.mean_l1 = total_l1 / samples.len() as f64;
    report.score = total_score / samples.len() as f64;
    Ok(report)
}

/// `per_class` inference-mode samples for every class, noise drawn from a
/// stream fixed by `seed`, so the result depends only on the generator
/// parameters and the seed.
pub fn class_samples(
    g: &Generator<f32>,
    classes: &ClassTable,
    per_class: usize,
    seed: u64,
) -> Result<Vec<(usize, Tensor<f32>)>> {
    if per_class == 0 {
        return Err(Error::invalid("need at least one sample per class"));
    }
    let mut rng = Rng::new(seed).substream("eval");
    let mut out = Vec::with_capacity(per_class * classes.num_classes());
    for c in 0..classes.num_classes() {
        let z = g.noise(per_class, &mut rng);
        let images = g.generate(&z, &classes.rows(&vec![c; per_class]))?;
        for i in 0..per_class {
            out.push((c, images.select(i)?));
        }
    }
    Ok(out)
}

/// Nearest-real-image proxy for sample quality and class faithfulness.
pub fn evaluate_proxy(
    g: &Generator<f32>,
    corpus: &Corpus,
    classes: &ClassTable,
    per_class: usize,
    seed: u64,
) -> Result<ProxyReport> {
    proxy_report(&class_samples(g, classes, per_class, seed)?, corpus)
}

/// One grid row per class, `per_class` samples each.
pub fn sample_grid(g: &Generator<f32>, classes: &ClassTable, per_class: usize, seed: u64) -> Result<RgbImage> {
    let samples = class_samples(g, classes, per_class, seed)?;
    let rows: Vec<Vec<Tensor<f32>>> = samples
        .chunks(per_class)
        .map(|row| row.iter().map(|(_, img)| img.clone()).collect())
        .collect();
    image_grid(&rows, GRID_GUTTER)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::make_synthetic_corpus;

    fn corpus() -> Corpus {
        Corpus::from_samples(make_synthetic_corpus(4, 3, 32, &mut Rng::new(5)).unwrap()).unwrap()
    }

    #[test]
    fn memorizing_generator_scores_zero() {
        let c = corpus();
        let samples: Vec<_> = c.samples.iter().map(|s| (s.label, s.pixels.clone())).collect();
        let r = proxy_report(&samples, &c).unwrap();
        assert_eq!(r.score, 0.0);
        assert_eq!(r.sample_correct, c.len());
        assert_eq!(r.classes_correct(), 4);
    }

    #[test]
    fn uniform_gray_scores_its_nearest_distance() {
        let c = corpus();
        let gray = Tensor::full(&[3, 32, 32], 0.0);
        // brute force: distance to every real image, keep the closest
        let (best, best_label) = c
            .samples
            .iter()
            .map(|s| {
                let d: f64 = s.pixels.data().iter().map(|&p| f64::from(p.abs())).sum::<f64>() / s.pixels.len() as f64;
                (d, s.label)
            })
            .fold((f64::INFINITY, 0), |a, b| if b.0 < a.0 { b } else { a });
        let samples: Vec<_> = (0..4).map(|class| (class, gray.clone())).collect();
        let r = proxy_report(&samples, &c).unwrap();
        assert!((r.mean_l1 - best).abs() < 1e-6);
        assert!(r.mean_l1 > 0.0);
        assert_eq!(r.sample_correct, 1);
        assert_eq!(r.class_hits[best_label], 1);
        assert!((r.score - (best + 0.75)).abs() < 1e-6);
    }

    #[test]
    fn wrong_class_is_penalized() {
        let c = corpus();
        let wrong: Vec<_> = c.samples.iter().map(|s| ((s.label + 1) % 4, s.pixels.clone())).collect();
        let r = proxy_report(&wrong, &c).unwrap();
        assert_eq!(r.sample_correct, 0);
        assert!((r.score - CLASS_PENALTY).abs() < 1e-12);
        assert_eq!(r.classes_correct(), 0);
    }

    #[test]
    fn majority_rule_needs_more_than_half() {
        let r = ProxyReport {
            score: 0.0,
            mean_l1: 0.0,
            sample_correct: 0,
            samples: 0,
            class_hits: vec![4, 5, 8],
            class_totals: vec![8, 8, 8],
        };
        assert_eq!(r.classes_correct(), 2);
    }
}
