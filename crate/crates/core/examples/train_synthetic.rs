//! Train on the synthetic face corpus and report the proxy evaluation.
//!
//! Usage: `train_synthetic [seed] [steps] [gen_base] [disc_base] [embed_proj] [noise_dim] [lr] [w2]`
//!
//! `w2` is the weight of the mismatched-label term; the other two terms
//! share the remainder equally.

use std::time::Instant;

use emojigan::dataset::{make_synthetic_corpus, ClassTable, Corpus};
use emojigan::embeddings::fixture_vocabulary;
use emojigan::gan::{score_table, structured_loss, Discriminator, GanConfig, LossWeights};
use emojigan::trainer::{evaluate_proxy, AdamConfig, ProxyEvaluator, TrainConfig, Trainer};
use emojigan::Rng;

fn main() -> emojigan::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, default: f64| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(default);
    let seed = arg(0, 1.0) as u64;
    let steps = arg(1, 3000.0) as u64;
    let arch = GanConfig {
        noise_dim: arg(5, 100.0) as usize,
        embed_dim: 300,
        embed_proj: arg(4, 128.0) as usize,
        image_size: 32,
        gen_base: arg(2, 256.0) as usize,
        disc_base: arg(3, 64.0) as usize,
    };
    let samples = make_synthetic_corpus(8, 5, 32, &mut Rng::new(seed).substream("corpus"))?;
    let corpus = Corpus::from_samples(samples)?;
    let classes = ClassTable::new(&corpus.class_words, &fixture_vocabulary(300))?;
    let config = TrainConfig {
        seed,
        max_steps: Some(steps),
        max_epochs: usize::MAX,
        adam: AdamConfig {
            lr: arg(6, 2e-4),
            ..AdamConfig::default()
        },
        weights: {
            let w2 = arg(7, 1.0 / 3.0);
            LossWeights::new((1.0 - w2) / 2.0, w2, (1.0 - w2) / 2.0)?
        },
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(corpus, classes, &arch, config)?;
    let start = Instant::now();
    let mut eval = ProxyEvaluator { per_class: 8, seed };
    let out = trainer.train(&mut eval, None)?;
    println!("steps {} epochs {} in {:.1}s", out.steps, out.epochs, start.elapsed().as_secs_f64());
    for e in &out.evals {
        println!("epoch {:5} score {:.4} improved {} restored {}", e.epoch, e.score, e.improved, e.restored);
    }
    if let Some(best) = trainer.best_checkpoint() {
        let best = best?;
        let r = evaluate_proxy(&best.generator, trainer.corpus(), trainer.classes(), 8, seed)?;
        println!(
            "best: score {:.4} mean_l1 {:.4} classes_correct {} samples_correct {}/{}",
            r.score,
            r.mean_l1,
            r.classes_correct(),
            r.sample_correct,
            r.samples
        );
        let classes = trainer.classes();
        let mut rng = Rng::new(seed).substream("conditioning");
        let (mut across, mut within) = (0.0, 0.0);
        for c in 0..classes.num_classes() {
            let other = (c + 1) % classes.num_classes();
            let z1 = best.generator.noise(4, &mut rng);
            let z2 = best.generator.noise(4, &mut rng);
            let a = best.generator.generate(&z1, &classes.rows(&[c; 4]))?;
            let b = best.generator.generate(&z1, &classes.rows(&[other; 4]))?;
            let a2 = best.generator.generate(&z2, &classes.rows(&[c; 4]))?;
            across += a.mean_abs_diff(&b)?;
            within += a.mean_abs_diff(&a2)?;
        }
        println!("conditioning: across {:.4} within {:.4} ratio {:.2}", across, within, across / within);
        let trained = structured_loss(&score_table(&best.discriminator, trainer.corpus(), classes)?)?;
        let fresh = Discriminator::new(&arch, &mut Rng::new(seed).substream("fresh"))?;
        let fresh = structured_loss(&score_table(&fresh, trainer.corpus(), classes)?)?;
        println!("structured loss: trained {trained:.4} fresh {fresh:.4}");
    }
    Ok(())
}
