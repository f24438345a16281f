//! Temporary diagnostic: compare quarter-resolution argmax accuracy (the
//! trainer's view) with full-resolution IoU (the evaluator's view) for a
//! trained checkpoint.

use la_core::data::{
    build_folds, downsample_labels, episode_labels, labels_to_canvas, randomize_prompt_types,
    sample_episode, Dataset, PromptMode,
};
use la_core::eval::compute_iou;
use la_core::model::{episode_image_tensor, episode_support_tensor, Model};
use la_core::rng::{stream_rng, Stream};
use la_core::tensor::no_grad;
use la_core::train::{episode_loss, Checkpoint, WeightPolicy};
use la_core::Result;

fn main() -> Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let ckpt = &args[1];
    let data = &args[2];
    let ds = Dataset::open(data)?;
    let folds = build_folds(&ds.index, 4)?;
    let pool = folds[0].seen.clone();

    let ck = Checkpoint::<f32>::load(std::path::Path::new(ckpt))?;
    let cfg = ck.meta.train.model.clone();
    let s = cfg.input_size();
    let q = cfg.decoder.quarter;
    let factor = s / q;

    no_grad(|| -> Result<()> {
        let built = Model::<f32>::build(cfg.clone(), ck.params.clone(), ck.meta.train.seed)?;
        let model = built.model;
        let mut loss_sum = 0.0;
        let mut q_inter = 0u64;
        let mut q_union = 0u64;
        let mut f_inter = 0u64;
        let mut f_union = 0u64;
        let episodes = 20u64;
        for i in 0..episodes {
            let mut rng = stream_rng(77, Stream::EvalEpisode, i);
            let mut ep = sample_episode(&ds, &pool, 1, 1, &mut rng, 77, i)?;
            randomize_prompt_types(&ds, &mut ep, PromptMode::MasksOnly, &mut rng)?;

            let loss = episode_loss(&model, &ds, &ep, 2.0, WeightPolicy::Uniform)?;
            loss_sum += loss.item() as f64;

            // Quarter-resolution argmax vs the trainer's downsampled target.
            let support = episode_support_tensor(&model, &ds, &ep)?;
            let assignment = la_core::model::episode_assignment(&model, &ep)?;
            let protos = model.episode_prototypes(&support, &ep.prompt_grid(), &assignment)?;
            let query = episode_image_tensor(&model, &ds, ep.query_image)?;
            let logits = model.query_logits(&query, &protos.prototypes)?.remove(0);
            let c = logits.shape()[0];
            let ld = logits.data();
            let rec = ds.index.image(ep.query_image)?;
            let full = episode_labels(&ds, &ep)?;
            let canvas = labels_to_canvas(&full, rec.width as usize, rec.height as usize, s)?;
            let target = downsample_labels(&canvas, s, factor)?;
            for p in 0..q * q {
                let mut best = 0usize;
                for n in 1..c {
                    if ld[n * q * q + p] > ld[best * q * q + p] {
                        best = n;
                    }
                }
                let gt = target[p] as usize;
                if gt == 1 && best == 1 {
                    q_inter += 1;
                }
                if gt == 1 || best == 1 {
                    q_union += 1;
                }
            }

            // Full-resolution IoU through the real segmenter path.
            let pred = la_core::model::episode_predict(&model, &ds, &ep, false)?;
            if let Some(_iou) = compute_iou(&pred, &full, 1)? {
                let inter = pred
                    .iter()
                    .zip(full.iter())
                    .filter(|(p, g)| **p == 1 && **g == 1)
                    .count() as u64;
                let union = pred
                    .iter()
                    .zip(full.iter())
                    .filter(|(p, g)| **p == 1 || **g == 1)
                    .count() as u64;
                f_inter += inter;
                f_union += union;
            }
        }
        println!("mean episode loss     : {:.4}", loss_sum / episodes as f64);
        println!(
            "quarter-res IoU (16px): {:.4}",
            q_inter as f64 / q_union as f64
        );
        println!(
            "full-res IoU (64px)   : {:.4}",
            f_inter as f64 / f_union as f64
        );
        Ok(())
    })
}
