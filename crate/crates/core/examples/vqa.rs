//! Question-type-conditioned answer classifier over frozen image embeddings.
//!
//! cargo run --example vqa -- [ENCODER.ckpt]

use mammolab::corpus::{split_by_patient, QuestionType, Split, DEFAULT_RATIOS};
use mammolab::encoders::{load_checkpoint, CnnConfig, Encoder, EncoderConfig};
use mammolab::heads::{predict_vqa, train_vqa, vqa_score, VqaProtocol};
use mammolab::preprocess::{generate_corpus, CorpusSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let encoder = match std::env::args().nth(1) {
        Some(p) => load_checkpoint(p.as_ref())?,
        None => Encoder::new(EncoderConfig::Cnn(CnnConfig::default()), 0)?,
    };
    let manifest = generate_corpus(&CorpusSpec { patients: 40, ..Default::default() })?;
    let split = split_by_patient(&manifest, DEFAULT_RATIOS, 0)?;
    let train = split.records(&manifest, Split::Train);
    let val = split.records(&manifest, Split::Val);
    let test = split.records(&manifest, Split::Test);

    let run = train_vqa(&encoder, &train, &val, &VqaProtocol::default(), 11)?;
    println!("best val score {:.3} after {} steps", run.best_val, run.log.last_step());

    let (samples, pred) = predict_vqa(&encoder, &run.head, &test)?;
    println!("test score (mean per-type balanced accuracy) {:.3}", vqa_score(&pred, &samples)?);
    for q in QuestionType::ALL {
        let idx: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].question == q).collect();
        let right = idx.iter().filter(|&&i| pred[i] == samples[i].answer).count();
        println!("  {:<14} {right}/{} correct", q.name(), idx.len());
    }
    Ok(())
}
