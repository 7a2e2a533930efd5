//! Frozen linear probes for every classification task: a random-init CNN
//! against an optional pretrained checkpoint.
//!
//! cargo run --example linear_probe -- [ENCODER.ckpt]

use mammolab::corpus::{split_by_patient, Split, Task, DEFAULT_RATIOS};
use mammolab::encoders::{load_checkpoint, CnnConfig, Encoder, EncoderConfig};
use mammolab::evalstats::auc;
use mammolab::heads::{balanced_accuracy_of, predict_probe, train_probe, ClassifyProtocol};
use mammolab::preprocess::{generate_corpus, CorpusSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut encoders = vec![("random-init", Encoder::new(EncoderConfig::Cnn(CnnConfig::default()), 0)?)];
    if let Some(p) = std::env::args().nth(1) {
        encoders.push(("checkpoint", load_checkpoint(p.as_ref())?));
    }
    let manifest = generate_corpus(&CorpusSpec::default())?;
    let split = split_by_patient(&manifest, DEFAULT_RATIOS, 0)?;
    let train = split.records(&manifest, Split::Train);
    let val = split.records(&manifest, Split::Val);
    let test = split.records(&manifest, Split::Test);

    for (name, enc) in &encoders {
        for task in [Task::Composition, Task::Laterality, Task::View, Task::Birads] {
            let run = train_probe(enc, &train, &val, task, &ClassifyProtocol::default(), 3)?;
            let (probs, y) = predict_probe(enc, &run.head, &test)?;
            println!(
                "{name:<12} {:<12} test bal. acc {:.3}  AUC {:.3}",
                task.name(),
                balanced_accuracy_of(&probs, &y, task.num_classes())?,
                auc(&probs, &y).unwrap_or(f64::NAN)
            );
        }
    }
    Ok(())
}
