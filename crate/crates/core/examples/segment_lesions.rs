//! Trains the UNet-style segmenter (BCE + Dice) on a frozen encoder and
//! prints per-image test DICE.
//!
//! cargo run --example segment_lesions -- [ENCODER.ckpt] [STEPS]

use mammolab::corpus::{split_by_patient, Split, DEFAULT_RATIOS};
use mammolab::encoders::{load_checkpoint, CnnConfig, Encoder, EncoderConfig};
use mammolab::evalstats::dice_and_iou;
use mammolab::heads::{predict_masks, train_segmenter, SegmentationProtocol};
use mammolab::preprocess::{generate_corpus, CorpusSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let encoder = match args.next() {
        Some(p) => load_checkpoint(p.as_ref())?,
        None => Encoder::new(EncoderConfig::Cnn(CnnConfig::default()), 0)?,
    };
    let steps: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(200);

    let manifest = generate_corpus(&CorpusSpec { patients: 40, ..Default::default() })?;
    let split = split_by_patient(&manifest, DEFAULT_RATIOS, 0)?;
    let train = split.records(&manifest, Split::Train);
    let val = split.records(&manifest, Split::Val);
    let test = split.records(&manifest, Split::Test);

    let protocol = SegmentationProtocol { max_steps: steps, validate_every: 50, ..Default::default() };
    let run = train_segmenter(&encoder, &train, &val, &protocol, 7)?;
    println!("best val DICE {:.3} at step {:?}", run.best_val, run.log.best().map(|b| b.0));

    for (pred, truth) in predict_masks(&encoder, &run.head, &test)?.iter().take(8) {
        let (dice, iou) = dice_and_iou(pred.data(), truth.data())?;
        println!("pred {:>4} px  true {:>4} px  DICE {dice:.3}  IoU {iou:.3}", pred.count(), truth.count());
    }
    Ok(())
}
