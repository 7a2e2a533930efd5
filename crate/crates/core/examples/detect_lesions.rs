//! Trains the two-stage lesion detector on a frozen encoder and prints
//! validation mean IoU plus a few test detections.
//!
//! cargo run --example detect_lesions -- [ENCODER.ckpt] [STEPS]
//!
//! Without a checkpoint a random-init CNN is used (expect low IoU).

use mammolab::corpus::{split_by_patient, Split, DEFAULT_RATIOS};
use mammolab::encoders::{load_checkpoint, CnnConfig, Encoder, EncoderConfig};
use mammolab::heads::{eval_detection, predict_detections, train_detector, DetectionProtocol};
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
    let (train, val, test) = (
        split.records(&manifest, Split::Train),
        split.records(&manifest, Split::Val),
        split.records(&manifest, Split::Test),
    );

    let protocol = DetectionProtocol { max_steps: steps, validate_every: 50, ..Default::default() };
    let run = train_detector(&encoder, &train, &val, &protocol, 7)?;
    for (step, v) in run.log.validations() {
        println!("step {step:>5}  val mean IoU {v:.3}");
    }

    let with_boxes: Vec<_> = test.into_iter().filter(|r| !r.boxes.is_empty()).collect();
    let out = predict_detections(&encoder, &run.head, &with_boxes)?;
    for (rec, (dets, truth)) in with_boxes.iter().zip(&out).take(5) {
        let iou = eval_detection(std::slice::from_ref(dets), std::slice::from_ref(truth))[0];
        println!("{}: {} detections, {} true boxes, IoU {iou:.3}", rec.image_id, dets.len(), truth.len());
        for d in dets {
            let b = &d.bbox;
            println!("    class {} score {:.2} [{:.0},{:.0},{:.0},{:.0}]", b.class_id, d.score, b.x1, b.y1, b.x2, b.y2);
        }
    }
    Ok(())
}
