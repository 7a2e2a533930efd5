//! Stage 1 then Stage 2 on a small phantom corpus; prints the smoothed loss
//! curves and writes both checkpoints.
//!
//! cargo run --example pretrain_teacher -- [STEPS] [OUT_DIR]

use std::path::PathBuf;
use std::time::Instant;

use mammolab::corpus::{split_by_patient, Split, DEFAULT_RATIOS};
use mammolab::encoders::save_checkpoint;
use mammolab::pretrain::{moving_average, train_stage1, train_stage2, Stage1Config, Stage2Config};
use mammolab::preprocess::{generate_corpus, CorpusSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(60);
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("mammolab_pretrain"));
    std::fs::create_dir_all(&out)?;

    let manifest = generate_corpus(&CorpusSpec { patients: 40, ..Default::default() })?;
    let split = split_by_patient(&manifest, DEFAULT_RATIOS, 0)?;
    let train = split.records(&manifest, Split::Train);

    let t = Instant::now();
    let s1 = train_stage1(&train, &Stage1Config { steps, ..Default::default() }, 1)?;
    report("stage 1", &s1.curve.totals(), t.elapsed().as_secs_f64());
    std::fs::write(out.join("stage1_loss.csv"), s1.curve.to_csv())?;
    save_checkpoint(&s1.teacher, &out.join("teacher.ckpt"))?;

    let t = Instant::now();
    let s2 = train_stage2(&train, &s1.teacher, &Stage2Config { steps, ..Default::default() }, 2)?;
    report("stage 2", &s2.curve.totals(), t.elapsed().as_secs_f64());
    std::fs::write(out.join("stage2_loss.csv"), s2.curve.to_csv())?;
    save_checkpoint(&s2.student, &out.join("student.ckpt"))?;
    println!("checkpoints in {}", out.display());
    Ok(())
}

fn report(name: &str, totals: &[f64], secs: f64) {
    let ma = moving_average(totals, 20);
    println!(
        "{name}: {} steps in {secs:.1}s, loss {:.4} -> {:.4} (20-step average {:.4} -> {:.4})",
        totals.len(),
        totals[0],
        totals[totals.len() - 1],
        ma[0],
        ma[ma.len() - 1]
    );
}
