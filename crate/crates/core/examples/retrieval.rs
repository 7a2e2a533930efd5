//! Top-k retrieval: first on a label-clustered synthetic embedding fixture,
//! then with encoder embeddings (test queries against the training gallery).
//!
//! cargo run --example retrieval -- [ENCODER.ckpt]

use mammolab::corpus::{split_by_patient, Split, Task, DEFAULT_RATIOS};
use mammolab::encoders::{load_checkpoint, CnnConfig, Encoder, EncoderConfig};
use mammolab::heads::embed_records;
use mammolab::preprocess::{generate_corpus, CorpusSpec};
use mammolab::retrieval::RetrievalIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // four tight clusters in 8-d
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut point = |label: usize| -> Vec<f64> {
        (0..8).map(|d| if d % 4 == label { 1.0 } else { 0.0 } + rng.random_range(-0.3..0.3)).collect()
    };
    let gl: Vec<usize> = (0..80).map(|i| i % 4).collect();
    let gallery: Vec<Vec<f64>> = gl.iter().map(|&l| point(l)).collect();
    let ql: Vec<usize> = (0..40).map(|i| i % 4).collect();
    let queries: Vec<Vec<f64>> = ql.iter().map(|&l| point(l)).collect();
    let index = RetrievalIndex::fit(&gallery, &gl)?;
    for k in 1..=3 {
        println!("fixture  acc@{k} = {:.3}", index.topk_accuracy(&queries, &ql, k)?);
    }

    let encoder = match std::env::args().nth(1) {
        Some(p) => load_checkpoint(p.as_ref())?,
        None => Encoder::new(EncoderConfig::Cnn(CnnConfig::default()), 0)?,
    };
    let manifest = generate_corpus(&CorpusSpec { patients: 40, ..Default::default() })?;
    let split = split_by_patient(&manifest, DEFAULT_RATIOS, 0)?;
    let task = Task::Composition;
    let train = split.records(&manifest, Split::Train);
    let test = split.records(&manifest, Split::Test);
    let g = embed_records(&encoder, &train)?;
    let q = embed_records(&encoder, &test)?;
    let gl: Vec<usize> = train.iter().map(|r| r.label(task).unwrap()).collect();
    let ql: Vec<usize> = test.iter().map(|r| r.label(task).unwrap()).collect();
    let index = RetrievalIndex::fit(&g, &gl)?;
    for k in 1..=3 {
        println!("encoder  acc@{k} = {:.3} ({task})", index.topk_accuracy(&q, &ql, k)?);
    }
    Ok(())
}
