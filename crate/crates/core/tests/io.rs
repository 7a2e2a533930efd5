//! Manifest and checkpoint persistence: round trips and rejection of bad files.

mod common;

use std::fs;
use std::path::Path;

use mammolab::corpus::{load_manifest, save_manifest, CorpusError, Task, MANIFEST_FILE};
use mammolab::encoders::{
    checkpoint_bytes, load_checkpoint, load_checkpoint_as, save_checkpoint, Encoder, EncoderConfig, EncoderError,
    EncoderKind, CHECKPOINT_VERSION,
};

fn saved_corpus(dir: &Path) -> mammolab::corpus::Manifest {
    let m = common::small_corpus(3, 4);
    save_manifest(&m, dir).unwrap();
    m
}

/// Rewrites the manifest through `edit` on its lines, then loads it.
fn load_edited(dir: &Path, edit: impl FnOnce(&mut Vec<String>)) -> Result<mammolab::corpus::Manifest, CorpusError> {
    let path = dir.join(MANIFEST_FILE);
    let mut lines: Vec<String> = fs::read_to_string(&path).unwrap().lines().map(str::to_string).collect();
    edit(&mut lines);
    fs::write(&path, lines.join("\n")).unwrap();
    load_manifest(dir)
}

fn set_key(line: &str, key: &str, value: serde_json::Value) -> String {
    let mut v: serde_json::Value = serde_json::from_str(line).unwrap();
    v.as_object_mut().unwrap().insert(key.to_string(), value);
    v.to_string()
}

#[test]
fn manifest_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let m = saved_corpus(dir.path());
    let back = load_manifest(dir.path()).unwrap();
    assert_eq!(back, m);
    // saving the loaded copy reproduces the same manifest bytes
    let again = tempfile::tempdir().unwrap();
    save_manifest(&back, again.path()).unwrap();
    assert_eq!(
        fs::read(dir.path().join(MANIFEST_FILE)).unwrap(),
        fs::read(again.path().join(MANIFEST_FILE)).unwrap()
    );
}

#[test]
fn malformed_line_reports_its_number() {
    let dir = tempfile::tempdir().unwrap();
    saved_corpus(dir.path());
    let err = load_edited(dir.path(), |l| l[1] = "{not json".into()).unwrap_err();
    assert!(matches!(err, CorpusError::MalformedRecord { line: 2, .. }), "{err}");
}

#[test]
fn missing_identifier_is_malformed() {
    let dir = tempfile::tempdir().unwrap();
    saved_corpus(dir.path());
    let err = load_edited(dir.path(), |l| {
        let mut v: serde_json::Value = serde_json::from_str(&l[0]).unwrap();
        v.as_object_mut().unwrap().remove("patient_id");
        l[0] = v.to_string();
    })
    .unwrap_err();
    assert!(matches!(err, CorpusError::MalformedRecord { line: 1, .. }), "{err}");
}

#[test]
fn unknown_task_label() {
    let dir = tempfile::tempdir().unwrap();
    saved_corpus(dir.path());
    let err = load_edited(dir.path(), |l| l[0] = set_key(&l[0], "label.density_grade", 1.into())).unwrap_err();
    assert!(matches!(&err, CorpusError::UnknownTask(t) if t == "density_grade"), "{err}");
}

#[test]
fn label_out_of_range() {
    let dir = tempfile::tempdir().unwrap();
    saved_corpus(dir.path());
    let err = load_edited(dir.path(), |l| l[0] = set_key(&l[0], "label.composition", 4.into())).unwrap_err();
    assert!(
        matches!(err, CorpusError::LabelOutOfRange { task: Task::Composition, label: 4 }),
        "{err}"
    );
}

#[test]
fn duplicate_image_id() {
    let dir = tempfile::tempdir().unwrap();
    let m = saved_corpus(dir.path());
    let err = load_edited(dir.path(), |l| {
        let first = l[0].clone();
        l.push(first);
    })
    .unwrap_err();
    assert!(matches!(&err, CorpusError::DuplicateImageId(id) if *id == m.records[0].image_id), "{err}");
}

#[test]
fn missing_image_file() {
    let dir = tempfile::tempdir().unwrap();
    let m = saved_corpus(dir.path());
    fs::remove_file(dir.path().join("images").join(format!("{}.pgm", m.records[0].image_id))).unwrap();
    assert!(matches!(load_manifest(dir.path()), Err(CorpusError::Io { .. } | CorpusError::Image { .. })));
}

fn cnn() -> Encoder {
    Encoder::new(EncoderConfig::Cnn(common::tiny_cnn()), 5).unwrap()
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    for enc in [cnn(), Encoder::new(EncoderConfig::Vit(common::tiny_vit()), 5).unwrap()] {
        let path = dir.path().join("enc.ckpt");
        save_checkpoint(&enc, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.config(), enc.config());
        assert_eq!(back.params(), enc.params());
        assert_eq!(checkpoint_bytes(&back), checkpoint_bytes(&enc));
    }
}

#[test]
fn checkpoint_rejections() {
    let dir = tempfile::tempdir().unwrap();
    let good = checkpoint_bytes(&cnn());
    let load = |name: &str, bytes: &[u8]| {
        let p = dir.path().join(name);
        fs::write(&p, bytes).unwrap();
        load_checkpoint(&p)
    };

    assert!(matches!(load_checkpoint(&dir.path().join("absent.ckpt")), Err(EncoderError::Io { .. })));
    assert!(matches!(load("magic", b"PK\x03\x04rest"), Err(EncoderError::BadMagic)));
    assert!(matches!(load("short", b"ML"), Err(EncoderError::BadMagic)));

    let mut v = good.clone();
    v[4..8].copy_from_slice(&(CHECKPOINT_VERSION + 1).to_le_bytes());
    assert!(matches!(load("version", &v), Err(EncoderError::VersionMismatch(x)) if x == CHECKPOINT_VERSION + 1));

    assert!(matches!(load("truncated", &good[..good.len() - 3]), Err(EncoderError::TruncatedFile)));

    let mut long = good.clone();
    long.extend_from_slice(&[0, 0]);
    assert!(matches!(load("trailing", &long), Err(EncoderError::Corrupt(_))));

    let mut kind = good.clone();
    kind[8] = 0; // claims ViT, echo says CNN
    assert!(matches!(load("kind", &kind), Err(EncoderError::Corrupt(_))));

    let p = dir.path().join("cnn.ckpt");
    fs::write(&p, &good).unwrap();
    assert!(load_checkpoint_as(&p, EncoderKind::Cnn).is_ok());
    assert!(matches!(
        load_checkpoint_as(&p, EncoderKind::Vit),
        Err(EncoderError::KindMismatch { expected: EncoderKind::Vit, found: EncoderKind::Cnn })
    ));
}
