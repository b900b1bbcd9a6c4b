//! Synthetic toy dataset generation, dataset I/O, and checkpoint
//! persistence.
//!
//! The toy generator stands in for a real detection + feature pipeline: each
//! record describes a small scene (colored objects, optionally related),
//! its feature vector is a fixed random projection of the scene's multi-hot
//! encoding plus small noise, and its attribute vector is the ground-truth
//! presence indicator over the toy attribute vocabulary.

use crate::captioner::{CaptionerParams, Dims, VariantId};
use crate::linalg::{Matrix, Vector};
use crate::vocab::AttributeVocab;
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

pub const OBJECTS: [&str; 8] = ["ball", "box", "cat", "dog", "car", "tree", "bird", "cup"];
pub const COLORS: [&str; 6] = ["red", "blue", "green", "yellow", "black", "white"];
pub const RELATIONS: [&str; 4] = ["next to", "under", "above", "behind"];

const FEATURE_NOISE_SIGMA: f64 = 0.1;

/// One dataset entry: image features, detected attributes, and reference
/// captions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub id: String,
    pub features: Vec<f64>,
    pub attributes: Vec<f64>,
    pub captions: Vec<String>,
}

/// A scene drawn for one record: 1-3 colored objects and, when there are at
/// least two, a relation between the first pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToyScene {
    pub objects: Vec<usize>,
    pub colors: Vec<usize>,
    pub relation: usize,
}

/// The attribute vocabulary every toy record is annotated against: object
/// words, color words, then the distinguishing first token of each relation.
pub fn toy_attribute_vocab() -> AttributeVocab {
    AttributeVocab::new(
        OBJECTS
            .iter()
            .chain(COLORS.iter())
            .map(|s| s.to_string())
            .chain(RELATIONS.iter().map(|r| {
                r.split_whitespace().next().expect("non-empty relation").to_string()
            }))
            .collect(),
    )
    .expect("fixed token lists are duplicate-free")
}

fn mix_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 over the pair, so each record is a pure function of
    // (seed, index) regardless of how many records are generated.
    let mut z = seed ^ stream.wrapping_mul(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn scene_for(seed: u64, index: usize) -> ToyScene {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, index as u64));
    let count = rng.gen_range(1..=3usize);
    let mut objects = Vec::with_capacity(count);
    while objects.len() < count {
        let o = rng.gen_range(0..OBJECTS.len());
        if !objects.contains(&o) {
            objects.push(o);
        }
    }
    let colors = (0..count).map(|_| rng.gen_range(0..COLORS.len())).collect();
    let relation = rng.gen_range(0..RELATIONS.len());
    ToyScene { objects, colors, relation }
}

fn scene_captions(scene: &ToyScene, rng: &mut ChaCha8Rng) -> Vec<String> {
    let obj = |i: usize| format!("{} {}", COLORS[scene.colors[i]], OBJECTS[scene.objects[i]]);
    // Long fixed skeletons keep the corpus structure highly regular.
    let mut templates: Vec<String> = match scene.objects.len() {
        1 => vec![
            format!("there is a {} in the picture", obj(0)),
            format!("a photo of a {} in the picture", obj(0)),
        ],
        2 => {
            let rel = RELATIONS[scene.relation];
            vec![
                format!("there is a {} {} a {} in the picture", obj(0), rel, obj(1)),
                format!("a photo of a {} and a {} in the picture", obj(0), obj(1)),
            ]
        }
        _ => {
            let rel = RELATIONS[scene.relation];
            vec![
                format!("there is a {} a {} and a {} in the picture", obj(0), obj(1), obj(2)),
                format!("a photo of a {} {} a {} in the picture", obj(0), rel, obj(1)),
            ]
        }
    };
    // Keep 2..=min(5, available) of them, deterministically.
    let keep = rng.gen_range(2..=templates.len().min(5));
    templates.truncate(keep);
    templates
}

fn multi_hot(scene: &ToyScene) -> Vec<f64> {
    let mut enc = vec![0.0; OBJECTS.len() + COLORS.len() + RELATIONS.len()];
    for (&o, &c) in scene.objects.iter().zip(&scene.colors) {
        enc[o] = 1.0;
        enc[OBJECTS.len() + c] = 1.0;
    }
    if scene.objects.len() >= 2 {
        enc[OBJECTS.len() + COLORS.len() + scene.relation] = 1.0;
    }
    enc
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; two uniforms per draw keeps the stream aligned.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Generates `n` deterministic toy records with `d_v`-dimensional features.
/// `attr_noise` in [0,1] flips each attribute entry toward 0.5 with that
/// probability, modeling an imperfect detector.
pub fn generate_toy_dataset(seed: u64, n: usize, d_v: usize, attr_noise: f64) -> Result<Vec<CaptionRecord>> {
    if n < 1 {
        return Err(Error::InvalidInput("dataset size must be >= 1".into()));
    }
    if d_v < 8 {
        return Err(Error::InvalidInput("feature dimension must be >= 8".into()));
    }
    if !(0.0..=1.0).contains(&attr_noise) {
        return Err(Error::InvalidInput("attr-noise must lie in [0,1]".into()));
    }

    let enc_dim = OBJECTS.len() + COLORS.len() + RELATIONS.len();
    // One fixed projection per (seed, d_v); shared by every record.
    let mut proj_rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, u64::MAX));
    let scale = 1.0 / (enc_dim as f64).sqrt();
    let proj = Matrix::from_rows(
        d_v,
        enc_dim,
        (0..d_v * enc_dim).map(|_| gaussian(&mut proj_rng) * scale).collect(),
    )?;

    let av = toy_attribute_vocab();
    let mut records = Vec::with_capacity(n);
    for index in 0..n {
        let scene = scene_for(seed, index);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, (index as u64) | (1 << 63)));
        let captions = scene_captions(&scene, &mut rng);

        let mut features = proj.matvec(&Vector::new(multi_hot(&scene))).into_vec();
        for f in &mut features {
            *f += gaussian(&mut rng) * FEATURE_NOISE_SIGMA;
        }

        let mut attributes = crate::vocab::attributes_from_captions(&captions, &av).into_vec();
        if attr_noise > 0.0 {
            for a in &mut attributes {
                if rng.gen_range(0.0..1.0) < attr_noise {
                    *a = 0.5;
                }
            }
        }

        records.push(CaptionRecord {
            id: format!("scene-{index:04}"),
            features,
            attributes,
            captions,
        });
    }
    Ok(records)
}

/// Writes records as UTF-8 JSON lines.
pub fn save_dataset(records: &[CaptionRecord], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    for record in records {
        serde_json::to_writer(&mut buf, record)?;
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

/// Reads JSON-line records, enforcing uniform dimensions and non-empty
/// caption lists.
pub fn load_dataset(path: &Path) -> Result<Vec<CaptionRecord>> {
    let file = std::fs::File::open(path)?;
    let mut records: Vec<CaptionRecord> = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: CaptionRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        if record.captions.is_empty() {
            return Err(Error::Parse {
                line: lineno + 1,
                msg: "record has no captions".into(),
            });
        }
        if let Some(first) = records.first() {
            if record.features.len() != first.features.len() {
                return Err(Error::Parse {
                    line: lineno + 1,
                    msg: format!(
                        "feature dim {} differs from first record's {}",
                        record.features.len(),
                        first.features.len()
                    ),
                });
            }
            if record.attributes.len() != first.attributes.len() {
                return Err(Error::Parse {
                    line: lineno + 1,
                    msg: format!(
                        "attribute dim {} differs from first record's {}",
                        record.attributes.len(),
                        first.attributes.len()
                    ),
                });
            }
        }
        records.push(record);
    }
    Ok(records)
}

/// Checkpoint sidecar data.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub variant: VariantId,
    pub dims: Dims,
    pub vocab_hash: u64,
    pub train_step: u64,
}

const CKPT_MAGIC: &[u8; 4] = b"LSTA";
const CKPT_VERSION: u32 = 1;

/// Versioned little-endian binary checkpoint: header, then every weight
/// matrix in declared order as f64.
pub fn save_checkpoint(params: &CaptionerParams, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let dims = params.dims();
    if dims != meta.dims {
        return Err(Error::Checkpoint("meta dims do not match the parameters".into()));
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    for d in [dims.d_v, dims.d_a, dims.d_s, dims.d_e, dims.h] {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    buf.push(meta.variant.tag());
    buf.extend_from_slice(&meta.vocab_hash.to_le_bytes());
    buf.extend_from_slice(&meta.train_step.to_le_bytes());
    for (_, m) in params.blocks() {
        for v in m.as_slice() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    for (_, b) in params.bias_blocks() {
        for v in b.as_slice() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_atomic(path, &buf)
}

pub fn load_checkpoint(path: &Path) -> Result<(CaptionerParams, CheckpointMeta)> {
    let mut file = std::fs::File::open(path)?;
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint (bad magic bytes)",
            path.display()
        )));
    }
    let mut u32buf = [0u8; 4];
    file.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != CKPT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let read_u32 = |file: &mut std::fs::File| -> Result<usize> {
        let mut b = [0u8; 4];
        file.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b) as usize)
    };
    let d_v = read_u32(&mut file)?;
    let d_a = read_u32(&mut file)?;
    let d_s = read_u32(&mut file)?;
    let d_e = read_u32(&mut file)?;
    let h = read_u32(&mut file)?;
    let dims = Dims { d_v, d_a, d_s, d_e, h };

    let mut tag = [0u8; 1];
    file.read_exact(&mut tag)?;
    let variant = VariantId::from_tag(tag[0])
        .map_err(|e| Error::Checkpoint(format!("bad variant tag: {e}")))?;
    let mut u64buf = [0u8; 8];
    file.read_exact(&mut u64buf)?;
    let vocab_hash = u64::from_le_bytes(u64buf);
    file.read_exact(&mut u64buf)?;
    let train_step = u64::from_le_bytes(u64buf);

    let mut params = CaptionerParams::zeros(dims);
    let read_f64s = |slice: &mut [f64], file: &mut std::fs::File| -> Result<()> {
        let mut b = [0u8; 8];
        for v in slice {
            file.read_exact(&mut b)?;
            *v = f64::from_le_bytes(b);
        }
        Ok(())
    };
    for m in [
        &mut params.t_a,
        &mut params.t_v,
        &mut params.t_s,
        &mut params.t_h,
    ] {
        read_f64s(m.as_mut_slice(), &mut file)?;
    }
    for m in params.lstm.matrices_mut() {
        read_f64s(m.as_mut_slice(), &mut file)?;
    }
    for b in params.lstm.biases_mut() {
        read_f64s(b.as_mut_slice(), &mut file)?;
    }
    let mut rest = Vec::new();
    file.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes after weights", rest.len())));
    }

    Ok((params, CheckpointMeta { variant, dims, vocab_hash, train_step }))
}

/// Writes via a temporary sibling then renames, so failures never leave a
/// partial file at the destination.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let mut file = std::fs::File::create(&tmp)?;
        file.write_all(bytes)?;
        file.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::tokenize;
    use std::collections::HashSet;

    #[test]
    fn generation_is_deterministic() {
        let a = generate_toy_dataset(7, 20, 16, 0.0).unwrap();
        let b = generate_toy_dataset(7, 20, 16, 0.0).unwrap();
        assert_eq!(a, b);
        let c = generate_toy_dataset(8, 20, 16, 0.0).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn records_are_pure_functions_of_seed_and_index() {
        let long = generate_toy_dataset(7, 30, 16, 0.0).unwrap();
        let short = generate_toy_dataset(7, 5, 16, 0.0).unwrap();
        assert_eq!(&long[..5], &short[..]);
    }

    #[test]
    fn caption_content_words_come_from_the_scene() {
        let function_words: HashSet<&str> =
            ["a", "there", "is", "the", "and", "in", "picture", "photo", "of"].into();
        let records = generate_toy_dataset(3, 40, 12, 0.0).unwrap();
        for (index, record) in records.iter().enumerate() {
            let scene = scene_for(3, index);
            let mut scene_words: HashSet<String> = HashSet::new();
            for &o in &scene.objects {
                scene_words.insert(OBJECTS[o].to_string());
            }
            for &c in &scene.colors {
                scene_words.insert(COLORS[c].to_string());
            }
            for w in RELATIONS[scene.relation].split_whitespace() {
                scene_words.insert(w.to_string());
            }
            for caption in &record.captions {
                for token in tokenize(caption) {
                    assert!(
                        function_words.contains(token.as_str()) || scene_words.contains(&token),
                        "record {index}: token {token:?} not in scene"
                    );
                }
            }
            assert!(!record.captions.is_empty() && record.captions.len() <= 5);
        }
    }

    #[test]
    fn attributes_mark_exactly_the_mentioned_words() {
        let records = generate_toy_dataset(11, 25, 16, 0.0).unwrap();
        let av = toy_attribute_vocab();
        for record in &records {
            let expect = crate::vocab::attributes_from_captions(&record.captions, &av);
            assert_eq!(record.attributes, expect.as_slice());
        }
    }

    #[test]
    fn attr_noise_moves_entries_to_half() {
        let clean = generate_toy_dataset(5, 50, 16, 0.0).unwrap();
        let noisy = generate_toy_dataset(5, 50, 16, 1.0).unwrap();
        for (c, n) in clean.iter().zip(&noisy) {
            assert_eq!(c.captions, n.captions);
            assert!(n.attributes.iter().all(|&a| a == 0.5));
        }
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.jsonl");
        let records = generate_toy_dataset(1, 10, 16, 0.0).unwrap();
        save_dataset(&records, &path).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(records, loaded);
    }

    #[test]
    fn loader_reports_line_numbers_and_missing_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let good = r#"{"id":"a","features":[1.0],"attributes":[0.0],"captions":["x"]}"#;
        let missing = r#"{"id":"b","features":[1.0],"attributes":[0.0]}"#;
        std::fs::write(&path, format!("{good}\n{missing}\n")).unwrap();
        let err = load_dataset(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2"), "{msg}");
        assert!(msg.contains("captions"), "{msg}");
    }

    #[test]
    fn loader_rejects_inconsistent_dims() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dims.jsonl");
        let a = r#"{"id":"a","features":[1.0,2.0],"attributes":[0.0],"captions":["x"]}"#;
        let b = r#"{"id":"b","features":[1.0],"attributes":[0.0],"captions":["y"]}"#;
        std::fs::write(&path, format!("{a}\n{b}\n")).unwrap();
        let err = load_dataset(&path).unwrap_err();
        assert!(err.to_string().contains("line 2"));
    }

    #[test]
    fn hand_written_fixture_parses() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fixture.jsonl");
        std::fs::write(
            &path,
            concat!(
                r#"{"id":"img-1","features":[0.5,-1.25],"attributes":[1.0,0.0],"captions":["a red ball","the ball"]}"#,
                "\n",
                r#"{"id":"img-2","features":[2.0,0.0],"attributes":[0.0,1.0],"captions":["a blue box"]}"#,
                "\n",
            ),
        )
        .unwrap();
        let records = load_dataset(&path).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(records[0].id, "img-1");
        assert_eq!(records[0].features, vec![0.5, -1.25]);
        assert_eq!(records[1].captions, vec!["a blue box".to_string()]);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        use rand::SeedableRng;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let dims = Dims { d_v: 4, d_a: 3, d_s: 7, d_e: 5, h: 5 };
        let params = CaptionerParams::init(dims, &mut ChaCha8Rng::seed_from_u64(2));
        let meta = CheckpointMeta { variant: VariantId::A4, dims, vocab_hash: 0xdead, train_step: 42 };
        save_checkpoint(&params, &meta, &path).unwrap();
        let (loaded, loaded_meta) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded_meta, meta);
        for ((_, a), (_, b)) in params.blocks().into_iter().zip(loaded.blocks()) {
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        for ((_, a), (_, b)) in params.bias_blocks().into_iter().zip(loaded.bias_blocks()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn corrupted_magic_is_a_clean_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOPEnot a checkpoint").unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("magic"));
    }
}
