//! On-disk artefacts: atomic file writes, checkpoints and the embedding
//! text export.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::{format_real, Matrix};
use crate::trainer::{parse_kv, TrainConfig, Vocab};

/// Write `contents` to a sibling temp file, then rename it over `path`.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

/// `V d` header, then `token v1 .. vd` per id.
pub fn embeddings_text(vocab: &Vocab, embeddings: &Matrix<f32>) -> Result<String> {
    if vocab.len() != embeddings.rows() {
        return Err(Error::Dimension {
            op: "embeddings_text",
            left: format!("{} tokens", vocab.len()),
            right: format!("{} embedding rows", embeddings.rows()),
        });
    }
    let mut out = format!("{} {}\n", embeddings.rows(), embeddings.cols());
    for (id, token) in vocab.tokens().iter().enumerate() {
        out.push_str(token);
        for v in embeddings.row(id) {
            out.push(' ');
            out.push_str(&format_real(*v));
        }
        out.push('\n');
    }
    Ok(out)
}

const MANIFEST: &str = "manifest.txt";
const FILES: [&str; 5] = [
    "embeddings.txt",
    "hidden_weights.txt",
    "hidden_bias.txt",
    "output_weights.txt",
    "output_bias.txt",
];
const VOCAB: &str = "vocab.txt";

/// Save parameters, vocabulary and a manifest of shapes and training
/// settings into `dir`.
pub fn save_checkpoint(dir: &Path, params: &ModelParams<f32>, vocab: &Vocab, cfg: &TrainConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    let row = |v: &[f32]| Matrix::new(1, v.len(), v.to_vec()).expect("vector is one row");
    let mats = [
        params.embeddings.clone(),
        params.hidden_weights.clone(),
        row(&params.hidden_bias),
        row(&params.output_weights),
        row(&[params.output_bias]),
    ];
    let mut manifest = String::from("format=scatterlm-checkpoint-1\n");
    let shape = params.shape();
    let _ = writeln!(manifest, "vocab_size={}", shape.vocab);
    for (name, m) in FILES.iter().zip(&mats) {
        write_atomic(&dir.join(name), m.to_text().as_bytes())?;
        let _ = writeln!(manifest, "shape.{}={}x{}", name.trim_end_matches(".txt"), m.rows(), m.cols());
    }
    manifest.push_str(&cfg.to_kv());
    let mut vocab_text = String::new();
    for t in vocab.tokens() {
        vocab_text.push_str(t);
        vocab_text.push('\n');
    }
    write_atomic(&dir.join(VOCAB), vocab_text.as_bytes())?;
    write_atomic(&dir.join(MANIFEST), manifest.as_bytes())
}

pub fn load_checkpoint(dir: &Path) -> Result<(ModelParams<f32>, Vocab, TrainConfig)> {
    let read = |name: &str| fs::read_to_string(dir.join(name));
    let mut cfg = TrainConfig::default();
    for (k, v) in parse_kv(&read(MANIFEST)?)? {
        if k.starts_with("shape.") || k == "format" || k == "vocab_size" {
            continue;
        }
        cfg.set(&k, &v)?;
    }
    let mut mats = Vec::with_capacity(FILES.len());
    for name in FILES {
        mats.push(Matrix::<f32>::from_text(&read(name)?)?);
    }
    let vocab = Vocab::from_tokens(read(VOCAB)?.lines().map(str::to_string).collect())?;
    let mut it = mats.into_iter();
    let (c, w1, b1, w2, b2) = (
        it.next().unwrap(),
        it.next().unwrap(),
        it.next().unwrap(),
        it.next().unwrap(),
        it.next().unwrap(),
    );
    if b2.data().len() != 1 {
        return Err(Error::Parse("output bias must be a single value".into()));
    }
    let params = ModelParams::from_parts(c, w1, b1.into_data(), w2.into_data(), b2.data()[0], cfg.window)?;
    if vocab.len() != params.embeddings.rows() {
        return Err(Error::Parse("vocabulary size does not match embedding rows".into()));
    }
    Ok((params, vocab, cfg))
}
