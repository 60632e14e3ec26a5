//! Dataset persistence: JSON-lines manifest, lossless PNG images, and the
//! world description file.

use std::fs;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::synth::{Dataset, Vocab, WorldSpec, GRAMMAR};
use crate::types::{BBox, Image, ManipType, MediaPair, Split};

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("io error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("bad manifest line {line}: {msg}")]
    BadRecord { line: usize, msg: String },
    #[error("unknown token '{0}' not in world vocabulary")]
    UnknownToken(String),
    #[error("image decode failed at {path}: {msg}")]
    BadImage { path: PathBuf, msg: String },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ManifestError + '_ {
    move |source| ManifestError::Io { path: path.to_path_buf(), source }
}

/// One manifest line. Field names are part of the on-disk contract.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub image_path: String,
    pub tokens: Vec<String>,
    pub y_bin: u8,
    pub fake_cls: Vec<String>,
    pub fake_image_box: [f64; 4],
    pub fake_text_pos: Vec<usize>,
    pub split: String,
}

impl ManifestRecord {
    pub fn from_pair(pair: &MediaPair, vocab: &Vocab, image_path: String) -> ManifestRecord {
        ManifestRecord {
            id: pair.id.clone(),
            image_path,
            tokens: vocab.words_of(&pair.tokens),
            y_bin: pair.y_bin,
            fake_cls: pair
                .manip_types()
                .iter()
                .map(|t| t.manifest_name().to_string())
                .collect(),
            fake_image_box: pair.y_box.as_array(),
            fake_text_pos: pair
                .y_tok
                .iter()
                .enumerate()
                .filter(|(_, &v)| v == 1)
                .map(|(i, _)| i)
                .collect(),
            split: pair.split.name().to_string(),
        }
    }

    pub fn to_pair(&self, vocab: &Vocab, image: Image, line: usize) -> Result<MediaPair, ManifestError> {
        let tokens: Vec<usize> = self
            .tokens
            .iter()
            .map(|w| vocab.id_of(w).ok_or_else(|| ManifestError::UnknownToken(w.clone())))
            .collect::<Result<_, _>>()?;
        let mut y_mul = [0u8; 4];
        for name in &self.fake_cls {
            let t = ManipType::from_manifest_name(name).ok_or_else(|| ManifestError::BadRecord {
                line,
                msg: format!("unknown fake class '{name}'"),
            })?;
            y_mul[t.index()] = 1;
        }
        let mut y_tok = vec![0u8; tokens.len()];
        for &pos in &self.fake_text_pos {
            if pos >= y_tok.len() {
                return Err(ManifestError::BadRecord {
                    line,
                    msg: format!("fake_text_pos {pos} out of range"),
                });
            }
            y_tok[pos] = 1;
        }
        let split: Split = self
            .split
            .parse()
            .map_err(|msg| ManifestError::BadRecord { line, msg })?;
        Ok(MediaPair {
            id: self.id.clone(),
            image,
            tokens,
            y_bin: self.y_bin,
            y_mul,
            y_box: BBox::new(
                self.fake_image_box[0],
                self.fake_image_box[1],
                self.fake_image_box[2],
                self.fake_image_box[3],
            ),
            y_tok,
            split,
        })
    }
}

pub fn save_image_png(image: &Image, path: &Path) -> Result<(), ManifestError> {
    let mut buf = image::RgbImage::new(image.width as u32, image.height as u32);
    for y in 0..image.height {
        for x in 0..image.width {
            let p = image.pixel(y, x);
            let to_u8 = |v: f64| (v * 255.0).round().clamp(0.0, 255.0) as u8;
            buf.put_pixel(x as u32, y as u32, image::Rgb([to_u8(p[0]), to_u8(p[1]), to_u8(p[2])]));
        }
    }
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| ManifestError::BadImage { path: path.to_path_buf(), msg: e.to_string() })
}

pub fn load_image_png(path: &Path) -> Result<Image, ManifestError> {
    let img = image::open(path)
        .map_err(|e| ManifestError::BadImage { path: path.to_path_buf(), msg: e.to_string() })?
        .to_rgb8();
    let mut out = Image::new(img.height() as usize, img.width() as usize);
    for y in 0..out.height {
        for x in 0..out.width {
            let p = img.get_pixel(x as u32, y as u32);
            out.set_pixel(y, x, [p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0]);
        }
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct WorldFile {
    spec: WorldSpec,
    grammar: String,
    vocab: Vec<String>,
}

/// Write manifest.jsonl, images/, and worldspec.json under `dir`.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<(), ManifestError> {
    let images_dir = dir.join("images");
    fs::create_dir_all(&images_dir).map_err(io_err(&images_dir))?;

    let world = WorldFile {
        spec: dataset.spec.clone(),
        grammar: GRAMMAR.to_string(),
        vocab: dataset.spec.vocab().words.clone(),
    };
    let world_path = dir.join("worldspec.json");
    fs::write(&world_path, serde_json::to_string_pretty(&world)?).map_err(io_err(&world_path))?;

    let vocab = dataset.spec.vocab();
    let manifest_path = dir.join("manifest.jsonl");
    let file = fs::File::create(&manifest_path).map_err(io_err(&manifest_path))?;
    let mut w = BufWriter::new(file);
    for pair in &dataset.pairs {
        let rel = format!("images/{}.png", pair.id);
        save_image_png(&pair.image, &dir.join(&rel))?;
        let record = ManifestRecord::from_pair(pair, &vocab, rel);
        serde_json::to_writer(&mut w, &record)?;
        w.write_all(b"\n").map_err(io_err(&manifest_path))?;
    }
    w.flush().map_err(io_err(&manifest_path))?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset, ManifestError> {
    let world_path = dir.join("worldspec.json");
    let world: WorldFile = serde_json::from_str(
        &fs::read_to_string(&world_path).map_err(io_err(&world_path))?,
    )?;
    let vocab = world.spec.vocab();

    let manifest_path = dir.join("manifest.jsonl");
    let file = fs::File::open(&manifest_path).map_err(io_err(&manifest_path))?;
    let reader = std::io::BufReader::new(file);
    let mut pairs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(&manifest_path))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ManifestRecord = serde_json::from_str(&line)?;
        let image = load_image_png(&dir.join(&record.image_path))?;
        pairs.push(record.to_pair(&vocab, image, i + 1)?);
    }
    Ok(Dataset { spec: world.spec, pairs })
}

/// SHA-256 of the manifest file, hex-encoded; the dataset fingerprint.
pub fn manifest_hash(dir: &Path) -> Result<String, ManifestError> {
    let path = dir.join("manifest.jsonl");
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    Ok(hex_digest(&bytes))
}

/// SHA-256 of the worldspec file; embedded in checkpoints so a model is
/// never silently evaluated against a different world.
pub fn worldspec_hash(dir: &Path) -> Result<String, ManifestError> {
    let path = dir.join("worldspec.json");
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    Ok(hex_digest(&bytes))
}

pub fn hex_digest(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let out = hasher.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}
