//! [CLS] attention map export as binary PGM plus raw CSV.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::checkpoint;
use crate::config::TrainConfig;
use crate::data::SyntheticDataset;
use crate::error::{Error, Result};
use crate::model::{self, Model};
use crate::numerics::Tensor;
use crate::train::Trainer;
use crate::vit;

/// Gray level used for every pixel of a constant map.
pub const FLAT_LEVEL: u8 = 128;

/// Min-max scales `map` to `0..=255`; a constant map becomes all
/// [`FLAT_LEVEL`].
pub fn normalize_to_bytes(map: &Tensor) -> Vec<u8> {
    let d = map.data();
    let lo = d.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = d.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if !(hi > lo) {
        return vec![FLAT_LEVEL; d.len()];
    }
    d.iter()
        .map(|&v| ((v - lo) / (hi - lo) * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// Binary P5 image of a square `g×g` map.
pub fn encode_pgm(map: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = map.dims2("pgm")?;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(normalize_to_bytes(map));
    Ok(out)
}

/// Parses a P5 file into `(width, height, pixels)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |m: &str| Error::Contract(format!("invalid PGM: {m}"));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("magic is not P5"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad number"));
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if max != 255 {
        return Err(bad("maxval is not 255"));
    }
    let pixels = bytes.get(pos + 1..).ok_or_else(|| bad("missing raster"))?;
    if pixels.len() != w * h {
        return Err(bad("raster size does not match header"));
    }
    Ok((w, h, pixels.to_vec()))
}

pub fn map_csv(map: &Tensor) -> Result<String> {
    let (h, _) = map.dims2("csv")?;
    let mut s = String::new();
    for i in 0..h {
        let row: Vec<String> = map.row(i).iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "{}", row.join(","));
    }
    Ok(s)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMaps {
    pub clip: Tensor,
    pub student: Tensor,
}

/// [CLS] attention of the [CLS] teacher and of the student on one image.
pub fn attention_maps(cfg: &TrainConfig, model: &Model, image: &Tensor) -> Result<AttentionMaps> {
    let view = model::teacher_view(&model.teachers, image)?;
    let clip = vit::cls_attention_map(&view.clip)?;
    let mole = (!model.params.mole.is_empty()).then_some(model.params.mole.as_slice());
    let out = vit::encode(&cfg.student, &model.params.student, mole, image)?;
    let student = vit::cls_attention_map(&out)?;
    Ok(AttentionMaps { clip, student })
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads `checkpoint`, renders image 0 of the stream seeded by
/// `image_seed`, and writes `{clip,student}_attn.{pgm,csv}` into `out`.
pub fn export_attention(cfg: &TrainConfig, checkpoint: &Path, image_seed: u64, out: &Path) -> Result<Vec<PathBuf>> {
    let entries = checkpoint::load(checkpoint)?;
    let trainer = Trainer::resume(cfg.clone(), &entries)?;
    let image = SyntheticDataset::new(image_seed, cfg.image_size, cfg.num_classes).sample(0).image;
    let maps = attention_maps(cfg, &trainer.model, &image)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut written = Vec::new();
    for (stem, map) in [("clip_attn", &maps.clip), ("student_attn", &maps.student)] {
        let pgm = out.join(format!("{stem}.pgm"));
        write(&pgm, &encode_pgm(map)?)?;
        let csv = out.join(format!("{stem}.csv"));
        write(&csv, map_csv(map)?.as_bytes())?;
        written.push(pgm);
        written.push(csv);
    }
    Ok(written)
}
