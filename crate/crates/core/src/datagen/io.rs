//! On-disk dataset layout: one binary record per image plus a text index
//! that carries the generating spec and the record file names in order.
//!
//! Record layout, little-endian:
//! `CALSEG1` magic, `u32` height, `u32` width, `u32` class count,
//! `H*W*3` `f32` pixels (row-major, RGB interleaved), `H*W` `u8` labels.

use std::fs;
use std::path::Path;

use super::{Dataset, DomainSpec, LabeledImage, Shift};
use crate::error::{Error, Result};

pub const RECORD_MAGIC: &[u8; 7] = b"CALSEG1";
pub const DATASET_INDEX: &str = "index.txt";

fn encode(img: &LabeledImage, classes: usize) -> Vec<u8> {
    let hw = img.pixel_count();
    let mut out = Vec::with_capacity(7 + 12 + hw * 13);
    out.extend_from_slice(RECORD_MAGIC);
    for v in [img.height, img.width, classes] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for i in 0..hw {
        for c in 0..3 {
            out.extend_from_slice(&img.pixels[c * hw + i].to_le_bytes());
        }
    }
    out.extend_from_slice(&img.labels);
    out
}

fn decode(bytes: &[u8], path: &Path) -> Result<(LabeledImage, usize)> {
    let bad = |d: &str| Error::format(path, d);
    if bytes.len() < 19 || &bytes[..7] != RECORD_MAGIC {
        return Err(bad("missing record magic"));
    }
    let word = |k: usize| u32::from_le_bytes(bytes[7 + 4 * k..11 + 4 * k].try_into().expect("4 bytes")) as usize;
    let (h, w, classes) = (word(0), word(1), word(2));
    let hw = h.checked_mul(w).ok_or_else(|| bad("image size overflows"))?;
    if bytes.len() != 19 + hw * 13 {
        return Err(bad("record length does not match its header"));
    }
    let body = &bytes[19..];
    let mut pixels = vec![0f32; 3 * hw];
    for i in 0..hw {
        for c in 0..3 {
            let o = (i * 3 + c) * 4;
            pixels[c * hw + i] = f32::from_le_bytes(body[o..o + 4].try_into().expect("4 bytes"));
        }
    }
    let labels = body[hw * 12..].to_vec();
    Ok((
        LabeledImage {
            height: h,
            width: w,
            pixels,
            labels,
        },
        classes,
    ))
}

fn spec_lines(spec: &DomainSpec) -> String {
    let list = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
    let palette: Vec<f64> = spec.palette_mean.iter().flatten().copied().collect();
    format!(
        "n_images = {}\nheight = {}\nwidth = {}\nclasses = {}\nclass_freq = {}\npalette_mean = {}\n\
         palette_noise = {}\nobject_jitter = {}\nillumination_jitter = {}\nshift_hue = {}\nshift_brightness = {}\nshift_noise = {}\nseed = {}\n",
        spec.n_images,
        spec.height,
        spec.width,
        spec.classes,
        list(&spec.class_freq),
        list(&palette),
        spec.palette_noise,
        spec.object_jitter,
        spec.illumination_jitter,
        spec.shift.hue,
        spec.shift.brightness,
        spec.shift.noise,
        spec.seed
    )
}

/// Writes records and the index into `dir`, creating it if needed.
pub fn write_dataset(data: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = spec_lines(&data.spec);
    for (i, img) in data.images.iter().enumerate() {
        let name = format!("img_{i:05}.bin");
        let path = dir.join(&name);
        fs::write(&path, encode(img, data.spec.classes)).map_err(|e| Error::io(&path, e))?;
        index.push_str(&format!("record = {name}\n"));
    }
    let path = dir.join(DATASET_INDEX);
    fs::write(&path, index).map_err(|e| Error::io(&path, e))
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let index_path = dir.join(DATASET_INDEX);
    let text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let bad = |d: String| Error::format(&index_path, d);
    let mut spec = DomainSpec {
        shift: Shift::NONE,
        ..DomainSpec::source(0, 0)
    };
    let mut records = Vec::new();
    for line in text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
    {
        let (key, value) = line
            .split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or_else(|| bad(format!("expected `key = value`, got `{line}`")))?;
        let num = |v: &str| {
            v.parse::<f64>()
                .map_err(|_| bad(format!("bad number for {key}: `{v}`")))
        };
        let int = |v: &str| {
            v.parse::<u64>()
                .map_err(|_| bad(format!("bad integer for {key}: `{v}`")))
        };
        let floats = |v: &str| v.split_whitespace().map(num).collect::<Result<Vec<f64>>>();
        match key {
            "n_images" => spec.n_images = int(value)? as usize,
            "height" => spec.height = int(value)? as usize,
            "width" => spec.width = int(value)? as usize,
            "classes" => spec.classes = int(value)? as usize,
            "class_freq" => spec.class_freq = floats(value)?,
            "palette_mean" => {
                let flat = floats(value)?;
                if flat.len() % 3 != 0 {
                    return Err(bad("palette_mean needs RGB triples".into()));
                }
                spec.palette_mean = flat.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
            }
            "palette_noise" => spec.palette_noise = num(value)?,
            "object_jitter" => spec.object_jitter = num(value)?,
            "illumination_jitter" => spec.illumination_jitter = num(value)?,
            "shift_hue" => spec.shift.hue = num(value)?,
            "shift_brightness" => spec.shift.brightness = num(value)?,
            "shift_noise" => spec.shift.noise = num(value)?,
            "seed" => spec.seed = int(value)?,
            "record" => records.push(value.to_string()),
            other => return Err(bad(format!("unknown key `{other}`"))),
        }
    }
    if records.len() != spec.n_images {
        return Err(bad(format!(
            "index lists {} records for {} images",
            records.len(),
            spec.n_images
        )));
    }
    spec.validate()?;
    let mut images = Vec::with_capacity(records.len());
    for name in records {
        let path = dir.join(&name);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let (img, classes) = decode(&bytes, &path)?;
        if img.height != spec.height || img.width != spec.width || classes != spec.classes {
            return Err(Error::format(&path, "record header disagrees with the index"));
        }
        if img
            .labels
            .iter()
            .any(|&l| l as usize >= classes && l != crate::IGNORE_LABEL)
        {
            return Err(Error::format(&path, "label out of range"));
        }
        images.push(img);
    }
    Ok(Dataset { spec, images })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::generate_domain;

    #[test]
    fn round_trip_is_exact() {
        let spec = DomainSpec {
            height: 20,
            width: 18,
            ..DomainSpec::target(3, 11)
        };
        let data = generate_domain(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&data, dir.path()).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap(), data);
    }

    #[test]
    fn corrupt_records_rejected() {
        let data = generate_domain(&DomainSpec {
            height: 16,
            width: 16,
            ..DomainSpec::source(1, 0)
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&data, dir.path()).unwrap();
        let rec = dir.path().join("img_00000.bin");
        let mut bytes = fs::read(&rec).unwrap();
        bytes.pop();
        fs::write(&rec, &bytes).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Format { .. })));
        bytes[0] = b'X';
        fs::write(&rec, &bytes).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Format { .. })));
    }

    #[test]
    fn missing_index_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Io { .. })));
    }
}
