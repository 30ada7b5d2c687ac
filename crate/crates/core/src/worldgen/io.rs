//! Task directories: 16-bit binary PGM images plus a manifest CSV.
//!
//! Pixel values v ∈ [−1, 1] are stored as round((v+1)/2·65535), big-endian
//! as netpbm requires. Multi-channel images are stacked vertically, so a
//! C×H×W image becomes a W×(C·H) PGM.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use super::{FewShotTask, Sample};
use crate::error::{Result, TifError};
use crate::tensor::{ImageTensor, Shape};

const MAXVAL: f64 = 65535.0;
pub const MANIFEST: &str = "manifest.csv";

fn encode(v: f32) -> u16 {
    let clamped = f64::from(v).clamp(-1.0, 1.0);
    ((clamped + 1.0) / 2.0 * MAXVAL).round() as u16
}

fn decode(u: u16) -> f32 {
    (f64::from(u) / MAXVAL * 2.0 - 1.0) as f32
}

pub fn write_pgm<W: Write>(img: &ImageTensor, mut w: W) -> Result<()> {
    let s = img.shape();
    write!(w, "P5\n{} {}\n65535\n", s.width, s.channels * s.height)?;
    let mut bytes = Vec::with_capacity(2 * s.len());
    for &v in img.data() {
        bytes.extend_from_slice(&encode(v).to_be_bytes());
    }
    w.write_all(&bytes)?;
    Ok(())
}

fn header_token<R: BufRead>(r: &mut R) -> Result<String> {
    let mut token = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            break;
        }
        match byte[0] {
            b'#' if token.is_empty() => {
                let mut skip = Vec::new();
                r.read_until(b'\n', &mut skip)?;
            }
            b' ' | b'\t' | b'\n' | b'\r' => {
                if !token.is_empty() {
                    break;
                }
            }
            b => token.push(b),
        }
    }
    String::from_utf8(token).map_err(|_| TifError::Format("non-ASCII PGM header".into()))
}

pub fn read_pgm<R: Read>(r: R, channels: usize) -> Result<ImageTensor> {
    let mut r = BufReader::new(r);
    if header_token(&mut r)? != "P5" {
        return Err(TifError::Format("not a binary PGM (P5)".into()));
    }
    let mut number = |what: &str| -> Result<usize> {
        header_token(&mut r)?
            .parse()
            .map_err(|_| TifError::Format(format!("bad PGM {what}")))
    };
    let width = number("width")?;
    let rows = number("height")?;
    let maxval = number("maxval")?;
    if maxval != 65535 {
        return Err(TifError::Format(format!(
            "expected maxval 65535, got {maxval}"
        )));
    }
    if channels == 0 || rows % channels != 0 {
        return Err(TifError::Format(format!(
            "{rows} rows cannot hold {channels} channels"
        )));
    }
    let shape = Shape::new(channels, rows / channels, width);
    let mut bytes = vec![0u8; 2 * shape.len()];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(2)
        .map(|b| decode(u16::from_be_bytes([b[0], b[1]])))
        .collect();
    ImageTensor::new(shape, data)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    pub filename: String,
    pub split: String,
    pub class: usize,
    pub env: usize,
}

/// Writes `train_NNNN.pgm`, `test_NNNN.pgm` and `manifest.csv` into `dir`.
pub fn write_task_dir(task: &FewShotTask, dir: &Path) -> Result<Vec<ManifestRow>> {
    fs::create_dir_all(dir)?;
    let mut rows = Vec::with_capacity(task.train.len() + task.test.len());
    for (split, samples) in [("train", &task.train), ("test", &task.test)] {
        for (i, s) in samples.iter().enumerate() {
            let filename = format!("{split}_{i:04}.pgm");
            let mut buf = Vec::new();
            write_pgm(&s.image, &mut buf)?;
            fs::write(dir.join(&filename), buf)?;
            rows.push(ManifestRow {
                filename,
                split: split.to_string(),
                class: s.class,
                env: s.env,
            });
        }
    }
    let mut manifest = String::from("filename,split,class,env\n");
    for r in &rows {
        manifest.push_str(&format!(
            "{},{},{},{}\n",
            r.filename, r.split, r.class, r.env
        ));
    }
    fs::write(dir.join(MANIFEST), manifest)?;
    Ok(rows)
}

/// Reads a task directory back as (train, test) samples.
pub fn read_task_dir(dir: &Path, channels: usize) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let mut lines = text.lines();
    if lines.next() != Some("filename,split,class,env") {
        return Err(TifError::Format("manifest header mismatch".into()));
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for line in lines.filter(|l| !l.is_empty()) {
        let fields: Vec<&str> = line.split(',').collect();
        let [filename, split, class, env] = fields[..] else {
            return Err(TifError::Format(format!("bad manifest row: {line}")));
        };
        let parse = |v: &str| {
            v.parse::<usize>()
                .map_err(|_| TifError::Format(format!("bad number in manifest: {v}")))
        };
        let image = read_pgm(fs::File::open(dir.join(filename))?, channels)?;
        let sample = Sample {
            image,
            class: parse(class)?,
            env: parse(env)?,
        };
        match split {
            "train" => train.push(sample),
            "test" => test.push(sample),
            other => return Err(TifError::Format(format!("unknown split {other}"))),
        }
    }
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worldgen::{TestMode, World, WorldSpec};
    use proptest::prelude::*;

    #[test]
    fn pgm_header_and_size() {
        let img = ImageTensor::filled(Shape::new(1, 2, 3), 1.0);
        let mut buf = Vec::new();
        write_pgm(&img, &mut buf).unwrap();
        assert!(buf.starts_with(b"P5\n3 2\n65535\n"));
        assert_eq!(buf.len(), b"P5\n3 2\n65535\n".len() + 12);
        assert!(buf.ends_with(&[0xff, 0xff]));
    }

    #[test]
    fn rejects_wrong_maxval() {
        let bytes = b"P5\n1 1\n255\n\x00";
        assert!(read_pgm(&bytes[..], 1).is_err());
    }

    proptest! {
        #[test]
        fn pgm_round_trip_is_bit_exact(values in prop::collection::vec(-1.0f32..=1.0, 12)) {
            let img = ImageTensor::new(Shape::new(3, 2, 2), values).unwrap();
            let mut first = Vec::new();
            write_pgm(&img, &mut first).unwrap();
            let back = read_pgm(&first[..], 3).unwrap();
            for (a, b) in img.data().iter().zip(back.data()) {
                prop_assert!((a - b).abs() <= 1.0 / 65535.0 + 1e-7);
            }
            let mut second = Vec::new();
            write_pgm(&back, &mut second).unwrap();
            prop_assert_eq!(first, second);
        }
    }

    #[test]
    fn task_dir_round_trip() {
        let world = World::new(WorldSpec::default()).unwrap();
        let task = world.sample_task(3, 2, 1.0, 2, TestMode::Anti, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let rows = write_task_dir(&task, dir.path()).unwrap();
        assert_eq!(rows.len(), 3 * 2 + 3 * 2);
        let (train, test) = read_task_dir(dir.path(), 1).unwrap();
        assert_eq!(train.len(), 6);
        assert_eq!(test.len(), 6);
        for (a, b) in task.train.iter().zip(&train) {
            assert_eq!((a.class, a.env), (b.class, b.env));
            assert!(a.image.distance(&b.image).unwrap() < 1e-3);
        }
    }
}
