//! Binary PPM (P6) images, PGM (P5) label maps and the dataset manifest.

use std::path::Path;

use super::Sample;
use crate::binio::{read_file, write_file_atomic};
use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.txt";

fn header(magic: &str, width: usize, height: usize) -> Vec<u8> {
    format!("{magic}\n{width} {height}\n255\n").into_bytes()
}

pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    debug_assert_eq!(rgb.len(), width * height * 3);
    let mut bytes = header("P6", width, height);
    bytes.extend_from_slice(rgb);
    write_file_atomic(path, &bytes)
}

pub fn write_pgm(path: &Path, width: usize, height: usize, gray: &[u8]) -> Result<()> {
    debug_assert_eq!(gray.len(), width * height);
    let mut bytes = header("P5", width, height);
    bytes.extend_from_slice(gray);
    write_file_atomic(path, &bytes)
}

struct Header {
    width: usize,
    height: usize,
    data_offset: usize,
}

fn parse_header(bytes: &[u8], magic: &[u8; 2], path: &Path) -> Result<Header> {
    let fault = |offset: usize, detail: String| Error::Parse {
        file: path.to_path_buf(),
        offset: offset as u64,
        detail,
    };
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(fault(0, format!("expected magic {}", String::from_utf8_lossy(magic))));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(fault(pos, "expected a decimal header field".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| fault(start, "header field out of range".into()))?;
    }
    if fields[2] != 255 {
        return Err(fault(pos, format!("maxval {} unsupported (need 255)", fields[2])));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(fault(pos, "missing whitespace after header".into()));
    }
    Ok(Header {
        width: fields[0],
        height: fields[1],
        data_offset: pos + 1,
    })
}

fn read_raster(path: &Path, magic: &[u8; 2], channels: usize) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = read_file(path)?;
    let h = parse_header(&bytes, magic, path)?;
    let need = h.width * h.height * channels;
    let have = bytes.len() - h.data_offset;
    if have != need {
        return Err(Error::Parse {
            file: path.to_path_buf(),
            offset: (h.data_offset + have.min(need)) as u64,
            detail: format!("raster has {have} bytes, expected {need}"),
        });
    }
    Ok((h.width, h.height, bytes[h.data_offset..].to_vec()))
}

/// Returns `(width, height, interleaved rgb bytes)`.
pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    read_raster(path, b"P6", 3)
}

/// Returns `(width, height, gray bytes)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    read_raster(path, b"P5", 1)
}

pub(crate) fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes `{id}.ppm`, `{id}.pgm` per sample and a manifest listing ids in order.
pub fn write_dataset(samples: &[Sample], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for s in samples {
        let rgb: Vec<u8> = s.image.iter().map(|&v| quantize(v)).collect();
        write_ppm(&dir.join(format!("{}.ppm", s.id)), s.width, s.height, &rgb)?;
        write_pgm(&dir.join(format!("{}.pgm", s.id)), s.width, s.height, &s.labels)?;
        manifest.push_str(&s.id);
        manifest.push('\n');
    }
    write_file_atomic(&dir.join(MANIFEST), manifest.as_bytes())
}

/// Reads a dataset written by [`write_dataset`]. A directory without any
/// entries is an empty dataset.
pub fn read_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let manifest_path = dir.join(MANIFEST);
    if !manifest_path.exists() {
        let empty = match std::fs::read_dir(dir) {
            Ok(mut entries) => entries.next().is_none(),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => false,
            Err(e) => return Err(Error::io(dir, e)),
        };
        if empty {
            return Ok(Vec::new());
        }
        return Err(Error::MissingArtifact {
            what: "dataset manifest".into(),
            path: manifest_path,
        });
    }
    let text = String::from_utf8(read_file(&manifest_path)?).map_err(|e| Error::Parse {
        file: manifest_path.clone(),
        offset: e.utf8_error().valid_up_to() as u64,
        detail: "manifest is not UTF-8".into(),
    })?;
    let mut samples = Vec::new();
    for id in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let ppm = dir.join(format!("{id}.ppm"));
        let pgm = dir.join(format!("{id}.pgm"));
        let (w, h, rgb) = read_ppm(&ppm)?;
        let (lw, lh, labels) = read_pgm(&pgm)?;
        if (lw, lh) != (w, h) {
            return Err(Error::Parse {
                file: pgm,
                offset: 0,
                detail: format!("label extents {lw}x{lh} differ from image {w}x{h}"),
            });
        }
        samples.push(Sample {
            id: id.to_string(),
            height: h,
            width: w,
            image: rgb.iter().map(|&b| b as f32 / 255.0).collect(),
            labels,
        });
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_dataset, SceneConfig};

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let samples = generate_dataset(&SceneConfig::with_classes(32, 4), 9, 5, "rt").unwrap();
        write_dataset(&samples, dir.path()).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), samples.len());
        for (a, b) in samples.iter().zip(&back) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.labels, b.labels);
            let worst = a.image.iter().zip(&b.image).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max);
            assert!(worst <= 1.0 / 255.0, "{worst}");
        }
    }

    #[test]
    fn empty_directory_is_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        assert!(read_dataset(dir.path()).unwrap().is_empty());
    }

    #[test]
    fn malformed_files_report_file_and_offset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.ppm");
        std::fs::write(&p, b"P6\n4 4\n255\n\x00\x01").unwrap();
        match read_ppm(&p).unwrap_err() {
            Error::Parse { file, offset, .. } => {
                assert_eq!(file, p);
                assert_eq!(offset, 13);
            }
            e => panic!("{e}"),
        }
        std::fs::write(&p, b"P5\n4 4\n255\n").unwrap();
        assert!(matches!(read_ppm(&p).unwrap_err(), Error::Parse { offset: 0, .. }));
        std::fs::write(&p, b"P6\n4 x\n255\n").unwrap();
        assert!(matches!(read_ppm(&p).unwrap_err(), Error::Parse { offset: 5, .. }));
    }

    #[test]
    fn header_comments_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.pgm");
        std::fs::write(&p, b"P5\n# comment\n2 1\n255\n\x07\xff").unwrap();
        assert_eq!(read_pgm(&p).unwrap(), (2, 1, vec![7, 255]));
    }
}
