//! 8-bit binary PGM (one channel) and PPM (three channels) frame directories.

use std::path::{Path, PathBuf};

use motia_core::data::Video;
use motia_core::Tensor;

use crate::error::{self, Error, Result};

fn frame_name(i: usize, channels: usize) -> String {
    format!("frame_{i:05}.{}", if channels == 1 { "pgm" } else { "ppm" })
}

fn quantize(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Writes one file per frame into `dir`; only 1 or 3 channel videos.
pub fn export_frames(video: &Video, dir: &Path) -> Result<Vec<PathBuf>> {
    let (t, d, h, w) = (video.frames(), video.channels(), video.height(), video.width());
    if d != 1 && d != 3 {
        return Err(Error::Usage(format!("frame export needs 1 or 3 channels, video has {d}")));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let data = video.tensor().data();
    let mut paths = Vec::with_capacity(t);
    for f in 0..t {
        let mut bytes = format!("{} {w} {h}\n255\n", if d == 1 { "P5" } else { "P6" }).into_bytes();
        for p in 0..h * w {
            for c in 0..d {
                bytes.push(quantize(data[(f * d + c) * h * w + p]));
            }
        }
        let path = dir.join(frame_name(f, d));
        error::write(&path, &bytes)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Header tokens and the offset of the first sample byte.
fn parse_header(bytes: &[u8], path: &Path) -> Result<([usize; 3], bool, usize)> {
    let mut tokens = Vec::new();
    let mut i = 0;
    while tokens.len() < 4 {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::corrupt(path, "truncated header"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    let colour = match tokens[0].as_str() {
        "P5" => false,
        "P6" => true,
        other => return Err(Error::corrupt(path, format!("unsupported magic {other}"))),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::corrupt(path, format!("bad header field {s}")));
    let (w, h, max) = (num(&tokens[1])?, num(&tokens[2])?, num(&tokens[3])?);
    if max != 255 {
        return Err(Error::corrupt(path, format!("maxval {max}, only 8-bit frames are supported")));
    }
    Ok(([w, h, max], colour, i + 1))
}

/// Reads every `.pgm` / `.ppm` file of `dir` in name order.
pub fn import_frames(dir: &Path) -> Result<Video> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("pgm" | "ppm")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(motia_core::Error::Input(format!("no PGM/PPM frames in {}", dir.display())).into());
    }
    let mut dims = None;
    let mut data = Vec::new();
    for path in &paths {
        let bytes = error::read(path)?;
        let ([w, h, _], colour, start) = parse_header(&bytes, path)?;
        let d = if colour { 3 } else { 1 };
        match dims {
            None => dims = Some((d, h, w)),
            Some(prev) if prev != (d, h, w) => {
                return Err(motia_core::Error::Input(format!(
                    "{} is {}x{}x{}, earlier frames are {}x{}x{}",
                    path.display(),
                    d,
                    h,
                    w,
                    prev.0,
                    prev.1,
                    prev.2
                ))
                .into())
            }
            Some(_) => {}
        }
        let pixels = bytes.get(start..start + h * w * d).ok_or_else(|| Error::corrupt(path, "truncated pixel data"))?;
        for c in 0..d {
            data.extend((0..h * w).map(|p| pixels[p * d + c] as f32 / 255.0));
        }
    }
    let (d, h, w) = dims.unwrap();
    Ok(Video::new(Tensor::new(&[paths.len(), d, h, w], data)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use motia_core::rng::CounterRng;

    #[test]
    fn round_trip_within_one_step() {
        let dir = tempfile::tempdir().unwrap();
        for d in [1, 3] {
            let mut rng = CounterRng::named(2, "test/frames", d as u64);
            let v = Video::new(Tensor::uniform_from(&[3, d, 5, 7], 0.0, 1.0, &mut rng).unwrap()).unwrap();
            let sub = dir.path().join(format!("d{d}"));
            export_frames(&v, &sub).unwrap();
            let back = import_frames(&sub).unwrap();
            assert_eq!(back.tensor().shape(), v.tensor().shape());
            assert!(back.tensor().max_abs_diff(v.tensor()).unwrap() <= 1.0 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn empty_and_mixed_dirs_fail() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(import_frames(dir.path()), Err(Error::Core(motia_core::Error::Input(_)))));
        std::fs::write(dir.path().join("a.pgm"), b"P5 2 2 255\n\0\0\0\0").unwrap();
        std::fs::write(dir.path().join("b.pgm"), b"P5 3 2 255\n\0\0\0\0\0\0").unwrap();
        assert!(matches!(import_frames(dir.path()), Err(Error::Core(motia_core::Error::Input(_)))));
    }

    #[test]
    fn header_comments_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.pgm"), b"P5\n# note\n2 1\n255\n\x00\xff").unwrap();
        let v = import_frames(dir.path()).unwrap();
        assert_eq!(v.tensor().data(), &[0.0, 1.0]);
    }
}
