//! Image representation and binary PPM/PGM input/output.
//!
//! Pixels are `f64` in `[0, 1]`, stored row-major as height x width x
//! channels. On disk the only formats are binary P6 (3-channel) and P5
//! (1-channel) with maxval 255, so files stay bit-exact across platforms.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        let img = Self { height, width, channels, data };
        img.validate()?;
        Ok(img)
    }

    /// Image filled with a constant value.
    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::precondition(format!(
                "image: channels must be 1 or 3, got {}",
                self.channels
            )));
        }
        let expect = self.height * self.width * self.channels;
        if self.data.len() != expect {
            return Err(Error::precondition(format!(
                "image: data length {} != {}x{}x{}",
                self.data.len(),
                self.height,
                self.width,
                self.channels
            )));
        }
        for (i, &v) in self.data.iter().enumerate() {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::precondition(format!(
                    "image: value {v} at index {i} outside [0, 1]"
                )));
            }
        }
        Ok(())
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        let i = self.index(y, x, c);
        self.data[i] = v;
    }
}

/// Writes binary PPM (P6, 3-channel) or PGM (P5, 1-channel), maxval 255.
/// Value `v` maps to byte `round(v * 255)`.
pub fn save_ppm(image: &Image, path: &Path) -> Result<()> {
    image.validate()?;
    let magic = match image.channels {
        3 => "P6",
        1 => "P5",
        _ => unreachable!(),
    };
    let mut out = Vec::with_capacity(32 + image.data.len());
    out.extend_from_slice(format!("{magic}\n{} {}\n255\n", image.width, image.height).as_bytes());
    for &v in &image.data {
        out.push((v * 255.0).round() as u8);
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

/// Reads binary P6/P5 with maxval 255. Byte `b` maps to `b / 255`.
pub fn load_ppm(path: &Path) -> Result<Image> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;

    let magic = read_token(&bytes, &mut pos)
        .ok_or_else(|| Error::format("ppm: missing magic number".to_string()))?;
    let channels = match magic.as_str() {
        "P6" => 3,
        "P5" => 1,
        other => {
            return Err(Error::format(format!(
                "ppm: magic number must be P6 or P5, got `{other}`"
            )))
        }
    };
    let width = read_usize(&bytes, &mut pos, "width")?;
    let height = read_usize(&bytes, &mut pos, "height")?;
    let maxval = read_usize(&bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(Error::format(format!("ppm: maxval must be 255, got {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the payload.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::format("ppm: missing whitespace after maxval".to_string()));
    }
    pos += 1;

    let expect = height * width * channels;
    let payload = &bytes[pos..];
    if payload.len() < expect {
        return Err(Error::format(format!(
            "ppm: payload truncated, expected {expect} bytes, got {}",
            payload.len()
        )));
    }
    let data = payload[..expect].iter().map(|&b| b as f64 / 255.0).collect();
    Image::new(height, width, channels, data)
}

/// Next whitespace-delimited header token, skipping `#` comment lines.
fn read_token(bytes: &[u8], pos: &mut usize) -> Option<String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if *pos > start {
        Some(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    } else {
        None
    }
}

fn read_usize(bytes: &[u8], pos: &mut usize, field: &str) -> Result<usize> {
    let tok = read_token(bytes, pos)
        .ok_or_else(|| Error::format(format!("ppm: missing {field} field")))?;
    tok.parse::<usize>()
        .map_err(|_| Error::format(format!("ppm: {field} must be an integer, got `{tok}`")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmpfile(name: &str) -> std::path::PathBuf {
        let dir = tempfile::tempdir().unwrap();
        // Leak the dir so the file survives until the test ends.
        let path = dir.path().join(name);
        std::mem::forget(dir);
        path
    }

    #[test]
    fn all_zero_image_writes_zero_payload() {
        let img = Image::filled(2, 2, 3, 0.0).unwrap();
        let path = tmpfile("zero.ppm");
        save_ppm(&img, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        let header = b"P6\n2 2\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], &[0u8; 12]);
    }

    #[test]
    fn endpoint_and_exact_values_round_trip() {
        // 1.0 -> 255 -> 1.0 and 0.4 -> 102 -> 0.4 exactly.
        let img = Image::new(1, 2, 1, vec![1.0, 0.4]).unwrap();
        let path = tmpfile("exact.pgm");
        save_ppm(&img, &path).unwrap();
        let back = load_ppm(&path).unwrap();
        assert_eq!(back.data[0], 1.0);
        assert_eq!(back.data[1], 0.4);
    }

    #[test]
    fn round_trip_error_bounded() {
        let vals: Vec<f64> = (0..256).map(|i| i as f64 / 255.9).collect();
        let img = Image::new(16, 16, 1, vals.clone()).unwrap();
        let path = tmpfile("rt.pgm");
        save_ppm(&img, &path).unwrap();
        let back = load_ppm(&path).unwrap();
        for (a, b) in vals.iter().zip(back.data.iter()) {
            assert!((a - b).abs() <= 1.0 / 510.0, "{a} vs {b}");
        }
    }

    #[test]
    fn malformed_inputs_name_the_field() {
        let path = tmpfile("bad.ppm");
        fs::write(&path, b"P4\n2 2\n255\n0000").unwrap();
        let err = load_ppm(&path).unwrap_err().to_string();
        assert!(err.contains("magic"), "{err}");

        fs::write(&path, b"P6\n2 2\n254\n000000000000").unwrap();
        let err = load_ppm(&path).unwrap_err().to_string();
        assert!(err.contains("maxval"), "{err}");

        fs::write(&path, b"P6\n2 2\n255\n000").unwrap();
        let err = load_ppm(&path).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");

        fs::write(&path, b"P6\n2 x\n255\n").unwrap();
        let err = load_ppm(&path).unwrap_err().to_string();
        assert!(err.contains("height"), "{err}");
    }

    #[test]
    fn header_comments_are_skipped() {
        let path = tmpfile("comment.pgm");
        fs::write(&path, b"P5\n# a comment\n1 1\n255\n\x80").unwrap();
        let img = load_ppm(&path).unwrap();
        assert_eq!(img.data[0], 128.0 / 255.0);
    }

    #[test]
    fn validate_rejects_out_of_range() {
        assert!(Image::new(1, 1, 3, vec![0.0, 0.5, 1.1]).is_err());
        assert!(Image::new(1, 1, 3, vec![0.0, f64::NAN, 0.0]).is_err());
        assert!(Image::new(1, 2, 3, vec![0.0; 5]).is_err());
        assert!(Image::new(1, 1, 2, vec![0.0; 2]).is_err());
    }
}
