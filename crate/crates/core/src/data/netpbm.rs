//! Binary NetPBM (P5 grayscale / P6 RGB) with maxval 255. The writer emits
//! a single canonical header so save/load round-trips are bit-exact.

use std::fs;
use std::path::Path;

use super::{DataError, ImageTensor};

fn parse_header_token<'a>(buf: &'a [u8], pos: &mut usize, path: &Path) -> Result<&'a [u8], DataError> {
    // skip whitespace and '#' comments
    loop {
        while *pos < buf.len() && buf[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < buf.len() && buf[*pos] == b'#' {
            while *pos < buf.len() && buf[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < buf.len() && !buf[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(DataError::Truncated {
            path: path.display().to_string(),
            expected: start + 1,
            found: buf.len(),
        });
    }
    Ok(&buf[start..*pos])
}

fn parse_number(token: &[u8]) -> Result<u32, DataError> {
    std::str::from_utf8(token)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| DataError::MalformedHeader {
            reason: format!("non-numeric header field {:?}", String::from_utf8_lossy(token)),
        })
}

pub fn load_netpbm(path: impl AsRef<Path>) -> Result<ImageTensor, DataError> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    if buf.len() < 2 {
        return Err(DataError::MalformedHeader {
            reason: "file shorter than a magic number".into(),
        });
    }
    let channels = match &buf[..2] {
        b"P5" => 1,
        b"P6" => 3,
        other => {
            return Err(DataError::UnsupportedVariant {
                variant: String::from_utf8_lossy(other).into_owned(),
            })
        }
    };
    let mut pos = 2;
    let width = parse_number(parse_header_token(&buf, &mut pos, path)?)? as usize;
    let height = parse_number(parse_header_token(&buf, &mut pos, path)?)? as usize;
    let maxval = parse_number(parse_header_token(&buf, &mut pos, path)?)?;
    if maxval != 255 {
        return Err(DataError::BadMaxval { maxval });
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let expected = height * width * channels;
    let raster = buf.get(pos..pos + expected).ok_or(DataError::Truncated {
        path: path.display().to_string(),
        expected: pos + expected,
        found: buf.len(),
    })?;
    ImageTensor::new(height, width, channels, raster.to_vec())
}

pub fn save_netpbm(image: &ImageTensor, path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    let magic = match image.channels {
        1 => "P5",
        3 => "P6",
        channels => return Err(DataError::InvalidChannels { channels }),
    };
    let mut buf = format!("{magic}\n{} {}\n255\n", image.width, image.height).into_bytes();
    buf.extend_from_slice(&image.pixels);
    fs::write(path, buf).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_hand_encoded_p5() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.pgm");
        std::fs::write(&p, b"P5\n2 2\n255\n\x0a\x14\x1e\x28").unwrap();
        let img = load_netpbm(&p).unwrap();
        assert_eq!((img.height, img.width, img.channels), (2, 2, 1));
        assert_eq!(img.pixels, vec![10, 20, 30, 40]);
    }

    #[test]
    fn parses_single_pixel_p6() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ppm");
        std::fs::write(&p, b"P6\n1 1\n255\n\x0a\x14\x1e").unwrap();
        let img = load_netpbm(&p).unwrap();
        assert_eq!((img.height, img.width, img.channels), (1, 1, 3));
        assert_eq!(img.pixels, vec![10, 20, 30]);
    }

    #[test]
    fn rejects_ascii_variant() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.pgm");
        std::fs::write(&p, b"P2\n1 1\n255\n0").unwrap();
        assert!(matches!(
            load_netpbm(&p),
            Err(DataError::UnsupportedVariant { variant }) if variant == "P2"
        ));
    }

    #[test]
    fn rejects_wrong_maxval() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.pgm");
        std::fs::write(&p, b"P5\n1 1\n65535\n\0\0").unwrap();
        assert!(matches!(load_netpbm(&p), Err(DataError::BadMaxval { maxval: 65535 })));
    }

    #[test]
    fn rejects_truncated_raster() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.pgm");
        std::fs::write(&p, b"P5\n2 2\n255\n\x01\x02").unwrap();
        assert!(matches!(load_netpbm(&p), Err(DataError::Truncated { .. })));
    }

    #[test]
    fn minimal_image_encoding() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.pgm");
        let img = ImageTensor::new(1, 1, 1, vec![0]).unwrap();
        save_netpbm(&img, &p).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"P5\n1 1\n255\n\0");
    }

    #[test]
    fn round_trip_identity() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ppm");
        let img = ImageTensor::new(3, 2, 3, (0..18).map(|i| (i * 13) as u8).collect()).unwrap();
        save_netpbm(&img, &p).unwrap();
        assert_eq!(load_netpbm(&p).unwrap(), img);
    }
}
