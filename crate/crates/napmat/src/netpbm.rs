//! Binary netpbm images: P5 (graymap) and P6 (pixmap), 8-bit samples.

use std::fs;
use std::io::Write;
use std::path::Path;

use napmat_core::vit::Raster;

use crate::error::{CliError, Result};

fn header_token(data: &[u8], pos: &mut usize) -> Option<String> {
    loop {
        while *pos < data.len() && data[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < data.len() && data[*pos] == b'#' {
            while *pos < data.len() && data[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < data.len() && !data[*pos].is_ascii_whitespace() && data[*pos] != b'#' {
        *pos += 1;
    }
    (start < *pos).then(|| String::from_utf8_lossy(&data[start..*pos]).into_owned())
}

/// Decodes a P5 or P6 image. Samples with a maxval below 255 are rescaled to 0..=255.
pub fn decode(data: &[u8]) -> Result<Raster> {
    let bad = |msg: &str| CliError::Input(format!("netpbm: {msg}"));
    let mut pos = 0;
    let magic = header_token(data, &mut pos).ok_or_else(|| bad("empty file"))?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(bad(&format!("unsupported magic {other:?}, expected P5 or P6"))),
    };
    let mut field = |name: &str| -> Result<usize> {
        header_token(data, &mut pos)
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| bad(&format!("missing or malformed {name}")))
    };
    let width = field("width")?;
    let height = field("height")?;
    let maxval = field("maxval")?;
    if width == 0 || height == 0 {
        return Err(bad("zero image dimension"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(bad("only 8-bit images (maxval 1..=255) are supported"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = width * height * channels;
    let body = data.get(pos..pos + need).ok_or_else(|| bad("truncated raster data"))?;
    let pixels = if maxval == 255 {
        body.to_vec()
    } else {
        body.iter()
            .map(|&v| ((v.min(maxval as u8) as u32 * 255 + maxval as u32 / 2) / maxval as u32) as u8)
            .collect()
    };
    Raster::new(width, height, channels, pixels).map_err(|e| bad(&e.to_string()))
}

pub fn read(path: &Path) -> Result<Raster> {
    let data = fs::read(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    decode(&data).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

pub fn encode(image: &Raster) -> Vec<u8> {
    let magic = if image.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.data);
    out
}

pub fn write(path: &Path, image: &Raster) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    f.write_all(&encode(image))
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Every `.ppm` / `.pgm` file in `dir`, sorted by file name.
pub fn read_dir(dir: &Path) -> Result<Vec<(String, Raster)>> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::Input(format!("{}: {e}", dir.display())))?;
    let mut paths: Vec<_> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("ppm" | "pgm")))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((name, read(&p)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decodes_with_comments_and_rescales() {
        let mut data = b"P5\n# made by hand\n2 1\n# depth\n15\n".to_vec();
        data.extend_from_slice(&[0, 15]);
        let img = decode(&data).unwrap();
        assert_eq!((img.width, img.height, img.channels), (2, 1, 1));
        assert_eq!(img.data, vec![0, 255]);
    }

    #[test]
    fn round_trips_color() {
        let img = Raster::new(2, 2, 3, (0..12).collect()).unwrap();
        assert_eq!(decode(&encode(&img)).unwrap(), img);
    }

    #[test]
    fn rejects_malformed_input() {
        assert!(decode(b"P3\n1 1\n255\n0 0 0").is_err());
        assert!(decode(b"P6\n2 2\n255\n\x00\x01").is_err());
        assert!(decode(b"P5\n2 x\n255\n").is_err());
        assert!(decode(b"P5\n1 1\n65535\n\x00\x00").is_err());
        assert!(decode(b"").is_err());
    }
}
