//! Image arrays and binary PPM (P6) IO.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A batch of images, `(batch, channels, height, width)`, intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image(Tensor);

impl Image {
    pub fn new(t: Tensor) -> Result<Self> {
        t.dims4()?;
        Ok(Self(t))
    }

    pub fn filled(dims: [usize; 4], value: f64) -> Self {
        Self(Tensor::full(&dims, value))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn dims(&self) -> [usize; 4] {
        self.0.dims4().expect("image is rank 4")
    }

    pub fn data(&self) -> &[f64] {
        self.0.data()
    }

    /// Rejects NaN/inf pixels.
    pub fn validate(&self) -> Result<()> {
        if self.0.is_finite() {
            Ok(())
        } else {
            Err(Error::Validation("image contains non-finite values".into()))
        }
    }

    pub fn clip_unit(&self) -> Image {
        Image(self.0.map(|v| v.clamp(0.0, 1.0)))
    }

    /// Snaps every pixel to the nearest 8-bit level, as stored in a PPM file.
    pub fn quantize8(&self) -> Image {
        Image(self.0.map(|v| level_to_unit(unit_to_level(v))))
    }

    pub fn select(&self, index: usize) -> Image {
        Image(self.0.select_batch(index))
    }

    pub fn stack(items: &[Image]) -> Result<Image> {
        let ts: Vec<Tensor> = items.iter().map(|i| i.0.clone()).collect();
        Ok(Image(Tensor::stack_batch(&ts)?))
    }
}

/// Intensity of an 8-bit level. The value is snapped to a multiple of 2^-53
/// so the latent codec's affine map inverts it exactly.
pub fn level_to_unit(k: u8) -> f64 {
    const GRID: f64 = (1u64 << 53) as f64;
    ((k as f64 / 255.0) * GRID).round() / GRID
}

pub fn unit_to_level(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a single 3-channel image (batch 1) as binary PPM.
pub fn write_ppm(path: &Path, img: &Image) -> Result<()> {
    write_ppm_with_comment(path, img, None)
}

/// Like [`write_ppm`], with an optional `#` comment line in the header.
pub fn write_ppm_with_comment(path: &Path, img: &Image, comment: Option<&str>) -> Result<()> {
    let [b, c, h, w] = img.dims();
    if b != 1 || c != 3 {
        return Err(Error::Dimension(format!(
            "PPM needs a single 3-channel image, got {:?}",
            img.dims()
        )));
    }
    let note = comment
        .map(|c| format!("# {}\n", c.replace('\n', " ")))
        .unwrap_or_default();
    let mut bytes = format!("P6\n{note}{w} {h}\n255\n").into_bytes();
    bytes.reserve(3 * h * w);
    let d = img.data();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                bytes.push(unit_to_level(d[(ch * h + y) * w + x]));
            }
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0;
    let mut header = Vec::with_capacity(4);
    while header.len() < 4 {
        // skip whitespace and comments
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(path, "truncated PPM header"));
        }
        header.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    if header[0] != "P6" {
        return Err(Error::format(
            path,
            format!("expected P6 magic, found {:?}", header[0]),
        ));
    }
    let parse = |s: &str, what: &str| -> Result<usize> {
        s.parse::<usize>()
            .map_err(|_| Error::format(path, format!("bad {what} {s:?}")))
    };
    let w = parse(&header[1], "width")?;
    let h = parse(&header[2], "height")?;
    let maxval = parse(&header[3], "maxval")?;
    if maxval != 255 {
        return Err(Error::format(
            path,
            format!("only maxval 255 is supported, got {maxval}"),
        ));
    }
    let raster = bytes.get(pos..).unwrap_or_default();
    if raster.len() != 3 * w * h {
        return Err(Error::format(
            path,
            format!(
                "expected {} raster bytes, found {}",
                3 * w * h,
                raster.len()
            ),
        ));
    }
    let mut data = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                data[(ch * h + y) * w + x] = level_to_unit(raster[(y * w + x) * 3 + ch]);
            }
        }
    }
    Image::new(Tensor::from_raw(vec![1, 3, h, w], data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn levels_roundtrip() {
        for k in 0..=255u8 {
            assert_eq!(unit_to_level(level_to_unit(k)), k);
        }
        assert_eq!(level_to_unit(0), 0.0);
        assert_eq!(level_to_unit(255), 1.0);
    }

    #[test]
    fn ppm_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ppm");
        let data: Vec<f64> = (0..3 * 5 * 7)
            .map(|i| level_to_unit((i * 37 % 256) as u8))
            .collect();
        let img = Image::new(Tensor::new(vec![1, 3, 5, 7], data).unwrap()).unwrap();
        write_ppm(&path, &img).unwrap();
        let back = read_ppm(&path).unwrap();
        assert!(back.tensor().bit_eq(img.tensor()));
    }

    #[test]
    fn rejects_truncated_raster() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ppm");
        fs::write(&path, b"P6\n2 2\n255\n\x00\x01").unwrap();
        let err = read_ppm(&path).unwrap_err().to_string();
        assert!(err.contains("bad.ppm"), "{err}");
    }

    #[test]
    fn header_comments_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ppm");
        fs::write(&path, b"P6\n# made by hand\n1 1\n255\n\xff\x00\x80").unwrap();
        let img = read_ppm(&path).unwrap();
        assert_eq!(img.data()[0], 1.0);
        assert_eq!(img.data()[1], 0.0);
        assert_eq!(unit_to_level(img.data()[2]), 128);
    }
}
